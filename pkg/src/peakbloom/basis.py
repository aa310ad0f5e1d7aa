"""Cubic B-spline basis with a monotone shape constraint and difference penalty.

A fitted curve is eta(t) = B(t)' S btilde, where B(t) is the B-spline basis
row at day t, S is the lower-triangular prefix-sum matrix, and
btilde = [b_1, exp(b_2), ..., exp(b_q)] keeps every increment positive.
Because the prefix sums of btilde are nondecreasing and the basis functions
are ordered left to right, eta is nondecreasing in t for any real b.

The smoothness penalty is b' P b with P = Ptil' Ptil, where Ptil differences
adjacent coefficients 2..q, so b' P b = sum_{k=2}^{q-1} (b_k - b_{k+1})^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError, CurveDomainError

__all__ = [
    "MonotoneBasis",
    "build_basis",
    "shape_matrix",
    "penalty_root",
    "basis_matrix",
    "eval_basis_row",
    "transform_coefficients",
    "eval_monotone_link",
]


def shape_matrix(q: int) -> np.ndarray:
    """Lower-triangular 0/1 matrix mapping increments to prefix sums."""
    return np.tril(np.ones((q, q)))


def penalty_root(q: int) -> np.ndarray:
    """First-difference operator on coefficients 2..q (zero elsewhere).

    Row k (1-based, 2 <= k < q) has +1 at (k, k) and -1 at (k, k+1); all
    other rows are zero, so the intercept b_1 is never penalized.
    """
    ptil = np.zeros((q, q))
    for k in range(1, q - 1):  # 0-based rows 1..q-2 == 1-based 2..q-1
        ptil[k, k] = 1.0
        ptil[k, k + 1] = -1.0
    return ptil


@dataclass(frozen=True)
class MonotoneBasis:
    """Immutable bundle of knots plus the shape and penalty matrices.

    ``grid`` is the equidistant knot grid including both endpoints;
    ``knots`` is the full clamped vector with each boundary repeated
    degree + 1 times so the basis spans constants at the edges.
    """

    grid: np.ndarray
    knots: np.ndarray
    degree: int
    q: int
    shape: np.ndarray = field(repr=False)
    penalty_root: np.ndarray = field(repr=False)
    penalty: np.ndarray = field(repr=False)

    @property
    def t_min(self) -> float:
        return float(self.grid[0])

    @property
    def t_max(self) -> float:
        return float(self.grid[-1])


def build_basis(t_min: float, t_max: float, q: int = 8, degree: int = 3) -> MonotoneBasis:
    """Build the clamped B-spline basis on an equidistant knot grid.

    ``q`` is the basis dimension; the grid has q - degree + 1 points, e.g.
    (0, 180, q=8, degree=3) gives the grid [0, 36, 72, 108, 144, 180].
    """
    if t_min >= t_max:
        raise ConfigurationError(f"need t_min < t_max, got [{t_min}, {t_max}]")
    if degree < 0:
        raise ConfigurationError(f"degree must be nonnegative, got {degree}")
    if q < degree + 1:
        raise ConfigurationError(f"q={q} too small for degree {degree}; need q >= degree + 1")
    n_grid = q - degree + 1
    grid = np.linspace(t_min, t_max, n_grid)
    knots = np.concatenate([np.full(degree, t_min), grid, np.full(degree, t_max)])
    ptil = penalty_root(q)
    return MonotoneBasis(
        grid=grid,
        knots=knots,
        degree=degree,
        q=q,
        shape=shape_matrix(q),
        penalty_root=ptil,
        penalty=ptil.T @ ptil,
    )


def basis_matrix(basis: MonotoneBasis, t) -> np.ndarray:
    """Evaluate all basis functions at each day in ``t``; shape (len(t), q)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size and (t.min() < basis.t_min or t.max() > basis.t_max):
        raise CurveDomainError(
            f"evaluation day outside [{basis.t_min}, {basis.t_max}]"
        )
    if t.size == 0:
        return np.zeros((0, basis.q))
    return BSpline.design_matrix(t, basis.knots, basis.degree, extrapolate=False).toarray()


def eval_basis_row(basis: MonotoneBasis, t: float) -> np.ndarray:
    """Basis row B(t); entries are nonnegative and sum to one."""
    return basis_matrix(basis, [t])[0]


def transform_coefficients(beta) -> np.ndarray:
    """Map unconstrained b to btilde = [b_1, exp(b_2), ..., exp(b_q)]."""
    btilde = np.array(beta, dtype=float)
    btilde[..., 1:] = np.exp(btilde[..., 1:])
    return btilde


def eval_monotone_link(basis: MonotoneBasis, beta, t):
    """eta(t) = B(t)' S btilde; nondecreasing in t for any real beta."""
    btilde = transform_coefficients(np.asarray(beta, dtype=float))
    if btilde.shape != (basis.q,):
        raise ConfigurationError(f"coefficient vector must have length {basis.q}")
    rows = basis_matrix(basis, t)
    eta = rows @ (basis.shape @ btilde)
    return float(eta[0]) if np.isscalar(t) or np.ndim(t) == 0 else eta
