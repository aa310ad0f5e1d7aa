"""File formats: dataset ingestion, study tables, curves, draws, reports.

Input datasets are CSV with header ``site_id,day,monitors,positives``.
Tables go out as CSV with a ``schema_version`` column; structured reports as
JSON with a ``schema_version`` field. Posterior draws serialize to a
columnar CSV (one row per chain/iteration/site/coefficient) next to a
``meta.json`` carrying the basis and sampler settings needed to rebuild.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .basis import MonotoneBasis, build_basis
from .errors import DatasetError
from .estimators import BloomCurve, SiteCounts
from .posterior import PosteriorDraws

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "IngestReport",
    "ingest",
    "write_study_csv",
    "write_curves_csv",
    "read_curves_csv",
    "write_sites_csv",
    "write_diagnostics",
    "write_draws_artifact",
    "read_draws_artifact",
    "write_anomaly_report",
]


@dataclass
class IngestReport:
    path: str
    n_rows: int
    sites_kept: tuple
    dropped: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"{self.path}: {self.n_rows} rows, {len(self.sites_kept)} sites kept"]
        for site, reason in sorted(self.dropped.items()):
            lines.append(f"  dropped {site}: {reason}")
        return "\n".join(lines)


def ingest(path, min_reports: int = 10, day_range=(1, 180)):
    """Parse, validate, and aggregate a dataset file.

    Duplicate (site, day) rows are summed; sites with fewer aggregated
    report records than ``min_reports`` are dropped and listed in the
    report. Malformed rows raise :class:`DatasetError` with the line number.
    """
    path = Path(path)
    per_site: dict = {}
    n_rows = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("empty file") from None
        expected = ["site_id", "day", "monitors", "positives"]
        if [h.strip() for h in header] != expected:
            raise DatasetError(f"header must be {','.join(expected)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DatasetError(f"expected 4 fields, got {len(row)}", line=lineno)
            site = row[0].strip()
            if not site:
                raise DatasetError("empty site_id", line=lineno)
            try:
                day, monitors, positives = int(row[1]), int(row[2]), int(row[3])
            except ValueError:
                raise DatasetError(f"non-integer field in {row[1:]}", line=lineno) from None
            if not day_range[0] <= day <= day_range[1]:
                raise DatasetError(f"day {day} outside {day_range}", line=lineno)
            if monitors < 1:
                raise DatasetError(f"monitors must be >= 1, got {monitors}", line=lineno)
            if not 0 <= positives <= monitors:
                raise DatasetError(
                    f"need 0 <= positives <= monitors, got {positives}/{monitors}",
                    line=lineno)
            n_rows += 1
            day_map = per_site.setdefault(site, {})
            m, y = day_map.get(day, (0, 0))
            day_map[day] = (m + monitors, y + positives)

    data, dropped = {}, {}
    for site, day_map in per_site.items():
        if len(day_map) < min_reports:
            dropped[site] = f"{len(day_map)} report records < min_reports={min_reports}"
            continue
        days = np.array(sorted(day_map))
        monitors = np.array([day_map[d][0] for d in days])
        positives = np.array([day_map[d][1] for d in days])
        data[site] = SiteCounts(days=days, positives=positives, monitors=monitors)
    report = IngestReport(path=str(path), n_rows=n_rows,
                          sites_kept=tuple(sorted(data)), dropped=dropped)
    return data, report


# ---------------------------------------------------------------------------
# Study tables
# ---------------------------------------------------------------------------

def write_study_csv(path, rows: list[dict]):
    """rows carry truth, n, estimator, bias, rmse, failures, replications, seed."""
    df = pd.DataFrame(rows)
    df.insert(0, "schema_version", SCHEMA_VERSION)
    df.to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def write_curves_csv(path, curve_rows: list[dict]):
    """curve_rows carry site_id, day, f_map, f_lower50, f_upper50."""
    df = pd.DataFrame(curve_rows)
    df.insert(0, "schema_version", SCHEMA_VERSION)
    df.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def read_curves_csv(path) -> dict:
    """Rebuild per-site MAP BloomCurves from a curves CSV."""
    df = pd.read_csv(path)
    out = {}
    for site, grp in df.groupby("site_id", sort=True):
        grp = grp.sort_values("day")
        out[str(site)] = BloomCurve(days=grp["day"].to_numpy(),
                                    values=grp["f_map"].to_numpy(),
                                    source="spline")
    return out


def write_sites_csv(path, site_rows: list[dict]):
    df = pd.DataFrame(site_rows)
    df.insert(0, "schema_version", SCHEMA_VERSION)
    df.to_csv(path, index=False, lineterminator="\n")


def write_diagnostics(path, rhat_values: np.ndarray, sites, gate: float = 1.1):
    """Per-parameter split-Rhat table plus the overall mixing gate verdict."""
    rows = []
    for j, site in enumerate(sites):
        for k in range(rhat_values.shape[1]):
            rows.append({"site_id": site, "coef": k, "rhat": rhat_values[j, k]})
    df = pd.DataFrame(rows)
    df.insert(0, "schema_version", SCHEMA_VERSION)
    df.to_csv(path, index=False, float_format="%.8g", lineterminator="\n")
    max_rhat = float(np.max(rhat_values))
    return {"max_rhat": max_rhat, "gate": gate, "gate_pass": bool(max_rhat < gate)}


# ---------------------------------------------------------------------------
# Posterior draws artifact
# ---------------------------------------------------------------------------

def write_draws_artifact(out_dir, draws: PosteriorDraws, basis: MonotoneBasis):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chains, kept, J, q = draws.draws.shape
    ch, it, js, ks = np.meshgrid(np.arange(chains), np.arange(kept),
                                 np.arange(J), np.arange(q), indexing="ij")
    df = pd.DataFrame({
        "chain": ch.ravel(),
        "iteration": it.ravel(),
        "site_id": np.asarray(draws.sites, dtype=object)[js.ravel()],
        "coef": ks.ravel(),
        "value": draws.draws.ravel(),
    })
    df.to_csv(out_dir / "draws.csv", index=False, float_format="%.17g",
              lineterminator="\n")
    lp = pd.DataFrame({
        "chain": np.repeat(np.arange(chains), kept),
        "iteration": np.tile(np.arange(kept), chains),
        "log_posterior": draws.log_posterior.ravel(),
    })
    lp.to_csv(out_dir / "logpost.csv", index=False, float_format="%.17g",
              lineterminator="\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "sites": list(draws.sites),
        "basis": {"t_min": basis.t_min, "t_max": basis.t_max,
                  "q": basis.q, "degree": basis.degree},
        "chains": draws.chains,
        "iterations": draws.iterations,
        "warmup": draws.warmup,
        "seed": draws.seed,
        "lambdas": {str(k): v for k, v in draws.lambdas.items()},
        "link": draws.link,
        "warnings": list(draws.warnings),
    }
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_draws_artifact(in_dir):
    """Rebuild (PosteriorDraws, MonotoneBasis) from a draws directory."""
    in_dir = Path(in_dir)
    with open(in_dir / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    sites = tuple(meta["sites"])
    b = meta["basis"]
    basis = build_basis(b["t_min"], b["t_max"], b["q"], b["degree"])
    df = pd.read_csv(in_dir / "draws.csv")
    chains = int(df["chain"].max()) + 1
    kept = int(df["iteration"].max()) + 1
    q = int(df["coef"].max()) + 1
    site_idx = {s: j for j, s in enumerate(sites)}
    arr = np.empty((chains, kept, len(sites), q))
    arr[df["chain"], df["iteration"], df["site_id"].map(site_idx), df["coef"]] = df["value"]
    lp_df = pd.read_csv(in_dir / "logpost.csv")
    lp = np.empty((chains, kept))
    lp[lp_df["chain"], lp_df["iteration"]] = lp_df["log_posterior"]
    draws = PosteriorDraws(
        draws=arr,
        log_posterior=lp,
        sites=sites,
        chains=meta["chains"],
        iterations=meta["iterations"],
        warmup=meta["warmup"],
        seed=meta["seed"],
        lambdas={k: float(v) for k, v in meta["lambdas"].items()},
        link=meta["link"],
        warnings=list(meta.get("warnings", [])),
    )
    return draws, basis


# ---------------------------------------------------------------------------
# Anomaly report
# ---------------------------------------------------------------------------

def write_anomaly_report(out_dir, report, marginal_rows=None):
    """JSON report plus a plot-ready CSV; optional marginal-curve CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "anomaly.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = []
    for j, site in enumerate(report.sites):
        rows.append({
            "site_id": site,
            "map_distance": report.map_distance[j],
            "lower50": report.lower50[j],
            "upper50": report.upper50[j],
            "flagged": site in report.flagged,
        })
    df = pd.DataFrame(rows)
    df.insert(0, "schema_version", SCHEMA_VERSION)
    df.to_csv(out_dir / "anomaly.csv", index=False, float_format="%.12g",
              lineterminator="\n")
    if marginal_rows is not None:
        mdf = pd.DataFrame(marginal_rows)
        mdf.insert(0, "schema_version", SCHEMA_VERSION)
        mdf.to_csv(out_dir / "marginals.csv", index=False, float_format="%.12g",
                   lineterminator="\n")
