"""Command-line interface: simulate, fit, anomaly, ingest-check.

Every command is deterministic given its config and inputs. Outputs are CSV
tables and JSON reports plus rendered PNG figures in the output directory.
Exit codes: 0 success, 2 validation error, 3 fit/sampler error,
4 diagnostics-gate failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, plots
from .basis import build_basis
from .errors import (
    ConfigurationError,
    CurveDomainError,
    DatasetError,
    DegenerateConfigurationError,
    DiagnosticsError,
    FitError,
    HorizonError,
    PeakBloomError,
    SamplerError,
)
from .estimators import (
    DEFAULT_LAMBDA_GRID,
    PriorSpec,
    median_of,
    naive_estimate,
    select_lambda_gcv,
)
from .multisite import AnomalyConfig, anomaly_scores, curves_from_coefficients
from .posterior import map_draw, rhat_all, sample_posterior
from .simulation import TruthSpec, run_study, truth_curve

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FIT = 3
EXIT_GATE = 4

RHAT_GATE = 1.1


@dataclass
class RunConfig:
    """Resolved settings: command-line flags win over the config file."""

    q: int = 8
    degree: int = 3
    t_min: float = 0.0
    t_max: float = 180.0
    intercept_sd: float = 50.0
    increment_shape: float = 1.3
    increment_rate: float = 0.3
    chains: int = 10
    iterations: int = 3000
    warmup: int = 2500
    seed: int = 0
    link: str = "logit"
    lambda_mode: str = "gcv"
    lambdas: str = ""
    min_reports: int = 10
    horizon: int = 180
    variance_formula: str = "corrected"
    mcd_starts: int = 500
    mcd_h: int = 0  # 0: default floor((J+3)/2)
    anomaly_threshold: float = 0.0  # 0: chi-square default
    jobs: int = 1

    def basis(self):
        return build_basis(self.t_min, self.t_max, self.q, self.degree)

    def prior(self):
        return PriorSpec(intercept_sd=self.intercept_sd,
                         increment_shape=self.increment_shape,
                         increment_rate=self.increment_rate)


def load_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for name, fieldspec in RunConfig.__dataclass_fields__.items():
        caster = type(getattr(cfg, name))
        if name in file_values:
            setattr(cfg, name, caster(file_values[name]))
        flag = getattr(args, name, None)
        if flag is not None:
            setattr(cfg, name, caster(flag))
    return cfg


def _write_json(path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_names = [t.strip() for t in args.truth.split(",") if t.strip()]
    n_list = [int(n) for n in args.n.split(",") if n.strip()]
    reps = int(args.reps)
    for name in truth_names:
        if name == "normal":
            spec = TruthSpec.normal()
        elif name == "mixture":
            spec = TruthSpec.mixture()
        else:
            raise ConfigurationError(f"unknown truth {name!r} (use normal or mixture)")
        basis = cfg.basis()
        rows = []
        for n in n_list:
            results = run_study(spec, n, reps, seed=cfg.seed, basis=basis,
                                spline_link=args.spline_link, jobs=cfg.jobs)
            for r in results:
                rows.append({
                    "truth": name, "n": r.n_visits, "estimator": r.estimator,
                    "bias": r.bias, "rmse": r.rmse, "failures": r.failures,
                    "replications": r.replications, "seed": cfg.seed,
                })
        table = out_dir / f"study_{name}.csv"
        dataio.write_study_csv(table, rows)
        _write_json(out_dir / f"study_{name}_meta.json", {
            "schema_version": dataio.SCHEMA_VERSION,
            "truth": name,
            "truth_median_day": median_of(truth_curve(spec)),
            "replications": reps,
            "n_visits": n_list,
            "seed": cfg.seed,
            "spline_link": args.spline_link,
        })
        plots.plot_study(rows, name, out_dir / f"study_{name}.png")
        print(f"wrote {table}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _site_lambdas(cfg: RunConfig, data, basis) -> dict:
    sites = sorted(data)
    if cfg.lambda_mode == "fixed":
        parts = [float(x) for x in cfg.lambdas.split(",") if x.strip()]
        if len(parts) == 1:
            return {s: parts[0] for s in sites}
        if len(parts) != len(sites):
            raise ConfigurationError(
                f"{len(parts)} lambdas for {len(sites)} sites (order: sorted site ids)")
        return dict(zip(sites, parts))
    if cfg.lambda_mode != "gcv":
        raise ConfigurationError(f"unknown lambda mode {cfg.lambda_mode!r}")
    out = {}
    for s in sites:
        out[s], _ = select_lambda_gcv(data[s], basis, DEFAULT_LAMBDA_GRID,
                                      prior=None, link=cfg.link)
    return out


def cmd_fit(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, report = dataio.ingest(args.data, min_reports=cfg.min_reports)
    print(report.summary())
    if not data:
        raise DatasetError("no sites left after filtering")
    basis = cfg.basis()
    lambdas = _site_lambdas(cfg, data, basis)
    draws = sample_posterior(data, basis, prior=cfg.prior(), lambdas=lambdas,
                             seed=cfg.seed, chains=cfg.chains,
                             iterations=cfg.iterations, warmup=cfg.warmup,
                             link=cfg.link)
    for note in draws.warnings:
        print(f"warning: {note}")
    dataio.write_draws_artifact(out_dir / "draws", draws, basis)

    mp = map_draw(draws)
    days = np.arange(1, cfg.horizon + 1)
    curve_rows, site_rows = [], []
    for j, site in enumerate(draws.sites):
        beta_draws = draws.draws[:, :, j, :].reshape(-1, basis.q)
        values = curves_from_coefficients(beta_draws, basis, horizon=cfg.horizon,
                                          link=cfg.link, force_horizon=False)
        map_values = curves_from_coefficients(mp.coefficients[site][None, :], basis,
                                              horizon=cfg.horizon, link=cfg.link,
                                              force_horizon=False)[0]
        lo = np.percentile(values, 25.0, axis=0)
        hi = np.percentile(values, 75.0, axis=0)
        for d, fm, fl, fh in zip(days, map_values, lo, hi):
            curve_rows.append({"site_id": site, "day": int(d), "f_map": fm,
                               "f_lower50": fl, "f_upper50": fh})
        crosses = values > 0.5
        has_median = crosses.any(axis=1)
        medians = np.where(has_median, days[np.argmax(crosses, axis=1)], np.nan)
        map_median = (int(days[int(np.argmax(map_values > 0.5))])
                      if (map_values > 0.5).any() else None)
        naive = naive_estimate(data[site])
        site_rows.append({
            "site_id": site,
            "n_records": len(data[site]),
            "naive_day": naive if naive is not None else np.nan,
            "map_median_day": map_median if map_median is not None else np.nan,
            "median_lower50": (float(np.nanpercentile(medians, 25.0))
                               if has_median.any() else np.nan),
            "median_upper50": (float(np.nanpercentile(medians, 75.0))
                               if has_median.any() else np.nan),
            "lambda": lambdas[site],
            "degenerate": any(site in w for w in draws.warnings),
        })
    dataio.write_curves_csv(out_dir / "curves.csv", curve_rows)
    dataio.write_sites_csv(out_dir / "sites.csv", site_rows)

    rhats = rhat_all(draws)
    gate = dataio.write_diagnostics(out_dir / "diagnostics.csv", rhats,
                                    draws.sites, gate=RHAT_GATE)
    gate.update({"schema_version": dataio.SCHEMA_VERSION,
                 "map_chain": mp.chain, "map_iteration": mp.iteration,
                 "map_log_posterior": mp.log_posterior})
    _write_json(out_dir / "diagnostics.json", gate)
    plots.plot_site_curves(curve_rows, site_rows, out_dir / "fit_curves.png")
    print(f"max split-Rhat {gate['max_rhat']:.4f} "
          f"({'PASS' if gate['gate_pass'] else 'FAIL'} at {RHAT_GATE})")
    if not gate["gate_pass"]:
        return EXIT_GATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# anomaly
# ---------------------------------------------------------------------------

def cmd_anomaly(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    draws, basis = dataio.read_draws_artifact(args.draws)
    aconfig = AnomalyConfig(
        horizon=cfg.horizon,
        diagonal_formula=cfg.variance_formula,
        mcd_h=cfg.mcd_h or None,
        mcd_starts=cfg.mcd_starts,
        seed=cfg.seed,
        flag_threshold=cfg.anomaly_threshold or None,
    )
    report = anomaly_scores(draws, basis, aconfig)

    days = np.arange(1, cfg.horizon + 1)
    kept = draws.log_posterior.shape[1]
    map_flat = report.map_chain * kept + report.map_iteration
    marginal_rows = []
    others = [s for s in draws.sites if s not in report.flagged]
    site_curves = {}
    for j, site in enumerate(draws.sites):
        beta_draws = draws.draws[:, :, j, :].reshape(-1, basis.q)
        site_curves[site] = curves_from_coefficients(
            beta_draws, basis, horizon=cfg.horizon, link=draws.link,
            force_horizon=False)
    for site in report.flagged:
        values = site_curves[site]
        for d, fc, fl, fh in zip(days, values[map_flat],
                                 np.percentile(values, 25.0, axis=0),
                                 np.percentile(values, 75.0, axis=0)):
            marginal_rows.append({"group": site, "day": int(d), "f_center": fc,
                                  "lower50": fl, "upper50": fh})
    if others:
        avg = np.mean([site_curves[s] for s in others], axis=0)
        for d, fc, fl, fh in zip(days, avg[map_flat],
                                 np.percentile(avg, 25.0, axis=0),
                                 np.percentile(avg, 75.0, axis=0)):
            marginal_rows.append({"group": "others", "day": int(d), "f_center": fc,
                                  "lower50": fl, "upper50": fh})

    dataio.write_anomaly_report(out_dir, report, marginal_rows)
    plots.plot_anomaly(report, marginal_rows, out_dir / "anomaly.png")
    flagged = ", ".join(report.flagged) if report.flagged else "none"
    print(f"ranking: {', '.join(report.ranking)}")
    print(f"flagged (distance > {report.threshold:.3f}): {flagged}")
    if report.n_draws_dropped:
        print(f"note: {report.n_draws_dropped} draws dropped by the pipeline")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ingest-check
# ---------------------------------------------------------------------------

def cmd_ingest_check(args) -> int:
    cfg = resolve_config(args)
    data, report = dataio.ingest(args.data, min_reports=cfg.min_reports)
    print(report.summary())
    for site in report.sites_kept:
        c = data[site]
        print(f"  {site}: {len(c)} records, days {c.days.min()}..{c.days.max()}, "
              f"{int(c.positives.sum())}/{int(c.monitors.sum())} positive")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="flat key=value config file; flags win")
    sub.add_argument("--seed", type=int, help="master RNG seed")
    sub.add_argument("--jobs", type=int, help="worker processes for replications")
    sub.add_argument("--out-dir", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peakbloom",
        description="Monitoring-bias-corrected peak bloom estimation and anomaly detection",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="run the estimator benchmark studies")
    _add_common(sim)
    sim.add_argument("--truth", default="normal", help="comma list: normal,mixture")
    sim.add_argument("--n", default="40,50,60", help="comma list of visit counts")
    sim.add_argument("--reps", default="1000", help="replications per cell")
    sim.add_argument("--spline-link", default="probit", choices=["logit", "probit"],
                     help="outer CDF for the spline estimator in the study")
    sim.set_defaults(func=cmd_simulate)

    fit = subs.add_parser("fit", help="fit the multi-site posterior to a dataset")
    _add_common(fit)
    fit.add_argument("data", help="CSV with header site_id,day,monitors,positives")
    fit.add_argument("--chains", type=int)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--warmup", type=int)
    fit.add_argument("--q", type=int)
    fit.add_argument("--degree", type=int)
    fit.add_argument("--link", choices=["logit", "probit"])
    fit.add_argument("--lambda-mode", dest="lambda_mode", choices=["gcv", "fixed"])
    fit.add_argument("--lambdas", help="fixed mode: one value or per-site comma list")
    fit.add_argument("--min-reports", dest="min_reports", type=int)
    fit.set_defaults(func=cmd_fit)

    anom = subs.add_parser("anomaly", help="score sites from a draws artifact")
    _add_common(anom)
    anom.add_argument("--draws", required=True, help="draws directory from `fit`")
    anom.add_argument("--horizon", type=int)
    anom.add_argument("--variance-formula", dest="variance_formula",
                      choices=["corrected", "paper"])
    anom.add_argument("--mcd-starts", dest="mcd_starts", type=int)
    anom.add_argument("--mcd-h", dest="mcd_h", type=int)
    anom.add_argument("--threshold", dest="anomaly_threshold", type=float)
    anom.set_defaults(func=cmd_anomaly)

    chk = subs.add_parser("ingest-check", help="validate a dataset file")
    _add_common(chk)
    chk.add_argument("data", help="CSV with header site_id,day,monitors,positives")
    chk.add_argument("--min-reports", dest="min_reports", type=int)
    chk.set_defaults(func=cmd_ingest_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ConfigurationError, CurveDomainError, DiagnosticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FitError, SamplerError, DegenerateConfigurationError, HorizonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except PeakBloomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
