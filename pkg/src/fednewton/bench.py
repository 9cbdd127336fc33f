"""Desk-scale simulation harness with a CLI.

Three experiments are wired up: accuracy of the four information estimators
over a grid of perturbation scales, convergence of the iterative algorithms
toward the pooled oracle, and coverage of the one-step Wald intervals. Each
writes one CSV of aggregated rows plus a JSON manifest capturing the resolved
configuration; given the same configuration and seed the CSV bytes are
identical run to run (only the manifest timestamp differs).

Replications are seeded per (config seed, cell index, replication index), and
centers within a replication draw from per-center streams, so any subset of
cells or replications can be reproduced in isolation. Replications whose
cross-center Gram matrix is singular, whose local fits fail, or whose traces
diverge are counted in the ``skipped`` column and never silently dropped.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from . import __version__
from .comm import (
    FitError,
    broadcast_and_collect_gradients,
    collect_m_estimators,
    make_federation,
    pooled_oracle_fit,
)
from .fisher import (
    KIND_GM,
    SingularDesignError,
    fisher_error,
    global_hessian_estimate,
    gm_fisher_estimate,
    inverse_fisher_error,
    local_hessian_estimate,
    mg_fisher_estimate,
    reference_fisher,
)
from .model import (
    COVARIATE_LAWS,
    FAMILIES,
    LOGISTIC,
    POISSON,
    STD_NORMAL,
    ModelSpec,
    default_theta0,
    dump_federation_csv,
    generate_federation,
)
from .solver import (
    OS_AVG,
    OS_CSL,
    OS_GM,
    OS_MG,
    STATUS_OK,
    confidence_intervals,
    one_step_suite,
    oracle_distance,
    run_csl,
    run_global_newton,
    run_gm_newton,
    run_mg_newton,
)

EXPERIMENT_FISHER = "fisher_accuracy"
EXPERIMENT_ITERATIVE = "iterative"
EXPERIMENT_ONESTEP = "onestep_coverage"
EXPERIMENTS = (EXPERIMENT_FISHER, EXPERIMENT_ITERATIVE, EXPERIMENT_ONESTEP)

REFERENCE_SAMPLES = 2_000_000
REFERENCE_SEED = 20_260_808

FAST_GRID = [100, 400]

CSV_COLUMNS = [
    "experiment",
    "family",
    "covariate_law",
    "d",
    "n",
    "m",
    "sigma2",
    "t",
    "method",
    "statistic",
    "value",
    "reps",
    "mcStdErr",
    "skipped",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    """Resolved knobs for one experiment run.

    The true coefficient vector is always d**(-1/2) * ones; only its dimension
    is configurable. sigma2_grid is consumed by the Fisher-accuracy experiment
    alone, t_max by the iterative one, level by the coverage one.
    """

    experiment: str
    family: str = LOGISTIC
    d: int = 4
    covariate_law: str = STD_NORMAL
    n_grid: list[int] = field(default_factory=lambda: [100, 200, 400, 800])
    m_grid: list[int] = field(default_factory=lambda: [100, 200, 400, 800])
    sigma2_grid: list[float] = field(default_factory=lambda: [1 / 16, 1 / 256, 1 / 65536])
    reps: int = 500
    seed: int = 0
    t_max: int = 3
    level: float = 0.95
    out_dir: str = "out"

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ConfigError(f"unknown covariate law {self.covariate_law!r}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.n_grid or not self.m_grid:
            raise ConfigError("grids must be non-empty")
        if any(n <= self.d for n in self.n_grid):
            raise ConfigError("every n must exceed d")
        if self.experiment == EXPERIMENT_FISHER and not self.sigma2_grid:
            raise ConfigError("fisher accuracy needs a non-empty sigma2 grid")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def spec(self, seed: int) -> ModelSpec:
        return ModelSpec(
            family=self.family,
            d=self.d,
            theta0=default_theta0(self.d),
            covariate_law=self.covariate_law,
            seed=seed,
        )


def default_config(experiment: str) -> ExperimentConfig:
    if experiment == EXPERIMENT_FISHER:
        return ExperimentConfig(experiment=experiment, family=LOGISTIC, d=4)
    if experiment == EXPERIMENT_ITERATIVE:
        return ExperimentConfig(experiment=experiment, family=POISSON, d=4)
    if experiment == EXPERIMENT_ONESTEP:
        return ExperimentConfig(
            experiment=experiment,
            family=LOGISTIC,
            d=2,
            n_grid=[100, 200, 400, 800, 1600],
            m_grid=[100, 200, 400, 800, 1600],
        )
    raise ConfigError(f"unknown experiment {experiment!r}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(payload: dict, experiment: str | None = None) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config payload must be a JSON object")
    data = dict(payload)
    if experiment is not None:
        data["experiment"] = experiment
    if "experiment" not in data:
        raise ConfigError("config is missing the experiment field")
    base = default_config(data["experiment"])
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    merged = dataclasses.replace(base, **data)
    merged.n_grid = [int(v) for v in merged.n_grid]
    merged.m_grid = [int(v) for v in merged.m_grid]
    merged.sigma2_grid = [float(v) for v in merged.sigma2_grid]
    merged.validate()
    return merged


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


# --------------------------------------------------------------------------
# Seeding and aggregation helpers
# --------------------------------------------------------------------------


def _cell_seed(base_seed: int, cell_index: int) -> int:
    return int(SeedSequence((int(base_seed), int(cell_index))).generate_state(1, np.uint64)[0])


def _aux_rng(cell_seed: int, rep: int, m: int) -> Generator:
    # Center streams use slots 0..m, so slot m + 1 is free for auxiliary draws.
    return Generator(Philox(SeedSequence((int(cell_seed), int(rep), int(m) + 1))))


def _fmt_value(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return format(v, ".6g")
    return str(v)


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(np.mean(arr))
    se = float(np.std(arr, ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, se


def _quantile_se(values: np.ndarray, kind: str) -> float:
    # Normal-theory scale factors for the sampling error of sample quantiles;
    # crude but monotone in 1/sqrt(reps), which is all downstream checks need.
    if values.size < 2:
        return 0.0
    sd = float(np.std(values, ddof=1))
    factor = 1.2533 if kind == "median" else 1.3626
    return factor * sd / math.sqrt(values.size)


def _row(cfg: ExperimentConfig, **kw) -> dict:
    row = {
        "experiment": cfg.experiment,
        "family": cfg.family,
        "covariate_law": cfg.covariate_law,
        "d": cfg.d,
        "n": "",
        "m": "",
        "sigma2": "",
        "t": "",
        "method": "",
        "statistic": "",
        "value": "",
        "reps": "",
        "mcStdErr": "",
        "skipped": "",
    }
    row.update(kw)
    return row


def write_rows_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_value(row[c]) for c in CSV_COLUMNS) + "\n")


def write_manifest(cfg: ExperimentConfig, cache_keys: list[str], out_dir: str) -> str:
    """Resolved config + version + reference cache keys, one timestamp field."""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "config": config_to_dict(cfg),
        "version": __version__,
        "seed": cfg.seed,
        "reference_fisher_cache_keys": sorted(cache_keys),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# Experiment drivers
# --------------------------------------------------------------------------


def run_fisher_accuracy(cfg: ExperimentConfig) -> tuple[list[dict], int, list[str]]:
    """Per (sigma2, n, m) cell: draw a federation, perturb theta, measure the
    relative error of all four information estimates. Returns (rows, number of
    cells with zero successful replications, reference cache keys)."""
    cfg.validate()
    ref_cache = os.path.join(cfg.out_dir, "ref_cache")
    truth_spec = cfg.spec(seed=0)
    ref = reference_fisher(truth_spec, REFERENCE_SAMPLES, REFERENCE_SEED, cache_dir=ref_cache)
    methods = ["LC", "GL", "MG", "GM"]
    rows: list[dict] = []
    dead_cells = 0
    cell_index = 0
    for sigma2 in cfg.sigma2_grid:
        for n in cfg.n_grid:
            for m in cfg.m_grid:
                seed = _cell_seed(cfg.seed, cell_index)
                spec = cfg.spec(seed)
                acc = {(meth, stat): [] for meth in methods for stat in ("fisher_error", "inverse_fisher_error")}
                skipped = 0
                for rep in range(cfg.reps):
                    rng = _aux_rng(seed, rep, m)
                    try:
                        fed = make_federation(spec, m, n, rep=rep)
                        theta_hats, theta_bar, _ = collect_m_estimators(fed)
                        theta = spec.theta0 + math.sqrt(sigma2) * rng.standard_normal(cfg.d)
                        grads, grad_bar, _ = broadcast_and_collect_gradients(fed, theta)
                        estimates = {
                            "LC": local_hessian_estimate(fed, theta),
                            "GL": global_hessian_estimate(fed, theta),
                            "MG": mg_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, theta),
                            "GM": gm_fisher_estimate(theta_hats, theta_bar, grads, grad_bar, theta),
                        }
                        values = {}
                        for meth, est in estimates.items():
                            if est.kind == KIND_GM:
                                info = np.linalg.inv(est.matrix)
                            else:
                                info = est.matrix
                            values[(meth, "fisher_error")] = fisher_error(info, ref.matrix)
                            values[(meth, "inverse_fisher_error")] = inverse_fisher_error(info, ref.matrix)
                    except (SingularDesignError, FitError, np.linalg.LinAlgError):
                        skipped += 1
                        continue
                    for key, val in values.items():
                        acc[key].append(val)
                n_ok = cfg.reps - skipped
                if n_ok == 0:
                    dead_cells += 1
                for meth in methods:
                    for stat in ("fisher_error", "inverse_fisher_error"):
                        vals = acc[(meth, stat)]
                        mean, se = _mean_se(vals) if vals else (float("nan"), float("nan"))
                        rows.append(
                            _row(cfg, n=n, m=m, sigma2=float(sigma2), method=meth, statistic=stat,
                                 value=mean, reps=n_ok, mcStdErr=se, skipped=skipped)
                        )
                cell_index += 1
    return rows, dead_cells, [ref.cache_key]


_ITER_RUNNERS = {"CSL": run_csl, "GL": run_global_newton, "MG": run_mg_newton, "GM": run_gm_newton}


def run_iterative(cfg: ExperimentConfig) -> tuple[list[dict], int, list[str]]:
    """Per (n, m) cell: run the four algorithms from the average M-estimator
    and summarize the relative oracle distance per round."""
    cfg.validate()
    methods = list(_ITER_RUNNERS)
    rows: list[dict] = []
    dead_cells = 0
    cell_index = 0
    for n in cfg.n_grid:
        for m in cfg.m_grid:
            seed = _cell_seed(cfg.seed, cell_index)
            spec = cfg.spec(seed)
            dists = {meth: [[] for _ in range(cfg.t_max + 1)] for meth in methods}
            skipped = {meth: 0 for meth in methods}
            broken_reps = 0
            for rep in range(cfg.reps):
                try:
                    fed = make_federation(spec, m, n, rep=rep)
                    star = pooled_oracle_fit(fed)
                except FitError:
                    broken_reps += 1
                    for meth in methods:
                        skipped[meth] += 1
                    continue
                for meth, runner in _ITER_RUNNERS.items():
                    try:
                        trace = runner(fed, "average_m_est", cfg.t_max, theta_star=star)
                    except (SingularDesignError, FitError, np.linalg.LinAlgError):
                        skipped[meth] += 1
                        continue
                    if trace.status != STATUS_OK or len(trace.rounds) != cfg.t_max + 1:
                        skipped[meth] += 1
                        continue
                    for r in trace.rounds:
                        dists[meth][r.t].append(r.delta_oracle)
            if broken_reps == cfg.reps:
                dead_cells += 1
            for meth in methods:
                n_ok = cfg.reps - skipped[meth]
                for t in range(cfg.t_max + 1):
                    vals = np.asarray(dists[meth][t], dtype=float)
                    if vals.size:
                        q1, med, q3 = np.percentile(vals, [25, 50, 75])
                    else:
                        q1 = med = q3 = float("nan")
                    for stat, val, kind in (
                        ("oracle_dist_median", med, "median"),
                        ("oracle_dist_q1", q1, "quartile"),
                        ("oracle_dist_q3", q3, "quartile"),
                    ):
                        rows.append(
                            _row(cfg, n=n, m=m, t=t, method=meth, statistic=stat,
                                 value=float(val), reps=n_ok,
                                 mcStdErr=_quantile_se(vals, kind), skipped=skipped[meth])
                        )
            cell_index += 1
    return rows, dead_cells, []


def run_onestep_coverage(cfg: ExperimentConfig) -> tuple[list[dict], int, list[str]]:
    """Per (n, m) cell: coverage of the first coordinate for both adjusted
    one-step estimators plus the mean distance to the oracle for all four
    one-step methods."""
    cfg.validate()
    methods = [OS_MG, OS_GM, OS_CSL, OS_AVG]
    rows: list[dict] = []
    dead_cells = 0
    cell_index = 0
    theta0 = default_theta0(cfg.d)
    for n in cfg.n_grid:
        for m in cfg.m_grid:
            seed = _cell_seed(cfg.seed, cell_index)
            spec = cfg.spec(seed)
            covered = {OS_MG: [], OS_GM: []}
            dist = {meth: [] for meth in methods}
            skipped = 0
            for rep in range(cfg.reps):
                try:
                    fed = make_federation(spec, m, n, rep=rep)
                    star = pooled_oracle_fit(fed)
                    suite = one_step_suite(fed)
                    for res in (suite.mg, suite.gm, suite.csl, suite.avg):
                        if not np.all(np.isfinite(res.theta_os)):
                            raise FitError("one-step estimate is not finite", center_ids=[])
                    for key, res in ((OS_MG, suite.mg), (OS_GM, suite.gm)):
                        ci = confidence_intervals(res, n, m, cfg.level)[0]
                        covered[key].append(int(ci.lower <= theta0[0] <= ci.upper))
                    for key, res in (
                        (OS_MG, suite.mg), (OS_GM, suite.gm), (OS_CSL, suite.csl), (OS_AVG, suite.avg),
                    ):
                        dist[key].append(float(np.linalg.norm(res.theta_os - star)))
                except (SingularDesignError, FitError, np.linalg.LinAlgError, ValueError):
                    skipped += 1
                    continue
            n_ok = cfg.reps - skipped
            if n_ok == 0:
                dead_cells += 1
            for meth in (OS_MG, OS_GM):
                flags = covered[meth]
                if flags:
                    p = float(np.mean(flags))
                    se = math.sqrt(max(p * (1.0 - p), 0.0) / len(flags))
                else:
                    p, se = float("nan"), float("nan")
                rows.append(
                    _row(cfg, n=n, m=m, method=meth, statistic="coverage",
                         value=p, reps=n_ok, mcStdErr=se, skipped=skipped)
                )
            for meth in methods:
                mean, se = _mean_se(dist[meth]) if dist[meth] else (float("nan"), float("nan"))
                rows.append(
                    _row(cfg, n=n, m=m, method=meth, statistic="mean_oracle_dist",
                         value=mean, reps=n_ok, mcStdErr=se, skipped=skipped)
                )
            cell_index += 1
    return rows, dead_cells, []


def run_gen(cfg: ExperimentConfig) -> str:
    """Dump one federation (first grid cell) as a CSV dataset."""
    cfg.validate()
    seed = _cell_seed(cfg.seed, 0)
    centers = generate_federation(cfg.spec(seed), cfg.m_grid[0], cfg.n_grid[0], rep=0)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "dataset.csv")
    dump_federation_csv(centers, path)
    return path


_EXPERIMENT_DRIVERS = {
    EXPERIMENT_FISHER: (run_fisher_accuracy, "fisher_accuracy.csv"),
    EXPERIMENT_ITERATIVE: (run_iterative, "iterative.csv"),
    EXPERIMENT_ONESTEP: (run_onestep_coverage, "onestep_coverage.csv"),
}


def run_experiment(cfg: ExperimentConfig) -> tuple[str, int]:
    """Run a configured experiment; write CSV + manifest; return (csv path,
    count of cells where every replication failed)."""
    driver, filename = _EXPERIMENT_DRIVERS[cfg.experiment]
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows, dead_cells, cache_keys = driver(cfg)
    path = os.path.join(cfg.out_dir, filename)
    write_rows_csv(rows, path)
    write_manifest(cfg, cache_keys, cfg.out_dir)
    return path, dead_cells


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

_COMMAND_EXPERIMENT = {
    "fisher-acc": EXPERIMENT_FISHER,
    "iterate": EXPERIMENT_ITERATIVE,
    "onestep": EXPERIMENT_ONESTEP,
}


def _resolve_config(args: argparse.Namespace, experiment: str) -> ExperimentConfig:
    payload = load_config_file(args.config) if args.config else {}
    cfg = config_from_dict(payload, experiment=experiment)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.reps is not None:
        cfg.reps = args.reps
    if args.out is not None:
        cfg.out_dir = args.out
    if args.fast:
        cfg.n_grid = list(FAST_GRID)
        cfg.m_grid = list(FAST_GRID)
    cfg.validate()
    return cfg


def _add_common_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON config file mirroring ExperimentConfig")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.add_argument("--reps", type=int, help="override the replication count")
    sp.add_argument("--fast", action="store_true", help="trim both grids to {100, 400}")
    sp.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fednewton", description="Distributed Newton-type estimation benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("fisher-acc", "information-estimator accuracy over a (sigma2, n, m) grid"),
        ("iterate", "iterative algorithms' distance to the pooled oracle"),
        ("onestep", "one-step estimator coverage and oracle distance"),
        ("gen", "dump one generated federation as CSV"),
        ("manifest", "write the resolved config manifest only"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        _add_common_flags(sp)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    experiment = _COMMAND_EXPERIMENT.get(args.command, EXPERIMENT_FISHER)
    try:
        cfg = _resolve_config(args, experiment)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "gen":
            path = run_gen(cfg)
            print(path)
            return 0
        if args.command == "manifest":
            path = write_manifest(cfg, [], cfg.out_dir)
            print(path)
            return 0
        path, dead_cells = run_experiment(cfg)
        print(path)
        if dead_cells:
            print(f"{dead_cells} cell(s) had no successful replication", file=sys.stderr)
            return 3
        return 0
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
