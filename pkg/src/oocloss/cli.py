"""Command-line front end: ``simulate``, ``estimate``, ``sweep``, ``test``, ``bench``.

Each command reads a flat JSON config (``--config``), applies ``--set
key=value`` overrides and the global ``--seed`` flag, and writes
``report.json`` plus a CSV into ``--out``.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import design as D
from . import estimators as E
from . import learners as L
from . import solvers as S
from .data_core import (
    ClusteredDataset,
    CorruptedSplit,
    Direction,
    LeakageConfig,
    PartitionModelConfig,
    approx_clusters_from_leakage,
    generate_partition_model,
    inject_leakage,
    load_csv,
    loco_split,
    save_csv,
)
from .errors import ConfigError, DataError, InvalidConfig, OOCError

SCHEMA = "ooc-report/1"

_PARTITION = {
    "n_train": 200,
    "n_valid": 200,
    "d": 2,
    "cluster_shift": None,
    "noise_std": 0.5,
    "memorizable_feature": True,
    "task": "regression",
    "cluster_effect": 3.0,
    "memo_noise": 0.1,
}

_LEARNER = {"learner": "ridge", "reg_strength": 0.1, "loss": None}

_DATA = {
    "data": None,
    "label_column": "label",
    "cluster_column": "cluster",
    "approx_column": None,
    "held_out_cluster": 2,
    "partition": _PARTITION,
}

DEFAULTS = {
    "simulate": {
        "partition": _PARTITION,
        "p0": 0.1,
        "held_out_cluster": 2,
        **_LEARNER,
        "oracle_reps": 200,
        "oracle_eval": 2000,
    },
    "estimate": {
        **_DATA,
        **_LEARNER,
        "method": "b3-exact",
        "p0": 0.1,
        "folds": 5,
        "use_approx": True,
        "n_prime": 6,
        "t": 2000,
        "m": None,
        "basis_kind": "chebyshev",
        "basis_degree": 2,
        "sketch_k": None,
        "lambda_t4": 0.1,
        "lambda_s": 0.01,
        "trend_order": 4,
        "solver_tol": 1e-8,
        "block_size": 512,
    },
    "sweep": {
        **_DATA,
        **_LEARNER,
        "p0_values": [round(0.05 * i, 2) for i in range(11)],
        "trials": 50,
    },
    "test": {
        **_DATA,
        **_LEARNER,
        "p0": 0.2,
        "n_prime": None,
        "n_T": 10,
        "n_T_prime": 10,
        "n_V": None,
        "alpha": 0.05,
    },
    "bench": {
        "sizes": [100, 1000, 10000],
        "methods": ["exact", "t4mono", "sketch", "basis"],
        "repeats": 3,
        "min_time": 0.5,
        "p0": 0.1,
        "m": 10,
        "sketch_k": 7,
        "basis_degree": 2,
        "lambda_t4": 0.1,
        "lambda_s": 0.01,
        "solver_tol": 1e-6,
        "max_iter": 5000,
        "max_dense": 1000,
        "condition_limit": 1e12,
        "full_pipeline": False,
        "t": 100,
    },
}

_METHODS = ("iid", "loco", "b3-exact", "b3-t4mono", "b3-basis", "b3-sketch")


# -- configuration -------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise InvalidConfig(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidConfig(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, config_path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides, then ``seed``."""
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg["seed"] = 0
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {config_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        *parents, leaf = key.strip().split(".")
        patch = {leaf: _parse_value(text)}
        for p in reversed(parents):
            patch = {p: patch}
        cfg = _merge(cfg, patch)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise InvalidConfig("seed must be an unsigned 64-bit integer")
    return cfg


def _learner(cfg) -> tuple[L.LearnerSpec, L.LossKind]:
    try:
        spec = L.LearnerSpec(kind=cfg["learner"], reg_strength=float(cfg["reg_strength"]))
        loss = L.fitting_loss(spec.kind) if cfg["loss"] is None else L.LossKind(cfg["loss"])
    except ValueError as exc:
        if isinstance(exc, OOCError):
            raise
        raise InvalidConfig(str(exc)) from None
    return spec, loss


def _partition(cfg, seed) -> PartitionModelConfig:
    p = dict(cfg["partition"])
    if p["cluster_shift"] is None:
        p["cluster_shift"] = [0.0] * int(p["d"])
    try:
        return PartitionModelConfig(seed=seed, **p)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, OOCError):
            raise
        raise InvalidConfig(f"partition: {exc}") from None


def _dataset(cfg) -> ClusteredDataset:
    if cfg["data"] is None:
        return generate_partition_model(_partition(cfg, cfg["seed"]))
    try:
        return load_csv(cfg["data"], cfg["label_column"], cfg["cluster_column"],
                        cfg["approx_column"])
    except OSError as exc:
        raise DataError(f"cannot read dataset {cfg['data']}: {exc}") from None


def _corrupted(ds: ClusteredDataset, cfg, p0: float) -> tuple[ClusteredDataset, CorruptedSplit]:
    """Leaky split: from the approximate clustering if present, else injected at ``p0``."""
    held = int(cfg["held_out_cluster"])
    if ds.approx_clusters is not None:
        sp = loco_split(ds, held, use_approx=True)
        return ds, CorruptedSplit(sp.train_indices, sp.valid_indices,
                                  np.zeros(0, dtype=np.int64), p0)
    cs = inject_leakage(loco_split(ds, held), LeakageConfig(p0, Direction.VALID_TO_TRAIN,
                                                            cfg["seed"]))
    return ds.with_approx(approx_clusters_from_leakage(ds, cs, held)), cs


# -- output --------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_report(out: Path, command: str, cfg: dict, result: dict, wall: float) -> Path:
    doc = {
        "schema": SCHEMA,
        "version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "result": result,
        "wall_clock_seconds": wall,
    }
    path = out / "report.json"
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


# -- commands --------------------------------------------------------------------

def cmd_simulate(cfg, out: Path, threads: int = 1) -> dict:
    pm = _partition(cfg, cfg["seed"])
    ds = generate_partition_model(pm)
    p0 = float(cfg["p0"])
    if p0 > 0:
        ds, _ = _corrupted(ds, cfg, p0)
    save_csv(ds, out / "dataset.csv")
    spec, loss = _learner(cfg)
    e0, se = E.oracle_e0(pm, spec, loss, reps=int(cfg["oracle_reps"]),
                         n_eval=int(cfg["oracle_eval"]), seed=cfg["seed"])
    return {
        "dataset": "dataset.csv",
        "n_samples": ds.n_samples,
        "feature_names": list(ds.feature_names),
        "has_approx_clusters": ds.approx_clusters is not None,
        "oracle_e0": e0,
        "oracle_e0_stderr": se,
    }


def _b3_config(cfg, method, spec, loss) -> E.B3Config:
    tol = float(cfg["solver_tol"])
    return E.B3Config(
        n_prime=int(cfg["n_prime"]),
        t=int(cfg["t"]),
        method=method,
        m=cfg["m"],
        trend_filter=S.TrendFilterConfig(order=int(cfg["trend_order"]),
                                         lam=float(cfg["lambda_t4"]), tol=tol),
        basis=D.BasisSpec(cfg["basis_kind"], int(cfg["basis_degree"])),
        sketch_k=None if cfg["sketch_k"] is None else int(cfg["sketch_k"]),
        sketch_filter=S.TrendFilterConfig(order=int(cfg["trend_order"]),
                                          lam=float(cfg["lambda_s"]), tol=tol),
        learner=spec,
        loss=loss,
        seed=cfg["seed"],
        block_size=int(cfg["block_size"]),
    )


def cmd_estimate(cfg, out: Path, threads: int = 1) -> dict:
    method = cfg["method"]
    if method not in _METHODS:
        raise InvalidConfig(f"method must be one of {', '.join(_METHODS)}")
    spec, loss = _learner(cfg)
    ds = _dataset(cfg)
    if method == "iid":
        return {"method": method,
                "e0_hat": E.estimate_naive_iid(ds, spec, loss, int(cfg["folds"]), cfg["seed"])}
    p0 = float(cfg["p0"])
    ds, cs = _corrupted(ds, cfg, p0)
    if method == "loco":
        val = E.estimate_loco(ds, spec, loss, bool(cfg["use_approx"]),
                              int(cfg["held_out_cluster"]))
        return {"method": method, "e0_hat": val, "use_approx": bool(cfg["use_approx"])}
    try:
        bcfg = _b3_config(cfg, method[3:], spec, loss)
    except ValueError as exc:
        if isinstance(exc, OOCError):
            raise
        raise InvalidConfig(str(exc)) from None
    trace = E.b3_collect(ds, cs, bcfg, threads=threads)
    est = E.b3_estimate(trace, bcfg)
    levels = trace.grid.levels
    pp = trace.p_prime
    _write_csv(out / "curve.csv", ["level", "p", "p_prime", "b_bar"],
               [(i, levels[i], pp[i], trace.b_bar[i]) for i in range(levels.size)])
    res = {
        "method": method,
        "e0_hat": est.e0_hat,
        "residual": est.residual,
        "p0": p0,
        "grid": levels,
        "b_bar": trace.b_bar,
        "fit_failures": trace.fit_failures,
        "nonconverged_fits": trace.nonconverged,
        "solver_converged": est.solve.converged if est.solve else True,
        "condition": est.solve.condition if est.solve else None,
    }
    if est.coefficients is not None and est.method is E.Method.BASIS:
        res["coefficients"] = est.coefficients
        res["basis"] = {"kind": est.basis.kind.value, "degree": est.basis.degree}
    else:
        res["curve"] = est.curve
    return res


def cmd_sweep(cfg, out: Path, threads: int = 1) -> dict:
    spec, loss = _learner(cfg)
    ds = _dataset(cfg)
    r = E.sweep_leakage(ds, cfg["p0_values"], int(cfg["trials"]), spec, loss,
                        int(cfg["held_out_cluster"]), cfg["seed"], threads)
    _write_csv(out / "curve.csv", ["p0", "mean", "stderr"],
               zip(r.p0, r.mean, r.stderr))
    return {
        "p0": r.p0,
        "mean": r.mean,
        "stderr": r.stderr,
        "isotonic_fit": r.isotonic,
        "isotonic_residual": r.isotonic_residual,
        "curve_range": r.curve_range,
        "second_differences": r.second_diff,
        "monotone_ok": bool(r.isotonic_residual < 0.05 * max(r.curve_range, 1e-300)),
        "convex_ok": bool(np.all(r.second_diff >= -2 * r.stderr[1:-1])),
    }


def cmd_test(cfg, out: Path, threads: int = 1) -> dict:
    spec, loss = _learner(cfg)
    ds = _dataset(cfg)
    ds, cs = _corrupted(ds, cfg, float(cfg["p0"]))
    r = E.run_leakage_test(ds, cs, spec, loss, cfg["n_prime"], int(cfg["n_T"]),
                           int(cfg["n_T_prime"]), cfg["n_V"], float(cfg["alpha"]),
                           cfg["seed"])
    decision = "reject" if r.reject else "no rejection"
    print(f"{decision}: T={r.t_stat:.4f} dof={r.dof:.2f} p-value={r.p_value:.4g} "
          f"alpha={r.alpha}")
    return {
        "t_stat": r.t_stat,
        "dof": r.dof,
        "p_value": r.p_value,
        "reject": r.reject,
        "alpha": r.alpha,
        "z_means": r.z_means,
        "z_vars": r.z_vars,
        "fold_counts": r.fold_counts,
    }


def bench_one(method: str, n: int, cfg) -> tuple[float, bool]:
    """Seconds of the solver stage (design construction plus solve) and a failure flag.

    Dense methods above ``max_dense`` unknowns are not attempted and count as
    failed.
    """
    if method in ("exact", "t4mono") and n > int(cfg["max_dense"]):
        return float("nan"), True
    rng = np.random.default_rng(cfg["seed"])
    m = 2 * (n + 1) if method == "exact" else int(cfg["m"])
    grid = D.make_pgrid(float(cfg["p0"]), m)
    e = 1.0 + np.exp(-4.0 * np.arange(n + 1) / n)
    # loss-curve values at the grid plus bootstrap-sized noise
    b = D.bernstein_eval(e, grid.levels) + 1e-3 * rng.normal(size=m)
    tol = float(cfg["solver_tol"])
    lim = float(cfg["condition_limit"])

    def run():
        if method == "basis":
            spec = D.BasisSpec(D.BasisKind.CHEBYSHEV, int(cfg["basis_degree"]))
            res = S.least_squares(D.basis_design(spec, grid, n), b)
            return (not res.rank_deficient) and res.condition <= lim
        A = D.binomial_design(n, grid)
        if method == "exact":
            res = S.least_squares(A.matrix, b)
            return (not res.rank_deficient) and res.condition <= lim
        if method == "t4mono":
            res = S.constrained_solve(A.matrix, b, S.TrendFilterConfig(
                lam=float(cfg["lambda_t4"]), tol=tol, max_iter=int(cfg["max_iter"])))
            return res.converged
        sk = D.sketch_design(A, int(cfg["sketch_k"]))
        res = S.constrained_solve(sk.S * sk.group_sizes[None, :], b, S.TrendFilterConfig(
            lam=float(cfg["lambda_s"]), tol=tol, max_iter=int(cfg["max_iter"])))
        return res.converged

    # best of at least `repeats` runs, repeating fast solves until `min_time` has elapsed
    best, spent, count = math.inf, 0.0, 0
    ok = True
    while count < max(1, int(cfg["repeats"])) or (spent < float(cfg["min_time"]) and count < 10000):
        t0 = time.perf_counter()
        try:
            ok = bool(run())
        except OOCError:
            ok = False
        dt = time.perf_counter() - t0
        best, spent, count = min(best, dt), spent + dt, count + 1
    return best, not ok


def _bench_pipeline(method: str, n: int, cfg) -> tuple[float, bool]:
    pm = PartitionModelConfig(n_train=max(200, 2 * n), n_valid=max(200, 2 * n),
                              seed=cfg["seed"])
    ds = generate_partition_model(pm)
    cs = inject_leakage(loco_split(ds, 2), LeakageConfig(float(cfg["p0"]), seed=cfg["seed"]))
    bcfg = E.B3Config(n_prime=n, t=int(cfg["t"]), method=method,
                      m=None if method == "exact" else int(cfg["m"]), seed=cfg["seed"])
    t0 = time.perf_counter()
    try:
        est = E.b3_estimate(E.b3_collect(ds, cs, bcfg), bcfg)
        ok = est.solve is None or est.solve.converged
    except OOCError:
        ok = False
    return time.perf_counter() - t0, not ok


def cmd_bench(cfg, out: Path, threads: int = 1) -> dict:
    rows = []
    for method in cfg["methods"]:
        if method not in ("exact", "t4mono", "sketch", "basis"):
            raise InvalidConfig(f"unknown bench method {method!r}")
        for n in cfg["sizes"]:
            n = int(n)
            if n < 1:
                raise InvalidConfig("bench sizes must be >= 1")
            if cfg["full_pipeline"]:
                sec, failed = _bench_pipeline(method, n, cfg)
            else:
                sec, failed = bench_one(method, n, cfg)
            rows.append((method, n, sec, failed))
    _write_csv(out / "bench.csv", ["method", "n_prime", "seconds", "failed"],
               [(m, n, s, str(f).lower()) for m, n, s, f in rows])
    return {
        "failed": [{"method": m, "n_prime": n, "failed": f} for m, n, _, f in rows],
        "timings": [{"method": m, "n_prime": n, "seconds": s} for m, n, s, _ in rows],
    }


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "test": cmd_test,
    "bench": cmd_bench,
}


# -- entry point -----------------------------------------------------------------

def _common(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON config file")
    parser.add_argument("--seed", type=int, default=d, help="master seed (u64)")
    parser.add_argument("--threads", type=int, default=d, help="worker threads")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=d,
                        metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oocloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name), suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out or ".")
    try:
        threads = 1 if args.threads is None else int(args.threads)
        if threads < 1:
            raise InvalidConfig("--threads must be >= 1")
        cfg = resolve_config(args.command, args.config, args.overrides or (), args.seed)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {out}: {exc}") from None
        t0 = time.perf_counter()
        result = COMMANDS[args.command](cfg, out, threads)
        write_report(out, args.command, cfg, result, time.perf_counter() - t0)
    except OOCError as exc:
        err = {"schema": SCHEMA, "version": __version__, "command": args.command,
               "error": type(exc).__name__, "category": _category(exc), "message": str(exc)}
        if hasattr(exc, "max_n_T"):
            err["max_n_T"] = exc.max_n_T
            err["max_n_T_prime"] = exc.max_n_T_prime
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    return 0


def _category(exc) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, DataError):
        return "data"
    return "numerical"


if __name__ == "__main__":
    sys.exit(main())
