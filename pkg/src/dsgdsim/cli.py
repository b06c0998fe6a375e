"""Experiment runner: flat key=value configs, seeded sweep expansion, CSV
artifacts.

Sweepable axes are algorithm, n_workers, straggler_prob, slowdown,
batch_size and seeds (comma-separated values). The plan expands them as a
Cartesian product in that fixed order, rightmost axis fastest, each axis in
its declared value order. Unknown config keys are rejected outright.

Outputs per run: ``run_<hash>.csv`` (full metric series) and
``run_<hash>.summary.csv``; plus one aggregate ``comparison.csv`` with
mean +/- sample standard deviation over seeds.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import engine, metrics, theory
from .engine import ComputeModel, ConfigError, ProblemConfig, RunConfig
from .topology import random_connected_graph

__all__ = ["ExperimentPlan", "parse_config", "execute_plan", "main"]

SWEEP_KEYS = ("algorithm", "n_workers", "straggler_prob", "slowdown", "batch_size", "seeds")

# key -> (python type, default). Defaults follow the experiment protocol:
# batch 128, 10% stragglers slowed 10x, geometric step size 0.1 * 0.95^k.
_SCHEMA: dict[str, tuple[type, object]] = {
    "algorithm": (str, "aau"),
    "n_workers": (int, 4),
    "edge_prob": (float, 0.3),
    "topology_file": (str, None),
    "problem": (str, "quadratic"),
    "d": (int, 10),
    "classes": (int, 2),
    "samples_per_worker": (int, 200),
    "non_iid": (bool, False),
    "noise_sigma": (float, 0.0),
    "center_spread": (float, 1.0),
    "reg_lambda": (float, 1e-3),
    "batch_size": (int, 128),
    "straggler_prob": (float, 0.1),
    "slowdown": (float, 10.0),
    "base_time_dist": (str, "constant"),
    "base_time": (float, 1.0),
    "base_time_lo": (float, 0.5),
    "base_time_hi": (float, 1.5),
    "lr_schedule": (str, "geometric"),
    "eta": (float, 0.05),
    "eta0": (float, 0.1),
    "delta": (float, 0.95),
    "k_budget": (int, 500),
    "time_budget": (float, None),
    "seeds": (int, 0),
    "pathsearch_rule": (str, "component"),
    "init": (str, "zeros"),
    "init_scale": (float, 1.0),
    "comm_latency": (float, 0.0),
    "record_matrices": (bool, False),
}


@dataclass(frozen=True)
class ExperimentPlan:
    runs: tuple[RunConfig, ...]
    out_dir: str


def _parse_value(key: str, raw: str):
    typ, _ = _SCHEMA[key]
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def _read_config_file(path: str) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(
    path: str | None = None,
    overrides: dict[str, str] | None = None,
    out_dir: str = "runs",
) -> ExperimentPlan:
    """Build a fully validated plan from a config file and/or flag overrides.

    Flag overrides win over file values. Sweep keys accept comma-separated
    lists; everything else is scalar.
    """
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(_read_config_file(path))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})

    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")

    values: dict[str, object] = {k: default for k, (_, default) in _SCHEMA.items()}
    sweeps: dict[str, list] = {}
    for key, rawval in raw.items():
        if key in SWEEP_KEYS:
            parsed = [_parse_value(key, part) for part in str(rawval).split(",")]
            if any(v is None for v in parsed):
                raise ConfigError(f"config key {key!r}: sweep values cannot be empty")
            sweeps[key] = parsed
            values[key] = parsed[0]
        else:
            values[key] = _parse_value(key, str(rawval))

    _check_ranges(values)
    base = _to_run_config(values)
    base.validate()

    axes = [sweeps.get(key, [values[key]]) for key in SWEEP_KEYS]
    runs: list[RunConfig] = []
    seen_hashes: set[str] = set()

    def expand(i: int, cfg_values: dict) -> None:
        if i == len(SWEEP_KEYS):
            cfg = _to_run_config(cfg_values)
            cfg.validate()
            h = cfg.config_hash()
            if h in seen_hashes:
                raise ConfigError("plan contains duplicate run configs")
            seen_hashes.add(h)
            runs.append(cfg)
            return
        for v in axes[i]:
            expand(i + 1, {**cfg_values, SWEEP_KEYS[i]: v})

    expand(0, dict(values))
    return ExperimentPlan(runs=tuple(runs), out_dir=out_dir)


def _check_ranges(values: dict) -> None:
    checks = [
        ("straggler_prob", lambda v: 0.0 <= v <= 1.0, "must be in [0,1]"),
        ("slowdown", lambda v: v >= 1.0, "must be >= 1"),
        ("edge_prob", lambda v: 0.0 <= v <= 1.0, "must be in [0,1]"),
        ("batch_size", lambda v: v >= 1, "must be >= 1"),
        ("n_workers", lambda v: v >= 2, "must be >= 2"),
    ]
    for key, ok, msg in checks:
        v = values[key]
        vals = v if isinstance(v, list) else [v]
        for item in vals:
            if item is None or not ok(item):
                raise ConfigError(f"config key {key!r} {msg}, got {item}")


def _to_run_config(values: dict) -> RunConfig:
    return RunConfig(
        algorithm=values["algorithm"],
        n_workers=values["n_workers"],
        edge_prob=values["edge_prob"],
        topology_file=values["topology_file"],
        problem=ProblemConfig(
            kind=values["problem"],
            d=values["d"],
            noise_sigma=values["noise_sigma"],
            center_spread=values["center_spread"],
            classes=values["classes"],
            samples_per_worker=values["samples_per_worker"],
            non_iid=values["non_iid"],
            reg_lambda=values["reg_lambda"],
        ),
        compute=ComputeModel(
            dist=values["base_time_dist"],
            base_time=values["base_time"],
            lo=values["base_time_lo"],
            hi=values["base_time_hi"],
            straggler_prob=values["straggler_prob"],
            slowdown=values["slowdown"],
        ),
        batch_size=values["batch_size"],
        lr_schedule=values["lr_schedule"],
        eta=values["eta"],
        eta0=values["eta0"],
        delta=values["delta"],
        k_budget=values["k_budget"],
        time_budget=values["time_budget"],
        seed=values["seeds"],
        pathsearch_rule=values["pathsearch_rule"],
        init=values["init"],
        init_scale=values["init_scale"],
        comm_latency=values["comm_latency"],
        record_matrices=values["record_matrices"],
    )


def _sample_std(vals: list[float]) -> float:
    if len(vals) < 2:
        return 0.0
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))


def execute_plan(plan: ExperimentPlan) -> int:
    """Run every config, write per-run CSVs and the aggregate comparison.
    A failing run is reported and skipped; exit status 1 if any run failed."""
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    results: list[tuple[RunConfig, metrics.MetricsSeries]] = []
    for cfg in plan.runs:
        h = cfg.config_hash()
        try:
            series = engine.run(cfg)
        except Exception as exc:  # keep the rest of the plan alive
            print(f"[fail] run {h}: {exc}", file=sys.stderr)
            failures += 1
            continue
        (out / f"run_{h}.csv").write_text(metrics.series_to_csv(series), encoding="utf-8")
        (out / f"run_{h}.summary.csv").write_text(metrics.summary_to_csv(series), encoding="utf-8")
        results.append((cfg, series))
        final = series.final()
        print(f"[ok]   run {h}: {cfg.algorithm} n={cfg.n_workers} seed={cfg.seed} "
              f"k={final.k} loss={final.loss:.6g}")
    if results:
        (out / "comparison.csv").write_text(_comparison_csv(results), encoding="utf-8")
    return 1 if failures else 0


def _comparison_csv(results) -> str:
    groups: dict[tuple, list[metrics.MetricsSeries]] = {}
    for cfg, series in results:
        key = (cfg.algorithm, cfg.n_workers, cfg.compute.straggler_prob,
               cfg.compute.slowdown, cfg.batch_size)
        groups.setdefault(key, []).append(series)
    lines = [
        "algorithm,n_workers,straggler_prob,slowdown,batch_size,n_seeds,"
        "final_loss_mean,final_loss_std,final_grad_norm_sq_mean,final_grad_norm_sq_std,"
        "sim_time_mean,sim_time_std,messages_mean,bytes_mean"
    ]
    for key, group in groups.items():
        losses = [s.final().loss for s in group]
        grads = [s.final().grad_norm_sq for s in group]
        times = [s.final().sim_time for s in group]
        msgs = [s.final().messages for s in group]
        nbytes = [s.final().bytes for s in group]
        algorithm, n, sp, sd, bs = key
        lines.append(
            f"{algorithm},{n},{sp!r},{sd!r},{bs},{len(group)},"
            f"{sum(losses) / len(losses)!r},{_sample_std(losses)!r},"
            f"{sum(grads) / len(grads)!r},{_sample_std(grads)!r},"
            f"{sum(times) / len(times)!r},{_sample_std(times)!r},"
            f"{sum(msgs) / len(msgs)!r},{sum(nbytes) / len(nbytes)!r}"
        )
    return "\n".join(lines) + "\n"


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsgdsim",
                                     description="Decentralized SGD gossip simulator")
    sub = parser.add_subparsers(dest="command")

    run_p = sub.add_parser("run", help="execute an experiment plan")
    run_p.add_argument("--config", default=None, help="flat key = value config file")
    run_p.add_argument("--algo", choices=engine.ALGORITHMS, default=None)
    run_p.add_argument("--workers", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default="runs")
    run_p.add_argument("--k-budget", type=int, default=None)
    run_p.add_argument("--time-budget", type=float, default=None)
    run_p.add_argument("--pathsearch-rule", choices=("component", "literal"), default=None)

    th_p = sub.add_parser("theory", help="print the convergence-constant table")
    th_p.add_argument("--beta", type=float, required=True)
    th_p.add_argument("--workers", type=int, required=True)
    th_p.add_argument("--b-window", type=int, required=True)
    th_p.add_argument("--lipschitz", type=float, default=1.0)
    th_p.add_argument("--sigma-l", type=float, default=0.0)
    th_p.add_argument("--varsigma", type=float, default=0.0)
    th_p.add_argument("--f0-gap", type=float, default=0.0)
    th_p.add_argument("--eta", type=float, default=None)
    th_p.add_argument("--k", type=int, default=None)

    topo_p = sub.add_parser("topology", help="generate a reproducible edge list")
    topo_p.add_argument("--workers", type=int, required=True)
    topo_p.add_argument("--edge-prob", type=float, default=0.3)
    topo_p.add_argument("--seed", type=int, default=0)
    topo_p.add_argument("--out", default=None, help="write to a file instead of stdout")
    return parser


def main(argv=None) -> int:
    parser = _build_arg_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        if args.command == "run":
            overrides = {
                "algorithm": args.algo,
                "n_workers": None if args.workers is None else str(args.workers),
                "seeds": None if args.seed is None else str(args.seed),
                "k_budget": None if args.k_budget is None else str(args.k_budget),
                "time_budget": None if args.time_budget is None else str(args.time_budget),
                "pathsearch_rule": args.pathsearch_rule,
            }
            plan = parse_config(args.config, overrides, out_dir=args.out)
            return execute_plan(plan)
        if args.command == "theory":
            params = theory.TheoryParams(
                beta=args.beta,
                n=args.workers,
                b=args.b_window,
                lipschitz=args.lipschitz,
                sigma_l=args.sigma_l,
                varsigma=args.varsigma,
                f0_gap=args.f0_gap,
            )
            print(theory.constants_table(params, eta=args.eta, k_total=args.k))
            return 0
        g = random_connected_graph(args.workers, args.edge_prob, args.seed)
        text = g.to_edge_list()
        if args.out is None:
            sys.stdout.write(text)
        else:
            Path(args.out).write_text(text, encoding="utf-8")
        return 0
    except (ConfigError, theory.ParameterRangeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
