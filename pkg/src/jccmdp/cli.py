"""Command line entry point: ``run`` experiments, ``generate`` instances, ``inspect`` files."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import generators as gen
from . import mdp
from .costs import UPPER_METHODS, solve_random_costs
from .transitions import TP_UPPER_METHODS, solve_random_tp
from .validation import NOT_APPLICABLE, mc_check_costs, mc_check_tp

log = logging.getLogger("jccmdp")

RESULTS_SCHEMA = "jccmdp-results/1"
SUMMARY_SCHEMA = "jccmdp-summary/1"
RESULT_COLUMNS = ("instance_id", "seed", "grid", "method", "status", "bound", "gap_pct",
                  "G_pct", "mc_p_objective", "mc_p_joint", "mc_se_joint", "mc_pass")
TIMING_COLUMNS = ("instance_id", "grid", "method", "wall_time")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str
    generator: dict
    methods: List[str]
    theta: List[float] = field(default_factory=lambda: [1.0])
    eta: List[float] = field(default_factory=lambda: [0.001])
    alpha: List[float] = field(default_factory=list)
    repetitions: int = 50
    seed: int = 0
    out: str = "results"
    solver: dict = field(default_factory=dict)
    mc_samples: int = 10_000
    mc_sampler: str = gen.INDEPENDENT

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise ConfigError(f"config.{key}: unknown field")
        for key in ("mode", "methods"):
            if key not in data:
                raise ConfigError(f"config.{key}: required field missing")
        cfg = cls(**{"generator": {}, **data})
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in ("costs", "transitions"):
            raise ConfigError("config.mode: must be 'costs' or 'transitions'")
        allowed = UPPER_METHODS if self.mode == "costs" else TP_UPPER_METHODS
        if not isinstance(self.methods, list) or not self.methods:
            raise ConfigError("config.methods: must be a non-empty list")
        for i, m in enumerate(self.methods):
            name = m if self.mode == "costs" or m.startswith("tp.") else f"tp.{m}"
            if name not in allowed:
                raise ConfigError(f"config.methods[{i}]: unknown method {m!r}")
        self.methods = [m if self.mode == "costs" or m.startswith("tp.") else f"tp.{m}" for m in self.methods]
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ConfigError("config.repetitions: must be an integer >= 1")
        if self.mc_samples < 0:
            raise ConfigError("config.mc_samples: must be >= 0")
        if self.mc_sampler not in gen.SAMPLERS:
            raise ConfigError(f"config.mc_sampler: must be one of {gen.SAMPLERS}")
        kind = "queueing" if self.mode == "costs" else "garnet"
        try:
            gen.config_from_dict(kind, self.generator)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.generator: {exc}") from None
        grid = self.theta if self.mode == "costs" else self.eta
        if not grid:
            raise ConfigError(f"config.{'theta' if self.mode == 'costs' else 'eta'}: must be non-empty")

    def grid_points(self):
        if self.mode == "costs":
            return [{"theta": float(t)} for t in self.theta]
        alphas = self.alpha or [gen.config_from_dict("garnet", self.generator).alpha]
        return [{"eta": float(e), "alpha": float(a)} for a in alphas for e in self.eta]


def _grid_label(point: dict) -> str:
    return ";".join(f"{k}={v:g}" for k, v in point.items())


def instance_seed(master: int, rep: int) -> int:
    """Instances depend only on (master seed, repetition) so grid points share them."""
    return int(np.random.SeedSequence([master, rep]).generate_state(1)[0])


def mc_seed(master: int, rep: int, grid_index: int) -> int:
    return int(np.random.SeedSequence([master, rep, grid_index, 1]).generate_state(1)[0])


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return f"{x:.10g}"


def run_task(cfg: ExperimentConfig, grid_index: int, point: dict, rep: int):
    """Generate, solve and validate one instance. Returns (rows, timings, errors)."""
    seed = instance_seed(cfg.seed, rep)
    label = _grid_label(point)
    inst_id = f"rep{rep:03d}"
    opts = dict(cfg.solver)
    errors = []
    if cfg.mode == "costs":
        qcfg = gen.config_from_dict("queueing", {**cfg.generator, "seed": seed, "theta": point["theta"]})
        instance, unc = gen.queueing_instance(qcfg)
        report = solve_random_costs(instance, unc, cfg.methods, instance_id=inst_id, **opts)
    else:
        gdict = {**cfg.generator, "seed": seed, "eta": point["eta"], "alpha": point["alpha"]}
        instance, costs, tp = gen.garnet_instance(gen.config_from_dict("garnet", gdict))
        unc = tp
        report = solve_random_tp(instance, tp, cfg.methods, instance_id=inst_id, **opts)
    rows, timings = [], []
    G = report.extremal.get("G", {})
    for method, res in report.results.items():
        mc = None
        if cfg.mc_samples and res.optimal and method != report.lower_method:
            try:
                if cfg.mode == "costs":
                    mc = mc_check_costs(instance, unc, res.rho, res.value, cfg.mc_samples,
                                        cfg.mc_sampler, mc_seed(cfg.seed, rep, grid_index))
                else:
                    mc = mc_check_tp(instance, unc, res.policy, res.value, cfg.mc_samples,
                                     mc_seed(cfg.seed, rep, grid_index))
                report.mc[method] = mc
            except Exception as exc:  # keep the batch going; the failure is counted
                errors.append(f"{inst_id} {label} {method}: MC failed: {exc}")
        if res.status not in (mdp.OPTIMAL, mdp.INFEASIBLE):
            errors.append(f"{inst_id} {label} {method}: {res.status} {res.stats.get('error', '')}".rstrip())
        p0 = unc.p0 if cfg.mode == "costs" else unc.costs.p0
        p1 = unc.p1 if cfg.mode == "costs" else unc.costs.p1
        rows.append({
            "instance_id": inst_id, "seed": str(seed), "grid": label, "method": method,
            "status": res.status, "bound": _fmt(res.value if res.optimal else None),
            "gap_pct": _fmt(report.gaps.get(method, "")),
            "G_pct": _fmt(G.get(method, "")),
            "mc_p_objective": _fmt(mc.p_objective) if mc else "",
            "mc_p_joint": _fmt(mc.p_joint) if mc else "",
            "mc_se_joint": _fmt(mc.se_joint) if mc else "",
            "mc_pass": ("" if mc is None else str(int(mc.passes(p0, p1)))),
        })
        timings.append({"instance_id": inst_id, "grid": label, "method": method,
                        "wall_time": f"{res.solve_time:.4f}"})
    return grid_index, rep, rows, timings, errors


def _task_wrapper(args):
    return run_task(*args)


def summarize(cfg: ExperimentConfig, rows: List[dict], timings: List[dict]) -> dict:
    """Per (grid point, method) aggregates recomputable from the CSV rows."""
    out = {}
    time_of = {(t["instance_id"], t["grid"], t["method"]): float(t["wall_time"]) for t in timings}
    for row in rows:
        key = (row["grid"], row["method"])
        agg = out.setdefault(key, {"grid": row["grid"], "method": row["method"], "instances": 0,
                                   "optimal": 0, "infeasible": 0, "other": 0, "gaps": [],
                                   "G": [], "times": [], "mc_pass": 0, "mc_checked": 0})
        agg["instances"] += 1
        status = row["status"]
        agg["optimal" if status == mdp.OPTIMAL else "infeasible" if status == mdp.INFEASIBLE else "other"] += 1
        if row["gap_pct"] not in ("", NOT_APPLICABLE):
            agg["gaps"].append(float(row["gap_pct"]))
            if row["G_pct"] not in ("", NOT_APPLICABLE):
                agg["G"].append(float(row["G_pct"]))
        if row["mc_pass"] != "":
            agg["mc_checked"] += 1
            agg["mc_pass"] += int(row["mc_pass"])
        agg["times"].append(time_of.get((row["instance_id"], row["grid"], row["method"]), 0.0))
    entries = []
    for agg in out.values():
        gaps, Gs = agg.pop("gaps"), agg.pop("G")
        times = agg.pop("times")
        agg["avg_gap_pct"] = float(np.mean(gaps)) if gaps else None
        agg["gap_count"] = len(gaps)
        agg["avg_G_pct"] = float(np.mean(Gs)) if Gs else None
        if Gs and len(Gs) == len(gaps):
            red = [(g_ - gp) / g_ * 100 for g_, gp in zip(Gs, gaps) if g_ > 0]
            agg["avg_reduction_pct"] = float(np.mean(red)) if red else None
        else:
            agg["avg_reduction_pct"] = None
        agg["avg_time"] = float(np.mean(times)) if times else None
        entries.append(agg)
    entries.sort(key=lambda e: (e["grid"], e["method"]))
    return {"schema": SUMMARY_SCHEMA, "mode": cfg.mode, "repetitions": cfg.repetitions,
            "seed": cfg.seed, "entries": entries}


def write_csv(path: Path, columns, rows, comment: Optional[str] = None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_bytes(buf.getvalue().encode())


def run_experiment(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1):
    out_dir.mkdir(parents=True, exist_ok=True)
    points = cfg.grid_points()
    tasks = [(cfg, gi, pt, rep) for gi, pt in enumerate(points) for rep in range(cfg.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_task_wrapper, tasks))
    else:
        outputs = [_task_wrapper(t) for t in tasks]
    outputs.sort(key=lambda o: (o[0], o[1]))
    rows = [r for o in outputs for r in o[2]]
    timings = [t for o in outputs for t in o[3]]
    errors = [e for o in outputs for e in o[4]]
    for e in errors:
        log.warning(e)
    write_csv(out_dir / "results.csv", RESULT_COLUMNS, rows,
              f"{RESULTS_SCHEMA} mode={cfg.mode} seed={cfg.seed} columns={','.join(RESULT_COLUMNS)}")
    write_csv(out_dir / "timings.csv", TIMING_COLUMNS, timings)
    summary = summarize(cfg, rows, timings)
    summary["failures"] = len(errors)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


def _load_config(path: str) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return ExperimentConfig.from_dict(data)


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.out)
    start = time.perf_counter()
    rows, summary = run_experiment(cfg, out, args.jobs)
    print(f"{len(rows)} rows written to {out / 'results.csv'} in {time.perf_counter() - start:.1f}s "
          f"({summary['failures']} per-instance failures)")
    for e in summary["entries"]:
        gap = "n/a" if e["avg_gap_pct"] is None else f"{e['avg_gap_pct']:.3f}%"
        print(f"  {e['grid']:<24} {e['method']:<14} optimal {e['optimal']}/{e['instances']}  avg gap {gap}")
    return 0


def cmd_generate(args) -> int:
    params = {}
    for item in args.param or []:
        key, _, val = item.partition("=")
        try:
            params[key] = json.loads(val)
        except json.JSONDecodeError:
            params[key] = val
    params["seed"] = args.seed
    try:
        cfg = gen.config_from_dict(args.kind, params)
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    meta = {"generator": args.kind, "config": gen.config_to_dict(cfg)}
    if args.kind == "queueing":
        instance, costs = gen.queueing_instance(cfg)
        text = gen.dumps_bundle(instance, costs, meta=meta)
    else:
        instance, costs, tp = gen.garnet_instance(cfg, with_covariance=False)
        text = gen.dumps_bundle(instance, costs, tp, meta=meta)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text + "\n")
    return 0


def describe(instance: mdp.CmdpInstance, costs, tp, meta: dict) -> str:
    P = instance.kernel
    nnz_row = np.count_nonzero(P, axis=1)
    acts = instance.actions_per_state
    lines = [
        f"states: {instance.n_states}",
        f"actions per state: {min(acts)}..{max(acts)} ({instance.n_pairs} pairs)",
        f"branching (max reachable states per pair): {int(nnz_row.max())}",
        f"kernel density: {np.count_nonzero(P) / P.size:.4f}",
        f"discount: {instance.alpha:g}",
        f"constraints: {instance.n_constraints} budgets " + ", ".join(f"{b:.6g}" for b in instance.budgets),
    ]
    if meta.get("generator"):
        lines.append(f"generator: {meta['generator']}")
    if costs is not None:
        res = mdp.optimize_over_polytope(instance, costs.c.mean)
        if res.status == mdp.OPTIMAL:
            slack = [float(xi - res.rho @ d.mean) for xi, d in zip(instance.budgets, costs.d)]
            lines.append(f"unconstrained optimum (mean costs): {res.value:.6g}")
            lines.append("budget slacks there: " + ", ".join(f"{s:.6g}" for s in slack))
    if tp is not None:
        lines.append(f"perturbation width max: {float((tp.zeta_upper - tp.zeta_lower).max()):.6g}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        text = Path(args.file).read_text()
        instance, costs, tp, meta = gen.loads_bundle(text)
    except OSError as exc:
        print(f"error: {args.file}: {exc.strerror}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: {args.file}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {args.file}: {exc}", file=sys.stderr)
        return 2
    print(describe(instance, costs, tp, meta))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jccmdp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("generate", help="write a generated instance bundle")
    p.add_argument("kind", choices=("queueing", "garnet"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("inspect", help="summarize an instance file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)
