"""Bounds for the JCCMDP with random running costs and a known kernel.

The joint constraint over K cost budgets is split with a Gumbel-Hougaard
copula into K individual constraints at levels ``p1 ** y_k**(1/theta)`` with
``y`` on the unit simplex. Four inner approximations give upper bounds and a
linear outer approximation gives a lower bound.

The factor ``f_k(p1, y_k)`` in the upper-bound rows is convex in ``y_k`` but
not conic-representable, so it is replaced by its piecewise-linear
interpolant on a grid (which lies above it). The grid is refined around the
incumbent and the program re-solved until the value settles.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import mdp
from .chance import (DEFAULT_H, DEFAULT_LAMBDA, KINDS, LEMMA5_THRESHOLD, CopulaParams,
                     MissingSpecData, RandomVectorSpec, bernstein_terms, default_tangent_points, emit_inner,
                     emit_outer, log_one_minus_exponent, tangent_coefficients, y_factor)
from .convex import Affine, ConvexProgram, Solution
from .mdp import CmdpInstance, StationaryPolicy

UPPER_METHODS = KINDS + ("bernstein",)
MISSING_DATA = "MissingData"
LOWER_METHOD = "lower"
Y_MIN = 1e-6


@dataclass(frozen=True)
class CostUncertainty:
    """Random objective cost ``c`` and K random constraint costs ``d[k]``."""

    c: RandomVectorSpec
    d: Tuple[RandomVectorSpec, ...]
    theta: float = 1.0
    p0: float = 0.9
    p1: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(self.d))
        CopulaParams(self.theta, self.p1)
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        n = self.c.dim
        if any(dk.dim != n for dk in self.d):
            raise ValueError("all cost vectors must be dimensioned over the same pairs")

    @property
    def n_constraints(self) -> int:
        return len(self.d)

    @property
    def copula(self) -> CopulaParams:
        return CopulaParams(self.theta, self.p1)

    def with_theta(self, theta: float) -> "CostUncertainty":
        return replace(self, theta=theta)

    def specs(self):
        return (self.c,) + self.d

    def zeroed(self) -> "CostUncertainty":
        """Same means with all randomness removed."""
        def flat(s: RandomVectorSpec):
            cov = np.zeros_like(s.cov) if s.cov is not None else np.zeros(s.dim)
            return RandomVectorSpec(s.mean, cov, s.mean, s.mean, np.zeros(s.dim), s.independent)
        return replace(self, c=flat(self.c), d=tuple(flat(s) for s in self.d))


@dataclass
class BoundResult:
    method: str
    status: str
    value: float = float("nan")
    rho: Optional[np.ndarray] = None
    policy: Optional[StationaryPolicy] = None
    aux: dict = field(default_factory=dict)
    solve_time: float = 0.0
    stats: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == mdp.OPTIMAL

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "status": self.status,
            "value": None if not math.isfinite(self.value) else self.value,
            "rho": None if self.rho is None else self.rho.tolist(),
            "policy": None if self.policy is None else self.policy.probs.tolist(),
            "aux": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.aux.items()},
            "solve_time": self.solve_time,
        }


CSV_FIELDS = ("instance_id", "method", "status", "bound", "gap_pct", "time")


@dataclass
class BoundReport:
    instance_id: str
    results: Dict[str, BoundResult]
    lower_method: str
    gaps: Dict[str, object] = field(default_factory=dict)
    extremal: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)

    @property
    def lower(self) -> BoundResult:
        return self.results[self.lower_method]

    def upper_methods(self):
        return [m for m in self.results if m != self.lower_method]

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "results": {m: r.to_dict() for m, r in self.results.items()},
            "lower_method": self.lower_method,
            "gaps": self.gaps,
            "extremal": self.extremal,
            "mc": {m: rep.to_dict() for m, rep in self.mc.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self):
        for method, res in self.results.items():
            gap = self.gaps.get(method, "")
            yield {
                "instance_id": self.instance_id,
                "method": method,
                "status": res.status,
                "bound": "" if not math.isfinite(res.value) else f"{res.value:.10g}",
                "gap_pct": gap if isinstance(gap, str) else f"{gap:.10g}",
                "time": f"{res.solve_time:.4f}",
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.csv_rows())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# helpers


def _weights(spec: RandomVectorSpec, kind: str) -> np.ndarray:
    if kind == "chebyshev":
        return spec.column_norms()
    if kind == "hoeffding":
        spec.require("upper", "lower")
        return spec.upper - spec.lower
    if kind == "subgaussian":
        spec.require("subgauss")
        return spec.subgauss
    raise ValueError(f"unknown kind {kind!r}")


def v_star(instance: CmdpInstance, unc: CostUncertainty, kind: str, k: int) -> float:
    """max over Q of sum rho(s,a) w(s,a) for the kind's per-pair weights of d[k]."""
    w = _weights(unc.d[k], kind)
    if not np.any(w):
        return 0.0
    res = mdp.optimize_over_polytope(instance, w, maximize=True)
    if res.status != mdp.OPTIMAL:
        raise RuntimeError(f"auxiliary LP for V*_{k} failed: {res.status}")
    return max(res.value, 0.0)


def default_y_grid(y_min: float = Y_MIN, n_geo: int = 20, n_lin: int = 44) -> np.ndarray:
    """64 nodes: geometric near zero where the factors are steep, linear elsewhere."""
    geo = np.geomspace(y_min, 0.05, n_geo, endpoint=False)
    return np.concatenate([geo, np.linspace(0.05, 1.0, n_lin)])


def secant_lines(nodes: np.ndarray, values: np.ndarray):
    """Slopes and intercepts of the chords between consecutive nodes."""
    slope = np.diff(values) / np.diff(nodes)
    icpt = values[:-1] - slope * nodes[:-1]
    return slope, icpt


def interpolate(nodes, values, y):
    return np.interp(y, nodes, values)


def _refine(nodes: np.ndarray, y: float, y_min: float) -> np.ndarray:
    """Add the incumbent and nearby points to a node set."""
    j = np.searchsorted(nodes, y)
    lo = nodes[max(j - 1, 0)]
    hi = nodes[min(j, nodes.size - 1)]
    width = max(hi - lo, 1e-9)
    extra = y + width * np.array([-0.25, -0.0625, 0.0, 0.0625, 0.25])
    extra = np.clip(extra, y_min, 1.0)
    merged = np.unique(np.concatenate([nodes, extra]))
    keep = np.concatenate([[True], np.diff(merged) > 1e-12])
    return merged[keep]


def _check_instance(instance: CmdpInstance, unc: CostUncertainty):
    if unc.c.dim != instance.n_pairs:
        raise ValueError("cost vectors must have one entry per state-action pair")
    if unc.n_constraints != instance.n_constraints:
        raise ValueError(f"instance has {instance.n_constraints} budgets, uncertainty has {unc.n_constraints}")


def _flow_rows(program: ConvexProgram, instance: CmdpInstance, rho: Affine):
    A, b = mdp.build_occupation_constraints(instance)
    program.add_linear(rho.left(A), "==", b, label="flow")


# ---------------------------------------------------------------------------
# upper bounds


def build_upper(instance: CmdpInstance, unc: CostUncertainty, kind: str, nodes=None,
                vstars=None, y_min: float = Y_MIN) -> ConvexProgram:
    """Program with objective rows from the kind's inequality and secant rows for f_k."""
    _check_instance(instance, unc)
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    K = unc.n_constraints
    if kind in ("hoeffding", "subgaussian") and K and unc.p1 < LEMMA5_THRESHOLD:
        raise ValueError(f"{kind} needs p1 >= 1 - exp(-1/2)")
    nodes = [default_y_grid(y_min)] * K if nodes is None else nodes
    vstars = [v_star(instance, unc, kind, k) for k in range(K)] if vstars is None else vstars
    prog = ConvexProgram(f"upper-{kind}")
    z = prog.add_variable("z", 1)
    rho = prog.add_variable("rho", instance.n_pairs, lower=0.0)
    _flow_rows(prog, instance, rho)
    emit_inner(prog, kind, rho, z, unc.p0, unc.c, label="objective")
    if K:
        y = prog.add_variable("y", K, lower=y_min, upper=1.0)
        t = prog.add_variable("t", K, lower=0.0)
        prog.add_linear(y.sum(), "==", 1.0, label="simplex")
        for k, dk in enumerate(unc.d):
            mean_row = rho.dot(dk.mean)
            if vstars[k] == 0.0:
                prog.add_linear(mean_row, "<=", instance.budgets[k], label=f"d{k}:exact")
                continue
            vals = y_factor(kind, unc.p1, nodes[k], unc.theta)
            slope, icpt = secant_lines(nodes[k], vals)
            yk = y[k]
            prog.add_linear(yk.left(slope[:, None]) + icpt, "<=", t[k], label=f"d{k}:secant")
            prog.add_linear(mean_row + t[k] * vstars[k], "<=", instance.budgets[k], label=f"d{k}:{kind}")
    prog.minimize(z)
    return prog


def build_upper_bernstein(instance: CmdpInstance, unc: CostUncertainty, h0: float = DEFAULT_H,
                          hk=DEFAULT_H, nodes=None, y_min: float = Y_MIN) -> ConvexProgram:
    _check_instance(instance, unc)
    K = unc.n_constraints
    hk = np.broadcast_to(np.asarray(hk, dtype=float), (K,))
    if h0 <= 0 or np.any(hk <= 0):
        raise ValueError("Bernstein constants must be positive")
    nodes = [default_y_grid(y_min)] * K if nodes is None else nodes
    prog = ConvexProgram("upper-bernstein")
    z = prog.add_variable("z", 1)
    rho = prog.add_variable("rho", instance.n_pairs, lower=0.0)
    _flow_rows(prog, instance, rho)
    emit_inner(prog, "bernstein", rho, z, unc.p0, unc.c, h=h0, label="objective")
    if K:
        y = prog.add_variable("y", K, lower=y_min, upper=1.0)
        w = prog.add_variable("w", K)
        prog.add_linear(y.sum(), "==", 1.0, label="simplex")
        for k, dk in enumerate(unc.d):
            if dk.is_degenerate("bernstein"):
                prog.add_linear(rho.dot(dk.mean), "<=", instance.budgets[k], label=f"d{k}:exact")
                continue
            vals = log_one_minus_exponent(unc.p1, nodes[k], unc.theta)
            slope, icpt = secant_lines(nodes[k], vals)
            prog.add_linear(w[k], "<=", y[k].left(slope[:, None]) + icpt, label=f"d{k}:secant")
            exps, weights, groups, linear = bernstein_terms(rho, dk, hk[k])
            rhs = w[k] + hk[k] * instance.budgets[k]
            if linear is not None:
                rhs = rhs - linear
            prog.add_lse_constraint(exps, weights, rhs, groups=groups, label=f"d{k}:bernstein")
    prog.minimize(z)
    return prog


def _solve_with_refinement(build, instance, unc, method: str, factor, max_refine: int,
                           y_min: float, solve_opts) -> BoundResult:
    """Solve, then add grid nodes around the incumbent y until the value settles."""
    K = unc.n_constraints
    nodes = [default_y_grid(y_min) for _ in range(K)]
    start = time.perf_counter()
    history = []
    sol: Optional[Solution] = None
    best: Optional[Solution] = None
    for rnd in range(max_refine + 1):
        sol = build(nodes).solve(**solve_opts)
        if not sol.optimal:
            break
        history.append(sol.objective)
        best = sol
        if K == 0 or rnd == max_refine:
            break
        y = sol["y"]
        err = max(abs(interpolate(nodes[k], factor(nodes[k]), y[k]) - float(factor(y[k])))
                  for k in range(K))
        if len(history) > 1 and history[-2] - history[-1] <= 1e-10 * (1 + abs(history[-1])) and err < 1e-8:
            break
        nodes = [_refine(nodes[k], y[k], y_min) for k in range(K)]
    elapsed = time.perf_counter() - start
    if best is None:
        return BoundResult(method, sol.status, solve_time=elapsed, stats=sol.stats)
    rho = np.maximum(best["rho"], 0.0)
    aux = {"y": best["y"]} if K else {}
    aux["refine_history"] = history
    return BoundResult(method, mdp.OPTIMAL, best.objective, rho, mdp.recover_policy(instance, rho),
                       aux, elapsed, best.stats)


def solve_upper(instance: CmdpInstance, unc: CostUncertainty, kind: str, max_refine: int = 8,
                y_min: float = Y_MIN, **solve_opts) -> BoundResult:
    try:
        vstars = [v_star(instance, unc, kind, k) for k in range(unc.n_constraints)]
    except RuntimeError as exc:
        return BoundResult(kind, mdp.NUMERICAL_FAILURE, stats={"error": str(exc)})

    def factor(y):
        return y_factor(kind, unc.p1, y, unc.theta)

    res = _solve_with_refinement(
        lambda nodes: build_upper(instance, unc, kind, nodes, vstars, y_min),
        instance, unc, kind, factor, max_refine, y_min, solve_opts)
    res.aux["v_star"] = vstars
    return res


def solve_upper_bernstein(instance: CmdpInstance, unc: CostUncertainty, h0: float = DEFAULT_H,
                          hk=DEFAULT_H, max_refine: int = 8, y_min: float = Y_MIN,
                          **solve_opts) -> BoundResult:
    def factor(y):
        return log_one_minus_exponent(unc.p1, y, unc.theta)

    res = _solve_with_refinement(
        lambda nodes: build_upper_bernstein(instance, unc, h0, hk, nodes, y_min),
        instance, unc, "bernstein", factor, max_refine, y_min, solve_opts)
    res.aux["h0"] = h0
    return res


def search_bernstein_h(instance: CmdpInstance, unc: CostUncertainty,
                       grid: Sequence[float] = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0),
                       **kw) -> BoundResult:
    """Try a common h for all Bernstein rows over a grid and keep the best bound."""
    best = None
    for h in grid:
        res = solve_upper_bernstein(instance, unc, h, h, **kw)
        if res.optimal and (best is None or res.value < best.value):
            best = res
    if best is None:
        return BoundResult("bernstein", mdp.INFEASIBLE)
    best.aux["h_grid"] = list(grid)
    return best


# ---------------------------------------------------------------------------
# lower bound


def build_lower(instance: CmdpInstance, unc: CostUncertainty, lambda_c: float = DEFAULT_LAMBDA,
                lambda_d: float = DEFAULT_LAMBDA, tangent_points=None) -> ConvexProgram:
    _check_instance(instance, unc)
    if lambda_c <= 0 or lambda_d <= 0:
        raise ValueError("lambda constants must be positive")
    pts = default_tangent_points() if tangent_points is None else np.asarray(tangent_points, dtype=float)
    a, b = tangent_coefficients(unc.p1, unc.theta, pts)
    prog = ConvexProgram("lower")
    z = prog.add_variable("z", 1)
    rho = prog.add_variable("rho", instance.n_pairs, lower=0.0)
    _flow_rows(prog, instance, rho)
    emit_outer(prog, rho, z, unc.p0, unc.c, lam=lambda_c, name="m_c", label="objective")
    K = unc.n_constraints
    if K:
        ybar = prog.add_variable("ybar", K, lower=0.0)
        m_d = prog.add_variable("m_d", 1, lower=lambda_d)
        prog.add_linear(ybar.sum(), "==", m_d, label="ybar-sum")
        ones = np.ones((a.size, 1))
        for k, dk in enumerate(unc.d):
            dk.require("upper", "lower")
            xi = instance.budgets[k]
            base = rho.dot(dk.mean) - xi
            rows = base.left(ones) + m_d.left((a - 1.0)[:, None]) + ybar[k].left(b[:, None])
            prog.add_linear(rows, "<=", 0.0, label=f"d{k}:tangent")
            prog.add_linear(rho.dot(dk.upper) - xi, "<=", m_d, label=f"d{k}:upper")
            prog.add_linear(rho.dot(dk.lower), "<=", xi, label=f"d{k}:quantile")
    prog.minimize(z)
    return prog


def solve_lower(instance: CmdpInstance, unc: CostUncertainty, lambda_c: float = DEFAULT_LAMBDA,
                lambda_d: float = DEFAULT_LAMBDA, tangent_points=None, **solve_opts) -> BoundResult:
    start = time.perf_counter()
    sol = build_lower(instance, unc, lambda_c, lambda_d, tangent_points).solve(**solve_opts)
    elapsed = time.perf_counter() - start
    if not sol.optimal:
        return BoundResult(LOWER_METHOD, sol.status, solve_time=elapsed, stats=sol.stats)
    rho = np.maximum(sol["rho"], 0.0)
    aux = {"m_c": float(sol["m_c"][0])}
    if unc.n_constraints:
        aux.update(ybar=sol["ybar"], m_d=float(sol["m_d"][0]))
    return BoundResult(LOWER_METHOD, mdp.OPTIMAL, sol.objective, rho,
                       mdp.recover_policy(instance, rho), aux, elapsed, sol.stats)


# ---------------------------------------------------------------------------
# orchestration


def solve_method(instance: CmdpInstance, unc: CostUncertainty, method: str,
                 h: float = DEFAULT_H, lam: float = DEFAULT_LAMBDA, tangent_points=None,
                 **solve_opts) -> BoundResult:
    try:
        if method in KINDS:
            return solve_upper(instance, unc, method, **solve_opts)
        if method == "bernstein":
            return solve_upper_bernstein(instance, unc, h, h, **solve_opts)
        if method == LOWER_METHOD:
            return solve_lower(instance, unc, lam, lam, tangent_points, **solve_opts)
    except MissingSpecData as exc:
        return BoundResult(method, MISSING_DATA, stats={"error": str(exc)})
    except (ValueError, RuntimeError) as exc:
        return BoundResult(method, mdp.NUMERICAL_FAILURE, stats={"error": str(exc)})
    raise ValueError(f"unknown method {method!r}")


def solve_random_costs(instance: CmdpInstance, unc: CostUncertainty,
                       methods: Sequence[str] = UPPER_METHODS, instance_id: str = "instance",
                       jobs: int = 1, h: float = DEFAULT_H, lam: float = DEFAULT_LAMBDA,
                       tangent_points=None, extremal: bool = True, **solve_opts) -> BoundReport:
    """Run the requested upper bounds plus the lower bound and assemble a report."""
    methods = [m for m in methods if m != LOWER_METHOD]
    if not methods:
        raise ValueError("at least one upper-bound method is required")
    todo = methods + [LOWER_METHOD]

    def run(m):
        return solve_method(instance, unc, m, h=h, lam=lam, tangent_points=tangent_points, **solve_opts)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(m) for m in todo]
    report = BoundReport(instance_id, dict(zip(todo, results)), LOWER_METHOD)
    from .validation import attach_gaps, extremal_bounds_costs

    if extremal:
        report.extremal = extremal_bounds_costs(instance, unc, methods, h=h)
    attach_gaps(report)
    return report
