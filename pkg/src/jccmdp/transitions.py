"""Bounds for the JCCMDP when both running costs and transition kernels are random.

The kernel is ``mu + zeta`` with ``mu`` the instance kernel and ``zeta`` a
zero-row-sum perturbation bounded by ``[zeta_lower, zeta_upper]``. Replacing
the random tail costs by state-wise envelopes turns each chance constraint
into an individual linear one in the aggregated perturbations

    X(s,a) = sum_s' w(s') zeta(s'|s,a),   w = envelope - envelope[anchor] >= 0,

which the inequalities of :mod:`jccmdp.chance` then handle. The joint
constraint is split with a union bound (level ``1 - (1-p1)/K`` per row).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import mdp
from .chance import (DEFAULT_H, DEFAULT_LAMBDA, MissingSpecData, RandomVectorSpec, emit_inner,
                     emit_outer)
from .convex import Affine, ConvexProgram
from .costs import MISSING_DATA, BoundReport, BoundResult, CostUncertainty
from .mdp import CmdpInstance, StationaryPolicy

TP_UPPER_METHODS = ("tp.chebyshev", "tp.hoeffding", "tp.bernstein")
TP_LOWER_METHOD = "tp.lower"
BOUND_TOL = 1e-12


@dataclass(frozen=True)
class TransitionUncertainty:
    """Perturbation bounds per (pair, next state) plus cost bounds.

    ``row_cov`` optionally holds one |S| x |S| covariance per pair; rows are
    modelled as mutually independent, so no cross-pair blocks are kept.
    """

    zeta_upper: np.ndarray
    zeta_lower: np.ndarray
    costs: CostUncertainty
    row_cov: Optional[np.ndarray] = None
    independent_rows: bool = True

    def __post_init__(self):
        zu = np.asarray(self.zeta_upper, dtype=float)
        zl = np.asarray(self.zeta_lower, dtype=float)
        if zu.shape != zl.shape or zu.ndim != 2:
            raise ValueError("perturbation bounds must be matching (pairs, states) arrays")
        if np.any(zu < 0) or np.any(zl > 0):
            raise ValueError("need zeta_upper >= 0 and zeta_lower <= 0")
        object.__setattr__(self, "zeta_upper", zu)
        object.__setattr__(self, "zeta_lower", zl)
        if self.row_cov is not None:
            cov = np.asarray(self.row_cov, dtype=float)
            if cov.shape != zu.shape + (zu.shape[1],):
                raise ValueError("row_cov must have shape (pairs, states, states)")
            object.__setattr__(self, "row_cov", cov)
        for name in ("upper", "lower"):
            for spec in self.costs.specs():
                spec.require(name)

    @property
    def n_constraints(self) -> int:
        return self.costs.n_constraints

    def check(self, instance: CmdpInstance, tol: float = BOUND_TOL):
        """Raise if the bounds could push a kernel entry outside [0, 1]."""
        mu = instance.kernel
        if self.zeta_upper.shape != mu.shape:
            raise ValueError("perturbation bounds do not match the kernel shape")
        if np.any(mu + self.zeta_lower < -tol) or np.any(mu + self.zeta_upper > 1 + tol):
            raise ValueError("perturbation bounds leave the probability range")
        if np.any(self.zeta_lower[mu == 0] != 0):
            raise ValueError("zeta_lower must vanish where the mean kernel is zero")
        if self.costs.c.dim != instance.n_pairs or self.n_constraints != instance.n_constraints:
            raise ValueError("cost bounds do not match the instance")

    def zeroed(self) -> "TransitionUncertainty":
        zero = np.zeros_like(self.zeta_upper)
        cov = None if self.row_cov is None else np.zeros_like(self.row_cov)
        return TransitionUncertainty(zero, zero, self.costs.zeroed(), cov, self.independent_rows)


@dataclass(frozen=True)
class CostEnvelopes:
    """State-wise bounds on the random tail cost, per cost stream.

    Row 0 is the objective cost, rows 1..K the constraint costs.
    """

    upper: np.ndarray  # (K+1, S): C_max, D^k_max
    lower: np.ndarray  # (K+1, S): C_min, D^k_min
    scalar_max: np.ndarray  # (K+1,): c_max, d^k_max
    scalar_min: np.ndarray

    @property
    def anchors_upper(self) -> np.ndarray:
        return np.argmin(self.upper, axis=1)

    @property
    def anchors_lower(self) -> np.ndarray:
        return np.argmin(self.lower, axis=1)


def cost_envelopes(instance: CmdpInstance, unc: TransitionUncertainty) -> CostEnvelopes:
    alpha = instance.alpha
    starts = np.array([sl.start for sl in instance.state_slices])
    ups, los, smax, smin = [], [], [], []
    for spec in unc.costs.specs():
        hi, lo = spec.upper, spec.lower
        smax.append(hi.max())
        smin.append(lo.min())
        ups.append(np.maximum.reduceat(hi, starts) + alpha / (1 - alpha) * hi.max())
        los.append(np.minimum.reduceat(lo, starts) + alpha / (1 - alpha) * lo.min())
    return CostEnvelopes(np.array(ups), np.array(los), np.array(smax), np.array(smin))


def q_identity_residual(instance: CmdpInstance, policy: StationaryPolicy, zeta: np.ndarray) -> float:
    """Infinity-norm residual of Q = Q^M (I + alpha Z Q) for a sampled perturbation."""
    n = instance.n_states
    alpha = instance.alpha
    M = mdp.policy_matrix(instance, policy)
    Z = mdp.policy_matrix(instance, policy, kernel=np.asarray(zeta, dtype=float))
    eye = np.eye(n)
    Q = np.linalg.solve(eye - alpha * (M + Z), eye)
    QM_rhs = eye + alpha * Z @ Q
    rhs = np.linalg.solve(eye - alpha * M, QM_rhs)
    return float(np.abs(Q - rhs).sum(axis=1).max())


def _anchor_weights(values: np.ndarray, anchor: Optional[int]) -> np.ndarray:
    j = int(np.argmin(values)) if anchor is None else int(anchor)
    return values - values[j]


@dataclass
class _Stream:
    """Per-stream data: affine rhs expression and aggregated perturbation spec."""

    rhs: Affine
    spec: RandomVectorSpec
    level: float


def _aggregate_spec(unc: TransitionUncertainty, w: np.ndarray) -> RandomVectorSpec:
    # entrywise so the bounds stay valid when an anchor makes some weights negative
    hi, lo = unc.zeta_upper * w, unc.zeta_lower * w
    xu = np.maximum(hi, lo).sum(axis=1)
    xl = np.minimum(hi, lo).sum(axis=1)
    var = None
    if unc.row_cov is not None:
        var = np.maximum(np.einsum("i,pij,j->p", w, unc.row_cov, w), 0.0)
    return RandomVectorSpec(np.zeros(xu.size), cov=var, upper=xu, lower=xl,
                            independent=unc.independent_rows)


def g_weights(instance: CmdpInstance, unc: TransitionUncertainty, env: CostEnvelopes) -> np.ndarray:
    """(K+1, pairs) coefficients of the correction alpha * sum_s' (up - lo)(s') zeta^l(s'|s,a) <= 0."""
    return instance.alpha * (env.upper - env.lower) @ unc.zeta_lower.T


def _budgets(instance, unc):
    return np.concatenate([[np.nan], np.asarray(instance.budgets, dtype=float)])


def r_terms_upper(instance: CmdpInstance, unc: TransitionUncertainty, env: CostEnvelopes,
                  rho: Affine, z: Affine, anchors=None):
    """Right-hand sides R_c, R_dk and aggregated perturbation specs of the inner ILCCP."""
    alpha = instance.alpha
    if alpha <= 0:
        raise ValueError("the random-kernel pipeline needs alpha > 0")
    g = g_weights(instance, unc, env)
    xi = _budgets(instance, unc)
    K = unc.n_constraints
    out = []
    for j, spec in enumerate(unc.costs.specs()):
        head = z if j == 0 else Affine.constant(xi[j])
        rhs = (head - rho.dot(spec.upper) + rho.dot(g[j])) / alpha
        w = _anchor_weights(env.upper[j], None if anchors is None else anchors[j])
        level = unc.costs.p0 if j == 0 else 1 - (1 - unc.costs.p1) / K
        out.append(_Stream(rhs, _aggregate_spec(unc, w), level))
    return out


def r_terms_lower(instance: CmdpInstance, unc: TransitionUncertainty, env: CostEnvelopes,
                  rho: Affine, z: Affine, anchors=None):
    alpha = instance.alpha
    if alpha <= 0:
        raise ValueError("the random-kernel pipeline needs alpha > 0")
    g = g_weights(instance, unc, env)
    xi = _budgets(instance, unc)
    out = []
    for j, spec in enumerate(unc.costs.specs()):
        head = z if j == 0 else Affine.constant(xi[j])
        rhs = (head - rho.dot(spec.lower) - rho.dot(g[j])) / alpha
        w = _anchor_weights(env.lower[j], None if anchors is None else anchors[j])
        level = unc.costs.p0 if j == 0 else unc.costs.p1
        out.append(_Stream(rhs, _aggregate_spec(unc, w), level))
    return out


def _base(instance: CmdpInstance, unc: TransitionUncertainty, name: str):
    unc.check(instance, tol=1e-9)
    prog = ConvexProgram(name)
    z = prog.add_variable("z", 1)
    rho = prog.add_variable("rho", instance.n_pairs, lower=0.0)
    A, b = mdp.build_occupation_constraints(instance)
    prog.add_linear(rho.left(A), "==", b, label="flow")
    return prog, z, rho


def build_upper_tp(instance: CmdpInstance, unc: TransitionUncertainty, kind: str,
                   anchors=None) -> ConvexProgram:
    if kind not in ("chebyshev", "hoeffding"):
        raise ValueError(f"unsupported kind {kind!r}")
    prog, z, rho = _base(instance, unc, f"upper-tp-{kind}")
    env = cost_envelopes(instance, unc)
    for j, st in enumerate(r_terms_upper(instance, unc, env, rho, z, anchors)):
        emit_inner(prog, kind, rho, st.rhs, st.level, st.spec, label="objective" if j == 0 else f"d{j - 1}")
    prog.minimize(z)
    return prog


def build_upper_tp_bernstein(instance: CmdpInstance, unc: TransitionUncertainty,
                             h0: float = DEFAULT_H, hk=DEFAULT_H, anchors=None) -> ConvexProgram:
    K = unc.n_constraints
    hs = np.concatenate([[h0], np.broadcast_to(np.asarray(hk, dtype=float), (K,))])
    prog, z, rho = _base(instance, unc, "upper-tp-bernstein")
    env = cost_envelopes(instance, unc)
    for j, st in enumerate(r_terms_upper(instance, unc, env, rho, z, anchors)):
        emit_inner(prog, "bernstein", rho, st.rhs, st.level, st.spec, h=hs[j],
                   label="objective" if j == 0 else f"d{j - 1}")
    prog.minimize(z)
    return prog


def build_lower_tp(instance: CmdpInstance, unc: TransitionUncertainty,
                   lambda_c: float = DEFAULT_LAMBDA, lambda_d=DEFAULT_LAMBDA, anchors=None) -> ConvexProgram:
    K = unc.n_constraints
    lams = np.concatenate([[lambda_c], np.broadcast_to(np.asarray(lambda_d, dtype=float), (K,))])
    prog, z, rho = _base(instance, unc, "lower-tp")
    env = cost_envelopes(instance, unc)
    for j, st in enumerate(r_terms_lower(instance, unc, env, rho, z, anchors)):
        name = "m_c" if j == 0 else f"m_d{j - 1}"
        emit_outer(prog, rho, st.rhs, st.level, st.spec, lam=lams[j], name=name,
                   label="objective" if j == 0 else f"d{j - 1}")
    prog.minimize(z)
    return prog


def solve_tp_method(instance: CmdpInstance, unc: TransitionUncertainty, method: str,
                    h: float = DEFAULT_H, lam: float = DEFAULT_LAMBDA, anchors=None,
                    **solve_opts) -> BoundResult:
    start = time.perf_counter()
    try:
        if method == "tp.chebyshev":
            prog = build_upper_tp(instance, unc, "chebyshev", anchors)
        elif method == "tp.hoeffding":
            prog = build_upper_tp(instance, unc, "hoeffding", anchors)
        elif method == "tp.bernstein":
            prog = build_upper_tp_bernstein(instance, unc, h, h, anchors)
        elif method == TP_LOWER_METHOD:
            prog = build_lower_tp(instance, unc, lam, lam, anchors)
        else:
            raise KeyError(method)
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    except MissingSpecData as exc:
        return BoundResult(method, MISSING_DATA, stats={"error": str(exc)})
    except ValueError as exc:
        return BoundResult(method, mdp.NUMERICAL_FAILURE, stats={"error": str(exc)})
    sol = prog.solve(**solve_opts)
    elapsed = time.perf_counter() - start
    if not sol.optimal:
        return BoundResult(method, sol.status, solve_time=elapsed, stats=sol.stats)
    rho = np.maximum(sol["rho"], 0.0)
    return BoundResult(method, mdp.OPTIMAL, sol.objective, rho, mdp.recover_policy(instance, rho),
                       {}, elapsed, sol.stats)


def solve_random_tp(instance: CmdpInstance, unc: TransitionUncertainty,
                    methods: Sequence[str] = TP_UPPER_METHODS, instance_id: str = "instance",
                    jobs: int = 1, h: float = DEFAULT_H, lam: float = DEFAULT_LAMBDA,
                    extremal: bool = True, anchors=None, **solve_opts) -> BoundReport:
    methods = [m if m.startswith("tp.") else f"tp.{m}" for m in methods]
    methods = [m for m in methods if m != TP_LOWER_METHOD]
    if not methods:
        raise ValueError("at least one upper-bound method is required")
    todo = methods + [TP_LOWER_METHOD]

    def run(m):
        return solve_tp_method(instance, unc, m, h=h, lam=lam, anchors=anchors, **solve_opts)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(m) for m in todo]
    report = BoundReport(instance_id, dict(zip(todo, results)), TP_LOWER_METHOD)
    from .validation import attach_gaps, extremal_bounds_tp

    if extremal:
        report.extremal = extremal_bounds_tp(instance, unc, methods, h=h)
    attach_gaps(report)
    return report
