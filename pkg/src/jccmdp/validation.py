"""Monte Carlo checks, brute-force oracles, gap metrics and a-priori extremal bounds."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

from . import mdp
from .chance import DEFAULT_H, safety_factor
from .costs import BoundReport, CostUncertainty
from .generators import (COPULA_COMONOTONE, INDEPENDENT, as_rng, sample_cost_realization,
                         sample_transition_realization)
from .mdp import CmdpInstance, StationaryPolicy
from .transitions import TransitionUncertainty, cost_envelopes, g_weights

NOT_APPLICABLE = "NotApplicable"
MC_DEFAULT_N = 10_000
_CHUNK = 2000


@dataclass
class McReport:
    n: int
    p_objective: float
    p_joint: float
    p_individual: list
    sampler: str
    envelope_violations: int = 0
    extra: dict = field(default_factory=dict)

    @staticmethod
    def se(p: float, n: int) -> float:
        return math.sqrt(max(p * (1 - p), 0.0) / n)

    @property
    def se_objective(self) -> float:
        return self.se(self.p_objective, self.n)

    @property
    def se_joint(self) -> float:
        return self.se(self.p_joint, self.n)

    def passes(self, p0: float, p1: float, n_se: float = 3.0) -> bool:
        """Both empirical probabilities clear their nominal level minus n_se standard errors.

        The standard error is taken at the nominal level so that an empirical
        probability of exactly 1 is not judged with a zero-width band.
        """
        ok0 = self.p_objective >= p0 - n_se * self.se(p0, self.n)
        ok1 = self.p_joint >= p1 - n_se * self.se(p1, self.n)
        return ok0 and ok1

    def to_dict(self) -> dict:
        return {
            "n": self.n, "sampler": self.sampler,
            "p_objective": self.p_objective, "se_objective": self.se_objective,
            "p_joint": self.p_joint, "se_joint": self.se_joint,
            "p_individual": list(self.p_individual),
            "envelope_violations": self.envelope_violations,
        }


def _as_rho(instance: CmdpInstance, policy_or_rho) -> np.ndarray:
    if isinstance(policy_or_rho, StationaryPolicy):
        return mdp.induced_occupation(instance, policy_or_rho)
    return np.asarray(policy_or_rho, dtype=float)


def _shard_seeds(seed, n: int):
    """One child seed per chunk of at most _CHUNK draws, spawned from the master seed."""
    n_chunks = max(1, math.ceil(n / _CHUNK))
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [(child, min(_CHUNK, n - i * _CHUNK)) for i, child in enumerate(ss.spawn(n_chunks))]


def mc_check_costs(instance: CmdpInstance, unc: CostUncertainty, policy_or_rho, z: float,
                   n: int = MC_DEFAULT_N, sampler: str = COPULA_COMONOTONE, seed=0) -> McReport:
    rho = _as_rho(instance, policy_or_rho)
    xi = np.asarray(instance.budgets, dtype=float)
    hits_obj = 0
    hits_joint = 0
    hits_ind = np.zeros(unc.n_constraints)
    for child, m in _shard_seeds(seed, n):
        c, d = sample_cost_realization(unc, sampler, child, n=m)
        hits_obj += int(np.count_nonzero(c @ rho <= z))
        ok = d @ rho <= xi  # (m, K)
        hits_ind += ok.sum(axis=0)
        hits_joint += int(np.count_nonzero(ok.all(axis=1)))
    return McReport(n, hits_obj / n, hits_joint / n, (hits_ind / n).tolist(), sampler)


def mc_check_tp(instance: CmdpInstance, unc: TransitionUncertainty, policy: StationaryPolicy,
                z: float, n: int = MC_DEFAULT_N, seed=0, envelope_tol: float = 1e-9) -> McReport:
    """Sample perturbed kernels and independent costs, evaluate discounted costs exactly.

    Each draw also checks that the state-wise tail costs stay inside the envelopes.
    """
    if isinstance(policy, np.ndarray):
        policy = mdp.recover_policy(instance, policy)
    policy.check(instance)
    env = cost_envelopes(instance, unc)
    alpha = instance.alpha
    S = instance.n_states
    xi = np.asarray(instance.budgets, dtype=float)
    K = unc.n_constraints
    eye = np.eye(S)
    starts = [sl.start for sl in instance.state_slices]
    hits_obj = hits_joint = violations = 0
    hits_ind = np.zeros(K)
    for child, m in _shard_seeds(seed, n):
        rng = as_rng(child)
        zeta = sample_transition_realization(instance, unc, rng, n=m)
        P = instance.kernel[None] + zeta
        P_f = np.add.reduceat(P * policy.probs[None, :, None], starts, axis=1)  # (m, S, S)
        c, d = sample_cost_realization(unc.costs, INDEPENDENT, rng, n=m)
        costs = np.concatenate([c[:, None, :], d], axis=1)  # (m, K+1, pairs)
        cf = mdp.policy_cost(instance, policy, costs)  # (m, K+1, S)
        v = np.linalg.solve(eye[None] - alpha * P_f, np.swapaxes(cf, 1, 2))  # (m, S, K+1)
        v = np.swapaxes(v, 1, 2)
        low = v < env.lower[None] - envelope_tol * (1 + np.abs(env.lower[None]))
        high = v > env.upper[None] + envelope_tol * (1 + np.abs(env.upper[None]))
        violations += int(np.count_nonzero(low | high))
        value = (1 - alpha) * v @ instance.gamma  # (m, K+1)
        hits_obj += int(np.count_nonzero(value[:, 0] <= z))
        ok = value[:, 1:] <= xi
        hits_ind += ok.sum(axis=0)
        hits_joint += int(np.count_nonzero(ok.all(axis=1)))
    return McReport(n, hits_obj / n, hits_joint / n, (hits_ind / n).tolist(), "tp-independent",
                    envelope_violations=violations)


# ---------------------------------------------------------------------------
# brute-force oracle


def enumerate_vertices(instance: CmdpInstance) -> np.ndarray:
    """Occupation measures of all deterministic policies (the vertices of Q)."""
    choices = itertools.product(*(range(n) for n in instance.actions_per_state))
    return np.array([mdp.induced_occupation(instance, mdp.deterministic_policy(instance, ch))
                     for ch in choices])


def candidate_points(instance: CmdpInstance, n_interior: int = 10_000, seed=0) -> np.ndarray:
    """Vertices, pairwise midpoints and Dirichlet-weighted interior points of Q."""
    V = enumerate_vertices(instance)
    idx = np.array(list(itertools.combinations(range(len(V)), 2)), dtype=int).reshape(-1, 2)
    mids = 0.5 * (V[idx[:, 0]] + V[idx[:, 1]])
    w = as_rng(seed).dirichlet(np.ones(len(V)), size=n_interior)
    return np.vstack([V, mids, w @ V])


MAX_ORACLE_PAIRS = 8
MAX_ORACLE_SCENARIOS = 10_000


def brute_force_costs_oracle(instance: CmdpInstance, unc: CostUncertainty, m: int = 2000,
                             seed=0, sampler: str = COPULA_COMONOTONE, n_interior: int = 10_000):
    """Best z over candidate points meeting the empirical levels on m scenarios.

    Returns (value, rho); value is +inf when no candidate meets the joint level.
    """
    if instance.n_pairs > MAX_ORACLE_PAIRS or m > MAX_ORACLE_SCENARIOS:
        raise ValueError("oracle is limited to tiny instances and at most 1e4 scenarios")
    ss = np.random.SeedSequence(seed)
    s_draw, s_pts = ss.spawn(2)
    c, d = sample_cost_realization(unc, sampler, s_draw, n=m)
    pts = candidate_points(instance, n_interior, s_pts)
    xi = np.asarray(instance.budgets, dtype=float)
    q_index = math.ceil(unc.p0 * m) - 1
    best, best_rho = math.inf, None
    for start in range(0, len(pts), 1000):
        block = pts[start:start + 1000]
        if unc.n_constraints:
            ok = np.all(np.einsum("mkp,np->nmk", d, block) <= xi, axis=2).mean(axis=1) >= unc.p1
        else:
            ok = np.ones(len(block), dtype=bool)
        if not ok.any():
            continue
        obj = np.sort(block[ok] @ c.T, axis=1)[:, q_index]
        j = int(np.argmin(obj))
        if obj[j] < best:
            best, best_rho = float(obj[j]), block[ok][j]
    return best, best_rho


# ---------------------------------------------------------------------------
# gaps and extremal bounds


def gap_percent(ub: float, lb: float) -> Union[float, str]:
    if not (math.isfinite(ub) and math.isfinite(lb)) or lb <= 0:
        return NOT_APPLICABLE
    return (ub - lb) / lb * 100.0


def _polytope_opt(instance, weights, maximize):
    res = mdp.optimize_over_polytope(instance, weights, maximize=maximize)
    if res.status != mdp.OPTIMAL:
        raise RuntimeError(f"extremal LP failed: {res.status}")
    return res.value


def extremal_bounds_costs(instance: CmdpInstance, unc: CostUncertainty,
                          methods: Sequence[str] = ("chebyshev", "hoeffding", "subgaussian", "bernstein"),
                          h: float = DEFAULT_H) -> dict:
    """A-priori interval [lb, ub[method]] containing each approximation's optimal value."""
    c = unc.c
    ub = {}
    for m in methods:
        if m == "chebyshev" and c.cov is not None:
            w = c.mean + safety_factor("chebyshev", unc.p0) * c.column_norms()
        elif m == "hoeffding" and c.upper is not None:
            w = c.mean + safety_factor("hoeffding", unc.p0) * (c.upper - c.lower)
        elif m == "subgaussian" and c.subgauss is not None:
            w = c.mean + safety_factor("subgaussian", unc.p0) * c.subgauss
        elif m == "bernstein" and c.upper is not None:
            ub[m] = _polytope_opt(instance, c.upper, True) - math.log1p(-unc.p0) / h
            continue
        else:
            continue
        ub[m] = _polytope_opt(instance, w, True)
    lb = _polytope_opt(instance, c.lower, False)
    return {"ub": ub, "lb": lb}


def extremal_bounds_tp(instance: CmdpInstance, unc: TransitionUncertainty,
                       methods: Sequence[str] = ("tp.chebyshev", "tp.hoeffding", "tp.bernstein"),
                       h: float = DEFAULT_H) -> dict:
    env = cost_envelopes(instance, unc)
    g = g_weights(instance, unc, env)[0]
    alpha = instance.alpha
    cu, cl = unc.costs.c.upper, unc.costs.c.lower
    w_up = env.upper[0] - env.upper[0].min()
    w_lo = env.lower[0] - env.lower[0].min()
    xu, xl = unc.zeta_upper @ w_up, unc.zeta_lower @ w_up
    ub = {}
    for m in methods:
        if m == "tp.chebyshev" and unc.row_cov is not None:
            std = np.sqrt(np.maximum(np.einsum("i,pij,j->p", w_up, unc.row_cov, w_up), 0.0))
            w = cu - g + alpha * safety_factor("chebyshev", unc.costs.p0) * std
        elif m == "tp.hoeffding":
            w = cu - g + alpha * safety_factor("hoeffding", unc.costs.p0) * (xu - xl)
        elif m == "tp.bernstein":
            ub[m] = _polytope_opt(instance, cu - g + alpha * xu, True) - alpha / h * math.log1p(-unc.costs.p0)
            continue
        else:
            continue
        ub[m] = _polytope_opt(instance, w, True)
    lb = _polytope_opt(instance, cl + g + alpha * (unc.zeta_lower @ w_lo), False)
    return {"ub": ub, "lb": lb}


def attach_gaps(report: BoundReport) -> BoundReport:
    """Fill report.gaps and, when extremal data exist, the a-priori gaps and reductions."""
    lower = report.lower
    lb = lower.value if lower.optimal else math.nan
    gaps: Dict[str, object] = {}
    for m in report.upper_methods():
        res = report.results[m]
        gaps[m] = gap_percent(res.value, lb) if res.optimal else NOT_APPLICABLE
    report.gaps = gaps
    if report.extremal:
        G, reduction = {}, {}
        for m, ub_u in report.extremal["ub"].items():
            G[m] = gap_percent(ub_u, report.extremal["lb"])
            gap = gaps.get(m, NOT_APPLICABLE)
            if isinstance(G[m], float) and G[m] > 0 and isinstance(gap, float):
                reduction[m] = (G[m] - gap) / G[m] * 100.0
            else:
                reduction[m] = NOT_APPLICABLE
        report.extremal["G"] = G
        report.extremal["reduction"] = reduction
    return report
