"""Finite discounted CMDPs: occupation measures, exact LP solve, policy evaluation.

State-action pairs are stored flat, ordered by state and then by action, so a
vector "over pairs" has one entry per (s, a) with ``a`` in ``A(s)``. The kernel
is a dense ``(n_pairs, n_states)`` array of next-state probabilities.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog

STOCHASTIC_TOL = 1e-12
COND_WARN = 1e12

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL_FAILURE = "NumericalFailure"


class InvalidInstance(ValueError):
    pass


@dataclass(frozen=True)
class CmdpInstance:
    """A finite CMDP with K budget constraints.

    Parameters
    ----------
    actions_per_state : sequence of int
        Number of actions available in each state.
    kernel : ndarray, shape (n_pairs, n_states)
        Mean transition probabilities, one row per state-action pair.
    alpha : float
        Discount factor in (0, 1).
    gamma : ndarray, shape (n_states,)
        Initial distribution.
    budgets : ndarray, shape (K,)
        Constraint budgets xi_k.
    """

    actions_per_state: tuple
    kernel: np.ndarray
    alpha: float
    gamma: np.ndarray
    budgets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "actions_per_state", tuple(int(a) for a in self.actions_per_state))
        for name in ("kernel", "gamma", "budgets"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    def validate(self):
        n_s = len(self.actions_per_state)
        if n_s == 0 or min(self.actions_per_state) < 1:
            raise InvalidInstance("every state needs at least one action")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInstance(f"discount must lie in (0, 1), got {self.alpha}")
        if self.kernel.shape != (self.n_pairs, n_s):
            raise InvalidInstance(
                f"kernel shape {self.kernel.shape} != ({self.n_pairs}, {n_s})")
        if np.any(self.kernel < 0):
            raise InvalidInstance("kernel has negative entries")
        rows = np.abs(self.kernel.sum(axis=1) - 1.0)
        if rows.max() > STOCHASTIC_TOL:
            raise InvalidInstance(f"kernel row sums off by {rows.max():.3e}")
        if self.gamma.shape != (n_s,) or np.any(self.gamma < 0):
            raise InvalidInstance("initial distribution must be a nonnegative vector over states")
        if abs(self.gamma.sum() - 1.0) > STOCHASTIC_TOL:
            raise InvalidInstance("initial distribution must sum to 1")
        if self.budgets.ndim != 1:
            raise InvalidInstance("budgets must be a vector")

    @property
    def n_states(self) -> int:
        return len(self.actions_per_state)

    @property
    def n_pairs(self) -> int:
        return int(sum(self.actions_per_state))

    @property
    def n_constraints(self) -> int:
        return int(self.budgets.shape[0])

    @property
    def pair_state(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), self.actions_per_state)

    @property
    def pair_action(self) -> np.ndarray:
        return np.concatenate([np.arange(n) for n in self.actions_per_state])

    @property
    def state_slices(self) -> list:
        offsets = np.concatenate([[0], np.cumsum(self.actions_per_state)])
        return [slice(int(offsets[s]), int(offsets[s + 1])) for s in range(self.n_states)]

    def pair_index(self, s: int, a: int) -> int:
        return self.state_slices[s].start + a

    def with_kernel(self, kernel) -> "CmdpInstance":
        return CmdpInstance(self.actions_per_state, kernel, self.alpha, self.gamma, self.budgets)

    def with_budgets(self, budgets) -> "CmdpInstance":
        return CmdpInstance(self.actions_per_state, self.kernel, self.alpha, self.gamma, budgets)

    def with_alpha(self, alpha) -> "CmdpInstance":
        return CmdpInstance(self.actions_per_state, self.kernel, alpha, self.gamma, self.budgets)


@dataclass(frozen=True)
class StationaryPolicy:
    """Action probabilities f(s, a), stored over pairs in instance order."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def check(self, instance: CmdpInstance):
        if self.probs.shape != (instance.n_pairs,) or np.any(self.probs < 0):
            raise ValueError("policy must be a nonnegative vector over pairs")
        sums = np.add.reduceat(self.probs, [sl.start for sl in instance.state_slices])
        if np.abs(sums - 1.0).max() > STOCHASTIC_TOL:
            raise ValueError("policy rows must sum to 1")

    def state_distribution(self, instance: CmdpInstance, s: int) -> np.ndarray:
        return self.probs[instance.state_slices[s]]


@dataclass(frozen=True)
class LpResult:
    status: str
    value: float
    rho: Optional[np.ndarray]


def flow_matrix(instance: CmdpInstance, kernel=None) -> sp.csr_matrix:
    """Rows s' of sum_{(s,a)} rho(s,a) (delta(s', s) - alpha p(s'|s,a))."""
    P = instance.kernel if kernel is None else np.asarray(kernel, dtype=float)
    n_k, n_s = P.shape
    delta = sp.csr_matrix(
        (np.ones(n_k), (instance.pair_state, np.arange(n_k))), shape=(n_s, n_k))
    return (delta - instance.alpha * sp.csr_matrix(P.T)).tocsr()


def build_occupation_constraints(instance: CmdpInstance, kernel=None):
    """Return ``(A_eq, b_eq)`` with ``A_eq @ rho == b_eq`` and ``rho >= 0`` defining Q^alpha(gamma)."""
    return flow_matrix(instance, kernel), (1.0 - instance.alpha) * instance.gamma


def flow_residual(instance: CmdpInstance, rho, kernel=None) -> float:
    A, b = build_occupation_constraints(instance, kernel)
    return float(np.abs(A @ np.asarray(rho) - b).max())


def optimize_over_polytope(instance: CmdpInstance, weights, maximize=False,
                           A_ub=None, b_ub=None, kernel=None) -> LpResult:
    """Optimize a linear functional of rho over Q^alpha(gamma), plus optional rows."""
    A_eq, b_eq = build_occupation_constraints(instance, kernel)
    c = np.asarray(weights, dtype=float)
    res = linprog(-c if maximize else c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs")
    if res.status == 0:
        value = float(c @ res.x)
        return LpResult(OPTIMAL, value, np.maximum(res.x, 0.0))
    if res.status == 2:
        return LpResult(INFEASIBLE, float("nan"), None)
    if res.status == 3:
        # Q^alpha(gamma) is compact, so this means the backend misbehaved.
        return LpResult(NUMERICAL_FAILURE, float("nan"), None)
    return LpResult(NUMERICAL_FAILURE, float("nan"), None)


def solve_exact_cmdp(instance: CmdpInstance, cost, constraint_costs=None) -> LpResult:
    """Solve min rho.c s.t. rho.d_k <= xi_k, rho in Q^alpha(gamma)."""
    d = np.zeros((0, instance.n_pairs)) if constraint_costs is None else np.atleast_2d(
        np.asarray(constraint_costs, dtype=float))
    if d.shape[0] != instance.n_constraints:
        raise ValueError(f"expected {instance.n_constraints} constraint cost vectors, got {d.shape[0]}")
    if d.shape[0] == 0:
        return optimize_over_polytope(instance, cost)
    return optimize_over_polytope(instance, cost, A_ub=d, b_ub=instance.budgets)


def recover_policy(instance: CmdpInstance, rho) -> StationaryPolicy:
    """f(s,a) = rho(s,a) / sum_a rho(s,a); uniform over A(s) where that sum is zero."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("occupation measure must be nonnegative")
    probs = np.empty_like(rho)
    for sl in instance.state_slices:
        mass = rho[sl].sum()
        if mass > 0:
            probs[sl] = rho[sl] / mass
        else:
            probs[sl] = 1.0 / (sl.stop - sl.start)
    return StationaryPolicy(probs)


def policy_matrix(instance: CmdpInstance, policy: StationaryPolicy, kernel=None) -> np.ndarray:
    """P_f(s, s') = sum_a f(s,a) p(s'|s,a)."""
    P = instance.kernel if kernel is None else np.asarray(kernel, dtype=float)
    weighted = P * policy.probs[:, None]
    return np.add.reduceat(weighted, [sl.start for sl in instance.state_slices], axis=0)


def policy_cost(instance: CmdpInstance, policy: StationaryPolicy, cost) -> np.ndarray:
    """c_f(s) = sum_a f(s,a) c(s,a); works for a trailing pair axis of any batch shape."""
    cost = np.asarray(cost, dtype=float)
    starts = [sl.start for sl in instance.state_slices]
    return np.add.reduceat(cost * policy.probs, starts, axis=-1)


def _factor(M: np.ndarray):
    cond = np.linalg.cond(M, 1) if M.shape[0] <= 2000 else 0.0
    if not np.isfinite(cond):
        raise np.linalg.LinAlgError("singular system; kernel rows are invalid")
    if cond > COND_WARN:
        warnings.warn(f"ill-conditioned policy system (cond ~ {cond:.2e})", RuntimeWarning)
    return lu_factor(M)


def discounted_cost(instance: CmdpInstance, policy: StationaryPolicy, cost, kernel=None) -> float:
    """(1 - alpha) gamma^T (I - alpha P_f)^{-1} c_f via an LU solve."""
    P_f = policy_matrix(instance, policy, kernel)
    M = np.eye(instance.n_states) - instance.alpha * P_f
    v = lu_solve(_factor(M), policy_cost(instance, policy, cost))
    return float((1.0 - instance.alpha) * instance.gamma @ v)


def state_occupation(instance: CmdpInstance, policy: StationaryPolicy, kernel=None) -> np.ndarray:
    """x with (I - alpha P_f)^T x = (1 - alpha) gamma."""
    P_f = policy_matrix(instance, policy, kernel)
    M = np.eye(instance.n_states) - instance.alpha * P_f
    return lu_solve(_factor(M), (1.0 - instance.alpha) * instance.gamma, trans=1)


def induced_occupation(instance: CmdpInstance, policy: StationaryPolicy, kernel=None) -> np.ndarray:
    """rho(s,a) = ((1 - alpha) gamma^T Q_f)(s) f(s,a)."""
    x = state_occupation(instance, policy, kernel)
    return x[instance.pair_state] * policy.probs


# ---------------------------------------------------------------------------
# serialization

FORMAT_TAG = "jccmdp-instance"
FORMAT_VERSION = 1


def instance_to_dict(instance: CmdpInstance) -> dict:
    rows, cols = np.nonzero(instance.kernel)
    states = instance.pair_state[rows]
    actions = instance.pair_action[rows]
    triplets = [[int(s), int(a), int(t), float(p)]
                for s, a, t, p in zip(states, actions, cols, instance.kernel[rows, cols])]
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "states": instance.n_states,
        "actions": list(instance.actions_per_state),
        "alpha": float(instance.alpha),
        "gamma": [float(g) for g in instance.gamma],
        "xi": [float(x) for x in instance.budgets],
        "kernel": triplets,
    }


def instance_from_dict(data: dict) -> CmdpInstance:
    try:
        if data.get("format", FORMAT_TAG) != FORMAT_TAG:
            raise InvalidInstance(f"unknown format tag {data.get('format')!r}")
        n_s = int(data["states"])
        actions = [int(a) for a in data["actions"]]
        if len(actions) != n_s:
            raise InvalidInstance("'actions' must list one count per state")
        offsets = np.concatenate([[0], np.cumsum(actions)])
        kernel = np.zeros((int(offsets[-1]), n_s))
        for i, entry in enumerate(data["kernel"]):
            s, a, t, p = entry
            if not (0 <= s < n_s and 0 <= a < actions[s] and 0 <= t < n_s):
                raise InvalidInstance(f"kernel[{i}] references an undeclared index: {entry}")
            kernel[offsets[s] + a, t] += float(p)
        return CmdpInstance(actions, kernel, float(data["alpha"]),
                            np.asarray(data["gamma"], dtype=float),
                            np.asarray(data.get("xi", []), dtype=float))
    except KeyError as exc:
        raise InvalidInstance(f"missing field {exc.args[0]!r}") from None


def dumps_instance(instance: CmdpInstance, extra: Optional[dict] = None) -> str:
    data = instance_to_dict(instance)
    if extra:
        data.update(extra)
    return json.dumps(data, separators=(",", ":"))


def loads_instance(text: str) -> CmdpInstance:
    return instance_from_dict(json.loads(text))


def uniform_policy(instance: CmdpInstance) -> StationaryPolicy:
    return StationaryPolicy(np.concatenate([np.full(n, 1.0 / n) for n in instance.actions_per_state]))


def deterministic_policy(instance: CmdpInstance, choices: Sequence[int]) -> StationaryPolicy:
    probs = np.zeros(instance.n_pairs)
    for sl, a in zip(instance.state_slices, choices):
        probs[sl.start + int(a)] = 1.0
    return StationaryPolicy(probs)
