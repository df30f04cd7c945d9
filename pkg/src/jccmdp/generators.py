"""Benchmark instances and the samplers used to fix bounds and validate policies.

Every function that draws random numbers takes ``seed``, which may be an
integer, a ``numpy.random.SeedSequence`` or an existing ``Generator``.
Extremes of ``n`` i.i.d. draws are sampled directly from their joint order
statistic law rather than by materializing all ``n`` draws.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from . import mdp
from .chance import RandomVectorSpec
from .costs import CostUncertainty
from .mdp import CmdpInstance
from .transitions import TransitionUncertainty

COPULA_COMONOTONE = "copula_comonotone"
INDEPENDENT = "independent"
SAMPLERS = (COPULA_COMONOTONE, INDEPENDENT)
COV_ENTRY_LIMIT = 20_000_000


def as_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class QueueingConfig:
    L: int = 10
    service: Tuple[float, ...] = (0.2, 0.75, 0.9)
    admission: Tuple[float, ...] = (0.0, 0.5, 0.8)
    alpha: float = 0.9
    budgets: Tuple[float, ...] = (11.30, 11.35)
    var_range: Tuple[float, float] = (0.0, 0.8)
    n_bound_samples: int = 3000
    theta: float = 1.0
    p0: float = 0.9
    p1: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "service", tuple(self.service))
        object.__setattr__(self, "admission", tuple(self.admission))
        object.__setattr__(self, "budgets", tuple(self.budgets))
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if not (0 < min(self.service) and max(self.service) < 1):
            raise ValueError("service levels must lie in (0, 1)")
        if not (0 <= min(self.admission) and max(self.admission) < 1):
            raise ValueError("admission levels must lie in [0, 1)")
        if len(self.budgets) != 2:
            raise ValueError("the queueing model has exactly two budgets")


@dataclass(frozen=True)
class GarnetConfig:
    n_states: int = 20
    n_actions: int = 4
    branching: int = 10
    n_constraints: int = 2
    eta: float = 0.001
    alpha: float = 0.7
    c_mean_range: Tuple[float, float] = (50.0, 70.0)
    d_mean_range: Tuple[float, float] = (50.0, 100.0)
    var_range: Tuple[float, float] = (0.0, 0.4)
    budget_range: Tuple[float, float] = (80.0, 90.0)
    n_bound_samples: int = 3000
    n_cov_samples: int = 2000
    theta: float = 1.0
    p0: float = 0.9
    p1: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.branching <= self.n_states:
            raise ValueError("branching factor must lie in [1, n_states]")
        if self.n_actions < 1 or self.n_constraints < 0:
            raise ValueError("need at least one action and a nonnegative constraint count")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")


def config_from_dict(kind: str, data: dict):
    cls = {"queueing": QueueingConfig, "garnet": GarnetConfig}[kind]
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {kind} config fields: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


# ---------------------------------------------------------------------------
# extremes of n i.i.d. draws


def _extreme_uniforms(rng: np.random.Generator, n: int, shape):
    """(min, max) of n i.i.d. U(0,1) draws, sampled exactly."""
    if n < 2:
        raise ValueError("need at least two samples")
    u_min = 1.0 - rng.random(shape) ** (1.0 / n)
    u_max = u_min + (1.0 - u_min) * rng.random(shape) ** (1.0 / (n - 1))
    return u_min, u_max


def cost_bounds_from_samples(mean, diag_cov, n: int = 3000, seed=None):
    """Componentwise (max, min) of n Gaussian draws; zero variance gives the mean."""
    mean = np.asarray(mean, dtype=float)
    std = np.sqrt(np.asarray(diag_cov, dtype=float))
    u_min, u_max = _extreme_uniforms(as_rng(seed), n, mean.shape)
    upper = np.maximum(mean + std * ndtri(u_max), mean)
    lower = np.minimum(mean + std * ndtri(u_min), mean)
    return upper, lower


def perturbation_bounds(mean_kernel, eta: float, n: int = 3000, seed=None):
    """(zeta_upper, zeta_lower) from n uniform draws on (-eta mu, eta (1 - mu)) per entry.

    Where mu = 0 the lower bound is pinned to 0 and the upper bound is the
    largest of n draws on (0, eta).
    """
    mu = np.asarray(mean_kernel, dtype=float)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    u_min, u_max = _extreme_uniforms(as_rng(seed), n, mu.shape)
    lo_end = -eta * mu
    upper = np.maximum(lo_end + eta * u_max, 0.0)
    lower = np.where(mu > 0, np.minimum(lo_end + eta * u_min, 0.0), 0.0)
    upper = np.minimum(upper, 1.0 - mu)
    lower = np.maximum(lower, -mu)
    return upper, lower


# ---------------------------------------------------------------------------
# generators


def _uniform(rng, lo_hi, size):
    return rng.uniform(lo_hi[0], lo_hi[1], size)


def _normalized_gamma(rng, n):
    g = rng.random(n)
    return g / g.sum() if g.sum() > 0 else np.full(n, 1.0 / n)


def _gaussian_spec(rng, mean, var_range, n_bound):
    var = _uniform(rng, var_range, mean.shape)
    upper, lower = cost_bounds_from_samples(mean, var, n_bound, rng)
    return RandomVectorSpec(mean, cov=var, upper=upper, lower=lower,
                            subgauss=np.sqrt(var), independent=True)


def queueing_kernel(L: int, a1: float, a2: float) -> np.ndarray:
    """(L+1, L+1) transition matrix of the queue under service a1 and admission a2."""
    P = np.zeros((L + 1, L + 1))
    for s in range(1, L):
        P[s, s - 1] = a1 * (1 - a2)
        P[s, s] = a1 * a2 + (1 - a1) * (1 - a2)
        P[s, s + 1] = (1 - a1) * a2
    P[0, 0] = 1 - (1 - a1) * a2
    P[0, 1] = (1 - a1) * a2
    P[L, L - 1] = a1
    P[L, L] = 1 - a1
    return P


def queueing_instance(cfg: QueueingConfig):
    rng = as_rng(cfg.seed)
    actions = [(a1, a2) for a1 in cfg.service for a2 in cfg.admission]
    n_s = cfg.L + 1
    kernels = {act: queueing_kernel(cfg.L, *act) for act in actions}
    kernel = np.stack([kernels[act][s] for s in range(n_s) for act in actions])
    gamma = _normalized_gamma(rng, n_s)
    instance = CmdpInstance((len(actions),) * n_s, kernel, cfg.alpha, gamma, cfg.budgets)
    a1 = np.array([act[0] for act in actions] * n_s)
    a2 = np.array([act[1] for act in actions] * n_s)
    states = np.repeat(np.arange(n_s, dtype=float), len(actions))
    means = [states, 3.0 * (1.0 + a1) ** 2, 10.0 - 3.0 * a2]
    specs = [_gaussian_spec(rng, m, cfg.var_range, cfg.n_bound_samples) for m in means]
    unc = CostUncertainty(specs[0], tuple(specs[1:]), cfg.theta, cfg.p0, cfg.p1)
    return instance, unc


def garnet_kernel(rng, n_states: int, n_pairs: int, branching: int) -> np.ndarray:
    kernel = np.zeros((n_pairs, n_states))
    for i in range(n_pairs):
        support = rng.choice(n_states, size=branching, replace=False)
        cuts = np.sort(rng.random(branching - 1))
        kernel[i, support] = np.diff(np.concatenate([[0.0], cuts, [1.0]]))
    return kernel


def garnet_instance(cfg: GarnetConfig, with_covariance: bool = True):
    """Return (instance, cost uncertainty, transition uncertainty)."""
    rng = as_rng(cfg.seed)
    n_s, n_a = cfg.n_states, cfg.n_actions
    n_pairs = n_s * n_a
    kernel = garnet_kernel(rng, n_s, n_pairs, cfg.branching)
    gamma = _normalized_gamma(rng, n_s)
    budgets = _uniform(rng, cfg.budget_range, cfg.n_constraints)
    instance = CmdpInstance((n_a,) * n_s, kernel, cfg.alpha, gamma, budgets)
    c = _gaussian_spec(rng, _uniform(rng, cfg.c_mean_range, n_pairs), cfg.var_range, cfg.n_bound_samples)
    d = tuple(_gaussian_spec(rng, _uniform(rng, cfg.d_mean_range, n_pairs), cfg.var_range,
                             cfg.n_bound_samples) for _ in range(cfg.n_constraints))
    costs = CostUncertainty(c, d, cfg.theta, cfg.p0, cfg.p1)
    zu, zl = perturbation_bounds(kernel, cfg.eta, cfg.n_bound_samples, rng)
    tp = TransitionUncertainty(zu, zl, costs)
    if with_covariance and n_pairs * n_s * n_s <= COV_ENTRY_LIMIT:
        draws = sample_transition_realization(instance, tp, rng, n=cfg.n_cov_samples)
        tp = TransitionUncertainty(zu, zl, costs, row_covariance(draws))
    return instance, costs, tp


# ---------------------------------------------------------------------------
# validation-side samplers


def truncated_gaussian_ppf(u, mean, std, lower, upper):
    """Inverse CDF of N(mean, std^2) truncated to [lower, upper]; std = 0 gives the mean."""
    live = std > 0
    safe = np.where(live, std, 1.0)
    a = ndtr((lower - mean) / safe)
    b = ndtr((upper - mean) / safe)
    q = np.clip(a + u * (b - a), 1e-300, 1 - 1e-16)
    x = mean + safe * ndtri(q)
    return np.where(live, np.clip(x, lower, upper), mean)


def positive_stable(rng, alpha_index: float, size):
    """Draws V with E exp(-tV) = exp(-t^alpha_index), 0 < alpha_index <= 1."""
    a = alpha_index
    if a == 1.0:
        return np.ones(size)
    W = rng.uniform(0.0, np.pi, size)
    E = rng.exponential(1.0, size)
    return (np.sin(a * W) / np.sin(W) ** (1.0 / a)) * (np.sin((1.0 - a) * W) / E) ** ((1.0 - a) / a)


def gumbel_uniforms(theta: float, k: int, n: int, seed=None) -> np.ndarray:
    """(n, k) uniforms whose joint law is the Gumbel-Hougaard copula (Marshall-Olkin)."""
    rng = as_rng(seed)
    V = positive_stable(rng, 1.0 / theta, n)
    E = rng.exponential(1.0, (n, k))
    return np.exp(-(E / V[:, None]) ** (1.0 / theta))


def _spec_marginal(spec: RandomVectorSpec):
    spec.require("cov", "upper", "lower")
    return spec.mean, spec.std, spec.lower, spec.upper


def sample_cost_realization(unc: CostUncertainty, coupling: str = COPULA_COMONOTONE,
                            seed=None, n: Optional[int] = None):
    """Draw (c, d) with shapes (pairs,), (K, pairs), or with a leading n axis when n is given.

    comonotone: every component of d^k is driven by the same Gumbel-Hougaard
    uniform U_k, so the scalar events rho.d^k <= xi_k are coupled exactly by
    that copula. independent: every component is an independent draw.
    """
    if coupling not in SAMPLERS:
        raise ValueError(f"unknown sampler {coupling!r}")
    rng = as_rng(seed)
    m = 1 if n is None else n
    K = unc.n_constraints
    mean, std, lo, hi = _spec_marginal(unc.c)
    c = truncated_gaussian_ppf(rng.random((m, unc.c.dim)), mean, std, lo, hi)
    d = np.empty((m, K, unc.c.dim))
    if coupling == COPULA_COMONOTONE and K:
        U = gumbel_uniforms(unc.theta, K, m, rng)
    for k, spec in enumerate(unc.d):
        mean, std, lo, hi = _spec_marginal(spec)
        u = U[:, k:k + 1] if coupling == COPULA_COMONOTONE else rng.random((m, spec.dim))
        d[:, k] = truncated_gaussian_ppf(u, mean, std, lo, hi)
    if n is None:
        return c[0], d[0]
    return c, d


def project_zero_sum(x, lower, upper, iters: int = 200):
    """Euclidean projection of each row of x onto {sum = 0} within [lower, upper].

    Finds the shift tau with sum(clip(x - tau, l, u)) = 0 by bisection, then
    spreads the tiny leftover over the slack so the sum is zero to rounding.
    """
    x, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, lower, upper)))
    lo_tau = (x - upper).min(axis=-1, keepdims=True)
    hi_tau = (x - lower).max(axis=-1, keepdims=True)
    for _ in range(iters):
        mid = 0.5 * (lo_tau + hi_tau)
        s = np.clip(x - mid, lower, upper).sum(axis=-1, keepdims=True)
        lo_tau = np.where(s > 0, mid, lo_tau)
        hi_tau = np.where(s > 0, hi_tau, mid)
        if np.all(hi_tau - lo_tau <= 1e-15 * (1 + np.abs(hi_tau))):
            break
    y = np.clip(x - 0.5 * (lo_tau + hi_tau), lower, upper)
    r = y.sum(axis=-1, keepdims=True)
    cap = np.where(r > 0, y - lower, upper - y)
    total = cap.sum(axis=-1, keepdims=True)
    frac = np.divide(cap, total, out=np.zeros_like(cap), where=total > 0)
    return np.clip(y - r * frac, lower, upper)


def sample_transition_realization(instance: CmdpInstance, unc: TransitionUncertainty,
                                  seed=None, n: Optional[int] = None) -> np.ndarray:
    """Perturbations zeta with zero row sums inside the bounds; add to the kernel to get P.

    Shape (pairs, states), or (n, pairs, states) when n is given.
    """
    rng = as_rng(seed)
    m = 1 if n is None else n
    lo, hi = unc.zeta_lower, unc.zeta_upper
    raw = lo + (hi - lo) * rng.random((m,) + lo.shape)
    zeta = project_zero_sum(raw, lo, hi)
    return zeta[0] if n is None else zeta


def row_covariance(draws: np.ndarray) -> np.ndarray:
    """Per-pair covariance of sampled rows: (n, pairs, S) -> (pairs, S, S)."""
    centered = draws - draws.mean(axis=0)
    return np.einsum("npi,npj->pij", centered, centered) / max(draws.shape[0] - 1, 1)


# ---------------------------------------------------------------------------
# bundle serialization


def _spec_to_dict(spec: RandomVectorSpec) -> dict:
    out = {"mean": spec.mean.tolist(), "independent": spec.independent}
    for name in ("cov", "upper", "lower", "subgauss"):
        val = getattr(spec, name)
        if val is not None:
            out[name] = val.tolist()
    return out


def _spec_from_dict(data: dict) -> RandomVectorSpec:
    return RandomVectorSpec(np.asarray(data["mean"]), **{
        k: (np.asarray(v) if k != "independent" else v)
        for k, v in data.items() if k != "mean"})


def costs_to_dict(unc: CostUncertainty) -> dict:
    return {"theta": unc.theta, "p0": unc.p0, "p1": unc.p1,
            "c": _spec_to_dict(unc.c), "d": [_spec_to_dict(s) for s in unc.d]}


def costs_from_dict(data: dict) -> CostUncertainty:
    return CostUncertainty(_spec_from_dict(data["c"]), tuple(_spec_from_dict(s) for s in data["d"]),
                           data["theta"], data["p0"], data["p1"])


def dumps_bundle(instance: CmdpInstance, costs: CostUncertainty,
                 tp: Optional[TransitionUncertainty] = None, meta: Optional[dict] = None) -> str:
    extra = {"costs": costs_to_dict(costs)}
    if tp is not None:
        extra["perturbation"] = {"upper": tp.zeta_upper.tolist(), "lower": tp.zeta_lower.tolist()}
    if meta:
        extra["meta"] = meta
    return mdp.dumps_instance(instance, extra)


def loads_bundle(text: str):
    """Parse a bundle; returns (instance, costs or None, perturbation or None, meta)."""
    data = json.loads(text)
    instance = mdp.instance_from_dict(data)
    costs = costs_from_dict(data["costs"]) if "costs" in data else None
    tp = None
    if "perturbation" in data and costs is not None:
        pert = data["perturbation"]
        tp = TransitionUncertainty(np.asarray(pert["upper"]), np.asarray(pert["lower"]), costs)
    return instance, costs, tp, data.get("meta", {})


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
