"""Approximations of a single linear chance constraint ``P(r^T z <= a) >= p``.

Inner approximations (one-sided Chebyshev, Hoeffding, sub-Gaussian,
Bernstein) shrink the feasible set so that any feasible ``r`` satisfies the
chance constraint. The outer approximation is a set of linear rows that every
chance-feasible nonnegative ``r`` satisfies for some auxiliary ``m``. The
module also carries the Gumbel-Hougaard copula helpers used by the joint
constraint reformulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .convex import Affine, ConvexProgram

KINDS = ("chebyshev", "hoeffding", "subgaussian")
INNER_KINDS = KINDS + ("bernstein",)
LEMMA5_THRESHOLD = 1.0 - math.exp(-0.5)
DEFAULT_LAMBDA = 1e-5
DEFAULT_H = 10.0


class MissingSpecData(ValueError):
    pass


@dataclass(frozen=True)
class RandomVectorSpec:
    """Moment and support information about a random vector z.

    ``cov`` may be a full matrix or a 1-D array holding a diagonal.
    ``subgauss`` holds per-component sub-Gaussian parameters.
    """

    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    subgauss: Optional[np.ndarray] = None
    independent: bool = False

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        n = mean.shape[0]
        for name in ("cov", "upper", "lower", "subgauss"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        if self.cov is not None:
            if self.cov.ndim == 1:
                if self.cov.shape != (n,) or np.any(self.cov < 0):
                    raise ValueError("diagonal covariance must be a nonnegative vector")
            else:
                if self.cov.shape != (n, n):
                    raise ValueError("covariance shape mismatch")
                if not np.allclose(self.cov, self.cov.T, atol=1e-10):
                    raise ValueError("covariance must be symmetric")
                if np.linalg.eigvalsh(self.cov).min() < -1e-9 * max(1.0, np.abs(self.cov).max()):
                    raise ValueError("covariance must be positive semidefinite")
        for name in ("upper", "lower", "subgauss"):
            val = getattr(self, name)
            if val is not None and val.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        tol = 1e-12 * max(1.0, float(np.abs(mean).max()) if n else 1.0)
        if self.upper is not None and np.any(self.upper < mean - tol):
            raise ValueError("upper bound below mean")
        if self.lower is not None and np.any(self.lower > mean + tol):
            raise ValueError("lower bound above mean")
        if self.subgauss is not None and np.any(self.subgauss < 0):
            raise ValueError("sub-Gaussian parameters must be nonnegative")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        """Componentwise standard deviations."""
        self.require("cov")
        return np.sqrt(self.cov if self.cov.ndim == 1 else np.clip(np.diag(self.cov), 0, None))

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise MissingSpecData(f"random vector spec lacks {', '.join(missing)}")

    def sqrt_cov(self):
        """A matrix S with S^T S = cov (the symmetric root for full matrices)."""
        self.require("cov")
        if self.cov.ndim == 1:
            return np.sqrt(self.cov)
        w, v = np.linalg.eigh(self.cov)
        return (v * np.sqrt(np.clip(w, 0, None))) @ v.T

    def column_norms(self) -> np.ndarray:
        """Euclidean norms of the columns of the covariance square root."""
        return self.std

    def is_degenerate(self, kind: str) -> bool:
        """True when the data for ``kind`` say the vector is a.s. equal to its mean."""
        if kind == "chebyshev":
            return self.cov is not None and not np.any(self.cov)
        if kind in ("hoeffding", "bernstein"):
            return self.upper is not None and np.array_equal(self.upper, self.lower)
        if kind == "subgaussian":
            return self.subgauss is not None and not np.any(self.subgauss)
        raise ValueError(f"unknown kind {kind!r}")

    def with_mean(self, mean) -> "RandomVectorSpec":
        return RandomVectorSpec(mean, self.cov, self.upper, self.lower, self.subgauss, self.independent)


@dataclass(frozen=True)
class CopulaParams:
    theta: float
    p1: float

    def __post_init__(self):
        if not self.theta >= 1:
            raise ValueError("copula parameter theta must be >= 1")
        if not 0 < self.p1 < 1:
            raise ValueError("p1 must lie in (0, 1)")


# ---------------------------------------------------------------------------
# copula and scalar factors


def gumbel_hougaard(u, theta: float) -> float:
    """C_theta(u) = exp(-[sum (-ln u_k)^theta]^(1/theta))."""
    u = np.asarray(u, dtype=float)
    if theta < 1:
        raise ValueError("theta must be >= 1")
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("copula arguments must lie in [0, 1]")
    if np.any(u == 0):
        return 0.0
    if theta == 1:
        return float(np.prod(u))
    s = np.sum((-np.log(u)) ** theta)
    return float(np.exp(-s ** (1.0 / theta)))


def copula_exponent(p1: float, y, theta: float):
    """p1 ** (y ** (1/theta)); equals p1 at y = 1 and 1 at y = 0."""
    y = np.asarray(y, dtype=float)
    return p1 ** (y ** (1.0 / theta))


def safety_factor(kind: str, p: float) -> float:
    if not 0 < p < 1:
        raise ValueError("probability level must lie in (0, 1)")
    if kind == "chebyshev":
        return math.sqrt(p / (1 - p))
    if kind == "hoeffding":
        return math.sqrt(-0.5 * math.log1p(-p))
    if kind == "subgaussian":
        return math.sqrt(-2.0 * math.log1p(-p))
    raise ValueError(f"unknown kind {kind!r}")


def y_factor(kind: str, p1: float, y, theta: float):
    """The y-parameterized factor f_k(p1, y) = safety_factor(kind, p1 ** y**(1/theta))."""
    q = copula_exponent(p1, y, theta)
    with np.errstate(divide="ignore"):
        if kind == "chebyshev":
            return np.sqrt(q / (1 - q))
        if kind == "hoeffding":
            return np.sqrt(-0.5 * np.log1p(-q))
        if kind == "subgaussian":
            return np.sqrt(-2.0 * np.log1p(-q))
    raise ValueError(f"unknown kind {kind!r}")


def log_one_minus_exponent(p1: float, y, theta: float):
    """ln(1 - p1 ** y**(1/theta)), concave in y."""
    with np.errstate(divide="ignore"):
        return np.log1p(-copula_exponent(p1, y, theta))


def tangent_coefficients(p1: float, theta: float, y_points):
    """Tangent lines a_i + b_i y of p1 ** y**(1/theta) at the given points."""
    y = np.asarray(y_points, dtype=float)
    if not 0 < p1 < 1 or theta < 1:
        raise ValueError("need p1 in (0,1) and theta >= 1")
    if y.ndim != 1 or y.size == 0 or np.any(np.diff(y) <= 0):
        raise ValueError("tangent points must be strictly increasing")
    if y[0] < 0 or y[-1] > 1:
        raise ValueError("tangent points must lie in [0, 1]")
    if y[0] == 0 and theta > 1:
        raise ValueError("derivative is unbounded at y = 0 when theta > 1")
    r = y ** (1.0 / theta)
    val = p1 ** r
    lnp = math.log(p1)
    a = val * (1.0 - r / theta * lnp)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = val * np.where(y > 0, y ** (1.0 / theta - 1.0), 1.0) / theta * lnp
    return a, b


def default_tangent_points(n: int = 20, lo: float = 0.1, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


@dataclass
class ConvexityReport:
    kind: str
    pairs_checked: int
    max_violation: float

    @property
    def convex(self) -> bool:
        return self.max_violation <= 1e-12


def fhat(p1, y, theta):
    q = copula_exponent(p1, y, theta)
    return np.sqrt(q / (1 - q))


def fbar(p1, y, theta):
    return np.sqrt(-0.5 * np.log1p(-copula_exponent(p1, y, theta)))


def convexity_witness(kind: str, p1: float, theta: float, grid) -> ConvexityReport:
    """Check midpoint convexity of fhat or fbar over all pairs of grid points."""
    if kind == "fbar" and p1 < LEMMA5_THRESHOLD:
        raise ValueError(f"fbar convexity needs p1 >= 1 - exp(-1/2) ~ {LEMMA5_THRESHOLD:.4f}")
    f = {"fhat": fhat, "fbar": fbar}.get(kind)
    if f is None:
        raise ValueError(f"unknown kind {kind!r}")
    g = np.asarray(grid, dtype=float)
    i, j = np.triu_indices(g.size, k=1)
    y1, y2 = g[i], g[j]
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = f(p1, 0.5 * (y1 + y2), theta)
        rhs = 0.5 * (f(p1, y1, theta) + f(p1, y2, theta))
    # pairs touching y = 0 have an infinite right side and hold trivially
    finite = np.isfinite(rhs)
    viol = np.where(finite, lhs - rhs, -np.inf)
    # scale-aware slack for large function values
    viol = viol - 1e-12 * np.where(finite, np.abs(rhs), 0.0)
    return ConvexityReport(kind, int(i.size), float(max(viol.max(initial=-np.inf), -np.inf)))


# ---------------------------------------------------------------------------
# constraint emitters


def _as_affine(x) -> Affine:
    return x if isinstance(x, Affine) else Affine.constant(x)


def emit_inner(program: ConvexProgram, kind: str, r: Affine, a, p: float,
               spec: RandomVectorSpec, h: float = DEFAULT_H, label: str = "") -> list:
    """Add constraints implying P(r^T z <= a) >= p. Returns constraint ids.

    When the data for ``kind`` describe a degenerate (constant) vector the
    chance constraint is exactly ``r^T mean <= a`` and that row is emitted.
    """
    a = _as_affine(a)
    if r.size != spec.dim:
        raise ValueError(f"r has size {r.size}, spec has dimension {spec.dim}")
    if kind not in INNER_KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    needs = {"chebyshev": ("cov",), "hoeffding": ("upper", "lower"),
             "subgaussian": ("subgauss",), "bernstein": ("upper", "lower")}[kind]
    spec.require(*needs)
    if kind != "chebyshev" and not spec.independent:
        raise MissingSpecData(f"{kind} needs independent components")
    ids = []
    mean_part = r.dot(spec.mean)
    if kind in ("hoeffding", "bernstein"):
        ids.append(program.add_linear(r, ">=", 0.0, label=f"{label}:r>=0"))
    if spec.is_degenerate(kind):
        ids.append(program.add_linear(mean_part, "<=", a, label=f"{label}:exact"))
        return ids
    if kind == "bernstein":
        if h <= 0:
            raise ValueError("Bernstein h must be positive")
        ids.extend(_emit_bernstein(program, r, a, p, spec, h, label))
        return ids
    if kind == "chebyshev":
        S = spec.sqrt_cov()
        vec = r.scale_rows(S) if S.ndim == 1 else r.left(S)
    elif kind == "hoeffding":
        vec = r.scale_rows(spec.upper - spec.lower)
    else:
        vec = r.scale_rows(spec.subgauss)
    f = safety_factor(kind, p)
    ids.append(program.add_soc_constraint(vec * f, a - mean_part, label=f"{label}:{kind}"))
    return ids


def bernstein_terms(r: Affine, spec: RandomVectorSpec, h: float):
    """Exponents, weights and groups for sum_i ln(A_i e^{h r_i u_i} + (1-A_i) e^{h r_i l_i}).

    Components with u_i == l_i contribute the linear term h r_i mu_i, returned
    separately; zero-weight terms are dropped.
    """
    u, l, mu = spec.upper, spec.lower, spec.mean
    width = u - l
    live = width > 0
    A = np.zeros_like(mu)
    A[live] = (mu[live] - l[live]) / width[live]
    if np.any((A < -1e-12) | (A > 1 + 1e-12)):
        raise ValueError("bounds inconsistent with mean: Bernstein weight outside [0, 1]")
    A = np.clip(A, 0.0, 1.0)
    idx_u = np.flatnonzero(live & (A > 0))
    idx_l = np.flatnonzero(live & (A < 1))
    comp = np.concatenate([idx_u, idx_l])
    coef = np.concatenate([u[idx_u], l[idx_l]]) * h
    weights = np.concatenate([A[idx_u], 1 - A[idx_l]])
    order = np.argsort(comp, kind="stable")
    comp, coef, weights = comp[order], coef[order], weights[order]
    _, groups = np.unique(comp, return_inverse=True)
    exps = r[comp].scale_rows(coef) if comp.size else None
    dead = np.flatnonzero(~live)
    linear = r.dot(h * mu * (~live)) if dead.size else None
    return exps, weights, groups, linear


def _emit_bernstein(program, r, a, p, spec, h, label):
    exps, weights, groups, linear = bernstein_terms(r, spec, h)
    rhs = a * h + math.log1p(-p)
    if linear is not None:
        rhs = rhs - linear
    if exps is None:
        return [program.add_linear(Affine.constant(0.0), "<=", rhs, label=f"{label}:bernstein")]
    return [program.add_lse_constraint(exps, weights, rhs, groups=groups, label=f"{label}:bernstein")]


def emit_outer(program: ConvexProgram, r: Affine, a, p: float, spec: RandomVectorSpec,
               lam: float = DEFAULT_LAMBDA, name: str = "m", label: str = ""):
    """Add the linear relaxation rows. Returns (constraint ids, m expression)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    spec.require("upper", "lower")
    a = _as_affine(a)
    m = program.add_variable(name, 1)
    ids = [
        program.add_linear(r.dot(spec.mean) - a, "<=", m * (1 - p), label=f"{label}:expectation"),
        program.add_linear(m, ">=", lam, label=f"{label}:lambda"),
        program.add_linear(r.dot(spec.upper) - a, "<=", m, label=f"{label}:upper"),
        program.add_linear(r.dot(spec.lower), "<=", a, label=f"{label}:quantile"),
    ]
    return ids, m
