"""A small backend-neutral convex program representation.

Programs are built from named vector variables and :class:`Affine`
expressions, and hold three constraint families: linear rows, second-order
cones ``||v||_2 <= s`` and grouped log-sum-exp rows
``sum_g ln(sum_{j in g} w_j exp(e_j)) <= r``. Solving goes through cvxpy with
the Clarabel interior-point solver. Every optimal answer is re-checked
against the original records before it is reported.
"""

from __future__ import annotations

import io
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .mdp import INFEASIBLE, NUMERICAL_FAILURE, OPTIMAL, UNBOUNDED

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
VERIFY_TOL = 1e-6
VERBOSE_ENV = "JCCMDP_SOLVER_VERBOSE"


class ProgramError(ValueError):
    pass


class Affine:
    """A vector-valued affine map ``sum_v M_v @ x_v + const`` of named variables."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Dict[str, sp.csr_matrix], const):
        self.const = np.atleast_1d(np.asarray(const, dtype=float)).copy()
        m = self.const.shape[0]
        self.terms = {}
        for name, mat in terms.items():
            mat = sp.csr_matrix(mat)
            if mat.shape[0] != m:
                raise ProgramError(f"term {name!r} has {mat.shape[0]} rows, expected {m}")
            self.terms[name] = mat

    @property
    def size(self) -> int:
        return self.const.shape[0]

    @staticmethod
    def constant(values) -> "Affine":
        return Affine({}, values)

    def _coerce(self, other) -> "Affine":
        if isinstance(other, Affine):
            return other
        arr = np.atleast_1d(np.asarray(other, dtype=float))
        if arr.shape[0] == 1 and self.size != 1:
            arr = np.full(self.size, arr[0])
        return Affine.constant(arr)

    def __add__(self, other):
        other = self._coerce(other)
        if other.size != self.size:
            if self.size == 1:
                return self._broadcast(other.size) + other
            if other.size == 1:
                return self + other._broadcast(self.size)
            raise ProgramError(f"size mismatch {self.size} vs {other.size}")
        terms = dict(self.terms)
        for name, mat in other.terms.items():
            terms[name] = terms[name] + mat if name in terms else mat
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine({n: -m for n, m in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        scalar = float(scalar)
        return Affine({n: m * scalar for n, m in self.terms.items()}, self.const * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def _broadcast(self, m: int) -> "Affine":
        ones = sp.csr_matrix(np.ones((m, 1)))
        return Affine({n: ones @ mat for n, mat in self.terms.items()}, np.full(m, self.const[0]))

    def left(self, matrix) -> "Affine":
        """Return ``matrix @ self``."""
        M = sp.csr_matrix(matrix)
        if M.shape[1] != self.size:
            raise ProgramError(f"cannot multiply {M.shape} matrix with size-{self.size} expression")
        return Affine({n: M @ mat for n, mat in self.terms.items()}, M @ self.const)

    def scale_rows(self, weights) -> "Affine":
        w = np.asarray(weights, dtype=float)
        return self.left(sp.diags(w))

    def dot(self, weights) -> "Affine":
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        return self.left(w)

    def sum(self) -> "Affine":
        return self.dot(np.ones(self.size))

    def __getitem__(self, idx) -> "Affine":
        rows = np.arange(self.size)[idx]
        rows = np.atleast_1d(rows)
        sel = sp.csr_matrix((np.ones(len(rows)), (np.arange(len(rows)), rows)),
                            shape=(len(rows), self.size))
        return self.left(sel)

    def evaluate(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        out = self.const.copy()
        for name, mat in self.terms.items():
            out += mat @ values[name]
        return out

    def abs_magnitude(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        """Row-wise sum of absolute term contributions, used to scale residuals."""
        out = np.abs(self.const)
        for name, mat in self.terms.items():
            out = out + abs(mat) @ np.abs(values[name])
        return out

    def variables(self):
        return set(self.terms)

    def to_text(self, row: int = 0) -> str:
        parts = []
        for name in sorted(self.terms):
            r = self.terms[name].getrow(row)
            for j, v in zip(r.indices, r.data):
                if v != 0:
                    parts.append(f"{v:+.12g}*{name}[{j}]")
        c = self.const[row]
        if c != 0 or not parts:
            parts.append(f"{c:+.12g}")
        return " ".join(parts)


def vstack(exprs) -> Affine:
    exprs = list(exprs)
    names = set().union(*(e.terms for e in exprs))
    terms = {}
    for name in names:
        blocks = []
        width = None
        for e in exprs:
            if name in e.terms:
                width = e.terms[name].shape[1]
        for e in exprs:
            blocks.append(e.terms.get(name, sp.csr_matrix((e.size, width))))
        terms[name] = sp.vstack(blocks).tocsr()
    return Affine(terms, np.concatenate([e.const for e in exprs]))


@dataclass
class VariableInfo:
    name: str
    size: int
    lower: Optional[np.ndarray]
    upper: Optional[np.ndarray]


@dataclass
class LinearConstraint:
    expr: Affine
    sense: str  # "<=" means expr <= 0, "==" means expr == 0
    label: str = ""


@dataclass
class SocConstraint:
    vec: Affine
    scal: Affine
    label: str = ""


@dataclass
class LseConstraint:
    """``sum_g ln(sum_{j: groups[j] == g} weights[j] exp(exps[j])) <= rhs``."""

    exps: Affine
    weights: np.ndarray
    groups: np.ndarray
    rhs: Affine
    label: str = ""

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1 if self.groups.size else 0

    def lhs_value(self, values) -> float:
        e = self.exps.evaluate(values)
        out = 0.0
        for g in range(self.n_groups):
            mask = self.groups == g
            out += float(logsumexp(e[mask], b=self.weights[mask]))
        return out


Constraint = Union[LinearConstraint, SocConstraint, LseConstraint]


@dataclass
class Solution:
    status: str
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    objective: float = float("nan")
    stats: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def value(self, expr: Affine) -> np.ndarray:
        return expr.evaluate(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def _attempt_plan(tol: float):
    """Tolerance and extra Clarabel settings per attempt.

    Later attempts relax the tolerance, then change the equilibration and the
    step length, which rescues exponential-cone programs where the default
    stalls.
    """
    loose = 10.0 * tol
    return [(tol, {}), (loose, {}), (loose, {"equilibrate_max_iter": 50}),
            (loose, {"max_step_fraction": 0.95}), (loose, {"equilibrate_enable": False}),
            (loose, {"equilibrate_max_iter": 50, "max_step_fraction": 0.9})]


class ConvexProgram:
    """Minimize a scalar affine objective subject to linear, SOC and LSE records."""

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: Dict[str, VariableInfo] = {}
        self.constraints: List[Constraint] = []
        self.objective: Optional[Affine] = None

    # -- construction --------------------------------------------------------
    def add_variable(self, name: str, size: int, lower=None, upper=None) -> Affine:
        if name in self.variables:
            raise ProgramError(f"variable {name!r} already declared")
        if size < 1:
            raise ProgramError("variables need a positive size")

        def bound(b):
            if b is None:
                return None
            return np.broadcast_to(np.asarray(b, dtype=float), (size,)).copy()

        self.variables[name] = VariableInfo(name, size, bound(lower), bound(upper))
        return Affine({name: sp.identity(size, format="csr")}, np.zeros(size))

    def var(self, name: str) -> Affine:
        info = self.variables[name]
        return Affine({name: sp.identity(info.size, format="csr")}, np.zeros(info.size))

    def _check(self, *exprs: Affine):
        for e in exprs:
            for name, mat in e.terms.items():
                info = self.variables.get(name)
                if info is None:
                    raise ProgramError(f"undeclared variable {name!r}")
                if mat.shape[1] != info.size:
                    raise ProgramError(f"variable {name!r} has size {info.size}, term has {mat.shape[1]} columns")

    def _push(self, con) -> int:
        self.constraints.append(con)
        return len(self.constraints) - 1

    def add_linear(self, lhs: Affine, sense: str, rhs=0.0, label: str = "") -> int:
        if sense not in ("<=", ">=", "=="):
            raise ProgramError(f"unknown sense {sense!r}")
        expr = lhs - rhs if sense != ">=" else (lhs._coerce(rhs) - lhs)
        self._check(expr)
        return self._push(LinearConstraint(expr, "==" if sense == "==" else "<=", label))

    def add_soc_constraint(self, vec: Affine, scal: Affine, label: str = "") -> int:
        if scal.size != 1:
            raise ProgramError("SOC right-hand side must be a scalar expression")
        self._check(vec, scal)
        return self._push(SocConstraint(vec, scal, label))

    def add_lse_constraint(self, exps: Affine, weights, rhs: Affine, groups=None, label: str = "") -> int:
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if w.shape != (exps.size,):
            raise ProgramError(f"{w.size} weights for {exps.size} exponent terms")
        if np.any(~(w > 0)):
            raise ProgramError("log-sum-exp weights must be strictly positive")
        g = np.zeros(exps.size, dtype=int) if groups is None else np.asarray(groups, dtype=int)
        if g.shape != w.shape:
            raise ProgramError("group labels must match the number of terms")
        if g.size and set(np.unique(g)) != set(range(int(g.max()) + 1)):
            raise ProgramError("group labels must be 0..G-1 without gaps")
        rhs = rhs if isinstance(rhs, Affine) else Affine.constant(rhs)
        if rhs.size != 1:
            raise ProgramError("log-sum-exp right-hand side must be scalar")
        self._check(exps, rhs)
        return self._push(LseConstraint(exps, w, g, rhs, label))

    def minimize(self, expr: Affine):
        if expr.size != 1:
            raise ProgramError("objective must be scalar")
        self._check(expr)
        self.objective = expr

    # -- inspection ----------------------------------------------------------
    def dump(self, stream=None) -> str:
        buf = io.StringIO()
        buf.write(f"# program {self.name}\n")
        for info in self.variables.values():
            lb = "-inf" if info.lower is None else np.array2string(info.lower, separator=",", max_line_width=10**9)
            ub = "+inf" if info.upper is None else np.array2string(info.upper, separator=",", max_line_width=10**9)
            buf.write(f"var {info.name} size={info.size} lb={lb} ub={ub}\n")
        if self.objective is not None:
            buf.write(f"minimize {self.objective.to_text()}\n")
        for i, con in enumerate(self.constraints):
            tag = f"[{i}{':' + con.label if con.label else ''}]"
            if isinstance(con, LinearConstraint):
                for r in range(con.expr.size):
                    buf.write(f"lin{tag} {con.expr.to_text(r)} {con.sense} 0\n")
            elif isinstance(con, SocConstraint):
                vec = "; ".join(con.vec.to_text(r) for r in range(con.vec.size))
                buf.write(f"soc{tag} || {vec} || <= {con.scal.to_text()}\n")
            else:
                terms = "; ".join(f"g{con.groups[j]} w={con.weights[j]:.12g} e={con.exps.to_text(j)}"
                                  for j in range(con.exps.size))
                buf.write(f"lse{tag} {terms} <= {con.rhs.to_text()}\n")
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text

    # -- verification --------------------------------------------------------
    def residuals(self, values: Dict[str, np.ndarray]) -> List[float]:
        """Scaled violation of each constraint (<= 0 means satisfied)."""
        out = []
        for con in self.constraints:
            if isinstance(con, LinearConstraint):
                v = con.expr.evaluate(values)
                scale = 1.0 + con.expr.abs_magnitude(values)
                r = np.abs(v) if con.sense == "==" else v
                out.append(float(np.max(r / scale)))
            elif isinstance(con, SocConstraint):
                vec = con.vec.evaluate(values)
                s = con.scal.evaluate(values)[0]
                nv = float(np.linalg.norm(vec))
                out.append((nv - s) / (1.0 + nv + abs(s)))
            else:
                lhs = con.lhs_value(values)
                rhs = con.rhs.evaluate(values)[0]
                out.append((lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
        for info in self.variables.values():
            x = values[info.name]
            if info.lower is not None:
                out.append(float(np.max((info.lower - x) / (1.0 + np.abs(x)))))
            if info.upper is not None:
                out.append(float(np.max((x - info.upper) / (1.0 + np.abs(x)))))
        return out

    # -- solving -------------------------------------------------------------
    def _to_cvxpy(self):
        import cvxpy as cp

        cvars = {n: cp.Variable(info.size, name=n) for n, info in self.variables.items()}

        def conv(expr: Affine):
            out = expr.const
            for name, mat in expr.terms.items():
                out = out + mat @ cvars[name]
            return out

        cons = []
        for info in self.variables.values():
            x = cvars[info.name]
            if info.lower is not None:
                finite = np.isfinite(info.lower)
                if finite.all():
                    cons.append(x >= info.lower)
                elif finite.any():
                    cons.append(x[np.flatnonzero(finite)] >= info.lower[finite])
            if info.upper is not None:
                finite = np.isfinite(info.upper)
                if finite.all():
                    cons.append(x <= info.upper)
                elif finite.any():
                    cons.append(x[np.flatnonzero(finite)] <= info.upper[finite])
        for con in self.constraints:
            if isinstance(con, LinearConstraint):
                e = conv(con.expr)
                cons.append(e == 0 if con.sense == "==" else e <= 0)
            elif isinstance(con, SocConstraint):
                cons.append(cp.SOC(conv(con.scal)[0], conv(con.vec)))
            else:
                n_terms, n_groups = con.exps.size, con.n_groups
                single = np.bincount(con.groups, minlength=n_groups) == 1
                member = sp.csr_matrix((np.ones(n_terms), (np.arange(n_terms), con.groups)),
                                       shape=(n_terms, n_groups))
                t = cp.Variable(n_groups)
                e = conv(con.exps)
                # one-term groups are linear: ln(w e^x) = ln w + x
                lin_terms = np.flatnonzero(single[con.groups])
                if lin_terms.size:
                    gi = con.groups[lin_terms]
                    cons.append(t[gi] == e[lin_terms] + np.log(con.weights[lin_terms]))
                multi = np.flatnonzero(~single[con.groups])
                if multi.size:
                    u = cp.Variable(multi.size)
                    sub = member[multi]
                    cons.append(cp.constraints.ExpCone(e[multi] - sub @ t, np.ones(multi.size), u))
                    groups_multi = np.flatnonzero(~single)
                    cons.append((sub[:, groups_multi].T @ cp.multiply(con.weights[multi], u)) <= 1)
                cons.append(cp.sum(t) <= conv(con.rhs)[0])
        obj = conv(self.objective)[0] if self.objective is not None else cp.Constant(0.0)
        return cp.Problem(cp.Minimize(obj), cons), cvars

    def solve(self, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              verify_tol: float = VERIFY_TOL, verbose: Optional[bool] = None) -> Solution:
        import cvxpy as cp

        if self.objective is None:
            raise ProgramError("objective not set")
        if verbose is None:
            verbose = os.environ.get(VERBOSE_ENV, "") not in ("", "0")
        problem, cvars = self._to_cvxpy()
        attempts = []
        start = time.perf_counter()
        status = NUMERICAL_FAILURE
        values: Dict[str, np.ndarray] = {}
        for attempt_tol, extra in _attempt_plan(tol):
            opts = dict(max_iter=max_iter, tol_gap_abs=attempt_tol, tol_gap_rel=attempt_tol,
                        tol_feas=attempt_tol, tol_infeas_abs=attempt_tol, tol_infeas_rel=attempt_tol,
                        **extra)
            if extra:
                # equilibration settings cannot be changed on cvxpy's cached solver
                problem, cvars = self._to_cvxpy()
            try:
                with warnings.catch_warnings():
                    # inaccurate statuses are handled below, not via warnings
                    warnings.simplefilter("ignore", UserWarning)
                    problem.solve(solver=cp.CLARABEL, verbose=verbose, **opts)
                raw = problem.status
            except cp.error.SolverError as exc:
                raw = f"error: {exc}"
            iters = getattr(problem.solver_stats, "num_iters", None) if problem.solver_stats else None
            attempts.append({"tol": attempt_tol, "status": raw, "iterations": iters, **extra})
            if raw == cp.OPTIMAL or (raw == cp.OPTIMAL_INACCURATE and attempt_tol != tol):
                values = {n: np.asarray(v.value, dtype=float).reshape(-1) for n, v in cvars.items()}
                status = OPTIMAL
                break
            if raw == cp.INFEASIBLE or (raw == cp.INFEASIBLE_INACCURATE and attempt_tol != tol):
                status = INFEASIBLE
                break
            if raw == cp.UNBOUNDED:
                status = UNBOUNDED
                break
            log.debug("solver returned %s at tol %g; retrying relaxed", raw, attempt_tol)
        stats = {"attempts": attempts, "solve_time": time.perf_counter() - start}
        if status != OPTIMAL:
            return Solution(status, {}, float("nan"), stats)
        res = self.residuals(values)
        worst = max(res) if res else 0.0
        stats["max_residual"] = worst
        if worst > verify_tol:
            log.warning("%s: solution violates constraints by %.3e after solve", self.name, worst)
            stats["verify_failed"] = True
            return Solution(NUMERICAL_FAILURE, values, float("nan"), stats)
        obj = float(self.objective.evaluate(values)[0])
        return Solution(OPTIMAL, values, obj, stats)
