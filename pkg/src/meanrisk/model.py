"""Problem data and node algebra for mixed-integer mean-risk knapsack problems.

An instance asks to maximize ``r'y - h(sqrt(y' M y))`` over the knapsack
``a'y <= b``, ``y >= 0`` with integrality on a subset of the variables, where
``M`` is a positive definite covariance matrix and ``h`` a convex risk
weighting. All solving happens in minimization form (risk minus return);
results are negated back on report.

Fixing integer variables moves covariance coefficients into linear and
constant terms under the square root, and rescaling the free variables by
``b/a_i`` turns every node relaxation into the same shape of problem over the
capped unit simplex ``{z : sum(z) <= 1, z >= 0}``. This module owns that
algebra; the relaxation solver never needs to know about the tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BudgetExhausted",
    "DimensionZero",
    "GradientUndefined",
    "InfeasibleFixing",
    "RiskWeighting",
    "LinearRisk",
    "QuadraticRisk",
    "ExpThresholdRisk",
    "risk_from_dict",
    "MeanRiskInstance",
    "FixedSubproblem",
    "SimplexProblem",
    "fix_variable",
    "simplex_transform",
    "eval_f",
    "grad_f",
    "objective_min",
    "objective_max",
]

_SYM_TOL = 1e-12


class InfeasibleFixing(ValueError):
    """Requested integer fixing does not fit into the remaining budget."""


class BudgetExhausted(Exception):
    """The remaining budget is zero; every free variable is forced to 0."""


class DimensionZero(Exception):
    """No free variables remain; the node is a fully determined point."""


class GradientUndefined(ArithmeticError):
    """Gradient requested where the square-root term vanishes."""


class RiskWeighting:
    """Convex, non-decreasing, differentiable weight on the risk magnitude.

    ``eval`` and ``deriv`` accept scalars or arrays and return the same shape.
    """

    kind = "base"

    def eval(self, t):
        raise NotImplementedError

    def deriv(self, t):
        raise NotImplementedError

    # scalar fast paths for the solver's inner loops, where ufunc dispatch on
    # 0-d inputs would dominate the iteration cost
    def eval_scalar(self, t: float) -> float:
        return float(self.eval(t))

    def deriv_scalar(self, t: float) -> float:
        return float(self.deriv(t))

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params()}


@dataclass(frozen=True)
class LinearRisk(RiskWeighting):
    """h(t) = omega * t.

    ``from_confidence`` derives omega = sqrt((1 - epsilon) / epsilon) from a
    confidence level epsilon in (0, 1]; larger epsilon means less weight on
    risk.
    """

    omega: float
    epsilon: float | None = None

    kind = "linear"

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega >= 0.0):
            raise ValueError("omega must be finite and nonnegative")

    @classmethod
    def from_confidence(cls, epsilon: float) -> "LinearRisk":
        if not 0.0 < epsilon <= 1.0:
            raise ValueError("confidence level must lie in (0, 1]")
        return cls(math.sqrt((1.0 - epsilon) / epsilon), float(epsilon))

    def eval(self, t):
        return self.omega * t

    def deriv(self, t):
        if np.isscalar(t):
            return self.omega
        return np.full(np.shape(t), self.omega)

    def eval_scalar(self, t: float) -> float:
        return self.omega * t

    def deriv_scalar(self, t: float) -> float:
        return self.omega

    def params(self):
        out = {"omega": self.omega}
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        return out


@dataclass(frozen=True)
class QuadraticRisk(RiskWeighting):
    """h(t) = omega * t**2; smooth everywhere, zero slope at t = 0."""

    omega: float

    kind = "quad"

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega >= 0.0):
            raise ValueError("omega must be finite and nonnegative")

    def eval(self, t):
        return self.omega * t * t

    def deriv(self, t):
        return 2.0 * self.omega * t

    def eval_scalar(self, t: float) -> float:
        return self.omega * t * t

    def deriv_scalar(self, t: float) -> float:
        return 2.0 * self.omega * t

    def params(self):
        return {"omega": self.omega}


@dataclass(frozen=True)
class ExpThresholdRisk(RiskWeighting):
    """Zero up to a threshold, then exp(t - gamma) - (t - gamma + 1).

    Value and slope are both continuous at the threshold. For large t the
    value overflows float64 to +inf; downstream code treats that as an
    ordinary (terrible) objective value.
    """

    gamma: float

    kind = "exp"

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError("gamma must be finite and nonnegative")

    def eval(self, t):
        u = np.asarray(t, dtype=float) - self.gamma
        with np.errstate(over="ignore"):
            out = np.where(u > 0.0, np.exp(u) - (u + 1.0), 0.0)
        return float(out) if np.isscalar(t) else out

    def deriv(self, t):
        u = np.asarray(t, dtype=float) - self.gamma
        with np.errstate(over="ignore"):
            out = np.where(u > 0.0, np.expm1(u), 0.0)
        return float(out) if np.isscalar(t) else out

    def eval_scalar(self, t: float) -> float:
        u = t - self.gamma
        if u <= 0.0:
            return 0.0
        try:
            return math.exp(u) - (u + 1.0)
        except OverflowError:
            return math.inf

    def deriv_scalar(self, t: float) -> float:
        u = t - self.gamma
        if u <= 0.0:
            return 0.0
        try:
            return math.expm1(u)
        except OverflowError:
            return math.inf

    def params(self):
        return {"gamma": self.gamma}


def risk_from_dict(spec: dict) -> RiskWeighting:
    """Rebuild a risk weighting from its ``to_dict`` form."""
    kind = spec.get("kind")
    if kind == "linear":
        if spec.get("epsilon") is not None:
            return LinearRisk.from_confidence(float(spec["epsilon"]))
        return LinearRisk(float(spec["omega"]))
    if kind == "quad":
        return QuadraticRisk(float(spec["omega"]))
    if kind == "exp":
        return ExpThresholdRisk(float(spec["gamma"]))
    raise ValueError(f"unknown risk kind: {kind!r}")


def _frozen(x) -> np.ndarray:
    out = np.ascontiguousarray(x, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class MeanRiskInstance:
    """Immutable, validated mean-risk knapsack data.

    The covariance is symmetrized (asymmetry beyond 1e-12 is rejected) and
    must admit a Cholesky factorization. ``integer_set`` holds 0-based indices
    of the integer-constrained variables.
    """

    r: np.ndarray
    a: np.ndarray
    b: float
    M: np.ndarray
    integer_set: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        M = np.asarray(self.M, dtype=float)
        n = r.size
        if n < 1:
            raise ValueError("need at least one variable")
        if r.ndim != 1 or a.shape != (n,) or M.shape != (n, n):
            raise ValueError("shape mismatch between r, a and M")
        if not (np.isfinite(r).all() and np.isfinite(a).all() and np.isfinite(M).all()):
            raise ValueError("instance data must be finite")
        if not np.all(a > 0.0):
            raise ValueError("prices must be strictly positive")
        b = float(self.b)
        if not (math.isfinite(b) and b > 0.0):
            raise ValueError("budget must be positive and finite")
        asym = float(np.max(np.abs(M - M.T)))
        if asym > _SYM_TOL:
            raise ValueError(f"covariance asymmetry {asym:.3e} exceeds {_SYM_TOL:g}")
        M = 0.5 * (M + M.T)
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        iset = tuple(sorted({int(i) for i in self.integer_set}))
        if iset and (iset[0] < 0 or iset[-1] >= n):
            raise ValueError("integer indices out of range")
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "M", _frozen(M))
        object.__setattr__(self, "integer_set", iset)

    @property
    def n(self) -> int:
        return self.r.size


def objective_min(inst: MeanRiskInstance, y, h: RiskWeighting) -> float:
    """Minimization-form objective h(sqrt(y'My)) - r'y at a full-length y."""
    y = np.asarray(y, dtype=float)
    q = max(float(y @ inst.M @ y), 0.0)
    return h.eval_scalar(math.sqrt(q)) - float(inst.r @ y)


def objective_max(inst: MeanRiskInstance, y, h: RiskWeighting) -> float:
    """Reported maximization-form objective r'y - h(sqrt(y'My))."""
    return -objective_min(inst, y, h)


@dataclass(frozen=True, eq=False)
class FixedSubproblem:
    """Node data after fixing a subset of the integer variables.

    Fixing variable j to value s moves covariance coefficients into the
    linear term ``c_s`` and constant ``d_s`` under the square root, and the
    return contribution into the offset ``t_s``. Free data stays in original
    units; ``free_index_map`` maps reduced positions to original indices.
    """

    M_s: np.ndarray
    c_s: np.ndarray
    d_s: float
    r_s: np.ndarray
    t_s: float
    a_s: np.ndarray
    b_s: float
    fixings: tuple[tuple[int, int], ...] = ()
    free_index_map: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "M_s", _frozen(self.M_s))
        object.__setattr__(self, "c_s", _frozen(self.c_s))
        object.__setattr__(self, "r_s", _frozen(self.r_s))
        object.__setattr__(self, "a_s", _frozen(self.a_s))
        # d_s is a quadratic form of the fixed coordinates; clamp float dust
        object.__setattr__(self, "d_s", max(float(self.d_s), 0.0))
        object.__setattr__(self, "b_s", float(self.b_s))

    @classmethod
    def root(cls, inst: MeanRiskInstance) -> "FixedSubproblem":
        n = inst.n
        return cls(
            M_s=inst.M,
            c_s=np.zeros(n),
            d_s=0.0,
            r_s=inst.r,
            t_s=0.0,
            a_s=inst.a,
            b_s=inst.b,
            fixings=(),
            free_index_map=tuple(range(n)),
        )

    @property
    def dim(self) -> int:
        return len(self.free_index_map)

    def objective(self, x, h: RiskWeighting) -> float:
        """Minimization objective at a free-variable completion x."""
        x = np.asarray(x, dtype=float)
        q = float(x @ self.M_s @ x + self.c_s @ x) + self.d_s
        return h.eval_scalar(math.sqrt(max(q, 0.0))) - float(self.r_s @ x) - self.t_s

    def assemble(self, x) -> np.ndarray:
        """Full original-units vector from the fixings plus a completion x."""
        y = np.zeros(len(self.fixings) + self.dim)
        for j, s in self.fixings:
            y[j] = float(s)
        if self.dim:
            y[list(self.free_index_map)] = np.asarray(x, dtype=float)
        return y


def fix_variable(sub: FixedSubproblem, j: int, s: int) -> FixedSubproblem:
    """Fix the free variable at reduced position j to the integer value s."""
    if not 0 <= j < sub.dim:
        raise IndexError(f"free position {j} out of range for dim {sub.dim}")
    s = int(s)
    if s < 0:
        raise InfeasibleFixing("fixing values must be nonnegative")
    cost = s * float(sub.a_s[j])
    if cost > sub.b_s * (1.0 + 1e-12) + 1e-12:
        orig = sub.free_index_map[j]
        raise InfeasibleFixing(
            f"fixing variable {orig} to {s} costs {cost:g} > remaining budget {sub.b_s:g}"
        )
    keep = np.arange(sub.dim) != j
    col = sub.M_s[keep, j]
    return FixedSubproblem(
        M_s=sub.M_s[np.ix_(keep, keep)],
        c_s=sub.c_s[keep] + (2.0 * s) * col,
        d_s=sub.d_s + s * s * float(sub.M_s[j, j]) + s * float(sub.c_s[j]),
        r_s=sub.r_s[keep],
        t_s=sub.t_s + s * float(sub.r_s[j]),
        a_s=sub.a_s[keep],
        b_s=max(sub.b_s - cost, 0.0),
        fixings=sub.fixings + ((sub.free_index_map[j], s),),
        free_index_map=tuple(v for i, v in enumerate(sub.free_index_map) if i != j),
    )


@dataclass(frozen=True, eq=False)
class SimplexProblem:
    """Node relaxation over the capped unit simplex {z : sum(z) <= 1, z >= 0}.

    Objective: f(z) = h(sqrt(z'Qz + c'z + d)) - mu'z - t_off. ``scale`` maps
    simplex coordinates back to original units, y_free = scale * z.
    """

    Q: np.ndarray
    c: np.ndarray
    d: float
    mu: np.ndarray
    t_off: float
    scale: np.ndarray
    h: RiskWeighting

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen(self.Q))
        object.__setattr__(self, "c", _frozen(self.c))
        object.__setattr__(self, "mu", _frozen(self.mu))
        object.__setattr__(self, "scale", _frozen(self.scale))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "t_off", float(self.t_off))
        n = self.mu.size
        if self.Q.shape != (n, n) or self.c.shape != (n,) or self.scale.shape != (n,):
            raise ValueError("shape mismatch in simplex problem data")
        if self.d < 0.0:
            raise ValueError("constant term under the square root must be nonnegative")

    @property
    def dim(self) -> int:
        return self.mu.size

    def vertex_values(self) -> np.ndarray:
        """Objective value at each unit vertex e_i."""
        q = np.maximum(np.diag(self.Q) + self.c + self.d, 0.0)
        return np.asarray(self.h.eval(np.sqrt(q))) - self.mu - self.t_off


def simplex_transform(sub: FixedSubproblem, h: RiskWeighting) -> SimplexProblem:
    """Rescale a node's free variables onto the capped unit simplex."""
    if sub.dim == 0:
        raise DimensionZero("all variables are fixed")
    if sub.b_s <= 0.0:
        raise BudgetExhausted("no budget remains for the free variables")
    scale = sub.b_s / sub.a_s
    return SimplexProblem(
        Q=sub.M_s * np.outer(scale, scale),
        c=scale * sub.c_s,
        d=sub.d_s,
        mu=scale * sub.r_s,
        t_off=sub.t_s,
        scale=scale,
        h=h,
    )


def eval_f(p: SimplexProblem, z) -> float:
    """f(z) = h(sqrt(z'Qz + c'z + d)) - mu'z - t_off, defined for all z."""
    z = np.asarray(z, dtype=float)
    q = max(float(z @ p.Q @ z + p.c @ z) + p.d, 0.0)
    return p.h.eval_scalar(math.sqrt(q)) - float(p.mu @ z) - p.t_off


def grad_f(p: SimplexProblem, z) -> np.ndarray:
    """Gradient of f; raises GradientUndefined where the root term vanishes.

    Callers must route z = 0 on a d = 0 node through the origin optimality
    check instead.
    """
    z = np.asarray(z, dtype=float)
    q = float(z @ p.Q @ z + p.c @ z) + p.d
    if q < 1e-300:
        raise GradientUndefined("square-root term vanishes at this point")
    root = math.sqrt(q)
    hp = p.h.deriv_scalar(root)
    return hp / (2.0 * root) * (2.0 * (p.Q @ z) + p.c) - p.mu
