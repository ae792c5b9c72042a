"""Away-step conditional-gradient solver with a non-monotone Armijo line search.

Minimizes f(z) = h(sqrt(z'Qz + c'z + d)) - mu'z - t_off over the capped unit
simplex. Each iteration picks the better of a toward step (best vertex for the
linearized objective, including the origin) and an away step (move mass off
the worst active vertex), then backtracks a stepsize accepted against the
maximum of the last few objective values rather than the current one, which
lets the iterate climb briefly out of bad corners.

Trial objective values inside the line search cost O(1) thanks to incremental
caches of z'Qz, c'z, mu'z and sum(z); accepting a step costs O(dim) to update
z and the cached matrix-vector product Q z.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .model import GradientUndefined, SimplexProblem, eval_f

__all__ = [
    "ALPHA_CAP",
    "MAX_HALVINGS",
    "FwConfig",
    "StepKind",
    "RelaxationStatus",
    "LineSearchStall",
    "IterateState",
    "Direction",
    "toward_step",
    "away_step",
    "choose_direction",
    "line_search",
    "OriginCheck",
    "origin_optimality_check",
    "RelaxationDiagnostics",
    "RelaxationResult",
    "solve_relaxation",
]

log = logging.getLogger("meanrisk.fw")

# Sentinel cap for away stepsizes whose exact formula divides by ~0; the line
# search shrinks any oversized cap immediately.
ALPHA_CAP = 1e6
MAX_HALVINGS = 200
_STALL_ALPHA = 1e-10
_STALL_PATIENCE = 50
_DRIFT_MIN_SHRINK = 0.15
_LS_SCALAR_HEAD = 2
_LS_CHUNK = 32
_Q_FLOOR = 1e-300


class LineSearchStall(RuntimeError):
    """Backtracking exhausted its halving budget; numerics have broken down."""


class StepKind(Enum):
    TOWARD = "toward"
    AWAY = "away"


class RelaxationStatus(Enum):
    OPTIMAL = "optimal"
    PRUNED_BY_BOUND = "pruned_by_bound"
    ITER_LIMIT = "iter_limit"
    ORIGIN_OPTIMAL = "origin_optimal"


@dataclass(frozen=True)
class FwConfig:
    """Tuning constants for the relaxation solver.

    ``p_nm`` is the length of the objective-value memory behind the
    non-monotone acceptance test; 0 recovers the classical monotone Armijo
    rule. ``self_check`` re-verifies every accepted step against a
    from-scratch objective evaluation (slow; meant for audits and tests).

    ``drift_window`` > 0 arms an early-exit heuristic: if the bracket
    between the best objective seen and the dual bound shrinks by less
    than 15% over that many iterations, the solve stops with ITER_LIMIT
    and the (still valid) dual bound. Useful inside branch and bound,
    where slow tail convergence buys nothing; leave at 0 when the caller
    needs the tightest certificate the arithmetic can deliver.
    """

    delta: float = 0.5
    gamma1: float = 1e-4
    gamma2: float = 1e-6
    p_nm: int = 1
    beta: float = 1e-6
    gap_tol: float = 1e-10
    max_iter: int = 50_000
    self_check: bool = False
    drift_window: int = 0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.gamma1 < 0.5:
            raise ValueError("gamma1 must lie in (0, 1/2)")
        if self.gamma2 < 0.0:
            raise ValueError("gamma2 must be nonnegative")
        if self.p_nm < 0:
            raise ValueError("p_nm must be nonnegative")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.gap_tol <= 0.0:
            raise ValueError("gap_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.drift_window < 0:
            raise ValueError("drift_window must be nonnegative")


class IterateState:
    """Mutable solver iterate with O(1)-update caches.

    Keeps Qz, z'Qz, c'z, mu'z and sum(z) in sync with z so a trial objective
    costs O(1) and a full step costs O(dim). ``f_hist`` holds the most recent
    objective values (current included) feeding the non-monotone threshold.
    """

    __slots__ = ("p", "z", "Qz", "zQz", "cz", "muz", "sum_z", "f_hist", "k", "f_cur")

    def __init__(self, p: SimplexProblem, z: np.ndarray, p_nm: int):
        self.p = p
        self.z = np.array(z, dtype=float)
        if self.z.shape != (p.dim,):
            raise ValueError("start point has the wrong dimension")
        self.Qz = p.Q @ self.z
        self.zQz = float(self.z @ self.Qz)
        self.cz = float(p.c @ self.z)
        self.muz = float(p.mu @ self.z)
        self.sum_z = float(self.z.sum())
        self.k = 0
        self.f_cur = self._objective(self.zQz, self.cz, self.muz)
        self.f_hist = deque([self.f_cur], maxlen=p_nm + 1)

    @classmethod
    def from_point(cls, p: SimplexProblem, z0, p_nm: int = 1) -> "IterateState":
        return cls(p, np.asarray(z0, dtype=float), p_nm)

    def _objective(self, zQz: float, cz: float, muz: float) -> float:
        q = max(zQz + cz + self.p.d, 0.0)
        return self.p.h.eval_scalar(math.sqrt(q)) - muz - self.p.t_off

    @property
    def q(self) -> float:
        return max(self.zQz + self.cz + self.p.d, 0.0)

    def f_bar(self) -> float:
        return max(self.f_hist)

    def gradient(self) -> np.ndarray:
        q = self.zQz + self.cz + self.p.d
        if q < _Q_FLOOR:
            raise GradientUndefined("iterate reached the non-smooth origin")
        root = math.sqrt(q)
        hp = self.p.h.deriv_scalar(root)
        return hp / (2.0 * root) * (2.0 * self.Qz + self.p.c) - self.p.mu

    def _advanced(self, vertex: int | None, tau: float):
        """Scalar caches after z -> (1 - tau) z + tau v, state untouched.

        vertex None means v = 0 (the origin); away steps use tau = -alpha.
        """
        w = 1.0 - tau
        if vertex is None:
            zQz = w * w * self.zQz
            cz = w * self.cz
            muz = w * self.muz
            sum_z = w * self.sum_z
        else:
            zQz = (
                w * w * self.zQz
                + 2.0 * tau * w * float(self.Qz[vertex])
                + tau * tau * float(self.p.Q[vertex, vertex])
            )
            cz = w * self.cz + tau * float(self.p.c[vertex])
            muz = w * self.muz + tau * float(self.p.mu[vertex])
            sum_z = w * self.sum_z + tau
        return zQz, cz, muz, sum_z

    def trial_objective(self, vertex: int | None, tau: float) -> float:
        zQz, cz, muz, _ = self._advanced(vertex, tau)
        return self._objective(zQz, cz, muz)

    def apply_step(self, vertex: int | None, kind: StepKind, alpha: float) -> None:
        tau = alpha if kind is StepKind.TOWARD else -alpha
        zQz, cz, muz, sum_z = self._advanced(vertex, tau)
        w = 1.0 - tau
        self.z *= w
        if vertex is None:
            self.Qz *= w
        else:
            self.z[vertex] += tau
            self.Qz = w * self.Qz + tau * self.p.Q[vertex]
        np.maximum(self.z, 0.0, out=self.z)  # away steps leave -1e-17 dust
        self.zQz, self.cz, self.muz, self.sum_z = zQz, cz, muz, sum_z
        self.f_cur = self._objective(zQz, cz, muz)
        self.f_hist.append(self.f_cur)
        self.k += 1

    def cache_errors(self) -> dict[str, float]:
        """Relative drift of every cache versus a from-scratch recomputation."""
        Qz = self.p.Q @ self.z

        def rel(cached: float, exact: float) -> float:
            return abs(cached - exact) / max(1.0, abs(exact))

        return {
            "Qz": float(np.max(np.abs(self.Qz - Qz))) / max(1.0, float(np.max(np.abs(Qz)))),
            "zQz": rel(self.zQz, float(self.z @ Qz)),
            "cz": rel(self.cz, float(self.p.c @ self.z)),
            "muz": rel(self.muz, float(self.p.mu @ self.z)),
            "sum_z": rel(self.sum_z, float(self.z.sum())),
        }


@dataclass
class Direction:
    kind: StepKind
    vertex: int | None
    d: np.ndarray
    g_dot_d: float
    alpha_max: float
    gap_ts: float  # toward-step linearized gap, <= 0 at any feasible point


def toward_step(p: SimplexProblem, st: IterateState, g: np.ndarray):
    """Best simplex vertex for the linearized objective.

    Candidates are the origin (score 0) and the unit vertices (score g_i);
    ties prefer the origin, then the lowest index. Returns (vertex, d, gap)
    with d = v - z and gap = g'd.
    """
    i = int(np.argmin(g))
    if g[i] >= 0.0:
        vertex, score = None, 0.0
    else:
        vertex, score = i, float(g[i])
    d = -st.z.copy()
    if vertex is not None:
        d[vertex] += 1.0
    gap = score - float(g @ st.z)
    return vertex, d, gap


def away_step(p: SimplexProblem, st: IterateState, g: np.ndarray):
    """Worst active vertex to move mass away from, with its feasibility cap.

    Candidates are the origin (active when sum(z) < 1) and the unit vertices
    in the support of z; ties prefer the lowest index, the origin last.
    Returns (vertex, d, alpha_max, g_dot_d) with d = z - v.
    """
    support = st.z > 0.0
    vertex, score = None, 0.0
    if support.any():
        i = int(np.argmax(np.where(support, g, -np.inf)))
        if g[i] >= 0.0:
            vertex, score = i, float(g[i])
    if vertex is None:
        alpha = (1.0 - st.sum_z) / st.sum_z if st.sum_z > 0.0 else ALPHA_CAP
    else:
        zi = float(st.z[vertex])
        alpha = zi / (1.0 - zi) if zi < 1.0 else ALPHA_CAP
    d = st.z.copy()
    if vertex is not None:
        d[vertex] -= 1.0
    return vertex, d, min(alpha, ALPHA_CAP), float(g @ st.z) - score


def choose_direction(p: SimplexProblem, st: IterateState, g: np.ndarray, cfg: FwConfig) -> Direction:
    """Away step iff it linearizes at least as well and its cap exceeds beta."""
    v_ts, d_ts, gap_ts = toward_step(p, st, g)
    v_as, d_as, alpha_as, g_as = away_step(p, st, g)
    if g_as <= gap_ts and alpha_as > cfg.beta:
        return Direction(StepKind.AWAY, v_as, d_as, g_as, alpha_as, gap_ts)
    return Direction(StepKind.TOWARD, v_ts, d_ts, gap_ts, 1.0, gap_ts)


def _direction_fast(st: IterateState, g: np.ndarray, beta: float):
    """choose_direction on scalars only, for the solver's inner loop.

    Skips building the d vectors: both step kinds have d in {v - z, z - v},
    so ||d||^2 = ||z||^2 - 2 z_v + 1 (or ||z||^2 against the origin). Returns
    (kind, vertex, g_dot_d, alpha_max, gap_ts, d_sq).
    """
    z = st.z
    gz = float(g @ z)
    zz = float(z @ z)
    i_ts = int(np.argmin(g))
    v_ts = None
    score_ts = 0.0
    if g[i_ts] < 0.0:
        v_ts, score_ts = i_ts, float(g[i_ts])
    gap_ts = score_ts - gz
    v_as = None
    score_as = 0.0
    if st.sum_z > 0.0:
        i_as = int(np.argmax(np.where(z > 0.0, g, -np.inf)))
        if g[i_as] >= 0.0:
            v_as, score_as = i_as, float(g[i_as])
    if v_as is None:
        alpha_as = (1.0 - st.sum_z) / st.sum_z if st.sum_z > 0.0 else ALPHA_CAP
    else:
        zi = float(z[v_as])
        alpha_as = zi / (1.0 - zi) if zi < 1.0 else ALPHA_CAP
    alpha_as = min(alpha_as, ALPHA_CAP)
    g_as = gz - score_as
    if g_as <= gap_ts and alpha_as > beta:
        kind, vertex, g_dot_d, alpha_max = StepKind.AWAY, v_as, g_as, alpha_as
    else:
        kind, vertex, g_dot_d, alpha_max = StepKind.TOWARD, v_ts, gap_ts, 1.0
    d_sq = zz if vertex is None else zz - 2.0 * float(z[vertex]) + 1.0
    return kind, vertex, g_dot_d, alpha_max, gap_ts, max(d_sq, 0.0)


def line_search(
    p: SimplexProblem,
    st: IterateState,
    vertex: int | None,
    kind: StepKind,
    g_dot_d: float,
    d_sq: float,
    alpha_max: float,
    cfg: FwConfig,
):
    """First stepsize in alpha_max * delta^j passing the non-monotone test.

    Acceptance: f(z + alpha d) <= max(recent f) + gamma1 alpha g'd
    - gamma2 alpha^2 ||d||^2. Trial values come from the O(1) cache updates;
    non-finite trials fail the comparison and keep halving. Returns
    (alpha, halvings).
    """
    f_bar = st.f_bar()
    sign = 1.0 if kind is StepKind.TOWARD else -1.0
    alpha = alpha_max
    for halvings in range(_LS_SCALAR_HEAD):
        f_trial = st.trial_objective(vertex, sign * alpha)
        if f_trial <= f_bar + cfg.gamma1 * alpha * g_dot_d - cfg.gamma2 * alpha * alpha * d_sq:
            return alpha, halvings
        alpha *= cfg.delta
    # slow-path searches halve many times; evaluate whole chunks of the
    # stepsize sequence vectorized instead of one scalar trial per step
    p_, j0 = st.p, _LS_SCALAR_HEAD
    while j0 <= MAX_HALVINGS:
        m = min(_LS_CHUNK, MAX_HALVINGS + 1 - j0)
        factors = np.full(m, cfg.delta)
        factors[0] = 1.0
        alphas = alpha * np.cumprod(factors)
        tau = sign * alphas
        w = 1.0 - tau
        if vertex is None:
            zQz = w * w * st.zQz
            cz = w * st.cz
            muz = w * st.muz
        else:
            zQz = (
                w * w * st.zQz
                + 2.0 * tau * w * float(st.Qz[vertex])
                + tau * tau * float(p_.Q[vertex, vertex])
            )
            cz = w * st.cz + tau * float(p_.c[vertex])
            muz = w * st.muz + tau * float(p_.mu[vertex])
        q = np.maximum(zQz + cz + p_.d, 0.0)
        f_trial = np.asarray(p_.h.eval(np.sqrt(q))) - muz - p_.t_off
        rhs = f_bar + cfg.gamma1 * alphas * g_dot_d - cfg.gamma2 * alphas * alphas * d_sq
        hits = np.flatnonzero(f_trial <= rhs)
        if hits.size:
            j = int(hits[0])
            return float(alphas[j]), j0 + j
        alpha = float(alphas[-1]) * cfg.delta
        j0 += m
    raise LineSearchStall(f"no acceptable stepsize after {MAX_HALVINGS} halvings")


@dataclass
class OriginCheck:
    """Outcome of the optimality test at z = 0 on a d = 0, c = 0 node.

    ``certificate``, present when the origin is rejected, is a nonnegative,
    nonzero direction of strict descent at the origin. ``inner_value`` is the
    value of the nonnegative least-squares subproblem when one was solved.
    """

    origin_optimal: bool
    inner_value: float | None = None
    certificate: np.ndarray | None = field(default=None, repr=False)
    converged: bool = True


def _unit(dim: int, i: int) -> np.ndarray:
    e = np.zeros(dim)
    e[i] = 1.0
    return e


def origin_optimality_check(
    p: SimplexProblem, max_iter: int = 10_000, tol: float = 1e-9
) -> OriginCheck:
    """Decide whether z = 0 minimizes a node whose root term vanishes there.

    Only meaningful when d = 0 and c = 0, where f may lose differentiability
    at the origin. With zero slope at the origin (quadratic or thresholded
    weightings) the test is closed-form: the origin is optimal iff mu <= 0.
    Otherwise optimality is equivalent to min_{y>=0} (y+mu)'Q^{-1}(y+mu)
    <= h'(0)^2, solved by projected gradient with a fixed step derived from a
    power-method curvature estimate (Q factorized once). A feasible value
    already under the threshold proves optimality even without convergence;
    an unconverged run above it falls back conservatively to "not optimal"
    with a logged warning.
    """
    if p.d != 0.0 or np.any(p.c != 0.0):
        raise ValueError("origin check applies only to nodes with d = 0 and c = 0")
    mu = p.mu
    hp0 = p.h.deriv_scalar(0.0)
    if hp0 <= 0.0:
        if np.all(mu <= 0.0):
            return OriginCheck(True)
        return OriginCheck(False, certificate=_unit(p.dim, int(np.argmax(mu))))

    chol = scipy.linalg.cholesky(p.Q, lower=True)

    def q_inv(v: np.ndarray) -> np.ndarray:
        w = scipy.linalg.solve_triangular(chol, v, lower=True)
        return scipy.linalg.solve_triangular(chol, w, lower=True, trans="T")

    def phi(y: np.ndarray) -> float:
        w = y + mu
        return float(w @ q_inv(w))

    # curvature of phi is 2 Q^{-1}; the power estimate is a lower bound, so
    # take 10% slack and guard against residual overshoot below
    v = np.full(p.dim, 1.0 / math.sqrt(p.dim))
    lam = 1.0
    for _ in range(20):
        w = q_inv(v)
        lam = float(np.linalg.norm(w))
        if lam <= 0.0:
            break
        v = w / lam
    step = 1.0 / (2.2 * max(lam, 1e-300))

    y = np.maximum(-mu, 0.0)
    fy = phi(y)
    converged = False
    for _ in range(max_iter):
        grad = 2.0 * q_inv(y + mu)
        while True:
            y_next = np.maximum(y - step * grad, 0.0)
            f_next = phi(y_next)
            if f_next <= fy + 1e-12 * (1.0 + abs(fy)) or step < 1e-30:
                break
            step *= 0.5
        move = float(np.linalg.norm(y_next - y))
        y, fy = y_next, f_next
        if move <= tol * step:
            converged = True
            break

    if fy <= hp0 * hp0 + 1e-10:
        return OriginCheck(True, inner_value=fy, converged=converged)
    if not converged:
        log.warning(
            "origin check inner solve did not converge (value %.6g vs threshold %.6g); "
            "conservatively treating the origin as non-optimal",
            fy,
            hp0 * hp0,
        )
    cert = np.maximum(q_inv(y + mu), 0.0)
    if float(cert.max()) <= 0.0:
        cert = None
    return OriginCheck(False, inner_value=fy, certificate=cert, converged=converged)


@dataclass
class RelaxationDiagnostics:
    """Per-iteration traces, populated when passed to the solver."""

    f: list = field(default_factory=list)
    f_bar: list = field(default_factory=list)
    gap_ts: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    halvings: list = field(default_factory=list)


@dataclass
class RelaxationResult:
    z_star: np.ndarray
    f_star: float
    dual_bound: float
    status: RelaxationStatus
    iters: int
    state: IterateState | None = field(default=None, repr=False)

    @classmethod
    def at_origin(cls, p: SimplexProblem) -> "RelaxationResult":
        """Result for a node proven optimal at z = 0 by the origin check."""
        z = np.zeros(p.dim)
        f0 = eval_f(p, z)
        return cls(z, f0, f0, RelaxationStatus.ORIGIN_OPTIMAL, 0)


def _verify_step(
    p: SimplexProblem,
    st: IterateState,
    f_bar: float,
    kind: StepKind,
    g_dot_d: float,
    alpha: float,
    d_sq: float,
    cfg: FwConfig,
) -> None:
    # the acceptance test ran on O(1) cache arithmetic; re-evaluating from
    # scratch follows a different float path, hence the small slack
    f_scratch = eval_f(p, st.z)
    rhs = f_bar + cfg.gamma1 * alpha * g_dot_d - cfg.gamma2 * alpha * alpha * d_sq
    slack = 1e-9 * (1.0 + abs(f_bar) + abs(f_scratch))
    if not f_scratch <= rhs + slack:
        raise AssertionError(
            f"accepted step fails the acceptance test on re-evaluation: "
            f"{f_scratch!r} > {rhs!r} (alpha={alpha!r}, kind={kind})"
        )


def solve_relaxation(
    p: SimplexProblem,
    z0,
    prune_threshold: float | None = None,
    cfg: FwConfig = FwConfig(),
    diag: RelaxationDiagnostics | None = None,
) -> RelaxationResult:
    """Run the conditional-gradient loop from a feasible starting point.

    Stops when the toward-step gap certifies optimality within ``gap_tol``,
    when the running dual bound (max over iterations of f + gap) reaches
    ``prune_threshold``, or at the iteration limit. The dual bound is a valid
    lower bound on the optimal value in every case, including early aborts on
    numerical breakdown.
    """
    st = IterateState(p, np.asarray(z0, dtype=float), cfg.p_nm)
    if p.d == 0.0 and st.sum_z == 0.0:
        raise ValueError(
            "start point must avoid the origin when the root term vanishes there; "
            "run the origin optimality check first"
        )
    dual = -math.inf
    status = RelaxationStatus.ITER_LIMIT
    iters = 0
    # Two plateau guards, both exiting with the valid running dual bound:
    #  - float64 can pin the gap above gap_tol when the remaining improvement
    #    is below ulp(f); the line search then accepts ~1e-16 steps that leave
    #    the iterate frozen (always on),
    #  - ill-conditioned nodes (tiny lambda_min(Q)) drift at O(1/k) toward a
    #    face-interior optimum, so closing the last decades of gap would take
    #    ~1e7 iterations; when drift_window > 0, stop once the bracket
    #    f_best - dual shrinks too slowly across a window.
    f_best = st.f_cur
    stalled = 0
    u_prev = math.inf
    next_check = cfg.drift_window if cfg.drift_window > 0 else cfg.max_iter + 1
    for _ in range(cfg.max_iter):
        iters += 1
        try:
            g = st.gradient()
        except GradientUndefined:
            log.warning("gradient undefined at an iterate; node keeps its last valid bound")
            break
        if not math.isfinite(float(g.sum())):
            log.warning("non-finite gradient; node keeps its last valid bound")
            break
        kind, vertex, g_dot_d, alpha_max, gap_ts, d_sq = _direction_fast(st, g, cfg.beta)
        dual = max(dual, st.f_cur + gap_ts)
        if diag is not None:
            diag.f.append(st.f_cur)
            diag.f_bar.append(st.f_bar())
            diag.gap_ts.append(gap_ts)
            diag.dual.append(dual)
        if gap_ts >= -cfg.gap_tol:
            status = RelaxationStatus.OPTIMAL
            break
        if prune_threshold is not None and dual >= prune_threshold:
            status = RelaxationStatus.PRUNED_BY_BOUND
            break
        if iters >= next_check:
            u = f_best - dual
            if u <= 0.0 or u > (1.0 - _DRIFT_MIN_SHRINK) * u_prev:
                log.debug(
                    "bracket stuck at %.3g after %d iterations; "
                    "keeping the dual bound and stopping",
                    u,
                    iters,
                )
                break
            u_prev = u
            next_check = iters + cfg.drift_window
        f_bar = st.f_bar()
        try:
            alpha, halvings = line_search(p, st, vertex, kind, g_dot_d, d_sq, alpha_max, cfg)
        except LineSearchStall:
            log.warning("line search stalled; node keeps its last valid bound")
            break
        if diag is not None:
            diag.halvings.append(halvings)
        st.apply_step(vertex, kind, alpha)
        if cfg.self_check:
            _verify_step(p, st, f_bar, kind, g_dot_d, alpha, d_sq, cfg)
        if st.f_cur < f_best - 2.0**-50 * (1.0 + abs(f_best)):
            f_best = st.f_cur
            stalled = 0
        elif alpha < _STALL_ALPHA:
            stalled += 1
            if stalled >= _STALL_PATIENCE:
                log.debug(
                    "gap pinned at %.3g by float resolution after %d iterations; "
                    "keeping the dual bound and stopping",
                    gap_ts,
                    iters,
                )
                break
        else:
            stalled = 0
    return RelaxationResult(st.z.copy(), st.f_cur, dual, status, iters, state=st)
