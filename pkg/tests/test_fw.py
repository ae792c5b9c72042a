"""Conditional-gradient solver: directions, line search, caches, full solves."""

import math

import numpy as np
import pytest

from conftest import interior_quad_problem, origin_grid_verdict, random_spd
from meanrisk.fw import (
    ALPHA_CAP,
    FwConfig,
    IterateState,
    LineSearchStall,
    RelaxationDiagnostics,
    RelaxationResult,
    RelaxationStatus,
    StepKind,
    _direction_fast,
    away_step,
    choose_direction,
    line_search,
    origin_optimality_check,
    solve_relaxation,
    toward_step,
)
from meanrisk.model import (
    ExpThresholdRisk,
    LinearRisk,
    QuadraticRisk,
    SimplexProblem,
    eval_f,
    grad_f,
)
from meanrisk.projection import project_capped_simplex


def _problem(Q, mu, h, c=None, d=0.0):
    Q = np.asarray(Q, dtype=float)
    dim = Q.shape[0]
    c = np.zeros(dim) if c is None else np.asarray(c, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return SimplexProblem(Q=Q, c=c, d=d, mu=mu, t_off=0.0, scale=np.ones(dim), h=h)


def _random_problem(rng, dim, h, d_low=0.5):
    # d bounded away from zero keeps the objective smooth on the whole simplex
    return SimplexProblem(
        Q=random_spd(rng, dim, 1.0),
        c=0.1 * np.abs(rng.standard_normal(dim)),
        d=rng.uniform(d_low, d_low + 0.5),
        mu=rng.standard_normal(dim),
        t_off=0.0,
        scale=np.ones(dim),
        h=h,
    )


def _random_point(rng, dim):
    z = rng.random(dim)
    z *= rng.uniform(0.1, 0.95) / z.sum()
    z[rng.random(dim) < 0.3] = 0.0
    return z


_RISKS = (LinearRisk(1.0), QuadraticRisk(1.0), ExpThresholdRisk(1.0))


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = FwConfig()
    assert cfg.delta == 0.5
    assert cfg.gamma1 == 1e-4
    assert cfg.gamma2 == 1e-6
    assert cfg.p_nm == 1
    assert cfg.beta == 1e-6
    assert cfg.gap_tol == 1e-10
    assert cfg.max_iter == 50_000
    assert cfg.self_check is False
    assert cfg.drift_window == 0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"delta": 0.0},
        {"delta": 1.0},
        {"gamma1": 0.0},
        {"gamma1": 0.5},
        {"gamma2": -1e-9},
        {"p_nm": -1},
        {"beta": 0.0},
        {"gap_tol": 0.0},
        {"max_iter": 0},
        {"drift_window": -1},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        FwConfig(**kwargs)


def test_state_rejects_wrong_dimension():
    p = _problem(np.eye(2), [0.0, 0.0], QuadraticRisk(1.0), d=1.0)
    with pytest.raises(ValueError):
        IterateState.from_point(p, [0.1, 0.1, 0.1])


# ------------------------------------------------------------ directions


def test_toward_step_picks_most_negative_gradient_vertex():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.1, 0.2, 0.3])
    g = np.array([1.0, -2.0, 3.0])
    vertex, d, gap = toward_step(p, st, g)
    assert vertex == 1
    e1 = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(d, e1 - st.z, rtol=0, atol=0)
    assert gap == pytest.approx(-2.0 - float(g @ st.z), abs=1e-15)


def test_toward_step_returns_origin_when_gradient_nonnegative():
    p = _problem(np.eye(2), np.zeros(2), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.3, 0.4])
    g = np.array([1.0, 2.0])
    vertex, d, gap = toward_step(p, st, g)
    assert vertex is None
    np.testing.assert_array_equal(d, -st.z)
    assert gap == pytest.approx(-float(g @ st.z), abs=1e-15)
    # a zero gradient entry ties with the origin; the origin wins
    vertex, _, _ = toward_step(p, st, np.array([0.0, 3.0]))
    assert vertex is None


def test_away_step_cap_for_unit_vertex():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.3, 0.2, 0.0])
    g = np.array([5.0, 1.0, 0.0])
    vertex, d, alpha_max, g_dot_d = away_step(p, st, g)
    assert vertex == 0
    assert alpha_max == pytest.approx(0.3 / 0.7, rel=1e-15)
    np.testing.assert_allclose(d, st.z - np.array([1.0, 0.0, 0.0]), atol=0)
    assert g_dot_d == pytest.approx(float(g @ st.z) - 5.0, abs=1e-15)


def test_away_step_cap_for_origin():
    p = _problem(np.eye(2), np.zeros(2), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.25, 0.25])
    # gradient negative on the whole support, so the origin is the away vertex
    vertex, d, alpha_max, _ = away_step(p, st, np.array([-1.0, -2.0]))
    assert vertex is None
    assert alpha_max == pytest.approx(1.0, rel=1e-15)
    np.testing.assert_array_equal(d, st.z)


def test_away_step_cap_saturates_at_sentinel():
    p = _problem(np.eye(2), np.zeros(2), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [1.0, 0.0])
    vertex, _, alpha_max, _ = away_step(p, st, np.array([1.0, 0.0]))
    assert vertex == 0
    assert alpha_max == ALPHA_CAP


def test_away_step_ignores_zero_coordinates():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.5, 0.3, 0.0])
    rng = np.random.default_rng(7)
    for _ in range(1000):
        vertex, _, _, _ = away_step(p, st, rng.standard_normal(3))
        assert vertex != 2


def test_choose_direction_prefers_better_linearized_away():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.2, 0.3, 0.0])
    g = np.array([-1.0, 5.0, -1.2])
    dr = choose_direction(p, st, g, FwConfig())
    assert dr.kind is StepKind.AWAY
    assert dr.vertex == 1
    assert dr.g_dot_d == pytest.approx(-3.7, rel=1e-15)
    assert dr.alpha_max == pytest.approx(0.3 / 0.7, rel=1e-15)
    assert dr.gap_ts == pytest.approx(-2.5, rel=1e-15)
    np.testing.assert_allclose(dr.d, st.z - np.array([0.0, 1.0, 0.0]), atol=0)


def test_choose_direction_keeps_toward_when_away_is_worse():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.2, 0.3, 0.0])
    g = np.array([-1.0, 2.0, -5.0])
    dr = choose_direction(p, st, g, FwConfig())
    assert dr.kind is StepKind.TOWARD
    assert dr.vertex == 2
    assert dr.alpha_max == 1.0
    assert dr.g_dot_d == pytest.approx(-5.4, rel=1e-15)
    assert dr.g_dot_d == pytest.approx(dr.gap_ts, abs=0)


def test_choose_direction_blocks_tiny_away_caps():
    p = _problem(np.eye(3), np.zeros(3), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.2, 1e-9, 0.0])
    # the away step linearizes better but its cap 1e-9/(1-1e-9) is below beta
    dr = choose_direction(p, st, np.array([-1.0, 5.0, 0.0]), FwConfig())
    assert dr.kind is StepKind.TOWARD
    assert dr.vertex == 0


def test_fast_direction_matches_reference():
    rng = np.random.default_rng(41)
    cfg = FwConfig()
    for trial in range(500):
        dim = int(rng.integers(2, 13))
        p = _random_problem(rng, dim, _RISKS[trial % 3])
        z = _random_point(rng, dim)
        if trial % 25 == 0:
            z = np.zeros(dim)
        st = IterateState.from_point(p, z)
        g = rng.standard_normal(dim)
        if trial % 7 == 0:
            g = np.abs(g)
        ref = choose_direction(p, st, g, cfg)
        kind, vertex, g_dot_d, alpha_max, gap_ts, d_sq = _direction_fast(st, g, cfg.beta)
        assert kind is ref.kind
        assert vertex == ref.vertex
        assert g_dot_d == pytest.approx(ref.g_dot_d, rel=1e-12, abs=1e-12)
        assert alpha_max == pytest.approx(ref.alpha_max, rel=1e-12)
        assert gap_ts == pytest.approx(ref.gap_ts, rel=1e-12, abs=1e-12)
        assert d_sq == pytest.approx(float(ref.d @ ref.d), rel=1e-9, abs=1e-12)


# ------------------------------------------------------------ line search


def test_line_search_accepts_unit_step_on_easy_descent():
    # 1-d: f(alpha) = alpha^2 - 2 alpha, full step passes on the first try
    p = _problem([[1.0]], [2.0], QuadraticRisk(1.0))
    st = IterateState.from_point(p, [0.0])
    alpha, halvings = line_search(
        p, st, 0, StepKind.TOWARD, g_dot_d=-2.0, d_sq=1.0, alpha_max=1.0, cfg=FwConfig()
    )
    assert alpha == 1.0
    assert halvings == 0


def test_line_search_nonmonotone_accepts_what_monotone_rejects():
    # Regression with hand-checked arithmetic. From z = (0.48, 0.48), reached
    # by a small step toward the origin from (0.5, 0.5), the toward step to
    # vertex 0 needs f to rise above f(z) before it pays off: the memory-1
    # threshold max(f(0.48..), f(0.5..)) = 5 admits alpha = 0.25, while the
    # monotone threshold f(z) = 4.6096 forces alpha down to 0.0625.
    def prepared_state(p_nm):
        p = _problem(np.diag([12.0, 12.0]), [3.0, 1.0], QuadraticRisk(1.0), d=1.0)
        st = IterateState.from_point(p, [0.5, 0.5], p_nm=p_nm)
        st.apply_step(None, StepKind.TOWARD, 0.04)
        return p, st

    p, st = prepared_state(p_nm=1)
    assert st.f_bar() == pytest.approx(5.0, abs=1e-12)
    assert st.f_cur == pytest.approx(4.6096, abs=1e-12)
    g = st.gradient()
    d = np.array([1.0, 0.0]) - st.z
    g_dot_d = float(g @ d)
    d_sq = float(d @ d)
    assert g_dot_d == pytest.approx(-0.6192, abs=1e-12)
    alpha, halvings = line_search(
        p, st, 0, StepKind.TOWARD, g_dot_d, d_sq, alpha_max=1.0, cfg=FwConfig(p_nm=1)
    )
    assert alpha == 0.25
    assert halvings == 2
    # the accepted trial climbs above the current f but stays under the memory
    assert st.trial_objective(0, alpha) > st.f_cur
    assert st.trial_objective(0, alpha) <= st.f_bar()

    p, st = prepared_state(p_nm=0)
    assert st.f_bar() == pytest.approx(4.6096, abs=1e-12)
    alpha, halvings = line_search(
        p, st, 0, StepKind.TOWARD, g_dot_d, d_sq, alpha_max=1.0, cfg=FwConfig(p_nm=0)
    )
    assert alpha == 0.0625
    assert halvings == 4


def test_line_search_accepted_steps_hold_on_reevaluation():
    rng = np.random.default_rng(13)
    for trial in range(200):
        dim = int(rng.integers(2, 11))
        p = _random_problem(rng, dim, _RISKS[trial % 3])
        cfg = FwConfig(p_nm=trial % 2)
        st = IterateState.from_point(p, _random_point(rng, dim), p_nm=cfg.p_nm)
        dr = choose_direction(p, st, st.gradient(), cfg)
        if dr.g_dot_d >= 0.0:
            continue
        f_bar = st.f_bar()
        d_sq = float(dr.d @ dr.d)
        alpha, halvings = line_search(
            p, st, dr.vertex, dr.kind, dr.g_dot_d, d_sq, dr.alpha_max, cfg
        )
        assert 0.0 < alpha <= dr.alpha_max
        assert halvings >= 0
        f_scratch = eval_f(p, st.z + alpha * dr.d)
        rhs = f_bar + cfg.gamma1 * alpha * dr.g_dot_d - cfg.gamma2 * alpha * alpha * d_sq
        assert f_scratch <= rhs + 1e-9 * (1.0 + abs(f_bar))


def test_line_search_stall_raises():
    # a wildly wrong slope estimate makes the acceptance threshold
    # unreachable at every stepsize; the halving budget must trip
    p = _problem(np.eye(2), np.zeros(2), QuadraticRisk(1.0), d=1.0)
    st = IterateState.from_point(p, [0.5, 0.25])
    with pytest.raises(LineSearchStall):
        line_search(
            p, st, 0, StepKind.TOWARD, g_dot_d=-1e308, d_sq=1.0, alpha_max=1.0, cfg=FwConfig()
        )


# ------------------------------------------------------------ step updates


def test_apply_step_origin_scaling_identities():
    rng = np.random.default_rng(5)
    p = _random_problem(rng, 5, QuadraticRisk(1.0))
    st = IterateState.from_point(p, _random_point(rng, 5))
    zQz, cz, muz, sum_z = st.zQz, st.cz, st.muz, st.sum_z
    alpha = 0.3
    st.apply_step(None, StepKind.TOWARD, alpha)
    w = 1.0 - alpha
    assert st.zQz == pytest.approx(w * w * zQz, rel=1e-15)
    assert st.cz == pytest.approx(w * cz, rel=1e-15)
    assert st.muz == pytest.approx(w * muz, rel=1e-15)
    assert st.sum_z == pytest.approx(w * sum_z, rel=1e-15)


def test_apply_step_full_step_lands_exactly_on_vertex():
    rng = np.random.default_rng(6)
    p = _random_problem(rng, 4, LinearRisk(1.0))
    st = IterateState.from_point(p, _random_point(rng, 4))
    st.apply_step(2, StepKind.TOWARD, 1.0)
    e = np.array([0.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(st.z, e)
    assert st.zQz == float(p.Q[2, 2])
    assert st.sum_z == 1.0
    np.testing.assert_array_equal(st.Qz, p.Q[2])


def test_apply_step_cache_drift_after_500_random_steps():
    rng = np.random.default_rng(21)
    p = _random_problem(rng, 30, QuadraticRisk(1.0))
    st = IterateState.from_point(p, np.full(30, 1.0 / 60.0))
    for _ in range(500):
        if rng.random() < 0.55:
            vertex = None if rng.random() < 0.15 else int(rng.integers(30))
            st.apply_step(vertex, StepKind.TOWARD, float(rng.uniform(0.0, 1.0)))
        else:
            support = np.flatnonzero(st.z > 1e-12)
            if rng.random() < 0.3 or support.size == 0:
                if st.sum_z <= 1e-12 or st.sum_z >= 1.0:
                    continue
                vertex, cap = None, (1.0 - st.sum_z) / st.sum_z
            else:
                vertex = int(rng.choice(support))
                zi = float(st.z[vertex])
                if zi >= 1.0:
                    continue
                cap = zi / (1.0 - zi)
            st.apply_step(vertex, StepKind.AWAY, 0.98 * cap * float(rng.random()))
    assert max(st.cache_errors().values()) <= 1e-9
    assert np.all(st.z >= 0.0)
    assert float(st.z.sum()) <= 1.0 + 1e-12


# ------------------------------------------------------------ origin check


def test_origin_check_one_dim_closed_forms():
    # min over y >= 0 of (y + 1)^2 / 1 is 1 at y = 0
    p = _problem([[1.0]], [1.0], LinearRisk(2.0))
    res = origin_optimality_check(p)
    assert res.origin_optimal
    assert res.inner_value == pytest.approx(1.0, abs=1e-9)

    p = _problem([[1.0]], [1.0], LinearRisk(0.5))
    res = origin_optimality_check(p)
    assert not res.origin_optimal
    assert res.inner_value == pytest.approx(1.0, abs=1e-9)
    cert = res.certificate
    assert cert is not None and np.all(cert >= 0.0) and cert.max() > 0.0
    # the certificate really is a descent direction out of the origin
    eps = 1e-6
    assert eval_f(p, eps * cert) < eval_f(p, np.zeros(1))


def test_origin_check_zero_slope_shortcut():
    # weightings with zero slope at the root: any positive return entry
    # disqualifies the origin with no inner solve at all
    for h in (QuadraticRisk(1.0), ExpThresholdRisk(1.0), ExpThresholdRisk(0.0)):
        res = origin_optimality_check(_problem(np.eye(2), [1e-8, -1.0], h))
        assert not res.origin_optimal
        assert res.inner_value is None
        np.testing.assert_array_equal(res.certificate, [1.0, 0.0])
        res = origin_optimality_check(_problem(np.eye(2), [-1.0, -2.0], h))
        assert res.origin_optimal
        assert res.inner_value is None


def test_origin_check_requires_vanishing_root_term():
    with pytest.raises(ValueError):
        origin_optimality_check(_problem(np.eye(2), [1.0, 1.0], LinearRisk(1.0), d=0.5))
    with pytest.raises(ValueError):
        origin_optimality_check(
            _problem(np.eye(2), [1.0, 1.0], LinearRisk(1.0), c=[0.1, 0.0])
        )


def test_origin_check_agrees_with_dense_grid():
    rng = np.random.default_rng(23)
    for omega in (5.0, 1.0, 0.05):
        p = _problem(
            random_spd(rng, 3, 1.0), rng.uniform(0.5, 1.5, 3), LinearRisk(omega)
        )
        assert origin_optimality_check(p).origin_optimal == origin_grid_verdict(p)


# ------------------------------------------------------------- full solves


def test_solve_relaxation_finds_interior_optimum():
    # unconstrained optimum mu/2 = (0.5, 0.25) lies inside the simplex
    p = _problem(np.eye(2), [1.0, 0.5], QuadraticRisk(1.0))
    diag = RelaxationDiagnostics()
    res = solve_relaxation(p, [1.0 / 3.0, 1.0 / 3.0], diag=diag)
    assert res.status is RelaxationStatus.OPTIMAL
    np.testing.assert_allclose(res.z_star, [0.5, 0.25], atol=1e-6)
    assert res.f_star == pytest.approx(-0.3125, abs=1e-9)
    # the toward gap closes at an interior optimum
    assert diag.gap_ts[-1] >= -1e-8
    # weak duality and level-set containment along the whole trajectory
    assert res.dual_bound <= res.f_star + 1e-12
    f0 = eval_f(p, np.array([1.0 / 3.0, 1.0 / 3.0]))
    assert all(f <= f0 + 1e-12 for f in diag.f)
    assert all(b <= res.f_star + 1e-10 for b in diag.dual)
    # the non-monotone reference value never increases
    assert np.all(np.diff(diag.f_bar) <= 1e-12)


def test_solve_relaxation_monotone_mode_decreases():
    p = _problem(np.eye(2), [1.0, 0.5], QuadraticRisk(1.0))
    diag = RelaxationDiagnostics()
    res = solve_relaxation(p, [1.0 / 3.0, 1.0 / 3.0], cfg=FwConfig(p_nm=0), diag=diag)
    assert res.status is RelaxationStatus.OPTIMAL
    f = np.asarray(diag.f)
    assert np.all(np.diff(f) <= 0.0)
    assert f[-1] < f[0]


def test_solve_relaxation_matches_projected_gradient_oracle():
    rng = np.random.default_rng(97)
    for trial in range(20):
        p = _random_problem(rng, 8, LinearRisk((0.5, 1.0, 2.0)[trial % 3]))
        res = solve_relaxation(p, np.full(8, 1.0 / 16.0))
        f_pgd, _ = _pgd_min(p, np.full(8, 1.0 / 16.0))
        assert res.f_star == pytest.approx(f_pgd, abs=1e-6)
        assert res.dual_bound <= f_pgd + 1e-10


def _pgd_min(p, z0, max_iter=1_000_000):
    """Fixed-step projected gradient descent, an independent minimizer.

    The step uses the curvature bound |h''~| lam_max(Q) / sqrt(d) valid for a
    linear weighting on problems with d > 0.
    """
    lam_max = float(np.linalg.eigvalsh(p.Q)[-1])
    step = 0.9 * math.sqrt(p.d) / (p.h.deriv_scalar(1.0) * lam_max)
    z = np.asarray(z0, dtype=float)
    for _ in range(max_iter):
        z_new = project_capped_simplex(z - step * grad_f(p, z))
        if float(np.max(np.abs(z_new - z))) <= 1e-14:
            z = z_new
            break
        z = z_new
    return eval_f(p, z), z


def test_solve_relaxation_rejects_origin_start_when_root_term_vanishes():
    p = _problem(np.eye(2), [1.0, 0.5], QuadraticRisk(1.0))
    with pytest.raises(ValueError):
        solve_relaxation(p, np.zeros(2))
    # with d > 0 the objective is smooth at zero and the origin start is fine
    smooth = _problem(np.eye(2), [1.0, 0.5], QuadraticRisk(1.0), d=0.5)
    res = solve_relaxation(smooth, np.zeros(2), cfg=FwConfig(max_iter=5000))
    np.testing.assert_allclose(res.z_star, [0.5, 0.25], atol=1e-6)
    assert res.f_star == pytest.approx(0.1875, abs=1e-9)


def test_solve_relaxation_prune_threshold_stops_early():
    p = _problem(np.eye(2), [1.0, 0.5], QuadraticRisk(1.0))
    z0 = [1.0 / 3.0, 1.0 / 3.0]
    res = solve_relaxation(p, z0, prune_threshold=-1.0)
    assert res.status is RelaxationStatus.PRUNED_BY_BOUND
    assert res.iters == 1
    assert res.dual_bound >= -1.0
    # a threshold the dual bound can never reach leaves the solve untouched
    res = solve_relaxation(p, z0, prune_threshold=-0.2)
    assert res.status is RelaxationStatus.OPTIMAL


def test_solve_relaxation_drift_window_exit_keeps_valid_bound():
    p, _ = interior_quad_problem(11)
    z0 = np.full(p.dim, 0.5 / p.dim)
    full = solve_relaxation(p, z0)
    assert full.status is RelaxationStatus.OPTIMAL
    early = solve_relaxation(p, z0, cfg=FwConfig(drift_window=1))
    assert early.status is RelaxationStatus.ITER_LIMIT
    assert early.iters < full.iters
    assert early.dual_bound <= full.f_star + 1e-10


def test_result_at_origin_constructor():
    p = _problem(np.eye(3), [-1.0, -2.0, -0.5], LinearRisk(2.0))
    res = RelaxationResult.at_origin(p)
    assert res.status is RelaxationStatus.ORIGIN_OPTIMAL
    assert res.iters == 0
    assert res.state is None
    np.testing.assert_array_equal(res.z_star, np.zeros(3))
    assert res.f_star == 0.0
    assert res.dual_bound == res.f_star
