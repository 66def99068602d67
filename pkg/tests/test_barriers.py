import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbflab.barriers import (Barrier, CompositeBarrier, HARD, box_limit, circle_clearance,
                             compose_lse, composite_stats, constraint_row, ellipse_clearance,
                             eval_barrier, halfspace, single_stats)
from cbflab.plants import make_rng


def fd_gradient(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def fd_hessian(fn, x, h=1e-4):
    n = x.size
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            def bumped(si, sj):
                y = x.copy()
                y[i] += si * h
                y[j] += sj * h
                return fn(y)

            out[i, j] = (bumped(1, 1) - bumped(1, -1) - bumped(-1, 1) + bumped(-1, -1)) / (4 * h * h)
    return out


def test_halfspace_example():
    b = halfspace(0, 0.0, 2)
    h, g, hess = eval_barrier(b, np.array([2.0, 5.0]))
    assert h == pytest.approx(2.0)
    assert np.allclose(g, [1.0, 0.0])
    assert not hess.any()


def test_circle_clearance_example():
    b = circle_clearance([0.0, 0.0], 1.0, [0, 1], 2)
    h, g, hess = eval_barrier(b, np.array([3.0, 4.0]))
    assert h == pytest.approx(24.0)  # 9 + 16 - 1
    assert np.allclose(g, [6.0, 8.0])
    assert np.allclose(hess, 2.0 * np.eye(2))


def test_box_limit_example():
    b = box_limit(0, 1.0, 3)
    h, g, hess = eval_barrier(b, np.array([0.0, 9.0, 9.0]))
    assert h == pytest.approx(1.0)
    assert np.allclose(g, 0.0)
    assert np.allclose(hess, np.diag([-2.0, 0.0, 0.0]))


@pytest.mark.parametrize("factory", [
    lambda: halfspace(1, 0.3, 4, sign=-1.0),
    lambda: circle_clearance([0.5, -0.2], 0.7, [0, 1], 4),
    lambda: ellipse_clearance([0.1, 0.2], [1.5, 0.5], [0, 1], 4),
    lambda: box_limit(2, 1.2, 4),
    # velocity-aware (augmented-state) variants
    lambda: halfspace(0, 0.3, 4, vel_idx=(2,), velocity_gain=0.5),
    lambda: circle_clearance([0.5, -0.2], 0.7, [0, 1], 4, vel_idx=(2, 3), velocity_gain=0.4),
    lambda: ellipse_clearance([0.1, 0.2], [1.5, 0.5], [0, 1], 4, vel_idx=(2, 3), velocity_gain=0.3),
    lambda: box_limit(1, 1.2, 4, vel_idx=(3,), velocity_gain=0.6),
])
def test_analytic_derivatives_match_fd(factory):
    b = factory()
    rng = make_rng(17, 0)
    for _ in range(10):
        xi = rng.standard_normal(4) * 2
        h, g, hess = eval_barrier(b, xi)
        g_fd = fd_gradient(lambda x: b.eval(x)[0], xi)
        denom = max(1.0, np.abs(g_fd).max())
        assert np.abs(g - g_fd).max() / denom <= 1e-6
        h_fd = fd_hessian(lambda x: b.eval(x)[0], xi)
        denom = max(1.0, np.abs(h_fd).max())
        assert np.abs(hess - h_fd).max() / denom <= 1e-4
        assert np.allclose(hess, hess.T)


def test_lse_singleton_identity():
    phi, rho = compose_lse([0.7], 5.0)
    assert phi == pytest.approx(0.7)
    assert np.allclose(rho, [1.0])


def test_lse_two_equal_values():
    phi, rho = compose_lse([1.0, 1.0], 1.0)
    assert phi == pytest.approx(1.0 - np.log(2.0), abs=1e-12)
    assert np.allclose(rho, [0.5, 0.5])


def test_lse_dominance_limit():
    phi, rho = compose_lse([0.0, 100.0], 10.0)
    assert phi == pytest.approx(0.0, abs=1e-300)
    assert rho[0] == pytest.approx(1.0)
    assert rho[1] == pytest.approx(0.0, abs=1e-300)


def test_lse_overflow_safe():
    phi, rho = compose_lse([-1e6, 2e6], 10.0)
    assert np.isfinite(phi)
    assert phi == pytest.approx(-1e6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.floats(0.1, 50.0))
def test_lse_sandwich_and_weights(values, beta):
    phi, rho = compose_lse(values, beta)
    m = min(values)
    assert m - np.log(len(values)) / beta - 1e-12 <= phi <= m + 1e-12
    assert rho.sum() == pytest.approx(1.0, abs=1e-12)
    # entries positive up to fp underflow of fully dominated members
    assert (rho >= 0).all() and rho.max() <= 1.0
    # shift invariance of rho
    _, rho2 = compose_lse(np.asarray(values) + 3.7, beta)
    assert np.allclose(rho, rho2, atol=1e-9)


def _planar_setup(sigma_diag=(1.0, 3.0)):
    n = 2
    members = (circle_clearance([0.0, 0.0], 1.0, [0, 1], n),
               halfspace(0, -2.0, n))
    cb = CompositeBarrier(members, beta=3.0)
    f = np.array([0.3, -0.1])
    g = np.eye(2)
    sigma = np.diag(sigma_diag)
    return cb, f, g, sigma


def test_stats_deterministic_reduction():
    cb, f, g, _ = _planar_setup()
    st0 = composite_stats(cb, np.array([2.0, 1.0]), f, g, np.zeros((2, 2)))
    assert st0.ito == 0.0
    assert st0.sigma_h == 0.0


def test_sigma_h_quadratic_form_example():
    # single barrier with grad (1, 2), Sigma = diag(4, 1) -> sigma_h = sqrt(8)
    grad = np.array([1.0, 2.0])
    b = Barrier("lin", HARD, lambda xi: (float(grad @ xi), grad, np.zeros((2, 2))))
    stats = single_stats(b, np.zeros(2), np.zeros(2), np.eye(2), np.diag([4.0, 1.0]))
    assert stats.sigma_h == pytest.approx(np.sqrt(8.0), abs=1e-12)


def test_ito_trace_examples():
    hess = np.diag([2.0, 0.0])
    b = Barrier("q", HARD, lambda xi: (0.0, np.zeros(2), hess))
    stats = single_stats(b, np.zeros(2), np.zeros(2), np.eye(2), np.diag([1.0, 3.0]))
    assert stats.ito == pytest.approx(1.0)
    circ = circle_clearance([0.0, 0.0], 1.0, [0, 1], 2)
    stats = single_stats(circ, np.array([3.0, 4.0]), np.zeros(2), np.eye(2), np.diag([1.0, 3.0]))
    assert stats.ito == pytest.approx(4.0)  # 0.5 tr(2I diag(1,3)) = 4


def test_composite_derivatives_match_fd():
    cb, f, g, sigma = _planar_setup()
    rng = make_rng(23, 0)

    def phi_of(x):
        vals = [m.eval(x)[0] for m in cb.members]
        return compose_lse(vals, cb.beta)[0]

    for _ in range(100):
        xi = rng.standard_normal(2) * 2.0
        stats = composite_stats(cb, xi, f, g, sigma)
        g_fd = fd_gradient(phi_of, xi)
        assert np.abs(stats.grad - g_fd).max() <= 1e-5 * max(1.0, np.abs(g_fd).max())
        # composite Hessian via the ito identity: recompute hess from stats
        h_fd = fd_hessian(phi_of, xi)
        ito_fd = 0.5 * float(np.vdot(h_fd, sigma))
        assert abs(stats.ito - ito_fd) <= 1e-3 * max(1.0, abs(ito_fd))


def test_composite_derivatives_match_fd_scalar_plant():
    members = (halfspace(0, 0.0, 1), box_limit(0, 1.5, 1))
    cb = CompositeBarrier(members, beta=8.0)
    sigma = np.array([[0.3]])
    rng = make_rng(29, 0)

    def phi_of(x):
        return compose_lse([m.eval(x)[0] for m in cb.members], cb.beta)[0]

    for _ in range(100):
        xi = rng.uniform(-1.2, 1.2, 1)
        stats = composite_stats(cb, xi, np.zeros(1), np.ones((1, 1)), sigma)
        g_fd = fd_gradient(phi_of, xi)
        assert np.abs(stats.grad - g_fd).max() <= 1e-5 * max(1.0, np.abs(g_fd).max())
        h_fd = fd_hessian(phi_of, xi)
        ito_fd = 0.5 * float(np.vdot(h_fd, sigma))
        assert abs(stats.ito - ito_fd) <= 1e-3 * max(1.0, abs(ito_fd))


def test_row_with_zero_sigma_and_kappa_is_deterministic_cbf():
    cb = CompositeBarrier((circle_clearance([0.0, 0.0], 1.0, [0, 1], 2),), beta=5.0)
    xi = np.array([2.0, 1.0])
    f = np.array([0.4, -0.2])
    g = np.eye(2)
    stats = composite_stats(cb, xi, f, g, np.zeros((2, 2)))
    a, b = constraint_row(stats, alpha=1.5, kappa=0.0)
    # classical CBF row: L_g h u >= -L_f h - alpha h, no stochastic terms
    h, grad, _ = cb.members[0].eval(xi)
    assert np.array_equal(a, grad @ g)
    assert b == -(grad @ f) - 1.5 * h


def test_sigma_h_positive_homogeneity():
    cb, f, g, sigma = _planar_setup()
    xi = np.array([1.7, -0.4])
    s1 = composite_stats(cb, xi, f, g, sigma)
    s2 = composite_stats(cb, xi, f, g, 4.0 * sigma)
    assert s2.sigma_h == pytest.approx(2.0 * s1.sigma_h, rel=1e-12)


def test_constraint_row_examples():
    from cbflab.barriers import BarrierStats
    stats = BarrierStats(h_c=1.0, grad=np.ones(1), rho=np.ones(1), drift=0.0,
                         input_row=np.array([1.0]), ito=0.0, sigma_h=0.5)
    a, b = constraint_row(stats, alpha=1.0, kappa=2.0)
    assert np.allclose(a, [1.0])
    assert b == pytest.approx(0.0)  # -1 + 1
    _, b0 = constraint_row(stats, alpha=1.0, kappa=0.0)
    assert b0 == pytest.approx(-1.0)
    boundary = BarrierStats(h_c=0.0, grad=np.ones(1), rho=np.ones(1), drift=0.0,
                            input_row=np.array([1.0]), ito=0.0, sigma_h=0.5)
    _, bb = constraint_row(boundary, alpha=3.0, kappa=0.0)
    assert bb == pytest.approx(0.0)


def test_constraint_row_validates_params():
    from cbflab.barriers import BarrierStats
    stats = BarrierStats(1.0, np.ones(1), np.ones(1), 0.0, np.ones(1), 0.0, 0.0)
    with pytest.raises(ValueError):
        constraint_row(stats, alpha=0.0, kappa=1.0)
    with pytest.raises(ValueError):
        constraint_row(stats, alpha=1.0, kappa=-0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0),
       st.floats(0.0, 3.0), st.floats(-2.0, 4.0))
def test_row_monotonicity(alpha, k1, dk, sigma_h, h_c):
    """b non-decreasing in kappa, non-increasing in h_c and alpha (h_c >= 0)."""
    from cbflab.barriers import BarrierStats

    def mk(h, s):
        return BarrierStats(h, np.ones(1), np.ones(1), drift=0.2, input_row=np.ones(1),
                            ito=0.1, sigma_h=s)

    _, b1 = constraint_row(mk(h_c, sigma_h), alpha, k1)
    _, b2 = constraint_row(mk(h_c, sigma_h), alpha, k1 + dk)
    assert b2 >= b1 - 1e-12
    if h_c >= 0:
        _, b3 = constraint_row(mk(h_c + 1.0, sigma_h), alpha, k1)
        assert b3 <= b1 + 1e-12
        _, b4 = constraint_row(mk(h_c, sigma_h), alpha + 1.0, k1)
        assert b4 <= b1 + 1e-12 if h_c > 0 else b4 == pytest.approx(b1)


def test_composite_requires_member_and_positive_beta():
    with pytest.raises(ValueError):
        CompositeBarrier((), 1.0)
    b = halfspace(0, 0.0, 1)
    with pytest.raises(ValueError):
        CompositeBarrier((b,), 0.0)
    with pytest.raises(ValueError):
        compose_lse([], 1.0)
