import numpy as np
import pytest

from cbflab.kkt import (DegenerateActiveSetError, finite_diff, kkt_differentiate,
                        rows_sensitivity)
from cbflab.plants import make_rng
from cbflab.qp import build_qp, solve_qp


def random_instance(rng, n=None, m=None, reg_eps=1e-4):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 4))
    r = 0.5 + rng.random(n) * 2
    u_ref = rng.standard_normal(n) * 1.5
    a = rng.standard_normal((m, n))
    b = a @ u_ref + rng.standard_normal(m) * 0.5
    return build_qp(u_ref, None, r, None, list(zip(a, b)), reg_eps=reg_eps)


def is_strictly_complementary(qp, sol, tol=1e-7):
    resid = np.abs(qp.rows_a @ sol.u_star - qp.rows_b)
    weak = (sol.lam <= tol) & (resid <= tol)
    return not weak.any()


def test_no_active_rows_identity():
    qp = build_qp([1.0, -2.0], None, [1.0, 3.0], None,
                  [(np.array([1.0, 0.0]), -10.0)], reg_eps=0.0)
    sol = solve_qp(qp)
    sens = kkt_differentiate(qp, sol, [("u_ref", 0), ("u_ref", 1)])
    assert np.allclose(sens.du_dtheta, np.eye(2), atol=1e-12)
    assert not sens.dlam_dtheta.any()


def test_scalar_equality_sensitivity():
    # row 2u >= 4 active: u* = 2, du*/db = 1/A = 0.5
    qp = build_qp([0.0], None, [1.0], None, [(np.array([2.0]), 4.0)], reg_eps=0.0)
    sol = solve_qp(qp)
    assert sol.u_star[0] == pytest.approx(2.0)
    sens = kkt_differentiate(qp, sol, [("b", 0)])
    assert sens.du_dtheta[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_kappa_chain_rule_matches_b_column():
    # du*/dkappa = sigma_h * du*/db when the row is active, 0 when inactive
    qp = build_qp([-3.0], None, [1.0], None, [(np.array([1.0]), 0.0)], reg_eps=0.0)
    sol = solve_qp(qp)
    sigma_h = 0.5
    sens = kkt_differentiate(qp, sol, [("b", 0), ("kappa",)],
                             db_dkappa=np.array([sigma_h]))
    assert sens.du_dtheta[0, 1] == pytest.approx(sigma_h * sens.du_dtheta[0, 0])
    qp2 = build_qp([5.0], None, [1.0], None, [(np.array([1.0]), 0.0)], reg_eps=0.0)
    sol2 = solve_qp(qp2)
    sens2 = kkt_differentiate(qp2, sol2, [("kappa",)], db_dkappa=np.array([sigma_h]))
    assert sens2.du_dtheta[0, 0] == 0.0


def test_finite_diff_exact_on_linear():
    mat = np.array([[1.0, 2.0], [3.0, -4.0]])
    jac = finite_diff(lambda th: mat @ th, np.array([0.3, -0.7]), h=1e-6)
    assert np.allclose(jac, mat, atol=1e-9)


def test_finite_diff_second_order_on_quadratic():
    f = lambda th: np.array([th[0] ** 3])
    x0 = np.array([1.0])
    errs = [abs(finite_diff(f, x0, h=h)[0, 0] - 3.0) for h in (1e-3, 1e-4)]
    # central differences: error O(h^2)
    assert errs[1] <= errs[0] / 50


def test_finite_diff_validates_h():
    with pytest.raises(ValueError):
        finite_diff(lambda th: th, np.zeros(1), h=0.0)


def test_gradients_match_fd_on_100_instances():
    """Every du/dtheta entry matches central differences within
    max(1e-5, 1e-4 |value|) on strictly complementary random QPs."""
    rng = make_rng(314, 0)
    checked = 0
    while checked < 100:
        qp = random_instance(rng)
        sol = solve_qp(qp)
        if sol.status != "optimal" or not is_strictly_complementary(qp, sol):
            continue
        m, n = qp.rows_a.shape
        spec = ([("u_ref", j) for j in range(n)] + [("b", i) for i in range(m)]
                + [("A", i, j) for i in range(m) for j in range(n)])
        try:
            sens = kkt_differentiate(qp, sol, spec)
        except DegenerateActiveSetError:
            continue

        def u_of(theta):
            u_ref = theta[:n]
            b = theta[n:n + m]
            a = theta[n + m:].reshape(m, n)
            q2 = build_qp(u_ref, None, np.diagonal(qp.H), None, list(zip(a, b)),
                          reg_eps=qp.reg_eps)
            return solve_qp(q2).u_star

        theta0 = np.concatenate([qp.u_ref, qp.rows_b, qp.rows_a.ravel()])
        fd = finite_diff(u_of, theta0, h=1e-6)
        err = np.abs(sens.du_dtheta - fd)
        tol = np.maximum(1e-5, 1e-4 * np.abs(fd))
        assert (err <= tol).all(), err.max()
        checked += 1


def test_inactive_rows_zero_sensitivity():
    rng = make_rng(99, 0)
    for _ in range(30):
        qp = random_instance(rng)
        sol = solve_qp(qp)
        if sol.status != "optimal":
            continue
        m = qp.n_rows
        sens = kkt_differentiate(qp, sol, [("b", i) for i in range(m)])
        resid = qp.rows_a @ sol.u_star - qp.rows_b
        for i in range(m):
            if resid[i] > 1e-6:  # inactive
                assert not sens.du_dtheta[:, i].any()
                assert not sens.dlam_dtheta[i].any()


def test_u_ref_sensitivity_in_active_tangent_space():
    rng = make_rng(41, 0)
    for _ in range(30):
        qp = random_instance(rng)
        sol = solve_qp(qp)
        if sol.status != "optimal" or not is_strictly_complementary(qp, sol):
            continue
        n = qp.n_u
        try:
            sens = kkt_differentiate(qp, sol, [("u_ref", j) for j in range(n)])
        except DegenerateActiveSetError:
            continue
        cmat, _ = qp.combined()
        act = [i for i in sol.active_set]
        if act:
            proj = cmat[act] @ sens.du_dtheta
            assert np.abs(proj).max() <= 1e-10


def test_bordered_system_residual_and_transpose():
    rng = make_rng(12, 0)
    checked = 0
    while checked < 20:
        qp = random_instance(rng, n=3, m=2)
        sol = solve_qp(qp)
        if sol.status != "optimal" or not is_strictly_complementary(qp, sol):
            continue
        try:
            sens = kkt_differentiate(qp, sol, [("b", 0), ("b", 1)])
        except DegenerateActiveSetError:
            continue
        cmat, _ = qp.combined()
        act = list(sol.active_set)
        k = len(act)
        n = qp.n_u
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = qp.H_eff
        kkt[:n, n:] = -cmat[act].T
        kkt[n:, :n] = cmat[act]
        meta = qp.combined_meta()
        for col, i_row in enumerate((0, 1)):
            rhs = np.zeros(n + k)
            for j, idx in enumerate(act):
                if meta[idx] == ("row", i_row):
                    rhs[n + j] = 1.0
            x = np.linalg.solve(kkt, rhs)
            # the exported du column solves the same system
            assert np.allclose(x[:n], sens.du_dtheta[:, col], atol=1e-10)
            assert np.abs(kkt @ x - rhs).max() <= 1e-10
            # same operator serves the transposed (adjoint) solve
            y = np.linalg.solve(kkt.T, rhs)
            assert np.abs(kkt.T @ y - rhs).max() <= 1e-10
        checked += 1


def test_degenerate_active_set_raises():
    # duplicated active rows are linearly dependent
    a = np.array([1.0, 0.0])
    qp = build_qp([-1.0, 0.0], None, [1.0, 1.0], None, [(a, 0.0), (a.copy(), 0.0)],
                  reg_eps=0.0)
    sol = solve_qp(qp)
    dup_active = [i for i in sol.active_set]
    sens_or_err = None
    try:
        sens_or_err = kkt_differentiate(qp, sol, [("b", 0), ("b", 1)], weak_tol=-1.0)
    except DegenerateActiveSetError:
        sens_or_err = "raised"
    # either only one copy ended active (fine) or degeneracy was flagged
    assert sens_or_err == "raised" or len(dup_active) <= 1


def test_slack_active_sensitivity_undefined():
    qp = build_qp([0.0], None, [1.0], None,
                  [(np.array([1.0]), 2.0), (np.array([-1.0]), 0.0)],
                  row_weights=[np.inf, 1e4], reg_eps=0.0)
    sol = solve_qp(qp)
    assert sol.status == "slack_active"
    with pytest.raises(DegenerateActiveSetError):
        kkt_differentiate(qp, sol, [("b", 0)])


def test_rows_sensitivity_agrees_with_full_path():
    rng = make_rng(7, 3)
    for _ in range(40):
        qp = random_instance(rng)
        sol = solve_qp(qp)
        if sol.status != "optimal" or not is_strictly_complementary(qp, sol):
            continue
        du_db = rows_sensitivity(qp, sol)
        if du_db is None:
            continue
        sens = kkt_differentiate(qp, sol, [("b", i) for i in range(qp.n_rows)])
        assert np.allclose(du_db, sens.du_dtheta, atol=1e-9)
