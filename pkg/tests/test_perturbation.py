"""Subproblem perturbation analysis: KKT matrices, constants, DtO oracle."""
import dataclasses

import numpy as np
import numpy.testing as npt
import pytest
import scipy.linalg

from nmpckit import integrator as intg
from nmpckit import perturbation as pert
from nmpckit import qp_solver, transcription as trc
from nmpckit.cmon import SensitivityStore
from nmpckit.errors import NearSingularMatrixError


def _pendulum_qp_sol(pendulum, rng, N=8, tol=1e-10):
    cfg = intg.IntegratorConfig(dt=0.05, substeps=4)
    xs = np.empty((N + 1, 4))
    xs[0] = [0.0, 0.4, 0.0, 0.0]
    us = rng.uniform(-2.0, 2.0, (N, 1))
    for k in range(N):
        xs[k + 1] = intg.integrate(pendulum, xs[k], us[k], cfg)
    traj = trc.Trajectory(xs, us)
    mult = trc.Multipliers.zeros(N, 4, pendulum.n_r)
    refs = trc.References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    store = SensitivityStore.empty(N, 4, 1)
    store.refresh(pendulum, traj, cfg)
    x_hat = xs[0] + rng.uniform(-0.01, 0.01, 4)
    qp = trc.build_qp(traj, mult, x_hat, store, pendulum, cfg, refs)
    return qp, qp_solver.solve(qp, tol=tol)


def test_perturbation_matrix_action_identity(pendulum, rng):
    """N(p) applied to the stacked blocks reproduces the algebraic
    expression (-P^T dlam, 0, -P dw) entry for entry."""
    qp, sol = _pendulum_qp_sol(pendulum, rng)
    Nmat = pert.build_n(qp, sol)
    P = rng.standard_normal((qp.N, qp.n_x, qp.n_wk))
    p = pert.stack_perturbation(P)

    dw_nodes = sol.dw[:qp.N * qp.n_wk].reshape(qp.N, qp.n_wk)
    dlam = sol.dlam.reshape(qp.N + 1, qp.n_x)
    expect = np.zeros(qp.n_w + qp.n_in + qp.n_eq)
    for k in range(qp.N):
        rows = slice(k * qp.n_wk, (k + 1) * qp.n_wk)
        expect[rows] = -P[k].T @ dlam[k + 1]
        eqrows = slice(qp.n_w + qp.n_in + (k + 1) * qp.n_x,
                       qp.n_w + qp.n_in + (k + 2) * qp.n_x)
        expect[eqrows] = -P[k] @ dw_nodes[k]
    npt.assert_allclose(Nmat @ p, expect, atol=1e-12)


def test_first_order_prediction_slope(pendulum, rng):
    """Residual of the first-order solution-change prediction decays with
    order two in the perturbation size (active set held fixed)."""
    qp, sol = _pendulum_qp_sol(pendulum, rng, tol=1e-12)
    M = pert.build_m(qp, sol)
    Nmat = pert.build_n(qp, sol)
    P0 = rng.standard_normal((qp.N, qp.n_x, qp.n_wk))
    P0 /= np.abs(P0).max()
    p0 = pert.stack_perturbation(P0)

    scales, resids = [], []
    for s in np.logspace(-4.0, -2.0, 6):
        qp_s = dataclasses.replace(
            qp, jacobian_blocks=qp.jacobian_blocks + s * P0)
        sol_s = qp_solver.solve(qp_s, tol=1e-12)
        if not np.array_equal(sol_s.active_set, sol.active_set):
            continue
        predicted = np.linalg.solve(M, Nmat @ (s * p0))
        resid = np.linalg.norm(sol_s.stacked() - sol.stacked() - predicted)
        scales.append(s)
        resids.append(resid)
    assert len(scales) >= 4
    slope = np.polyfit(np.log(scales), np.log(resids), 1)[0]
    assert slope >= 1.9


def test_conditioning_constants_definition(rng):
    M = rng.standard_normal((12, 12)) + 3.0 * np.eye(12)
    rho, gamma = pert.conditioning_constants(M)
    sigma = scipy.linalg.svdvals(M)
    assert rho == pytest.approx(1.0 / sigma[-1], rel=1e-12)
    assert gamma == pytest.approx(np.std(1.0 / sigma) + 1.0, rel=1e-12)


def test_conditioning_constants_reject_singular():
    M = np.eye(5)
    M[3, 3] = 0.0
    with pytest.raises(NearSingularMatrixError):
        pert.conditioning_constants(M)


def test_singular_values_descending(rng):
    M = rng.standard_normal((9, 9))
    sigma = pert.singular_values(M)
    assert np.all(np.diff(sigma) <= 0)
    npt.assert_allclose(sigma, scipy.linalg.svdvals(M), atol=1e-12)


def test_kkt_matrix_blocks(pendulum, rng):
    qp, sol = _pendulum_qp_sol(pendulum, rng)
    M = pert.build_m(qp, sol)
    n = qp.n_w + qp.n_in + qp.n_eq
    assert M.shape == (n, n)
    A = trc.dense_equality_jacobian(qp)
    npt.assert_array_equal(M[qp.n_w + qp.n_in:, :qp.n_w], A)
    npt.assert_array_equal(M[:qp.n_w, qp.n_w + qp.n_in:], A.T)
    # no active inequality here: complementarity rows are diagonal in the
    # (negated) constraint values
    C = trc.dense_inequality_jacobian(qp)
    npt.assert_array_equal(M[:qp.n_w, qp.n_w:qp.n_w + qp.n_in], C.T)


def test_measure_dto_zero_for_exact_blocks(pendulum, rng):
    qp, sol = _pendulum_qp_sol(pendulum, rng)
    rec = pert.measure_dto(qp, sol, qp.jacobian_blocks, e_bar=1.0, tol=1e-10)
    assert rec.e <= 1e-12
    assert rec.active_match
    assert rec.e_bar == 1.0
    assert rec.dy_norm == pytest.approx(np.linalg.norm(sol.stacked()))


def test_measure_dto_detects_stale_blocks(pendulum, rng):
    qp, sol = _pendulum_qp_sol(pendulum, rng)
    wrong = qp.jacobian_blocks * 1.05
    qp_stale = dataclasses.replace(qp, jacobian_blocks=wrong)
    sol_stale = qp_solver.solve(qp_stale, tol=1e-10)
    rec = pert.measure_dto(qp_stale, sol_stale, qp.jacobian_blocks,
                           e_bar=1.0, tol=1e-10)
    assert rec.e > 1e-6


def test_conditioning_bound_on_solution_distance(pendulum, rng):
    # the exact solution moves by at most rho * ||N(p) p|| to first order,
    # and the distance scales linearly in the perturbation size
    qp, sol = _pendulum_qp_sol(pendulum, rng)
    M = pert.build_m(qp, sol)
    Nmat = pert.build_n(qp, sol)
    rho, _ = pert.conditioning_constants(M)
    P = rng.standard_normal(qp.jacobian_blocks.shape)
    P /= np.abs(P).max()
    p = pert.stack_perturbation(P)
    ratios = []
    for s in (1e-4, 1e-3, 1e-2):
        qp_s = dataclasses.replace(
            qp, jacobian_blocks=qp.jacobian_blocks + s * P)
        sol_s = qp_solver.solve(qp_s, tol=1e-12)
        if not np.array_equal(sol_s.active_set, sol.active_set):
            continue
        e = np.linalg.norm(sol_s.stacked() - sol.stacked())
        assert e <= rho * np.linalg.norm(Nmat @ (s * p))
        ratios.append(e / s)
    assert len(ratios) >= 2
    assert max(ratios) <= 2.0 * min(ratios)
