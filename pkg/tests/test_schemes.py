"""Scheme-level tests: solver loops, controller stepping, counters."""
import numpy as np
import numpy.testing as npt
import pytest

from nmpckit import integrator as intg, schemes
from nmpckit.cmon import CMoNConfig
from nmpckit.errors import DivergenceError
from nmpckit.schemes import (OCProblem, SchemeConfig, cmon_sqp,
                             controller_step, gn_sqp_exact,
                             initialize_controller)
from nmpckit.transcription import Multipliers, References, Trajectory

N = 10
CFG = intg.IntegratorConfig(dt=0.05, substeps=4)


def _pendulum_ocp(pendulum, x_hat=(0.0, 0.4, 0.0, 0.0)):
    refs = References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    return OCProblem(model=pendulum, integ=CFG,
                     x_hat=np.asarray(x_hat, dtype=float), refs=refs)


def _steady_guess(pendulum, x_hat):
    xs = np.repeat(np.asarray(x_hat, dtype=float)[None], N + 1, axis=0)
    us = np.zeros((N, 1))
    return Trajectory(xs, us), Multipliers.zeros(N, 4, pendulum.n_r)


def test_exact_sqp_converges(pendulum):
    ocp = _pendulum_ocp(pendulum)
    traj0, mult0 = _steady_guess(pendulum, ocp.x_hat)
    res = gn_sqp_exact(ocp, traj0, mult0, tol=1e-8, qp_tol=1e-10)
    assert res.converged
    assert res.kkt_trace[-1] <= 1e-8
    assert res.iterations < 50
    # every iteration refreshes every block
    assert res.sens_blocks == res.iterations * N + N
    assert all(c == N for c in res.refresh_counts)


def test_zero_tolerance_partial_update_matches_exact(pendulum):
    ocp = _pendulum_ocp(pendulum)
    traj0, mult0 = _steady_guess(pendulum, ocp.x_hat)
    exact = gn_sqp_exact(ocp, traj0, mult0, tol=1e-8, qp_tol=1e-8)
    zero = cmon_sqp(ocp, traj0.copy(), mult0.copy(),
                    cmon=CMoNConfig(eps_abs=0.0, eps_rel=0.0),
                    tol=1e-8, qp_tol=1e-8)
    assert zero.converged
    assert zero.iterations == exact.iterations
    npt.assert_array_equal(zero.traj.xs, exact.traj.xs)
    npt.assert_array_equal(zero.traj.us, exact.traj.us)
    npt.assert_array_equal(zero.mult.lam, exact.mult.lam)
    npt.assert_array_equal(zero.kkt_trace, exact.kkt_trace)


def test_partial_update_solver_saves_evaluations(pendulum):
    ocp = _pendulum_ocp(pendulum, x_hat=(0.0, 0.9, 0.0, 0.0))
    traj0, mult0 = _steady_guess(pendulum, ocp.x_hat)
    exact = gn_sqp_exact(ocp, traj0, mult0, tol=1e-6, qp_tol=1e-8)
    part = cmon_sqp(ocp, traj0.copy(), mult0.copy(),
                    cmon=CMoNConfig(eps_abs=0.1, eps_rel=0.1),
                    tol=1e-6, qp_tol=1e-8)
    assert exact.converged and part.converged
    assert part.sens_blocks < exact.sens_blocks


def test_divergence_guard_raises_with_trace(pendulum, monkeypatch):
    ocp = _pendulum_ocp(pendulum)
    traj0, mult0 = _steady_guess(pendulum, ocp.x_hat)
    bogus = iter(float(v) for v in range(1, 100))
    monkeypatch.setattr(schemes, "_sqp_residual",
                        lambda qp: next(bogus))
    with pytest.raises(DivergenceError) as exc:
        cmon_sqp(ocp, traj0, mult0, tol=1e-12, max_iter=50)
    assert exc.value.log is not None
    assert len(exc.value.log) >= 6


def test_initialize_controller_auto_constants(pendulum):
    cfg = SchemeConfig(scheme="cmon")
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    traj0, mult0 = _steady_guess(pendulum, x_hat)
    refs0 = References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    state = initialize_controller(pendulum, CFG, cfg, traj0, mult0,
                                  refs0=refs0, x_hat0=x_hat)
    n_w = N * 5 + 4
    assert state.n_dim == n_w + 4 * N + (N + 1) * 4
    assert np.isfinite(state.rho0) and state.rho0 > 0
    assert state.gamma0 >= 1.0
    assert state.e_bar >= 0.1 * np.sqrt(state.n_dim)
    assert state.store.fresh_mask().all()


def test_rti_step_counters(pendulum):
    cfg = SchemeConfig(scheme="rti")
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    traj0, mult0 = _steady_guess(pendulum, x_hat)
    state = initialize_controller(pendulum, CFG, cfg, traj0, mult0)
    for i in range(3):
        d = controller_step(state, x_hat, References(np.zeros((N + 1, 4)),
                                                     np.zeros((N, 1))))
        assert d.refreshed == N
        assert d.refresh_fraction == 1.0
        assert d.sens_blocks == N
        assert d.adjoint_seeds == 0
        assert d.instant == i


def test_adj_step_counters(pendulum):
    cfg = SchemeConfig(scheme="adj")
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    traj0, mult0 = _steady_guess(pendulum, x_hat)
    state = initialize_controller(pendulum, CFG, cfg, traj0, mult0)
    seen = []
    for _ in range(3):
        d = controller_step(state, x_hat + [0.01, 0.0, 0.0, 0.0],
                            References(np.zeros((N + 1, 4)),
                                       np.zeros((N, 1))))
        assert d.refreshed == 0
        seen.append(d.adjoint_seeds)
    # blocks stay frozen at the preparation point; once the iterate moves
    # every gradient row needs an adjoint sweep
    assert seen[0] == 0
    assert seen[1] == N and seen[2] == N


def test_ml_interval_two_alternates(pendulum):
    cfg = SchemeConfig(scheme="ml", ml_interval=2)
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    traj0, mult0 = _steady_guess(pendulum, x_hat)
    state = initialize_controller(pendulum, CFG, cfg, traj0, mult0)
    refs = References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    counts = [controller_step(state, x_hat, refs).refreshed
              for _ in range(4)]
    assert counts == [N, 0, N, 0]


def test_ml_interval_one_matches_rti_stepwise(pendulum):
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    refs = References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    states = {}
    for kind, interval in (("rti", 1), ("ml", 1)):
        cfg = SchemeConfig(scheme=kind, ml_interval=interval)
        traj0, mult0 = _steady_guess(pendulum, x_hat)
        states[kind] = initialize_controller(pendulum, CFG, cfg, traj0,
                                             mult0)
    for _ in range(5):
        d_rti = controller_step(states["rti"], x_hat, refs)
        d_ml = controller_step(states["ml"], x_hat, refs)
        assert d_rti.dy_norm == d_ml.dy_norm
    npt.assert_array_equal(states["rti"].traj.xs, states["ml"].traj.xs)
    npt.assert_array_equal(states["rti"].mult.lam, states["ml"].mult.lam)


def test_cmon_step_quiets_down(pendulum):
    # constant measurement and reference: the partial scheme stops
    # refreshing once the iterate settles
    cfg = SchemeConfig(scheme="cmon")
    x_hat = np.array([0.0, 0.3, 0.0, 0.0])
    traj0, mult0 = _steady_guess(pendulum, x_hat)
    refs0 = References(np.zeros((N + 1, 4)), np.zeros((N, 1)))
    state = initialize_controller(pendulum, CFG, cfg, traj0, mult0,
                                  refs0=refs0, x_hat0=x_hat)
    fracs = [controller_step(state, x_hat, refs0).refresh_fraction
             for _ in range(12)]
    assert fracs[-1] == 0.0
    assert sum(fracs) < 12.0


def test_linear_plant_schemes_coincide(rng):
    # on a linear plant every scheme's kept sensitivities stay exact, so
    # all four controllers produce identical closed-loop trajectories
    from nmpckit.models import ModelSpec

    A = rng.uniform(-0.6, 0.6, (3, 3))
    B = rng.uniform(-0.5, 0.5, (3, 2))

    def rhs(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ A.T + u @ B.T

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
        return (np.broadcast_to(A, batch + A.shape).copy(),
                np.broadcast_to(B, batch + B.shape).copy())

    model = ModelSpec(n_x=3, n_u=2, rhs=rhs, rhs_jacobians=jac,
                      stage_weights=np.ones(5), terminal_weights=np.ones(3),
                      name="linear")
    horizon = 8
    integ = intg.IntegratorConfig(dt=0.1, substeps=2)
    refs = References(np.zeros((horizon + 1, 3)), np.zeros((horizon, 2)))
    x0 = np.array([0.8, -0.5, 0.3])
    logs = {}
    for kind, m in (("rti", 1), ("ml", 2), ("adj", 1), ("cmon", 1)):
        cfg = SchemeConfig(scheme=kind, ml_interval=m, qp_tol=1e-10)
        traj0 = Trajectory(np.tile(x0, (horizon + 1, 1)),
                           np.zeros((horizon, 2)))
        state = initialize_controller(model, integ, cfg, traj0,
                                      Multipliers.zeros(horizon, 3, 0),
                                      refs0=refs, x_hat0=x0)
        x = x0.copy()
        xs_log = [x.copy()]
        for _ in range(10):
            controller_step(state, x, refs)
            u0 = state.traj.us[0].copy()
            x = intg.integrate_batch(model, x[None], u0[None], integ)[0]
            xs_log.append(x.copy())
        logs[kind] = np.array(xs_log)
    for kind in ("ml", "adj", "cmon"):
        npt.assert_allclose(logs[kind], logs["rti"], rtol=0.0, atol=1e-12)
