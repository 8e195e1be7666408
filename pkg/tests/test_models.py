"""Plant model tests: frozen dynamics values, Jacobians, constraints."""
import numpy as np
import numpy.testing as npt
import pytest

from nmpckit import models
from nmpckit.errors import ModelEvaluationError, SingularGeometryError

# cart-pendulum accelerations derived independently from the Lagrangian
# of the cart/bob system (bob at p - l*sin(theta), height l*cos(theta)),
# evaluated symbolically and frozen here.
PEND_POINTS = [
    # (state, force, pddot, thetaddot)
    ((0.3, 0.5, -0.4, 1.2), 3.5, 3.770839387433823, 10.015484279760662),
    ((0.3, -1.1, 0.9, -3.0), 20.0, 18.755449211792786, -0.2941814801738371),
]


def test_pendulum_rhs_frozen_values(pendulum):
    for state, force, pdd, tdd in PEND_POINTS:
        x = np.array(state)
        out = pendulum.rhs(x, np.array([force]))
        npt.assert_allclose(out, [x[2], x[3], pdd, tdd], rtol=0, atol=1e-12)


def test_pendulum_upright_rest_is_equilibrium(pendulum):
    out = pendulum.rhs(np.zeros(4), np.zeros(1))
    npt.assert_array_equal(out, np.zeros(4))


def test_pendulum_hanging_rest_is_equilibrium(pendulum):
    out = pendulum.rhs(np.array([0.0, np.pi, 0.0, 0.0]), np.zeros(1))
    npt.assert_allclose(out, np.zeros(4), atol=1e-14)


def _fd_jacobians(rhs, x, u, h=1e-6):
    n_x, n_u = x.size, u.size
    fx = np.empty((n_x, n_x))
    fu = np.empty((n_x, n_u))
    for j in range(n_x):
        e = np.zeros(n_x)
        e[j] = h
        fx[:, j] = (rhs(x + e, u) - rhs(x - e, u)) / (2 * h)
    for j in range(n_u):
        e = np.zeros(n_u)
        e[j] = h
        fu[:, j] = (rhs(x, u + e) - rhs(x, u - e)) / (2 * h)
    return fx, fu


def test_pendulum_jacobians_match_fd(pendulum, rng):
    for _ in range(5):
        x = rng.uniform(-1.0, 1.0, 4)
        u = rng.uniform(-5.0, 5.0, 1)
        fx, fu = pendulum.rhs_jacobians(x, u)
        fx_fd, fu_fd = _fd_jacobians(pendulum.rhs, x, u)
        npt.assert_allclose(fx, fx_fd, rtol=1e-6, atol=1e-6)
        npt.assert_allclose(fu, fu_fd, rtol=1e-6, atol=1e-6)


def test_pendulum_rhs_broadcasts(pendulum, rng):
    xs = rng.uniform(-1.0, 1.0, (7, 4))
    us = rng.uniform(-5.0, 5.0, (7, 1))
    batch = pendulum.rhs(xs, us)
    rows = np.stack([pendulum.rhs(xs[i], us[i]) for i in range(7)])
    npt.assert_array_equal(batch, rows)
    fx, fu = pendulum.rhs_jacobians(xs, us)
    assert fx.shape == (7, 4, 4) and fu.shape == (7, 4, 1)
    fx0, fu0 = pendulum.rhs_jacobians(xs[0], us[0])
    npt.assert_array_equal(fx[0], fx0)
    npt.assert_array_equal(fu[0], fu0)


def test_pendulum_path_constraint_rows(pendulum):
    # box rows |p| <= 1, |F| <= 20 in the r <= 0 convention
    r = pendulum.path_constraint(np.array([0.4, 0.0, 0.0, 0.0]),
                                 np.array([-3.0]))
    assert r.shape == (pendulum.n_r,)
    assert np.all(r < 0)
    r_hit = pendulum.path_constraint(np.array([1.0, 0.0, 0.0, 0.0]),
                                     np.array([20.0]))
    assert np.isclose(r_hit.max(), 0.0)
    # constraint jacobian against finite differences
    x = np.array([0.2, 0.1, -0.3, 0.5])
    u = np.array([4.0])
    J = pendulum.path_constraint_jacobian(x, u)
    h = 1e-7
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        hi = pendulum.path_constraint(x + e[:4], u + e[4:])
        lo = pendulum.path_constraint(x - e[:4], u - e[4:])
        npt.assert_allclose(J[:, j], (hi - lo) / (2 * h), atol=1e-6)


def test_pendulum_rejects_nonfinite(pendulum):
    with pytest.raises(ModelEvaluationError):
        pendulum.rhs(np.array([0.0, np.nan, 0.0, 0.0]), np.zeros(1))


# ---------------------------------------------------------------------------
# chain


def _chain_rhs_reference(x, u, par):
    """Plain per-spring reimplementation of the chain dynamics."""
    n = par.n
    pts = [np.asarray(par.anchor, dtype=float)]
    for i in range(n):
        pts.append(np.asarray(x[3 * i:3 * i + 3], dtype=float))
    forces = []
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        r = np.linalg.norm(d)
        mag = par.D * (1.0 - par.L / r) + par.D1 * (r - par.L) ** 3 / r
        forces.append(mag * d)
    out = np.empty(par.n_x)
    out[:3 * (n - 1)] = x[3 * n:]
    out[3 * (n - 1):3 * n] = u
    for i in range(1, n):
        acc = (forces[i] - forces[i - 1]) / par.m - par.g
        out[3 * n + 3 * (i - 1):3 * n + 3 * i] = acc
    return out


def test_chain_rhs_matches_reference(chain, rng):
    par = chain.meta["params"]
    x_ss = models.chain_steady_state(par, [1.0, 0.0, 0.0])
    for _ in range(4):
        x = x_ss + rng.uniform(-0.2, 0.2, par.n_x)
        u = rng.uniform(-1.0, 1.0, 3)
        npt.assert_allclose(chain.rhs(x, u), _chain_rhs_reference(x, u, par),
                            rtol=1e-12, atol=1e-12)


def test_chain_jacobians_match_fd(chain, rng):
    par = chain.meta["params"]
    x_ss = models.chain_steady_state(par, [1.0, 0.0, 0.0])
    x = x_ss + rng.uniform(-0.1, 0.1, par.n_x)
    u = rng.uniform(-1.0, 1.0, 3)
    fx, fu = chain.rhs_jacobians(x, u)
    fx_fd, fu_fd = _fd_jacobians(chain.rhs, x, u)
    npt.assert_allclose(fx, fx_fd, rtol=2e-5, atol=2e-6)
    npt.assert_allclose(fu, fu_fd, rtol=1e-8, atol=1e-9)


def test_chain_single_spring_by_hand():
    # n=2: one free mass between the anchor and the driven end point
    par = models.ChainParams(n=2)
    x = np.zeros(par.n_x)
    x[0:3] = [0.5, 0.0, 0.0]      # mass
    x[3:6] = [1.0, 0.0, 0.0]      # end point
    u = np.array([0.1, -0.2, 0.0])

    def mag(r):
        return par.D * (1 - par.L / r) + par.D1 * (r - par.L) ** 3 / r

    f1 = mag(0.5) * np.array([0.5, 0.0, 0.0])
    f2 = mag(0.5) * np.array([0.5, 0.0, 0.0])
    acc = (f2 - f1) / par.m - par.g
    out = models.chain_rhs(x, u, par)
    npt.assert_array_equal(out[0:3], np.zeros(3))
    npt.assert_array_equal(out[3:6], u)
    npt.assert_allclose(out[6:9], acc, rtol=1e-14)
    # spring force magnitude at this elongation, frozen from the law
    assert np.isclose(mag(0.5), 0.3409826, atol=1e-9)


def test_chain_rest_length_spring_is_slack():
    par = models.ChainParams(n=2)
    x = np.zeros(par.n_x)
    x[0:3] = [par.L, 0.0, 0.0]
    x[3:6] = [2 * par.L, 0.0, 0.0]
    out = models.chain_rhs(x, np.zeros(3), par)
    # both springs at rest length: acceleration is -g alone
    npt.assert_allclose(out[6:9], -par.g, rtol=0, atol=1e-15)


def test_chain_steady_state_balance(chain):
    par = chain.meta["params"]
    x_ss = models.chain_steady_state(par, [1.0, 0.0, 0.0])
    assert x_ss.shape == (par.n_x,)
    npt.assert_array_equal(x_ss[3 * par.n:], np.zeros(3 * (par.n - 1)))
    npt.assert_array_equal(x_ss[3 * (par.n - 1):3 * par.n], [1.0, 0.0, 0.0])
    out = chain.rhs(x_ss, np.zeros(3))
    assert np.abs(out).max() < 1e-8


def test_chain_coincident_points_raise():
    par = models.ChainParams(n=2)
    x = np.zeros(par.n_x)
    x[0:3] = [0.5, 0.0, 0.0]
    x[3:6] = [0.5, 0.0, 0.0]      # end point on top of the mass
    with pytest.raises(SingularGeometryError):
        models.chain_rhs(x, np.zeros(3), par)


def test_chain_control_constraint(chain):
    r = chain.path_constraint(np.zeros(chain.n_x), np.array([0.3, -1.0, 0.9]))
    assert r.shape == (6,)
    assert np.isclose(r.max(), 0.0)    # the -1 component sits on the bound
    assert np.all(r <= 1e-15)


def test_model_spec_validates_weights():
    with pytest.raises(ValueError):
        models.make_pendulum_model(stage_weights=[1.0, 1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        models.make_pendulum_model(
            stage_weights=[-1.0, 1.0, 1.0, 1.0, 1.0])


def test_pendulum_mass_matrix_never_degenerates(pendulum):
    # the shared denominator m2 + m1*sin(theta)^2 stays >= m2 at any angle
    par = pendulum.meta["params"]
    theta = np.linspace(-2 * np.pi, 2 * np.pi, 181)
    denom = par.m2 + par.m1 - par.m1 * np.cos(theta) ** 2
    assert denom.min() >= par.m2 - 1e-15
    xs = np.zeros((theta.size, 4))
    xs[:, 1] = theta
    xs[:, 2] = 2.0
    xs[:, 3] = -3.0
    out = pendulum.rhs(xs, np.full((theta.size, 1), 15.0))
    assert np.all(np.isfinite(out))


def test_chain_translation_equivariance(chain, rng):
    # moving the anchor and every mass by one common offset leaves the
    # spring geometry, and so the whole vector field, unchanged
    import dataclasses

    par = chain.meta["params"]
    shift = rng.uniform(-0.7, 0.7, 3)
    shifted = models.make_chain_model(
        dataclasses.replace(par, anchor=par.anchor + shift))
    x = models.chain_steady_state(par, [1.0, 0.0, 0.0])
    x = x + rng.uniform(-0.15, 0.15, par.n_x)
    u = rng.uniform(-1.0, 1.0, 3)
    x2 = x.copy()
    x2[:3 * par.n] += np.tile(shift, par.n)
    npt.assert_allclose(shifted.rhs(x2, u), chain.rhs(x, u),
                        rtol=1e-12, atol=1e-12)
