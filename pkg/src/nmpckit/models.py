"""Benchmark plant models: cart-pendulum and mass-spring chain.

Both models expose their dynamics as plain numpy callables that broadcast
over leading batch dimensions, together with hand-coded analytic Jacobians.
A :class:`ModelSpec` bundles the callables with constraint definitions and
diagonal cost weights so the rest of the toolkit never needs to know which
plant it is driving.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import root

from .errors import ModelEvaluationError, SingularGeometryError


@dataclass
class ModelSpec:
    """Bundle of model callables and problem data consumed by the controller.

    Parameters
    ----------
    n_x, n_u : int
        State and control dimensions.
    rhs : callable
        ``rhs(x, u) -> xdot``; broadcasts over leading dimensions.
    rhs_jacobians : callable
        ``rhs_jacobians(x, u) -> (f_x, f_u)`` analytic Jacobians, batched
        the same way.
    stage_weights : ndarray
        Diagonal nonnegative weights on the stacked ``(x, u)`` residual.
    terminal_weights : ndarray
        Diagonal nonnegative weights on the terminal state residual.
    path_constraint : callable or None
        ``r(x, u) -> (n_r,)`` with the convention ``r <= 0`` feasible.
    path_constraint_jacobian : callable or None
        ``(x, u) -> (n_r, n_x + n_u)`` rows of the constraint Jacobian.
    terminal_constraint, terminal_constraint_jacobian : callable or None
        Same contract for the terminal node, in the state only.
    """

    n_x: int
    n_u: int
    rhs: Callable
    rhs_jacobians: Callable
    stage_weights: np.ndarray
    terminal_weights: np.ndarray
    path_constraint: Optional[Callable] = None
    path_constraint_jacobian: Optional[Callable] = None
    n_r: int = 0
    terminal_constraint: Optional[Callable] = None
    terminal_constraint_jacobian: Optional[Callable] = None
    n_l: int = 0
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stage_weights = np.asarray(self.stage_weights, dtype=float)
        self.terminal_weights = np.asarray(self.terminal_weights, dtype=float)
        if self.stage_weights.shape != (self.n_x + self.n_u,):
            raise ValueError("stage_weights must have length n_x + n_u")
        if self.terminal_weights.shape != (self.n_x,):
            raise ValueError("terminal_weights must have length n_x")
        if np.any(self.stage_weights < 0) or np.any(self.terminal_weights < 0):
            raise ValueError("weights must be nonnegative")
        if not (np.any(self.stage_weights > 0) or np.any(self.terminal_weights > 0)):
            raise ValueError("at least one weight must be positive")


# ---------------------------------------------------------------------------
# cart-pendulum
# ---------------------------------------------------------------------------

@dataclass
class PendulumParams:
    """Cart-pendulum parameters; angle zero is the upright position."""

    m1: float = 0.1   # pendulum mass
    m2: float = 1.0   # cart mass
    l: float = 0.8    # rod length
    g: float = 9.81


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelEvaluationError("non-finite value in model input")


def pendulum_rhs(x, u, params: PendulumParams):
    """Continuous-time dynamics of the cart-pendulum.

    State is ``(p, theta, pdot, thetadot)``, control is the horizontal
    force on the cart. Broadcasts over leading dimensions of ``x``/``u``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    th = x[..., 1]
    pd = x[..., 2]
    td = x[..., 3]
    F = u[..., 0]
    m1, m2, l, g = params.m1, params.m2, params.l, params.g
    s, c = np.sin(th), np.cos(th)
    den = m2 + m1 - m1 * c * c
    pdd = (-m1 * l * s * td ** 2 + m1 * g * c * s + F) / den
    tdd = (F * c - m1 * l * c * s * td ** 2 + (m2 + m1) * g * s) / (l * den)
    out = np.empty(np.broadcast_shapes(x[..., 0].shape, F.shape) + (4,))
    out[..., 0] = pd
    out[..., 1] = td
    out[..., 2] = pdd
    out[..., 3] = tdd
    return out


def pendulum_jacobians(x, u, params: PendulumParams):
    """Analytic Jacobians ``(f_x, f_u)`` of :func:`pendulum_rhs`."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    th = x[..., 1]
    td = x[..., 3]
    F = u[..., 0]
    m1, m2, l, g = params.m1, params.m2, params.l, params.g
    s, c = np.sin(th), np.cos(th)
    s2, c2 = np.sin(2 * th), np.cos(2 * th)
    den = m2 + m1 - m1 * c * c
    dden = m1 * s2

    num_p = -m1 * l * s * td ** 2 + m1 * g * c * s + F
    dnum_p_dth = -m1 * l * c * td ** 2 + m1 * g * c2
    num_t = F * c - m1 * l * c * s * td ** 2 + (m2 + m1) * g * s
    dnum_t_dth = -F * s - m1 * l * c2 * td ** 2 + (m2 + m1) * g * c

    batch = np.broadcast_shapes(th.shape, F.shape)
    fx = np.zeros(batch + (4, 4))
    fu = np.zeros(batch + (4, 1))
    fx[..., 0, 2] = 1.0
    fx[..., 1, 3] = 1.0
    fx[..., 2, 1] = (dnum_p_dth * den - num_p * dden) / den ** 2
    fx[..., 2, 3] = -2.0 * m1 * l * s * td / den
    fx[..., 3, 1] = (dnum_t_dth * den - num_t * dden) / (l * den ** 2)
    fx[..., 3, 3] = -2.0 * m1 * l * c * s * td / (l * den)
    fu[..., 2, 0] = 1.0 / den
    fu[..., 3, 0] = c / (l * den)
    return fx, fu


def make_pendulum_model(params: Optional[PendulumParams] = None,
                        position_limit: float = 1.0,
                        force_limit: float = 20.0,
                        stage_weights=None,
                        terminal_weights=None) -> ModelSpec:
    """Assemble the pendulum :class:`ModelSpec` with box path constraints.

    The path constraint stacks ``|p| <= position_limit`` and
    ``|F| <= force_limit`` as four rows with the ``r <= 0`` convention.
    """
    params = params or PendulumParams()
    if stage_weights is None:
        stage_weights = np.array([20.0, 20.0, 0.2, 0.2, 0.02])
    if terminal_weights is None:
        terminal_weights = np.array([20.0, 20.0, 0.2, 0.2])

    jac_rows = np.zeros((4, 5))
    jac_rows[0, 0] = 1.0
    jac_rows[1, 0] = -1.0
    jac_rows[2, 4] = 1.0
    jac_rows[3, 4] = -1.0

    def constraint(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
        r = np.empty(batch + (4,))
        r[..., 0] = x[..., 0] - position_limit
        r[..., 1] = -x[..., 0] - position_limit
        r[..., 2] = u[..., 0] - force_limit
        r[..., 3] = -u[..., 0] - force_limit
        return r

    def constraint_jac(x, u):
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(np.asarray(x)[..., 0].shape,
                                    np.asarray(u)[..., 0].shape)
        return np.broadcast_to(jac_rows, batch + (4, 5)).copy()

    return ModelSpec(
        n_x=4, n_u=1,
        rhs=lambda x, u: pendulum_rhs(x, u, params),
        rhs_jacobians=lambda x, u: pendulum_jacobians(x, u, params),
        stage_weights=stage_weights,
        terminal_weights=terminal_weights,
        path_constraint=constraint,
        path_constraint_jacobian=constraint_jac,
        n_r=4,
        name="pendulum",
        meta={"params": params, "position_limit": position_limit,
              "force_limit": force_limit},
    )


# ---------------------------------------------------------------------------
# mass-spring chain
# ---------------------------------------------------------------------------

@dataclass
class ChainParams:
    """Chain of point masses on nonlinear springs, anchored at the origin.

    ``n`` counts the springs' endpoints past the anchor: ``n - 1`` free
    masses plus a kinematically driven end point whose velocity is the
    control. The state stacks the ``n`` positions (masses then end point)
    followed by the ``n - 1`` mass velocities.
    """

    n: int = 5
    m: float = 0.45
    D: float = 1.0
    D1: float = 0.1
    L: float = 0.33
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    @property
    def n_x(self) -> int:
        return 6 * (self.n - 1) + 3


def _chain_split(x, n):
    pos = x[..., :3 * n].reshape(x.shape[:-1] + (n, 3))
    vel = x[..., 3 * n:].reshape(x.shape[:-1] + (n - 1, 3))
    return pos, vel


def _spring_terms(d, params: ChainParams):
    # psi(r) scales the elongation direction; psip is its radial derivative
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < 1e-12):
        raise SingularGeometryError("adjacent chain points coincide")
    D, D1, L = params.D, params.D1, params.L
    psi = D * (1.0 - L / r) + D1 * (r - L) ** 3 / r
    psip = D * L / r ** 2 + D1 * (r - L) ** 2 * (2.0 * r + L) / r ** 2
    return r, psi, psip


def chain_rhs(x, u, params: ChainParams):
    """Continuous-time dynamics of the mass-spring chain.

    Velocity derivatives are ``(F_{i+1} - F_i)/m - g`` with the spring law
    ``F = D*d*(1 - L/r) + D1*d*(r - L)^3 / r`` on each elongation ``d``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    n = params.n
    pos, vel = _chain_split(x, n)
    batch = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
    allp = np.empty(batch + (n + 1, 3))
    allp[..., 0, :] = params.anchor
    allp[..., 1:, :] = pos
    d = allp[..., 1:, :] - allp[..., :-1, :]
    r, psi, psip = _spring_terms(d, params)
    force = psi[..., None] * d
    out = np.empty(batch + (params.n_x,))
    out[..., :3 * (n - 1)] = np.broadcast_to(
        vel, batch + (n - 1, 3)).reshape(batch + (3 * (n - 1),))
    out[..., 3 * (n - 1):3 * n] = u
    acc = (force[..., 1:, :] - force[..., :-1, :]) / params.m - params.g
    out[..., 3 * n:] = acc.reshape(batch + (3 * (n - 1),))
    return out


def chain_jacobians(x, u, params: ChainParams):
    """Analytic Jacobians ``(f_x, f_u)`` of :func:`chain_rhs`."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    n = params.n
    n_x = params.n_x
    pos, _ = _chain_split(x, n)
    batch = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
    allp = np.empty(batch + (n + 1, 3))
    allp[..., 0, :] = params.anchor
    allp[..., 1:, :] = pos
    d = allp[..., 1:, :] - allp[..., :-1, :]
    r, psi, psip = _spring_terms(d, params)
    eye3 = np.eye(3)
    # dF/dd = psi*I + (psip/r) d d^T for each spring
    G = psi[..., None, None] * eye3 + (psip / r)[..., None, None] * (
        d[..., :, None] * d[..., None, :])

    fx = np.zeros(batch + (n_x, n_x))
    fu = np.zeros(batch + (n_x, 3))
    # position derivatives: pdot_i = v_i, end point driven by u
    for i in range(n - 1):
        fx[..., 3 * i:3 * i + 3, 3 * n + 3 * i:3 * n + 3 * i + 3] = eye3
    fu[..., 3 * (n - 1):3 * n, :] = eye3
    # acceleration rows: mass i couples to points i-1, i, i+1
    inv_m = 1.0 / params.m
    for i in range(1, n):
        rows = slice(3 * n + 3 * (i - 1), 3 * n + 3 * i)
        Gi = G[..., i, :, :]      # spring to point i+1
        Gim = G[..., i - 1, :, :]  # spring from point i-1
        fx[..., rows, 3 * (i - 1):3 * i] += -(Gi + Gim) * inv_m
        if i + 1 <= n:
            fx[..., rows, 3 * i:3 * i + 3] += Gi * inv_m
        if i - 1 >= 1:
            fx[..., rows, 3 * (i - 2):3 * (i - 1)] += Gim * inv_m
    return fx, fu


def chain_steady_state(params: ChainParams, free_end_pos) -> np.ndarray:
    """Static equilibrium state for a prescribed free-end position.

    Solves the per-mass force balance by root finding; velocities are zero.
    Raises :class:`ModelEvaluationError` if the root finder fails.
    """
    n = params.n
    free_end_pos = np.asarray(free_end_pos, dtype=float)

    def balance(z):
        pos = z.reshape(n - 1, 3)
        allp = np.vstack([params.anchor, pos, free_end_pos])
        d = allp[1:] - allp[:-1]
        _, psi, _ = _spring_terms(d, params)
        force = psi[:, None] * d
        return ((force[1:] - force[:-1]) / params.m - params.g).ravel()

    frac = np.linspace(0.0, 1.0, n + 1)[1:n, None]
    guess = params.anchor + frac * (free_end_pos - params.anchor)
    guess = guess + np.array([0.0, 0.0, 0.1])
    sol = root(balance, guess.ravel(), tol=1e-13)
    res = np.abs(balance(sol.x)).max()
    if not sol.success or res > 1e-9:
        raise ModelEvaluationError(
            f"chain equilibrium root finding failed (residual {res:.2e})")
    state = np.zeros(params.n_x)
    state[:3 * (n - 1)] = sol.x
    state[3 * (n - 1):3 * n] = free_end_pos
    return state


def make_chain_model(params: Optional[ChainParams] = None,
                     control_limit: float = 1.0,
                     stage_weights=None,
                     terminal_weights=None) -> ModelSpec:
    """Assemble the chain :class:`ModelSpec` with control box constraints."""
    params = params or ChainParams()
    n_x = params.n_x
    if stage_weights is None:
        w = np.zeros(n_x + 3)
        w[:3 * (params.n - 1)] = 4.0      # mass positions
        w[3 * (params.n - 1):3 * params.n] = 10.0  # free end position
        w[3 * params.n:n_x] = 2.0         # velocities
        w[n_x:] = 0.05                    # control
        stage_weights = w
    if terminal_weights is None:
        tw = np.zeros(n_x)
        tw[:3 * (params.n - 1)] = 4.0
        tw[3 * (params.n - 1):3 * params.n] = 10.0
        tw[3 * params.n:] = 2.0
        terminal_weights = tw

    jac_rows = np.zeros((6, n_x + 3))
    for j in range(3):
        jac_rows[2 * j, n_x + j] = 1.0
        jac_rows[2 * j + 1, n_x + j] = -1.0

    def constraint(x, u):
        u = np.asarray(u, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
        r = np.empty(batch + (6,))
        for j in range(3):
            r[..., 2 * j] = u[..., j] - control_limit
            r[..., 2 * j + 1] = -u[..., j] - control_limit
        return r

    def constraint_jac(x, u):
        batch = np.broadcast_shapes(np.asarray(x)[..., 0].shape,
                                    np.asarray(u)[..., 0].shape)
        return np.broadcast_to(jac_rows, batch + (6, n_x + 3)).copy()

    return ModelSpec(
        n_x=n_x, n_u=3,
        rhs=lambda x, u: chain_rhs(x, u, params),
        rhs_jacobians=lambda x, u: chain_jacobians(x, u, params),
        stage_weights=stage_weights,
        terminal_weights=terminal_weights,
        path_constraint=constraint,
        path_constraint_jacobian=constraint_jac,
        n_r=6,
        name="chain",
        meta={"params": params, "control_limit": control_limit},
    )
