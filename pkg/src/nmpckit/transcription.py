"""Multiple-shooting transcription and QP subproblem assembly.

The decision vector stacks ``(x_0, u_0, ..., x_{N-1}, u_{N-1}, x_N)``.
Equality rows stack the measurement embedding ``x_0 - x_hat`` followed by
the continuity residuals ``phi_k(x_k, u_k) - x_{k+1}``; their Jacobian is
block banded with an identity in the first block row and ``[dphi_k, -I]``
rows below it. Inequality rows stack the per-node path constraints and the
terminal constraint.

The QP objective gradient is the gradient of the problem Lagrangian with
exact sensitivities, while equality rows may carry stale Jacobian blocks;
solving the assembled QP therefore yields increments for primal variables
and both multiplier sets.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import integrator as intg
from .errors import AssemblyError, ContractViolationError
from .models import ModelSpec


@dataclass
class Trajectory:
    """Shooting trajectory: node states ``xs`` (N+1, n_x), controls ``us`` (N, n_u)."""

    xs: np.ndarray
    us: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        if self.xs.ndim != 2 or self.us.ndim != 2 \
                or self.xs.shape[0] != self.us.shape[0] + 1:
            raise ValueError("trajectory must hold N+1 states and N controls")

    @property
    def horizon(self) -> int:
        return self.us.shape[0]

    def nodes(self) -> np.ndarray:
        """Per-node stacked ``(x_k, u_k)`` array of shape (N, n_x + n_u)."""
        return np.concatenate([self.xs[:-1], self.us], axis=1)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.nodes().ravel(), self.xs[-1]])

    def copy(self) -> "Trajectory":
        return Trajectory(self.xs.copy(), self.us.copy())


@dataclass
class Multipliers:
    """Equality multipliers per residual row block, inequality multipliers per node."""

    lam: np.ndarray      # (N+1, n_x)
    mu: np.ndarray       # (N, n_r)
    mu_term: np.ndarray  # (n_l,)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.mu_term = np.asarray(self.mu_term, dtype=float)

    def copy(self) -> "Multipliers":
        return Multipliers(self.lam.copy(), self.mu.copy(), self.mu_term.copy())

    @classmethod
    def zeros(cls, N: int, n_x: int, n_r: int, n_l: int = 0) -> "Multipliers":
        return cls(np.zeros((N + 1, n_x)), np.zeros((N, n_r)), np.zeros(n_l))


@dataclass
class References:
    """Per-node tracking references consumed verbatim by the assembly."""

    xs: np.ndarray  # (N+1, n_x) including the terminal node
    us: np.ndarray  # (N, n_u)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)

    def copy(self) -> "References":
        return References(self.xs.copy(), self.us.copy())


@dataclass
class QPData:
    """Everything the QP solver needs for one subproblem.

    ``gradient`` is the stacked Lagrangian gradient (exact sensitivities);
    ``jacobian_blocks`` are the per-interval blocks actually placed in the
    equality rows, which may be stale. Current multipliers ride along so the
    solver can return increments.
    """

    stage_hessians: np.ndarray       # (N, n_x+n_u, n_x+n_u)
    term_hessian: np.ndarray         # (n_x, n_x)
    gradient: np.ndarray             # (n_w,)
    continuity_residuals: np.ndarray  # (N+1, n_x); row 0 is the embedding
    jacobian_blocks: np.ndarray      # (N, n_x, n_x+n_u)
    ineq_values: np.ndarray          # (N, n_r)
    ineq_jac: np.ndarray             # (N, n_r, n_x+n_u)
    term_ineq_values: np.ndarray     # (n_l,)
    term_ineq_jac: np.ndarray        # (n_l, n_x)
    measurement: np.ndarray          # (n_x,)
    lam: np.ndarray                  # (N+1, n_x) current equality multipliers
    mu: np.ndarray                   # (N, n_r)
    mu_term: np.ndarray              # (n_l,)

    def __post_init__(self):
        N, n_x, nwk = (self.jacobian_blocks.shape[0],
                       self.jacobian_blocks.shape[1],
                       self.jacobian_blocks.shape[2])
        if self.stage_hessians.shape != (N, nwk, nwk) \
                or self.term_hessian.shape != (n_x, n_x) \
                or self.continuity_residuals.shape != (N + 1, n_x) \
                or self.gradient.shape != (N * nwk + n_x,) \
                or self.lam.shape != (N + 1, n_x):
            raise AssemblyError("inconsistent QP block shapes")
        for arr in (self.stage_hessians, self.term_hessian, self.gradient,
                    self.continuity_residuals, self.jacobian_blocks,
                    self.ineq_values, self.ineq_jac, self.term_ineq_values,
                    self.term_ineq_jac, self.measurement):
            if not np.all(np.isfinite(arr)):
                raise AssemblyError("non-finite entry in QP data")

    @property
    def N(self) -> int:
        return self.jacobian_blocks.shape[0]

    @property
    def n_x(self) -> int:
        return self.jacobian_blocks.shape[1]

    @property
    def n_wk(self) -> int:
        return self.jacobian_blocks.shape[2]

    @property
    def n_u(self) -> int:
        return self.n_wk - self.n_x

    @property
    def n_r(self) -> int:
        return self.ineq_values.shape[1]

    @property
    def n_l(self) -> int:
        return self.term_ineq_values.shape[0]

    @property
    def n_w(self) -> int:
        return self.N * self.n_wk + self.n_x

    @property
    def n_eq(self) -> int:
        return (self.N + 1) * self.n_x

    @property
    def n_in(self) -> int:
        return self.N * self.n_r + self.n_l


def split_primal(dw: np.ndarray, N: int, n_x: int, n_u: int):
    """Split a stacked primal vector into (dxs, dus) node arrays."""
    nwk = n_x + n_u
    body = dw[:N * nwk].reshape(N, nwk)
    dxs = np.vstack([body[:, :n_x], dw[N * nwk:][None, :]])
    return dxs, body[:, n_x:]


def dense_equality_jacobian(qp: QPData) -> np.ndarray:
    """Dense ``(n_eq, n_w)`` equality Jacobian with the stored blocks."""
    N, n_x, nwk = qp.N, qp.n_x, qp.n_wk
    A = np.zeros((qp.n_eq, qp.n_w))
    A[:n_x, :n_x] = np.eye(n_x)
    for k in range(N):
        rows = slice((k + 1) * n_x, (k + 2) * n_x)
        A[rows, k * nwk:(k + 1) * nwk] = qp.jacobian_blocks[k]
        nxt = (k + 1) * nwk if k + 1 < N else N * nwk
        A[rows, nxt:nxt + n_x] = -np.eye(n_x)
    return A


def dense_inequality_jacobian(qp: QPData) -> np.ndarray:
    """Dense ``(n_in, n_w)`` inequality Jacobian."""
    N, n_r, nwk = qp.N, qp.n_r, qp.n_wk
    C = np.zeros((qp.n_in, qp.n_w))
    for k in range(N):
        C[k * n_r:(k + 1) * n_r, k * nwk:(k + 1) * nwk] = qp.ineq_jac[k]
    if qp.n_l:
        C[N * n_r:, N * nwk:] = qp.term_ineq_jac
    return C


def gauss_newton_hessian(traj: Trajectory, model: ModelSpec):
    """Diagonal Gauss-Newton blocks of the tracking cost.

    The quadratic tracking objective makes the blocks constant along the
    trajectory; multipliers never enter.
    """
    N = traj.horizon
    stage = np.diag(model.stage_weights)
    return (np.broadcast_to(stage, (N,) + stage.shape).copy(),
            np.diag(model.terminal_weights))


def _objective_gradient(traj: Trajectory, model: ModelSpec, refs: References):
    nodes = traj.nodes()
    ref_nodes = np.concatenate([refs.xs[:-1], refs.us], axis=1)
    g_nodes = model.stage_weights[None, :] * (nodes - ref_nodes)
    g_term = model.terminal_weights * (traj.xs[-1] - refs.xs[-1])
    return g_nodes, g_term


def exact_gradient_rows(model: ModelSpec, traj: Trajectory,
                        cfg: intg.IntegratorConfig, seeds: np.ndarray,
                        fresh_mask: Optional[np.ndarray] = None,
                        blocks: Optional[np.ndarray] = None) -> np.ndarray:
    """Rows ``seed_k^T dphi_k`` with exact sensitivities at the trajectory.

    Nodes flagged in ``fresh_mask`` use a plain product with the supplied
    ``blocks`` (already exact there); the rest run an adjoint sweep.
    """
    N = traj.horizon
    xs, us = traj.xs[:-1], traj.us
    out = np.empty((N, model.n_x + model.n_u))
    if fresh_mask is None:
        fresh_mask = np.zeros(N, dtype=bool)
    fresh_mask = np.asarray(fresh_mask, dtype=bool)
    if np.any(fresh_mask):
        out[fresh_mask] = np.einsum(
            'kx,kxw->kw', seeds[fresh_mask], blocks[fresh_mask])
    stale = ~fresh_mask
    if np.any(stale):
        rows = intg.adjoint_batch(model, xs[stale], us[stale], cfg,
                                  seeds[stale][:, None, :])
        out[stale] = rows[:, 0, :]
    return out


def lagrangian_gradient(traj: Trajectory, mult: Multipliers, model: ModelSpec,
                        cfg: intg.IntegratorConfig, refs: References,
                        lam_dphi: Optional[np.ndarray] = None) -> np.ndarray:
    """Stacked gradient of the problem Lagrangian with exact sensitivities.

    ``lam_dphi`` may carry precomputed rows ``lam_{k+1}^T dphi_k``; when
    absent they are obtained by adjoint sweeps.
    """
    N, n_x = traj.horizon, model.n_x
    g_nodes, g_term = _objective_gradient(traj, model, refs)
    if lam_dphi is None:
        lam_dphi = exact_gradient_rows(model, traj, cfg, mult.lam[1:])
    g_nodes = g_nodes + lam_dphi
    # embedding (+lam_0 on x_0) and continuity (-lam_k on x_k)
    g_nodes[0, :n_x] += mult.lam[0]
    g_nodes[1:, :n_x] -= mult.lam[1:N]
    g_term = g_term - mult.lam[N]
    if model.n_r:
        cjac = model.path_constraint_jacobian(traj.xs[:-1], traj.us)
        g_nodes = g_nodes + np.einsum('kr,krw->kw', mult.mu, cjac)
    if model.n_l:
        tjac = model.terminal_constraint_jacobian(traj.xs[-1])
        g_term = g_term + mult.mu_term @ tjac
    return np.concatenate([g_nodes.ravel(), g_term])


def build_qp(traj: Trajectory, mult: Multipliers, x_hat: np.ndarray,
             store, model: ModelSpec, cfg: intg.IntegratorConfig,
             refs: References, phis: Optional[np.ndarray] = None,
             lam_dphi: Optional[np.ndarray] = None) -> QPData:
    """Assemble the QP subproblem at the current iterate.

    Parameters
    ----------
    store :
        Sensitivity store providing ``blocks`` (N, n_x, n_x+n_u) and the
        boolean ``fresh_mask()`` marking blocks exact at this trajectory.
    phis :
        Integration values at the trajectory nodes; computed here when
        absent. They must always be current, only Jacobians may be stale.
    lam_dphi :
        Optional precomputed exact rows ``lam_{k+1}^T dphi_k``.
    """
    N, n_x = traj.horizon, model.n_x
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != (n_x,):
        raise AssemblyError("measurement has wrong dimension")
    if phis is None:
        phis = intg.integrate_batch(model, traj.xs[:-1], traj.us, cfg)
    if lam_dphi is None:
        lam_dphi = exact_gradient_rows(model, traj, cfg, mult.lam[1:],
                                       fresh_mask=store.fresh_mask(),
                                       blocks=store.blocks)
    gradient = lagrangian_gradient(traj, mult, model, cfg, refs,
                                   lam_dphi=lam_dphi)
    resid = np.empty((N + 1, n_x))
    resid[0] = traj.xs[0] - x_hat
    resid[1:] = phis - traj.xs[1:]

    stage_h, term_h = gauss_newton_hessian(traj, model)
    if model.n_r:
        ineq_values = model.path_constraint(traj.xs[:-1], traj.us)
        ineq_jac = model.path_constraint_jacobian(traj.xs[:-1], traj.us)
    else:
        ineq_values = np.zeros((N, 0))
        ineq_jac = np.zeros((N, 0, n_x + model.n_u))
    if model.n_l:
        term_ineq = np.asarray(model.terminal_constraint(traj.xs[-1]), dtype=float)
        term_jac = np.asarray(model.terminal_constraint_jacobian(traj.xs[-1]),
                              dtype=float)
    else:
        term_ineq = np.zeros(0)
        term_jac = np.zeros((0, n_x))
    return QPData(
        stage_hessians=stage_h, term_hessian=term_h, gradient=gradient,
        continuity_residuals=resid, jacobian_blocks=np.array(store.blocks),
        ineq_values=ineq_values, ineq_jac=ineq_jac,
        term_ineq_values=term_ineq, term_ineq_jac=term_jac,
        measurement=x_hat, lam=mult.lam.copy(), mu=mult.mu.copy(),
        mu_term=mult.mu_term.copy())


def apply_step(traj: Trajectory, mult: Multipliers, sol):
    """Apply QP increments; returns new (trajectory, multipliers).

    Inequality multipliers are clamped at zero within a 1e-8 slack; a
    larger negative total raises :class:`ContractViolationError`.
    """
    N, n_x, n_u = traj.horizon, traj.xs.shape[1], traj.us.shape[1]
    dxs, dus = split_primal(sol.dw, N, n_x, n_u)
    new_traj = Trajectory(traj.xs + dxs, traj.us + dus)
    new_lam = mult.lam + sol.dlam.reshape(N + 1, n_x)
    n_r = mult.mu.shape[1]
    dmu = sol.dmu[:N * n_r].reshape(N, n_r)
    new_mu = mult.mu + dmu
    new_mu_term = mult.mu_term + sol.dmu[N * n_r:]
    low = min(new_mu.min(initial=0.0), new_mu_term.min(initial=0.0))
    if low < -1e-8:
        raise ContractViolationError(
            f"inequality multiplier became negative ({low:.3e})")
    np.clip(new_mu, 0.0, None, out=new_mu)
    np.clip(new_mu_term, 0.0, None, out=new_mu_term)
    return new_traj, Multipliers(new_lam, new_mu, new_mu_term)


def kkt_residual(traj: Trajectory, mult: Multipliers, x_hat, model: ModelSpec,
                 cfg: intg.IntegratorConfig, refs: References,
                 exact_jacobians: bool = True, store=None) -> float:
    """Norm of the problem Lagrangian gradient at the iterate.

    With ``exact_jacobians`` the sensitivity rows are recomputed by adjoint
    sweeps; otherwise the store's (possibly stale) blocks are used.
    """
    if exact_jacobians or store is None:
        lam_dphi = None
    else:
        lam_dphi = np.einsum('kx,kxw->kw', mult.lam[1:], store.blocks)
    g = lagrangian_gradient(traj, mult, model, cfg, refs, lam_dphi=lam_dphi)
    return float(np.linalg.norm(g))
