"""Receding-horizon iteration schemes and their SQP counterparts.

One controller instant performs a single Newton-type step on the current
horizon problem: integrate the trajectory, decide which sensitivity blocks
to recompute, assemble the subproblem with an exactly corrected gradient,
solve it and apply the full increment. Schemes differ only in the block
update policy:

``rti``
    every block, every instant.
``ml``
    every block, every ``ml_interval`` instants, none in between.
``adj``
    blocks stay at their preparation values forever.
``cmon``
    per-block nonlinearity measures against auto-tuned thresholds.

The fixed-measurement variants iterate the same step to convergence.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, List

import numpy as np

from . import integrator as intg
from .cmon import (CMoNConfig, SensitivityStore, adjoint_rows, dual_cmon,
                   direction_vectors, dto_tolerance, primal_cmon, thresholds,
                   update_decision)
from .errors import ConfigError, DivergenceError
from .models import ModelSpec
from .perturbation import DtORecord, build_m, conditioning_constants, measure_dto
from .qp_solver import solve
from .transcription import (Multipliers, References, Trajectory, apply_step,
                            build_qp, exact_gradient_rows, split_primal)

_SCHEMES = ("rti", "ml", "adj", "cmon")


@dataclass
class SchemeConfig:
    """Controller-level knobs shared by all schemes."""

    scheme: str = "rti"
    qp_tol: float = 1e-8
    ml_interval: int = 1
    cmon: CMoNConfig = field(default_factory=CMoNConfig)
    track_dto: bool = False     # run the exact-sensitivity oracle per instant

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.ml_interval < 1:
            raise ConfigError("ml_interval must be a positive integer")
        if not self.qp_tol > 0:
            raise ConfigError("qp_tol must be positive")


@dataclass
class StepDiagnostics:
    """Per-instant record returned by :func:`controller_step`."""

    instant: int
    kkt_residual: float         # exact Lagrangian gradient norm, pre-step
    dy_norm: float              # full increment norm
    refreshed: int              # sensitivity blocks recomputed this instant
    refresh_fraction: float
    sens_blocks: int            # forward sensitivity block evaluations
    adjoint_seeds: int          # single-seed adjoint sweeps
    qp_iterations: int
    kappa_max: float = 0.0
    kappa_dual_max: float = 0.0
    eta_pri: float = np.inf
    eta_dual: float = np.inf
    e_bar: float = np.nan
    dto: Optional[DtORecord] = None


@dataclass
class ControllerState:
    """Everything the controller carries from one instant to the next."""

    model: ModelSpec
    integ: intg.IntegratorConfig
    cfg: SchemeConfig
    traj: Trajectory
    mult: Multipliers
    store: SensitivityStore
    instant: int = 0
    n_dim: int = 0              # primal + dual dimension of the subproblem
    rho0: float = np.nan
    gamma0: float = np.nan
    eta_pri: float = np.inf
    eta_dual: float = np.inf
    e_bar: float = np.nan
    prev_dy_norm: float = 0.0


def _triple_dim(model: ModelSpec, N: int) -> int:
    n_w = N * (model.n_x + model.n_u) + model.n_x
    n_eq = (N + 1) * model.n_x
    n_in = N * model.n_r + model.n_l
    return n_w + n_eq + n_in


def initialize_controller(model: ModelSpec, integ: intg.IntegratorConfig,
                          cfg: SchemeConfig, traj0: Trajectory,
                          mult0: Multipliers,
                          refs0: Optional[References] = None,
                          x_hat0: Optional[np.ndarray] = None,
                          offline_traj: Optional[Trajectory] = None
                          ) -> ControllerState:
    """Preparation phase: sensitivity blocks and, for ``cmon``, the
    conditioning constants of the reference subproblem.

    ``offline_traj`` fixes the linearization point of the prepared blocks
    (``adj`` keeps them there for good); it defaults to ``traj0``. The
    auto-threshold mode needs ``refs0`` to solve the preparation
    subproblem once.
    """
    traj = traj0.copy()
    mult = mult0.copy()
    store = SensitivityStore.empty(traj.horizon, model.n_x, model.n_u)
    base = offline_traj if offline_traj is not None else traj
    store.refresh(model, base, integ)
    store.mark_moved(traj)

    state = ControllerState(model=model, integ=integ, cfg=cfg, traj=traj,
                            mult=mult, store=store,
                            n_dim=_triple_dim(model, traj.horizon))
    if cfg.scheme == "cmon":
        state.e_bar = dto_tolerance(cfg.cmon, state.n_dim, 0.0)
        if cfg.cmon.threshold_mode == "fixed":
            state.eta_pri = cfg.cmon.fixed_eta_pri
            state.eta_dual = cfg.cmon.fixed_eta_dual
        else:
            if refs0 is None:
                raise ConfigError(
                    "auto threshold mode needs preparation references")
            x_hat = traj.xs[0] if x_hat0 is None else np.asarray(x_hat0, float)
            qp = build_qp(traj, mult, x_hat, store, model, integ, refs0)
            sol = solve(qp, tol=cfg.qp_tol)
            state.rho0, state.gamma0 = conditioning_constants(build_m(qp, sol))
    return state


def _exact_blocks(state: ControllerState) -> np.ndarray:
    """Exact sensitivity blocks at the current trajectory (oracle use)."""
    fresh = state.store.fresh_mask()
    S = state.store.blocks.copy()
    if not fresh.all():
        stale = ~fresh
        _, Sb = intg.forward_sensitivity_batch(
            state.model, state.traj.xs[:-1][stale], state.traj.us[stale],
            state.integ)
        S[stale] = Sb
    return S


def _assemble_and_solve(state: ControllerState, x_hat, refs: References,
                        phis: np.ndarray):
    """Build the subproblem with an exact gradient and solve it.

    Returns ``(qp, sol, kkt, n_stale)`` where ``n_stale`` counts the
    adjoint sweeps spent on the gradient correction.
    """
    fresh = state.store.fresh_mask()
    lam_dphi = exact_gradient_rows(state.model, state.traj, state.integ,
                                   state.mult.lam[1:], fresh_mask=fresh,
                                   blocks=state.store.blocks)
    qp = build_qp(state.traj, state.mult, x_hat, state.store, state.model,
                  state.integ, refs, phis=phis, lam_dphi=lam_dphi)
    kkt = float(np.linalg.norm(qp.gradient))
    sol = solve(qp, tol=state.cfg.qp_tol)
    return qp, sol, kkt, int(state.store.horizon - fresh.sum())


def _apply(state: ControllerState, sol) -> float:
    state.traj, state.mult = apply_step(state.traj, state.mult, sol)
    state.store.mark_moved(state.traj)
    return float(np.linalg.norm(sol.stacked()))


def _fixed_policy_step(state: ControllerState, x_hat, refs: References,
                       refresh_all: bool) -> StepDiagnostics:
    """Shared instant for the rti / ml / adj family."""
    N = state.traj.horizon
    phis = intg.integrate_batch(state.model, state.traj.xs[:-1],
                                state.traj.us, state.integ)
    refreshed = state.store.refresh(state.model, state.traj, state.integ) \
        if refresh_all else 0
    qp, sol, kkt, n_stale = _assemble_and_solve(state, x_hat, refs, phis)
    dto = None
    if state.cfg.track_dto:
        dto = measure_dto(qp, sol, _exact_blocks(state), state.e_bar,
                          tol=state.cfg.qp_tol)
    dy = _apply(state, sol)
    diag = StepDiagnostics(
        instant=state.instant, kkt_residual=kkt, dy_norm=dy,
        refreshed=refreshed, refresh_fraction=refreshed / N,
        sens_blocks=refreshed, adjoint_seeds=n_stale,
        qp_iterations=sol.iterations)
    diag.dto = dto
    state.instant += 1
    state.prev_dy_norm = dy
    return diag


def _cmon_step(state: ControllerState, x_hat, refs: References
               ) -> StepDiagnostics:
    cfg = state.cfg
    cmon = cfg.cmon
    N = state.traj.horizon
    phis = intg.integrate_batch(state.model, state.traj.xs[:-1],
                                state.traj.us, state.integ)

    adjoint_seeds = 0
    if state.store.has_caches():
        kappa = primal_cmon(phis, state.store.prev_phi,
                            state.store.prev_dir_pri)
        rows_now = adjoint_rows(state.model, state.traj, state.integ,
                                state.store.prev_dlam)
        adjoint_seeds += N
        kappa_dual = dual_cmon(rows_now, state.store.prev_dir_dual)
    else:
        kappa = np.zeros(N)
        kappa_dual = np.zeros(N)

    if cmon.threshold_mode == "fixed":
        eta_pri, eta_dual = cmon.fixed_eta_pri, cmon.fixed_eta_dual
    else:
        eta_pri, eta_dual = state.eta_pri, state.eta_dual
    mask = update_decision(kappa, kappa_dual, eta_pri, eta_dual,
                           floor_count=cmon.floor_count(N),
                           invalid=~state.store.valid)
    refreshed = state.store.refresh(state.model, state.traj, state.integ, mask)

    qp, sol, kkt, n_stale = _assemble_and_solve(state, x_hat, refs, phis)
    adjoint_seeds += n_stale
    dto = None
    if cfg.track_dto:
        dto = measure_dto(qp, sol, _exact_blocks(state), state.e_bar,
                          tol=cfg.qp_tol)

    dxs, dus = split_primal(sol.dw, N, state.model.n_x, state.model.n_u)
    dw_nodes = np.concatenate([dxs[:N], dus], axis=1)
    dlam_seeds = sol.dlam.reshape(N + 1, state.model.n_x)[1:].copy()
    dir_pri, dir_dual = direction_vectors(state.store.blocks, dw_nodes,
                                          dlam_seeds)
    dy = float(np.linalg.norm(sol.stacked()))
    e_used = state.e_bar
    state.e_bar = dto_tolerance(cmon, state.n_dim, dy)
    state.eta_pri, state.eta_dual = thresholds(
        cmon, state.e_bar, state.rho0, state.gamma0,
        float(np.linalg.norm(dir_pri)), float(np.linalg.norm(dir_dual)))
    state.store.update_caches(phis, dir_pri, dir_dual, dlam_seeds)

    _apply(state, sol)
    diag = StepDiagnostics(
        instant=state.instant, kkt_residual=kkt, dy_norm=dy,
        refreshed=refreshed, refresh_fraction=refreshed / N,
        sens_blocks=refreshed, adjoint_seeds=adjoint_seeds,
        qp_iterations=sol.iterations,
        kappa_max=float(kappa.max(initial=0.0)),
        kappa_dual_max=float(kappa_dual.max(initial=0.0)),
        eta_pri=eta_pri, eta_dual=eta_dual, e_bar=e_used, dto=dto)
    state.instant += 1
    state.prev_dy_norm = dy
    return diag


def controller_step(state: ControllerState, x_hat, refs: References
                    ) -> StepDiagnostics:
    """Advance the controller one instant for measurement ``x_hat``."""
    scheme = state.cfg.scheme
    if scheme == "rti":
        return _fixed_policy_step(state, x_hat, refs, refresh_all=True)
    if scheme == "ml":
        full = state.instant % state.cfg.ml_interval == 0
        return _fixed_policy_step(state, x_hat, refs, refresh_all=full)
    if scheme == "adj":
        return _fixed_policy_step(state, x_hat, refs, refresh_all=False)
    return _cmon_step(state, x_hat, refs)


# ---------------------------------------------------------------------------
# fixed-measurement solvers


@dataclass
class OCProblem:
    """One horizon problem with a frozen measurement."""

    model: ModelSpec
    integ: intg.IntegratorConfig
    x_hat: np.ndarray
    refs: References


@dataclass
class SQPResult:
    traj: Trajectory
    mult: Multipliers
    iterations: int             # QP steps applied
    converged: bool
    kkt_trace: np.ndarray       # residual before each step, then final
    sens_blocks: int            # forward sensitivity blocks, total
    adjoint_seeds: int
    refresh_counts: List[int] = field(default_factory=list)


def _sqp_residual(qp) -> float:
    """Stationarity plus primal feasibility of the horizon problem."""
    return max(float(np.linalg.norm(qp.gradient)),
               float(np.linalg.norm(qp.continuity_residuals)))


def gn_sqp_exact(ocp: OCProblem, traj0: Trajectory, mult0: Multipliers,
                 tol: float = 1e-6, max_iter: int = 100,
                 qp_tol: float = 1e-10) -> SQPResult:
    """Plain Gauss-Newton SQP with every block exact at every iteration."""
    traj, mult = traj0.copy(), mult0.copy()
    store = SensitivityStore.empty(traj.horizon, ocp.model.n_x, ocp.model.n_u)
    trace, counts = [], []
    blocks_total = 0
    converged = False
    for _ in range(max_iter + 1):
        phis = intg.integrate_batch(ocp.model, traj.xs[:-1], traj.us,
                                    ocp.integ)
        blocks_total += store.refresh(ocp.model, traj, ocp.integ)
        qp = build_qp(traj, mult, ocp.x_hat, store, ocp.model, ocp.integ,
                      ocp.refs, phis=phis)
        res = _sqp_residual(qp)
        trace.append(res)
        if res <= tol:
            converged = True
            break
        if len(counts) >= max_iter:
            break
        sol = solve(qp, tol=qp_tol)
        counts.append(store.horizon)
        traj, mult = apply_step(traj, mult, sol)
        store.mark_moved(traj)
    return SQPResult(traj=traj, mult=mult, iterations=len(counts),
                     converged=converged, kkt_trace=np.array(trace),
                     sens_blocks=blocks_total, adjoint_seeds=0,
                     refresh_counts=counts)


def cmon_sqp(ocp: OCProblem, traj0: Trajectory, mult0: Multipliers,
             cmon: Optional[CMoNConfig] = None, tol: float = 1e-6,
             max_iter: int = 200, qp_tol: float = 1e-10) -> SQPResult:
    """Iterate the partial-update step to convergence at fixed ``x_hat``.

    The first iteration updates everything and fixes the conditioning
    constants from its subproblem. Five consecutive residual increases
    raise :class:`DivergenceError` with the trace attached.
    """
    cmon = cmon if cmon is not None else CMoNConfig()
    model, integ = ocp.model, ocp.integ
    traj, mult = traj0.copy(), mult0.copy()
    N = traj.horizon
    store = SensitivityStore.empty(N, model.n_x, model.n_u)
    n_dim = _triple_dim(model, N)
    rho0 = gamma0 = np.nan
    eta_pri = eta_dual = np.inf
    if cmon.threshold_mode == "fixed":
        eta_pri, eta_dual = cmon.fixed_eta_pri, cmon.fixed_eta_dual
    trace, counts = [], []
    blocks_total = 0
    adjoint_total = 0
    grows = 0
    converged = False
    for it in range(max_iter + 1):
        phis = intg.integrate_batch(model, traj.xs[:-1], traj.us, integ)
        if store.has_caches():
            kappa = primal_cmon(phis, store.prev_phi, store.prev_dir_pri)
            rows_now = adjoint_rows(model, traj, integ, store.prev_dlam)
            adjoint_total += N
            kappa_dual = dual_cmon(rows_now, store.prev_dir_dual)
        else:
            kappa = np.zeros(N)
            kappa_dual = np.zeros(N)
        mask = update_decision(kappa, kappa_dual, eta_pri, eta_dual,
                               floor_count=cmon.floor_count(N),
                               invalid=~store.valid)
        refreshed = store.refresh(model, traj, integ, mask)
        blocks_total += refreshed

        fresh = store.fresh_mask()
        lam_dphi = exact_gradient_rows(model, traj, integ, mult.lam[1:],
                                       fresh_mask=fresh, blocks=store.blocks)
        adjoint_total += int(N - fresh.sum())
        qp = build_qp(traj, mult, ocp.x_hat, store, model, integ, ocp.refs,
                      phis=phis, lam_dphi=lam_dphi)
        res = _sqp_residual(qp)
        trace.append(res)
        if len(trace) > 1 and res > trace[-2]:
            grows += 1
            if grows >= 5:
                raise DivergenceError(
                    "residual grew five iterations in a row",
                    log=np.array(trace))
        else:
            grows = 0
        if res <= tol:
            converged = True
            break
        if len(counts) >= max_iter:
            break
        sol = solve(qp, tol=qp_tol)
        counts.append(refreshed)
        if it == 0 and cmon.threshold_mode == "auto":
            rho0, gamma0 = conditioning_constants(build_m(qp, sol))

        dxs, dus = split_primal(sol.dw, N, model.n_x, model.n_u)
        dw_nodes = np.concatenate([dxs[:N], dus], axis=1)
        dlam_seeds = sol.dlam.reshape(N + 1, model.n_x)[1:].copy()
        dir_pri, dir_dual = direction_vectors(store.blocks, dw_nodes,
                                              dlam_seeds)
        if cmon.threshold_mode == "auto":
            e_bar = dto_tolerance(cmon, n_dim,
                                  float(np.linalg.norm(sol.stacked())))
            eta_pri, eta_dual = thresholds(
                cmon, e_bar, rho0, gamma0,
                float(np.linalg.norm(dir_pri)),
                float(np.linalg.norm(dir_dual)))
        store.update_caches(phis, dir_pri, dir_dual, dlam_seeds)
        traj, mult = apply_step(traj, mult, sol)
        store.mark_moved(traj)
    return SQPResult(traj=traj, mult=mult, iterations=len(counts),
                     converged=converged, kkt_trace=np.array(trace),
                     sens_blocks=blocks_total, adjoint_seeds=adjoint_total,
                     refresh_counts=counts)
