"""Curvature-driven partial sensitivity updating.

Between consecutive solver instants, each shooting interval gets a scalar
nonlinearity measure: the deviation of the new integration value from the
linear prediction, relative to the directional sensitivity (primal), and
the change of an adjoint row relative to its previous value (dual). Blocks
whose measures stay below the current thresholds keep their stored
sensitivity; the rest are recomputed. Threshold values follow from a
desired distance-to-optimum tolerance through offline conditioning
constants of the subproblem matrix.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import integrator as intg
from .errors import ContractViolationError
from .models import ModelSpec


@dataclass
class CMoNConfig:
    """Tuning knobs for the partial-update scheme.

    ``eps_abs``/``eps_rel`` set the distance-to-optimum tolerance
    ``e_bar = eps_abs*sqrt(n) + eps_rel*||dy_prev||`` over the stacked
    primal-dual triple. ``threshold_mode`` switches between the automatic
    rule and fixed thresholds.
    """

    eps_abs: float = 0.1
    eps_rel: float = 0.1
    c1: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    min_update_fraction: float = 0.0
    threshold_mode: str = "auto"
    fixed_eta_pri: float = math.inf
    fixed_eta_dual: float = math.inf

    def __post_init__(self):
        if not 0.0 < self.c1 < 1.0:
            raise ContractViolationError("c1 must lie strictly in (0, 1)")
        if self.threshold_mode not in ("auto", "fixed"):
            raise ContractViolationError(
                f"unknown threshold mode {self.threshold_mode!r}")
        if not 0.0 <= self.min_update_fraction <= 1.0:
            raise ContractViolationError("min_update_fraction outside [0, 1]")

    def floor_count(self, N: int) -> int:
        return int(math.ceil(self.min_update_fraction * N))


@dataclass
class SensitivityStore:
    """Per-interval sensitivity blocks plus the caches the measures need.

    ``valid`` marks blocks computed at least once; ``stale``
    marks blocks not exact at the current linearization point. The caches
    hold, for the previous instant: integration values, directional
    sensitivity rows (also the threshold direction vectors), adjoint rows,
    and the dual step seeds.
    """

    blocks: np.ndarray                 # (N, n_x, n_x+n_u)
    valid: np.ndarray                  # (N,) bool
    stale: np.ndarray                  # (N,) bool
    node_points: np.ndarray            # (N, n_x+n_u) where each block was computed
    prev_phi: Optional[np.ndarray] = None       # (N, n_x)
    prev_dir_pri: Optional[np.ndarray] = None   # (N, n_x)
    prev_dir_dual: Optional[np.ndarray] = None  # (N, n_x+n_u)
    prev_dlam: Optional[np.ndarray] = None      # (N, n_x) adjoint seeds

    @classmethod
    def empty(cls, N: int, n_x: int, n_u: int) -> "SensitivityStore":
        return cls(blocks=np.zeros((N, n_x, n_x + n_u)),
                   valid=np.zeros(N, dtype=bool),
                   stale=np.ones(N, dtype=bool),
                   node_points=np.full((N, n_x + n_u), np.nan))

    @property
    def horizon(self) -> int:
        return self.blocks.shape[0]

    def fresh_mask(self) -> np.ndarray:
        return self.valid & ~self.stale

    def refresh(self, model: ModelSpec, traj, cfg: intg.IntegratorConfig,
                mask: Optional[np.ndarray] = None) -> int:
        """Recompute the masked blocks at the trajectory; returns the count."""
        if mask is None:
            mask = np.ones(self.horizon, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if not np.any(mask):
            return 0
        _, S = intg.forward_sensitivity_batch(
            model, traj.xs[:-1][mask], traj.us[mask], cfg)
        self.blocks[mask] = S
        self.valid[mask] = True
        self.stale[mask] = False
        self.node_points[mask] = traj.nodes()[mask]
        return int(mask.sum())

    def mark_moved(self, traj):
        """Flag blocks stale unless their node values are unchanged.

        An interval whose ``(x_k, u_k)`` did not move keeps an exact block,
        so partial updates stay bit-identical with full updates there.
        """
        unchanged = np.all(self.node_points == traj.nodes(), axis=1)
        self.stale[:] = ~(self.valid & unchanged)

    def update_caches(self, phis: np.ndarray, dir_pri: np.ndarray,
                      dir_dual: np.ndarray, dlam_seeds: np.ndarray):
        self.prev_phi = np.array(phis)
        self.prev_dir_pri = np.array(dir_pri)
        self.prev_dir_dual = np.array(dir_dual)
        self.prev_dlam = np.array(dlam_seeds)

    def has_caches(self) -> bool:
        return self.prev_phi is not None


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # exact zero direction: the measure is zero by convention
    out = np.zeros_like(num)
    nz = den > 0.0
    out[nz] = num[nz] / den[nz]
    return out


def primal_cmon(phi_now: np.ndarray, prev_phi: np.ndarray,
                prev_dir_pri: np.ndarray) -> np.ndarray:
    """Per-interval primal nonlinearity measures.

    ``prev_dir_pri`` holds the directional sensitivities of the stored
    blocks along the last primal step, so the numerator is the deviation
    of the new integration value from the linear prediction.
    """
    num = np.linalg.norm(phi_now - prev_phi - prev_dir_pri, axis=-1)
    den = np.linalg.norm(prev_dir_pri, axis=-1)
    return _safe_ratio(num, den)


def dual_cmon(adj_rows_now: np.ndarray,
              prev_dir_dual: np.ndarray) -> np.ndarray:
    """Per-interval dual measures from adjoint rows along the dual step."""
    num = np.linalg.norm(adj_rows_now - prev_dir_dual, axis=-1)
    den = np.linalg.norm(prev_dir_dual, axis=-1)
    return _safe_ratio(num, den)


def adjoint_rows(model: ModelSpec, traj, cfg: intg.IntegratorConfig,
                 seeds: np.ndarray) -> np.ndarray:
    """Exact rows ``seed_k^T dphi_k`` at the trajectory, one per interval."""
    rows = intg.adjoint_batch(model, traj.xs[:-1], traj.us, cfg,
                              seeds[:, None, :])
    return rows[:, 0, :]


def update_decision(kappa: np.ndarray, kappa_dual: np.ndarray,
                    eta_pri: float, eta_dual: float, floor_count: int = 0,
                    invalid: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean mask of blocks to recompute.

    A block is kept only when both measures sit at or below their
    thresholds; blocks never computed are always refreshed. When fewer
    than ``floor_count`` blocks are selected, the largest primal measures
    (lowest index on ties) top up the selection.
    """
    refresh = (kappa > eta_pri) | (kappa_dual > eta_dual)
    if invalid is not None:
        refresh = refresh | invalid
    short = floor_count - int(refresh.sum())
    if short > 0:
        cand = np.flatnonzero(~refresh)
        order = np.lexsort((cand, -kappa[cand]))
        refresh[cand[order[:short]]] = True
    return refresh


def dto_tolerance(cfg: CMoNConfig, n_dim: int, prev_dy_norm: float) -> float:
    """Tolerance ``e_bar`` for the distance to the fully-updated optimum."""
    return cfg.eps_abs * math.sqrt(n_dim) + cfg.eps_rel * prev_dy_norm


def thresholds(cfg: CMoNConfig, e_bar: float, rho0: float, gamma0: float,
               v_pri_norm: float, v_dual_norm: float):
    """Threshold pair from the tolerance and offline conditioning constants.

    A zero tolerance forces full updates; a zero direction norm leaves the
    corresponding threshold unbounded (nothing moved in that direction).
    """
    if cfg.threshold_mode == "fixed":
        return cfg.fixed_eta_pri, cfg.fixed_eta_dual
    if e_bar == 0.0:
        return 0.0, 0.0
    scale = gamma0 * e_bar / rho0
    if v_pri_norm > 0.0:
        eta_pri = scale * math.sqrt(cfg.c1) / (2.0 * cfg.alpha * v_pri_norm)
    else:
        eta_pri = math.inf
    if v_dual_norm > 0.0:
        eta_dual = scale * math.sqrt(1.0 - cfg.c1) / (cfg.beta * v_dual_norm)
    else:
        eta_dual = math.inf
    return eta_pri, eta_dual


def direction_vectors(blocks: np.ndarray, dw_nodes: np.ndarray,
                      dlam_seeds: np.ndarray):
    """Directional sensitivities along the primal and dual steps.

    Returns per-interval rows ``blocks_k @ dw_k`` and
    ``dlam_{k+1}^T blocks_k``; their stacked norms feed the threshold rule
    and the rows themselves become the next instant's caches.
    """
    dir_pri = np.einsum('kxw,kw->kx', blocks, dw_nodes)
    dir_dual = np.einsum('kx,kxw->kw', dlam_seeds, blocks)
    return dir_pri, dir_dual
