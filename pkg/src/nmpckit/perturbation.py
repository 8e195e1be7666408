"""Sensitivity of the subproblem solution to Jacobian perturbations.

The subproblem's primal-dual solution, viewed as a function of the error
``P`` between stored and exact continuity Jacobian blocks, admits a
first-order expansion around the exact-Jacobian solution. This module
assembles the square matrix ``M`` (the KKT map differentiated in the
solution triple) and the rectangular matrix ``N`` (differentiated in the
stacked perturbation entries), derives the offline conditioning constants
used by the threshold rule, and measures the actual distance to the
fully-updated optimum by re-solving the subproblem with exact blocks.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import NearSingularMatrixError
from .qp_solver import QPSolution, solve
from .transcription import QPData, dense_equality_jacobian, dense_inequality_jacobian

_DENSE_SVD_LIMIT = 2000


def _inequality_at_solution(qp: QPData, sol: QPSolution) -> np.ndarray:
    """Values ``C_j + grad C_j . dw`` of the linearized inequalities."""
    N, nwk = qp.N, qp.n_wk
    body = sol.dw[:N * nwk].reshape(N, nwk)
    vals = qp.ineq_values + np.einsum('krw,kw->kr', qp.ineq_jac, body)
    out = vals.ravel()
    if qp.n_l:
        term = qp.term_ineq_values + qp.term_ineq_jac @ sol.dw[N * nwk:]
        out = np.concatenate([out, term])
    return out


def build_m(qp: QPData, sol: QPSolution) -> np.ndarray:
    """Square subproblem matrix at the solution, in (w, mu, lam) ordering.

    Complementarity rows carry the inequality multipliers at the solution
    and the linearized constraint values; their sign convention follows
    the stationarity/equality blocks transposed structure.
    """
    n_w, n_in, n_eq = qp.n_w, qp.n_in, qp.n_eq
    n = n_w + n_in + n_eq
    H = np.zeros((n_w, n_w))
    for k in range(qp.N):
        sl = slice(k * qp.n_wk, (k + 1) * qp.n_wk)
        H[sl, sl] = qp.stage_hessians[k]
    H[qp.N * qp.n_wk:, qp.N * qp.n_wk:] = qp.term_hessian
    A = dense_equality_jacobian(qp)
    C = dense_inequality_jacobian(qp)
    z_tot = sol.dmu + np.concatenate([qp.mu.ravel(), qp.mu_term])
    c_sol = _inequality_at_solution(qp, sol)

    M = np.zeros((n, n))
    M[:n_w, :n_w] = H
    M[:n_w, n_w:n_w + n_in] = C.T
    M[:n_w, n_w + n_in:] = A.T
    M[n_w:n_w + n_in, :n_w] = -z_tot[:, None] * C
    M[n_w:n_w + n_in, n_w:n_w + n_in] = np.diag(-c_sol)
    M[n_w + n_in:, :n_w] = A
    return M


def build_n(qp: QPData, sol: QPSolution) -> np.ndarray:
    """Derivative of the KKT map in the stacked perturbation entries.

    The perturbation stacks row-major per-interval blocks, interval index
    ascending. Multiplying by such a stacked perturbation ``p`` yields
    ``(-P^T dlam, 0, -P dw)`` for the corresponding block matrix ``P``.
    """
    N, n_x, nwk = qp.N, qp.n_x, qp.n_wk
    n_w, n_in, n_eq = qp.n_w, qp.n_in, qp.n_eq
    n_p = N * n_x * nwk
    out = np.zeros((n_w + n_in + n_eq, n_p))
    body = sol.dw[:N * nwk].reshape(N, nwk)
    dlam = sol.dlam.reshape(N + 1, n_x)
    eye = np.eye(nwk)
    for k in range(N):
        pcols = slice(k * n_x * nwk, (k + 1) * n_x * nwk)
        # stationarity rows of node k: -(P_k^T dlam_{k+1})
        blk = -np.kron(dlam[k + 1], eye)
        out[k * nwk:(k + 1) * nwk, pcols] = blk
        # continuity rows k+1: -(P_k dw_k)
        rows = slice(n_w + n_in + (k + 1) * n_x, n_w + n_in + (k + 2) * n_x)
        out[rows, pcols] = -np.kron(np.eye(n_x), body[k])
    return out


def stack_perturbation(P_blocks: np.ndarray) -> np.ndarray:
    """Row-major stacking of per-interval perturbation blocks."""
    return np.asarray(P_blocks, dtype=float).ravel()


def singular_values(M: np.ndarray) -> np.ndarray:
    """Full spectrum, descending; large matrices go through the Gram route."""
    n = M.shape[0]
    if n <= _DENSE_SVD_LIMIT:
        return scipy.linalg.svdvals(M)
    eigs = scipy.linalg.eigvalsh(M.T @ M)
    return np.sqrt(np.clip(eigs, 0.0, None))[::-1]


def conditioning_constants(M: np.ndarray):
    """Offline constants ``(rho, gamma)`` from the subproblem spectrum.

    ``rho`` is the reciprocal smallest singular value; ``gamma`` is one
    plus the spread of the inverse spectrum.
    """
    sigma = singular_values(M)
    smin = float(sigma[-1])
    if smin < 1e-12:
        raise NearSingularMatrixError(
            f"subproblem matrix numerically singular (sigma_min {smin:.3e})",
            sigma_min=smin)
    rho = 1.0 / smin
    gamma = float(np.std(1.0 / sigma)) + 1.0
    return rho, gamma


@dataclass
class DtORecord:
    """One distance-to-optimum measurement against the exact-Jacobian solve."""

    e: float
    e_bar: float
    active_match: bool
    dy_norm: float


def measure_dto(qp: QPData, sol: QPSolution, exact_blocks: np.ndarray,
                e_bar: float, tol: float = 1e-8,
                start_scale: float = 1.0) -> DtORecord:
    """Re-solve the subproblem with exact blocks and compare solutions.

    The comparison runs over the stacked ``(dw, dmu, dlam)`` triple; the
    active-set flag records whether both solves agree on the binding
    inequalities, which is the regime where the tolerance bound applies.
    """
    qp_exact = replace(qp, jacobian_blocks=np.asarray(exact_blocks, dtype=float))
    sol_exact = solve(qp_exact, tol=tol, start_scale=start_scale)
    e = float(np.linalg.norm(sol.stacked() - sol_exact.stacked()))
    match = bool(np.array_equal(sol.active_set, sol_exact.active_set))
    return DtORecord(e=e, e_bar=e_bar, active_match=match,
                     dy_norm=float(np.linalg.norm(sol_exact.stacked())))
