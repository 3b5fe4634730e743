"""Explicit time propagation of the master equation.

Used as an independent check of the adjoint branching solve: the
population reaching the acceptor after many decay times must match
``P_II``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .exceptions import IntegrationError
from .liouvillian import SuperOperator, pairing_adjoint, unvec, vec
from .model import ElectronicState
from .validation import check_density_operator

logger = logging.getLogger(__name__)

__all__ = ["Trajectory", "evolve", "TRACE_ABORT", "TRACE_WARN"]

TRACE_WARN = 1e-8
TRACE_ABORT = 1e-6


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled electronic populations (columns g, e, ct, a) and edge leakage."""

    times: np.ndarray
    electronic_populations: np.ndarray
    leakage: np.ndarray
    purity: np.ndarray

    def population(self, z) -> np.ndarray:
        return self.electronic_populations[:, int(ElectronicState(z))]


def evolve(L: SuperOperator, rho0: np.ndarray, t_final: float, tol: float = 1e-10, *,
           samples: int = 60, t_first: float | None = None, method: str = "DOP853"):
    """Integrate ``d rho/dt = L[rho]`` up to ``t_final``.

    Output is sampled on a geometric grid from ``t_first`` (default
    ``t_final * 1e-4``) to ``t_final`` plus ``t = 0``.  ``tol`` is passed as
    the relative tolerance with a matching absolute tolerance.

    Returns
    -------
    rho : ndarray
        Hermitized final state.
    trajectory : Trajectory
    """
    if L.adjoint:
        L = pairing_adjoint(L)
    D = L.dim_op
    rho0 = check_density_operator(rho0, "rho0", D)
    if not t_final > 0:
        raise ValueError(f"t_final must be positive, got {t_final}")
    t_first = t_final * 1e-4 if t_first is None else t_first
    grid = np.concatenate([[0.0], np.geomspace(t_first, t_final, samples)])

    if L.dim_vec <= L.max_dim_vec:
        M = L.matrix

        def rhs(_, y):
            return M @ y
    else:
        def rhs(_, y):
            return L.apply_vec(y)

    sol = solve_ivp(rhs, (0.0, t_final), vec(rho0).astype(complex), method=method,
                    t_eval=grid, rtol=tol, atol=tol)
    if sol.status != 0:
        raise IntegrationError(f"integration failed: {sol.message}")

    basis = L.basis
    labels = basis.electronic_labels() if basis is not None else None
    edge = np.tile(basis.edge_mask(), basis.electronic_count) if basis is not None else None
    pops, leak, purity = [], [], []
    worst_defect = 0.0
    rho = rho0
    for k in range(sol.t.size):
        rho = unvec(sol.y[:, k], D)
        worst_defect = max(worst_defect, float(np.linalg.norm(rho - rho.conj().T)))
        rho = (rho + rho.conj().T) / 2
        drift = abs(np.trace(rho) - 1)
        if drift > TRACE_ABORT:
            raise IntegrationError(f"trace drifted by {drift:.2e} at t = {sol.t[k]:.6g}")
        if drift > TRACE_WARN:
            logger.warning("trace drift %.2e at t = %.6g", drift, sol.t[k])
        diag = np.real(np.diag(rho))
        if labels is not None:
            pops.append(np.bincount(labels, weights=diag, minlength=4))
            leak.append(float(diag[edge].sum()))
        purity.append(float(np.real(np.sum(rho * rho.T))))
    if worst_defect > 1e-10:
        logger.info("hermiticity defect up to %.2e before symmetrization", worst_defect)
    traj = Trajectory(
        times=sol.t.copy(),
        electronic_populations=np.array(pops) if pops else np.empty((sol.t.size, 0)),
        leakage=np.array(leak),
        purity=np.array(purity),
    )
    return rho, traj
