"""Input-validation helpers shared by the estimators and the pipeline."""

from __future__ import annotations

import numbers

import numpy as np

__all__ = [
    "check_square",
    "check_hermitian",
    "check_density_operator",
    "check_positive_int",
    "check_fraction",
]

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
PSD_TOL = 1e-10


def check_square(M, name: str = "matrix", dim: int | None = None) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    if dim is not None and M.shape[0] != dim:
        raise ValueError(f"{name} has dimension {M.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def check_hermitian(M, name: str = "matrix", tol: float = HERMITIAN_TOL) -> np.ndarray:
    M = check_square(M, name)
    scale = max(np.linalg.norm(M), 1.0)
    defect = np.linalg.norm(M - M.conj().T) / scale
    if defect > tol:
        raise ValueError(f"{name} is not Hermitian (relative defect {defect:.2e})")
    return M


def check_density_operator(rho, name: str = "rho", dim: int | None = None, *,
                           trace_tol: float = TRACE_TOL, psd_tol: float = PSD_TOL) -> np.ndarray:
    """Hermitian, unit trace and positive semidefinite within tolerance.

    The eigenvalue check runs on the support of ``rho`` only, which keeps
    it cheap for states living on a small cluster of levels.
    """
    rho = check_square(rho, name, dim)
    check_hermitian(rho, name, tol=max(trace_tol, HERMITIAN_TOL))
    tr = np.trace(rho)
    if abs(tr - 1) > trace_tol:
        raise ValueError(f"{name} has trace {tr.real:.12g}, expected 1")
    support = np.flatnonzero(np.any(rho != 0, axis=0) | np.any(rho != 0, axis=1))
    sub = rho[np.ix_(support, support)]
    if support.size and np.min(np.linalg.eigvalsh((sub + sub.conj().T) / 2)) < -psd_tol:
        raise ValueError(f"{name} is not positive semidefinite")
    return rho


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fraction(value, name: str) -> float:
    value = float(value)
    if not 0 < value < 1:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value
