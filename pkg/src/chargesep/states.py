"""Initial states and eigenstate-resolved branching.

In the broadband limit a photon transfers the parent vibrational density of
the ground surface vertically onto the donor surface e, so every initial
state here is ``|e><e| (x) sigma`` for some vibrational density ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .branching import BranchingFunctional
from .exceptions import NumericalError, TruncationError
from .model import ElectronicState, ModelParams, VibronicBasis
from .operators import local_vib_state
from .validation import check_density_operator, check_hermitian

__all__ = [
    "DensityOperator",
    "EigenstateRecord",
    "lift_to_surface",
    "broadband_initial_state",
    "cluster_initial_state",
    "parent_level_state",
    "eigen_analysis",
    "find_drain_state",
]


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Validated density matrix (Hermitian, unit trace, PSD)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = check_density_operator(np.asarray(self.matrix, dtype=complex), "density operator",
                                   trace_tol=1e-12)
        object.__setattr__(self, "matrix", m)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def populations(self, basis: VibronicBasis) -> np.ndarray:
        """Electronic populations in the order g, e, ct, a."""
        diag = np.real(np.diag(self.matrix))
        return np.array([diag[basis.surface(z)].sum() for z in ElectronicState])


@dataclass(frozen=True, eq=False)
class EigenstateRecord:
    energy: float
    vector: np.ndarray
    loc_e: float
    loc_ct: float
    p_II: float


def lift_to_surface(sigma: np.ndarray, basis: VibronicBasis, z=ElectronicState.E) -> np.ndarray:
    """Embed a vibrational operator as ``|z><z| (x) sigma``."""
    out = np.zeros((basis.dim, basis.dim), dtype=complex)
    sl = basis.surface(z)
    out[sl, sl] = sigma
    return out


def broadband_initial_state(params: ModelParams, basis: VibronicBasis | None,
                            parent_vib: np.ndarray) -> DensityOperator:
    """Vertical Franck-Condon copy of ``parent_vib`` onto the donor surface."""
    basis = params.basis if basis is None else basis
    sigma = np.asarray(parent_vib, dtype=complex)
    check_density_operator(sigma, "parent_vib", basis.vib_dim)
    sigma = (sigma + sigma.conj().T) / 2
    sigma = sigma / np.trace(sigma).real
    return DensityOperator(lift_to_surface(sigma, basis))


def cluster_initial_state(basis: VibronicBasis, N1: int, N2: int, dN2: int) -> DensityOperator:
    """Uniform mixture over ``|e, n1, n2>`` with ``n1 < N1`` and ``dN2 <= n2 < dN2 + N2``."""
    m1, m2 = basis.trunc
    if N1 < 1 or N2 < 1 or dN2 < 0:
        raise ValueError(f"cluster sizes must be positive and the offset non-negative, got {(N1, N2, dN2)}")
    if N1 > m1 or dN2 + N2 > m2:
        raise TruncationError(
            f"cluster n1 < {N1}, {dN2} <= n2 < {dN2 + N2} exceeds truncation {basis.trunc}")
    diag = np.zeros(basis.dim)
    for n1 in range(N1):
        start = basis.index_of(ElectronicState.E, n1, dN2)
        diag[start:start + N2] = 1.0 / (N1 * N2)
    return DensityOperator(np.diag(diag).astype(complex))


def parent_level_state(params: ModelParams, basis: VibronicBasis | None, n1: int, n2: int) -> DensityOperator:
    """Broadband lift of the g-local vibrational level ``|n1, n2>_g``."""
    basis = params.basis if basis is None else basis
    vib = local_vib_state(params, basis, ElectronicState.G, n1, n2)
    vib = vib / np.linalg.norm(vib)
    return broadband_initial_state(params, basis, np.outer(vib, vib.conj()))


def eigen_analysis(H, psi: BranchingFunctional | np.ndarray, basis: VibronicBasis,
                   window: tuple[float, float] | None = None) -> list[EigenstateRecord]:
    """Eigenstates of ``H`` with their e/ct localization and branching probability.

    ``H`` is block diagonal between the transient surfaces {e, ct} and the
    channel surfaces {g, a}; only the transient block is diagonalized since
    channel eigenstates carry no e/ct weight.  ``window`` optionally keeps
    energies in ``[lo, hi]``.
    """
    H = H.toarray() if hasattr(H, "toarray") else np.asarray(H)
    check_hermitian(H, "H", tol=1e-12)
    P = psi.psi if isinstance(psi, BranchingFunctional) else np.asarray(psi)
    T = np.asarray(basis.indices([ElectronicState.E, ElectronicState.CT]))
    rest = np.setdiff1d(np.arange(basis.dim), T)
    if np.any(H[np.ix_(T, rest)] != 0):
        raise ValueError("H couples the e/ct block to the channel surfaces")
    try:
        energies, vecs = scipy.linalg.eigh(H[np.ix_(T, T)])
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    nv = basis.vib_dim
    weights = np.abs(vecs) ** 2
    loc_e = weights[:nv].sum(axis=0)
    loc_ct = weights[nv:].sum(axis=0)
    PT = P[np.ix_(T, T)]
    p_II = np.real(np.einsum("ik,ij,jk->k", vecs.conj(), PT, vecs))
    records = []
    for k in range(energies.size):
        if window is not None and not window[0] <= energies[k] <= window[1]:
            continue
        full = np.zeros(basis.dim, dtype=complex)
        full[T] = vecs[:, k]
        records.append(EigenstateRecord(float(energies[k]), full, float(loc_e[k]),
                                        float(loc_ct[k]), float(p_II[k])))
    return records


def find_drain_state(records: list[EigenstateRecord], eps_e: float = 0.0) -> EigenstateRecord:
    """Lowest-energy charge-transfer-like (``loc_ct >= 0.5``) record at or above ``eps_e``."""
    if not records:
        raise ValueError("no eigenstate records given")
    candidates = [r for r in records if r.energy >= eps_e and r.loc_ct >= 0.5]
    if not candidates:
        raise ValueError("no charge-transfer eigenstate in the excited window")
    return min(candidates, key=lambda r: r.energy)
