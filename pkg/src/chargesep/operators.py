"""Hilbert-space operators: vibronic Hamiltonian, collapse operators, local states.

Everything is expressed in the shared Fock basis of the e surface.  On
surface z the local lowering operator is ``b_kz = a_k + alpha_kz``, so the
surface minimum sits at the coherent state ``|-alpha_kz>``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import TruncationError
from .model import CT, E, G, A, ElectronicState, ModelParams, VibronicBasis

__all__ = [
    "CollapseTag",
    "CollapseOperator",
    "annihilation",
    "mode_operator",
    "local_lowering",
    "build_hamiltonian",
    "build_collapse_ops",
    "displaced_fock_state",
    "local_vib_state",
    "electronic_projector",
    "TAIL_TOLERANCE",
]

TAIL_TOLERANCE = 1e-8


class CollapseTag(enum.Enum):
    SEP = "sep"
    REC = "rec"
    VIB1 = "vib1"
    VIB2 = "vib2"
    DEPH_G = "deph_g"
    DEPH_E = "deph_e"
    DEPH_CT = "deph_ct"


@dataclass(frozen=True)
class CollapseOperator:
    """Lindblad jump operator ``matrix`` entering with weight ``rate``."""

    matrix: sp.csr_matrix
    rate: float
    tag: CollapseTag


def annihilation(levels: int) -> sp.csr_matrix:
    """Truncated lowering operator with ``<n-1|a|n> = sqrt(n)``."""
    if levels < 2:
        raise ValueError(f"need at least 2 levels, got {levels}")
    return sp.diags(np.sqrt(np.arange(1, levels, dtype=float)), 1, format="csr", dtype=complex)


def mode_operator(basis: VibronicBasis, k: int, op) -> sp.csr_matrix:
    """Lift a single-mode operator on mode ``k`` (1 or 2) to the two-mode space."""
    m1, m2 = basis.trunc
    if k == 1:
        return sp.kron(op, sp.identity(m2, dtype=complex), format="csr")
    if k == 2:
        return sp.kron(sp.identity(m1, dtype=complex), op, format="csr")
    raise ValueError(f"mode must be 1 or 2, got {k}")


def local_lowering(k: int, z, params: ModelParams, basis: VibronicBasis) -> sp.csr_matrix:
    """Surface-local lowering operator ``a_k + alpha_kz`` on the two-mode space."""
    z = ElectronicState(z)
    a = mode_operator(basis, k, annihilation(basis.trunc[k - 1]))
    shift = params.alpha[k - 1][z]
    if shift == 0:
        return a
    return (a + shift * sp.identity(basis.vib_dim, dtype=complex, format="csr")).tocsr()


def electronic_projector(z1, z2=None) -> sp.csr_matrix:
    """``|z1><z2|`` on the four-level electronic space."""
    z2 = z1 if z2 is None else z2
    out = sp.lil_matrix((4, 4), dtype=complex)
    out[int(ElectronicState(z1)), int(ElectronicState(z2))] = 1.0
    return out.tocsr()


def _surface_hamiltonian(z: ElectronicState, params: ModelParams, basis: VibronicBasis):
    ident = sp.identity(basis.vib_dim, dtype=complex, format="csr")
    out = params.eps[z] * ident
    lowering = [local_lowering(k, z, params, basis) for k in (1, 2)]
    for k, b in enumerate(lowering):
        out = out + params.nu[k] * (b.getH() @ b + 0.5 * ident)
    if params.beta[z] != 0:
        x1, x2 = ((b + b.getH()) / 2 for b in lowering)
        out = out + params.beta[z] * (x1 @ x2)
    return out


def build_hamiltonian(params: ModelParams, basis: VibronicBasis | None = None) -> sp.csr_matrix:
    """Vibronic Hamiltonian as a sparse Hermitian matrix.

    Each surface carries displaced harmonic modes plus the intermode term
    ``beta_z * x1 * x2`` with ``x_k = (b_kz + b_kz^+)/2``; only the electronic
    coupling ``g |e><ct|`` receives its Hermitian conjugate.
    """
    basis = params.basis if basis is None else basis
    blocks = [[None] * 4 for _ in range(4)]
    for z in ElectronicState:
        blocks[z][z] = _surface_hamiltonian(z, params, basis)
    if params.g_coupling != 0:
        coupling = params.g_coupling * sp.identity(basis.vib_dim, dtype=complex, format="csr")
        blocks[E][CT] = coupling
        blocks[CT][E] = coupling
    H = sp.bmat(blocks, format="csr", dtype=complex)
    H.eliminate_zeros()
    return H


def build_collapse_ops(params: ModelParams, basis: VibronicBasis | None = None) -> list[CollapseOperator]:
    """The seven jump operators: separation, recombination, two vibrational
    relaxations acting on every surface, and dephasing of g, e and ct."""
    basis = params.basis if basis is None else basis
    ident = sp.identity(basis.vib_dim, dtype=complex, format="csr")
    ops = [
        CollapseOperator(sp.kron(electronic_projector(A, CT), ident, format="csr"), params.rate_sep, CollapseTag.SEP),
        CollapseOperator(sp.kron(electronic_projector(G, E), ident, format="csr"), params.rate_rec, CollapseTag.REC),
    ]
    for k, tag in ((1, CollapseTag.VIB1), (2, CollapseTag.VIB2)):
        blocks = [local_lowering(k, z, params, basis) for z in ElectronicState]
        ops.append(CollapseOperator(sp.block_diag(blocks, format="csr"), params.gamma_vib[k - 1], tag))
    for z, tag in ((G, CollapseTag.DEPH_G), (E, CollapseTag.DEPH_E), (CT, CollapseTag.DEPH_CT)):
        ops.append(CollapseOperator(sp.kron(electronic_projector(z), ident, format="csr"), params.gamma_deph[z], tag))
    return ops


@lru_cache(maxsize=64)
def _displacement(alpha: float, size: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, size, dtype=float)), 1)
    return scipy.linalg.expm(alpha * (a.T - a))


def displaced_fock_state(alpha: float, n: int, levels: int) -> np.ndarray:
    """``D(-alpha)|n>`` truncated to ``levels`` Fock states.

    This is the n-th eigenvector of ``b^+ b`` with ``b = a + alpha``.  The
    displacement is evaluated on a padded space; raises
    :class:`TruncationError` when the top two retained levels carry more
    than ``TAIL_TOLERANCE`` of the norm.
    """
    if not 0 <= n < levels:
        raise TruncationError(f"level {n} outside truncation {levels}")
    alpha = float(alpha)
    if alpha == 0:
        vec = np.zeros(levels, dtype=complex)
        vec[n] = 1.0
        return vec
    pad = 40 + int(6 * (abs(alpha) + 1) ** 2) + int(4 * np.sqrt(n + 1) * (abs(alpha) + 1))
    full = _displacement(-alpha, levels + pad)[:, n]
    vec = full[:levels].astype(complex)
    tail = float(np.sum(np.abs(full[levels - 2:]) ** 2))
    if tail > TAIL_TOLERANCE:
        raise TruncationError(
            f"displaced level n={n} with alpha={alpha} leaks {tail:.2e} of its norm past "
            f"the top of a {levels}-level truncation"
        )
    return vec


def local_vib_state(params: ModelParams, basis: VibronicBasis, z, n1: int, n2: int) -> np.ndarray:
    """Surface-local vibrational state ``|n1, n2>_z`` on the two-mode space."""
    z = ElectronicState(z)
    v1 = displaced_fock_state(params.alpha[0][z], n1, basis.trunc[0])
    v2 = displaced_fock_state(params.alpha[1][z], n2, basis.trunc[1])
    return np.kron(v1, v2)
