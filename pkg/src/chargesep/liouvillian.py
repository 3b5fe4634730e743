"""Lindblad superoperator in column-stacked form plus matrix-free application.

Vectorization convention (used everywhere in the package): ``vec(X)`` stacks
columns, i.e. ``X.reshape(-1, order="F")``, so that
``vec(A X B) = (B^T kron A) vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .model import VibronicBasis
from .operators import CollapseOperator

__all__ = ["SuperOperator", "assemble", "pairing_adjoint", "vec", "unvec", "DROP_TOLERANCE"]

DROP_TOLERANCE = 1e-15
MAX_EXPLICIT_DIM_VEC = 4_000_000


def vec(X: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(X).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    dim = int(round(np.sqrt(v.size))) if dim is None else dim
    return v.reshape((dim, dim), order="F")


def _drop_small(M: sp.spmatrix) -> sp.csr_matrix:
    M = M.tocsr()
    M.data[np.abs(M.data) < DROP_TOLERANCE] = 0
    M.eliminate_zeros()
    return M


@dataclass(frozen=True, eq=False)
class SuperOperator:
    """Lindblad generator ``L[X] = -i[H, X] + sum_j r_j D(C_j)[X]``.

    With ``adjoint=True`` the object represents the map ``L*`` defined by
    ``Tr[Psi L[X]] = Tr[L*[Psi] X]`` (non-conjugating pairing), i.e.
    ``L*[Psi] = i[H, Psi] + sum_j r_j (C_j^+ Psi C_j - {C_j^+ C_j, Psi}/2)``.
    """

    hamiltonian: sp.csr_matrix
    collapse_ops: tuple = ()
    basis: VibronicBasis | None = None
    adjoint: bool = False
    max_dim_vec: int = field(default=MAX_EXPLICIT_DIM_VEC, repr=False)

    @property
    def dim_op(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def dim_vec(self) -> int:
        return self.dim_op ** 2

    @cached_property
    def active_ops(self) -> tuple:
        """Collapse operators with non-zero rate."""
        return tuple(c for c in self.collapse_ops if c.rate != 0)

    @cached_property
    def decay_operator(self) -> sp.csr_matrix:
        """``K = sum_j r_j C_j^+ C_j``."""
        K = sp.csr_matrix((self.dim_op, self.dim_op), dtype=complex)
        for c in self.active_ops:
            K = K + c.rate * (c.matrix.getH() @ c.matrix)
        return K.tocsr()

    @cached_property
    def effective_generator(self) -> sp.csr_matrix:
        """``G = iH - K/2`` so that ``L*[X] = G X + X G^+ + sum_j r_j C_j^+ X C_j``."""
        return (1j * self.hamiltonian - 0.5 * self.decay_operator).tocsr()

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Explicit sparse ``dim_vec x dim_vec`` matrix (column stacking)."""
        if self.dim_vec > self.max_dim_vec:
            raise MemoryError(
                f"explicit superoperator with {self.dim_vec} rows exceeds the cap of "
                f"{self.max_dim_vec}; use the matrix-free apply path"
            )
        D = self.dim_op
        I = sp.identity(D, dtype=complex, format="csr")
        H = self.hamiltonian
        sign = 1j if self.adjoint else -1j
        M = sign * (sp.kron(I, H) - sp.kron(H.T, I))
        for c in self.active_ops:
            C = c.matrix
            CdC = C.getH() @ C
            if self.adjoint:
                jump = sp.kron(C.T, C.getH())
            else:
                jump = sp.kron(C.conj(), C)
            M = M + c.rate * (jump - 0.5 * (sp.kron(I, CdC) + sp.kron(CdC.T, I)))
        return _drop_small(M)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Matrix-free action on a ``dim_op x dim_op`` operator."""
        X = np.asarray(X)
        if X.shape != (self.dim_op, self.dim_op):
            raise ValueError(f"operator shape {X.shape} does not match dimension {self.dim_op}")
        H = self.hamiltonian
        HX = H @ X
        XH = (H.T @ X.T).T
        out = (1j if self.adjoint else -1j) * (HX - XH)
        for c in self.active_ops:
            C = c.matrix
            Cd = C.getH()
            if self.adjoint:
                out = out + c.rate * (Cd @ ((C.T @ X.T).T))
            else:
                out = out + c.rate * (C @ ((Cd.T @ X.T).T))
        K = self.decay_operator
        if K.nnz:
            out = out - 0.5 * (K @ X + (K.T @ X.T).T)
        return out

    def apply_vec(self, v: np.ndarray) -> np.ndarray:
        """Matrix-free action on a column-stacked vector."""
        return vec(self.apply(unvec(v, self.dim_op)))


def assemble(H, ops=(), basis: VibronicBasis | None = None) -> SuperOperator:
    """Build the Lindblad superoperator from a Hamiltonian and collapse operators."""
    H = sp.csr_matrix(H, dtype=complex)
    if H.shape[0] != H.shape[1]:
        raise ValueError(f"Hamiltonian must be square, got {H.shape}")
    checked = []
    for c in ops:
        if not isinstance(c, CollapseOperator):
            raise TypeError("collapse operators must be CollapseOperator instances")
        if c.matrix.shape != H.shape:
            raise ValueError(f"collapse operator {c.tag} has shape {c.matrix.shape}, expected {H.shape}")
        if c.rate < 0:
            raise ValueError(f"collapse operator {c.tag} has negative rate {c.rate}")
        checked.append(CollapseOperator(sp.csr_matrix(c.matrix, dtype=complex), float(c.rate), c.tag))
    if basis is not None and basis.dim != H.shape[0]:
        raise ValueError(f"basis dimension {basis.dim} does not match Hamiltonian {H.shape[0]}")
    return SuperOperator(H, tuple(checked), basis)


def pairing_adjoint(L: SuperOperator) -> SuperOperator:
    """Adjoint with respect to ``<Psi, X> = Tr[Psi X]``."""
    return SuperOperator(L.hamiltonian, L.collapse_ops, L.basis, adjoint=not L.adjoint,
                         max_dim_vec=L.max_dim_vec)
