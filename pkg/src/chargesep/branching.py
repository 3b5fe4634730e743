"""Branching between the recombination (I) and separation (II) channels.

A single adjoint solve gives an operator ``psi`` such that
``P_II = Tr[psi rho0]`` for every initial state ``rho0``.  ``psi`` solves

    L*[psi] + O Tr[rho_II psi] + 1 Tr[rho_I psi] = O,

where ``rho_I``/``rho_II`` are the channel steady states and ``O`` is any
operator that makes the completed map full rank (default ``O = rho_II``).

Two formulations are available:

``completed``
    The equation above on the full operator space.  Valid when the steady
    manifold of ``L`` is exactly two-dimensional.
``channel``
    Uses that the channel surfaces are absorbing: ``psi`` equals the
    identity on the channel-II surface, zero on the channel-I surface, and
    its block on the remaining (transient) surfaces solves a decaying,
    full-rank equation.  The resulting ``psi`` satisfies the completed
    equation as well; unlike the completed solve it stays well posed when a
    vibrational mode does not relax and the absorbing surfaces carry extra
    steady states.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres

from .exceptions import NumericalError, SolverError
from .liouvillian import SuperOperator, pairing_adjoint
from .model import ElectronicState, ModelParams, VibronicBasis
from .operators import local_vib_state
from .validation import check_density_operator

logger = logging.getLogger(__name__)

__all__ = [
    "BranchingFunctional",
    "BranchingResult",
    "ResonanceReport",
    "steady_states",
    "solve_functional",
    "branching_probabilities",
    "verify_resonance",
    "level_probabilities",
    "LEAKAGE_THRESHOLD",
]

LEAKAGE_THRESHOLD = 1e-6
CLAMP_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class BranchingFunctional:
    """Solution of the adjoint branching equation.

    Attributes
    ----------
    psi : ndarray
        Hermitian ``D x D`` operator with ``P_II = Re Tr[psi rho0]``.
    residual : float
        Frobenius norm of the completed-equation residual relative to ``|O|``.
    solver_iters : int
        Total inner Krylov iterations.
    residual_history : tuple
        Preconditioned relative residual after every inner iteration.
    leakage_functional : ndarray or None
        Operator ``Xi`` with ``Tr[Xi rho0]`` equal to the time spent on the
        top two Fock levels; multiplied by ``leakage_rate`` this bounds the
        fraction of the transient lifetime spent at the truncation edge.
    """

    psi: np.ndarray
    residual: float
    solver_iters: int
    hermiticity_defect: float = 0.0
    residual_history: tuple = ()
    formulation: str = "channel"
    preconditioner: str = "eigen"
    leakage_functional: np.ndarray | None = field(default=None, repr=False)
    leakage_rate: float = 0.0


@dataclass(frozen=True)
class BranchingResult:
    p_I: float
    p_II: float
    deviation: float = 0.0
    leakage: float | None = None

    @property
    def trusted(self) -> bool:
        """False when the truncation-edge leakage exceeds the guard threshold."""
        return self.leakage is None or self.leakage <= LEAKAGE_THRESHOLD


@dataclass(frozen=True)
class ResonanceReport:
    kappa: int | None
    mismatch: float
    swapped: bool = False
    detuning: float = math.inf


# -- steady states ---------------------------------------------------------


def steady_states(params: ModelParams, basis: VibronicBasis | None = None):
    """Vibrational ground states of the g and a surfaces, as density operators."""
    basis = params.basis if basis is None else basis
    out = []
    for z in (ElectronicState.G, ElectronicState.A):
        vib = local_vib_state(params, basis, z, 0, 0)
        vib = vib / np.linalg.norm(vib)
        full = np.zeros(basis.dim, dtype=complex)
        full[basis.surface(z)] = vib
        out.append(np.outer(full, full.conj()))
    return tuple(out)


# -- linear algebra helpers --------------------------------------------------


def _trace_pair(A: np.ndarray, B: np.ndarray) -> complex:
    """``Tr[A B]`` without forming the product."""
    return complex(np.sum(A * B.T))


class _TransientProblem:
    """Operator ``X -> G X + X G^+ + sum_j r_j C_j^+ X C_j`` on a sub-block."""

    def __init__(self, G: sp.csr_matrix, jumps: list):
        self.G = G.tocsr()
        self.Gh = self.G.getH().tocsr()
        self.jumps = [(r, C.tocsr(), C.getH().tocsr()) for r, C in jumps if C.nnz]
        self.n = G.shape[0]
        self._eigen = None

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = self.G @ X + (self.G.conj() @ X.T).T
        for r, C, Cd in self.jumps:
            out += r * (Cd @ (C.T @ X.T).T)
        return out

    def jacobi_diagonal(self) -> np.ndarray:
        g = self.G.diagonal()
        diag = g[:, None] + g.conj()[None, :]
        for r, C, _ in self.jumps:
            c = C.diagonal()
            diag = diag + r * np.outer(c.conj(), c)
        return diag

    def eigen(self):
        if self._eigen is None:
            lam, V = np.linalg.eig(self.G.toarray())
            Vi = np.linalg.inv(V)
            ks = [(r, Vi @ (Cd @ V)) for r, _, Cd in self.jumps]
            den = lam[:, None] + lam.conj()[None, :]
            self._eigen = (V, Vi, ks, den)
            cond = np.linalg.cond(V)
            logger.debug("effective generator diagonalized, eigenvector condition %.3g", cond)
        return self._eigen

    def solve(self, B: np.ndarray, *, tol: float, preconditioner: str, restart: int,
              max_iter: int) -> tuple[np.ndarray, int, list]:
        n = self.n
        history: list[float] = []
        bnorm = np.linalg.norm(B)
        if bnorm == 0:
            return np.zeros_like(B), 0, history
        if preconditioner == "eigen":
            V, Vi, ks, den = self.eigen()
            if np.any(np.abs(den) < 1e-300):
                raise SolverError("transient block has a non-decaying mode; the branching problem is singular")
            Vih = Vi.conj().T
            rhs = (Vi @ B @ Vih).ravel()

            def matvec(z):
                Z = z.reshape(n, n)
                out = den * Z
                for r, K in ks:
                    out += r * (K @ Z @ K.conj().T)
                return out.ravel()

            inv = (1.0 / den).ravel()

            def to_x(z):
                return V @ z.reshape(n, n) @ V.conj().T
        else:
            rhs = B.ravel()

            def matvec(x):
                return self.apply(x.reshape(n, n)).ravel()

            if preconditioner == "jacobi":
                d = self.jacobi_diagonal().ravel()
                d[d == 0] = 1.0
                inv = 1.0 / d
            elif preconditioner == "none":
                inv = None
            else:
                raise ValueError(f"unknown preconditioner {preconditioner!r}")

            def to_x(x):
                return x.reshape(n, n)

        X, iters = _run_gmres(matvec, rhs, inv, target=lambda x: self.apply(to_x(x)) - B,
                              tol=tol, bnorm=bnorm, restart=restart, max_iter=max_iter,
                              history=history)
        return to_x(X), iters, history


def _run_gmres(matvec, rhs, inv, *, target, tol, bnorm, restart, max_iter, history):
    """Restarted GMRES, re-entered with a warm start until the true residual
    (``|target(x)|``) meets ``tol * bnorm`` or the iteration budget is spent."""
    size = rhs.size
    A = LinearOperator((size, size), matvec=matvec, dtype=complex)
    M = None if inv is None else LinearOperator((size, size), matvec=lambda v: inv * v, dtype=complex)
    x = None
    iters = 0
    rtol = tol
    residual = math.inf
    while iters < max_iter:
        cycles = max(1, (max_iter - iters) // restart)
        before = len(history)
        x, info = gmres(A, rhs, x0=x, rtol=rtol, restart=restart, maxiter=cycles, M=M,
                        callback=history.append, callback_type="pr_norm")
        iters += len(history) - before
        residual = np.linalg.norm(target(x)) / bnorm
        if residual <= tol:
            return x, iters
        if len(history) == before:
            break
        rtol = max(rtol * 0.1, 1e-15)
    raise SolverError(
        f"Krylov solve did not converge: relative residual {residual:.3e} > {tol:.1e} "
        f"after {iters} iterations"
    )


# -- the functional --------------------------------------------------------------


def _support_surface(rho: np.ndarray, basis: VibronicBasis) -> ElectronicState:
    weights = [np.linalg.norm(rho[basis.surface(z), :]) for z in ElectronicState]
    total = sum(weights)
    z = int(np.argmax(weights))
    if total == 0 or weights[z] < total * (1 - 1e-12):
        raise ValueError("steady state must be supported on a single electronic surface")
    return ElectronicState(z)


def _check_absorbing(L: SuperOperator, absorbing: list, transient: list):
    T = np.asarray(transient)
    for z in absorbing:
        idx = np.arange(L.basis.surface(z).start, L.basis.surface(z).stop)
        if L.hamiltonian[idx][:, T].nnz or L.hamiltonian[T][:, idx].nnz:
            raise ValueError(f"surface {z.label} is coupled coherently to the transient surfaces")
        for c in L.active_ops:
            if c.matrix[T][:, idx].count_nonzero():
                raise ValueError(f"collapse operator {c.tag} moves population out of surface {z.label}")


def _completed_residual(Ladj: SuperOperator, psi, rho_I, rho_II, O) -> float:
    r = Ladj.apply(psi) + O * _trace_pair(rho_II, psi) + np.eye(psi.shape[0]) * _trace_pair(rho_I, psi) - O
    return float(np.linalg.norm(r) / np.linalg.norm(O))


def solve_functional(
    L: SuperOperator,
    rho_I: np.ndarray,
    rho_II: np.ndarray,
    observable: np.ndarray | None = None,
    tol: float = 1e-8,
    *,
    formulation: str = "auto",
    preconditioner: str = "auto",
    restart: int = 30,
    max_iter: int = 3000,
    leakage: bool = False,
) -> BranchingFunctional:
    """Solve the adjoint branching equation for ``psi``.

    Parameters
    ----------
    L : SuperOperator
        Forward Lindblad generator.  The ``channel`` formulation needs
        ``L.basis`` to locate the electronic surfaces.
    rho_I, rho_II : ndarray
        Steady states of the recombination and separation channels.
    observable : ndarray, optional
        Completion operator ``O``; defaults to ``rho_II``.
    tol : float
        Required relative residual of the completed equation.
    formulation : {"auto", "channel", "completed"}
        ``auto`` picks ``channel`` whenever a basis is attached.
    preconditioner : {"auto", "eigen", "jacobi", "none"}
        Diagonal preconditioner, either in the Fock basis (``jacobi``) or
        in the eigenbasis of the effective non-Hermitian generator
        ``iH - K/2`` (``eigen``, channel formulation only).
    leakage : bool
        Also solve for the truncation-edge residence functional.
    """
    O = rho_II if observable is None else np.asarray(observable, dtype=complex)
    D = L.dim_op
    for name, M in (("rho_I", rho_I), ("rho_II", rho_II), ("observable", O)):
        if M.shape != (D, D):
            raise ValueError(f"{name} has shape {M.shape}, expected {(D, D)}")
    if formulation == "auto":
        formulation = "channel" if L.basis is not None else "completed"
    if preconditioner == "auto":
        preconditioner = "eigen" if formulation == "channel" else "jacobi"
    Lfwd = pairing_adjoint(L) if L.adjoint else L
    Ladj = pairing_adjoint(Lfwd)

    leak_op = None
    leak_rate = 0.0
    if formulation == "channel":
        if L.basis is None:
            raise ValueError("the channel formulation needs a basis attached to the superoperator")
        if observable is not None:
            logger.info("channel formulation: the completion operator does not enter the solve")
        basis = L.basis
        z_I = _support_surface(rho_I, basis)
        z_II = _support_surface(rho_II, basis)
        transient_states = [z for z in ElectronicState if z not in (z_I, z_II)]
        T = np.asarray(basis.indices(transient_states))
        _check_absorbing(Lfwd, [z_I, z_II], list(T))
        psi = np.zeros((D, D), dtype=complex)
        sl = basis.surface(z_II)
        psi[sl, sl] = np.eye(basis.vib_dim)
        G = Lfwd.effective_generator[T][:, T]
        jumps = [(c.rate, c.matrix[T][:, T]) for c in Lfwd.active_ops]
        problem = _TransientProblem(G, jumps)
        # the fixed channel-II block feeds the transient block through the jumps
        B = -Ladj.apply(psi)[np.ix_(T, T)]
        X, iters, history = problem.solve(B, tol=tol / 10, preconditioner=preconditioner,
                                          restart=restart, max_iter=max_iter)
        psi[np.ix_(T, T)] = X
        if leakage:
            edge = np.tile(basis.edge_mask(), len(transient_states)).astype(complex)
            Xi, extra, _ = problem.solve(-np.diag(edge), tol=tol, preconditioner=preconditioner,
                                         restart=restart, max_iter=max_iter)
            iters += extra
            leak_op = np.zeros((D, D), dtype=complex)
            leak_op[np.ix_(T, T)] = (Xi + Xi.conj().T) / 2
            rates = [c.rate for c in Lfwd.active_ops
                     if c.matrix[:, T].count_nonzero() and not c.matrix[np.ix_(T, T)].count_nonzero()]
            leak_rate = max(rates) if rates else 0.0
    elif formulation == "completed":
        if preconditioner == "eigen":
            raise ValueError("the eigen preconditioner requires the channel formulation")
        if leakage:
            raise ValueError("the leakage functional requires the channel formulation")
        ident = np.eye(D)

        def completed(X):
            return Ladj.apply(X) + O * _trace_pair(rho_II, X) + ident * _trace_pair(rho_I, X)

        inv = None
        if preconditioner == "jacobi":
            G = Lfwd.effective_generator.diagonal()
            d = G[:, None] + G.conj()[None, :]
            for c in Lfwd.active_ops:
                cd = c.matrix.diagonal()
                d = d + c.rate * np.outer(cd.conj(), cd)
            d = d + O * rho_II.T + np.diag(np.diag(rho_I))
            d[d == 0] = 1.0
            inv = (1.0 / d).ravel()
        elif preconditioner != "none":
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        history = []
        x, iters = _run_gmres(lambda v: completed(v.reshape(D, D)).ravel(), O.ravel().astype(complex), inv,
                              target=lambda v: completed(v.reshape(D, D)) - O, tol=tol / 10,
                              bnorm=np.linalg.norm(O), restart=restart, max_iter=max_iter,
                              history=history)
        psi = x.reshape(D, D)
    else:
        raise ValueError(f"unknown formulation {formulation!r}")

    defect = float(np.linalg.norm(psi - psi.conj().T) / max(np.linalg.norm(psi), 1e-300))
    if defect > 1e-10:
        logger.info("branching functional hermiticity defect %.3e before symmetrization", defect)
    psi = (psi + psi.conj().T) / 2
    residual = _completed_residual(Ladj, psi, rho_I, rho_II, O)
    if residual > tol:
        raise SolverError(f"branching functional residual {residual:.3e} exceeds tolerance {tol:.1e}")
    return BranchingFunctional(
        psi=psi, residual=residual, solver_iters=iters, hermiticity_defect=defect,
        residual_history=tuple(history), formulation=formulation, preconditioner=preconditioner,
        leakage_functional=leak_op, leakage_rate=leak_rate,
    )


def branching_probabilities(functional: BranchingFunctional, rho0: np.ndarray, *,
                            validate: bool = True) -> BranchingResult:
    """Evaluate ``P_II = Re Tr[psi rho0]`` and ``P_I = 1 - P_II``."""
    rho0 = np.asarray(rho0)
    if validate:
        check_density_operator(rho0)
    raw = _trace_pair(functional.psi, rho0).real
    deviation = max(0.0, -raw, raw - 1.0)
    if deviation > CLAMP_TOLERANCE:
        raise NumericalError(
            f"P_II = {raw:.8f} lies outside [0, 1] by {deviation:.2e}; "
            "truncation leakage or an inaccurate solve"
        )
    if deviation > 0:
        logger.debug("clamping P_II = %.3e into [0, 1]", raw)
    p_II = min(1.0, max(0.0, raw))
    leak = None
    if functional.leakage_functional is not None:
        leak = functional.leakage_rate * max(0.0, _trace_pair(functional.leakage_functional, rho0).real)
        if leak > LEAKAGE_THRESHOLD:
            logger.warning("truncation-edge leakage %.2e exceeds %.0e; increase the truncation",
                           leak, LEAKAGE_THRESHOLD)
    return BranchingResult(p_I=1.0 - p_II, p_II=p_II, deviation=deviation, leakage=leak)


def level_probabilities(functional: BranchingFunctional, indices) -> np.ndarray:
    """``P_II`` for pure basis states, read off the diagonal of ``psi``.

    Same clamping contract as :func:`branching_probabilities`.
    """
    raw = np.real(np.diag(functional.psi))[np.asarray(indices, dtype=int)]
    deviation = np.maximum(0.0, np.maximum(-raw, raw - 1.0))
    if deviation.size and deviation.max() > CLAMP_TOLERANCE:
        raise NumericalError(f"level P_II outside [0, 1] by {deviation.max():.2e}")
    return np.clip(raw, 0.0, 1.0)


def verify_resonance(params: ModelParams, kappa_max: int = 10) -> ResonanceReport:
    """Find the integer kappa closest to ``|delta| = kappa*nu2 - nu1``.

    The mode roles are also tried swapped (``kappa*nu1 - nu2``).
    """
    target = abs(params.delta)
    nu1, nu2 = params.nu
    best = ResonanceReport(kappa=None, mismatch=math.inf)
    for kappa in range(1, kappa_max + 1):
        for swapped, value in ((False, kappa * nu2 - nu1), (True, kappa * nu1 - nu2)):
            detuning = target - value
            if abs(detuning) < abs(best.detuning):
                best = ResonanceReport(kappa=kappa, mismatch=abs(detuning) / target,
                                       swapped=swapped, detuning=detuning)
    return best
