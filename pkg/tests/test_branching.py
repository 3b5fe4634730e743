import logging

import numpy as np
import pytest
import scipy.sparse as sp

from chargesep.branching import (BranchingFunctional, branching_probabilities, level_probabilities,
                                 solve_functional, steady_states, verify_resonance)
from chargesep.exceptions import NumericalError
from chargesep.liouvillian import assemble, pairing_adjoint
from chargesep.model import CT, E, G, A, optimized_params
from chargesep.operators import CollapseOperator, CollapseTag
from chargesep.states import cluster_initial_state

from conftest import build_liouvillian, random_density, small_params


def solve(params, **kw):
    L = build_liouvillian(params)
    rI, rII = steady_states(params)
    return L, (rI, rII), solve_functional(L, rI, rII, **kw)


def e_state(params, n1=0, n2=0):
    b = params.basis
    rho = np.zeros((b.dim, b.dim), dtype=complex)
    i = b.index_of(E, n1, n2)
    rho[i, i] = 1
    return rho


@pytest.fixture(scope="module")
def solved():
    return solve(small_params())


def test_steady_states_undisplaced():
    p = small_params()
    rI, rII = steady_states(p)
    b = p.basis
    expect = np.zeros((b.dim, b.dim))
    expect[b.index_of(G, 0, 0), b.index_of(G, 0, 0)] = 1
    assert np.array_equal(rI, expect)
    assert rII[b.index_of(A, 0, 0), b.index_of(A, 0, 0)] == 1


def test_steady_state_poisson_marginal():
    p = small_params(trunc=(20, 4), alpha=((0.5, 0.0, 0.0, 0.0), (0.0,) * 4))
    rI, _ = steady_states(p)
    b = p.basis
    diag = np.real(np.diag(rI))[b.surface(G)].reshape(b.trunc)
    marginal = diag.sum(axis=1)
    assert marginal @ np.arange(20) == pytest.approx(0.25, abs=1e-10)
    assert np.trace(rI) == pytest.approx(1)


def test_steady_state_residual_optimized():
    p = optimized_params()
    L = build_liouvillian(p)
    for rho in steady_states(p):
        assert np.linalg.norm(L.apply(rho)) <= 1e-8


def test_normalization_pair_and_residual(solved):
    L, (rI, rII), f = solved
    assert np.trace(rII @ f.psi) == pytest.approx(1, abs=1e-8)
    assert abs(np.trace(rI @ f.psi)) <= 1e-8
    assert f.residual <= 1e-8
    assert np.array_equal(f.psi, f.psi.conj().T)
    r = pairing_adjoint(L).apply(f.psi) + rII * np.trace(rII @ f.psi) + np.trace(rI @ f.psi) * np.eye(L.dim_op) - rII
    assert np.linalg.norm(r) <= 1e-8


@pytest.mark.parametrize("formulation, preconditioner", [
    ("channel", "jacobi"), ("channel", "none"), ("completed", "jacobi"),
])
def test_solver_variants_agree(formulation, preconditioner):
    p = small_params(gamma_vib=(0.3, 0.2))  # nondegenerate steady manifold for the completed system
    _, _, ref = solve(p)
    _, _, f = solve(p, formulation=formulation, preconditioner=preconditioner)
    assert np.abs(f.psi - ref.psi).max() <= 1e-7


def test_unpreconditioned_completed_tiny():
    p = small_params(trunc=(3, 3), gamma_vib=(0.3, 0.2))
    _, _, ref = solve(p)
    _, _, f = solve(p, formulation="completed", preconditioner="none")
    assert np.abs(f.psi - ref.psi).max() <= 1e-7


def test_custom_observable():
    p = small_params(gamma_vib=(0.3, 0.2))
    L, (rI, rII), ref = solve(p, formulation="completed")
    b = p.basis
    O = np.zeros((b.dim, b.dim), dtype=complex)
    O[b.surface(A), b.surface(A)] = np.eye(b.vib_dim) / b.vib_dim
    O = O + rII
    f = solve_functional(L, rI, rII, O, formulation="completed")
    assert np.abs(f.psi - ref.psi).max() <= 1e-7


def test_residual_history_monotone(solved):
    hist = np.array(solved[2].residual_history)
    assert hist.size > 0
    assert np.all(np.diff(hist) <= 1e-12 * hist[:-1] + 1e-15)


def test_three_level_absorbing_toy():
    # g isolated, e decays into the absorbing state a
    H = sp.csr_matrix((3, 3), dtype=complex)
    C = sp.csr_matrix(([1.0], ([2], [1])), shape=(3, 3), dtype=complex)
    L = assemble(H, [CollapseOperator(C, 0.4, CollapseTag.SEP)])
    rI, rII = np.diag([1.0, 0, 0]).astype(complex), np.diag([0, 0, 1.0]).astype(complex)
    for pre in ("jacobi", "none"):
        f = solve_functional(L, rI, rII, preconditioner=pre)
        assert np.allclose(f.psi, np.diag([0, 1, 1]), atol=1e-10)
        assert branching_probabilities(f, np.diag([0, 1.0, 0])).p_II == pytest.approx(1, abs=1e-10)


def test_linearity(solved, rng):
    L, _, f = solved
    D = L.dim_op
    r1, r2 = random_density(D, rng), random_density(D, rng)
    a = 0.37
    mix = branching_probabilities(f, a * r1 + (1 - a) * r2).p_II
    parts = a * branching_probabilities(f, r1).p_II + (1 - a) * branching_probabilities(f, r2).p_II
    assert mix == pytest.approx(parts, abs=1e-10)


def test_probabilities_sum_and_bounds(solved, rng):
    L, _, f = solved
    for _ in range(10):
        r = branching_probabilities(f, random_density(L.dim_op, rng, rank=3))
        assert 0 <= r.p_II <= 1 and r.deviation <= 1e-6
        assert r.p_I + r.p_II == pytest.approx(1, abs=1e-12)


def test_analytic_limits():
    p = small_params(rate_rec=0.0)
    _, _, f = solve(p)
    assert branching_probabilities(f, e_state(p, 1, 2)).p_II == pytest.approx(1, abs=1e-8)
    p = small_params(g_coupling=0.0)
    _, (rI, rII), f = solve(p)
    assert branching_probabilities(f, e_state(p, 1, 2)).p_II == pytest.approx(0, abs=1e-8)
    assert branching_probabilities(f, rII).p_II == 1.0


def test_clamp_and_deviation():
    psi = np.diag([1 + 5e-7, 0.0]).astype(complex)
    f = BranchingFunctional(psi=psi, residual=0.0, solver_iters=0)
    rho = np.diag([1.0, 0]).astype(complex)
    r = branching_probabilities(f, rho)
    assert r.p_II == 1.0 and r.deviation == pytest.approx(5e-7)
    bad = BranchingFunctional(psi=np.diag([1 + 1e-4, 0]).astype(complex), residual=0.0, solver_iters=0)
    with pytest.raises(NumericalError):
        branching_probabilities(bad, rho)
    with pytest.raises(ValueError):
        branching_probabilities(f, np.diag([0.5, 0.6]))


def test_level_probabilities_match_full(solved):
    L, _, f = solved
    p = small_params()
    b = p.basis
    idx = [b.index_of(E, 1, 2), b.index_of(CT, 0, 3)]
    fast = level_probabilities(f, idx)
    for i, value in zip(idx, fast):
        rho = np.zeros((b.dim, b.dim))
        rho[i, i] = 1
        assert branching_probabilities(f, rho).p_II == pytest.approx(value, abs=1e-12)


def test_branching_independent_of_acceptor_vibrations():
    base = small_params(trunc=(10, 10))
    _, _, f0 = solve(base)
    moved = base.updated({"alpha.1.a": 0.3, "alpha.2.a": -0.2, "beta.a": 0.2})
    _, _, f1 = solve(moved)
    T = base.basis.indices([E, CT])
    assert np.abs(f0.psi[np.ix_(T, T)] - f1.psi[np.ix_(T, T)]).max() <= 1e-8


def test_leakage_guard_flags_small_basis():
    p = small_params(trunc=(3, 3), alpha=((0.0, 0.0, 1.0, 0.0), (0.0, 0.0, -1.0, 0.0)))
    _, _, f = solve(p, leakage=True)
    r = branching_probabilities(f, cluster_initial_state(p.basis, 1, 1, 0).matrix)
    assert r.leakage > 1e-6 and not r.trusted
    big = p.updated({"trunc1": 12, "trunc2": 12})
    _, _, f = solve(big, leakage=True)
    r2 = branching_probabilities(f, cluster_initial_state(big.basis, 1, 1, 0).matrix)
    assert r2.leakage < r.leakage


def test_channel_rejects_leaky_surface():
    p = small_params()
    L, (rI, rII), _ = solve(p)
    # pretend the channel-I state lives on e, which is coupled to ct
    b = p.basis
    fake = np.zeros_like(rI)
    i = b.index_of(E, 0, 0)
    fake[i, i] = 1
    with pytest.raises(ValueError):
        solve_functional(L, fake, rII)


def test_verify_resonance_examples():
    r = verify_resonance(optimized_params())
    assert r.kappa == 3 and not r.swapped
    assert r.mismatch == pytest.approx(abs(30 - (3 * 13.09 - 9.28)) / 30)
    p = small_params(eps=(0, 0, 5.0, 0), nu=(1.0, 6.0))
    r = verify_resonance(p)
    assert r.kappa == 1 and r.mismatch == 0
    r = verify_resonance(small_params(eps=(0, 0, 5.0, 0), nu=(2.0, 6.0)))
    assert r.kappa == 1 and r.swapped is False and r.mismatch == pytest.approx(0.2)
    r = verify_resonance(small_params(eps=(0, 0, 5.0, 0), nu=(6.0, 1.0)))
    assert r.swapped and r.mismatch == 0
    r = verify_resonance(small_params(eps=(0, 0, 1.0, 0), nu=(40.0, 0.5)), kappa_max=10)
    assert r.mismatch > 1


def test_info_logged_for_observable_in_channel_mode(solved, caplog):
    L, (rI, rII), _ = solved
    with caplog.at_level(logging.INFO, logger="chargesep.branching"):
        solve_functional(L, rI, rII, rII)
    assert "completion operator" in caplog.text
