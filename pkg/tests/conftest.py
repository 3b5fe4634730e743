import numpy as np
import pytest

from chargesep.liouvillian import assemble
from chargesep.model import ModelParams
from chargesep.operators import build_collapse_ops, build_hamiltonian


def small_params(trunc=(5, 6), **overrides) -> ModelParams:
    """Toy model with undisplaced g and a surfaces so steady states fit any truncation."""
    base = dict(
        eps=(0.0, 0.0, 2.0, 0.0),
        g_coupling=0.5,
        nu=(1.0, 1.5),
        alpha=((0.0, 0.0, 0.3, 0.0), (0.0, 0.0, -0.5, 0.0)),
        beta=(0.0, -0.1, 0.1, 0.0),
        gamma_vib=(0.3, 0.0),
        gamma_deph=(0.0, 0.05, 0.05, 0.0),
        rate_sep=0.5,
        rate_rec=0.5,
        trunc=trunc,
    )
    base.update(overrides)
    return ModelParams(**base)


def build_liouvillian(params):
    basis = params.basis
    return assemble(build_hamiltonian(params, basis), build_collapse_ops(params, basis), basis)


def random_density(dim, rng, rank=None):
    rank = dim if rank is None else rank
    A = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = A @ A.conj().T
    return rho / np.trace(rho)


def random_matrix(dim, rng):
    return rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    params = small_params()
    return params, build_liouvillian(params)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line and print it immediately."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
