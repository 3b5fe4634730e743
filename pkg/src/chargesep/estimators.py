"""scikit-learn style front ends.

``BranchingEstimator`` fits the branching functional for one parameter set
and then predicts ``P_II`` for any batch of initial density matrices.
``GeneticOptimizer`` wraps the genetic search plus gradient refinement.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .branching import branching_probabilities, solve_functional, steady_states, verify_resonance
from .liouvillian import assemble
from .model import ModelParams, optimized_params
from .operators import build_collapse_ops, build_hamiltonian
from .optimizer import (GaConfig, Genotype, InitialStateSpec, SearchSpace, StepConfig, ga_run,
                        gradient_refine, make_fitness)
from .validation import check_density_operator

__all__ = ["BranchingEstimator", "GeneticOptimizer"]


def _as_batch(X, dim):
    if hasattr(X, "matrix"):
        X = X.matrix
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (dim, dim):
        raise ValueError(f"expected density matrices of shape (n, {dim}, {dim}), got {X.shape}")
    return X


class BranchingEstimator(BaseEstimator):
    """Branching probabilities for one model.

    Parameters
    ----------
    params : ModelParams, optional
        Model; defaults to the optimized environment.
    overrides : dict, optional
        Flat-key changes applied on top of ``params`` at fit time.
    tol, formulation, preconditioner, leakage
        Passed to :func:`chargesep.branching.solve_functional`.

    Attributes
    ----------
    params_ : ModelParams
    functional_ : BranchingFunctional
    """

    def __init__(self, params=None, overrides=None, tol=1e-8, formulation="auto",
                 preconditioner="auto", leakage=False):
        self.params = params
        self.overrides = overrides
        self.tol = tol
        self.formulation = formulation
        self.preconditioner = preconditioner
        self.leakage = leakage

    def fit(self, X=None, y=None):
        """Solve for the branching functional; ``X`` and ``y`` are ignored."""
        params = optimized_params() if self.params is None else self.params
        if not isinstance(params, ModelParams):
            raise TypeError("params must be a ModelParams instance")
        if self.overrides:
            params = params.updated(dict(self.overrides))
        basis = params.basis
        self.params_ = params
        self.basis_ = basis
        self.hamiltonian_ = build_hamiltonian(params, basis)
        self.liouvillian_ = assemble(self.hamiltonian_, build_collapse_ops(params, basis), basis)
        self.steady_states_ = steady_states(params, basis)
        self.functional_ = solve_functional(
            self.liouvillian_, *self.steady_states_, tol=self.tol, formulation=self.formulation,
            preconditioner=self.preconditioner, leakage=self.leakage,
        )
        return self

    def _results(self, X):
        check_is_fitted(self, "functional_")
        batch = _as_batch(X, self.basis_.dim)
        for rho in batch:
            check_density_operator(rho, dim=self.basis_.dim)
        return [branching_probabilities(self.functional_, rho, validate=False) for rho in batch]

    def predict(self, X) -> np.ndarray:
        """``P_II`` for each density matrix in ``X``."""
        return np.array([r.p_II for r in self._results(X)])

    def predict_proba(self, X) -> np.ndarray:
        """Columns ``(P_I, P_II)``."""
        return np.array([[r.p_I, r.p_II] for r in self._results(X)])

    def score(self, X, y=None) -> float:
        """Mean ``P_II`` over ``X``."""
        return float(np.mean(self.predict(X)))

    def resonance(self):
        check_is_fitted(self, "params_")
        return verify_resonance(self.params_)


class GeneticOptimizer(BaseEstimator):
    """Maximize ``P_II / P_I`` with the genetic algorithm and gradient refinement.

    ``fit`` accepts optional seed genotypes as rows of ``X``.
    """

    def __init__(self, fixed_params=None, mask="11", bounds=None, initial_state=("cluster", (11, 13, 3)),
                 population=25, generations=50, rng_seed=0, fresh_candidates=3, refine=True,
                 workers=1, tol=1e-8, checkpoint=None, tie_acceptor=True):
        self.fixed_params = fixed_params
        self.mask = mask
        self.bounds = bounds
        self.initial_state = initial_state
        self.population = population
        self.generations = generations
        self.rng_seed = rng_seed
        self.fresh_candidates = fresh_candidates
        self.refine = refine
        self.workers = workers
        self.tol = tol
        self.checkpoint = checkpoint
        self.tie_acceptor = tie_acceptor

    def fit(self, X=None, y=None):
        fixed = optimized_params() if self.fixed_params is None else self.fixed_params
        space = SearchSpace.from_mask(self.mask, self.bounds, self.tie_acceptor)
        config = GaConfig(population=self.population, generations=self.generations,
                          rng_seed=self.rng_seed, fresh_candidates=self.fresh_candidates)
        spec = InitialStateSpec(self.initial_state[0], tuple(self.initial_state[1]))
        evaluate = make_fitness(fixed, spec, space, tol=self.tol)
        initial = None if X is None else [np.asarray(row, dtype=float) for row in np.atleast_2d(X)]
        best, history = ga_run(space, config, evaluate=evaluate, initial=initial,
                               workers=self.workers, checkpoint=self.checkpoint)
        self.ga_best_ = best
        self.history_ = history
        self.best_ = gradient_refine(best, space, StepConfig(), evaluate=evaluate) if self.refine else best
        self.space_ = space
        self.best_params_ = fixed.updated(space.to_changes(self.best_.values))
        self.resonance_ = verify_resonance(self.best_params_)
        return self

    def predict(self, X) -> np.ndarray:
        """Fitness of each genotype row of ``X`` under the fitted setup."""
        if not hasattr(self, "space_"):
            raise NotFittedError("GeneticOptimizer is not fitted yet")
        fixed = optimized_params() if self.fixed_params is None else self.fixed_params
        spec = InitialStateSpec(self.initial_state[0], tuple(self.initial_state[1]))
        evaluate = make_fitness(fixed, spec, self.space_, tol=self.tol)
        return np.array([evaluate(self.space_.clip(row)) for row in np.atleast_2d(X)])

    @property
    def best_genotype(self) -> Genotype:
        check_is_fitted(self, "best_")
        return self.best_
