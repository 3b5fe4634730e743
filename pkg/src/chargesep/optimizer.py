"""Environment optimization: maximize ``P_II / P_I`` over model parameters.

A real-coded genetic algorithm (elitism, Gaussian mutation, gene-swap
crossover) locates a good region, then projected finite-difference gradient
ascent polishes the best individual.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .branching import branching_probabilities, solve_functional, steady_states
from .exceptions import ChargeSepError
from .liouvillian import assemble
from .model import ModelParams
from .operators import build_collapse_ops, build_hamiltonian
from .validation import check_fraction, check_positive_int

logger = logging.getLogger(__name__)

__all__ = [
    "SearchSpace",
    "Genotype",
    "GaConfig",
    "StepConfig",
    "InitialStateSpec",
    "GaHistory",
    "fitness",
    "make_fitness",
    "ga_run",
    "gradient_refine",
    "generation_split",
    "FITNESS_EPS",
]

FITNESS_EPS = 1e-12

DEFAULT_BOUNDS = {
    "g": (0.0, 6.0),
    "nu1": (1.0, 40.0),
    "nu2": (1.0, 40.0),
    "gamma1": (0.0, 1.0),
    "gamma2": (0.0, 1.0),
    "Gamma.e": (0.0, 1.0),
    "Gamma.ct": (0.0, 1.0),
    "alpha.1.ct": (-4.0, 4.0),
    "alpha.2.ct": (-4.0, 4.0),
    "alpha.1.g": (-4.0, 4.0),
    "alpha.2.g": (-4.0, 4.0),
    "beta.e": (-1.0, 1.0),
    "beta.ct": (-1.0, 1.0),
}
MASK_11 = ("g", "nu1", "nu2", "gamma1", "gamma2", "Gamma.e", "Gamma.ct",
           "alpha.1.ct", "alpha.2.ct", "beta.e", "beta.ct")
MASK_13 = MASK_11 + ("alpha.1.g", "alpha.2.g")


@dataclass(frozen=True)
class SearchSpace:
    """Ordered genes ``(key, lower, upper)``; keys are flat config keys.

    With ``tie_acceptor`` the acceptor displacement follows the ct gene.
    Branching does not depend on the acceptor's vibrations, so untying it
    (keeping the fixed value) only matters for the acceptor steady state,
    which must fit the truncation.
    """

    genes: tuple
    tie_acceptor: bool = True

    def __post_init__(self):
        genes = tuple((str(k), float(lo), float(hi)) for k, lo, hi in self.genes)
        if not genes:
            raise ValueError("search space needs at least one gene")
        names = [k for k, _, _ in genes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate gene names")
        for k, lo, hi in genes:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"gene {k}: bounds must be finite with lower < upper, got ({lo}, {hi})")
        object.__setattr__(self, "genes", genes)

    @classmethod
    def from_mask(cls, mask: str | Sequence[str] = "11", bounds: Mapping | None = None,
                  tie_acceptor: bool = True) -> "SearchSpace":
        """Build from ``"11"``, ``"13"`` or an explicit key list; ``bounds`` overrides defaults."""
        if isinstance(mask, str) and mask in ("11", "13"):
            keys = MASK_11 if mask == "11" else MASK_13
        elif isinstance(mask, str):
            raise ValueError(f"unknown gene mask {mask!r}; use '11', '13' or a key list")
        else:
            keys = tuple(mask)
        bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
        missing = [k for k in keys if k not in bounds]
        if missing:
            raise ValueError(f"no bounds for gene {missing[0]!r}")
        return cls(tuple((k, *bounds[k]) for k in keys), tie_acceptor)

    @property
    def names(self) -> tuple:
        return tuple(k for k, _, _ in self.genes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for _, lo, _ in self.genes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, _, hi in self.genes])

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def __len__(self) -> int:
        return len(self.genes)

    def clip(self, values) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)

    def contains(self, values) -> bool:
        v = np.asarray(values, dtype=float)
        return v.shape == (len(self),) and bool(np.all(v >= self.lower) and np.all(v <= self.upper))

    def random(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def to_changes(self, values) -> dict:
        """Flat-key changes, including the tied acceptor displacement."""
        changes = dict(zip(self.names, (float(v) for v in values)))
        for k in (1, 2) if self.tie_acceptor else ():
            if f"alpha.{k}.ct" in changes and f"alpha.{k}.a" not in changes:
                changes[f"alpha.{k}.a"] = changes[f"alpha.{k}.ct"]
        return changes

    def from_params(self, params: ModelParams) -> np.ndarray:
        return self.clip([params.get(k) for k in self.names])


@dataclass(frozen=True, eq=False)
class Genotype:
    values: np.ndarray
    fitness: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).copy())
        self.values.setflags(write=False)

    def as_dict(self, space: SearchSpace) -> dict:
        return dict(zip(space.names, self.values.tolist()))


def generation_split(population: int, elite_frac: float, mutation_frac: float) -> tuple[int, int, int]:
    """(elites, mutants, crossovers): fractions rounded half up, crossover takes the remainder."""
    elites = math.floor(elite_frac * population + 0.5)
    mutants = math.floor(mutation_frac * population + 0.5)
    return elites, mutants, population - elites - mutants


@dataclass(frozen=True)
class GaConfig:
    population: int = 25
    elite_frac: float = 0.34
    mutation_frac: float = 0.33
    gene_change_frac: float = 0.20
    seed_pool_frac: float = 0.50
    fresh_candidates: int = 3
    generations: int = 50
    rng_seed: int = 0
    mutation_scale: float = 0.10

    def __post_init__(self):
        check_positive_int(self.population, "population", minimum=4)
        for name in ("elite_frac", "mutation_frac", "gene_change_frac", "seed_pool_frac"):
            check_fraction(getattr(self, name), name)
        check_positive_int(self.fresh_candidates, "fresh_candidates", minimum=0)
        check_positive_int(self.generations, "generations", minimum=0)
        check_positive_int(self.rng_seed, "rng_seed", minimum=0)
        if not self.mutation_scale > 0:
            raise ValueError("mutation_scale must be positive")
        elites, mutants, cross = generation_split(self.population, self.elite_frac, self.mutation_frac)
        if elites < 1 or mutants < 0 or cross < 0:
            raise ValueError(f"population split {elites}/{mutants}/{cross} is invalid")


@dataclass(frozen=True)
class StepConfig:
    rel_step: float = 1e-3
    max_backtracks: int = 20
    rel_gain_tol: float = 1e-6
    max_iter: int = 200


@dataclass(frozen=True)
class InitialStateSpec:
    """Names a :mod:`chargesep.states` constructor and its arguments.

    kind is ``cluster`` (N1, N2, dN2), ``parent`` (n1, n2) or ``level`` (n1, n2).
    """

    kind: str = "cluster"
    args: tuple = (11, 13, 3)

    def build(self, params: ModelParams):
        from . import states

        basis = params.basis
        if self.kind == "cluster":
            return states.cluster_initial_state(basis, *self.args).matrix
        if self.kind == "parent":
            return states.parent_level_state(params, basis, *self.args).matrix
        if self.kind == "level":
            return _level_state(basis, *self.args)
        raise ValueError(f"unknown initial state kind {self.kind!r}")


def _level_state(basis, n1, n2):
    from .model import ElectronicState

    rho = np.zeros((basis.dim, basis.dim), dtype=complex)
    i = basis.index_of(ElectronicState.E, n1, n2)
    rho[i, i] = 1.0
    return rho


def fitness(genotype, fixed_params: ModelParams, initial_state_spec: InitialStateSpec,
            space: SearchSpace | None = None, *, tol: float = 1e-8) -> float:
    """``P_II / max(P_I, 1e-12)`` for the genotype applied on top of ``fixed_params``.

    Any pipeline failure (truncation guard, solver) scores 0.
    """
    if space is None:
        space = SearchSpace.from_mask("11")
    values = genotype.values if isinstance(genotype, Genotype) else np.asarray(genotype, dtype=float)
    if not space.contains(values):
        raise ValueError("genotype outside the search-space bounds")
    try:
        params = fixed_params.updated(space.to_changes(values))
        basis = params.basis
        L = assemble(build_hamiltonian(params, basis), build_collapse_ops(params, basis), basis)
        rho_I, rho_II = steady_states(params, basis)
        psi = solve_functional(L, rho_I, rho_II, tol=tol)
        result = branching_probabilities(psi, initial_state_spec.build(params), validate=False)
    except (ChargeSepError, ValueError, np.linalg.LinAlgError) as exc:
        logger.info("fitness evaluation failed (%s): %s", type(exc).__name__, exc)
        return 0.0
    return result.p_II / max(result.p_I, FITNESS_EPS)


def make_fitness(fixed_params: ModelParams, initial_state_spec: InitialStateSpec,
                 space: SearchSpace, **kwargs) -> Callable[[np.ndarray], float]:
    def evaluate(values):
        return fitness(values, fixed_params, initial_state_spec, space, **kwargs)
    return evaluate


@dataclass
class GaHistory:
    best: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    best_values: list = field(default_factory=list)


def _evaluate_all(evaluate, vectors, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(evaluate, vectors))
    return [evaluate(v) for v in vectors]


def _individual_rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, generation, index]))


def _mutate(parent: np.ndarray, space: SearchSpace, config: GaConfig, rng) -> np.ndarray:
    n_change = max(1, math.ceil(config.gene_change_frac * len(space)))
    genes = rng.choice(len(space), size=n_change, replace=False)
    child = parent.copy()
    child[genes] += rng.normal(0.0, config.mutation_scale * space.span[genes])
    return space.clip(child)


def _crossover(a: np.ndarray, b: np.ndarray, space: SearchSpace, config: GaConfig, rng) -> np.ndarray:
    n_change = max(1, math.ceil(config.gene_change_frac * len(space)))
    genes = rng.choice(len(space), size=n_change, replace=False)
    child = a.copy()
    child[genes] = b[genes]
    return child


def ga_run(space: SearchSpace, config: GaConfig, fixed_params: ModelParams | None = None,
           initial_state_spec: InitialStateSpec | None = None, *,
           evaluate: Callable[[np.ndarray], float] | None = None,
           initial: Sequence | None = None, workers: int = 1,
           checkpoint=None) -> tuple[Genotype, GaHistory]:
    """Run the genetic algorithm.

    Every generation keeps the elites unchanged, adds mutants of and
    crossovers between members of the seeding pool (the better half of the
    parents plus ``fresh_candidates`` random genotypes, drawn uniformly).
    Each individual owns an RNG stream derived from ``(rng_seed, generation,
    index)`` so results do not depend on evaluation order or ``workers``.

    Parameters
    ----------
    evaluate : callable, optional
        Fitness of a value vector; defaults to :func:`fitness` with
        ``fixed_params`` and ``initial_state_spec``.
    initial : sequence of vectors, optional
        Seeds for the first generation (the rest are random).
    checkpoint : writable text stream, optional
        Receives one JSON line per generation.
    """
    if evaluate is None:
        if fixed_params is None or initial_state_spec is None:
            raise ValueError("need either evaluate or fixed_params and initial_state_spec")
        evaluate = make_fitness(fixed_params, initial_state_spec, space)
    P = config.population
    n_elite, n_mut, n_cross = generation_split(P, config.elite_frac, config.mutation_frac)

    vectors = [space.clip(v) for v in (initial or [])][:P]
    for idx in range(len(vectors), P):
        vectors.append(space.random(_individual_rng(config.rng_seed, 0, idx)))
    scores = _evaluate_all(evaluate, vectors, workers)
    history = GaHistory()

    def record(gen, vectors, scores):
        order = np.argsort(-np.asarray(scores), kind="stable")
        best = order[0]
        history.best.append(float(scores[best]))
        history.mean.append(float(np.mean(scores)))
        history.best_values.append(vectors[best].tolist())
        if checkpoint is not None:
            checkpoint.write(json.dumps({
                "generation": gen,
                "best_fitness": float(scores[best]),
                "mean_fitness": float(np.mean(scores)),
                "best": dict(zip(space.names, vectors[best].tolist())),
            }, sort_keys=True) + "\n")
            checkpoint.flush()
        logger.info("generation %d: best %.6g mean %.6g", gen, scores[best], np.mean(scores))
        return order

    order = record(0, vectors, scores)
    for gen in range(1, config.generations + 1):
        ranked = [vectors[i] for i in order]
        ranked_scores = [scores[i] for i in order]
        n_pool = max(2, math.floor(config.seed_pool_frac * P + 0.5))
        pool = ranked[:n_pool]
        for j in range(config.fresh_candidates):
            pool.append(space.random(_individual_rng(config.rng_seed, gen, P + j)))
        children = []
        for idx in range(n_mut + n_cross):
            rng = _individual_rng(config.rng_seed, gen, idx)
            if idx < n_mut:
                parent = pool[rng.integers(len(pool))]
                children.append(_mutate(parent, space, config, rng))
            else:
                i, j = rng.choice(len(pool), size=2, replace=False)
                children.append(_crossover(pool[i], pool[j], space, config, rng))
        child_scores = _evaluate_all(evaluate, children, workers)
        vectors = ranked[:n_elite] + children
        scores = ranked_scores[:n_elite] + list(child_scores)
        order = record(gen, vectors, scores)

    best = order[0]
    return Genotype(vectors[best], float(scores[best])), history


def gradient_refine(genotype: Genotype, space: SearchSpace,
                    step_cfg: StepConfig | None = None, *,
                    evaluate: Callable[[np.ndarray], float]) -> Genotype:
    """Projected gradient ascent with central differences and backtracking.

    Never returns a genotype with lower fitness than the input.
    """
    cfg = step_cfg or StepConfig()
    x = space.clip(genotype.values)
    f = genotype.fitness if genotype.fitness is not None else evaluate(x)
    h = cfg.rel_step * space.span
    for it in range(cfg.max_iter):
        grad = np.zeros_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h[i]
            hi, lo = space.clip(x + e), space.clip(x - e)
            width = hi[i] - lo[i]
            if width > 0:
                grad[i] = (evaluate(hi) - evaluate(lo)) / width
        # scale-free step: move each gene in units of its range
        direction = grad * space.span ** 2
        norm = np.linalg.norm(direction / space.span)
        if norm == 0:
            break
        step = 0.1 / norm
        improved = False
        for _ in range(cfg.max_backtracks + 1):
            trial = space.clip(x + step * direction)
            ft = evaluate(trial)
            if ft > f:
                improved = True
                break
            step /= 2
        if not improved:
            break
        gain = (ft - f) / max(abs(f), FITNESS_EPS)
        x, f = trial, ft
        logger.debug("refine iteration %d: fitness %.8g", it, f)
        if gain < cfg.rel_gain_tol:
            break
    return replace(genotype, values=x, fitness=float(f))
