import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chargesep.model import optimized_params
from chargesep.optimizer import (MASK_11, MASK_13, GaConfig, Genotype, InitialStateSpec, SearchSpace,
                                 StepConfig, fitness, ga_run, generation_split, gradient_refine,
                                 make_fitness)

from conftest import small_params


def bump(values):
    """Smooth test objective with its maximum at the centre of the box."""
    v = np.asarray(values)
    return float(np.exp(-np.sum((v - 0.3) ** 2)))


SPACE = SearchSpace((("x", -1, 1), ("y", -1, 1), ("z", -1, 1), ("w", -1, 1), ("v", -1, 1)))


def test_masks_and_bounds():
    s11 = SearchSpace.from_mask("11")
    s13 = SearchSpace.from_mask("13")
    assert len(s11) == 11 and s11.names == MASK_11
    assert len(s13) == 13 and s13.names == MASK_13
    assert dict(zip(s11.names, s11.lower))["g"] == 0 and dict(zip(s11.names, s11.upper))["nu1"] == 40
    with pytest.raises(ValueError):
        SearchSpace.from_mask("12")
    with pytest.raises(ValueError):
        SearchSpace((("x", 1, 0),))


def test_acceptor_tie():
    s = SearchSpace.from_mask("11")
    changes = s.to_changes(s.from_params(optimized_params()))
    assert changes["alpha.2.a"] == changes["alpha.2.ct"]
    untied = SearchSpace.from_mask("11", tie_acceptor=False)
    assert "alpha.2.a" not in untied.to_changes(untied.lower)


def test_generation_split():
    assert generation_split(25, 0.34, 0.33) == (9, 8, 8)
    e, m, c = generation_split(10, 0.34, 0.33)
    assert (e, m, c) == (3, 3, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        GaConfig(population=3)
    with pytest.raises(ValueError):
        GaConfig(elite_frac=1.2)


def test_ga_elitism_and_bounds():
    history_best = []
    seen = []

    def evaluate(v):
        seen.append(np.asarray(v).copy())
        return bump(v)

    best, hist = ga_run(SPACE, GaConfig(generations=15, rng_seed=3), evaluate=evaluate)
    history_best = hist.best
    assert np.all(np.diff(history_best) >= 0)
    assert all(SPACE.contains(v) for v in seen)
    assert best.fitness == history_best[-1]
    # 25 initial evaluations plus 16 children per generation
    assert len(seen) == 25 + 15 * 16


def test_ga_deterministic_and_order_independent():
    cfg = GaConfig(generations=8, rng_seed=11)
    buf1, buf2 = io.StringIO(), io.StringIO()
    b1, h1 = ga_run(SPACE, cfg, evaluate=bump, checkpoint=buf1)
    b2, h2 = ga_run(SPACE, cfg, evaluate=bump, workers=4, checkpoint=buf2)
    assert h1.best == h2.best and h1.mean == h2.mean
    assert np.array_equal(b1.values, b2.values)
    assert buf1.getvalue() == buf2.getvalue()
    lines = [json.loads(line) for line in buf1.getvalue().splitlines()]
    assert [r["generation"] for r in lines] == list(range(9))
    assert set(lines[0]["best"]) == set(SPACE.names)


def test_ga_seed_changes_run():
    _, h1 = ga_run(SPACE, GaConfig(generations=3, rng_seed=1), evaluate=bump)
    _, h2 = ga_run(SPACE, GaConfig(generations=3, rng_seed=2), evaluate=bump)
    assert h1.best != h2.best


def test_ga_failures_scored_zero():
    def evaluate(v):
        return 0.0 if v[0] > 0 else bump(v)

    best, hist = ga_run(SPACE, GaConfig(generations=3, rng_seed=0), evaluate=evaluate)
    assert best.values[0] <= 0


def test_gradient_refine_improves():
    start = Genotype(np.full(5, -0.5))
    start = Genotype(start.values, bump(start.values))
    out = gradient_refine(start, SPACE, evaluate=bump)
    assert out.fitness >= start.fitness
    assert np.allclose(out.values, 0.3, atol=1e-2)
    assert SPACE.contains(out.values)


def test_gradient_refine_at_maximum_returns_input():
    top = Genotype(np.full(5, 0.3), 1.0)
    out = gradient_refine(top, SPACE, evaluate=bump)
    assert np.array_equal(out.values, top.values) and out.fitness == 1.0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5))
def test_gradient_refine_monotone_property(start):
    g = Genotype(np.array(start), bump(start))
    out = gradient_refine(g, SPACE, StepConfig(max_iter=5), evaluate=bump)
    assert out.fitness >= g.fitness and SPACE.contains(out.values)


def test_gradient_refine_respects_bounds():
    def edge(v):
        return float(v[0])

    out = gradient_refine(Genotype(np.zeros(5), 0.0), SPACE, evaluate=edge)
    assert out.values[0] == pytest.approx(1.0) and out.fitness == pytest.approx(1.0)


def small_fitness_setup():
    fixed = small_params(trunc=(4, 6))
    space = SearchSpace.from_mask("11", {"alpha.1.ct": (-0.5, 0.5), "alpha.2.ct": (-0.5, 0.5)},
                                  tie_acceptor=False)
    spec = InitialStateSpec("cluster", (2, 2, 1))
    return fixed, space, spec


def test_fitness_values():
    fixed, space, spec = small_fitness_setup()
    values = space.from_params(fixed)
    f1 = fitness(values, fixed, spec, space)
    f2 = fitness(values, fixed, spec, space)
    assert f1 == f2 and f1 > 0
    no_coupling = values.copy()
    no_coupling[space.names.index("g")] = 0.0
    assert fitness(no_coupling, fixed, spec, space) == pytest.approx(0, abs=1e-8)
    with pytest.raises(ValueError):
        fitness(values + 100, fixed, spec, space)


def test_fitness_failure_scores_zero():
    fixed, _, spec = small_fitness_setup()
    space = SearchSpace.from_mask("13")
    values = space.from_params(fixed)
    values[space.names.index("alpha.1.g")] = 3.5  # g-surface ground state cannot fit 4 levels
    assert fitness(values, fixed, spec, space) == 0.0


def test_fitness_ratio_matches_branching():
    from chargesep.branching import branching_probabilities, solve_functional, steady_states
    from conftest import build_liouvillian

    fixed, space, spec = small_fitness_setup()
    L = build_liouvillian(fixed)
    r = branching_probabilities(solve_functional(L, *steady_states(fixed)), spec.build(fixed))
    f = make_fitness(fixed, spec, space)(space.from_params(fixed))
    assert f == pytest.approx(r.p_II / r.p_I, rel=1e-8)


def test_initial_state_kinds():
    fixed = small_params(trunc=(4, 6))
    for spec in (InitialStateSpec("cluster", (2, 2, 1)), InitialStateSpec("parent", (0, 1)),
                 InitialStateSpec("level", (1, 2))):
        rho = spec.build(fixed)
        assert abs(np.trace(rho) - 1) < 1e-12
    with pytest.raises(ValueError):
        InitialStateSpec("thermal", ()).build(fixed)
