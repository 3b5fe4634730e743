"""Command-line interface.

Usage::

    chargesep branching --config model.ini --out results --set g=0
    chargesep scan-levels --config model.ini --set beta.e=0 --set beta.ct=0 --plot
    chargesep optimize --config search.ini --set optimizer.seed=7

The config file holds the model keys (sections ``[electronic]``,
``[vibrations]``, ``[dissipation]``, ``[basis]`` or ``[model]``) plus
optional experiment sections ``[initial_state]``, ``[solver]``, ``[scan]``,
``[optimizer]``, ``[search]`` and ``[propagate]``.  Without ``--config`` the
built-in optimized environment is used.  ``--set`` accepts model keys
(``alpha.2.ct=-3``) or section-qualified experiment keys (``solver.tol=1e-9``).

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .branching import (branching_probabilities, level_probabilities, solve_functional, steady_states,
                        verify_resonance)
from .dynamics import evolve
from .exceptions import ChargeSepError, ConfigError, NumericalError
from .liouvillian import assemble
from .model import (EXPERIMENT_SECTIONS, MODEL_SECTIONS, ElectronicState, ModelParams, dump_config,
                    is_model_key, optimized_params, parse_sections, params_from_mapping)
from .operators import build_collapse_ops, build_hamiltonian
from .optimizer import (GaConfig, InitialStateSpec, SearchSpace, StepConfig, ga_run, gradient_refine,
                        make_fitness)
from .states import eigen_analysis, find_drain_state, parent_level_state

logger = logging.getLogger("chargesep")

COMMANDS = ("branching", "scan-levels", "scan-parent", "eigen", "optimize", "propagate", "converge-trunc")
EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
DEFAULT_MAX_DIM_VEC = 25_000_000

_EXPERIMENT_KEYS = {
    "initial_state": {"kind", "N1", "N2", "dN2", "n1", "n2"},
    "solver": {"tol", "formulation", "preconditioner", "restart", "max_iter", "leakage"},
    "scan": {"n1", "n2", "parent_n2", "ladder", "max_dim_vec"},
    "optimizer": {"seed", "population", "generations", "mask", "fresh_candidates", "refine",
                  "tie_acceptor", "elite_frac", "mutation_frac", "gene_change_frac", "seed_pool_frac"},
    "search": None,  # gene = lower, upper
    "propagate": {"t_final", "tol", "samples"},
}


# -- configuration ---------------------------------------------------------------


class Experiment:
    """Model parameters plus experiment settings after overrides."""

    def __init__(self, params: ModelParams, sections: dict[str, dict[str, str]]):
        self.params = params
        self.sections = sections

    def get(self, section: str, key: str, default=None, cast=str):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            if cast is bool:
                lowered = raw.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return lowered in ("true", "1", "yes")
            return cast(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None

    def initial_state_spec(self) -> InitialStateSpec:
        kind = self.get("initial_state", "kind", "cluster")
        if kind == "cluster":
            args = tuple(self.get("initial_state", k, d, int) for k, d in (("N1", 11), ("N2", 13), ("dN2", 3)))
        elif kind in ("parent", "level"):
            args = tuple(self.get("initial_state", k, 0, int) for k in ("n1", "n2"))
        else:
            raise ConfigError(f"initial_state.kind: unknown kind {kind!r}")
        return InitialStateSpec(kind, args)

    def solver_options(self) -> dict:
        return {
            "tol": self.get("solver", "tol", 1e-8, float),
            "formulation": self.get("solver", "formulation", "auto"),
            "preconditioner": self.get("solver", "preconditioner", "auto"),
            "restart": self.get("solver", "restart", 30, int),
            "max_iter": self.get("solver", "max_iter", 3000, int),
        }


def _parse_range(text: str, key: str) -> range:
    """``a:b`` (half-open) or a single integer."""
    try:
        if ":" in text:
            lo, hi = (int(t) for t in text.split(":"))
            return range(lo, hi)
        value = int(text)
        return range(value, value + 1)
    except ValueError:
        raise ConfigError(f"{key}: expected 'start:stop' or an integer, got {text!r}") from None


def _parse_ladder(text: str) -> list[tuple[int, int]]:
    rungs = []
    for item in text.split(","):
        try:
            m1, m2 = (int(t) for t in item.strip().lower().split("x"))
        except ValueError:
            raise ConfigError(f"scan.ladder: expected entries like '10x30', got {item.strip()!r}") from None
        rungs.append((m1, m2))
    if any(b[0] * b[1] < a[0] * a[1] for a, b in zip(rungs, rungs[1:])):
        raise ConfigError("scan.ladder: truncations must be ascending")
    return rungs


def load_experiment(config_text: str | None, overrides: list[str]) -> Experiment:
    sections = parse_sections(config_text) if config_text else {}
    model_values: dict[str, str] = {}
    experiment: dict[str, dict[str, str]] = {}
    for name, items in sections.items():
        if name in MODEL_SECTIONS:
            for key, value in items.items():
                if key in model_values:
                    raise ConfigError(f"duplicate key {key!r}")
                model_values[key] = value
        else:
            experiment[name] = dict(items)
    model_overrides: dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        head, _, rest = key.partition(".")
        if head in EXPERIMENT_SECTIONS and rest:
            experiment.setdefault(head, {})[rest] = value
        elif is_model_key(key) or key in ("trunc1", "trunc2"):
            model_overrides[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for name, items in experiment.items():
        allowed = _EXPERIMENT_KEYS.get(name)
        if name not in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown section [{name}]")
        for key in items:
            if allowed is not None and key not in allowed:
                raise ConfigError(f"unknown config key {name}.{key}")
    if model_values:
        params = params_from_mapping(model_values)
    else:
        params = optimized_params()
    if model_overrides:
        changes = {}
        for key, raw in model_overrides.items():
            try:
                changes[key] = int(raw) if key in ("trunc1", "trunc2") else float(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        params = params.updated(changes)
    return Experiment(params, experiment)


# -- output helpers --------------------------------------------------------------


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _solve(params: ModelParams, options: dict, leakage: bool = False):
    basis = params.basis
    H = build_hamiltonian(params, basis)
    L = assemble(H, build_collapse_ops(params, basis), basis)
    rho_I, rho_II = steady_states(params, basis)
    psi = solve_functional(L, rho_I, rho_II, leakage=leakage, **options)
    return H, L, psi


def _warn_untrusted(result):
    if not result.trusted:
        print(f"warning: truncation-edge leakage {result.leakage:.2e} exceeds 1e-6; "
              "results may be affected by truncation, consider increasing trunc1/trunc2",
              file=sys.stderr)


# -- commands ----------------------------------------------------------------------


def cmd_branching(exp: Experiment, out: Path, args) -> int:
    leakage = exp.get("solver", "leakage", True, bool)
    _, _, psi = _solve(exp.params, exp.solver_options(), leakage=leakage)
    rho0 = exp.initial_state_spec().build(exp.params)
    result = branching_probabilities(psi, rho0)
    _warn_untrusted(result)
    write_csv(out / "branching.csv",
              ["p_I", "p_II", "residual", "iterations", "leakage", "trusted"],
              [[result.p_I, result.p_II, psi.residual, psi.solver_iters, result.leakage, result.trusted]])
    print(f"P_II = {result.p_II:.6f}  P_I = {result.p_I:.6f}  residual {psi.residual:.2e}")
    return EXIT_OK


def cmd_scan_levels(exp: Experiment, out: Path, args) -> int:
    params = exp.params
    basis = params.basis
    m1, m2 = params.trunc
    r1 = _parse_range(exp.get("scan", "n1", f"0:{min(11, m1)}"), "scan.n1")
    r2 = _parse_range(exp.get("scan", "n2", f"0:{min(16, m2)}"), "scan.n2")
    if (r1 and (r1.start < 0 or r1.stop > m1)) or (r2 and (r2.start < 0 or r2.stop > m2)):
        raise ConfigError(f"scan range n1={r1.start}:{r1.stop}, n2={r2.start}:{r2.stop} exceeds truncation {params.trunc}")
    _, _, psi = _solve(params, exp.solver_options())
    levels = [(n1, n2) for n1 in r1 for n2 in r2]
    probs = level_probabilities(psi, [basis.index_of(ElectronicState.E, *lv) for lv in levels])
    rows = [[n1, n2, float(p)] for (n1, n2), p in zip(levels, probs)]
    path = write_csv(out / "scan_levels.csv", ["n1", "n2", "p_II"], rows)
    if args.plot and rows:
        grid = np.array([r[2] for r in rows]).reshape(len(r1), len(r2))
        _plot_heatmap(grid, r1, r2, path.with_suffix(".svg"))
    if rows:
        print(f"mean P_II over {len(rows)} levels: {np.mean([r[2] for r in rows]):.6f}")
    return EXIT_OK


def cmd_scan_parent(exp: Experiment, out: Path, args) -> int:
    params = exp.params
    levels = _parse_range(exp.get("scan", "parent_n2", "0:9"), "scan.parent_n2")
    rows = []
    if len(levels):
        _, _, psi = _solve(params, exp.solver_options())
        for n2 in levels:
            rho0 = parent_level_state(params, params.basis, 0, n2).matrix
            rows.append([n2, branching_probabilities(psi, rho0, validate=False).p_II])
    path = write_csv(out / "scan_parent.csv", ["n2", "p_II"], rows)
    if args.plot and rows:
        _plot_line([r[0] for r in rows], [r[1] for r in rows], "parent n2", "P_II", path.with_suffix(".svg"))
    return EXIT_OK


def cmd_eigen(exp: Experiment, out: Path, args) -> int:
    params = exp.params
    H, _, psi = _solve(params, exp.solver_options())
    records = eigen_analysis(H, psi, params.basis)
    drain = find_drain_state(records, eps_e=params.eps[ElectronicState.E])
    rows = [[r.energy, r.loc_e, r.loc_ct, r.p_II, r is drain] for r in records]
    path = write_csv(out / "eigen.csv", ["energy", "loc_e", "loc_ct", "p_II", "drain_flag"], rows)
    print(f"drain state at energy {drain.energy:.6f} with loc_ct {drain.loc_ct:.4f}")
    if args.plot:
        _plot_eigen(records, drain, path.with_suffix(".svg"))
    return EXIT_OK


def cmd_optimize(exp: Experiment, out: Path, args) -> int:
    seed = exp.get("optimizer", "seed", None, int)
    if seed is None:
        raise ConfigError("optimizer.seed is required for reproducible optimization")
    mask = exp.get("optimizer", "mask", "11")
    bounds = {}
    for key, raw in exp.sections.get("search", {}).items():
        try:
            lo, hi = (float(t) for t in raw.split(","))
        except ValueError:
            raise ConfigError(f"search.{key}: expected 'lower, upper', got {raw!r}") from None
        bounds[key] = (lo, hi)
    tie = exp.get("optimizer", "tie_acceptor", True, bool)
    try:
        space = SearchSpace.from_mask(mask.split(",") if "," in mask else mask, bounds, tie)
        config = GaConfig(
            population=exp.get("optimizer", "population", 25, int),
            generations=exp.get("optimizer", "generations", 50, int),
            fresh_candidates=exp.get("optimizer", "fresh_candidates", 3, int),
            elite_frac=exp.get("optimizer", "elite_frac", 0.34, float),
            mutation_frac=exp.get("optimizer", "mutation_frac", 0.33, float),
            gene_change_frac=exp.get("optimizer", "gene_change_frac", 0.20, float),
            seed_pool_frac=exp.get("optimizer", "seed_pool_frac", 0.50, float),
            rng_seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for key in space.names:
        if not is_model_key(key):
            raise ConfigError(f"search gene {key!r} is not a model key")
    spec = exp.initial_state_spec()
    evaluate = make_fitness(exp.params, spec, space, tol=exp.get("solver", "tol", 1e-8, float))
    with open(out / "checkpoint.jsonl", "w") as fh:
        best, history = ga_run(space, config, evaluate=evaluate, workers=args.workers, checkpoint=fh)
    refined = best
    if exp.get("optimizer", "refine", True, bool):
        refined = gradient_refine(best, space, StepConfig(), evaluate=evaluate)
    best_params = exp.params.updated(space.to_changes(refined.values))
    resonance = verify_resonance(best_params)
    report = {
        "seed": seed,
        "ga_best": {"fitness": best.fitness, "genotype": best.as_dict(space)},
        "refined": {"fitness": refined.fitness, "genotype": refined.as_dict(space)},
        "resonance": {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                      for k, v in asdict(resonance).items()},
        "history": {"best": history.best, "mean": history.mean},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "best.ini").write_text(dump_config(best_params))
    write_csv(out / "history.csv", ["generation", "best_fitness", "mean_fitness"],
              [[i, b, m] for i, (b, m) in enumerate(zip(history.best, history.mean))])
    if args.plot:
        _plot_line(range(len(history.best)), history.best, "generation", "best fitness",
                   out / "history.svg")
    print(f"best fitness {refined.fitness:.6f}; resonance kappa={resonance.kappa} "
          f"mismatch={resonance.mismatch:.3e}{' (modes swapped)' if resonance.swapped else ''}")
    return EXIT_OK


def cmd_propagate(exp: Experiment, out: Path, args) -> int:
    params = exp.params
    basis = params.basis
    L = assemble(build_hamiltonian(params, basis), build_collapse_ops(params, basis), basis)
    slowest = min(r for r in (params.rate_sep, params.rate_rec) if r > 0) \
        if max(params.rate_sep, params.rate_rec) > 0 else None
    default_t = 10.0 / slowest if slowest else None
    t_final = exp.get("propagate", "t_final", default_t, float)
    if t_final is None:
        raise ConfigError("propagate.t_final is required when both decay rates vanish")
    rho0 = exp.initial_state_spec().build(params)
    _, traj = evolve(L, rho0, t_final, tol=exp.get("propagate", "tol", 1e-10, float),
                     samples=exp.get("propagate", "samples", 60, int))
    rows = [[t, *pops, leak, pur] for t, pops, leak, pur in
            zip(traj.times, traj.electronic_populations, traj.leakage, traj.purity)]
    path = write_csv(out / "trajectory.csv", ["t", "p_g", "p_e", "p_ct", "p_a", "leakage", "purity"], rows)
    if args.plot:
        _plot_populations(traj, path.with_suffix(".svg"))
    print(f"population on a at t = {t_final:.6g}: {traj.population(ElectronicState.A)[-1]:.8f}")
    return EXIT_OK


def cmd_converge_trunc(exp: Experiment, out: Path, args) -> int:
    ladder = _parse_ladder(exp.get("scan", "ladder", "10x30,12x40,14x48,14x56"))
    cap = exp.get("scan", "max_dim_vec", DEFAULT_MAX_DIM_VEC, int)
    spec = exp.initial_state_spec()
    options = exp.solver_options()

    def run(trunc):
        dim = 4 * trunc[0] * trunc[1]
        if dim * dim > cap:
            return None, f"memory guard: D^2 = {dim * dim} exceeds cap {cap}"
        try:
            params = exp.params.updated({"trunc1": trunc[0], "trunc2": trunc[1]})
            _, _, psi = _solve(params, options)
            return branching_probabilities(psi, spec.build(params), validate=False).p_II, ""
        except (NumericalError, ValueError) as exc:
            return None, str(exc)

    workers = max(1, args.workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, ladder))
    rows = []
    previous = None
    converged = False
    for trunc, (p, error) in zip(ladder, results):
        delta = abs(p - previous) if p is not None and previous is not None else None
        if delta is not None and delta < 1e-3:
            converged = True
        rows.append([trunc[0], trunc[1], p, delta, error])
        if p is not None:
            previous = p
    write_csv(out / "converge_trunc.csv", ["M1", "M2", "p_II", "delta_from_previous", "error"], rows)
    print("converged" if converged else "not converged (successive change >= 1e-3)")
    return EXIT_OK


# -- plotting -------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_heatmap(grid, r1, r2, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis", vmin=0, vmax=1,
                   extent=(r2.start - 0.5, r2.stop - 0.5, r1.start - 0.5, r1.stop - 0.5))
    ax.set_xlabel("n2")
    ax.set_ylabel("n1")
    fig.colorbar(im, ax=ax, label="P_II")
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_line(x, y, xlabel, ylabel, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(list(x), list(y), "o-")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_eigen(records, drain, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    sc = ax.scatter([r.energy for r in records], [r.p_II for r in records],
                    c=[r.loc_ct for r in records], cmap="viridis", vmin=0, vmax=1, s=8)
    ax.scatter([drain.energy], [drain.p_II], marker="*", s=120, color="red")
    ax.set_xlabel("energy")
    ax.set_ylabel("P_II")
    fig.colorbar(sc, ax=ax, label="ct weight")
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_populations(traj, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for z in ElectronicState:
        ax.semilogx(traj.times[1:], traj.population(z)[1:], label=z.label)
    ax.set_xlabel("t")
    ax.set_ylabel("population")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- entry point -------------------------------------------------------------------


HANDLERS = {
    "branching": cmd_branching,
    "scan-levels": cmd_scan_levels,
    "scan-parent": cmd_scan_parent,
    "eigen": cmd_eigen,
    "optimize": cmd_optimize,
    "propagate": cmd_propagate,
    "converge-trunc": cmd_converge_trunc,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chargesep", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="config file (default: built-in optimized model)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="parallel workers")
        p.add_argument("--plot", action="store_true", help="also write an SVG rendering")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        text = None
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        exp = load_experiment(text, args.overrides)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {args.out} is not writable: {exc}") from exc
        return HANDLERS[args.command](exp, args.out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ChargeSepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
