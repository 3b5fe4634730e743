"""Branching and environment optimization for a vibronic donor-bridge-acceptor model.

The model is a Lindblad master equation for electronic states g, e, ct, a
coupled to two displaced harmonic modes.  The branching probability between
recombination (e -> g) and separation (ct -> a) follows from a single adjoint
linear solve and applies to every initial state.
"""

from .branching import (BranchingFunctional, BranchingResult, ResonanceReport, branching_probabilities,
                        level_probabilities, solve_functional, steady_states, verify_resonance)
from .dynamics import Trajectory, evolve
from .estimators import BranchingEstimator, GeneticOptimizer
from .exceptions import (ChargeSepError, ConfigError, IntegrationError, NumericalError, SolverError,
                         TruncationError)
from .liouvillian import SuperOperator, assemble, pairing_adjoint, unvec, vec
from .model import (DEFAULT_TRUNC, ElectronicState, ModelParams, VibronicBasis, dump_config, load_config,
                    optimized_params)
from .operators import (CollapseOperator, CollapseTag, annihilation, build_collapse_ops, build_hamiltonian,
                        displaced_fock_state, local_lowering, local_vib_state)
from .optimizer import (GaConfig, Genotype, InitialStateSpec, SearchSpace, StepConfig, fitness, ga_run,
                        gradient_refine)
from .states import (DensityOperator, EigenstateRecord, broadband_initial_state, cluster_initial_state,
                     eigen_analysis, find_drain_state, parent_level_state)

__version__ = "0.1.0"
