"""Sieve-based confidence intervals for policy values in Markov decision processes."""

from .basis import BasisSpec, FeatureMap, KnotSet, build_knots, choose_L, transform_state
from .core import (EvalConfig, Policy, ReferenceDistribution, TrajectoryDataset,
                   TransitionRecord, Violation, concat_datasets, deterministic_policy,
                   tabular_policy, uniform_policy, validate_dataset)
from .envs import (CliffEnvSpec, LinearEnvSpec, TabularMDP, igc_reward, mc_true_value,
                   optimal_q, rollout, simulate_dataset, tabular_exact_q, value_iteration)
from .errors import (DegenerateDataError, InputError, ParseError, PartitionError, RunError,
                     SieveCIError, SingularSystemError, UnknownStateError, ValidationError)
from .fqi import FQIConfig, FQILearner, double_fqi, epsilon_greedy, greedy_policy, sargmax
from .io import load_trajectories_csv, write_trajectories_csv
from .onpolicy import OnPolicySchedule, aggregate_sqrtT, onpolicy_run
from .save import (BlockPartition, SaveResult, aggregate_inverse_sigma, block_fit_and_eval,
                   check_ordering, make_partition, partition_from_counts, save_evaluate)
from .sieve import SieveFit, ValueInterval, fit_q, value_integrated, value_point
from .value_diff import fit_behavior_policy, fit_q_behavior, save_vd, vd_point

__version__ = "0.1.0"
