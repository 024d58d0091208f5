"""Edge-assisted hierarchical learning: HetNet association, bandwidth allocation and group learning."""

from .alloc import AllocProblem, AllocSolution, solve_beta, uniform_split, verify_kkt
from .config import ExperimentConfig, load_config
from .datagen import Dataset, PartitionSpec, build_generalization_pool, load_idx_archive, partition_noniid, synth_dataset
from .demlearn import GroupTree, ModelParams, TrainConfig, fedavg_round, hierarchical_average, recluster
from .estimators import DemLearnClassifier, FedAvgClassifier, SwapMatchingAssociator
from .experiment import emit_results, run_experiment, sweep
from .latency import LearningBudget, UeComputeProfile
from .matching import AssociationGame, Matching, run_matching
from .radio import NetworkInstance, RadioConfig, generate_topology, link_table

__version__ = "0.1.0"
