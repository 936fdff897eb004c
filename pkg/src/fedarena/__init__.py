"""Deterministic federated learning simulator with a Byzantine attack and
defense catalog, hybrid aggregation, and a reproducible experiment harness."""

from .attacks import Attack, AttackPlan, build_plan, canonical_attack_name
from .data import Dataset, Partition, load_csv, load_idx, partition_dirichlet, synth_blobs
from .defenses import AggregationOutcome, AggregationRule, canonical_defense_name, default_defense_set
from .federation import Federation, RoundConfig, RoundRecord
from .model import Batch, ModelSpec
from .numerics import Rng
from .scenarios import (
    ExperimentSpec,
    ImpactReport,
    S1Report,
    TaskSpec,
    run,
    run_experiment,
    run_s1,
    run_s2,
    run_s3,
    time_defenses,
)

__version__ = "0.1.0"

__all__ = [
    "Attack",
    "AttackPlan",
    "AggregationOutcome",
    "AggregationRule",
    "Batch",
    "Dataset",
    "ExperimentSpec",
    "Federation",
    "ImpactReport",
    "ModelSpec",
    "Partition",
    "Rng",
    "RoundConfig",
    "RoundRecord",
    "S1Report",
    "TaskSpec",
    "build_plan",
    "canonical_attack_name",
    "canonical_defense_name",
    "default_defense_set",
    "load_csv",
    "load_idx",
    "partition_dirichlet",
    "run",
    "run_experiment",
    "run_s1",
    "run_s2",
    "run_s3",
    "synth_blobs",
    "time_defenses",
    "__version__",
]
