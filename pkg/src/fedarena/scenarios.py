"""Experiment orchestration: paired runs and the attack-impact metric.

An experiment always executes two trajectories from the same seed: a clean
baseline with zero attackers and an attacked run in which the lowest client
ids turn malicious.  Both share the dataset draw, the partition, the weight
initialization, and every benign client's rng stream, so the recorded
accuracy gap isolates the attack's effect.  The headline number is

    impact = |psi_clean - psi_attacked|

where psi is the mean test accuracy over the trailing evaluation window
(the window is a config knob; accuracy "at the end of training" is noisy
round to round, so a trailing mean is reported instead).

Three multi-attack settings build on the paired run: a set of attacks
evaluated independently and averaged (s1), attacker groups running
different attacks in the same round (s2), and one attacker population
alternating attacks over rounds (s3).
"""
from __future__ import annotations

import dataclasses
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import build_plan
from .data import Dataset, load_csv, load_idx, partition_dirichlet, subset, synth_blobs
from .defenses import AggregationRule, canonical_defense_name
from .federation import ClientUpdate, Federation, RoundConfig, RoundInfo, RoundRecord
from .model import Batch, ModelSpec, init_weights
from .numerics import Rng

TASK_KINDS = ("blobs", "idx", "csv")
SCENARIOS = ("single", "s1", "s2", "s3")


@dataclass(frozen=True)
class TaskSpec:
    """What data the experiment trains on.

    Synthetic blobs are parameterized directly; file-backed tasks point at
    an IDX image/label pair or a labeled CSV and carve a seeded test split
    of `test_fraction`.
    """

    kind: str = "blobs"
    classes: int = 10
    dim: int = 12
    per_class: int = 120
    test_per_class: int = 30
    spread: float = 1.0
    path: str = ""  # csv
    images: str = ""  # idx pair
    labels: str = ""
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")


def make_task(task: TaskSpec, rng: Rng):
    """Materialize (train, test) datasets for a task description."""
    if task.kind == "blobs":
        train = synth_blobs(rng.substream("train"), task.classes, task.dim, task.per_class, task.spread)
        test = synth_blobs(rng.substream("test"), task.classes, task.dim, task.test_per_class, task.spread)
        return train, test
    if task.kind == "idx":
        if not (task.images and task.labels):
            raise ValueError("idx task needs images and labels paths")
        ds = load_idx(task.images, task.labels)
    else:
        if not task.path:
            raise ValueError("csv task needs a path")
        ds = load_csv(task.path)
    perm = rng.substream("split").permutation(ds.n)
    cut = ds.n - max(1, int(task.test_fraction * ds.n))
    if cut < 1:
        raise ValueError("test_fraction leaves no training examples")
    return subset(ds, perm[:cut]), subset(ds, perm[cut:])


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one experiment cell."""

    task: TaskSpec = field(default_factory=TaskSpec)
    model_kind: str = "softmax_regression"
    hidden_dim: int = 16
    clients: int = 30
    rounds: int = 30
    round_cfg: RoundConfig = field(default_factory=RoundConfig)
    alpha: float = 0.5  # Dirichlet concentration of the partition
    ref_size: int = 100  # server-side reference holdout
    ratio: float = 0.0  # attacker fraction A/M
    scenario: str = "single"
    attacks: tuple = ()
    attack_params: dict = field(default_factory=dict)
    defense: str = "fedavg"
    defense_params: dict = field(default_factory=dict)
    seed: int = 0
    psi_window: int = 10
    allow_attacker_majority: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.psi_window < 1:
            raise ValueError("psi_window must be >= 1")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.ratio > 0.5 and not self.allow_attacker_majority:
            raise ValueError(
                "ratio > 0.5 means an attacker majority; set allow_attacker_majority to run it"
            )
        object.__setattr__(self, "attacks", tuple(self.attacks))
        canonical_defense_name(self.defense)  # fail fast on typos

    @property
    def attacker_count(self) -> int:
        return int(self.ratio * self.clients + 0.5)


@dataclass(frozen=True)
class PreparedRun:
    """A federation wired up for one trajectory, plus its server-side pieces."""

    federation: Federation
    rule: AggregationRule
    plan: object  # AttackPlan or None
    reference: Batch
    train: Dataset
    test: Dataset


def _model_spec(spec: ExperimentSpec, train: Dataset) -> ModelSpec:
    return ModelSpec(
        kind=spec.model_kind,
        input_dim=train.inputs.shape[1],
        num_classes=train.num_classes,
        hidden_dim=spec.hidden_dim if spec.model_kind == "mlp1" else 0,
    )


def _attack_expression(spec: ExperimentSpec) -> str:
    if not spec.attacks:
        raise ValueError("attacks must be declared when the ratio places attackers")
    if spec.scenario == "single":
        if len(spec.attacks) != 1:
            raise ValueError("the single scenario takes exactly one attack expression")
        return spec.attacks[0]
    if spec.scenario == "s2":
        return " + ".join(spec.attacks)
    if spec.scenario == "s3":
        return " / ".join(spec.attacks)
    raise ValueError("the s1 scenario runs one attack at a time; use run_s1")


def _make_rule(spec: ExperimentSpec, reference: Batch) -> AggregationRule:
    params = dict(spec.defense_params)
    name = canonical_defense_name(spec.defense)
    if name in ("balance", "hybrid_r"):
        params.setdefault("reference", reference)
    return AggregationRule(name, **params)


def prepare_run(spec: ExperimentSpec, num_attackers: int) -> PreparedRun:
    """Build one trajectory's federation from the spec's seed chain.

    Calling this twice with different attacker counts yields the paired
    clean/attacked runs: the data, partition, initialization, and client
    streams all derive from the same substreams of Rng(seed).
    """
    rng = Rng(spec.seed)
    train, test = make_task(spec.task, rng.substream("data"))
    model = _model_spec(spec, train)
    part = partition_dirichlet(
        rng.substream("partition"), train, spec.clients, spec.alpha, spec.ref_size
    )
    shards = [Batch(train.inputs[idx], train.labels[idx]) for idx in part.client_indices]
    reference = Batch(
        train.inputs[part.reference_indices], train.labels[part.reference_indices]
    )
    attacker_ids = tuple(range(num_attackers))
    federation = Federation(
        model,
        shards,
        Batch(test.inputs, test.labels),
        spec.round_cfg,
        rng,
        attacker_ids=attacker_ids,
        total_rounds=spec.rounds,
    )
    plan = None
    if num_attackers:
        plan = build_plan(_attack_expression(spec), attacker_ids, spec.attack_params)
    return PreparedRun(federation, _make_rule(spec, reference), plan, reference, train, test)


def _execute(prepared: PreparedRun, rounds: int) -> tuple:
    return tuple(
        prepared.federation.run_round(prepared.rule, prepared.plan) for _ in range(rounds)
    )


def _psi(records, window: int) -> float:
    take = min(window, len(records))
    return math.fsum(r.test_accuracy for r in records[-take:]) / take


def _record_to_dict(r: RoundRecord) -> dict:
    return {
        "round": r.round_index,
        "accuracy": r.test_accuracy,
        "defense": r.chosen_defense,
        "accepted": list(r.accepted_ids),
        "wall_time": r.wall_time,
    }


def _record_from_dict(d: dict) -> RoundRecord:
    return RoundRecord(
        round_index=d["round"],
        test_accuracy=d["accuracy"],
        chosen_defense=d["defense"],
        accepted_ids=tuple(d["accepted"]),
        wall_time=d["wall_time"],
    )


@dataclass(frozen=True)
class ImpactReport:
    """Outcome of one paired clean/attacked experiment."""

    task: str
    scenario: str
    attack: str
    defense: str
    ratio: float
    seed: int
    psi_window: int
    psi_clean: float
    psi_attacked: float
    impact: float
    clean_rounds: tuple
    attacked_rounds: tuple

    def __post_init__(self):
        object.__setattr__(self, "clean_rounds", tuple(self.clean_rounds))
        object.__setattr__(self, "attacked_rounds", tuple(self.attacked_rounds))
        for name in ("psi_clean", "psi_attacked"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"psi values are accuracies in [0, 1]; {name}={v}")
        if self.impact != abs(self.psi_clean - self.psi_attacked):
            raise ValueError("impact must equal |psi_clean - psi_attacked| exactly")

    @property
    def clean_accuracy(self) -> tuple:
        return tuple(r.test_accuracy for r in self.clean_rounds)

    @property
    def attacked_accuracy(self) -> tuple:
        return tuple(r.test_accuracy for r in self.attacked_rounds)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "scenario": self.scenario,
            "attack": self.attack,
            "defense": self.defense,
            "ratio": self.ratio,
            "seed": self.seed,
            "psi_window": self.psi_window,
            "psi_clean": self.psi_clean,
            "psi_attacked": self.psi_attacked,
            "impact": self.impact,
            "clean_rounds": [_record_to_dict(r) for r in self.clean_rounds],
            "attacked_rounds": [_record_to_dict(r) for r in self.attacked_rounds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImpactReport":
        return cls(
            task=d["task"],
            scenario=d["scenario"],
            attack=d["attack"],
            defense=d["defense"],
            ratio=d["ratio"],
            seed=d["seed"],
            psi_window=d["psi_window"],
            psi_clean=d["psi_clean"],
            psi_attacked=d["psi_attacked"],
            impact=d["impact"],
            clean_rounds=tuple(_record_from_dict(r) for r in d["clean_rounds"]),
            attacked_rounds=tuple(_record_from_dict(r) for r in d["attacked_rounds"]),
        )


@dataclass(frozen=True)
class S1Report:
    """Per-attack impact reports plus their mean, for the averaged setting."""

    reports: tuple
    mean_impact: float

    def __post_init__(self):
        object.__setattr__(self, "reports", tuple(self.reports))
        expected = math.fsum(r.impact for r in self.reports) / len(self.reports)
        if self.mean_impact != expected:
            raise ValueError("mean_impact must be the exact mean of the per-attack impacts")

    def to_dict(self) -> dict:
        return {
            "reports": [r.to_dict() for r in self.reports],
            "mean_impact": self.mean_impact,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "S1Report":
        return cls(
            reports=tuple(ImpactReport.from_dict(r) for r in d["reports"]),
            mean_impact=d["mean_impact"],
        )


def run_experiment(spec: ExperimentSpec) -> ImpactReport:
    """Run the paired trajectories and report the attack impact.

    Any error in either trajectory propagates; a partial run is never
    reported.  With zero attackers both trajectories still execute and the
    impact is exactly zero by determinism.
    """
    a = spec.attacker_count
    clean = _execute(prepare_run(spec, 0), spec.rounds)
    attacked_prep = prepare_run(spec, a) if a else prepare_run(spec, 0)
    attacked = _execute(attacked_prep, spec.rounds)
    psi_clean = _psi(clean, spec.psi_window)
    psi_attacked = _psi(attacked, spec.psi_window)
    return ImpactReport(
        task=attacked_prep.train.name,
        scenario=spec.scenario,
        attack=attacked_prep.plan.describe() if attacked_prep.plan else "none",
        defense=canonical_defense_name(spec.defense),
        ratio=spec.ratio,
        seed=spec.seed,
        psi_window=spec.psi_window,
        psi_clean=psi_clean,
        psi_attacked=psi_attacked,
        impact=abs(psi_clean - psi_attacked),
        clean_rounds=clean,
        attacked_rounds=attacked,
    )


def run_s1(spec: ExperimentSpec) -> S1Report:
    """Evaluate each listed attack independently and average the impacts."""
    if not spec.attacks:
        raise ValueError("s1 needs at least one attack to average over")
    reports = tuple(
        run_experiment(dataclasses.replace(spec, scenario="single", attacks=(attack,)))
        for attack in spec.attacks
    )
    return S1Report(
        reports=reports,
        mean_impact=math.fsum(r.impact for r in reports) / len(reports),
    )


def run_s2(spec: ExperimentSpec) -> ImpactReport:
    """Split the attackers into one group per listed attack (same round)."""
    return run_experiment(dataclasses.replace(spec, scenario="s2"))


def run_s3(spec: ExperimentSpec) -> ImpactReport:
    """Alternate the listed attacks over rounds across all attackers."""
    return run_experiment(dataclasses.replace(spec, scenario="s3"))


def run(spec: ExperimentSpec):
    """Dispatch on the spec's scenario kind."""
    if spec.scenario == "s1":
        return run_s1(spec)
    return run_experiment(spec)


def median_impact(spec: ExperimentSpec, seeds) -> float:
    """Median impact of the same cell across seeds (trend-check helper)."""
    return float(
        np.median([run_experiment(dataclasses.replace(spec, seed=s)).impact for s in seeds])
    )


def time_defenses(spec: ExperimentSpec, defenses=None, calls: int = 20) -> dict:
    """Median wall-clock seconds per aggregation call, per defense.

    Each rule sees the same sequence of synthetic update populations at the
    spec's model dimension and client count, so the medians are directly
    comparable.  Wall time is measurement, not contract: rerunning gives
    different numbers for the same inputs.
    """
    names = tuple(defenses) if defenses is not None else (
        "fedavg",
        "median",
        "trimmed_mean",
        "krum",
        "multi_krum",
        "centered_clipping",
        "dnc",
        "signguard",
        "freqfed",
        "balance",
        "hybrid_r",
        "hybrid_nr",
    )
    names = tuple(canonical_defense_name(n) for n in names)
    rng = Rng(spec.seed).substream("timing")
    train, _ = make_task(spec.task, rng.substream("data"))
    model = _model_spec(spec, train)
    reference = Batch(
        train.inputs[: min(spec.ref_size, train.n)], train.labels[: min(spec.ref_size, train.n)]
    )
    w = init_weights(model, rng.substream("w"))
    dim = model.weight_dim
    populations = [
        [
            ClientUpdate(client_id=i, delta=rng.normal(dim), sample_count=1)
            for i in range(spec.clients)
        ]
        for _ in range(calls)
    ]
    infos = [
        RoundInfo(
            round_index=k,
            total_rounds=calls,
            w=w,
            spec=model,
            cfg=spec.round_cfg,
            global_lr=spec.round_cfg.global_lr,
            rng=rng.substream("defense"),
        )
        for k in range(calls)
    ]
    table = {}
    for name in names:
        rule = AggregationRule(name, reference=reference)
        times = []
        for k in range(calls):
            t0 = time.perf_counter()
            rule.aggregate(populations[k], infos[k])
            times.append(time.perf_counter() - t0)
        table[name] = statistics.median(times)
    return table
