"""Federated round engine: local SGD, update collection, global step.

One round: broadcast w, every client runs tau mini-batch SGD steps on its
shard and reports Delta = w - w_local, attacker groups replace their honest
updates with poisoned ones, the aggregation rule condenses all updates into
one Delta-hat, and the server applies w <- w - global_lr * Delta-hat.

Client momenta advance every round with m <- (1 - beta) * Delta + beta * m
and are observable by attack and defense logic.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .model import Batch, ModelSpec, accuracy, grad, init_weights
from .numerics import Rng, require_finite


@dataclass
class RoundConfig:
    local_steps: int = 5
    batch_size: int = 32
    lr: float = 0.05
    global_lr: float = 1.0
    momentum_beta: float = 0.9

    def __post_init__(self):
        if self.local_steps < 1 or self.batch_size < 1:
            raise ValueError("local_steps and batch_size must be >= 1")
        if self.lr < 0:  # zero is degenerate but legal: updates vanish
            raise ValueError("lr must be nonnegative")
        if self.global_lr <= 0:
            raise ValueError("global_lr must be positive")
        if not 0.0 <= self.momentum_beta < 1.0:
            raise ValueError("momentum_beta must lie in [0, 1)")


@dataclass
class ClientState:
    id: int
    data: Batch
    momentum: np.ndarray
    rng: Rng

    def __post_init__(self):
        if self.data.size == 0:
            raise ValueError(f"client {self.id} has an empty shard")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    sample_count: int

    def __post_init__(self):
        object.__setattr__(self, "delta", require_finite(self.delta, "client update"))


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    test_accuracy: float
    chosen_defense: str
    accepted_ids: tuple
    wall_time: float  # excluded from the determinism contract


@dataclass(frozen=True)
class RoundInfo:
    """Server-side facts a rule may consult while aggregating."""

    round_index: int
    total_rounds: int
    w: np.ndarray
    spec: ModelSpec
    cfg: RoundConfig
    global_lr: float
    rng: Rng


@dataclass(frozen=True)
class RoundView:
    """Snapshot handed to the attack plan after benign clients report."""

    round_index: int
    num_clients: int
    w: np.ndarray
    spec: ModelSpec
    cfg: RoundConfig
    benign_updates: tuple
    benign_momenta: dict
    attacker_states: tuple
    rng: Rng


def sample_batch(shard: Batch, batch_size: int, rng: Rng) -> Batch:
    """Mini-batch draw.

    A batch exactly the shard size is the shard itself (no randomness), a
    larger batch samples with replacement, a smaller one without.
    """
    n = shard.size
    if batch_size == n:
        return shard
    if batch_size > n:
        idx = rng.integers(0, n, batch_size)
    else:
        idx = rng.choice(n, batch_size, replace=False)
    return Batch(shard.inputs[idx], shard.labels[idx])


def sgd_delta(spec: ModelSpec, w0, shard: Batch, steps: int, lr: float, batch_size: int, rng: Rng) -> np.ndarray:
    """Accumulated descent w0 - w_local over the local steps.

    Accumulating the difference directly keeps one full-batch step bitwise
    equal to lr * grad(w0) instead of losing low bits to w0 cancellation.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    delta = np.zeros_like(w0)
    for _ in range(steps):
        batch = sample_batch(shard, batch_size, rng)
        delta += lr * grad(spec, w0 - delta, batch)
    return delta


def sgd_steps(spec: ModelSpec, w0, shard: Batch, steps: int, lr: float, batch_size: int, rng: Rng) -> np.ndarray:
    """Weights after the local steps; see `sgd_delta`."""
    w0 = np.asarray(w0, dtype=np.float64)
    return w0 - sgd_delta(spec, w0, shard, steps, lr, batch_size, rng)


def local_update(spec: ModelSpec, client: ClientState, w_global, cfg: RoundConfig) -> ClientUpdate:
    """Run the client's local steps and report Delta; advances its momentum."""
    delta = sgd_delta(
        spec, w_global, client.data, cfg.local_steps, cfg.lr, cfg.batch_size, client.rng
    )
    client.momentum = (1.0 - cfg.momentum_beta) * delta + cfg.momentum_beta * client.momentum
    return ClientUpdate(client_id=client.id, delta=delta, sample_count=client.data.size)


def fedavg(updates, weighted: bool = False) -> np.ndarray:
    """Mean of client deltas; unweighted by default."""
    updates = list(updates)
    if not updates:
        raise ValueError("no updates")
    deltas = np.stack([u.delta for u in updates])
    if weighted:
        counts = np.array([u.sample_count for u in updates], dtype=np.float64)
        return (counts[:, None] * deltas).sum(axis=0) / counts.sum()
    return deltas.mean(axis=0)


class _PlainFedAvg:
    """Minimal built-in rule used when no defense is configured."""

    name = "fedavg"

    def aggregate(self, updates, info: RoundInfo):
        # any object with .delta/.accepted_ids/.chosen satisfies the engine
        return SimpleNamespace(
            delta=fedavg(updates),
            accepted_ids=tuple(u.client_id for u in updates),
            chosen="fedavg",
        )


class Federation:
    """Holds clients, the global model, and advances one round at a time."""

    def __init__(
        self,
        spec: ModelSpec,
        shards,
        test: Batch,
        cfg: RoundConfig,
        rng: Rng,
        attacker_ids=(),
        total_rounds: int = 1,
    ):
        self.spec = spec
        self.cfg = cfg
        self.test = test
        self.total_rounds = total_rounds
        self.attacker_ids = frozenset(int(i) for i in attacker_ids)
        self.clients = [
            ClientState(
                id=i,
                data=shard,
                momentum=np.zeros(spec.weight_dim),
                rng=rng.substream(f"client.{i}"),
            )
            for i, shard in enumerate(shards)
        ]
        if not self.clients:
            raise ValueError("need at least one client")
        if self.attacker_ids - {c.id for c in self.clients}:
            raise ValueError("attacker_ids outside the client range")
        self.w = init_weights(spec, rng.substream("init"))
        self.attack_rng = rng.substream("attack")
        self.defense_rng = rng.substream("defense")
        self.round_index = 0

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def run_round(self, rule=None, plan=None) -> RoundRecord:
        t0 = time.perf_counter()
        k = self.round_index
        rule = rule if rule is not None else _PlainFedAvg()

        benign = [c for c in self.clients if c.id not in self.attacker_ids]
        attackers = [c for c in self.clients if c.id in self.attacker_ids]
        benign_updates = tuple(local_update(self.spec, c, self.w, self.cfg) for c in benign)

        attacker_updates: list[ClientUpdate] = []
        if attackers:
            if plan is None:
                raise ValueError("attackers present but no attack plan supplied")
            view = RoundView(
                round_index=k,
                num_clients=self.num_clients,
                w=self.w.copy(),
                spec=self.spec,
                cfg=self.cfg,
                benign_updates=benign_updates,
                benign_momenta={c.id: c.momentum.copy() for c in benign},
                attacker_states=tuple(attackers),
                rng=self.attack_rng,
            )
            attacker_updates = list(plan.updates_for_round(view))
            emitted = sorted(u.client_id for u in attacker_updates)
            if emitted != sorted(c.id for c in attackers):
                raise ValueError("attack plan must emit exactly one update per attacker")
            by_id = {u.client_id: u for u in attacker_updates}
            beta = self.cfg.momentum_beta
            for c in attackers:
                c.momentum = (1.0 - beta) * by_id[c.id].delta + beta * c.momentum

        updates = sorted(
            list(benign_updates) + attacker_updates, key=lambda u: u.client_id
        )
        info = RoundInfo(
            round_index=k,
            total_rounds=self.total_rounds,
            w=self.w.copy(),
            spec=self.spec,
            cfg=self.cfg,
            global_lr=self.cfg.global_lr,
            rng=self.defense_rng,
        )
        outcome = rule.aggregate(updates, info)
        self.w = self.w - self.cfg.global_lr * require_finite(outcome.delta, "aggregated delta")
        self.round_index += 1
        return RoundRecord(
            round_index=k,
            test_accuracy=accuracy(self.spec, self.w, self.test),
            chosen_defense=outcome.chosen,
            accepted_ids=tuple(outcome.accepted_ids),
            wall_time=time.perf_counter() - t0,
        )
