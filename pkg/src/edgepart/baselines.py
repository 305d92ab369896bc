"""Exhaustive solver and comparison policies.

Every policy is a callable ``policy(prev, demands, demands_prev, snapshot,
config) -> PartitionOutcome``.  Policies that keep state across intervals
(the frozen ones) are small classes; build a fresh one per run with
:func:`make_policy`.

EdgeShard and Galaxy are multi-layer systems.  With a single decoder layer
they reduce to "whole layer on the strongest device, frozen" and "heads spread
evenly over the k strongest devices, proj/ffn tensor-split over the same
devices with one synchronization transfer per extra device, frozen".
"""

from __future__ import annotations

import enum
import itertools
import time
from typing import Callable, Sequence

from .delay import InferenceCost
from .model import (
    Assignment,
    BlockDemand,
    ConfigError,
    ModelConfig,
    NetworkSnapshot,
)
from .partitioner import (
    Limits,
    PartitionOutcome,
    WorkingAssignment,
    _queue_key,
    migrations_between,
    resource_aware_assign,
)

OPTIMAL_SEARCH_LIMIT = 10**8

Policy = Callable[
    [Assignment | None, Sequence[BlockDemand], Sequence[BlockDemand] | None, NetworkSnapshot, ModelConfig],
    PartitionOutcome,
]


class PolicyKind(str, enum.Enum):
    RESOURCE_AWARE = "ResourceAware"
    OPTIMAL = "Optimal"
    GREEDY = "Greedy"
    ROUND_ROBIN = "RoundRobin"
    STATIC = "Static"
    DYNAMIC_LAYER = "DynamicLayer"
    EDGESHARD_LIKE = "EdgeShardLike"
    GALAXY_LIKE = "GalaxyLike"

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        for kind in cls:
            if kind.value.lower() == name.lower() or kind.name.lower() == name.lower():
                return kind
        raise ConfigError(f"unknown policy {name!r}")


class InstanceTooLarge(ConfigError):
    """The exhaustive solver refuses instances with more than 1e8 candidate placements."""


def _assigned(prev, assignment, started, **extra) -> PartitionOutcome:
    return PartitionOutcome(
        assignment,
        migrations=migrations_between(prev, assignment),
        elapsed=time.perf_counter() - started,
        **extra,
    )


def _infeasible(started, reason: str) -> PartitionOutcome:
    return PartitionOutcome(None, elapsed=time.perf_counter() - started, reason=reason)


def optimal_assign(
    prev: Assignment | None,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    *,
    include_tail_compute: bool = False,
) -> PartitionOutcome:
    """Enumerate every total placement and keep the memory-feasible minimum of the objective.

    Ties go to the lexicographically smallest placement (canonical block order).
    """
    started = time.perf_counter()
    n, nb = snapshot.size, config.num_blocks
    if n**nb > OPTIMAL_SEARCH_LIMIT:
        raise InstanceTooLarge(f"{n}^{nb} placements exceed the exhaustive search limit")
    cost = InferenceCost(demands, snapshot, config, include_tail_compute)
    mem = [dm.mem_bytes for dm in demands]
    cap = [d.mem_avail for d in snapshot.devices]
    mig = None
    if prev is not None:
        if demands_prev is None:
            raise ConfigError("previous-interval demands are required when prev is given")
        bw = snapshot.bandwidth
        mig = [
            [0.0 if k == src else demands_prev[p].mem_bytes / bw[src][k] for k in range(n)]
            for p, src in enumerate(prev.devices)
        ]
    best_val, best = None, None
    for placement in itertools.product(range(n), repeat=nb):
        used = [0] * n
        for p, d in enumerate(placement):
            used[d] += mem[p]
        if any(u > c for u, c in zip(used, cap)):
            continue
        val = cost.inference_time(placement)
        if mig is not None:
            val += sum(mig[p][d] for p, d in enumerate(placement))
        if best_val is None or val < best_val:
            best_val, best = val, placement
    if best is None:
        return _infeasible(started, "no placement satisfies the memory constraint")
    return _assigned(prev, Assignment(snapshot.tau, best), started)


def greedy_assign(
    prev: Assignment | None,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    *,
    t_ref: float = 1.0,
) -> PartitionOutcome:
    """Largest block first onto the first device (by id) that still has room."""
    started = time.perf_counter()
    w = WorkingAssignment(demands, snapshot, config, t_ref=t_ref)
    for pos in sorted(range(config.num_blocks), key=lambda p: _queue_key(w, p)):
        for j in range(snapshot.size):
            if w.fits(pos, j):
                w.place(pos, j)
                break
        else:
            return _infeasible(started, f"block {w.blocks[pos]} fits on no device")
    return _assigned(prev, w.to_assignment(), started)


def round_robin_assign(
    prev: Assignment | None,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
) -> PartitionOutcome:
    """Block k (canonical order) on device k mod |V|; capacities are ignored."""
    started = time.perf_counter()
    n = snapshot.size
    devices = tuple(k % n for k in range(config.num_blocks))
    return _assigned(prev, Assignment(snapshot.tau, devices), started)


def capacity_ranking(snapshot: NetworkSnapshot) -> list[int]:
    """Devices strongest first by min(memory / best memory, compute / best compute)."""
    devs = snapshot.devices
    top_m = max(d.mem_avail for d in devs) or 1.0
    top_c = max(d.compute_avail for d in devs)
    score = {d.id: min(d.mem_avail / top_m, d.compute_avail / top_c) for d in devs}
    return sorted(score, key=lambda j: (-score[j], j))


class ResourceAwarePolicy:
    def __init__(self, limits: Limits = Limits()):
        self.limits = limits

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        return resource_aware_assign(prev, demands, demands_prev, snapshot, config, self.limits)


class OptimalPolicy:
    def __init__(self, include_tail_compute: bool = False):
        self.include_tail_compute = include_tail_compute

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        return optimal_assign(
            prev, demands, demands_prev, snapshot, config,
            include_tail_compute=self.include_tail_compute,
        )


class GreedyPolicy:
    def __init__(self, limits: Limits = Limits()):
        self.limits = limits

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        return greedy_assign(prev, demands, demands_prev, snapshot, config, t_ref=self.limits.t_ref)


class StaticPolicy:
    """Resource-aware placement at the first interval, never changed afterwards."""

    def __init__(self, limits: Limits = Limits()):
        self.limits = limits

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        if prev is None:
            return resource_aware_assign(None, demands, None, snapshot, config, self.limits)
        return PartitionOutcome(prev.with_tau(snapshot.tau))


class DynamicLayerPolicy:
    """The whole layer as one block, re-placed every interval to minimize the objective."""

    def __init__(self, include_tail_compute: bool = False):
        self.include_tail_compute = include_tail_compute

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        started = time.perf_counter()
        total_mem = sum(dm.mem_bytes for dm in demands)
        cost = InferenceCost(demands, snapshot, config, self.include_tail_compute)
        nb = config.num_blocks
        best_val, best = None, None
        for dev in snapshot.devices:
            if total_mem > dev.mem_avail:
                continue
            j = dev.id
            val = cost.inference_time((j,) * nb)
            if prev is not None:
                # prev is always co-located, so the aggregate moves over one link
                src = prev.devices[0]
                if src != j:
                    val += sum(dm.mem_bytes for dm in demands_prev) / snapshot.bandwidth[src][j]
            if best_val is None or val < best_val:
                best_val, best = val, j
        if best is None:
            return _infeasible(started, "the aggregate layer fits on no device")
        return _assigned(prev, Assignment(snapshot.tau, (best,) * nb), started)


class EdgeShardLikePolicy:
    """Whole layer on the strongest device at the first interval, frozen afterwards."""

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        if prev is not None:
            return PartitionOutcome(prev.with_tau(snapshot.tau))
        started = time.perf_counter()
        host = capacity_ranking(snapshot)[0]
        return _assigned(None, Assignment(snapshot.tau, (host,) * config.num_blocks), started)


class GalaxyLikePolicy:
    """Heads round-robin over the k strongest devices; proj/ffn tensor-split across them.

    The strongest participant aggregates: proj and ffn are nominally placed
    there and every other participant sends it one synchronization transfer
    per interval.
    """

    def __init__(self, k: int | None = None):
        if k is not None and k < 1:
            raise ConfigError("galaxy shard count must be >= 1")
        self.k = k
        self.shards: tuple[int, ...] | None = None

    def __call__(self, prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
        if prev is not None and self.shards is not None:
            return PartitionOutcome(prev.with_tau(snapshot.tau), shards=self.shards)
        started = time.perf_counter()
        k = min(snapshot.size, config.heads) if self.k is None else min(self.k, snapshot.size)
        parts = tuple(capacity_ranking(snapshot)[:k])
        heads = tuple(parts[i % k] for i in range(config.heads))
        assignment = Assignment(snapshot.tau, heads + (parts[0], parts[0]))
        self.shards = parts
        return _assigned(prev, assignment, started, shards=parts)


def edgeshard_like_assign(prev, demands, demands_prev, snapshot, config) -> PartitionOutcome:
    return EdgeShardLikePolicy()(prev, demands, demands_prev, snapshot, config)


def galaxy_like_assign(prev, demands, demands_prev, snapshot, config, *, k=None) -> PartitionOutcome:
    return GalaxyLikePolicy(k)(prev, demands, demands_prev, snapshot, config)


def static_assign(prev, demands, demands_prev, snapshot, config, limits=Limits()) -> PartitionOutcome:
    return StaticPolicy(limits)(prev, demands, demands_prev, snapshot, config)


def dynamic_layer_assign(
    prev, demands, demands_prev, snapshot, config, *, include_tail_compute=False
) -> PartitionOutcome:
    return DynamicLayerPolicy(include_tail_compute)(prev, demands, demands_prev, snapshot, config)


# policies that cannot repair memory overload; their violations are recorded, not fixed
UNREPAIRED = frozenset(
    {PolicyKind.ROUND_ROBIN, PolicyKind.STATIC, PolicyKind.EDGESHARD_LIKE, PolicyKind.GALAXY_LIKE}
)


def make_policy(
    kind: PolicyKind,
    limits: Limits = Limits(),
    *,
    include_tail_compute: bool = False,
    galaxy_k: int | None = None,
) -> Policy:
    kind = PolicyKind(kind)
    if kind is PolicyKind.RESOURCE_AWARE:
        return ResourceAwarePolicy(limits)
    if kind is PolicyKind.OPTIMAL:
        return OptimalPolicy(include_tail_compute)
    if kind is PolicyKind.GREEDY:
        return GreedyPolicy(limits)
    if kind is PolicyKind.ROUND_ROBIN:
        return round_robin_assign
    if kind is PolicyKind.STATIC:
        return StaticPolicy(limits)
    if kind is PolicyKind.DYNAMIC_LAYER:
        return DynamicLayerPolicy(include_tail_compute)
    if kind is PolicyKind.EDGESHARD_LIKE:
        return EdgeShardLikePolicy()
    return GalaxyLikePolicy(galaxy_k)
