"""Per-interval inference and migration delays.

Pipeline per interval: the controller sends the input sequence to every device
hosting a head, heads compute, head outputs travel to ``proj``, and ``proj``
sends its output to ``ffn``.  Two serialization rules apply:

* heads sharing a device compute one after another in ascending head index;
* head outputs leaving the same device for ``proj`` share that link and are
  sent in ascending head index, each starting once its head has finished and
  the link is free.

The input sequence is sent once per destination device.  Transfers over
distinct links proceed in parallel.  Processing of ``proj``/``ffn`` is left
out unless ``include_tail_compute`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .model import (
    Assignment,
    BlockDemand,
    ConfigError,
    ModelConfig,
    NetworkSnapshot,
    seq_len,
    split_evenly,
)


@dataclass(frozen=True)
class TransferSpec:
    src: int
    dst: int
    payload_bytes: float

    def duration(self, snapshot: NetworkSnapshot) -> float:
        if self.payload_bytes < 0:
            raise ValueError("negative payload")
        return snapshot.transfer_time(self.payload_bytes, self.src, self.dst)


@dataclass(frozen=True)
class DelayBreakdown:
    """Delay decomposition for one interval (seconds).

    Per head ``i``: ``input_delay[i]`` is the arrival of the input at the
    head's device, ``compute_delay[i]`` the time from that arrival until the
    head finishes (queueing behind co-located heads included) and
    ``head_to_proj_delay[i]`` the time from finishing until its output reaches
    ``proj`` (link queueing included).
    """

    input_delay: tuple[float, ...]
    compute_delay: tuple[float, ...]
    head_to_proj_delay: tuple[float, ...]
    proj_to_ffn_delay: float
    tail_compute_delay: float
    sync_delay: float
    sync_transfers: int
    total_inference: float
    total_migration: float
    objective: float

    @property
    def head_finish(self) -> float:
        return max(
            a + c + t
            for a, c, t in zip(self.input_delay, self.compute_delay, self.head_to_proj_delay)
        )

    def recompose(self) -> float:
        return self.head_finish + self.proj_to_ffn_delay + self.tail_compute_delay + self.sync_delay

    def with_migration(self, seconds: float) -> "DelayBreakdown":
        return DelayBreakdown(
            self.input_delay,
            self.compute_delay,
            self.head_to_proj_delay,
            self.proj_to_ffn_delay,
            self.tail_compute_delay,
            self.sync_delay,
            self.sync_transfers,
            self.total_inference,
            seconds,
            self.total_inference + seconds,
        )


def transfer_payloads(config: ModelConfig, tau: int) -> tuple[int, int, int]:
    """(head->proj, proj->ffn, controller->head input) payload sizes in bytes."""
    L = seq_len(config, tau)
    b = config.bytes_per_param
    return L * config.head_dim * b, L * config.d_model * b, L * config.d_model * b


def migration_delay(
    demand_prev: BlockDemand, src: int, dst: int, snapshot: NetworkSnapshot
) -> float:
    """Moving a block costs its previous-interval footprint over the current link."""
    if src == dst:
        return 0.0
    try:
        rate = snapshot.bandwidth[src][dst]
    except IndexError:
        raise ConfigError(f"no link between devices {src} and {dst}") from None
    return demand_prev.mem_bytes / rate


def total_migration_delay(
    prev: Assignment,
    next: Assignment,
    demands_prev: Sequence[BlockDemand],
    snapshot: NetworkSnapshot,
) -> float:
    if len(prev.devices) != len(next.devices):
        raise ConfigError("assignments cover different block sets")
    return sum(
        migration_delay(dm, a, b, snapshot)
        for dm, a, b in zip(demands_prev, prev.devices, next.devices)
        if a != b
    )


class InferenceCost:
    """Precomputed per-interval constants for evaluating many placements.

    Build once per (demands, snapshot) and call :meth:`inference_time` or
    :meth:`breakdown` with placement tuples in canonical block order.
    """

    def __init__(
        self,
        demands: Sequence[BlockDemand],
        snapshot: NetworkSnapshot,
        config: ModelConfig,
        include_tail_compute: bool = False,
    ):
        h = config.heads
        if len(demands) != h + 2:
            raise ConfigError("demands do not cover every block")
        self.heads = h
        self.snapshot = snapshot
        self.include_tail_compute = include_tail_compute
        n = snapshot.size
        ctrl = snapshot.controller
        w_hp, w_pf, w_in = transfer_payloads(config, snapshot.tau)
        self.sync_bytes = w_in
        self.flops = [dm.flops for dm in demands]
        self.compute = [d.compute_avail for d in snapshot.devices]
        bw = snapshot.bandwidth
        self.t_input = [0.0 if j == ctrl else w_in / bw[ctrl][j] for j in range(n)]
        self.t_hp = [[0.0 if j == k else w_hp / bw[j][k] for k in range(n)] for j in range(n)]
        self.t_pf = [[0.0 if j == k else w_pf / bw[j][k] for k in range(n)] for j in range(n)]
        # per-device seconds for one head; heads are identical but keep it general
        self.t_head = [[f / c for c in self.compute] for f in self.flops[:h]]

    def _heads(self, devices: Sequence[int]) -> tuple[list[float], list[float], list[float]]:
        h = self.heads
        proj = devices[h]
        clock: dict[int, float] = {}
        link_free: dict[int, float] = {}
        t_in, t_hp = self.t_input, self.t_hp
        arrive_in, done_at, arrive_proj = [], [], []
        for i in range(h):
            j = devices[i]
            start = clock.get(j)
            if start is None:
                start = t_in[j]
            done = start + self.t_head[i][j]
            clock[j] = done
            if j == proj:
                arrive = done
            else:
                free = link_free.get(j, 0.0)
                arrive = (done if done > free else free) + t_hp[j][proj]
                link_free[j] = arrive
            arrive_in.append(t_in[j])
            done_at.append(done)
            arrive_proj.append(arrive)
        return arrive_in, done_at, arrive_proj

    def _tail(self, devices: Sequence[int], shards: Sequence[int] | None) -> float:
        h = self.heads
        if not self.include_tail_compute:
            return 0.0
        c = self.compute
        if shards:
            return sum(
                max(s / c[p] for p, s in zip(shards, split_evenly(self.flops[pos], len(shards))))
                for pos in (h, h + 1)
            )
        return self.flops[h] / c[devices[h]] + self.flops[h + 1] / c[devices[h + 1]]

    def _sync(self, devices: Sequence[int], shards: Sequence[int] | None) -> tuple[float, int]:
        if not shards:
            return 0.0, 0
        agg = devices[self.heads + 1]
        others = [p for p in shards if p != agg]
        if not others:
            return 0.0, 0
        bw = self.snapshot.bandwidth
        return max(self.sync_bytes / bw[p][agg] for p in others), len(others)

    def inference_time(self, devices: Sequence[int], shards: Sequence[int] | None = None) -> float:
        h = self.heads
        arrive = max(self._heads(devices)[2])
        total = arrive + self.t_pf[devices[h]][devices[h + 1]]
        if self.include_tail_compute:
            total += self._tail(devices, shards)
        if shards:
            total += self._sync(devices, shards)[0]
        return total

    def breakdown(self, devices: Sequence[int], shards: Sequence[int] | None = None) -> DelayBreakdown:
        h = self.heads
        arrive_in, done_at, arrive_proj = self._heads(devices)
        pf = self.t_pf[devices[h]][devices[h + 1]]
        tail = self._tail(devices, shards)
        sync, n_sync = self._sync(devices, shards)
        total = max(arrive_proj) + pf + tail + sync
        return DelayBreakdown(
            input_delay=tuple(arrive_in),
            compute_delay=tuple(d - a for d, a in zip(done_at, arrive_in)),
            head_to_proj_delay=tuple(p - d for p, d in zip(arrive_proj, done_at)),
            proj_to_ffn_delay=pf,
            tail_compute_delay=tail,
            sync_delay=sync,
            sync_transfers=n_sync,
            total_inference=total,
            total_migration=0.0,
            objective=total,
        )


def total_inference_delay(
    assignment: Assignment,
    demands: Sequence[BlockDemand],
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    *,
    include_tail_compute: bool = False,
    shards: Sequence[int] | None = None,
) -> DelayBreakdown:
    """D_T for one interval; migration fields are zero.

    ``shards`` tensor-splits proj/ffn across the listed devices and adds one
    synchronization transfer from each other shard to the device hosting ffn.
    """
    if assignment.heads != config.heads:
        raise ConfigError("assignment does not match the model's block set")
    cost = InferenceCost(demands, snapshot, config, include_tail_compute)
    return cost.breakdown(assignment.devices, shards)


def interval_delay(
    prev: Assignment | None,
    next: Assignment,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    *,
    include_tail_compute: bool = False,
    shards: Sequence[int] | None = None,
) -> DelayBreakdown:
    """Full breakdown including migrations from ``prev`` (none at the first interval)."""
    bd = total_inference_delay(
        next, demands, snapshot, config, include_tail_compute=include_tail_compute, shards=shards
    )
    if prev is None:
        return bd
    if demands_prev is None:
        raise ConfigError("previous-interval demands are required when prev is given")
    return bd.with_migration(total_migration_delay(prev, next, demands_prev, snapshot))


def objective(
    prev: Assignment | None,
    next: Assignment,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    *,
    include_tail_compute: bool = False,
) -> float:
    """D_T at the first interval, D_T plus total migration delay afterwards."""
    return interval_delay(
        prev, next, demands, demands_prev, snapshot, config,
        include_tail_compute=include_tail_compute,
    ).objective
