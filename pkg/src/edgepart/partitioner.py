"""Resource-aware head-level block assignment for one interval.

Blocks are visited largest-memory first.  The score of a block on a device is
the worst of three normalized pressures:

* memory:  (bytes already on the device + block bytes) / available bytes
* compute: (FLOPs already on the device + block FLOPs) / (available FLOP/s * t_ref)
* comm:    estimated transfer seconds for the block's pipeline edges, divided
           by t_ref; peers not placed yet are assumed to sit on the controller

With nothing else placed on the device this is exactly the block's individual
feasibility ratio, and "score <= 1" means the device can take the block.  Among
the devices that can, the block goes where score plus its normalized migration
delay (zero on its previous device) is lowest.  When
no device can, one resident block is relocated to make room; failing that the
block is placed anyway and the post-pass backtracking removes the fewest blocks
needed from every overloaded device and re-places them.  Migrations,
overload resolutions and backtracking rounds are capped by ``|B| * |V|`` and
the whole call by a wall-clock limit; hitting either yields ``Infeasible``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Mapping, Sequence

from .delay import InferenceCost, transfer_payloads
from .model import (
    Assignment,
    BlockDemand,
    BlockId,
    ConfigError,
    ModelConfig,
    NetworkSnapshot,
)

# combinations examined per overloaded device before falling back to greedy removal
REMOVAL_SEARCH_CAP = 20_000


@dataclass(frozen=True)
class Limits:
    t_max: float = 5.0
    iterations: int | None = None
    t_ref: float = 1.0

    def __post_init__(self) -> None:
        if self.t_max <= 0 or self.t_ref <= 0:
            raise ConfigError("t_max and t_ref must be positive")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iteration bound must be non-negative")

    def bound(self, n_blocks: int, n_devices: int) -> int:
        return n_blocks * n_devices if self.iterations is None else self.iterations


@dataclass(frozen=True)
class ScoreInputs:
    block: BlockId
    device: int
    mem_ratio: float
    compute_ratio: float
    comm_factor: float

    @property
    def value(self) -> float:
        return max(self.mem_ratio, self.compute_ratio, self.comm_factor)


@dataclass(frozen=True)
class PartitionOutcome:
    """Result of one policy invocation; ``assignment is None`` means Infeasible."""

    assignment: Assignment | None
    migrations: tuple[tuple[BlockId, int, int], ...] = ()
    migration_count: int = 0
    backtrack_count: int = 0
    elapsed: float = field(default=0.0, compare=False)
    score_evaluations: int = 0
    shards: tuple[int, ...] | None = None
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.assignment is not None

    @property
    def status(self) -> str:
        return "assigned" if self.feasible else "infeasible"

    def to_dict(self) -> dict[str, Any]:
        a = self.assignment
        return {
            "status": self.status,
            "tau": a.tau if a else None,
            "placement": a.encode() if a else None,
            "migrations": [[str(b), s, d] for b, s, d in self.migrations],
            "migration_count": self.migration_count,
            "backtrack_count": self.backtrack_count,
            "elapsed": self.elapsed,
            "score_evaluations": self.score_evaluations,
            "shards": list(self.shards) if self.shards is not None else None,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PartitionOutcome":
        a = None
        if data["status"] == "assigned":
            a = Assignment.decode(data["tau"], data["placement"])
        shards = data.get("shards")
        return cls(
            assignment=a,
            migrations=tuple((BlockId.parse(b), int(s), int(d)) for b, s, d in data["migrations"]),
            migration_count=data["migration_count"],
            backtrack_count=data["backtrack_count"],
            elapsed=data["elapsed"],
            score_evaluations=data["score_evaluations"],
            shards=tuple(shards) if shards is not None else None,
            reason=data.get("reason", ""),
        )


def migrations_between(
    prev: Assignment | None, next: Assignment
) -> tuple[tuple[BlockId, int, int], ...]:
    if prev is None:
        return ()
    return tuple(
        (blk, a, b)
        for blk, a, b in zip(next.placement, prev.devices, next.devices)
        if a != b
    )


class WorkingAssignment:
    """Partial placement plus per-device usage tallies during one interval."""

    def __init__(
        self,
        demands: Sequence[BlockDemand],
        snapshot: NetworkSnapshot,
        config: ModelConfig,
        *,
        prev: Assignment | None = None,
        demands_prev: Sequence[BlockDemand] | None = None,
        t_ref: float = 1.0,
    ):
        h = config.heads
        if len(demands) != h + 2:
            raise ConfigError("demands do not cover every block")
        if prev is not None and demands_prev is None:
            raise ConfigError("previous-interval demands are required when prev is given")
        n = snapshot.size
        self.heads = h
        self.n_devices = n
        self.snapshot = snapshot
        self.demands = tuple(demands)
        self.blocks = config.blocks()
        self.mem = [dm.mem_bytes for dm in demands]
        self.flops = [dm.flops for dm in demands]
        self.mem_cap = [d.mem_avail for d in snapshot.devices]
        self.flop_cap = [d.compute_avail * t_ref for d in snapshot.devices]
        self.t_ref = t_ref
        self.slots: list[int | None] = [None] * (h + 2)
        self.mem_used = [0] * n
        self.flops_used = [0] * n
        self.relocated: set[int] = set()
        self.evaluations = 0

        ctrl = snapshot.controller
        bw = snapshot.bandwidth
        w_hp, w_pf, w_in = transfer_payloads(config, snapshot.tau)
        self.controller = ctrl
        self.t_input = [0.0 if j == ctrl else w_in / bw[ctrl][j] for j in range(n)]
        self.t_hp = [[0.0 if j == k else w_hp / bw[j][k] for k in range(n)] for j in range(n)]
        self.t_pf = [[0.0 if j == k else w_pf / bw[j][k] for k in range(n)] for j in range(n)]
        self.prev = prev.devices if prev is not None else None
        self.mig_bytes = [0] * (h + 2)
        if self.prev is not None:
            self.mig_bytes = [dm.mem_bytes for dm in demands_prev]
            self.t_mig = [
                [0.0 if j == k else demands_prev[p].mem_bytes / bw[self.prev[p]][k] for k in range(n)]
                for p, j in enumerate(self.prev)
            ]

    # -- placement bookkeeping -------------------------------------------------

    def position(self, block: BlockId) -> int:
        return block.position(self.heads)

    def place(self, pos: int, dev: int) -> None:
        if self.slots[pos] is not None:
            self.remove(pos)
        self.slots[pos] = dev
        self.mem_used[dev] += self.mem[pos]
        self.flops_used[dev] += self.flops[pos]

    def remove(self, pos: int) -> int:
        dev = self.slots[pos]
        if dev is None:
            raise ValueError(f"block {self.blocks[pos]} is not placed")
        self.slots[pos] = None
        self.mem_used[dev] -= self.mem[pos]
        self.flops_used[dev] -= self.flops[pos]
        return dev

    def residents(self, dev: int) -> list[int]:
        return [p for p, d in enumerate(self.slots) if d == dev]

    def fits_alone(self, pos: int, dev: int) -> bool:
        return self.mem[pos] <= self.mem_cap[dev] and self.flops[pos] <= self.flop_cap[dev]

    def fits(self, pos: int, dev: int, without: int | None = None) -> bool:
        mem = self.mem_used[dev] + self.mem[pos]
        flops = self.flops_used[dev] + self.flops[pos]
        if self.slots[pos] == dev:
            mem -= self.mem[pos]
            flops -= self.flops[pos]
        if without is not None and self.slots[without] == dev:
            mem -= self.mem[without]
            flops -= self.flops[without]
        return mem <= self.mem_cap[dev] and flops <= self.flop_cap[dev]

    def overloaded(self, dev: int) -> bool:
        return self.mem_used[dev] > self.mem_cap[dev] or self.flops_used[dev] > self.flop_cap[dev]

    def violations(self) -> list[int]:
        return [j for j in range(self.n_devices) if self.overloaded(j)]

    def complete(self) -> bool:
        return all(s is not None for s in self.slots)

    # -- scoring ---------------------------------------------------------------

    def comm_seconds(self, pos: int, dev: int) -> float:
        h = self.heads
        ctrl = self.controller
        slots = self.slots
        if pos < h:
            proj = slots[h]
            t = self.t_input[dev] + self.t_hp[dev][ctrl if proj is None else proj]
        elif pos == h:
            t = max(self.t_hp[ctrl if s is None else s][dev] for s in slots[:h])
            ffn = slots[h + 1]
            t += self.t_pf[dev][ctrl if ffn is None else ffn]
        else:
            proj = slots[h]
            t = self.t_pf[ctrl if proj is None else proj][dev]
        return t

    def migration_seconds(self, pos: int, dev: int) -> float:
        return 0.0 if self.prev is None else self.t_mig[pos][dev]

    def selection_key(self, pos: int, dev: int, value: float) -> tuple[float, int]:
        """Device preference: score plus the normalized cost of moving the block there."""
        return (value + self.migration_seconds(pos, dev) / self.t_ref, dev)

    def score_inputs(self, pos: int, dev: int, include_load: bool = True) -> ScoreInputs:
        self.evaluations += 1
        mem, flops = self.mem[pos], self.flops[pos]
        if include_load:
            mem += self.mem_used[dev]
            flops += self.flops_used[dev]
            if self.slots[pos] == dev:
                mem -= self.mem[pos]
                flops -= self.flops[pos]
        m_cap, f_cap = self.mem_cap[dev], self.flop_cap[dev]
        return ScoreInputs(
            self.blocks[pos],
            dev,
            mem / m_cap if m_cap > 0 else math.inf,
            flops / f_cap if f_cap > 0 else math.inf,
            self.comm_seconds(pos, dev) / self.t_ref,
        )

    def score(self, pos: int, dev: int, include_load: bool = True) -> float:
        return self.score_inputs(pos, dev, include_load).value

    def to_assignment(self) -> Assignment:
        if not self.complete():
            raise ValueError("working assignment is partial")
        return Assignment(self.snapshot.tau, tuple(self.slots))  # type: ignore[arg-type]


def _working(
    demands, snapshot, config, tentative, prev, demands_prev, t_ref, skip: BlockId | None = None
) -> WorkingAssignment:
    w = WorkingAssignment(
        demands, snapshot, config, prev=prev, demands_prev=demands_prev, t_ref=t_ref
    )
    for blk, dev in (tentative or {}).items():
        if blk != skip:
            w.place(w.position(blk), dev)
    return w


def score_inputs(
    block: BlockId,
    device: int,
    demands: Sequence[BlockDemand],
    snapshot: NetworkSnapshot,
    tentative: Mapping[BlockId, int] | None,
    config: ModelConfig,
    *,
    prev: Assignment | None = None,
    demands_prev: Sequence[BlockDemand] | None = None,
    t_ref: float = 1.0,
) -> ScoreInputs:
    """Score components of placing ``block`` on ``device`` next to the ``tentative`` blocks."""
    w = _working(demands, snapshot, config, tentative, prev, demands_prev, t_ref, skip=block)
    return w.score_inputs(w.position(block), device)


def score(
    block: BlockId,
    device: int,
    demands: Sequence[BlockDemand],
    snapshot: NetworkSnapshot,
    tentative: Mapping[BlockId, int] | None,
    config: ModelConfig,
    **kwargs: Any,
) -> float:
    return score_inputs(block, device, demands, snapshot, tentative, config, **kwargs).value


def _queue_key(w: WorkingAssignment, pos: int) -> tuple[int, int, int]:
    return (-w.mem[pos], -w.flops[pos], pos)


def resolve_resource_overload(block: BlockId, working: WorkingAssignment, budget: int) -> bool:
    """Free room for ``block`` by relocating a single resident block.

    Candidate hosts are the devices that could hold ``block`` on their own,
    best score first.  On each, residents are tried smallest first; the first
    one whose removal makes room and that fits somewhere else is moved there
    and ``block`` takes its place.  Every block is relocated at most once per
    interval.  Returns False when nothing works or the budget is spent.
    """
    if budget <= 0:
        return False
    w = working
    pos = w.position(block)
    n = w.n_devices
    hosts = [j for j in range(n) if w.fits_alone(pos, j)]
    host_keys = {j: w.selection_key(pos, j, w.score(pos, j)) for j in hosts}
    hosts.sort(key=host_keys.__getitem__)
    for j in hosts:
        residents = [r for r in w.residents(j) if r not in w.relocated and r != pos]
        residents.sort(key=lambda r: (w.mem[r], w.flops[r], r))
        for r in residents:
            if not w.fits(pos, j, without=r):
                continue
            dests = [k for k in range(n) if k != j]
            dest_keys = {k: w.selection_key(r, k, w.score(r, k)) for k in dests}
            dests.sort(key=dest_keys.__getitem__)
            for k in dests:
                if w.fits(r, k):
                    w.place(r, k)
                    w.relocated.add(r)
                    w.place(pos, j)
                    return True
    return False


def _minimal_removal(
    residents: list[int],
    mem: Sequence[float],
    flops: Sequence[float],
    mem_excess: float,
    flop_excess: float,
    cost: Mapping[int, float],
) -> list[int]:
    """Fewest residents whose removal clears both excesses; cheapest total cost among those."""

    def covers(subset) -> bool:
        return (
            sum(mem[r] for r in subset) >= mem_excess
            and sum(flops[r] for r in subset) >= flop_excess
        )

    def lower_bound(values: Sequence[float], excess: float) -> int:
        if excess <= 0:
            return 0
        acc = 0.0
        for k, v in enumerate(sorted(values, reverse=True), start=1):
            acc += v
            if acc >= excess:
                return k
        return len(values) + 1

    order = sorted(residents, key=lambda r: (cost[r], r))
    k0 = max(
        1,
        lower_bound([mem[r] for r in order], mem_excess),
        lower_bound([flops[r] for r in order], flop_excess),
    )
    examined = 0
    for k in range(k0, len(order) + 1):
        best = None
        for subset in combinations(order, k):
            examined += 1
            if examined > REMOVAL_SEARCH_CAP:
                break
            if covers(subset):
                key = (sum(cost[r] for r in subset), tuple(sorted(subset)))
                if best is None or key < best[0]:
                    best = (key, subset)
        if best is not None:
            return list(best[1])
        if examined > REMOVAL_SEARCH_CAP:
            break
    # too many combinations: drop the most relieving blocks until the device fits
    m_ex, f_ex = max(mem_excess, 0.0), max(flop_excess, 0.0)

    def relief(r: int) -> float:
        return max(mem[r] / m_ex if m_ex else 0.0, flops[r] / f_ex if f_ex else 0.0)

    chosen: list[int] = []
    for r in sorted(order, key=lambda r: (-relief(r), cost[r], r)):
        chosen.append(r)
        if covers(chosen):
            break
    return chosen


def backtrack_for_resource_violations(working: WorkingAssignment, budget: int) -> bool:
    """Clear every overloaded device by removing and re-placing the fewest blocks.

    Removal cost is the block's individual score on its current device, so
    among equally small removal sets the cheapest to move is taken.  Removed
    blocks are re-placed largest first on the lowest-scoring device that can
    take them.  Returns False if some removed block fits nowhere.
    """
    w = working
    violating = w.violations()
    if not violating:
        return True
    if budget <= 0:
        return False
    removed: list[int] = []
    for j in violating:
        res = w.residents(j)
        cost = {r: w.score(r, j, include_load=False) for r in res}
        chosen = _minimal_removal(
            res,
            w.mem,
            w.flops,
            w.mem_used[j] - w.mem_cap[j],
            w.flops_used[j] - w.flop_cap[j],
            cost,
        )
        for r in chosen:
            w.remove(r)
            removed.append(r)
    removed.sort(key=lambda p: _queue_key(w, p))
    for r in removed:
        scores = [w.score(r, k) for k in range(w.n_devices)]
        feasible = [k for k in range(w.n_devices) if scores[k] <= 1 and w.fits(r, k)]
        if not feasible:
            return False
        w.place(r, min(feasible, key=lambda k: w.selection_key(r, k, scores[k])))
    return True


def _relabel_identical_heads(w: WorkingAssignment) -> None:
    """Swap which of several interchangeable heads sits where, keeping per-device counts.

    Heads with identical demands give the same delays whichever of them a
    device hosts, so only the number per device matters; keep as many as
    possible where they were and match the rest cheapest-migration first.
    """
    groups: dict[tuple, list[int]] = {}
    for pos in range(w.heads):
        groups.setdefault((w.mem[pos], w.flops[pos], w.mig_bytes[pos]), []).append(pos)
    for members in groups.values():
        if len(members) < 2:
            continue
        quota: dict[int, int] = {}
        for pos in members:
            quota[w.slots[pos]] = quota.get(w.slots[pos], 0) + 1
        target: dict[int, int] = {}
        for pos in members:
            home = w.prev[pos]
            if quota.get(home, 0) > 0:
                target[pos] = home
                quota[home] -= 1
        loose = [p for p in members if p not in target]
        pairs = sorted(
            (w.t_mig[p][k], p, k) for p in loose for k, q in quota.items() if q > 0
        )
        for _, p, k in pairs:
            if p in target or quota[k] == 0:
                continue
            target[p] = k
            quota[k] -= 1
        for pos in members:
            if w.slots[pos] != target[pos]:
                w.remove(pos)
        for pos in members:
            if w.slots[pos] is None:
                w.place(pos, target[pos])


def settle_migrations(w: WorkingAssignment, config: ModelConfig) -> int:
    """Send moved blocks back to their previous device when that is no worse.

    Scores judge one block at a time, but the interval cost is the slowest
    head path plus every migration, so a move that does not shorten the
    critical path only adds migration delay.  Moves are retried most expensive
    first; a revert is kept when the block still fits and the interval cost
    (inference plus migration) does not rise.  Returns the number of reverts.
    """
    if w.prev is None:
        return 0
    cost = InferenceCost(w.demands, w.snapshot, config)
    _relabel_identical_heads(w)
    slots = list(w.slots)

    def total(devs) -> float:
        mig = sum(w.t_mig[p][d] for p, d in enumerate(devs))
        return cost.inference_time(devs) + mig

    current = total(slots)
    moved = [p for p, d in enumerate(slots) if d != w.prev[p]]
    moved.sort(key=lambda p: (-w.t_mig[p][slots[p]], p))
    reverted = 0
    for pos in moved:
        home = w.prev[pos]
        if not w.fits(pos, home):
            continue
        trial = list(w.slots)
        trial[pos] = home
        value = total(trial)
        if value <= current:
            w.place(pos, home)
            current = value
            reverted += 1
    return reverted


def resource_aware_assign(
    prev: Assignment | None,
    demands: Sequence[BlockDemand],
    demands_prev: Sequence[BlockDemand] | None,
    snapshot: NetworkSnapshot,
    config: ModelConfig,
    limits: Limits = Limits(),
) -> PartitionOutcome:
    start = time.perf_counter()
    w = WorkingAssignment(
        demands, snapshot, config, prev=prev, demands_prev=demands_prev, t_ref=limits.t_ref
    )
    n = snapshot.size
    bound = limits.bound(config.num_blocks, n)
    migration_count = 0
    backtrack_count = 0

    def infeasible(reason: str) -> PartitionOutcome:
        return PartitionOutcome(
            None,
            migration_count=migration_count,
            backtrack_count=backtrack_count,
            elapsed=time.perf_counter() - start,
            score_evaluations=w.evaluations,
            reason=reason,
        )

    for pos in sorted(range(config.num_blocks), key=lambda p: _queue_key(w, p)):
        block = w.blocks[pos]
        scores = [w.score(pos, j) for j in range(n)]
        feasible = [j for j in range(n) if scores[j] <= 1]
        if feasible:
            best = min(feasible, key=lambda j: w.selection_key(pos, j, scores[j]))
            w.place(pos, best)
            if w.overloaded(best):
                w.remove(pos)
                resolved = resolve_resource_overload(block, w, bound - migration_count)
                migration_count += 1 + resolved
                if migration_count > bound:
                    return infeasible("migration bound exceeded")
                if not resolved:
                    w.place(pos, best)
            elif w.prev is not None and w.prev[pos] != best:
                migration_count += 1
                if migration_count > bound:
                    return infeasible("migration bound exceeded")
        else:
            resolved = resolve_resource_overload(block, w, bound - migration_count)
            migration_count += 1 + resolved
            if migration_count > bound:
                return infeasible("migration bound exceeded")
            if not resolved:
                hosts = [j for j in range(n) if w.fits_alone(pos, j)]
                if not hosts:
                    return infeasible(f"block {block} fits on no device")
                # escalate: overload the best host and let backtracking sort it out
                w.place(pos, min(hosts, key=lambda j: w.selection_key(pos, j, scores[j])))
        if time.perf_counter() - start > limits.t_max:
            return infeasible("time limit exceeded")

    while w.violations():
        backtrack_count += 1
        if backtrack_count > bound:
            return infeasible("backtrack bound exceeded")
        if not backtrack_for_resource_violations(w, bound - backtrack_count + 1):
            return infeasible("backtracking could not re-place a block")
        if time.perf_counter() - start > limits.t_max:
            return infeasible("time limit exceeded")

    settle_migrations(w, config)
    assignment = w.to_assignment()
    return PartitionOutcome(
        assignment,
        migrations=migrations_between(prev, assignment),
        migration_count=migration_count,
        backtrack_count=backtrack_count,
        elapsed=time.perf_counter() - start,
        score_evaluations=w.evaluations,
    )
