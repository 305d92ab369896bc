"""Scenario sampling and the per-interval simulation loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import PolicyKind, make_policy
from .delay import DelayBreakdown, interval_delay
from .model import (
    Assignment,
    BlockId,
    ConfigError,
    DeviceState,
    ModelConfig,
    NetworkSnapshot,
    demands_at,
    memory_by_device,
)
from .partitioner import Limits, PartitionOutcome, migrations_between
from .units import GIB, gbps_to_bytes_per_sec, gflops_to_flops


@dataclass(frozen=True)
class BackgroundLoad:
    """Piecewise-constant background occupancy.

    Each interval, every device (and link) redraws its occupancy with
    probability ``change_prob``: compute and memory lose a uniform fraction in
    [0, amplitude], link bandwidth moves by a uniform factor in
    [-amplitude, +amplitude] around its base value.
    """

    amplitude: float = 0.5
    change_prob: float = 0.3

    def __post_init__(self) -> None:
        if not 0 <= self.amplitude < 1:
            raise ConfigError("background amplitude must lie in [0, 1)")
        if not 0 <= self.change_prob <= 1:
            raise ConfigError("background change_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    device_count: int = 25
    mem_range: tuple[float, float] = (2 * GIB, 8 * GIB)
    compute_range: tuple[float, float] = (gflops_to_flops(5), gflops_to_flops(50))
    bandwidth_range: tuple[float, float] = (gbps_to_bytes_per_sec(1), gbps_to_bytes_per_sec(10))
    mem_sigma: float = 0.5
    compute_sigma: float = 0.5
    background: BackgroundLoad = field(default_factory=BackgroundLoad)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.device_count < 1:
            raise ConfigError("device_count must be >= 1")
        for name in ("mem_range", "compute_range", "bandwidth_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} needs 0 < lo <= hi, got ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.mem_sigma < 0 or self.compute_sigma < 0:
            raise ConfigError("log-normal sigmas must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def _bounded_lognormal(rng: np.random.Generator, lo: float, hi: float, sigma: float, n: int) -> np.ndarray:
    """Log-normal with median at the geometric midpoint, resampled until inside [lo, hi]."""
    median = math.sqrt(lo * hi)
    if sigma == 0 or lo == hi:
        return np.full(n, median)
    out = rng.lognormal(math.log(median), sigma, n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.lognormal(math.log(median), sigma, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


class ScenarioState:
    """Per-run generator state; advance it once per interval, in order."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        n = cfg.device_count
        self.base_mem = _bounded_lognormal(self.rng, *cfg.mem_range, cfg.mem_sigma, n)
        self.base_compute = _bounded_lognormal(self.rng, *cfg.compute_range, cfg.compute_sigma, n)
        self.pairs = [(j, k) for j in range(n) for k in range(j + 1, n)]
        self.base_bw = self.rng.uniform(*cfg.bandwidth_range, len(self.pairs))
        self.mem_load = np.zeros(n)
        self.compute_load = np.zeros(n)
        self.link_shift = np.zeros(len(self.pairs))
        self.tau = 0

    def snapshot(self) -> NetworkSnapshot:
        n = self.cfg.device_count
        mem = self.base_mem * (1 - self.mem_load)
        comp = self.base_compute * (1 - self.compute_load)
        devices = tuple(
            DeviceState(j, float(mem[j]), float(self.base_compute[j]), float(comp[j]), j == 0)
            for j in range(n)
        )
        bw = self.base_bw * (1 + self.link_shift)
        links = {pair: float(r) for pair, r in zip(self.pairs, bw)}
        return NetworkSnapshot.from_links(self.tau, devices, links)

    def _redraw(self, current: np.ndarray, lo: float, hi: float) -> np.ndarray:
        p = self.cfg.background.change_prob
        change = self.rng.random(current.size) < p
        fresh = self.rng.uniform(lo, hi, current.size)
        return np.where(change, fresh, current)

    def advance(self, tau: int) -> NetworkSnapshot:
        if tau != self.tau + 1:
            raise ValueError(f"scenario is at interval {self.tau}; cannot jump to {tau}")
        amp = self.cfg.background.amplitude
        self.compute_load = self._redraw(self.compute_load, 0.0, amp)
        self.mem_load = self._redraw(self.mem_load, 0.0, amp)
        self.link_shift = self._redraw(self.link_shift, -amp, amp)
        self.tau = tau
        return self.snapshot()


def sample_scenario(cfg: ScenarioConfig) -> tuple[NetworkSnapshot, ScenarioState]:
    """Base network (no background load, interval 0) and the state to advance."""
    state = ScenarioState(cfg)
    return state.snapshot(), state


def advance_snapshot(state: ScenarioState, tau: int) -> NetworkSnapshot:
    return state.advance(tau)


@dataclass(frozen=True)
class IntervalRecord:
    tau: int
    status: str  # "assigned" or "carried" (policy was infeasible, previous placement kept)
    assignment: Assignment
    delay: DelayBreakdown
    memory: tuple[int, ...]
    violations: tuple[tuple[int, int, float], ...]
    migrations: tuple[tuple[BlockId, int, int], ...]
    migration_count: int = 0
    backtrack_count: int = 0
    score_evaluations: int = 0
    elapsed: float = field(default=0.0, compare=False)

    @property
    def objective(self) -> float:
        return self.delay.objective


@dataclass(frozen=True)
class RunTrace:
    policy: str
    seed: int
    config: ModelConfig
    records: tuple[IntervalRecord, ...]

    @property
    def total_latency(self) -> float:
        return sum(r.objective for r in self.records)

    @property
    def peak_memory(self) -> int:
        return max(max(r.memory) for r in self.records)

    @property
    def total_memory(self) -> list[int]:
        return [sum(r.memory) for r in self.records]

    @property
    def infeasible_intervals(self) -> int:
        return sum(1 for r in self.records if r.status != "assigned")

    @property
    def violation_intervals(self) -> int:
        return sum(1 for r in self.records if r.violations)

    @property
    def migration_total(self) -> int:
        return sum(len(r.migrations) for r in self.records)


class RunFailure(RuntimeError):
    """The policy found no placement at the first interval."""


def _violations(memory, snapshot: NetworkSnapshot) -> tuple[tuple[int, int, float], ...]:
    return tuple(
        (j, used, d.mem_avail)
        for j, (used, d) in enumerate(zip(memory, snapshot.devices))
        if used > d.mem_avail
    )


def run_inference(
    model: ModelConfig,
    scenario: ScenarioConfig,
    policy: PolicyKind | str | Callable,
    limits: Limits = Limits(),
    *,
    include_tail_compute: bool = False,
    galaxy_k: int | None = None,
) -> RunTrace:
    """Drive one policy through every interval of one scenario."""
    if callable(policy) and not isinstance(policy, (str, PolicyKind)):
        name = getattr(policy, "__name__", type(policy).__name__)
        decide = policy
    else:
        kind = PolicyKind.parse(policy) if isinstance(policy, str) else policy
        name = kind.value
        decide = make_policy(
            kind, limits, include_tail_compute=include_tail_compute, galaxy_k=galaxy_k
        )
    _, state = sample_scenario(scenario)
    records: list[IntervalRecord] = []
    prev: Assignment | None = None
    shards: tuple[int, ...] | None = None
    demands_prev = None
    for tau in range(1, model.intervals + 1):
        snap = state.advance(tau)
        demands = demands_at(model, tau)
        outcome: PartitionOutcome = decide(prev, demands, demands_prev, snap, model)
        if outcome.feasible:
            current = outcome.assignment.with_tau(tau)
            shards = outcome.shards
            status = "assigned"
            migrations = outcome.migrations or migrations_between(prev, current)
        elif prev is None:
            raise RunFailure(f"{name}: no feasible placement at interval 1 ({outcome.reason})")
        else:
            current = prev.with_tau(tau)
            status = "carried"
            migrations = ()
        delay = interval_delay(
            prev, current, demands, demands_prev, snap, model,
            include_tail_compute=include_tail_compute, shards=shards,
        )
        memory = memory_by_device(current, demands, snap.size, shards)
        records.append(
            IntervalRecord(
                tau=tau,
                status=status,
                assignment=current,
                delay=delay,
                memory=memory,
                violations=_violations(memory, snap),
                migrations=migrations,
                migration_count=outcome.migration_count,
                backtrack_count=outcome.backtrack_count,
                score_evaluations=outcome.score_evaluations,
                elapsed=outcome.elapsed,
            )
        )
        prev, demands_prev = current, demands
    return RunTrace(name, scenario.seed, model, tuple(records))
