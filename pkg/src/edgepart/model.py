"""Transformer blocks, edge-network state and per-interval resource demands.

A single decoder layer is cut into ``h`` attention heads (each carrying its own
K/V cache), one output projection and one feed-forward block.  Every other
module works on these blocks in a fixed canonical order: heads by index, then
``proj``, then ``ffn``.  Sequences indexed by "block position" follow that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Sequence


class ConfigError(ValueError):
    """Raised for invalid model, network or experiment configuration."""


class BlockKind(IntEnum):
    HEAD = 0
    PROJ = 1
    FFN = 2


@dataclass(frozen=True, order=True)
class BlockId:
    kind: BlockKind
    index: int = 0

    @classmethod
    def head(cls, index: int) -> "BlockId":
        return cls(BlockKind.HEAD, index)

    @property
    def is_head(self) -> bool:
        return self.kind is BlockKind.HEAD

    def position(self, heads: int) -> int:
        """Index of this block in the canonical order for a model with ``heads`` heads."""
        if self.kind is BlockKind.HEAD:
            if not 0 <= self.index < heads:
                raise ConfigError(f"head index {self.index} out of range for h={heads}")
            return self.index
        return heads if self.kind is BlockKind.PROJ else heads + 1

    def __str__(self) -> str:
        if self.kind is BlockKind.HEAD:
            return f"h{self.index}"
        return "proj" if self.kind is BlockKind.PROJ else "ffn"

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        if text == "proj":
            return PROJ
        if text == "ffn":
            return FFN
        if text.startswith("h") and text[1:].isdigit():
            return cls.head(int(text[1:]))
        raise ConfigError(f"unknown block id {text!r}")


PROJ = BlockId(BlockKind.PROJ)
FFN = BlockId(BlockKind.FFN)


@dataclass(frozen=True)
class ModelConfig:
    """Single-layer decoder dimensions and the generation schedule.

    ``heads``/``d_model`` are h and D, ``bytes_per_param`` is b, ``prompt_len``
    is L0, ``new_tokens`` is N and ``tokens_per_interval`` is lambda.
    """

    heads: int = 32
    d_model: int = 2048
    bytes_per_param: int = 2
    prompt_len: int = 64
    new_tokens: int = 1000
    tokens_per_interval: int = 1

    def __post_init__(self) -> None:
        if self.heads < 1 or self.d_model < 1:
            raise ConfigError("heads and d_model must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.bytes_per_param not in (1, 2, 4, 8):
            raise ConfigError(f"bytes_per_param must be 1, 2, 4 or 8, got {self.bytes_per_param}")
        if self.prompt_len < 1 or self.new_tokens < 1 or self.tokens_per_interval < 1:
            raise ConfigError("prompt_len, new_tokens and tokens_per_interval must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def intervals(self) -> int:
        return math.ceil(self.new_tokens / self.tokens_per_interval)

    @property
    def num_blocks(self) -> int:
        return self.heads + 2

    def blocks(self) -> tuple[BlockId, ...]:
        return tuple(BlockId.head(i) for i in range(self.heads)) + (PROJ, FFN)


@dataclass(frozen=True)
class BlockDemand:
    block: BlockId
    mem_bytes: int
    flops: int


@dataclass(frozen=True)
class DeviceState:
    id: int
    mem_avail: float
    compute_max: float
    compute_avail: float
    is_controller: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.compute_avail <= self.compute_max:
            raise ConfigError(
                f"device {self.id}: need 0 < compute_avail <= compute_max, "
                f"got {self.compute_avail} / {self.compute_max}"
            )
        if self.mem_avail < 0:
            raise ConfigError(f"device {self.id}: negative mem_avail")


@dataclass(frozen=True)
class NetworkSnapshot:
    """Resources observed by the controller for one interval.

    ``bandwidth`` is a dense symmetric matrix in bytes/sec; the diagonal is
    ignored and :meth:`rate` reports intra-device transfers as infinitely fast.
    """

    tau: int
    devices: tuple[DeviceState, ...]
    bandwidth: tuple[tuple[float, ...], ...]
    controller: int = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.devices)
        if n == 0:
            raise ConfigError("network has no devices")
        if [d.id for d in self.devices] != list(range(n)):
            raise ConfigError("device ids must be 0..n-1 in order")
        ctrl = [d.id for d in self.devices if d.is_controller]
        if len(ctrl) != 1:
            raise ConfigError(f"exactly one controller required, found {len(ctrl)}")
        object.__setattr__(self, "controller", ctrl[0])
        if len(self.bandwidth) != n or any(len(row) != n for row in self.bandwidth):
            raise ConfigError("bandwidth matrix must be n x n")
        for j in range(n):
            for k in range(j + 1, n):
                r = self.bandwidth[j][k]
                if not r > 0:
                    raise ConfigError(f"link ({j},{k}) must have positive bandwidth")
                if r != self.bandwidth[k][j]:
                    raise ConfigError(f"link ({j},{k}) bandwidth is not symmetric")

    @classmethod
    def from_links(
        cls,
        tau: int,
        devices: Sequence[DeviceState],
        links: Mapping[tuple[int, int], float],
    ) -> "NetworkSnapshot":
        """Build from a link map keyed by (j, k); either orientation may be given."""
        n = len(devices)
        rows = [[math.inf] * n for _ in range(n)]
        for j in range(n):
            for k in range(j + 1, n):
                r = links.get((j, k), links.get((k, j)))
                if r is None:
                    raise ConfigError(f"missing bandwidth for link ({j},{k})")
                rows[j][k] = rows[k][j] = float(r)
        return cls(tau, tuple(devices), tuple(tuple(r) for r in rows))

    @property
    def size(self) -> int:
        return len(self.devices)

    def rate(self, src: int, dst: int) -> float:
        if src == dst:
            return math.inf
        return self.bandwidth[src][dst]

    def transfer_time(self, nbytes: float, src: int, dst: int) -> float:
        return 0.0 if src == dst else nbytes / self.bandwidth[src][dst]


@dataclass(frozen=True)
class Assignment:
    """Total block -> device map for one interval.

    ``devices[k]`` is the device hosting the block at canonical position ``k``.
    """

    tau: int
    devices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.devices) < 3:
            raise ConfigError("an assignment needs at least one head plus proj and ffn")

    @property
    def heads(self) -> int:
        return len(self.devices) - 2

    def device_of(self, block: BlockId) -> int:
        return self.devices[block.position(self.heads)]

    @property
    def placement(self) -> dict[BlockId, int]:
        h = self.heads
        blocks = [BlockId.head(i) for i in range(h)] + [PROJ, FFN]
        return dict(zip(blocks, self.devices))

    def with_tau(self, tau: int) -> "Assignment":
        return Assignment(tau, self.devices)

    @classmethod
    def from_placement(
        cls,
        tau: int,
        placement: Mapping[BlockId, int] | Iterable[tuple[BlockId, int]],
        heads: int,
    ) -> "Assignment":
        """Validate a block map; every block must appear exactly once."""
        pairs = placement.items() if isinstance(placement, Mapping) else placement
        slots: list[int | None] = [None] * (heads + 2)
        for block, dev in pairs:
            pos = block.position(heads)
            if slots[pos] is not None:
                raise ConfigError(f"block {block} placed more than once")
            slots[pos] = int(dev)
        missing = [i for i, s in enumerate(slots) if s is None]
        if missing:
            raise ConfigError(f"assignment is missing {len(missing)} block(s)")
        return cls(tau, tuple(slots))  # type: ignore[arg-type]

    def encode(self) -> str:
        return ";".join(f"{b}:{d}" for b, d in self.placement.items())

    @classmethod
    def decode(cls, tau: int, text: str) -> "Assignment":
        pairs = []
        for item in text.split(";"):
            name, dev = item.split(":")
            pairs.append((BlockId.parse(name), int(dev)))
        heads = sum(1 for b, _ in pairs if b.is_head)
        return cls.from_placement(tau, pairs, heads)


def seq_len(config: ModelConfig, tau: int) -> int:
    """Sequence length at the end of interval ``tau``: L0 + lambda * tau."""
    if tau < 1:
        raise ConfigError(f"interval index must be >= 1, got {tau}")
    return config.prompt_len + config.tokens_per_interval * tau


def block_demand(config: ModelConfig, block: BlockId, tau: int) -> BlockDemand:
    L = seq_len(config, tau)
    D, b, d = config.d_model, config.bytes_per_param, config.head_dim
    if block.kind is BlockKind.HEAD:
        block.position(config.heads)
        cache = config.tokens_per_interval * tau * D * b
        mem = 3 * L * d * b + 3 * D * d * b + cache
        flops = 3 * L * D * d + L * L * d
    elif block.kind is BlockKind.PROJ:
        mem = L * D * b
        flops = L * D * D
    else:
        mem = 4 * L * D * b
        flops = 8 * L * D * D
    return BlockDemand(block, mem, flops)


def demands_at(config: ModelConfig, tau: int) -> tuple[BlockDemand, ...]:
    """All block demands at ``tau`` in canonical order."""
    return tuple(block_demand(config, blk, tau) for blk in config.blocks())


def total_memory_on_device(
    assignment: Assignment, demands: Sequence[BlockDemand], device: int
) -> int:
    if len(demands) != len(assignment.devices):
        raise ConfigError("demands do not cover the assignment's blocks")
    return sum(dm.mem_bytes for dm, dev in zip(demands, assignment.devices) if dev == device)


def split_evenly(total: int, parts: int) -> list[int]:
    """Integer shares of ``total`` over ``parts``; the first shares absorb the remainder."""
    q, r = divmod(total, parts)
    return [q + 1 if k < r else q for k in range(parts)]


def memory_by_device(
    assignment: Assignment,
    demands: Sequence[BlockDemand],
    n_devices: int,
    shards: Sequence[int] | None = None,
) -> tuple[int, ...]:
    """Bytes resident on every device.

    With ``shards`` the proj and ffn blocks are tensor-split evenly across the
    listed devices instead of living on their nominal device.
    """
    if len(demands) != len(assignment.devices):
        raise ConfigError("demands do not cover the assignment's blocks")
    used = [0] * n_devices
    h = assignment.heads
    for pos, (dm, dev) in enumerate(zip(demands, assignment.devices)):
        if shards and pos >= h:
            for part, share in zip(shards, split_evenly(dm.mem_bytes, len(shards))):
                used[part] += share
        else:
            used[dev] += dm.mem_bytes
    return tuple(used)
