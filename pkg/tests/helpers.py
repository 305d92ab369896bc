"""Instance builders shared by the test modules."""

from __future__ import annotations

import random

from edgepart.model import DeviceState, ModelConfig, NetworkSnapshot, demands_at


def snapshot(mems, computes, bw, tau=1, controller=0, compute_max=None):
    """Snapshot from per-device lists; ``bw`` is a scalar or an n x n matrix."""
    n = len(mems)
    compute_max = compute_max or computes
    devices = tuple(
        DeviceState(j, float(mems[j]), float(compute_max[j]), float(computes[j]), j == controller)
        for j in range(n)
    )
    links = {}
    for j in range(n):
        for k in range(j + 1, n):
            links[(j, k)] = float(bw if not isinstance(bw, (list, tuple)) else bw[j][k])
    return NetworkSnapshot.from_links(tau, devices, links)


def random_model(rng: random.Random, max_heads=4) -> ModelConfig:
    h = rng.randint(1, max_heads)
    return ModelConfig(
        heads=h,
        d_model=h * rng.choice((2, 4, 8, 16)),
        bytes_per_param=rng.choice((1, 2, 4)),
        prompt_len=rng.randint(1, 8),
        new_tokens=rng.randint(1, 6),
        tokens_per_interval=rng.randint(1, 2),
    )


def random_snapshot(rng: random.Random, config: ModelConfig, tau: int, n: int, tightness=1.0):
    """Devices sized against the instance's own demands so constraints sometimes bind."""
    demands = demands_at(config, tau)
    total_mem = sum(dm.mem_bytes for dm in demands)
    max_flops = max(dm.flops for dm in demands)
    mems = [total_mem * rng.uniform(0.25, 1.3) / tightness for _ in range(n)]
    computes = [max_flops * rng.uniform(1.5, 60.0) for _ in range(n)]
    mean_payload = total_mem / len(demands)
    bw = [[0.0] * n for _ in range(n)]
    for j in range(n):
        for k in range(j + 1, n):
            bw[j][k] = bw[k][j] = mean_payload * rng.uniform(2.0, 80.0)
    return snapshot(mems, computes, bw, tau=tau)


def random_instance(rng: random.Random, max_heads=4, max_devices=3, tau=None):
    config = random_model(rng, max_heads)
    tau = tau if tau is not None else rng.randint(1, 4)
    n = rng.randint(1, max_devices)
    return config, tau, random_snapshot(rng, config, tau, n)
