import itertools
import math
import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgepart.delay import (
    DelayBreakdown,
    InferenceCost,
    TransferSpec,
    interval_delay,
    migration_delay,
    objective,
    total_inference_delay,
    total_migration_delay,
    transfer_payloads,
)
from edgepart.model import (
    Assignment,
    BlockDemand,
    BlockId,
    ConfigError,
    DeviceState,
    ModelConfig,
    NetworkSnapshot,
    demands_at,
    seq_len,
)
from helpers import random_instance, snapshot
from oracles import event_delay

LARGE = ModelConfig(heads=32, d_model=2048, bytes_per_param=2, prompt_len=64)


def test_migration_delay_examples():
    snap = snapshot([1, 1], [1, 1], 1e9)
    dm = BlockDemand(BlockId.head(0), 1_000_000, 1)
    assert migration_delay(dm, 0, 1, snap) == pytest.approx(1e-3)
    assert migration_delay(dm, 1, 1, snap) == 0.0
    head = demands_at(LARGE, 1)[0]
    assert head.mem_bytes == 815_488
    gig = snapshot([1, 1], [1, 1], 125_000_000)
    assert migration_delay(head, 0, 1, gig) == pytest.approx(6.52390e-3, rel=1e-5)


def test_migration_delay_unknown_device():
    snap = snapshot([1, 1], [1, 1], 1.0)
    with pytest.raises(ConfigError):
        migration_delay(BlockDemand(BlockId.head(0), 1, 1), 0, 5, snap)


def test_transfer_payloads():
    assert transfer_payloads(LARGE, 1) == (8_320, 266_240, 266_240)
    unit = ModelConfig(heads=1, d_model=1, bytes_per_param=1, prompt_len=1, tokens_per_interval=1)
    # L = 2 at the first interval; every payload is L bytes
    assert transfer_payloads(unit, 1) == (2, 2, 2)
    cfg = ModelConfig(heads=2, d_model=8, prompt_len=2, tokens_per_interval=1)
    a, b = transfer_payloads(cfg, 2), transfer_payloads(cfg, 6)
    assert seq_len(cfg, 6) == 2 * seq_len(cfg, 2)
    assert all(y == 2 * x for x, y in zip(a, b))


def test_transfer_spec():
    snap = snapshot([1, 1], [1, 1], 4.0)
    assert TransferSpec(0, 1, 8).duration(snap) == 2.0
    assert TransferSpec(1, 1, 8).duration(snap) == 0.0
    with pytest.raises(ValueError):
        TransferSpec(0, 1, -1).duration(snap)


def test_all_on_controller_is_sequential_compute():
    cfg = ModelConfig(heads=4, d_model=16, prompt_len=3)
    dms = demands_at(cfg, 2)
    snap = snapshot([1e9, 1e9], [1000.0, 5.0], 1.0)
    bd = total_inference_delay(Assignment(2, (0,) * 6), dms, snap, cfg)
    assert bd.total_inference == pytest.approx(sum(dm.flops for dm in dms[:4]) / 1000.0)
    assert bd.proj_to_ffn_delay == 0
    assert all(x == 0 for x in bd.input_delay + bd.head_to_proj_delay)


def test_single_head_hand_composition():
    cfg = ModelConfig(heads=1, d_model=2048, bytes_per_param=2, prompt_len=64)
    snap = snapshot([1e12, 1e12], [1e10, 1e10], 1e9)
    bd = total_inference_delay(Assignment(1, (1, 0, 0)), demands_at(cfg, 1), snap, cfg)
    compute = (3 * 65 * 2048 * 2048 + 65**2 * 2048) / 1e10
    expected = 266_240 / 1e9 + compute + 266_240 / 1e9
    assert compute == pytest.approx(8.2654208e-2)
    assert bd.total_inference == pytest.approx(expected, rel=1e-12)
    assert bd.input_delay == (pytest.approx(2.6624e-4),)
    assert bd.head_to_proj_delay == (pytest.approx(2.6624e-4),)


def test_split_beats_stacking_when_compute_dominates():
    cfg = ModelConfig(heads=2, d_model=64, prompt_len=16)
    dms = demands_at(cfg, 1)
    snap = snapshot([1e9] * 3, [1e6, 1e6, 1e6], 1e12)
    stacked = total_inference_delay(Assignment(1, (1, 1, 0, 0)), dms, snap, cfg)
    split = total_inference_delay(Assignment(1, (1, 2, 0, 0)), dms, snap, cfg)
    assert split.total_inference < stacked.total_inference


def test_link_serialization_queues_second_head():
    cfg = ModelConfig(heads=2, d_model=4, bytes_per_param=1, prompt_len=1)
    dms = demands_at(cfg, 1)
    # tiny compute time, slow link: both heads finish almost together and queue on the link
    snap = snapshot([1e9] * 2, [1e12, 1e12], 1.0)
    bd = total_inference_delay(Assignment(1, (1, 1, 0, 0)), dms, snap, cfg)
    w_hp = transfer_payloads(cfg, 1)[0]
    assert bd.head_to_proj_delay[1] > bd.head_to_proj_delay[0] >= w_hp
    assert bd.recompose() == pytest.approx(bd.total_inference)


def test_input_sent_once_per_device():
    cfg = ModelConfig(heads=2, d_model=4, bytes_per_param=1, prompt_len=1)
    snap = snapshot([1e9] * 2, [1e12, 1e12], 1.0)
    bd = total_inference_delay(Assignment(1, (1, 1, 1, 1)), demands_at(cfg, 1), snap, cfg)
    w_in = transfer_payloads(cfg, 1)[2]
    assert bd.input_delay == (w_in, w_in)
    # the second head waits only for the first head's compute, not a second input copy
    assert bd.total_inference < 2 * w_in


def test_tail_compute_flag():
    cfg = ModelConfig(heads=1, d_model=4, prompt_len=2)
    dms = demands_at(cfg, 1)
    snap = snapshot([1e9] * 2, [100.0, 50.0], 10.0)
    a = Assignment(1, (1, 0, 1))
    base = total_inference_delay(a, dms, snap, cfg)
    tail = total_inference_delay(a, dms, snap, cfg, include_tail_compute=True)
    assert tail.total_inference - base.total_inference == pytest.approx(
        dms[1].flops / 100.0 + dms[2].flops / 50.0
    )
    assert tail.tail_compute_delay > 0 and base.tail_compute_delay == 0


def test_shards_add_one_sync_per_extra_device():
    cfg = ModelConfig(heads=3, d_model=6, prompt_len=2)
    dms = demands_at(cfg, 1)
    bw = [[0, 2.0, 4.0], [2.0, 0, 8.0], [4.0, 8.0, 0]]
    snap = snapshot([1e9] * 3, [1e6] * 3, bw)
    a = Assignment(1, (0, 1, 2, 0, 0))
    bd = total_inference_delay(a, dms, snap, cfg, shards=(0, 1, 2))
    w = transfer_payloads(cfg, 1)[2]
    assert bd.sync_transfers == 2
    assert bd.sync_delay == pytest.approx(max(w / 2.0, w / 4.0))
    assert total_inference_delay(a, dms, snap, cfg, shards=(0,)).sync_transfers == 0


def test_total_migration_delay_examples():
    cfg = ModelConfig(heads=2, d_model=4)
    snap = snapshot([1] * 3, [1] * 3, [[0, 2.0, 3.0], [2.0, 0, 5.0], [3.0, 5.0, 0]])
    prev_dm = demands_at(cfg, 1)
    a = Assignment(1, (0, 0, 0, 0))
    assert total_migration_delay(a, a, prev_dm, snap) == 0
    b = Assignment(2, (1, 2, 0, 0))
    assert total_migration_delay(a, b, prev_dm, snap) == pytest.approx(
        prev_dm[0].mem_bytes / 2.0 + prev_dm[1].mem_bytes / 3.0
    )
    snap2 = snapshot([1, 1], [1, 1], 4096.0)
    one = [BlockDemand(BlockId.head(0), 4096, 1)] + list(demands_at(ModelConfig(heads=1, d_model=2), 1))[1:]
    assert total_migration_delay(
        Assignment(1, (0, 0, 0)), Assignment(2, (1, 0, 0)), one, snap2
    ) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        total_migration_delay(a, Assignment(1, (0, 0, 0)), prev_dm, snap)


def test_three_moves_over_distinct_links_sum():
    cfg = ModelConfig(heads=1, d_model=4)
    bw = [[0, 2.0, 3.0, 7.0], [2.0, 0, 5.0, 11.0], [3.0, 5.0, 0, 13.0], [7.0, 11.0, 13.0, 0]]
    snap = snapshot([1] * 4, [1] * 4, bw)
    dms = demands_at(cfg, 1)
    prev, nxt = Assignment(1, (0, 1, 2)), Assignment(2, (3, 2, 1))
    expected = sum(migration_delay(dms[p], prev.devices[p], nxt.devices[p], snap) for p in range(3))
    assert total_migration_delay(prev, nxt, dms, snap) == pytest.approx(expected)


def test_migration_uses_previous_footprint():
    cfg = ModelConfig(heads=1, d_model=4, prompt_len=1)
    snap = snapshot([1e9] * 2, [1e9] * 2, 1.0, tau=3)
    prev_dm, cur_dm = demands_at(cfg, 2), demands_at(cfg, 3)
    assert prev_dm[0].mem_bytes != cur_dm[0].mem_bytes
    d = total_migration_delay(Assignment(2, (0, 0, 0)), Assignment(3, (1, 0, 0)), prev_dm, snap)
    assert d == prev_dm[0].mem_bytes


def test_objective_composition():
    cfg = ModelConfig(heads=2, d_model=4)
    snap1 = snapshot([1e9] * 2, [1e3] * 2, 50.0, tau=1)
    snap2 = snapshot([1e9] * 2, [1e3] * 2, 50.0, tau=2)
    d1, d2 = demands_at(cfg, 1), demands_at(cfg, 2)
    a = Assignment(1, (0, 1, 0, 0))
    first = objective(None, a, d1, None, snap1, cfg)
    assert first == total_inference_delay(a, d1, snap1, cfg).total_inference
    same = objective(a, a.with_tau(2), d2, d1, snap2, cfg)
    assert same == total_inference_delay(a.with_tau(2), d2, snap2, cfg).total_inference
    moved = Assignment(2, (1, 1, 0, 0))
    full = interval_delay(a, moved, d2, d1, snap2, cfg)
    assert full.objective == pytest.approx(
        total_inference_delay(moved, d2, snap2, cfg).total_inference + d1[0].mem_bytes / 50.0
    )
    assert full.objective == full.total_inference + full.total_migration
    with pytest.raises(ConfigError):
        interval_delay(a, moved, d2, None, snap2, cfg)


def test_assignment_must_match_model():
    cfg = ModelConfig(heads=2, d_model=4)
    snap = snapshot([1] * 2, [1] * 2, 1.0)
    with pytest.raises(ConfigError):
        total_inference_delay(Assignment(1, (0, 0, 0)), demands_at(cfg, 1), snap, cfg)


def _all_breakdowns(seed):
    rng = random.Random(seed)
    config, tau, snap = random_instance(rng, max_heads=4, max_devices=3)
    dms = demands_at(config, tau)
    for placement in itertools.product(range(snap.size), repeat=config.num_blocks):
        yield config, tau, snap, dms, placement


def test_matches_event_oracle_on_random_instances():
    checked = 0
    for seed in range(20):
        for config, tau, snap, dms, placement in _all_breakdowns(seed):
            got = total_inference_delay(Assignment(tau, placement), dms, snap, config).total_inference
            want = event_delay(
                placement, snap, config.heads, config.d_model, config.bytes_per_param, seq_len(config, tau)
            )
            assert math.isclose(got, want, rel_tol=1e-9, abs_tol=0.0)
            checked += 1
    assert checked > 100


def test_fast_path_equals_breakdown():
    for config, tau, snap, dms, placement in _all_breakdowns(3):
        cost = InferenceCost(dms, snap, config, include_tail_compute=True)
        assert cost.inference_time(placement) == pytest.approx(cost.breakdown(placement).total_inference)


def _scaled(snap: NetworkSnapshot, bw=1.0, comp=1.0) -> NetworkSnapshot:
    devices = tuple(
        replace(d, compute_avail=d.compute_avail * comp, compute_max=d.compute_max * comp)
        for d in snap.devices
    )
    rows = tuple(tuple(r * bw for r in row) for row in snap.bandwidth)
    return NetworkSnapshot(snap.tau, devices, rows)


@given(
    st.integers(0, 10_000),
    st.floats(1.0, 50.0),
    st.sampled_from(["bw", "comp"]),
)
def test_more_resources_never_slower(seed, factor, which):
    rng = random.Random(seed)
    config, tau, snap = random_instance(rng, max_heads=4, max_devices=3)
    dms = demands_at(config, tau)
    placement = tuple(rng.randrange(snap.size) for _ in range(config.num_blocks))
    a = Assignment(tau, placement)
    faster = _scaled(snap, bw=factor) if which == "bw" else _scaled(snap, comp=factor)
    base = total_inference_delay(a, dms, snap, config).total_inference
    scaled = total_inference_delay(a, dms, faster, config).total_inference
    assert scaled <= base * (1 + 1e-12)
    if which == "bw" and tau > 1:
        prev = Assignment(tau - 1, tuple(rng.randrange(snap.size) for _ in placement))
        prev_dms = demands_at(config, tau - 1)
        assert total_migration_delay(prev, a, prev_dms, faster) <= total_migration_delay(
            prev, a, prev_dms, snap
        ) * (1 + 1e-12)


@given(st.integers(0, 10_000))
def test_breakdown_invariants(seed):
    rng = random.Random(seed)
    config, tau, snap = random_instance(rng, max_heads=4, max_devices=3)
    dms = demands_at(config, tau)
    a = Assignment(tau, tuple(rng.randrange(snap.size) for _ in range(config.num_blocks)))
    bd = total_inference_delay(a, dms, snap, config)
    assert isinstance(bd, DelayBreakdown)
    fields = bd.input_delay + bd.compute_delay + bd.head_to_proj_delay
    assert all(x >= 0 for x in fields)
    assert bd.recompose() == pytest.approx(bd.total_inference, rel=1e-12)
    assert bd.objective == bd.total_inference + bd.total_migration
    same = Assignment(tau, (a.devices[0],) * config.num_blocks)
    co = total_inference_delay(same, dms, snap, config)
    assert co.proj_to_ffn_delay == 0 and all(t == 0 for t in co.head_to_proj_delay)


def test_controller_device_state_untouched():
    # the breakdown must not depend on compute_max, only on available compute
    cfg = ModelConfig(heads=1, d_model=2)
    dms = demands_at(cfg, 1)
    a = Assignment(1, (1, 0, 0))
    s1 = snapshot([1e3] * 2, [10.0, 10.0], 1.0)
    s2 = NetworkSnapshot(
        1, (s1.devices[0], DeviceState(1, 1e3, 99.0, 10.0)), s1.bandwidth
    )
    assert total_inference_delay(a, dms, s1, cfg) == total_inference_delay(a, dms, s2, cfg)
