import random

import pytest

from resilsim.cluster import (
    FAIL_SLOW,
    FAIL_STOP,
    FailureEvent,
    HEALTHY,
    ParallelismConfig,
    apply_failures,
    build_cluster,
    split_micro_batches,
    validate_cluster,
)
from resilsim.workload import pack_sequences


def make_state(tp=4, dp=2, pp=2, nodes=2, dpn=8, layers=None):
    cfg = ParallelismConfig(tp=tp, dp=dp, pp=pp, layer_partition=layers or [8, 8])
    state = build_cluster(nodes, dpn, cfg, 300e9, 25e9)
    return state, cfg


def test_consistent_layout_is_ok():
    state, cfg = make_state()
    assert validate_cluster(state, cfg) == []


def test_layer_sum_violation_reported():
    state, cfg = make_state(layers=[8, 7])
    msgs = validate_cluster(state, cfg, total_layers=16)
    assert "layer sum 15 != 16" in msgs
    cfg2 = ParallelismConfig(tp=4, dp=2, pp=2, layer_partition=[8])
    assert any("partition" in m for m in validate_cluster(state, cfg2))


def test_tp_group_spanning_nodes_reported():
    state, cfg = make_state()
    state.tp_groups[(0, 0)] = (0, 1, 2, 8)  # device 8 lives on node 1
    msgs = validate_cluster(state, cfg)
    assert any("spans nodes" in m for m in msgs)


def test_duplicate_membership_reported():
    state, cfg = make_state()
    state.tp_groups[(0, 1)] = (0, 1, 2, 3)
    msgs = validate_cluster(state, cfg)
    assert any("in groups" in m for m in msgs)


def test_capacity_violation_reported():
    state, cfg = make_state()
    events = [FailureEvent(kind="fail_stop", start=0.0, device=d) for d in range(4)]
    state = apply_failures(state, events, 0.0)
    # 16 needed, 12 executable
    assert any("executable" in m for m in validate_cluster(state, cfg))


def test_fail_slow_applied_at_query_time():
    state, _ = make_state()
    ev = [FailureEvent(kind="fail_slow_compute", start=100.0, device=3, severity=0.5)]
    out = apply_failures(state, ev, 150.0)
    assert out.devices[3].speed == 0.5
    assert out.devices[3].status == FAIL_SLOW


def test_overlapping_fail_slow_stack_multiplicatively():
    state, _ = make_state()
    ev = [
        FailureEvent(kind="fail_slow_compute", start=0.0, device=3, severity=0.5),
        FailureEvent(kind="fail_slow_compute", start=10.0, device=3, severity=0.8),
    ]
    out = apply_failures(state, ev, 20.0)
    assert out.devices[3].speed == pytest.approx(0.4)


def test_fail_stop_not_yet_started():
    state, _ = make_state()
    ev = [FailureEvent(kind="fail_stop", start=100.0, device=3)]
    out = apply_failures(state, ev, 99.0)
    assert out.devices[3].status == HEALTHY
    out = apply_failures(state, ev, 100.0)
    assert out.devices[3].status == FAIL_STOP
    assert out.devices[3].failed_at == 100.0


def test_unknown_device_is_hard_error():
    state, _ = make_state()
    ev = [FailureEvent(kind="fail_stop", start=0.0, device=999)]
    with pytest.raises(KeyError):
        apply_failures(state, ev, 1.0)


def test_apply_failures_idempotent_and_order_insensitive():
    rng = random.Random(7)
    state, _ = make_state()
    events = []
    for _ in range(12):
        kind = rng.choice(["fail_stop", "fail_slow_compute"])
        dev = rng.randrange(16)
        start = rng.uniform(0, 50)
        if kind == "fail_stop":
            events.append(FailureEvent(kind=kind, start=start, device=dev))
        else:
            events.append(FailureEvent(
                kind=kind, start=start, device=dev,
                end=start + rng.uniform(1, 40), severity=rng.uniform(0.2, 0.9),
            ))
    t = 30.0
    once = apply_failures(state, events, t)
    twice = apply_failures(once, events, t)
    assert [(d.speed, d.status) for d in once.devices] == \
           [(d.speed, d.status) for d in twice.devices]
    shuffled = events[:]
    rng.shuffle(shuffled)
    other = apply_failures(state, shuffled, t)
    for a, b in zip(once.devices, other.devices):
        assert a.status == b.status
        assert a.speed == pytest.approx(b.speed)


def test_fuzzed_invalid_configs_always_reported():
    rng = random.Random(11)
    for _ in range(50):
        state, cfg = make_state()
        mode = rng.randrange(3)
        if mode == 0:
            group = list(state.tp_groups[(0, 0)])
            group[-1] = 8 + rng.randrange(8)  # move last member to the other node
            state.tp_groups[(0, 0)] = tuple(group)
        elif mode == 1:
            state.tp_groups[(1, 1)] = state.tp_groups[(0, 0)]
        else:
            cfg = ParallelismConfig(tp=4, dp=2, pp=2, layer_partition=[8, 8, 8])
        assert validate_cluster(state, cfg) != []


def test_split_micro_batches_even_and_custom():
    mbs = pack_sequences([4096] * 12, 4096)
    parts = split_micro_batches(mbs, 2)
    assert [len(p) for p in parts] == [6, 6]
    parts = split_micro_batches(mbs, 2, counts=[4, 8])
    assert [len(p) for p in parts] == [4, 8]
    assert [mb.id for mb in parts[0]] == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        split_micro_batches(mbs, 2, counts=[5, 8])
