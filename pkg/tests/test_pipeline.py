import itertools
import random

import pytest

from resilsim.cluster import (
    FailureEvent,
    MicroBatch,
    ParallelismConfig,
    apply_failures,
    build_cluster,
)
from resilsim.comm import CommSpec
from resilsim.pipeline import (
    ChunkDag,
    CycleError,
    Edge,
    ChunkVertex,
    SimulationError,
    build_dag,
    critical_path,
    schedule_1f1b,
    schedule_zbh,
    simulate_iteration,
)
from resilsim.workload import CHUNK_BW, CHUNK_F, CostModel, pack_sequences


def brute_force_makespan(dag: ChunkDag) -> float:
    """Independent oracle: enumerate every path, sum vertex costs and edge
    weights along it, and take the maximum.  Exponential, fine for <= 30
    vertices."""
    succ = {}
    for e in dag.edges:
        succ.setdefault(e.src, []).append((e.dst, e.weight))
    best = 0.0

    def walk(v, acc):
        nonlocal best
        acc += dag.vertices[v].cost
        best = max(best, acc)
        for nxt, w in succ.get(v, []):
            walk(nxt, acc + w)

    targets = {e.dst for e in dag.edges}
    sources = [i for i in range(len(dag.vertices)) if i not in targets]
    for s in sources:
        walk(s, 0.0)
    return best


def unit_model():
    # alpha only, N=1 token: every one-layer chunk costs its ratio seconds
    return CostModel(alpha=1.0, beta=0.0)


def unit_batches(count):
    return [MicroBatch(id=i, doc_lengths=(1,), token_budget=1) for i in range(count)]


def cfg_for(pp, dp=1, schedule="1f1b", layers_per_stage=1, tp=1):
    return ParallelismConfig(
        tp=tp, dp=dp, pp=pp, schedule=schedule,
        layer_partition=[layers_per_stage] * pp,
    )


class TestSchedules:
    def test_1f1b_last_stage_alternates(self):
        seq = schedule_1f1b(2, 1, [0, 1])
        assert seq == [("F", 0), ("BW", 0), ("F", 1), ("BW", 1)]

    def test_1f1b_first_stage_warmup(self):
        seq = schedule_1f1b(2, 0, [0, 1])
        assert seq == [("F", 0), ("F", 1), ("BW", 0), ("BW", 1)]

    def test_zbh_delays_weight_chunks(self):
        seq = schedule_zbh(2, 0, [0, 1, 2, 3])
        kinds = [k for k, _ in seq]
        # one warmup F, steady F/B pairs, drain B+W alternation, W tail
        assert seq[0] == ("F", 0)
        assert kinds.count("F") == 4 and kinds.count("B") == 4 and kinds.count("W") == 4
        # every W comes after its own B
        pos = {(k, j): i for i, (k, j) in enumerate(seq)}
        for j in range(4):
            assert pos[("W", j)] > pos[("B", j)]

    def test_within_stage_order_f_before_b_before_w(self):
        for pp in (1, 2, 4, 8):
            for stage in range(pp):
                for m in (1, 2, 5, 9):
                    ids = list(range(m))
                    for seq in (schedule_1f1b(pp, stage, ids), schedule_zbh(pp, stage, ids)):
                        pos = {}
                        for i, (k, j) in enumerate(seq):
                            pos[(k, j)] = i
                        for j in ids:
                            if ("B", j) in pos:
                                assert pos[("F", j)] < pos[("B", j)] < pos[("W", j)]
                            else:
                                assert pos[("F", j)] < pos[("BW", j)]


class TestBuildDag:
    def test_degenerate_single_stage_single_mb(self):
        dag = build_dag(cfg_for(1), unit_batches(1), unit_model(), 1.0)
        assert len(dag.vertices) == 2  # F and merged backward
        assert len(dag.edges) == 1
        assert dag.edges[0].kind == "resource"

    def test_two_stage_two_mb_vertex_count(self):
        dag = build_dag(cfg_for(2), unit_batches(2), unit_model(), 1.0)
        assert len(dag.vertices) == 8

    def test_zbh_two_stage_one_mb_vertex_count(self):
        dag = build_dag(cfg_for(2, schedule="zbh"), unit_batches(1), unit_model(), 1.0)
        assert len(dag.vertices) == 6

    def test_zero_micro_batches_is_error(self):
        with pytest.raises(ValueError):
            build_dag(cfg_for(1), [], unit_model(), 1.0)


class TestCriticalPath:
    def test_single_vertex(self):
        dag = ChunkDag(vertices=[ChunkVertex("F", 0, 0, 0, 3.0)], edges=[])
        _, makespan = critical_path(dag)
        assert makespan == 3.0

    def test_chain_with_edge_weight(self):
        dag = ChunkDag(
            vertices=[ChunkVertex("F", 0, 0, 0, 1.0), ChunkVertex("F", 0, 1, 0, 1.0)],
            edges=[Edge(0, 1, 0.1, "data")],
        )
        _, makespan = critical_path(dag)
        assert makespan == pytest.approx(2.1)

    def test_two_stage_two_mb_1f1b_unit_costs(self):
        # Hand-unrolled 1F1B with all chunk costs 1 and p2p 0; cross-checked
        # against the exhaustive longest-path oracle on the 8-vertex DAG.
        # Stage 0 runs F0 F1 B0 B1, stage 1 runs F0 B0 F1 B1; the final B on
        # stage 0 waits for stage 1's last backward, giving 6 time units.
        model = CostModel(alpha=1.0, beta=0.0,
                          chunk_ratios={"F": 1.0, "B": 0.5, "W": 0.5})
        dag = build_dag(cfg_for(2), unit_batches(2), model, 1.0)
        assert all(v.cost == 1.0 for v in dag.vertices)
        _, makespan = critical_path(dag)
        assert makespan == pytest.approx(brute_force_makespan(dag))
        assert makespan == pytest.approx(6.0)

    def test_cycle_detection_names_a_cycle(self):
        dag = ChunkDag(
            vertices=[ChunkVertex("F", 0, 0, 0, 1.0), ChunkVertex("F", 1, 0, 0, 1.0)],
            edges=[Edge(0, 1, 0.0, "data"), Edge(1, 0, 0.0, "data")],
        )
        with pytest.raises(CycleError, match="F\\(mb0"):
            critical_path(dag)

    def test_brute_force_equivalence_fuzz(self):
        rng = random.Random(17)
        for _ in range(60):
            pp = rng.choice([1, 2, 3])
            m = rng.choice([1, 2, 3])
            schedule = rng.choice(["1f1b", "zbh"])
            if pp * m * (3 if schedule == "zbh" else 2) > 18:
                continue
            cfg = cfg_for(pp, schedule=schedule)
            model = CostModel(alpha=rng.uniform(0.5, 2.0), beta=0.0)
            speeds = {(0, s): rng.uniform(0.3, 1.0) for s in range(pp)}
            dag = build_dag(cfg, unit_batches(m), model, speeds, rng.uniform(0.0, 0.5))
            _, makespan = critical_path(dag)
            assert makespan == pytest.approx(brute_force_makespan(dag), rel=1e-12)


def fig2_cluster(schedule="1f1b", tp=4, dp=2, pp=4, layers=16, mbs=8):
    cfg = ParallelismConfig(tp=tp, dp=dp, pp=pp, schedule=schedule,
                            layer_partition=[layers // pp] * pp)
    state = build_cluster(tp * dp * pp // 8, 8, cfg, 300e9, 25e9)
    model = CostModel(alpha=2e-6, beta=5e-10)
    batches = pack_sequences([4096] * (mbs * dp), 4096)
    return state, cfg, model, batches


class TestSimulate:
    def test_healthy_observed_equals_prediction_exactly(self):
        state, cfg, model, batches = fig2_cluster()
        rec = simulate_iteration(state, cfg, batches, model, comm=CommSpec())
        assert rec.observed_time == rec.predicted_healthy_time

    def test_slow_stage_strictly_increases_observed(self):
        state, cfg, model, batches = fig2_cluster()
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.5)]
        slow = apply_failures(state, ev, 0.0)
        rec = simulate_iteration(slow, cfg, batches, model, comm=CommSpec())
        assert rec.observed_time > rec.predicted_healthy_time

    def test_busy_plus_idle_equals_observed(self):
        state, cfg, model, batches = fig2_cluster()
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=5, severity=0.6)]
        slow = apply_failures(state, ev, 0.0)
        rec = simulate_iteration(slow, cfg, batches, model, comm=CommSpec())
        for dev, busy in rec.per_device_busy.items():
            assert busy + rec.per_device_idle[dev] == pytest.approx(rec.observed_time)

    def test_additional_idle_ordering_tp_pp_dp(self):
        # one device at half speed in a (4,2,4) layout: extra idle time grows
        # strictly from the TP group through the pipeline to the DP boundary
        state, cfg, model, batches = fig2_cluster()
        healthy = simulate_iteration(state, cfg, batches, model, comm=CommSpec())
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.5)]
        slow_state = apply_failures(state, ev, 0.0)
        rec = simulate_iteration(slow_state, cfg, batches, model, comm=CommSpec())
        groups = state.tp_groups
        home = next(k for k, g in groups.items() if 0 in g)
        levels = {"tp": 0.0, "pp": 0.0, "dp": 0.0}
        for key, group in groups.items():
            for dev in group:
                if dev == 0:
                    continue
                delta = rec.per_device_idle[dev] - healthy.per_device_idle[dev]
                if key == home:
                    levels["tp"] += delta
                elif key[0] == home[0]:
                    levels["pp"] += delta
                else:
                    levels["dp"] += delta
        assert levels["tp"] < levels["pp"] < levels["dp"]

    def test_makespan_monotone_in_device_speed_fuzz(self):
        rng = random.Random(23)
        for _ in range(20):
            state, cfg, model, batches = fig2_cluster(
                schedule=rng.choice(["1f1b", "zbh"]))
            dev = rng.randrange(32)
            sev_hi = rng.uniform(0.5, 0.95)
            sev_lo = sev_hi * rng.uniform(0.4, 0.9)
            rec_hi = simulate_iteration(
                apply_failures(state, [FailureEvent(
                    kind="fail_slow_compute", start=0.0, device=dev, severity=sev_hi)], 0.0),
                cfg, batches, model, comm=CommSpec())
            rec_lo = simulate_iteration(
                apply_failures(state, [FailureEvent(
                    kind="fail_slow_compute", start=0.0, device=dev, severity=sev_lo)], 0.0),
                cfg, batches, model, comm=CommSpec())
            assert rec_lo.observed_time >= rec_hi.observed_time - 1e-12

    def test_fail_stop_without_plan_is_completeness_error(self):
        state, cfg, model, batches = fig2_cluster()
        ev = [FailureEvent(kind="fail_stop", start=0.0, device=0)]
        dead = apply_failures(state, ev, 0.0)
        with pytest.raises(SimulationError, match="completeness"):
            simulate_iteration(dead, cfg, batches, model, comm=CommSpec())

    def test_determinism_identical_records(self):
        state, cfg, model, batches = fig2_cluster()
        a = simulate_iteration(state, cfg, batches, model, comm=CommSpec())
        b = simulate_iteration(state, cfg, batches, model, comm=CommSpec())
        assert a.observed_time == b.observed_time
        assert a.per_device_busy == b.per_device_busy
