import pytest

from resilsim.cluster import (
    FailureEvent,
    ParallelismConfig,
    apply_failures,
    build_cluster,
)
from resilsim.comm import CommSpec
from resilsim.pipeline import simulate_iteration
from resilsim.policies import (
    GreyhoundPolicy,
    PlanningContext,
    RecyclePolicy,
    ResiHPPolicy,
    greyhound_adapt,
    make_policy,
    proportional_split,
    recycle_adapt,
    resihp_adapt,
)
from resilsim.scheduler import StrandedWorkload, apply_plan
from resilsim.workload import CostModel, pack_sequences


def make_ctx(events=(), tp=4, dp=2, pp=2, mbs=12, known=None, confirmed=None,
             new_fail_stop=None, layers=8):
    cfg = ParallelismConfig(tp=tp, dp=dp, pp=pp,
                            layer_partition=[layers // pp * 1] * pp)
    n_dev = tp * dp * pp
    state = build_cluster(max(1, n_dev // 8), 8, cfg, 300e9, 25e9)
    if events:
        state = apply_failures(state, list(events), max(e.start for e in events))
    model = CostModel(alpha=2e-6, beta=5e-10)
    batches = pack_sequences([4096] * mbs, 4096)
    return PlanningContext(
        state=state, cfg=cfg, model=model, micro_batches=batches,
        comm=CommSpec(), known_speeds=known or {},
        new_fail_stop=new_fail_stop or [], confirmed=confirmed,
    )


class TestRecycle:
    def test_whole_group_excluded_on_single_failure(self):
        ev = [FailureEvent(kind="fail_stop", start=0.0, device=1)]
        ctx = make_ctx(ev)
        plan = recycle_adapt(ctx)
        assert (0, 0) in plan.excluded_groups
        # the three healthy members of the group are discarded along with it
        out, _ = apply_plan(ctx.state, ctx.cfg, plan)
        assert out.tp_groups[(0, 0)] == ()
        for dev in (0, 2, 3):
            assert out.devices[dev].status == "standby"

    def test_dead_stage_chunks_rerouted_to_peer(self):
        ev = [FailureEvent(kind="fail_stop", start=0.0, device=1)]
        ctx = make_ctx(ev)
        plan = recycle_adapt(ctx)
        stage0 = [m for m in plan.migrations if m.stage == 0 and m.source == 0]
        assert len(stage0) == 6  # every mb replica 0 owns
        assert all(m.executor == 1 for m in stage0)
        # DP1 now executes both replicas' stage-0 chunks
        out, cfg2 = apply_plan(ctx.state, ctx.cfg, plan)
        rec = simulate_iteration(out, cfg2, ctx.micro_batches, ctx.model,
                                 plan, comm=ctx.comm)
        assert rec.migrations == 6

    def test_no_failures_empty_plan(self):
        ctx = make_ctx()
        plan = recycle_adapt(ctx)
        assert plan.excluded_groups == []
        assert plan.migrations == []

    def test_all_replicas_failed_aborts(self):
        evs = [
            FailureEvent(kind="fail_stop", start=0.0, device=0),
            FailureEvent(kind="fail_stop", start=0.0, device=8),
        ]
        ctx = make_ctx(evs)
        with pytest.raises(StrandedWorkload):
            recycle_adapt(ctx)


class TestGreyhound:
    def test_half_speed_replica_gets_third_of_batch(self):
        known = {d: 0.5 for d in range(8)}  # replica 0 devices believed slow
        ctx = make_ctx(known=known)
        plan = greyhound_adapt(ctx)
        assert plan.dp_assignment == [4, 8]

    def test_equal_speeds_equal_split(self):
        ctx = make_ctx()
        plan = greyhound_adapt(ctx)
        assert plan.dp_assignment == [6, 6]

    def test_intra_replica_bubble_persists(self):
        # one slow stage inside replica 0: redistribution shrinks its batch
        # but the slow stage still idles its sibling stage
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.5)]
        ctx = make_ctx(ev, known={d: (0.5 if d < 4 else 1.0) for d in range(4)})
        plan = greyhound_adapt(ctx)
        assert plan.dp_assignment[0] < plan.dp_assignment[1]
        rec = simulate_iteration(ctx.state, ctx.cfg, ctx.micro_batches,
                                 ctx.model, plan, comm=ctx.comm)
        fast_stage_devs = ctx.state.tp_groups[(0, 1)]
        for dev in fast_stage_devs:
            assert rec.per_device_idle[dev] > 0.2 * rec.observed_time

    def test_proportional_split_arithmetic(self):
        assert proportional_split(12, [0.5, 1.0]) == [4, 8]
        assert proportional_split(12, [1.0, 1.0]) == [6, 6]
        assert proportional_split(7, [1.0, 1.0]) == [4, 3]


class TestResiHP:
    def confirmed_for(self, ctx, keys, severity):
        from resilsim.detector import ValidationResult
        return ValidationResult(
            confirmed=True,
            degraded_stages={k: severity for k in keys},
            degraded_links={},
            cost_s=3.0,
        )

    def test_fail_stop_shrinks_group_instead_of_excluding(self):
        ev = [FailureEvent(kind="fail_stop", start=0.0, device=1)]
        ctx = make_ctx(ev, new_fail_stop=["node0"])
        plan = resihp_adapt(ctx)
        assert (0, 0) in plan.tp_subgroups
        members, standby = plan.tp_subgroups[(0, 0)]
        assert len(members) == 2  # power-of-two below the 3 survivors
        assert 1 not in members
        assert plan.excluded_groups == []

    def test_fail_slow_sheds_work_from_degraded_replica(self):
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.4)]
        ctx = make_ctx(ev, known={d: 0.4 for d in range(4)} | {d: 1.0 for d in range(4, 16)})
        ctx.confirmed = self.confirmed_for(ctx, [(0, 0)], 0.4)
        plan = resihp_adapt(ctx)
        assert any(m.source == 0 for m in plan.migrations)

    def test_fail_slow_repartitions_when_no_dp_peer_exists(self):
        # dp=1 leaves no migration lever; layers move off the slow stage
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.4)]
        ctx = make_ctx(ev, dp=1, pp=4, layers=16, known={0: 0.4})
        ctx.confirmed = self.confirmed_for(ctx, [(0, 0)], 0.4)
        plan = resihp_adapt(ctx)
        assert plan.layer_partition is not None
        assert plan.layer_partition[0] < min(plan.layer_partition[1:])

    def test_tie_score_keeps_group_whole(self):
        # severity 0.5 in a 4-group: k=2 healthy ties k=4 at score 2.0; the
        # policy keeps the current group rather than paying a rebuild
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.5)]
        known = {0: 0.5, 1: 1.0, 2: 1.0, 3: 1.0}
        ctx = make_ctx(ev, known=known)
        ctx.confirmed = self.confirmed_for(ctx, [(0, 0)], 0.5)
        plan = resihp_adapt(ctx)
        assert (0, 0) not in plan.tp_subgroups

    def test_severe_fail_slow_dropped_from_group(self):
        # at severity 0.2 the 4-group scores 0.8, the healthy pair 2.0
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.2)]
        known = {0: 0.2, 1: 1.0, 2: 1.0, 3: 1.0}
        ctx = make_ctx(ev, known=known)
        ctx.confirmed = self.confirmed_for(ctx, [(0, 0)], 0.2)
        plan = resihp_adapt(ctx)
        members, standby = plan.tp_subgroups[(0, 0)]
        assert len(members) == 2
        assert 0 in standby

    def test_unrecoverable_group_falls_back_to_exclusion(self):
        evs = [FailureEvent(kind="fail_stop", start=0.0, device=d) for d in (0, 1, 2)]
        ctx = make_ctx(evs, new_fail_stop=["node0"])
        plan = resihp_adapt(ctx)
        assert (0, 0) in plan.excluded_groups
        assert any(m.source == 0 and m.stage == 0 for m in plan.migrations)

    def test_plan_improves_makespan_under_fail_slow(self):
        ev = [FailureEvent(kind="fail_slow_compute", start=0.0, device=0, severity=0.4)]
        ctx = make_ctx(ev, known={0: 0.4}, mbs=16)
        ctx.confirmed = self.confirmed_for(ctx, [(0, 0)], 0.4)
        unmitigated = simulate_iteration(
            ctx.state, ctx.cfg, ctx.micro_batches, ctx.model, comm=ctx.comm
        ).observed_time
        plan = resihp_adapt(ctx)
        state2, cfg2 = apply_plan(ctx.state, ctx.cfg, plan)
        mitigated = simulate_iteration(
            state2, cfg2, ctx.micro_batches, ctx.model, plan, comm=ctx.comm
        ).observed_time
        assert mitigated < unmitigated


def test_make_policy_table():
    for name, cls in (
        ("none", "NonePolicy"),
        ("recycle", "RecyclePolicy"),
        ("greyhound", "GreyhoundPolicy"),
        ("resihp", "ResiHPPolicy"),
    ):
        assert type(make_policy(name)).__name__ == cls
    with pytest.raises(ValueError):
        make_policy("oobleck")


def test_policy_detector_wiring():
    assert make_policy("none").detector_enabled is False
    assert make_policy("recycle").detector_enabled is False
    grey = make_policy("greyhound")
    assert grey.detector_enabled is True and grey.filter_enabled is False
    resi = make_policy("resihp")
    assert resi.detector_enabled is True and resi.filter_enabled is True
