"""Progressive adaptation: TP subgroup selection, PP layer repartition, and
progress-aware DP workload migration, composed into an AdaptationPlan.

Adaptation order is strictly TP -> PP -> DP: subgroup selection fixes each
affected group's degree, repartition rebalances layers against the resulting
stage speeds, and the migration planner consumes the post-TP/PP speeds.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .cluster import (
    ClusterState,
    FAIL_STOP,
    HEALTHY,
    FAIL_SLOW,
    MicroBatch,
    ParallelismConfig,
    STANDBY,
    split_micro_batches,
)
from .comm import LinkModel
from .pipeline import SimulationError, simulate_iteration
from .workload import CHUNK_B, CHUNK_BW, CHUNK_F, CHUNK_W, CostModel, predict_chunk_time


class GroupUnrecoverable(RuntimeError):
    """Raised when a TP group cannot reach the minimum feasible degree."""


class StrandedWorkload(SimulationError):
    """A fail-stop stage has pending work and no feasible destination."""


@dataclass
class Migration:
    mb: int
    stage: int
    source: int
    executor: int


@dataclass
class AdaptationPlan:
    # (replica, stage) -> (chosen member ids, standby ids)
    tp_subgroups: dict[tuple[int, int], tuple[tuple[int, ...], tuple[int, ...]]] = field(
        default_factory=dict
    )
    excluded_groups: list[tuple[int, int]] = field(default_factory=list)
    layer_partition: list[int] | None = None
    dp_assignment: list[int] | None = None
    migrations: list[Migration] = field(default_factory=list)
    # planner-realized chunk order per (replica, stage); optional hint that
    # the simulator replays as the resource order when migrations are present
    stage_orders: dict[tuple[int, int], list[tuple[str, int]]] | None = None
    reconfig_cost_s: float = 0.0
    predicted_makespan_s: float | None = None
    reason: str = ""

    def is_empty(self) -> bool:
        return not (
            self.tp_subgroups
            or self.excluded_groups
            or self.layer_partition is not None
            or self.dp_assignment is not None
            or self.migrations
        )


@dataclass
class ProgressTable:
    """Forward-workload progress per (replica, stage) plus the imbalance
    threshold delta.

    P[d][s] counts the replica's own stage-s forwards that are no longer
    pending locally: completions bump the owner, and migrating a workload
    away credits the owner immediately (the migrated chunk's later completion
    does not bump anyone).  This keeps the gap test hysteretic -- one
    migration closes a gap of one -- and absorbing remote work never inflates
    the destination's progress, so healthy replicas cannot be mistaken for
    laggards."""

    counts: list[list[int]]  # [replica][stage]
    delta: int = 0

    @classmethod
    def zeros(cls, dp: int, pp: int, delta: int = 0) -> "ProgressTable":
        return cls(counts=[[0] * pp for _ in range(dp)], delta=delta)

    def bump(self, replica: int, stage: int) -> None:
        self.counts[replica][stage] += 1

    def gap(self, stage: int) -> int:
        col = [row[stage] for row in self.counts]
        return max(col) - min(col)


def candidate_tp_degrees(group_size: int, fail_stop_count: int, k_min: int) -> set[int]:
    """Power-of-two degrees between k_min and the surviving group size."""
    if k_min < 1 or (k_min & (k_min - 1)) != 0:
        raise ValueError("k_min must be a power of two >= 1")
    surviving = group_size - fail_stop_count
    k = k_min
    out: set[int] = set()
    while k <= surviving:
        out.add(k)
        k *= 2
    return out


def select_tp_subgroup(
    device_speeds: dict[int, float], degrees: set[int]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Pick the subgroup maximizing k * min speed over the top-k devices.

    A TP group runs at its slowest member's pace, so for each feasible degree
    the best k-subset is simply the k fastest devices; ties between degrees
    go to the smaller group.  Devices left out become node-local standbys.
    """
    if not degrees:
        raise GroupUnrecoverable("no feasible TP degree")
    ranked = sorted(device_speeds.items(), key=lambda kv: (-kv[1], kv[0]))
    best_k, best_score = None, -1.0
    for k in sorted(degrees):
        if k > len(ranked):
            continue
        score = k * ranked[k - 1][1]
        if score > best_score:
            best_k, best_score = k, score
    if best_k is None:
        raise GroupUnrecoverable("group smaller than every candidate degree")
    chosen = tuple(sorted(dev for dev, _ in ranked[:best_k]))
    standby = tuple(sorted(dev for dev, _ in ranked[best_k:]))
    return chosen, standby


def subgroup_score(device_speeds: dict[int, float], members) -> float:
    if not members:
        return 0.0
    return len(members) * min(device_speeds[d] for d in members)


def repartition_layers(
    stage_speeds: list[float], total_layers: int, min_layers: int = 1
) -> list[int]:
    """Assign layers proportionally to stage speed, then polish greedily.

    Largest-remainder integerization of the targets L * s_i / sum(s), with
    remainder ties resolved toward earlier stages, followed by single-layer
    moves accepted only while they reduce max_i(layers_i / s_i) by at least
    1/(2L) relatively: a move with a vanishing bottleneck gain cannot pay
    for the pipeline fill/drain it perturbs, so marginal moves are skipped.
    """
    n = len(stage_speeds)
    if any(s <= 0 for s in stage_speeds):
        raise ValueError("all stage speeds must be positive")
    if total_layers < n * min_layers:
        raise ValueError(
            f"cannot give {n} stages {min_layers} layers each out of {total_layers}"
        )
    total_speed = sum(stage_speeds)
    shares = [total_layers * s / total_speed for s in stage_speeds]
    layers = [math.floor(q) for q in shares]
    remainder = total_layers - sum(layers)
    order = sorted(range(n), key=lambda i: (-(shares[i] - layers[i]), i))
    for i in order[:remainder]:
        layers[i] += 1
    # raise starved stages up to the floor, taking from the largest stage
    while any(l < min_layers for l in layers):
        recipient = min(i for i in range(n) if layers[i] < min_layers)
        donor = max(
            (i for i in range(n) if layers[i] > min_layers),
            key=lambda i: (layers[i], -i),
        )
        layers[donor] -= 1
        layers[recipient] += 1

    def stage_max(vec: list[int]) -> float:
        return max(v / s for v, s in zip(vec, stage_speeds))

    min_gain = 1.0 / (2.0 * total_layers)
    while True:
        current = stage_max(layers)
        best = None
        for src in range(n):
            if layers[src] <= min_layers:
                continue
            for dst in range(n):
                if dst == src:
                    continue
                layers[src] -= 1
                layers[dst] += 1
                candidate = stage_max(layers)
                layers[src] += 1
                layers[dst] -= 1
                if candidate < current * (1.0 - min_gain) and (
                    best is None or candidate < best[0]
                ):
                    best = (candidate, src, dst)
        if best is None:
            return layers
        _, src, dst = best
        layers[src] -= 1
        layers[dst] += 1


def migration_decision(
    progress: ProgressTable,
    stage: int,
    dead: set[tuple[int, int]],
    next_pending,
    memory_feasible,
    outstanding=None,
) -> tuple[int, int, int] | None:
    """One stage's migration decision for the current scheduling slot.

    Returns (micro-batch, source, executor) when the slowest replica for the
    stage is fail-stop or trails the fastest by more than delta, the source
    has a pending forward workload, and the destination has memory headroom.
    Ties prefer fail-stop replicas for the source; destination ties go to
    the replica with the least outstanding stage work, then the lowest
    index, so a drained stage spreads over its peers.
    """
    counts = progress.counts
    replicas = range(len(counts))
    d_min = min(
        replicas, key=lambda d: (counts[d][stage], 0 if (d, stage) in dead else 1, d)
    )
    healthy = [d for d in replicas if (d, stage) not in dead]
    if not healthy:
        return None
    load = outstanding or (lambda d, s: 0)
    best = max(counts[d][stage] for d in healthy)
    d_max = min(
        (d for d in healthy if counts[d][stage] == best),
        key=lambda d: (load(d, stage), d),
    )
    if d_max == d_min:
        return None
    gap = counts[d_max][stage] - counts[d_min][stage]
    if (d_min, stage) not in dead and gap <= progress.delta:
        return None
    j = next_pending(d_min, stage)
    if j is None:
        return None
    if not memory_feasible(j, stage, d_max):
        return None
    return j, d_min, d_max


@dataclass
class SlotTrace:
    time: float
    gaps: list[int]
    migrations: int
    starved: list[bool]  # per stage: the lagging replica had nothing pending


@dataclass
class MigrationPlanResult:
    migrations: list[Migration]
    makespan: float
    # realized execution order per (replica, stage); replayed as the resource
    # order by the DAG simulator, which keeps migration-heavy plans acyclic
    stage_orders: dict[tuple[int, int], list[tuple[str, int]]] = field(default_factory=dict)
    slots: list[SlotTrace] = field(default_factory=list)


def plan_migration(
    cfg: ParallelismConfig,
    micro_batches: list[MicroBatch],
    model: CostModel,
    speeds: dict[tuple[int, int], float],
    *,
    dp_counts: list[int] | None = None,
    delta: int = 0,
    capacity: int = 8,
    edge_seconds=None,
    record_trace: bool = False,
    preset_executors: dict[tuple[int, int], int] | None = None,
    migrate: bool = True,
) -> MigrationPlanResult:
    """Progress-aware workload migration over a co-simulated iteration.

    Runs a work-conserving pipeline execution under the given stage speeds
    (0 marks a fail-stop stage) and, at every chunk-completion slot, sweeps
    the stages applying ``migration_decision``; accepted migrations move the
    not-yet-started forward workload (and its backward chunks) to the fastest
    replica.  The recorded migration list is then replayed verbatim by the
    DAG simulator.

    With ``migrate=False`` the loop only realizes a deadlock-free execution
    order for a fixed assignment (``preset_executors``), which is how
    manually planned reroutes get their stage orders.
    """
    stages, replicas = cfg.pp, cfg.dp
    merged = cfg.schedule == "1f1b"
    back = CHUNK_BW if merged else CHUNK_B
    owned = split_micro_batches(micro_batches, replicas, dp_counts)
    owner = {mb.id: d for d, mbs in enumerate(owned) for mb in mbs}
    by_id = {mb.id: mb for mb in micro_batches}
    dead = {key for key, v in speeds.items() if v <= 0.0}

    exec_map: dict[tuple[int, int], int] = {
        (j, s): owner[j] for j in by_id for s in range(stages)
    }
    if preset_executors:
        exec_map.update(preset_executors)
    migrated_in: set[tuple[int, int]] = {
        key for key, d in exec_map.items() if d != owner[key[0]]
    }
    for (j, s), d in sorted(exec_map.items()):
        if (d, s) not in dead:
            continue
        rescuable = migrate and any((dd, s) not in dead for dd in range(replicas))
        if not rescuable:
            raise StrandedWorkload(
                f"stranded workload: chunk (mb {j}, stage {s}) assigned to a "
                f"stopped stage with no executable replica"
            )

    def hop(s_from: int, d_from: int, s_to: int, d_to: int) -> float:
        if edge_seconds is None:
            return 0.0
        return edge_seconds(s_from, d_from, s_to, d_to)

    def cost(kind: str, j: int, d: int, s: int) -> float:
        return predict_chunk_time(by_id[j], kind, model, cfg.layer_partition[s], speeds[(d, s)])

    started: set[tuple[str, int, int]] = set()
    done: dict[tuple[str, int, int], float] = {}
    grad_arrival: dict[tuple[int, int], float] = {}
    f_ready: dict[tuple[int, int], float] = {}
    running: dict[tuple[int, int], bool] = {
        (d, s): False for d in range(replicas) for s in range(stages)
    }
    in_flight: dict[tuple[int, int], int] = dict.fromkeys(running, 0)
    queues: dict[tuple[int, int], dict[str, list[tuple[float, int]]]] = {
        key: {CHUNK_F: [], back: [], CHUNK_W: []} for key in running
    }
    per_mb_chunks = 2 if merged else 3
    remaining = len(by_id) * stages * per_mb_chunks
    events: list[tuple[float, int, str, tuple]] = []
    seq = 0
    progress = ProgressTable.zeros(replicas, stages, delta)
    migrations: list[Migration] = []
    stage_orders: dict[tuple[int, int], list[tuple[str, int]]] = {}
    trace: list[SlotTrace] = []

    def push(t: float, tag: str, payload: tuple) -> None:
        nonlocal seq
        heapq.heappush(events, (t, seq, tag, payload))
        seq += 1

    def enqueue(kind: str, j: int, s: int, t: float) -> None:
        d = exec_map[(j, s)]
        heapq.heappush(queues[(d, s)][kind], (t, j))
        if kind == CHUNK_F:
            f_ready[(j, s)] = t

    def unstarted_f(d: int, s: int) -> int:
        return sum(
            1 for j in by_id
            if exec_map[(j, s)] == d and (CHUNK_F, j, s) not in started
        )

    def next_pending(d: int, s: int) -> int | None:
        candidates = [
            j for j in by_id
            if owner[j] == d
            and exec_map[(j, s)] == d
            and (j, s) not in migrated_in
            and (CHUNK_F, j, s) not in started
        ]
        return min(candidates) if candidates else None

    def memory_feasible(j: int, s: int, d: int) -> bool:
        return in_flight[(d, s)] + unstarted_f(d, s) < capacity

    def try_start(d: int, s: int, now: float) -> None:
        if running[(d, s)] or (d, s) in dead:
            return
        q = queues[(d, s)]
        pick: tuple[str, int] | None = None
        for kind in (back, CHUNK_F, CHUNK_W):
            if merged and kind == CHUNK_W:
                continue
            heap = q[kind]
            while heap:
                t_ready, j = heap[0]
                if t_ready > now:
                    break
                if exec_map[(j, s)] != d or (kind, j, s) in started:
                    heapq.heappop(heap)
                    continue
                if kind == CHUNK_F and in_flight[(d, s)] >= capacity:
                    break
                pick = (kind, j)
                heapq.heappop(heap)
                break
            if pick:
                break
        if not pick:
            return
        kind, j = pick
        started.add((kind, j, s))
        stage_orders.setdefault((d, s), []).append((kind, j))
        running[(d, s)] = True
        if kind == CHUNK_F:
            in_flight[(d, s)] += 1
        push(now + cost(kind, j, d, s), "finish", (d, s, kind, j))

    def outstanding(d: int, s: int) -> int:
        return in_flight[(d, s)] + unstarted_f(d, s)

    def sweep(now: float) -> None:
        if not migrate:
            return
        moved = 0
        starved = []
        for s in range(stages):
            decision = migration_decision(
                progress, s, dead, next_pending, memory_feasible, outstanding
            )
            if record_trace:
                col = [progress.counts[d][s] for d in range(replicas)]
                lagging = min(
                    range(replicas),
                    key=lambda d: (col[d], 0 if (d, s) in dead else 1, d),
                )
                starved.append(next_pending(lagging, s) is None)
            if decision is None:
                continue
            j, d_min, d_max = decision
            exec_map[(j, s)] = d_max
            migrated_in.add((j, s))
            progress.counts[d_min][s] += 1  # owner credit: backlog shrank
            migrations.append(Migration(j, s, d_min, d_max))
            moved += 1
            if (j, s) in f_ready:
                t = max(now, f_ready[(j, s)]) + hop(s, d_min, s, d_max)
                push(t, "ready", (CHUNK_F, j, s))
            try_start(d_max, s, now)
        if record_trace:
            trace.append(SlotTrace(
                now, [progress.gap(s) for s in range(stages)], moved, starved,
            ))

    for j in sorted(by_id):
        enqueue(CHUNK_F, j, 0, 0.0)
    for key in sorted(running):
        try_start(*key, 0.0)

    end = 0.0
    while events:
        # a scheduling slot covers every completion sharing this timestamp,
        # so simultaneous finishes cannot fake a progress gap
        t = events[0][0]
        end = max(end, t)
        finished = False
        while events and events[0][0] == t:
            _, _, tag, payload = heapq.heappop(events)
            if tag == "ready":
                kind, j, s = payload
                enqueue(kind, j, s, t)
                continue
            finished = True
            d, s, kind, j = payload
            done[(kind, j, s)] = t
            running[(d, s)] = False
            remaining -= 1
            if kind == CHUNK_F:
                if (j, s) not in migrated_in:  # owner was credited at migration
                    progress.bump(d, s)
                if s + 1 < stages:
                    nxt = exec_map[(j, s + 1)]
                    push(t + hop(s, d, s + 1, nxt), "ready", (CHUNK_F, j, s + 1))
                # ready times can lie in the future (cross-replica hops), so
                # successors always go through timed ready events
                if s == stages - 1:
                    push(t, "ready", (back, j, s))
                elif (j, s) in grad_arrival:
                    push(max(t, grad_arrival[(j, s)]), "ready", (back, j, s))
            elif kind == back:
                in_flight[(d, s)] -= 1
                if s > 0:
                    prev = exec_map[(j, s - 1)]
                    arrival = t + hop(s, d, s - 1, prev)
                    grad_arrival[(j, s - 1)] = arrival
                    if (CHUNK_F, j, s - 1) in done:
                        push(max(arrival, done[(CHUNK_F, j, s - 1)]),
                             "ready", (back, j, s - 1))
                if not merged:
                    push(t, "ready", (CHUNK_W, j, s))
        if finished:
            sweep(t)
        for key in sorted(running):
            try_start(*key, t)

    if remaining > 0:
        pending = [
            (j, s) for (j, s), d in exec_map.items()
            if (CHUNK_F, j, s) not in done and (d, s) in dead
        ]
        raise StrandedWorkload(
            f"stranded workload: {len(pending)} chunks unexecutable, e.g. {sorted(pending)[:3]}"
        )
    return MigrationPlanResult(
        migrations=migrations, makespan=end, stage_orders=stage_orders, slots=trace
    )


def apply_plan(
    state: ClusterState, cfg: ParallelismConfig, plan: AdaptationPlan
) -> tuple[ClusterState, ParallelismConfig]:
    """Materialize a plan's group/layer changes on copies of state and config."""
    out = state.copy()
    new_cfg = cfg.copy()
    for (d, s), (members, standby) in plan.tp_subgroups.items():
        out.tp_groups[(d, s)] = tuple(sorted(members))
        for dev_id in standby:
            dev = out.devices[dev_id]
            if dev.status != FAIL_STOP:
                dev.status = STANDBY
        for dev_id in members:
            dev = out.devices[dev_id]
            if dev.status == STANDBY:
                dev.status = HEALTHY if dev.speed >= 1.0 else FAIL_SLOW
    for (d, s) in plan.excluded_groups:
        for dev_id in out.tp_groups.get((d, s), ()):
            dev = out.devices[dev_id]
            if dev.status != FAIL_STOP:
                dev.status = STANDBY
        out.tp_groups[(d, s)] = ()
    if plan.layer_partition is not None:
        new_cfg.layer_partition = list(plan.layer_partition)
    return out, new_cfg


def evaluate_plan(
    plan: AdaptationPlan,
    state: ClusterState,
    cfg: ParallelismConfig,
    micro_batches: list[MicroBatch],
    model: CostModel,
    *,
    comm=None,
    capacity: int | None = None,
) -> float:
    """Predicted iteration makespan under the plan (max across DP replicas,
    including the gradient synchronization vertex)."""
    new_state, new_cfg = apply_plan(state, cfg, plan)
    record = simulate_iteration(
        new_state, new_cfg, micro_batches, model, plan, comm=comm, capacity=capacity
    )
    return record.observed_time


def reconfig_cost(
    plan: AdaptationPlan,
    state: ClusterState,
    cfg: ParallelismConfig,
    *,
    layer_bytes: float,
    group_rebuild_s: float = 2.0,
) -> float:
    """Communicator rebuild plus state-transfer time for the plan.

    Pure migrations are free; any TP membership or layer-partition change
    pays the rebuild constant, layer moves transfer each reassigned layer
    once, and groups whose degree changed reshard their stage's parameters.
    """
    rebuild_needed = bool(plan.tp_subgroups or plan.excluded_groups)
    moved_layers = 0
    new_partition = plan.layer_partition
    if new_partition is not None and list(new_partition) != list(cfg.layer_partition):
        rebuild_needed = True
        moved_layers = sum(
            max(0, new - old) for new, old in zip(new_partition, cfg.layer_partition)
        )
    if not rebuild_needed:
        return 0.0
    partition = list(new_partition) if new_partition is not None else list(cfg.layer_partition)
    reshard_bytes = 0.0
    for (d, s), (members, _) in plan.tp_subgroups.items():
        if set(members) != set(state.tp_groups.get((d, s), ())):
            reshard_bytes += partition[s] * layer_bytes
    links = LinkModel.from_cluster(state)
    transfer = (moved_layers * layer_bytes + reshard_bytes) / links.worst_inter()
    return group_rebuild_s + transfer
