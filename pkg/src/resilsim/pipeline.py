"""Pipeline-schedule DAG construction and traversal.

The analytical iteration-time predictor and the ground-truth simulator are
the same traversal: build the chunk DAG for the schedule, cost every vertex
with the micro-batch model at the stage's effective speed, and take the
critical path.  Feeding healthy speeds yields the prediction, feeding the
failure-affected speeds yields the simulated iteration.

Normative chunk orderings (resource total order per (replica, stage), P
stages, stage index i, M assigned micro-batches in id order):

1F1B (backward merged into one BW chunk):
    warmup  F_0 .. F_{w-1}             with w = min(P - 1 - i, M)
    steady  F_{w+k}, BW_k              for k = 0 .. M - w - 1
    drain   BW_{M-w} .. BW_{M-1}

ZBH (backward split into B and W, W delayed to fill the drain bubble):
    warmup  F_0 .. F_{w-1}             with w = min(P - 1 - i, M)
    steady  F_{w+k}, B_k               for k = 0 .. M - w - 1
    drain   B_{M-w+t}, W_t             for t = 0 .. w - 1
    tail    W_w .. W_{M-1}
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cluster import (
    FAIL_STOP,
    ClusterState,
    IterationRecord,
    MicroBatch,
    ParallelismConfig,
    SCHEDULE_1F1B,
    SCHEDULE_ZBH,
    split_micro_batches,
    validate_cluster,
)
from .comm import CommSpec, LinkModel, allreduce_cost, p2p_cost
from .workload import (
    CHUNK_ALLREDUCE,
    CHUNK_B,
    CHUNK_BW,
    CHUNK_F,
    CHUNK_W,
    CostModel,
    predict_chunk_time,
)

EDGE_DATA = "data"
EDGE_RESOURCE = "resource"


class SimulationError(RuntimeError):
    pass


class CycleError(SimulationError):
    pass


@dataclass
class ChunkVertex:
    kind: str
    micro_batch: int  # -1 for the terminal all-reduce vertex
    stage: int
    replica: int
    cost: float

    def label(self) -> str:
        if self.kind == CHUNK_ALLREDUCE:
            return f"AR(d{self.replica})"
        return f"{self.kind}(mb{self.micro_batch},s{self.stage},d{self.replica})"


@dataclass
class Edge:
    src: int
    dst: int
    weight: float
    kind: str


@dataclass
class ChunkDag:
    vertices: list[ChunkVertex]
    edges: list[Edge]
    # (replica, stage) -> vertex indices in resource order
    chains: dict[tuple[int, int], list[int]] = field(default_factory=dict)


def schedule_1f1b(num_stages: int, stage: int, mb_ids: list[int]) -> list[tuple[str, int]]:
    m = len(mb_ids)
    w = min(num_stages - 1 - stage, m)
    seq = [(CHUNK_F, mb_ids[k]) for k in range(w)]
    for k in range(m - w):
        seq.append((CHUNK_F, mb_ids[w + k]))
        seq.append((CHUNK_BW, mb_ids[k]))
    for k in range(m - w, m):
        seq.append((CHUNK_BW, mb_ids[k]))
    return seq


def schedule_zbh(num_stages: int, stage: int, mb_ids: list[int]) -> list[tuple[str, int]]:
    m = len(mb_ids)
    w = min(num_stages - 1 - stage, m)
    seq = [(CHUNK_F, mb_ids[k]) for k in range(w)]
    for k in range(m - w):
        seq.append((CHUNK_F, mb_ids[w + k]))
        seq.append((CHUNK_B, mb_ids[k]))
    next_w = 0
    for k in range(m - w, m):
        seq.append((CHUNK_B, mb_ids[k]))
        seq.append((CHUNK_W, mb_ids[next_w]))
        next_w += 1
    for k in range(next_w, m):
        seq.append((CHUNK_W, mb_ids[k]))
    return seq


def stage_sequence(cfg: ParallelismConfig, stage: int, mb_ids: list[int]) -> list[tuple[str, int]]:
    if cfg.schedule == SCHEDULE_1F1B:
        return schedule_1f1b(cfg.pp, stage, mb_ids)
    if cfg.schedule == SCHEDULE_ZBH:
        return schedule_zbh(cfg.pp, stage, mb_ids)
    raise ValueError(f"unknown schedule {cfg.schedule!r}")


def build_dag(
    cfg: ParallelismConfig,
    micro_batches: list[MicroBatch],
    model: CostModel,
    speeds,
    p2p: float = 0.0,
    *,
    executors: dict[tuple[int, int], int] | None = None,
    dp_counts: list[int] | None = None,
    edge_seconds=None,
    allreduce_seconds=None,
    stage_orders: dict[tuple[int, int], list[tuple[str, int]]] | None = None,
) -> ChunkDag:
    """Emit the chunk DAG for the configured schedule.

    ``speeds`` is either a scalar or a map (replica, stage) -> effective
    speed; a TP group's effective speed is bottlenecked by its slowest
    member.  ``executors`` overrides which replica runs (mb, stage); the
    overridden chunks join the executor's resource chain and exchange
    activations/gradients with the source pipeline over data edges costed by
    ``edge_seconds(s_from, d_from, s_to, d_to)`` (or the scalar ``p2p``).
    With dp > 1 and ``allreduce_seconds`` set, a terminal gradient
    synchronization vertex is appended per replica, so the iteration ends at
    the latest replica.
    """
    if not micro_batches:
        raise ValueError("cannot build a DAG for zero micro-batches")
    stages, replicas = cfg.pp, cfg.dp
    if len(cfg.layer_partition) != stages:
        raise ValueError("layer partition does not match stage count")
    owned = split_micro_batches(micro_batches, replicas, dp_counts)
    owner = {mb.id: d for d, mbs in enumerate(owned) for mb in mbs}
    by_id = {mb.id: mb for mb in micro_batches}
    executors = executors or {}

    def executor(j: int, s: int) -> int:
        return executors.get((j, s), owner[j])

    def speed_of(d: int, s: int) -> float:
        if isinstance(speeds, dict):
            return speeds[(d, s)]
        return float(speeds)

    # executors run their own micro-batches in id order and append migrated
    # work after, so absorbing a peer's chunks does not stall their own flow
    assigned: dict[tuple[int, int], list[int]] = {
        (d, s): [] for d in range(replicas) for s in range(stages)
    }
    migrated: dict[tuple[int, int], list[int]] = {
        (d, s): [] for d in range(replicas) for s in range(stages)
    }
    for mb in micro_batches:
        for s in range(stages):
            d = executor(mb.id, s)
            if d == owner[mb.id]:
                assigned[(d, s)].append(mb.id)
            else:
                migrated[(d, s)].append(mb.id)

    merged = cfg.schedule == SCHEDULE_1F1B
    back_kind = CHUNK_BW if merged else CHUNK_B
    vertices: list[ChunkVertex] = []
    edges: list[Edge] = []
    chains: dict[tuple[int, int], list[int]] = {}
    vid: dict[tuple[str, int, int], int] = {}

    for d in range(replicas):
        for s in range(stages):
            ids = sorted(assigned[(d, s)]) + sorted(migrated[(d, s)])
            if not ids:
                chains[(d, s)] = []
                continue
            if stage_orders and (d, s) in stage_orders:
                sequence = stage_orders[(d, s)]
                if {j for _, j in sequence} != set(ids):
                    raise ValueError(f"stage order for {(d, s)} does not cover its chunks")
            else:
                sequence = stage_sequence(cfg, s, ids)
            speed = speed_of(d, s)
            chain: list[int] = []
            for kind, j in sequence:
                cost = predict_chunk_time(by_id[j], kind, model, cfg.layer_partition[s], speed)
                idx = len(vertices)
                vertices.append(ChunkVertex(kind, j, s, d, cost))
                vid[(kind, j, s)] = idx
                if chain:
                    edges.append(Edge(chain[-1], idx, 0.0, EDGE_RESOURCE))
                chain.append(idx)
            chains[(d, s)] = chain

    def hop(s_from: int, d_from: int, s_to: int, d_to: int) -> float:
        if edge_seconds is not None:
            return edge_seconds(s_from, d_from, s_to, d_to)
        return float(p2p)

    for mb in micro_batches:
        j = mb.id
        for s in range(1, stages):
            e_prev, e_here = executor(j, s - 1), executor(j, s)
            edges.append(Edge(
                vid[(CHUNK_F, j, s - 1)], vid[(CHUNK_F, j, s)],
                hop(s - 1, e_prev, s, e_here), EDGE_DATA,
            ))
        for s in range(stages - 1):
            e_next, e_here = executor(j, s + 1), executor(j, s)
            edges.append(Edge(
                vid[(back_kind, j, s + 1)], vid[(back_kind, j, s)],
                hop(s + 1, e_next, s, e_here), EDGE_DATA,
            ))
        if not merged:
            for s in range(stages):
                edges.append(Edge(vid[(CHUNK_B, j, s)], vid[(CHUNK_W, j, s)], 0.0, EDGE_DATA))

    if replicas > 1 and allreduce_seconds is not None:
        for d in range(replicas):
            cost = (
                allreduce_seconds.get(d, 0.0)
                if isinstance(allreduce_seconds, dict)
                else float(allreduce_seconds)
            )
            idx = len(vertices)
            vertices.append(ChunkVertex(CHUNK_ALLREDUCE, -1, -1, d, cost))
            for s in range(stages):
                chain = chains[(d, s)]
                if chain:
                    edges.append(Edge(chain[-1], idx, 0.0, EDGE_DATA))

    return ChunkDag(vertices=vertices, edges=edges, chains=chains)


def critical_path(dag: ChunkDag) -> tuple[list[float], float]:
    """Earliest start per vertex and the makespan (critical-path length).

    t_start(v) = max over predecessors u of t_start(u) + cost(u) + weight(u, v);
    sources start at 0; the makespan is max over v of t_start(v) + cost(v).
    """
    n = len(dag.vertices)
    starts = [0.0] * n
    indeg = [0] * n
    succ: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for e in dag.edges:
        succ[e.src].append((e.dst, e.weight))
        indeg[e.dst] += 1
    queue = [i for i in range(n) if indeg[i] == 0]
    processed = 0
    head = 0
    while head < len(queue):
        u = queue[head]
        head += 1
        processed += 1
        finish = starts[u] + dag.vertices[u].cost
        for v, w in succ[u]:
            cand = finish + w
            if cand > starts[v]:
                starts[v] = cand
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if processed < n:
        raise CycleError("dependency cycle: " + _find_cycle(dag, indeg))
    makespan = 0.0
    for i, v in enumerate(dag.vertices):
        makespan = max(makespan, starts[i] + v.cost)
    return starts, makespan


def _find_cycle(dag: ChunkDag, indeg: list[int]) -> str:
    remaining = {i for i, d in enumerate(indeg) if d > 0}
    succ: dict[int, list[int]] = {i: [] for i in remaining}
    pred: dict[int, list[int]] = {i: [] for i in remaining}
    for e in dag.edges:
        if e.src in remaining and e.dst in remaining:
            succ[e.src].append(e.dst)
            pred[e.dst].append(e.src)
    # strip vertices that are merely downstream of a cycle until every
    # survivor has a successor inside the residue
    changed = True
    while changed:
        changed = False
        for v in sorted(remaining):
            if not any(w in remaining for w in succ[v]):
                remaining.discard(v)
                changed = True
    start = min(remaining)
    path, seen = [], {}
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = next(w for w in succ[node] if w in remaining)
    cycle = path[seen[node]:] + [node]
    return " -> ".join(dag.vertices[i].label() for i in cycle)


def _stage_speed_maps(
    state: ClusterState, cfg: ParallelismConfig
) -> tuple[dict[tuple[int, int], float], dict[tuple[int, int], float]]:
    actual: dict[tuple[int, int], float] = {}
    healthy: dict[tuple[int, int], float] = {}
    for d in range(cfg.dp):
        for s in range(cfg.pp):
            actual[(d, s)] = state.effective_stage_speed(d, s, cfg.tp)
            group = state.tp_groups.get((d, s), ())
            healthy[(d, s)] = len(group) / cfg.tp if group else 0.0
    return actual, healthy


def edge_cost_fn(state: ClusterState, cfg: ParallelismConfig, comm: CommSpec,
                  links: LinkModel, token_budget: int):
    nbytes = comm.boundary_tensor_bytes(token_budget)

    def cost(s_from: int, d_from: int, s_to: int, d_to: int) -> float:
        node_a = state.group_node(d_from, s_from)
        node_b = state.group_node(d_to, s_to)
        if node_a is None or node_b is None:
            return 0.0
        if node_a == node_b:
            return nbytes / links.intra_bw
        deg_a = len(state.tp_groups[(d_from, s_from)])
        deg_b = len(state.tp_groups[(d_to, s_to)])
        seconds, _ = p2p_cost(nbytes, deg_a, deg_b, comm.p2p_optimized, links,
                              nodes=(node_a, node_b))
        return seconds

    return cost


def _allreduce_map(state: ClusterState, cfg: ParallelismConfig, comm: CommSpec,
                   links: LinkModel) -> dict[int, float]:
    """Terminal sync cost per replica: stage gradients all-reduce across DP
    peers in parallel, the replica tail is the slowest stage's ring."""
    out: dict[int, float] = {}
    for d in range(cfg.dp):
        worst = 0.0
        for s in range(cfg.pp):
            nodes = tuple(
                state.group_node(dd, s)
                for dd in range(cfg.dp)
                if state.group_node(dd, s) is not None
            )
            nbytes = cfg.layer_partition[s] * comm.layer_bytes
            worst = max(worst, allreduce_cost(nbytes, cfg.dp, links, nodes))
        out[d] = worst
    return out


def simulate_iteration(
    state: ClusterState,
    cfg: ParallelismConfig,
    micro_batches: list[MicroBatch],
    model: CostModel,
    plan=None,
    *,
    comm: CommSpec | None = None,
    iteration: int = 0,
    capacity: int | None = None,
) -> IterationRecord:
    """Run one iteration under the actual (failure-affected) speeds.

    Honors the plan's ownership counts and per-stage migration assignments;
    migrated chunks acquire the executor stage's resource edges plus
    cross-replica data edges.  A device's busy time is its own-shard compute
    across the chunks its group executed; waiting for the group's slowest
    member, and the terminal all-reduce, land in idle, so
    busy + idle = observed_time for every active device.
    """
    violations = validate_cluster(state, cfg, check_capacity=False)
    if violations:
        raise SimulationError("invalid cluster: " + "; ".join(violations))

    dp_counts = getattr(plan, "dp_assignment", None) if plan is not None else None
    executors: dict[tuple[int, int], int] = {}
    if plan is not None:
        for m in getattr(plan, "migrations", []) or []:
            executors[(m.mb, m.stage)] = m.executor

    owned = split_micro_batches(micro_batches, cfg.dp, dp_counts)
    owner = {mb.id: d for d, mbs in enumerate(owned) for mb in mbs}
    speeds, speeds_healthy = _stage_speed_maps(state, cfg)
    for mb in micro_batches:
        for s in range(cfg.pp):
            d = executors.get((mb.id, s), owner[mb.id])
            if speeds[(d, s)] <= 0.0:
                raise SimulationError(
                    f"execution completeness violated: chunk (mb {mb.id}, stage {s}) "
                    f"assigned to stopped stage (d{d}, s{s})"
                )

    if comm is not None:
        links = LinkModel.from_cluster(state)
        clean = LinkModel(intra_bw=state.intra_bw, inter_bw=state.inter_bw)
        token_budget = micro_batches[0].token_budget
        edge_actual = edge_cost_fn(state, cfg, comm, links, token_budget)
        edge_healthy = edge_cost_fn(state, cfg, comm, clean, token_budget)
        ar_actual = _allreduce_map(state, cfg, comm, links)
        ar_healthy = _allreduce_map(state, cfg, comm, clean)
    else:
        edge_actual = edge_healthy = None
        ar_actual = ar_healthy = None

    orders = getattr(plan, "stage_orders", None) if plan is not None else None
    if not executors:
        orders = None  # canonical schedule when nothing migrated
    dag = build_dag(cfg, micro_batches, model, speeds,
                    executors=executors, dp_counts=dp_counts,
                    edge_seconds=edge_actual, allreduce_seconds=ar_actual,
                    stage_orders=orders)
    dag_ref = build_dag(cfg, micro_batches, model, speeds_healthy,
                        executors=executors, dp_counts=dp_counts,
                        edge_seconds=edge_healthy, allreduce_seconds=ar_healthy,
                        stage_orders=orders)
    starts, observed = critical_path(dag)
    _, predicted = critical_path(dag_ref)

    if capacity is not None:
        _check_activation_memory(dag, starts, capacity)

    stage_cost: dict[tuple[int, int], float] = {}
    stage_cost_ref: dict[tuple[int, int], float] = {}
    for v, v_ref in zip(dag.vertices, dag_ref.vertices):
        if v.kind == CHUNK_ALLREDUCE:
            continue
        key = (v.replica, v.stage)
        stage_cost[key] = stage_cost.get(key, 0.0) + v.cost
        stage_cost_ref[key] = stage_cost_ref.get(key, 0.0) + v_ref.cost

    # a member's busy share is the time it spends computing its own shard
    # (cost * group_min / own_speed); the wait for the slowest member inside
    # each collective is idle, which is what failure amplification measures
    busy: dict[int, float] = {}
    idle: dict[int, float] = {}
    for dev in state.devices:
        if dev.status == FAIL_STOP:
            continue
        busy[dev.id] = 0.0
    for (d, s), total in stage_cost.items():
        group = state.tp_groups.get((d, s), ())
        members = [m for m in group if state.devices[m].status != FAIL_STOP]
        if not members:
            continue
        slowest = min(state.devices[m].speed for m in members)
        for dev_id in members:
            if dev_id in busy:
                busy[dev_id] += total * slowest / state.devices[dev_id].speed
    for dev_id, b in busy.items():
        idle[dev_id] = observed - b

    link_ratio = _used_link_ratios(state, cfg) if comm is not None else {}

    return IterationRecord(
        iteration=iteration,
        observed_time=observed,
        predicted_healthy_time=predicted,
        per_device_busy=busy,
        per_device_idle=idle,
        stage_cost=stage_cost,
        stage_cost_reference=stage_cost_ref,
        link_ratio=link_ratio,
        migrations=sum(1 for (j, s), d in executors.items() if d != owner[j]),
    )


def _used_link_ratios(state: ClusterState, cfg: ParallelismConfig) -> dict[tuple[int, int], float]:
    """Measured-vs-expected transfer ratio for every inter-node link the
    current topology exercises (stage boundaries and per-stage DP rings)."""
    used: set[tuple[int, int]] = set()
    for d in range(cfg.dp):
        for s in range(cfg.pp - 1):
            a = state.group_node(d, s)
            b = state.group_node(d, s + 1)
            if a is not None and b is not None and a != b:
                used.add((min(a, b), max(a, b)))
    if cfg.dp > 1:
        for s in range(cfg.pp):
            ring = [
                state.group_node(d, s) for d in range(cfg.dp)
                if state.group_node(d, s) is not None
            ]
            for a, b in zip(ring, ring[1:] + ring[:1]):
                if a != b:
                    used.add((min(a, b), max(a, b)))
    return {
        key: 1.0 / state.link_factors.get(key, 1.0)
        for key in sorted(used)
    }


def _check_activation_memory(dag: ChunkDag, starts: list[float], capacity: int) -> None:
    """Live activations per (replica, stage) must stay within capacity.

    An activation is live from the start of its forward chunk until its
    backward(-activation) chunk completes.
    """
    events: dict[tuple[int, int], list[tuple[float, int]]] = {}
    for i, v in enumerate(dag.vertices):
        key = (v.replica, v.stage)
        if v.kind == CHUNK_F:
            events.setdefault(key, []).append((starts[i], 1))
        elif v.kind in (CHUNK_B, CHUNK_BW):
            events.setdefault(key, []).append((starts[i] + v.cost, -1))
    for key, evs in events.items():
        # the resource chain guarantees end(B) <= start(next F), so a release
        # sharing a timestamp with an allocation happens first
        evs.sort(key=lambda e: (e[0], e[1]))
        live = 0
        for _, delta in evs:
            live += delta
            if live > capacity:
                raise SimulationError(
                    f"activation footprint {live} exceeds capacity {capacity} at {key}"
                )
