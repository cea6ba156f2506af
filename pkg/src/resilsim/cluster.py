"""Cluster topology, parallel-group layout, workloads, and failure state.

Conventions used throughout the package:

* devices carry a normalized speed in (0, 1] where 1.0 is the healthy peak;
* TP groups are keyed by ``(replica, stage)`` and never span nodes;
* time is continuous double-precision seconds, the simulator is event-driven.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

HEALTHY = "healthy"
FAIL_SLOW = "fail_slow"
FAIL_STOP = "fail_stop"
STANDBY = "standby"

KIND_FAIL_STOP = "fail_stop"
KIND_FAIL_SLOW_COMPUTE = "fail_slow_compute"
KIND_FAIL_SLOW_COMM = "fail_slow_comm"

SCHEDULE_1F1B = "1f1b"
SCHEDULE_ZBH = "zbh"
SCHEDULES = (SCHEDULE_1F1B, SCHEDULE_ZBH)


@dataclass
class Device:
    id: int
    node_id: int
    speed: float = 1.0
    status: str = HEALTHY
    failed_at: float | None = None  # set when a fail-stop takes effect


@dataclass
class ParallelismConfig:
    tp: int
    dp: int
    pp: int
    schedule: str = SCHEDULE_1F1B
    layer_partition: list[int] = field(default_factory=list)

    @property
    def total_layers(self) -> int:
        return sum(self.layer_partition)

    def copy(self) -> "ParallelismConfig":
        return replace(self, layer_partition=list(self.layer_partition))


@dataclass
class MicroBatch:
    """A packed bundle of document lengths summing exactly to the token budget."""

    id: int
    doc_lengths: tuple[int, ...]
    token_budget: int


@dataclass
class FailureEvent:
    """Typed injection applied to a device (compute) or a node-pair link (comm).

    ``severity`` multiplies speed or bandwidth and must be in (0, 1) for the
    fail-slow kinds; fail-stop ignores it.  A missing ``end`` means the event
    is persistent.
    """

    kind: str
    start: float
    device: int | None = None
    link: tuple[int, int] | None = None
    end: float | None = None
    severity: float | None = None

    def __post_init__(self):
        if self.kind not in (KIND_FAIL_STOP, KIND_FAIL_SLOW_COMPUTE, KIND_FAIL_SLOW_COMM):
            raise ValueError(f"unknown failure kind {self.kind!r}")
        if self.kind == KIND_FAIL_SLOW_COMM:
            if self.link is None:
                raise ValueError("fail_slow_comm events require a link target")
        elif self.device is None:
            raise ValueError(f"{self.kind} events require a device target")
        if self.kind != KIND_FAIL_STOP:
            if self.severity is None or not (0.0 < self.severity < 1.0):
                raise ValueError("fail-slow severity must lie in (0, 1)")
        if self.end is not None and self.end <= self.start:
            raise ValueError("event end must be after start")

    def active(self, t: float) -> bool:
        if t < self.start:
            return False
        return self.end is None or t < self.end


@dataclass
class IterationRecord:
    """Per-iteration accounting: busy_d + idle_d = observed_time for active devices."""

    iteration: int
    observed_time: float
    predicted_healthy_time: float
    per_device_busy: dict[int, float]
    per_device_idle: dict[int, float]
    alarms: list[str] = field(default_factory=list)
    # extra simulator detail consumed by the detector / metrics
    stage_cost: dict[tuple[int, int], float] = field(default_factory=dict)
    stage_cost_reference: dict[tuple[int, int], float] = field(default_factory=dict)
    link_ratio: dict[tuple[int, int], float] = field(default_factory=dict)
    migrations: int = 0


@dataclass
class ClusterState:
    """The world the simulator evolves; a value type safe to copy per scenario."""

    devices: list[Device]
    devices_per_node: int
    tp_groups: dict[tuple[int, int], tuple[int, ...]]  # (replica, stage) -> device ids
    intra_bw: float
    inter_bw: float
    link_factors: dict[tuple[int, int], float] = field(default_factory=dict)
    now: float = 0.0

    def device(self, dev_id: int) -> Device:
        if not 0 <= dev_id < len(self.devices):
            raise KeyError(f"unknown device id {dev_id}")
        return self.devices[dev_id]

    def copy(self) -> "ClusterState":
        return ClusterState(
            devices=[replace(d) for d in self.devices],
            devices_per_node=self.devices_per_node,
            tp_groups=dict(self.tp_groups),
            intra_bw=self.intra_bw,
            inter_bw=self.inter_bw,
            link_factors=dict(self.link_factors),
            now=self.now,
        )

    def group_node(self, replica: int, stage: int) -> int | None:
        group = self.tp_groups.get((replica, stage), ())
        if not group:
            return None
        return self.devices[group[0]].node_id

    def active_group_members(self, replica: int, stage: int) -> list[int]:
        return [
            d for d in self.tp_groups.get((replica, stage), ())
            if self.devices[d].status != FAIL_STOP
        ]

    def effective_stage_speed(self, replica: int, stage: int, nominal_tp: int) -> float:
        """Group throughput relative to a healthy full-degree group.

        A group is bottlenecked by its slowest member; running at a reduced
        degree k scales its aggregate rate by k / nominal_tp.  A fail-stop
        member that was never excluded kills the whole group (speed 0).
        """
        group = self.tp_groups.get((replica, stage), ())
        if not group:
            return 0.0
        slowest = min(
            0.0 if self.devices[d].status == FAIL_STOP else self.devices[d].speed
            for d in group
        )
        return slowest * len(group) / nominal_tp

    def node_count(self) -> int:
        return 1 + max(d.node_id for d in self.devices)


def build_cluster(
    nodes: int,
    devices_per_node: int,
    cfg: ParallelismConfig,
    intra_bw: float,
    inter_bw: float,
) -> ClusterState:
    """Lay out tp*dp*pp devices in sequential intra-node blocks.

    Group assignment order is replica-major: (d=0,s=0), (d=0,s=1), ...
    tp must divide devices_per_node so groups never straddle nodes.
    """
    total = nodes * devices_per_node
    needed = cfg.tp * cfg.dp * cfg.pp
    if needed > total:
        raise ValueError(f"need {needed} devices, cluster has {total}")
    if devices_per_node % cfg.tp != 0:
        raise ValueError("tp degree must divide devices per node")
    devices = [Device(id=i, node_id=i // devices_per_node) for i in range(total)]
    groups: dict[tuple[int, int], tuple[int, ...]] = {}
    cursor = 0
    for d in range(cfg.dp):
        for s in range(cfg.pp):
            groups[(d, s)] = tuple(range(cursor, cursor + cfg.tp))
            cursor += cfg.tp
    for spare in range(cursor, total):
        devices[spare].status = STANDBY  # unallocated pool
    return ClusterState(
        devices=devices,
        devices_per_node=devices_per_node,
        tp_groups=groups,
        intra_bw=intra_bw,
        inter_bw=inter_bw,
    )


def validate_cluster(
    state: ClusterState,
    cfg: ParallelismConfig,
    total_layers: int | None = None,
    check_capacity: bool = True,
) -> list[str]:
    """Return every violated invariant; an empty list means the layout is sound.

    ``check_capacity`` applies the plan-time device-count bound; mid-run the
    simulator skips it (a fail-stop inside a group is a completeness error,
    not a layout error).
    """
    violations: list[str] = []
    if len(cfg.layer_partition) != cfg.pp:
        violations.append(
            f"layer partition has {len(cfg.layer_partition)} entries for pp={cfg.pp}"
        )
    if total_layers is not None and cfg.total_layers != total_layers:
        violations.append(f"layer sum {cfg.total_layers} != {total_layers}")
    seen: dict[int, tuple[int, int]] = {}
    for key, group in state.tp_groups.items():
        nodes = {state.devices[d].node_id for d in group}
        if len(nodes) > 1:
            violations.append(f"TP group {key} spans nodes {sorted(nodes)}")
        for d in group:
            if state.devices[d].status == STANDBY:
                violations.append(f"standby device {d} still member of group {key}")
            if d in seen:
                violations.append(f"device {d} in groups {seen[d]} and {key}")
            seen[d] = key
    for dev in state.devices:
        if dev.status in (STANDBY, FAIL_STOP):
            continue
        if dev.id not in seen:
            violations.append(f"active device {dev.id} belongs to no TP group")
    if check_capacity:
        alive = sum(1 for dev in state.devices if dev.status != FAIL_STOP)
        if cfg.tp * cfg.dp * cfg.pp > alive:
            violations.append(
                f"config needs {cfg.tp * cfg.dp * cfg.pp} devices, only {alive} executable"
            )
    return violations


def _layer_sum_check(cfg: ParallelismConfig, total_layers: int) -> str | None:
    if cfg.total_layers != total_layers:
        return f"layer sum {cfg.total_layers} != {total_layers}"
    return None


def validate_layer_partition(cfg: ParallelismConfig, total_layers: int) -> list[str]:
    msg = _layer_sum_check(cfg, total_layers)
    return [msg] if msg else []


def apply_failures(
    state: ClusterState, events: list[FailureEvent], t: float
) -> ClusterState:
    """Recompute device speeds/status and link factors from scratch at time t.

    Overlapping fail-slow severities stack multiplicatively, which makes the
    application idempotent for fixed t and insensitive to event order.
    Standby markers are adaptation state and survive reapplication.
    """
    out = state.copy()
    speed: dict[int, float] = {d.id: 1.0 for d in out.devices}
    stopped: dict[int, float] = {}
    link_factors: dict[tuple[int, int], float] = {}
    for ev in events:
        if ev.kind == KIND_FAIL_SLOW_COMM:
            a, b = ev.link
            if not (0 <= a < out.node_count() and 0 <= b < out.node_count()):
                raise KeyError(f"unknown link {ev.link}")
            if ev.active(t):
                key = (min(a, b), max(a, b))
                link_factors[key] = link_factors.get(key, 1.0) * ev.severity
            continue
        dev = out.device(ev.device)  # raises on unknown id
        if ev.kind == KIND_FAIL_STOP:
            if ev.start <= t and (dev.id not in stopped or ev.start < stopped[dev.id]):
                stopped[dev.id] = ev.start
        elif ev.active(t):
            speed[dev.id] *= ev.severity
    for dev in out.devices:
        if dev.id in stopped:
            dev.status = FAIL_STOP
            dev.failed_at = stopped[dev.id]
            continue
        dev.speed = speed[dev.id]
        dev.failed_at = None
        if dev.status == STANDBY:
            continue
        dev.status = FAIL_SLOW if dev.speed < 1.0 else HEALTHY
    out.link_factors = link_factors
    out.now = t
    return out


def split_micro_batches(
    micro_batches: list[MicroBatch], dp: int, counts: list[int] | None = None
) -> list[list[MicroBatch]]:
    """Contiguous ownership split of a global batch across DP replicas.

    With no explicit counts the split is as even as possible, earlier
    replicas taking the remainder.  Explicit counts must sum to the batch.
    """
    n = len(micro_batches)
    if counts is None:
        base, extra = divmod(n, dp)
        counts = [base + (1 if d < extra else 0) for d in range(dp)]
    if len(counts) != dp or sum(counts) != n or any(c < 0 for c in counts):
        raise ValueError(f"bad ownership counts {counts} for {n} micro-batches")
    out: list[list[MicroBatch]] = []
    cursor = 0
    for c in counts:
        out.append(micro_batches[cursor:cursor + c])
        cursor += c
    return out
