"""Scenario configuration, seeded execution, metrics, and output emission.

A scenario file is a single YAML document (JSON parses too); the same
mapping can be built programmatically for tests.  Replaying a scenario is
byte-identical: every random draw comes from generators seeded by the
scenario seed, and the simulated clock is the only notion of time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cluster import (
    ClusterState,
    FAIL_STOP,
    FailureEvent,
    KIND_FAIL_SLOW_COMM,
    KIND_FAIL_SLOW_COMPUTE,
    KIND_FAIL_STOP,
    IterationRecord,
    MicroBatch,
    ParallelismConfig,
    SCHEDULES,
    STANDBY,
    apply_failures,
    build_cluster,
    validate_cluster,
)
from .comm import CommSpec
from .detector import DetectorState, HeartbeatConfig, HeartbeatMonitor
from .pipeline import SimulationError, simulate_iteration
from .policies import PlanningContext, Policy, make_policy, POLICIES
from .scheduler import AdaptationPlan, StrandedWorkload, apply_plan
from .workload import CostModel, pack_sequences

GIB = float(2**30)

ITERATIONS_CSV_HEADER = "iteration,observed_s,predicted_s,alarms,active_devices,migrations"
THROUGHPUT_CSV_HEADER = "iteration,wall_s,samples_per_s"

SUMMARY_KEYS = (
    "aborted_at",
    "avg_iteration_s",
    "charged",
    "detections",
    "false_alarms",
    "idle_amplification",
    "iterations_completed",
    "iterations_requested",
    "micro_batches_per_iteration",
    "policy",
    "scenario",
    "seed",
    "stats",
    "throughput_samples_per_s",
    "wall_time_s",
)


@dataclass
class WorkloadSpec:
    token_budget: int = 4096
    micro_batches: int = 8
    kind: str = "lognormal"  # lognormal | fixed | trace
    length: int = 0
    mean_log: float = 7.0
    sigma_log: float = 0.8
    trace_lengths: tuple[int, ...] = ()


@dataclass
class DetectorSpec:
    heartbeat_interval_s: float = 1.0
    heartbeat_miss_threshold: int = 3
    window: int = 20
    kappa: float = 3.0
    escalation_factor: float = 1.25
    filter_cost_s: float = 0.05
    validation_cost_s: float = 3.0
    measurement_noise: float = 0.01


@dataclass
class SchedulerSpec:
    k_min: int = 2
    delta: int = 0
    min_layers: int = 1
    activation_capacity: int = 0  # 0 -> pp + 2
    group_rebuild_s: float = 2.0


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    iterations: int = 50
    policy: str = "resihp"
    nodes: int = 2
    devices_per_node: int = 8
    intra_bw: float = 300.0 * GIB
    inter_bw: float = 25.0 * GIB
    cfg: ParallelismConfig = field(
        default_factory=lambda: ParallelismConfig(tp=4, dp=2, pp=2, layer_partition=[8, 8])
    )
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    model: CostModel = field(default_factory=lambda: CostModel(alpha=2e-6, beta=5e-10))
    comm: CommSpec = field(default_factory=CommSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    sched: SchedulerSpec = field(default_factory=SchedulerSpec)
    failures: list[FailureEvent] = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.sched.activation_capacity or self.cfg.pp + 2


def scenario_from_mapping(data: dict) -> Scenario:
    sc = Scenario()
    sc.name = str(data.get("name", sc.name))
    sc.seed = int(data.get("seed", sc.seed))
    sc.iterations = int(data.get("iterations", sc.iterations))
    sc.policy = str(data.get("policy", sc.policy))
    if sc.policy not in POLICIES:
        raise ValueError(f"unknown policy {sc.policy!r}")

    cluster = data.get("cluster", {})
    sc.nodes = int(cluster.get("nodes", sc.nodes))
    sc.devices_per_node = int(cluster.get("devices_per_node", sc.devices_per_node))
    sc.intra_bw = float(cluster.get("intra_bw_gbps", sc.intra_bw / GIB)) * GIB
    sc.inter_bw = float(cluster.get("inter_bw_gbps", sc.inter_bw / GIB)) * GIB

    par = data.get("parallelism", {})
    tp = int(par.get("tp", 4))
    dp = int(par.get("dp", 2))
    pp = int(par.get("pp", 2))
    schedule = str(par.get("schedule", "1f1b")).lower()
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    if "layer_partition" in par:
        partition = [int(x) for x in par["layer_partition"]]
    else:
        layers = int(par.get("layers", 8 * pp))
        base, extra = divmod(layers, pp)
        partition = [base + (1 if i < extra else 0) for i in range(pp)]
    sc.cfg = ParallelismConfig(tp=tp, dp=dp, pp=pp, schedule=schedule, layer_partition=partition)

    wl = data.get("workload", {})
    spec = WorkloadSpec(
        token_budget=int(wl.get("token_budget", 4096)),
        micro_batches=int(wl.get("micro_batches", 8)),
    )
    doc = wl.get("doc_lengths", {"kind": "lognormal"})
    spec.kind = str(doc.get("kind", "lognormal"))
    if spec.kind == "fixed":
        spec.length = int(doc.get("length", spec.token_budget))
    elif spec.kind == "lognormal":
        spec.mean_log = float(doc.get("mean", 7.0))
        spec.sigma_log = float(doc.get("sigma", 0.8))
    elif spec.kind == "trace":
        if "lengths" in doc:
            spec.trace_lengths = tuple(int(x) for x in doc["lengths"])
        else:
            text = Path(doc["path"]).read_text()
            spec.trace_lengths = tuple(int(x) for x in text.split())
        if not spec.trace_lengths:
            raise ValueError("trace workload has no lengths")
    else:
        raise ValueError(f"unknown doc length source {spec.kind!r}")
    sc.workload = spec

    cm = data.get("cost_model", {})
    sc.model = CostModel(
        alpha=float(cm.get("alpha", 2e-6)),
        beta=float(cm.get("beta", 5e-10)),
    )
    if "chunk_ratios" in cm:
        sc.model.chunk_ratios.update({k: float(v) for k, v in cm["chunk_ratios"].items()})

    comm = data.get("comm", {})
    sc.comm = CommSpec(
        hidden_bytes_per_token=float(comm.get("hidden_bytes_per_token", 8192.0)),
        layer_bytes=float(comm.get("layer_bytes_mib", 256.0)) * 2**20,
        p2p_optimized=bool(comm.get("p2p_optimized", True)),
    )

    det = data.get("detector", {})
    sc.detector = DetectorSpec(
        heartbeat_interval_s=float(det.get("heartbeat_interval_s", 1.0)),
        heartbeat_miss_threshold=int(det.get("heartbeat_miss_threshold", 3)),
        window=int(det.get("window", 20)),
        kappa=float(det.get("kappa", 3.0)),
        escalation_factor=float(det.get("escalation_factor", 1.25)),
        filter_cost_s=float(det.get("filter_cost_s", 0.05)),
        validation_cost_s=float(det.get("validation_cost_s", 3.0)),
        measurement_noise=float(det.get("measurement_noise", 0.01)),
    )

    sch = data.get("scheduler", {})
    sc.sched = SchedulerSpec(
        k_min=int(sch.get("k_min", 2)),
        delta=int(sch.get("delta", 0)),
        min_layers=int(sch.get("min_layers", 1)),
        activation_capacity=int(sch.get("activation_capacity", 0)),
        group_rebuild_s=float(sch.get("group_rebuild_s", 2.0)),
    )

    for ev in data.get("failures", []):
        kind = str(ev["kind"])
        link = tuple(int(x) for x in ev["link"]) if "link" in ev else None
        sc.failures.append(FailureEvent(
            kind=kind,
            start=float(ev["start"]),
            device=int(ev["device"]) if "device" in ev else None,
            link=link,
            end=float(ev["end"]) if "end" in ev else None,
            severity=float(ev["severity"]) if "severity" in ev else None,
        ))
    sc.failures.sort(key=lambda e: e.start)
    return sc


def load_scenario(path: str | Path) -> Scenario:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"scenario file {path} is not a mapping")
    return scenario_from_mapping(data)


class _DocSource:
    """Deterministic per-iteration document stream."""

    def __init__(self, spec: WorkloadSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng([seed, 0])
        self.cursor = 0

    def micro_batches(self) -> list[MicroBatch]:
        spec = self.spec
        target = spec.micro_batches * spec.token_budget
        docs: list[int] = []
        total = 0
        while total < target:
            docs.append(self._next_length())
            total += docs[-1]
        packed = pack_sequences(docs, spec.token_budget)
        return packed[: spec.micro_batches]

    def _next_length(self) -> int:
        spec = self.spec
        if spec.kind == "fixed":
            return min(spec.length or spec.token_budget, spec.token_budget)
        if spec.kind == "trace":
            val = spec.trace_lengths[self.cursor % len(spec.trace_lengths)]
            self.cursor += 1
            return max(1, min(val, spec.token_budget))
        raw = self.rng.lognormal(spec.mean_log, spec.sigma_log)
        return int(max(1.0, min(round(raw), spec.token_budget)))


def _fmt(value: float) -> str:
    return f"{value:.9g}"


@dataclass
class RunResult:
    scenario: Scenario
    records: list[IterationRecord]
    plans: list[tuple[int, AdaptationPlan]]
    summary: dict
    iteration_rows: list[dict]

    @property
    def aborted(self) -> bool:
        return self.summary["aborted_at"] is not None


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None) -> RunResult:
    """Execute the detect -> plan -> simulate loop for every iteration.

    Detector filter/validation charges and reconfiguration costs are added
    to the wall clock of the iteration in which they occur, so overhead
    claims are measurable from the outputs.
    """
    cfg = scenario.cfg.copy()
    state = build_cluster(
        scenario.nodes, scenario.devices_per_node, cfg, scenario.intra_bw, scenario.inter_bw
    )
    violations = validate_cluster(state, cfg)
    if violations:
        raise ValueError("invalid scenario: " + "; ".join(violations))

    policy: Policy = make_policy(scenario.policy)
    detector = DetectorState(
        window=scenario.detector.window,
        kappa=scenario.detector.kappa,
        escalation_factor=scenario.detector.escalation_factor,
        filter_enabled=policy.filter_enabled,
        filter_cost_s=scenario.detector.filter_cost_s,
        validation_cost_s=scenario.detector.validation_cost_s,
    )
    monitor = HeartbeatMonitor(HeartbeatConfig(
        interval_s=scenario.detector.heartbeat_interval_s,
        miss_threshold=scenario.detector.heartbeat_miss_threshold,
    ))
    docs = _DocSource(scenario.workload, scenario.seed)
    noise_rng = np.random.default_rng([scenario.seed, 1])
    sigma = scenario.detector.measurement_noise

    original_groups = dict(state.tp_groups)
    original_cfg = cfg.copy()
    known_speeds: dict[int, float] = {}
    known_links: dict[tuple[int, int], float] = {}
    live = AdaptationPlan()
    pending_fail_stop = []
    confirmed = None
    now = 0.0
    wall = 0.0
    charged = {"filter_s": 0.0, "validation_s": 0.0, "reconfig_s": 0.0}
    records: list[IterationRecord] = []
    rows: list[dict] = []
    plans: list[tuple[int, AdaptationPlan]] = []
    fail_stop_detections: list[dict] = []
    fail_slow_log: list[dict] = []
    aborted_at = None
    stalled_iterations = 0
    iteration_started_at: dict[int, float] = {}

    slow_events = [e for e in scenario.failures if e.kind == KIND_FAIL_SLOW_COMPUTE]
    amp = _AmplificationTracker(scenario, original_cfg, original_groups) \
        if len(slow_events) == 1 else None

    for k in range(scenario.iterations):
        state = apply_failures(state, scenario.failures, now)
        for decision in monitor.scan(state, now):
            pending_fail_stop.append(decision)
            fail_stop_detections.append({
                "node": decision.node_id,
                "devices": list(decision.device_ids),
                "failed_at": decision.failed_at,
                "declared_at": decision.declared_at,
                "latency_s": decision.declared_at - decision.failed_at,
            })
        mbs = docs.micro_batches()
        charges = 0.0
        alarms: list[str] = []
        # a fail-stop that heartbeats have not yet declared stalls execution
        # until the declaration tick: wall time burns, no samples complete
        undeclared = [
            monitor.declare_time(dev.failed_at)
            for dev in state.devices
            if dev.status == FAIL_STOP and dev.failed_at is not None
            and dev.id not in monitor.declared
        ]
        if undeclared and _has_dead_active_stage(state, cfg):
            stall_until = max(now, min(undeclared))
            stall = stall_until - now
            now = stall_until
            wall += stall
            rows.append({
                "iteration": k, "observed_s": stall, "predicted_s": 0.0,
                "alarms": "stall:fail_stop",
                "active_devices": _active_count(state), "migrations": 0,
                "wall_s": stall,
            })
            stalled_iterations += 1
            continue
        try:
            if pending_fail_stop or confirmed is not None:
                ctx = PlanningContext(
                    state=state, cfg=cfg, model=scenario.model, micro_batches=mbs,
                    comm=scenario.comm, dp_counts=live.dp_assignment,
                    known_speeds=known_speeds, live_plan=live,
                    new_fail_stop=list(pending_fail_stop), confirmed=confirmed,
                    k_min=scenario.sched.k_min, delta=scenario.sched.delta,
                    capacity=scenario.capacity, min_layers=scenario.sched.min_layers,
                    layer_bytes=scenario.comm.layer_bytes,
                    group_rebuild_s=scenario.sched.group_rebuild_s,
                )
                plan = policy.plan(ctx)
                if plan is not None:
                    # plans are recomputed from scratch: an accepted plan
                    # replaces the live migration set even when it is empty
                    state, cfg = apply_plan(state, cfg, plan)
                    live = AdaptationPlan(
                        migrations=plan.migrations,
                        dp_assignment=plan.dp_assignment or live.dp_assignment,
                        stage_orders=plan.stage_orders,
                    )
                    charges += plan.reconfig_cost_s
                    charged["reconfig_s"] += plan.reconfig_cost_s
                    plans.append((k, plan))
                    detector.reset_series()
                    alarms.append("adapt:" + plan.reason)
                pending_fail_stop = []
                confirmed = None
            record = simulate_iteration(
                state, cfg, mbs, scenario.model, live,
                comm=scenario.comm, iteration=k, capacity=scenario.capacity,
            )
            known = known_cluster_view(state, known_speeds, known_links)
            reference = simulate_iteration(
                known, cfg, mbs, scenario.model, live,
                comm=scenario.comm, iteration=k,
            )
        except (StrandedWorkload, SimulationError) as exc:
            aborted_at = k
            rows.append({
                "iteration": k, "observed_s": 0.0, "predicted_s": 0.0,
                "alarms": "aborted:" + type(exc).__name__,
                "active_devices": _active_count(state), "migrations": 0,
                "wall_s": 0.0,
            })
            break
        record.predicted_healthy_time = reference.observed_time
        record.alarms = alarms

        if policy.detector_enabled:
            noisy = dataclasses.replace(record, stage_cost={
                key: value * (1.0 + sigma * float(noise_rng.standard_normal()))
                for key, value in sorted(record.stage_cost.items())
            })
            outcome = detector.observe(
                noisy, reference.observed_time,
                reference_stage_cost=reference.stage_cost,
            )
            charges += outcome.charged_s
            record.alarms.extend(outcome.alarms)
            if outcome.validation is not None and outcome.validation.confirmed:
                confirmed = outcome.validation
                for key in sorted(confirmed.degraded_stages):
                    entry = {
                        "kind": "fail_slow",
                        "stage": list(key),
                        "confirmed_iteration": k,
                        "severity_estimate": _absolute_severity(record, key),
                    }
                    fail_slow_log.append(entry)
                    for dev_id in state.tp_groups.get(key, ()):
                        true = state.devices[dev_id].speed
                        est = true * (1.0 + sigma * float(noise_rng.standard_normal()))
                        known_speeds[dev_id] = float(min(1.0, max(0.01, est)))
                for link in sorted(confirmed.degraded_links):
                    factor = state.link_factors.get(link, confirmed.degraded_links[link])
                    known_links[link] = factor
                    fail_slow_log.append({
                        "kind": "fail_slow_comm",
                        "link": list(link),
                        "confirmed_iteration": k,
                        "severity_estimate": factor,
                    })

        wall_iter = record.observed_time + charges
        charged["filter_s"] = detector.stats.filter_cost_s
        charged["validation_s"] = detector.stats.validation_cost_s
        iteration_started_at[k] = now
        now += wall_iter
        wall += wall_iter
        records.append(record)
        rows.append({
            "iteration": k,
            "observed_s": record.observed_time,
            "predicted_s": record.predicted_healthy_time,
            "alarms": ";".join(record.alarms),
            "active_devices": _active_count(state),
            "migrations": record.migrations,
            "wall_s": wall_iter,
        })
        if amp is not None:
            amp.observe(k, now, state, record, mbs, slow_events[0])

    completed = len(records)
    samples = completed * scenario.workload.micro_batches
    summary = {
        "scenario": scenario.name,
        "policy": scenario.policy,
        "seed": scenario.seed,
        "iterations_requested": scenario.iterations,
        "iterations_completed": completed,
        "micro_batches_per_iteration": scenario.workload.micro_batches,
        "aborted_at": aborted_at,
        "wall_time_s": wall,
        "avg_iteration_s": wall / completed if completed else 0.0,
        "throughput_samples_per_s": samples / wall if wall > 0 else 0.0,
        "false_alarms": detector.stats.false_alarms,
        "stats": {
            "candidates": detector.stats.candidates,
            "filter_checks": detector.stats.filter_checks,
            "benign_filtered": detector.stats.benign_filtered,
            "escalations": detector.stats.escalations,
            "validations": detector.stats.validations,
            "stalled_iterations": stalled_iterations,
        },
        "charged": charged,
        "detections": {
            "fail_stop": fail_stop_detections,
            "fail_slow": _pair_fail_slow(
                scenario, fail_slow_log, iteration_started_at, original_groups
            ),
        },
        "idle_amplification": amp.result() if amp is not None else None,
    }
    result = RunResult(scenario, records, plans, summary, rows)
    if out_dir is not None:
        emit_outputs(result, out_dir)
    return result


def known_cluster_view(state: ClusterState, known_speeds, known_links) -> ClusterState:
    out = state.copy()
    for dev in out.devices:
        if dev.status == FAIL_STOP:
            continue
        dev.speed = min(1.0, known_speeds.get(dev.id, 1.0))
    out.link_factors = dict(known_links)
    return out


def _active_count(state: ClusterState) -> int:
    return sum(1 for d in state.devices if d.status not in (FAIL_STOP, STANDBY))


def _has_dead_active_stage(state: ClusterState, cfg: ParallelismConfig) -> bool:
    """True when some still-active TP group contains a stopped device, i.e.
    the pipeline cannot run as currently laid out."""
    for group in state.tp_groups.values():
        if group and any(state.devices[d].status == FAIL_STOP for d in group):
            return True
    return False


def _absolute_severity(record: IterationRecord, key) -> float:
    ref = record.stage_cost_reference.get(key, 0.0)
    act = record.stage_cost.get(key, 0.0)
    if act <= 0 or ref <= 0:
        return 1.0
    return ref / act


def _pair_fail_slow(scenario, fail_slow_log, iteration_started_at, original_groups):
    """Attach detection latency in iterations to each injected fail-slow."""
    out = []
    for ev in scenario.failures:
        if ev.kind == KIND_FAIL_STOP:
            continue
        first_affected = None
        for k in sorted(iteration_started_at):
            if ev.active(iteration_started_at[k]):
                first_affected = k
                break
        match = None
        for entry in fail_slow_log:
            if ev.kind == KIND_FAIL_SLOW_COMM and entry.get("kind") == "fail_slow_comm":
                if tuple(entry["link"]) == (min(ev.link), max(ev.link)):
                    match = entry
                    break
            elif ev.kind == KIND_FAIL_SLOW_COMPUTE and entry.get("kind") == "fail_slow":
                key = tuple(entry["stage"])
                if ev.device in original_groups.get(key, ()):
                    match = entry
                    break
        item = {
            "kind": ev.kind,
            "target": ev.device if ev.device is not None else list(ev.link),
            "injected_at": ev.start,
            "first_affected_iteration": first_affected,
            "confirmed_iteration": match["confirmed_iteration"] if match else None,
            "severity_estimate": match["severity_estimate"] if match else None,
        }
        if match is not None and first_affected is not None:
            item["latency_iterations"] = match["confirmed_iteration"] - first_affected + 1
        else:
            item["latency_iterations"] = None
        out.append(item)
    return out


class _AmplificationTracker:
    """Per-dimension additional idle time for single-fail-slow scenarios.

    Devices are bucketed relative to the faulty one: its TP group peers, the
    other stages of its replica, and the other replicas.  Additional idle is
    measured against a healthy reference simulation of the same workload and
    normalized by the faulty device's injected slowdown duration.
    """

    def __init__(self, scenario: Scenario, cfg: ParallelismConfig, groups):
        self.scenario = scenario
        self.cfg = cfg
        self.groups = groups
        self.extra = {"tp": 0.0, "pp": 0.0, "dp": 0.0}
        self.denom = 0.0
        self.device = None
        self.home = None

    def _locate(self, device: int):
        for key, group in self.groups.items():
            if device in group:
                return key
        return None

    def observe(self, k, now, state, record, mbs, event):
        if not event.active(state.now):
            return
        if self.device is None:
            self.device = event.device
            self.home = self._locate(event.device)
        if self.home is None:
            return
        healthy = build_cluster(
            self.scenario.nodes, self.scenario.devices_per_node, self.cfg,
            self.scenario.intra_bw, self.scenario.inter_bw,
        )
        ref = simulate_iteration(
            healthy, self.cfg, mbs, self.scenario.model, None,
            comm=self.scenario.comm, iteration=k,
        )
        d_home, s_home = self.home
        for dev_id, idle in record.per_device_idle.items():
            if dev_id == self.device:
                continue
            ref_idle = ref.per_device_idle.get(dev_id)
            if ref_idle is None:
                # device standby'd or excluded: all of its time is idle now
                ref_idle = ref.observed_time - ref.per_device_busy.get(dev_id, 0.0)
            delta = idle - ref_idle
            key = self._locate(dev_id)
            if key is None:
                continue
            if key == self.home:
                self.extra["tp"] += delta
            elif key[0] == d_home:
                self.extra["pp"] += delta
            else:
                self.extra["dp"] += delta
        busy_ref = ref.per_device_busy.get(self.device, 0.0)
        self.denom += busy_ref * (1.0 / event.severity - 1.0)

    def result(self):
        if self.denom <= 0:
            return None
        return {level: self.extra[level] / self.denom for level in ("tp", "pp", "dp")}


def emit_outputs(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {out} is not writable: {exc}") from exc

    it_path = out / "iterations.csv"
    lines = [ITERATIONS_CSV_HEADER]
    for row in result.iteration_rows:
        lines.append(",".join([
            str(row["iteration"]),
            _fmt(row["observed_s"]),
            _fmt(row["predicted_s"]),
            row["alarms"],
            str(row["active_devices"]),
            str(row["migrations"]),
        ]))
    it_path.write_text("\n".join(lines) + "\n")

    ad_path = out / "adaptations.jsonl"
    plan_lines = []
    for k, plan in result.plans:
        plan_lines.append(json.dumps({
            "iteration": k,
            "reason": plan.reason,
            "tp_subgroups": {
                f"{d},{s}": {"members": list(members), "standby": list(standby)}
                for (d, s), (members, standby) in sorted(plan.tp_subgroups.items())
            },
            "excluded_groups": [list(key) for key in plan.excluded_groups],
            "layer_partition": plan.layer_partition,
            "dp_assignment": plan.dp_assignment,
            "migrations": [[m.mb, m.stage, m.source, m.executor] for m in plan.migrations],
            "reconfig_cost_s": plan.reconfig_cost_s,
            "predicted_makespan_s": plan.predicted_makespan_s,
        }, sort_keys=True))
    ad_path.write_text("\n".join(plan_lines) + ("\n" if plan_lines else ""))

    sm_path = out / "summary.json"
    sm_path.write_text(json.dumps(result.summary, sort_keys=True, indent=2) + "\n")

    plot_dir = out / "plotdata"
    plot_dir.mkdir(exist_ok=True)
    tp_path = plot_dir / "throughput.csv"
    mb = result.scenario.workload.micro_batches
    tp_lines = [THROUGHPUT_CSV_HEADER]
    for row in result.iteration_rows:
        wall = row["wall_s"]
        rate = mb / wall if wall > 0 else 0.0
        tp_lines.append(f"{row['iteration']},{_fmt(wall)},{_fmt(rate)}")
    tp_path.write_text("\n".join(tp_lines) + "\n")

    return {
        "iterations": it_path,
        "adaptations": ad_path,
        "summary": sm_path,
        "throughput": tp_path,
    }
