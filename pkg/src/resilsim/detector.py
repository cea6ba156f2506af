"""Failure diagnosis: hierarchical heartbeats for fail-stop, and a
change-point screen + workload-aware filter + validation for fail-slow.

The screen flags iteration times that depart from the trailing window; the
filter then compares the observed time against the analytically expected
time for the *current* workload, so fluctuations caused by sequence-length
variability are discarded cheaply instead of triggering a costly validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median

from .cluster import FAIL_STOP, ClusterState, IterationRecord

BENIGN = "benign"
ESCALATE = "escalate"


@dataclass
class HeartbeatConfig:
    interval_s: float = 1.0
    miss_threshold: int = 3

    def __post_init__(self):
        if self.interval_s <= 0:
            raise ValueError("heartbeat interval must be positive")
        if self.miss_threshold < 1:
            raise ValueError("miss threshold must be >= 1")


@dataclass
class FailStopDecision:
    node_id: int
    device_ids: tuple[int, ...]
    failed_at: float
    declared_at: float


class HeartbeatMonitor:
    """Node-local liveness aggregation with a central fail-stop decision log.

    A device whose heartbeats stop at t0 is declared failed at the first
    heartbeat tick >= t0 + miss_threshold * interval; devices of one node
    failing together produce a single node-level decision.
    """

    def __init__(self, config: HeartbeatConfig | None = None):
        self.config = config or HeartbeatConfig()
        self.declared: set[int] = set()

    def declare_time(self, failed_at: float) -> float:
        cfg = self.config
        earliest = failed_at + cfg.miss_threshold * cfg.interval_s
        ticks = math.ceil(earliest / cfg.interval_s - 1e-12)
        return ticks * cfg.interval_s

    def scan(self, state: ClusterState, t: float) -> list[FailStopDecision]:
        by_node: dict[int, list[tuple[int, float, float]]] = {}
        for dev in state.devices:
            if dev.status != FAIL_STOP or dev.id in self.declared:
                continue
            if dev.failed_at is None:
                continue
            declared_at = self.declare_time(dev.failed_at)
            if declared_at <= t:
                by_node.setdefault(dev.node_id, []).append(
                    (dev.id, dev.failed_at, declared_at)
                )
        decisions = []
        for node_id in sorted(by_node):
            entries = sorted(by_node[node_id])
            ids = tuple(e[0] for e in entries)
            self.declared.update(ids)
            decisions.append(FailStopDecision(
                node_id=node_id,
                device_ids=ids,
                failed_at=min(e[1] for e in entries),
                declared_at=max(e[2] for e in entries),
            ))
        return decisions


def heartbeat_scan(monitor: HeartbeatMonitor, state: ClusterState, t: float) -> set[int]:
    """Newly-declared fail-stop devices as of time t."""
    out: set[int] = set()
    for decision in monitor.scan(state, t):
        out.update(decision.device_ids)
    return out


def detect_change_point(series: list[float], window: int = 20, kappa: float = 3.0) -> int | None:
    """Median/MAD screen over the trailing window, excluding the newest point.

    Returns the index of the newest point when it deviates from the window
    median by more than kappa * MAD, at most one candidate per call.
    """
    if len(series) < window + 1:
        return None
    win = series[-(window + 1):-1]
    med = median(win)
    mad = median(abs(x - med) for x in win)
    x = series[-1]
    if abs(x - med) > kappa * mad:
        return len(series) - 1
    return None


def filter_candidate(observed: float, predicted: float, escalation_factor: float = 1.25) -> str:
    """Escalate only when the observed time exceeds the expected time for the
    current workload by more than the escalation factor."""
    if predicted <= 0:
        return ESCALATE
    return ESCALATE if observed > escalation_factor * predicted else BENIGN


@dataclass
class ValidationResult:
    confirmed: bool
    degraded_stages: dict[tuple[int, int], float]  # (replica, stage) -> severity estimate
    degraded_links: dict[tuple[int, int], float]   # (node, node) -> severity estimate
    cost_s: float


def validate(
    stage_times: dict[tuple[int, int], tuple[float, float]],
    link_ratios: dict[tuple[int, int], float] | None = None,
    threshold: float = 1.25,
    cost_s: float = 3.0,
) -> ValidationResult:
    """Confirm and localize degradation from measured chunk times.

    ``stage_times`` maps (replica, stage) to (measured, expected) seconds;
    stages whose measured time exceeds threshold * expected are flagged with
    severity estimate expected / measured.  Link ratios (measured / expected
    transfer time) localize communication degradation the same way.  The
    validation cost is charged whether or not anything is confirmed.
    """
    stages: dict[tuple[int, int], float] = {}
    for key in sorted(stage_times):
        measured, expected = stage_times[key]
        if expected <= 0 or measured <= 0:
            continue
        if measured > threshold * expected:
            stages[key] = expected / measured
    links: dict[tuple[int, int], float] = {}
    for key in sorted(link_ratios or {}):
        ratio = link_ratios[key]
        if ratio > threshold:
            links[key] = 1.0 / ratio
    return ValidationResult(
        confirmed=bool(stages or links),
        degraded_stages=stages,
        degraded_links=links,
        cost_s=cost_s,
    )


@dataclass
class DetectorStats:
    candidates: int = 0
    filter_checks: int = 0
    benign_filtered: int = 0
    escalations: int = 0
    validations: int = 0
    false_alarms: int = 0
    filter_cost_s: float = 0.0
    validation_cost_s: float = 0.0


@dataclass
class DetectorOutcome:
    candidate: bool = False
    verdict: str | None = None
    validation: ValidationResult | None = None
    charged_s: float = 0.0
    alarms: list[str] = field(default_factory=list)


@dataclass
class DetectorState:
    """Fail-slow detection state owned by the simulation loop."""

    window: int = 20
    kappa: float = 3.0
    escalation_factor: float = 1.25
    filter_enabled: bool = True
    filter_cost_s: float = 0.05
    validation_cost_s: float = 3.0
    series: list[float] = field(default_factory=list)
    stats: DetectorStats = field(default_factory=DetectorStats)

    def reset_series(self) -> None:
        self.series.clear()

    def observe(
        self,
        record: IterationRecord,
        predicted: float,
        reference_stage_cost: dict[tuple[int, int], float] | None = None,
    ) -> DetectorOutcome:
        """Screen -> filter -> validate pipeline for one iteration.

        Benign candidates are removed from the series so they do not perturb
        later windows; unconfirmed escalations are removed too, with the
        validation cost still charged.  ``reference_stage_cost`` lets the
        caller validate against the expected times for the already-known
        cluster state so only new degradation is confirmed.

        While the window is still refilling (cold start or right after an
        adaptation reset) the screen cannot fire, so the workload-aware
        filter runs directly each iteration; otherwise every reconfiguration
        would leave a window-long blind spot.
        """
        out = DetectorOutcome()
        self.series.append(record.observed_time)
        idx = detect_change_point(self.series, self.window, self.kappa)
        candidate = idx is not None
        refill_check = (
            not candidate and self.filter_enabled and len(self.series) <= self.window
        )
        if not candidate and not refill_check:
            return out
        if candidate:
            out.candidate = True
            self.stats.candidates += 1
            out.alarms.append("candidate")
        if self.filter_enabled:
            out.charged_s += self.filter_cost_s
            self.stats.filter_cost_s += self.filter_cost_s
            self.stats.filter_checks += 1
            verdict = filter_candidate(
                record.observed_time, predicted, self.escalation_factor
            )
            out.verdict = verdict
            if verdict == BENIGN:
                if candidate:
                    self.stats.benign_filtered += 1
                    self.series.pop()
                    out.alarms.append("benign")
                return out
        else:
            out.verdict = ESCALATE
        self.stats.escalations += 1
        out.alarms.append("escalate")
        reference = reference_stage_cost or record.stage_cost_reference
        measured = {
            key: (record.stage_cost[key], reference.get(key, 0.0))
            for key in record.stage_cost
        }
        result = validate(
            measured,
            record.link_ratio,
            threshold=self.escalation_factor,
            cost_s=self.validation_cost_s,
        )
        self.stats.validations += 1
        self.stats.validation_cost_s += result.cost_s
        out.charged_s += result.cost_s
        out.validation = result
        if not result.confirmed:
            self.stats.false_alarms += 1
            self.series.pop()
            out.alarms.append("unconfirmed")
        else:
            targets = [f"d{d}s{s}" for d, s in sorted(result.degraded_stages)]
            targets += [f"link{a}-{b}" for a, b in sorted(result.degraded_links)]
            out.alarms.append("confirmed:" + "+".join(targets))
        return out
