"""Desk-scale simulator for resilient hybrid-parallel training: fault
injection, workload-aware failure detection, and progressive TP/PP/DP
adaptation policies."""

from .cluster import (
    ClusterState,
    Device,
    FailureEvent,
    IterationRecord,
    MicroBatch,
    ParallelismConfig,
    apply_failures,
    build_cluster,
    split_micro_batches,
    validate_cluster,
)
from .comm import CommSpec, LinkModel, allreduce_cost, p2p_cost
from .detector import (
    DetectorState,
    HeartbeatConfig,
    HeartbeatMonitor,
    detect_change_point,
    filter_candidate,
    heartbeat_scan,
    validate,
)
from .harness import (
    RunResult,
    Scenario,
    emit_outputs,
    load_scenario,
    run_scenario,
    scenario_from_mapping,
)
from .pipeline import (
    ChunkDag,
    ChunkVertex,
    build_dag,
    critical_path,
    simulate_iteration,
)
from .policies import greyhound_adapt, make_policy, recycle_adapt, resihp_adapt
from .scheduler import (
    AdaptationPlan,
    Migration,
    ProgressTable,
    candidate_tp_degrees,
    evaluate_plan,
    plan_migration,
    reconfig_cost,
    repartition_layers,
    select_tp_subgroup,
)
from .workload import (
    CostModel,
    fit_cost_model,
    pack_sequences,
    predict_chunk_time,
    quad_load,
)

__version__ = "0.1.0"
