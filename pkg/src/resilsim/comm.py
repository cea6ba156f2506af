"""Communication cost functions: stage-boundary P2P and DP ring all-reduce.

Latency terms are deliberately omitted; the model is bandwidth-dominated and
reasons in copies and volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cluster import ClusterState


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class LinkModel:
    """Base bandwidths plus multiplicative per-link degradation factors."""

    intra_bw: float  # bytes/s, NVLink-class
    inter_bw: float  # bytes/s, InfiniBand-class
    inter_factors: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValueError("bandwidths must be positive")

    @classmethod
    def from_cluster(cls, state: ClusterState) -> "LinkModel":
        return cls(
            intra_bw=state.intra_bw,
            inter_bw=state.inter_bw,
            inter_factors=dict(state.link_factors),
        )

    def inter(self, node_a: int | None = None, node_b: int | None = None) -> float:
        if node_a is None or node_b is None:
            return self.inter_bw
        key = (min(node_a, node_b), max(node_a, node_b))
        return self.inter_bw * self.inter_factors.get(key, 1.0)

    def worst_inter(self) -> float:
        factor = min(self.inter_factors.values(), default=1.0)
        return self.inter_bw * factor


@dataclass
class CommSpec:
    """Byte-level knobs for costing stage boundaries and reconfiguration."""

    hidden_bytes_per_token: float = 8192.0
    layer_bytes: float = 256.0 * 2**20
    p2p_optimized: bool = True

    def boundary_tensor_bytes(self, token_budget: int) -> float:
        return self.hidden_bytes_per_token * token_budget


def p2p_cost(
    tensor_bytes: float,
    sender_tp: int,
    receiver_tp: int,
    optimized: bool,
    links: LinkModel,
    nodes: tuple[int, int] | None = None,
) -> tuple[float, float]:
    """Cross-node transfer between TP groups of possibly different degrees.

    Unoptimized, every receiver rank pulls the full tensor over the inter-node
    fabric.  Optimized, the tensor is scattered into max(sender, receiver)
    chunks so one full copy crosses nodes, then reassembled by a faster
    intra-node all-gather.  Returns (seconds, cross_node_bytes).
    """
    if not _is_power_of_two(sender_tp) or not _is_power_of_two(receiver_tp):
        raise ValueError("TP degrees must be powers of two")
    inter = links.inter(*nodes) if nodes else links.inter()
    if not optimized:
        cross = receiver_tp * tensor_bytes
        return cross / inter, cross
    n = max(sender_tp, receiver_tp)
    gather = tensor_bytes * (n - 1) / (n * links.intra_bw)
    return tensor_bytes / inter + gather, tensor_bytes


def allreduce_cost(
    nbytes: float,
    group_size: int,
    links: LinkModel,
    nodes: tuple[int, ...] = (),
) -> float:
    """Ring all-reduce: 2 * bytes * (n-1) / (n * slowest participating link)."""
    if group_size <= 1:
        return 0.0
    if nodes and len(set(nodes)) == 1:
        bw = links.intra_bw
    else:
        bw = links.inter_bw
        ring = list(nodes)
        if ring:
            for a, b in zip(ring, ring[1:] + ring[:1]):
                if a != b:
                    bw = min(bw, links.inter(a, b))
        else:
            bw = links.worst_inter()
    return 2.0 * nbytes * (group_size - 1) / (group_size * bw)
