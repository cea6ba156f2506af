"""Sequence packing and the micro-batch execution cost model.

A packed micro-batch with token budget N and document lengths l_1..l_k costs

    t = chunk_ratio * layers * (alpha * N + beta * sum_i l_i^2) / speed

The linear term covers MLP-style work, the quadratic term covers
block-diagonal self-attention, so iteration time varies with how the budget
is split into documents even though N is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import MicroBatch

CHUNK_F = "F"
CHUNK_B = "B"
CHUNK_W = "W"
CHUNK_BW = "BW"  # merged backward used by the 1F1B schedule
CHUNK_ALLREDUCE = "AR"

DEFAULT_CHUNK_RATIOS = {CHUNK_F: 1.0, CHUNK_B: 1.0, CHUNK_W: 1.0}


@dataclass
class CostModel:
    alpha: float  # seconds per token
    beta: float   # seconds per token^2
    chunk_ratios: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CHUNK_RATIOS)
    )

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("cost coefficients must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("cost model needs at least one non-zero coefficient")
        for kind in (CHUNK_F, CHUNK_B, CHUNK_W):
            if self.chunk_ratios.get(kind, 0.0) <= 0:
                raise ValueError(f"chunk ratio for {kind} must be positive")

    def ratio(self, kind: str) -> float:
        if kind == CHUNK_BW:
            return self.chunk_ratios[CHUNK_B] + self.chunk_ratios[CHUNK_W]
        return self.chunk_ratios[kind]


def pack_sequences(doc_lengths, token_budget: int) -> list[MicroBatch]:
    """First-fit-decreasing packing into bins of exactly ``token_budget`` tokens.

    Residual space in each bin is filled by a synthetic padding document so
    every micro-batch sums to the budget; padding is charged at full cost.
    """
    lengths = [int(l) for l in doc_lengths]
    for l in lengths:
        if l <= 0:
            raise ValueError(f"document length must be positive, got {l}")
        if l > token_budget:
            raise ValueError(f"document of {l} tokens exceeds budget {token_budget}")
    bins: list[list[int]] = []
    remaining: list[int] = []
    for l in sorted(lengths, reverse=True):
        for i, space in enumerate(remaining):
            if l <= space:
                bins[i].append(l)
                remaining[i] -= l
                break
        else:
            bins.append([l])
            remaining.append(token_budget - l)
    out = []
    for i, (docs, space) in enumerate(zip(bins, remaining)):
        if space > 0:
            docs = docs + [space]
        out.append(MicroBatch(id=i, doc_lengths=tuple(docs), token_budget=token_budget))
    return out


def quad_load(mb: MicroBatch) -> int:
    """Sum of squared document lengths, padding included."""
    return sum(l * l for l in mb.doc_lengths)


def predict_chunk_time(
    mb: MicroBatch,
    kind: str,
    model: CostModel,
    layers_on_stage: int,
    device_speed: float,
) -> float:
    if device_speed <= 0:
        raise ValueError("cannot schedule onto a stopped device (speed <= 0)")
    base = model.alpha * mb.token_budget + model.beta * quad_load(mb)
    return model.ratio(kind) * layers_on_stage * base / device_speed


def fit_cost_model(
    samples: list[tuple[MicroBatch, float]],
    chunk_ratios: dict[str, float] | None = None,
) -> tuple[CostModel, float]:
    """Least-squares fit of (alpha, beta) from (micro-batch, measured F-time) pairs.

    Returns the fitted model and the in-sample MAPE.  With a fixed token
    budget the linear column is constant, so at least two distinct quadratic
    loads are required to identify beta.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples to fit the cost model")
    n = np.array([mb.token_budget for mb, _ in samples], dtype=float)
    q = np.array([quad_load(mb) for mb, _ in samples], dtype=float)
    t = np.array([obs for _, obs in samples], dtype=float)
    if np.ptp(q) == 0 and np.ptp(n) == 0:
        raise ValueError("unidentifiable beta: all samples share the same quad load")
    design = np.column_stack([n, q])
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    alpha, beta = float(coef[0]), float(coef[1])
    # Noise can push one coefficient slightly negative; refit the other alone.
    if alpha < 0:
        alpha = 0.0
        beta = float(np.dot(q, t) / np.dot(q, q))
    elif beta < 0:
        beta = 0.0
        alpha = float(np.dot(n, t) / np.dot(n, n))
    pred = alpha * n + beta * q
    mape = float(np.mean(np.abs(pred - t) / t))
    model = CostModel(alpha=alpha, beta=beta,
                      chunk_ratios=dict(chunk_ratios or DEFAULT_CHUNK_RATIOS))
    return model, mape
