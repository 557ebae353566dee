"""Closed-loop compression driver: selection, statistics, compensation.

Blocks are processed strictly in graph order; each block's statistics come
from the graph with all earlier planned blocks already compressed (and, when
requested, compensated), so the regression always sees the activations the
consumer will actually receive.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import accumulate_gram, input_feature_norms
from .compensation import RidgeConfig, merge_block, naive_reduce_block
from .errors import ArgumentError
from .model import AttentionBlock, BlockGraph, ConvBlock, DenseBlock, FfnBlock
from .selectors import (
    SelectionDecision,
    select_fold,
    select_heads,
    select_magnitude,
    select_wanda,
)

METHODS = ("mag-l1", "mag-l2", "wanda", "fold")


@dataclass
class PlanEntry:
    block_index: int
    method: str
    ratio: float
    compensate: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ArgumentError(
                f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}"
            )
        if not 0.0 <= self.ratio < 1.0:
            raise ArgumentError(f"ratio must be in [0, 1), got {self.ratio}")


@dataclass
class CompressionPlan:
    entries: list = field(default_factory=list)
    alpha: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")
        idx = [e.block_index for e in self.entries]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise ArgumentError("plan blocks must be in strictly ascending order")


def uniform_plan(graph: BlockGraph, method: str, ratio: float, compensate: bool,
                 alpha: float = 1e-3, seed: int = 0) -> CompressionPlan:
    entries = [
        PlanEntry(i, method, ratio, compensate) for i in range(len(graph.blocks))
    ]
    return CompressionPlan(entries, alpha=alpha, seed=seed)


def _producer_rows(block):
    if isinstance(block, DenseBlock):
        return block.w_producer
    if isinstance(block, FfnBlock):
        return block.w_fc
    if isinstance(block, ConvBlock):
        return block.w_producer.reshape(block.hidden_width, -1)
    raise ArgumentError(f"no producer rows for block type {type(block).__name__}")


def _target_width(block, ratio: float) -> int:
    if isinstance(block, AttentionBlock):
        g = block.gqa_groups
        k = int(round((1.0 - ratio) * block.n_heads))
        k = max(g, (k // g) * g)
        return min(k, block.n_heads)
    h = block.hidden_width
    return min(h, max(1, int(round((1.0 - ratio) * h))))


def _decide(graph: BlockGraph, batch, entry: PlanEntry, block, stats, seed: int) -> SelectionDecision:
    k = _target_width(block, entry.ratio)
    if isinstance(block, AttentionBlock):
        method = {"mag-l1": "l2", "mag-l2": "l2", "wanda": "wanda", "fold": "fold"}[entry.method]
        return select_heads(block, stats, k, method=method, seed=seed)
    rows = _producer_rows(block)
    if entry.method == "mag-l1":
        return select_magnitude(rows, k, norm="l1")
    if entry.method == "mag-l2":
        return select_magnitude(rows, k, norm="l2")
    if entry.method == "wanda":
        norms = input_feature_norms(graph, batch, entry.block_index)
        return select_wanda(rows, norms, k)
    return select_fold(rows, k, seed)


def compress_graph(graph: BlockGraph, batch: np.ndarray, plan: CompressionPlan,
                   collect_timings: bool = False):
    """Run the closed-loop pipeline; returns (new graph, per-block reports)."""
    cfg = RidgeConfig(alpha=plan.alpha)
    reports = []
    current = graph

    for entry in plan.entries:
        if not 0 <= entry.block_index < len(current.blocks):
            raise ArgumentError(f"plan block index {entry.block_index} out of range")
        block = current.blocks[entry.block_index]
        t0 = time.perf_counter()
        stats = accumulate_gram(current, batch, entry.block_index)
        decision = _decide(current, batch, entry, block, stats, plan.seed)
        t1 = time.perf_counter()
        if entry.compensate:
            new_block, result = merge_block(block, decision, stats, cfg,
                                            block_index=entry.block_index)
        else:
            new_block, result = naive_reduce_block(block, decision, stats,
                                                   block_index=entry.block_index)
        t2 = time.perf_counter()
        current = current.with_block(entry.block_index, new_block)
        report = {
            "block": entry.block_index,
            "method": entry.method,
            "ratio": entry.ratio,
            "compensate": entry.compensate,
            "k": decision.k,
            "lambda_used": result.lambda_used,
            "calib_error_before": result.calib_error_before,
            "calib_error_after": result.calib_error_after,
        }
        if collect_timings:
            report["t_calib_s"] = t1 - t0
            report["t_comp_s"] = t2 - t1
        reports.append(report)
    return current, reports
