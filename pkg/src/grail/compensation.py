"""Ridge reconstruction of dropped channels and consumer weight merging.

Given the consumer-input Gram matrix G and a reducer M, the reconstruction
map solves

    B = (G M) (M^T G M + lambda I)^{-1}

so that original activations are approximated by reduced ones, h ~ B h_red.
B is then absorbed into the consumer weights, W' = W B, while the producer
is narrowed by selection or cluster averaging. The ridge coefficient is
anchored to the reduced Gram diagonal: lambda = alpha * mean diag(M^T G M).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .calibration import GramStats
from .errors import ArgumentError, DegenerateStatisticsError, ShapeError
from .linalg import spd_solve
from .model import AttentionBlock, ConvBlock, DenseBlock, FfnBlock
from .reducers import (
    ReducerMap,
    build_reducer,
    lift_heads,
    naive_reconstruction,
    narrow_head_rows,
    narrow_rows,
)
from .selectors import KIND_PRUNE, UNIT_HEAD, SelectionDecision


@dataclass
class RidgeConfig:
    """Relative ridge coefficient; lambda = alpha * mean diag(reduced Gram)."""

    alpha: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class CompensationResult:
    b: np.ndarray  # (H, K)
    lambda_used: float
    calib_error_before: float = float("nan")
    calib_error_after: float = float("nan")
    block_index: int | None = None


def reduced_grams(g: np.ndarray, reducer: ReducerMap):
    """(G M, M^T G M); exact submatrix indexing on the prune fast path."""
    if reducer.kind == KIND_PRUNE and reducer.head_meta is None:
        kept = [int(np.flatnonzero(reducer.m[:, j])[0]) for j in range(reducer.k)]
        return g[:, kept].copy(), g[np.ix_(kept, kept)].copy()
    return reduced_grams_general(g, reducer)


def reduced_grams_general(g: np.ndarray, reducer: ReducerMap):
    g_cross = g @ reducer.m
    return g_cross, reducer.m.T @ g_cross


def solve_reconstruction(gram: GramStats, reducer: ReducerMap, cfg: RidgeConfig,
                         ridge: float | None = None) -> CompensationResult:
    """Closed-form ridge solution for the reconstruction map B.

    `ridge` overrides the alpha-relative coefficient with an absolute value
    (0 gives the unregularized least-squares solution when G is full rank).
    """
    g = gram.g
    if g.shape[0] != reducer.in_width:
        raise ShapeError(
            f"Gram width {g.shape[0]} != reducer input width {reducer.in_width}"
        )
    g_cross, g_red = reduced_grams(g, reducer)
    diag_mean = float(np.diag(g_red).mean())
    if diag_mean <= 0.0:
        raise DegenerateStatisticsError(
            "reduced Gram has zero diagonal; calibration activations are dead"
        )
    lam = float(ridge) if ridge is not None else cfg.alpha * diag_mean
    x = spd_solve(g_red, g_cross.T, ridge=lam)  # (K, H)
    return CompensationResult(b=x.T, lambda_used=lam)


def output_error(g: np.ndarray, w_consumer: np.ndarray, m: np.ndarray,
                 b: np.ndarray) -> float:
    """Frobenius norm of the consumer output gap on calibration data.

    || H W^T - (H M) (W B)^T ||_F computed from the Gram matrix as
    sqrt(tr(D^T G D)) with D = (I - M B^T) W^T.
    """
    d = (np.eye(g.shape[0]) - m @ b.T) @ w_consumer.T
    val = float(np.einsum("ij,ik,kj->", d, g, d))
    return float(np.sqrt(max(val, 0.0)))


def _errors(g, w_consumer, reducer, b):
    before = output_error(g, w_consumer, reducer.m, naive_reconstruction(reducer))
    after = output_error(g, w_consumer, reducer.m, b)
    return before, after


def merge_dense(block: DenseBlock, decision: SelectionDecision, gram: GramStats,
                cfg: RidgeConfig, ridge: float | None = None,
                block_index: int | None = None):
    reducer = build_reducer(decision, block.hidden_width)
    res = solve_reconstruction(gram, reducer, cfg, ridge=ridge)
    before, after = _errors(gram.g, block.w_consumer, reducer, res.b)
    new_block = DenseBlock(
        narrow_rows(block.w_producer, decision),
        narrow_rows(block.b_producer, decision),
        block.activation,
        block.w_consumer @ res.b,
        block.b_consumer.copy(),
    )
    return new_block, replace(res, calib_error_before=before,
                              calib_error_after=after, block_index=block_index)


def merge_ffn(block: FfnBlock, decision: SelectionDecision, gram: GramStats,
              cfg: RidgeConfig, ridge: float | None = None,
              block_index: int | None = None):
    reducer = build_reducer(decision, block.hidden_width)
    res = solve_reconstruction(gram, reducer, cfg, ridge=ridge)
    before, after = _errors(gram.g, block.w_proj, reducer, res.b)
    new_block = FfnBlock(
        narrow_rows(block.w_fc, decision),
        narrow_rows(block.b_fc, decision),
        block.w_proj @ res.b,
        block.b_proj.copy(),
        block.activation,
    )
    return new_block, replace(res, calib_error_before=before,
                              calib_error_after=after, block_index=block_index)


def merge_conv(block: ConvBlock, decision: SelectionDecision, gram: GramStats,
               cfg: RidgeConfig, ridge: float | None = None,
               block_index: int | None = None):
    reducer = build_reducer(decision, block.hidden_width)
    res = solve_reconstruction(gram, reducer, cfg, ridge=ridge)
    # Error metric uses the kernel stacked over spatial offsets against the
    # single hidden-channel Gram; inter-offset correlations are not tracked.
    o, h, kh, kw = block.w_consumer.shape
    w_stack = block.w_consumer.transpose(0, 2, 3, 1).reshape(o * kh * kw, h)
    before, after = _errors(gram.g, w_stack, reducer, res.b)
    new_consumer = np.einsum("ohij,hk->okij", block.w_consumer, res.b)
    new_block = ConvBlock(
        narrow_rows(block.w_producer, decision),
        narrow_rows(block.b_producer, decision),
        block.activation,
        new_consumer,
        block.b_consumer.copy(),
        block.stride_producer, block.padding_producer,
        block.stride_consumer, block.padding_consumer,
    )
    return new_block, replace(res, calib_error_before=before,
                              calib_error_after=after, block_index=block_index)


def merge_attention(block: AttentionBlock, decision: SelectionDecision,
                    gram: GramStats, cfg: RidgeConfig, ridge: float | None = None,
                    block_index: int | None = None):
    """Compensate a head-level decision against the pre-w_o Gram.

    The reducer is head-structured (block-diagonal for GQA), but B itself is
    dense. Query projections are narrowed by head slices; with one shared KV
    head per group (gqa_groups > 1) the K/V projections stay untouched,
    otherwise they are narrowed alongside the query heads.
    """
    if decision.unit != UNIT_HEAD:
        raise ArgumentError("attention blocks require a head-level decision")
    reducer = lift_heads(decision, block.n_heads, block.head_dim, block.gqa_groups)
    res = solve_reconstruction(gram, reducer, cfg, ridge=ridge)
    before, after = _errors(gram.g, block.w_o, reducer, res.b)
    new_q = narrow_head_rows(block.w_q, decision, block.head_dim)
    if block.gqa_groups == 1:
        new_k = narrow_head_rows(block.w_k, decision, block.head_dim)
        new_v = narrow_head_rows(block.w_v, decision, block.head_dim)
    else:
        new_k = block.w_k.copy()
        new_v = block.w_v.copy()
    new_block = AttentionBlock(
        new_q, new_k, new_v, block.w_o @ res.b,
        n_heads=decision.k, head_dim=block.head_dim,
        gqa_groups=block.gqa_groups, causal=block.causal,
    )
    return new_block, replace(res, calib_error_before=before,
                              calib_error_after=after, block_index=block_index)


def naive_reduce_block(block, decision: SelectionDecision, gram: GramStats | None = None,
                       block_index: int | None = None):
    """Pure reducer application without compensation.

    The consumer absorbs only the naive reconstruction (selection columns
    for pruning, cluster-indicator columns for folding).
    """
    if isinstance(block, AttentionBlock):
        reducer = lift_heads(decision, block.n_heads, block.head_dim,
                             block.gqa_groups)
    else:
        reducer = build_reducer(decision, block.hidden_width)
    b_naive = naive_reconstruction(reducer)
    if isinstance(block, DenseBlock):
        new_block = DenseBlock(
            narrow_rows(block.w_producer, decision),
            narrow_rows(block.b_producer, decision),
            block.activation,
            block.w_consumer @ b_naive,
            block.b_consumer.copy(),
        )
        err_w = block.w_consumer
    elif isinstance(block, FfnBlock):
        new_block = FfnBlock(
            narrow_rows(block.w_fc, decision),
            narrow_rows(block.b_fc, decision),
            block.w_proj @ b_naive,
            block.b_proj.copy(),
            block.activation,
        )
        err_w = block.w_proj
    elif isinstance(block, ConvBlock):
        new_block = ConvBlock(
            narrow_rows(block.w_producer, decision),
            narrow_rows(block.b_producer, decision),
            block.activation,
            np.einsum("ohij,hk->okij", block.w_consumer, b_naive),
            block.b_consumer.copy(),
            block.stride_producer, block.padding_producer,
            block.stride_consumer, block.padding_consumer,
        )
        o, h, kh, kw = block.w_consumer.shape
        err_w = block.w_consumer.transpose(0, 2, 3, 1).reshape(o * kh * kw, h)
    elif isinstance(block, AttentionBlock):
        new_q = narrow_head_rows(block.w_q, decision, block.head_dim)
        if block.gqa_groups == 1:
            new_k = narrow_head_rows(block.w_k, decision, block.head_dim)
            new_v = narrow_head_rows(block.w_v, decision, block.head_dim)
        else:
            new_k = block.w_k.copy()
            new_v = block.w_v.copy()
        new_block = AttentionBlock(
            new_q, new_k, new_v, block.w_o @ b_naive,
            n_heads=decision.k, head_dim=block.head_dim,
            gqa_groups=block.gqa_groups, causal=block.causal,
        )
        err_w = block.w_o
    else:
        raise ArgumentError(f"unknown block type {type(block).__name__}")
    err = float("nan")
    if gram is not None:
        err = output_error(gram.g, err_w, reducer.m, b_naive)
    result = CompensationResult(b=b_naive, lambda_used=0.0,
                                calib_error_before=err, calib_error_after=err,
                                block_index=block_index)
    return new_block, result


def merge_block(block, decision, gram, cfg, ridge=None, block_index=None):
    """Dispatch to the block-type-specific merge."""
    if isinstance(block, DenseBlock):
        return merge_dense(block, decision, gram, cfg, ridge, block_index)
    if isinstance(block, FfnBlock):
        return merge_ffn(block, decision, gram, cfg, ridge, block_index)
    if isinstance(block, ConvBlock):
        return merge_conv(block, decision, gram, cfg, ridge, block_index)
    if isinstance(block, AttentionBlock):
        return merge_attention(block, decision, gram, cfg, ridge, block_index)
    raise ArgumentError(f"unknown block type {type(block).__name__}")
