"""Gram-statistics accumulation over the calibration batch.

Statistics are uncentered second moments of consumer-input activations,
accumulated in float64 over fixed-size chunks so that chunked and merged
runs agree to tight tolerances. The closed-loop pass recomputes each
block's statistics after all upstream blocks have already been rewritten.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .model import BlockGraph, forward, TAP_INPUT

CHUNK_ROWS = 256


@dataclass
class GramStats:
    g: np.ndarray  # (H, H), exactly symmetric as stored
    n_samples: int
    tap: tuple  # (block index, tap tag)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.ndim != 2 or self.g.shape[0] != self.g.shape[1]:
            raise ShapeError(f"Gram matrix must be square, got {self.g.shape}")
        if self.n_samples < 0:
            raise ArgumentError("n_samples must be nonnegative")

    @property
    def width(self) -> int:
        return self.g.shape[0]


def gram_from_rows(x: np.ndarray, tap: tuple = (0, "consumer_input")) -> GramStats:
    """Accumulate X^T X in chunks; upper triangle mirrored for exact symmetry."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"activation rows must be rank-2, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ArgumentError("cannot accumulate statistics over zero rows")
    h = x.shape[1]
    acc = np.zeros((h, h))
    for start in range(0, x.shape[0], CHUNK_ROWS):
        chunk = x[start : start + CHUNK_ROWS]
        acc += chunk.T @ chunk
    upper = np.triu(acc)
    g = upper + upper.T - np.diag(np.diag(acc))
    return GramStats(g, x.shape[0], tap)


def accumulate_gram(graph: BlockGraph, batch: np.ndarray, block_index: int) -> GramStats:
    """Gram statistics at a block's consumer-input tap point."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ArgumentError("calibration batch is empty")
    _, captured = forward(graph, batch, capture=block_index)
    return gram_from_rows(captured, tap=(block_index, "consumer_input"))


def merge_gram(a: GramStats, b: GramStats) -> GramStats:
    if a.tap != b.tap:
        raise ArgumentError(f"cannot merge stats from taps {a.tap} and {b.tap}")
    if a.width != b.width:
        raise ShapeError(f"cannot merge Gram widths {a.width} and {b.width}")
    return GramStats(a.g + b.g, a.n_samples + b.n_samples, a.tap)


def zero_gram(width: int, tap: tuple = (0, "consumer_input")) -> GramStats:
    return GramStats(np.zeros((width, width)), 0, tap)


def input_feature_norms(graph: BlockGraph, batch: np.ndarray, block_index: int) -> np.ndarray:
    """Per-input-feature l2 norms of the producer's input over the batch."""
    _, captured = forward(graph, batch, capture=block_index, tap=TAP_INPUT)
    return np.sqrt((np.asarray(captured) ** 2).sum(axis=0))


def closed_loop_pass(graph: BlockGraph, batch: np.ndarray, plan):
    """Sequential per-block recalibration.

    `plan` is an ordered sequence of (block_index, update_fn) pairs with
    strictly increasing indices. For each planned block, statistics are
    accumulated on the graph with all previously planned blocks already
    rewritten, yielded, and then update_fn(block, stats) is applied; it may
    return a replacement block or None to leave the block untouched.

    Total forward work is one full pass per planned block.
    """
    entries = list(plan)
    indices = [idx for idx, _ in entries]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ArgumentError("plan blocks must be listed in strictly increasing order")
    current = graph
    for idx, update_fn in entries:
        if not 0 <= idx < len(current.blocks):
            raise ArgumentError(f"plan block index {idx} out of range")
        stats = accumulate_gram(current, batch, idx)
        yield stats
        new_block = update_fn(current.blocks[idx], stats)
        if new_block is not None:
            current = current.with_block(idx, new_block)
