"""Materialize selection decisions as width-reduction matrices.

The reducer matrix M (H x K) is the single object compensation consumes:
columns of M are standard basis vectors for pruning, or cluster-mean mixing
columns for folding. Head-level decisions are lifted to the feature axis via
a Kronecker product with the per-head identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .linalg import kronecker
from .selectors import KIND_FOLD, KIND_PRUNE, UNIT_HEAD, SelectionDecision


@dataclass
class ReducerMap:
    m: np.ndarray  # (H, K)
    kind: str  # prune | fold
    head_meta: dict | None = None  # {n_heads, head_dim, gqa_groups, k_heads}

    @property
    def in_width(self) -> int:
        return self.m.shape[0]

    @property
    def k(self) -> int:
        return self.m.shape[1]


def _head_matrix(decision: SelectionDecision) -> np.ndarray:
    """Unit-level reducer (width x K): selection columns or cluster means."""
    h = decision.width
    k = decision.k
    m = np.zeros((h, k))
    if decision.kind == KIND_PRUNE:
        for col, idx in enumerate(decision.kept):
            m[idx, col] = 1.0
    else:
        for col, cluster in enumerate(decision.clusters):
            for idx in cluster:
                m[idx, col] = 1.0 / len(cluster)
    return m


def build_reducer(decision: SelectionDecision, width: int) -> ReducerMap:
    if decision.unit == UNIT_HEAD:
        raise ArgumentError("head decisions must go through lift_heads")
    if decision.width != width:
        raise ArgumentError(
            f"decision covers {decision.width} units, block width is {width}"
        )
    return ReducerMap(_head_matrix(decision), decision.kind)


def lift_heads(decision: SelectionDecision, n_heads: int, head_dim: int,
               gqa_groups: int = 1) -> ReducerMap:
    """Expand a head-level decision to the feature axis: M = R_heads (x) I.

    For GQA the head reducer must be block-diagonal with identical per-group
    blocks; the decision is validated against that structure before lifting.
    """
    if decision.unit != UNIT_HEAD:
        raise ArgumentError("lift_heads requires a head-level decision")
    if decision.width != n_heads:
        raise ArgumentError(
            f"decision covers {decision.width} heads, block has {n_heads}"
        )
    if n_heads % gqa_groups != 0:
        raise ArgumentError(f"gqa_groups={gqa_groups} must divide n_heads={n_heads}")
    if decision.k % gqa_groups != 0:
        raise ArgumentError(
            f"kept head count {decision.k} must be divisible by "
            f"gqa_groups={gqa_groups}"
        )
    r_heads = _head_matrix(decision)
    if gqa_groups > 1:
        _check_block_diagonal(decision, n_heads, gqa_groups)
    m = kronecker(r_heads, np.eye(head_dim))
    meta = {
        "n_heads": n_heads,
        "head_dim": head_dim,
        "gqa_groups": gqa_groups,
        "k_heads": decision.k,
    }
    return ReducerMap(m, decision.kind, head_meta=meta)


def _check_block_diagonal(decision: SelectionDecision, n_heads: int, g: int) -> None:
    per_group = n_heads // g
    per_group_k = decision.k // g
    if decision.kind == KIND_PRUNE:
        patterns = []
        for grp in range(g):
            lo, hi = grp * per_group, (grp + 1) * per_group
            patterns.append(tuple(i - lo for i in decision.kept if lo <= i < hi))
        if any(len(p) != per_group_k for p in patterns):
            raise ArgumentError(
                "GQA pruning must keep the same number of heads in every group"
            )
        if any(p != patterns[0] for p in patterns):
            raise ArgumentError(
                "GQA pruning must keep the same head pattern in every group"
            )
    else:
        group_patterns: list[list[tuple]] = [[] for _ in range(g)]
        for cluster in decision.clusters:
            grp = cluster[0] // per_group
            local = tuple(i - grp * per_group for i in cluster)
            if any(i // per_group != grp for i in cluster):
                raise ArgumentError("GQA fold clusters may not cross groups")
            group_patterns[grp].append(local)
        canon = [tuple(sorted(p)) for p in group_patterns]
        if any(len(p) != per_group_k for p in canon):
            raise ArgumentError(
                "GQA folding must form the same number of clusters in every group"
            )
        if any(p != canon[0] for p in canon):
            raise ArgumentError(
                "GQA folding must use the same cluster pattern in every group"
            )


def narrow_rows(w: np.ndarray, decision: SelectionDecision) -> np.ndarray:
    """Narrow the leading axis: row selection (prune) or cluster means (fold)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != decision.width:
        raise ShapeError(
            f"weight has {w.shape[0]} rows, decision covers {decision.width}"
        )
    if decision.kind == KIND_PRUNE:
        return w[list(decision.kept)].copy()
    m = _head_matrix(decision)
    return np.tensordot(m.T, w, axes=1)


def narrow_head_rows(w: np.ndarray, decision: SelectionDecision,
                     head_dim: int) -> np.ndarray:
    """Narrow a (n_heads*d_h, D) projection by head slices."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != decision.width * head_dim:
        raise ShapeError(
            f"projection has {w.shape[0]} rows, expected "
            f"{decision.width * head_dim}"
        )
    lifted = kronecker(_head_matrix(decision), np.eye(head_dim))
    return lifted.T @ w


def naive_reconstruction(reducer: ReducerMap) -> np.ndarray:
    """The no-compensation reconstruction map.

    Pruning places each kept channel back at its original position (B = M).
    Folding copies each cluster's centroid back to every member channel
    (the 0/1 indicator of M), which is the classic data-free folding update.
    """
    if reducer.kind == KIND_PRUNE:
        return reducer.m.copy()
    return (reducer.m > 0).astype(np.float64)
