"""Selection strategies: which hidden units or heads survive compression.

Every strategy emits the same SelectionDecision, so downstream reducer and
compensation code never needs to know how the choice was made.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError
from .linalg import as_matrix, kmeans
from .model import AttentionBlock

KIND_PRUNE = "prune"
KIND_FOLD = "fold"
UNIT_CHANNEL = "channel"
UNIT_HEAD = "head"


@dataclass
class SelectionDecision:
    kind: str  # prune | fold
    unit: str  # channel | head
    width: int  # number of units decided over (H or n_heads)
    kept: tuple | None = None  # prune: strictly increasing indices
    clusters: tuple | None = None  # fold: disjoint covering index sets
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in (KIND_PRUNE, KIND_FOLD):
            raise ArgumentError(f"unknown decision kind {self.kind!r}")
        if self.unit not in (UNIT_CHANNEL, UNIT_HEAD):
            raise ArgumentError(f"unknown unit {self.unit!r}")
        if self.kind == KIND_PRUNE:
            if self.kept is None:
                raise ArgumentError("prune decision requires kept indices")
            self.kept = tuple(int(i) for i in self.kept)
            if not self.kept:
                raise ArgumentError("prune decision keeps no units")
            if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
                raise ArgumentError("kept indices must be strictly increasing")
            if self.kept[0] < 0 or self.kept[-1] >= self.width:
                raise ArgumentError(
                    f"kept indices out of range [0, {self.width})"
                )
        else:
            if self.clusters is None:
                raise ArgumentError("fold decision requires clusters")
            self.clusters = tuple(
                tuple(sorted(int(i) for i in c)) for c in self.clusters
            )
            flat = [i for c in self.clusters for i in c]
            if any(not c for c in self.clusters):
                raise ArgumentError("fold clusters must be non-empty")
            if sorted(flat) != list(range(self.width)):
                raise ArgumentError(
                    "fold clusters must disjointly cover all units"
                )

    @property
    def k(self) -> int:
        return len(self.kept) if self.kind == KIND_PRUNE else len(self.clusters)


def _top_k(scores: np.ndarray, k: int) -> tuple:
    # Stable sort on negated scores: ties resolve to the lower index.
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def _clusters_from_labels(labels: np.ndarray, k: int) -> tuple:
    groups = [tuple(np.flatnonzero(labels == j)) for j in range(k)]
    # Canonical order: by smallest member index.
    return tuple(sorted(groups, key=lambda c: c[0]))


def select_magnitude(w_producer, k: int, norm: str = "l2") -> SelectionDecision:
    w = as_matrix(np.asarray(w_producer, dtype=np.float64).reshape(len(w_producer), -1))
    h = w.shape[0]
    if not 1 <= k <= h:
        raise ArgumentError(f"k={k} must be in [1, {h}]")
    if norm == "l1":
        scores = np.abs(w).sum(axis=1)
    elif norm == "l2":
        scores = np.sqrt((w ** 2).sum(axis=1))
    else:
        raise ArgumentError(f"unknown norm {norm!r}; expected 'l1' or 'l2'")
    return SelectionDecision(KIND_PRUNE, UNIT_CHANNEL, h, kept=_top_k(scores, k),
                             scores=scores)


def select_wanda(w_producer, input_norms, k: int) -> SelectionDecision:
    w = as_matrix(np.asarray(w_producer, dtype=np.float64).reshape(len(w_producer), -1))
    norms = np.asarray(input_norms, dtype=np.float64).ravel()
    h = w.shape[0]
    if norms.shape[0] != w.shape[1]:
        raise ShapeError(
            f"input_norms length {norms.shape[0]} != input features {w.shape[1]}"
        )
    if not 1 <= k <= h:
        raise ArgumentError(f"k={k} must be in [1, {h}]")
    scores = np.abs(w) @ norms
    return SelectionDecision(KIND_PRUNE, UNIT_CHANNEL, h, kept=_top_k(scores, k),
                             scores=scores)


def select_fold(w_producer, k: int, seed: int) -> SelectionDecision:
    w = as_matrix(np.asarray(w_producer, dtype=np.float64).reshape(len(w_producer), -1))
    h = w.shape[0]
    if not 1 <= k <= h:
        raise ArgumentError(f"k={k} must be in [1, {h}]")
    labels = kmeans(w, k, seed)
    scores = np.sqrt((w ** 2).sum(axis=1))
    return SelectionDecision(KIND_FOLD, UNIT_CHANNEL, h,
                             clusters=_clusters_from_labels(labels, k),
                             scores=scores)


def head_energies(gram_matrix: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    """Per-head activation energy: trace of the head's diagonal Gram block."""
    g = as_matrix(gram_matrix)
    if g.shape[0] != n_heads * head_dim:
        raise ShapeError(
            f"Gram width {g.shape[0]} != n_heads*head_dim = {n_heads * head_dim}"
        )
    diag = np.diag(g)
    return diag.reshape(n_heads, head_dim).sum(axis=1)


def select_heads(block: AttentionBlock, gram, k_heads: int, method: str = "l2",
                 seed: int = 0) -> SelectionDecision:
    """Head-level selection; honors the GQA block-diagonal constraint.

    For gqa_groups = G > 1 the same within-group pattern is applied to every
    group, so the lifted reducer is block-diagonal with G identical blocks.
    Scores (or fold features) are aggregated across groups per within-group
    position.
    """
    nh, dh, g_groups = block.n_heads, block.head_dim, block.gqa_groups
    if not 1 <= k_heads <= nh:
        raise ArgumentError(f"k_heads={k_heads} must be in [1, {nh}]")
    if k_heads % g_groups != 0:
        raise ArgumentError(
            f"k_heads={k_heads} must be divisible by gqa_groups={g_groups}"
        )
    gmat = gram.g if hasattr(gram, "g") else as_matrix(gram)
    energies = head_energies(gmat, nh, dh)
    per_group = nh // g_groups

    if method in ("l2", "wanda"):
        pos_scores = energies.reshape(g_groups, per_group).sum(axis=0)
        pattern = _top_k(pos_scores, k_heads // g_groups)
        kept = tuple(sorted(g * per_group + j for g in range(g_groups) for j in pattern))
        return SelectionDecision(KIND_PRUNE, UNIT_HEAD, nh, kept=kept, scores=energies)

    if method == "fold":
        # Features: each head's w_o column block, flattened; for GQA, the
        # per-position feature concatenates that position's block over groups.
        feats = np.stack([
            block.w_o[:, h * dh : (h + 1) * dh].ravel() for h in range(nh)
        ])
        pos_feats = np.concatenate(
            [feats[g * per_group : (g + 1) * per_group] for g in range(g_groups)],
            axis=1,
        )
        labels = kmeans(pos_feats, k_heads // g_groups, seed)
        pattern = _clusters_from_labels(labels, k_heads // g_groups)
        clusters = tuple(
            tuple(g * per_group + j for j in c)
            for g in range(g_groups) for c in pattern
        )
        return SelectionDecision(KIND_FOLD, UNIT_HEAD, nh, clusters=clusters,
                                 scores=energies)

    raise ArgumentError(f"unknown head selection method {method!r}")
