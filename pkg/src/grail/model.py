"""Typed block-graph model representation and forward execution.

A model is an ordered sequence of producer/consumer blocks. Forward runs in
evaluation mode only and can capture the consumer-input activations of one
block (the quantity all calibration statistics are built from) or the raw
input of one block (used for input-norm scoring).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .errors import ArgumentError, ShapeError

ACTIVATIONS = ("relu", "gelu", "identity")

# Capture tap points.
TAP_CONSUMER_INPUT = "consumer_input"
TAP_INPUT = "input"


def gelu(x: np.ndarray) -> np.ndarray:
    # Exact erf-based definition, not the tanh approximation.
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "gelu":
        return gelu(x)
    if name == "identity":
        return x
    raise ArgumentError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _check_vec(v: np.ndarray, n: int, name: str) -> None:
    if v.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {v.shape}")


@dataclass
class DenseBlock:
    """Two fully connected layers around a pointwise activation."""

    w_producer: np.ndarray  # (H, C)
    b_producer: np.ndarray  # (H,)
    activation: str
    w_consumer: np.ndarray  # (O, H)
    b_consumer: np.ndarray  # (O,)

    def __post_init__(self):
        self.w_producer = _f64(self.w_producer)
        self.b_producer = _f64(self.b_producer)
        self.w_consumer = _f64(self.w_consumer)
        self.b_consumer = _f64(self.b_consumer)
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")
        h = self.w_producer.shape[0]
        if self.w_consumer.shape[1] != h:
            raise ShapeError(
                f"consumer expects width {self.w_consumer.shape[1]}, producer emits {h}"
            )
        _check_vec(self.b_producer, h, "b_producer")
        _check_vec(self.b_consumer, self.w_consumer.shape[0], "b_consumer")

    @property
    def hidden_width(self) -> int:
        return self.w_producer.shape[0]

    @property
    def in_width(self) -> int:
        return self.w_producer.shape[1]

    @property
    def out_width(self) -> int:
        return self.w_consumer.shape[0]


@dataclass
class ConvBlock:
    """Two 2-D convolutions around a pointwise activation (NCHW layout)."""

    w_producer: np.ndarray  # (H, C, kH, kW)
    b_producer: np.ndarray  # (H,)
    activation: str
    w_consumer: np.ndarray  # (O, H, kH', kW')
    b_consumer: np.ndarray  # (O,)
    stride_producer: int = 1
    padding_producer: int = 0
    stride_consumer: int = 1
    padding_consumer: int = 0

    def __post_init__(self):
        self.w_producer = _f64(self.w_producer)
        self.b_producer = _f64(self.b_producer)
        self.w_consumer = _f64(self.w_consumer)
        self.b_consumer = _f64(self.b_consumer)
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")
        if self.w_producer.ndim != 4 or self.w_consumer.ndim != 4:
            raise ShapeError("conv kernels must be rank-4 (out, in, kH, kW)")
        h = self.w_producer.shape[0]
        if self.w_consumer.shape[1] != h:
            raise ShapeError(
                f"consumer expects {self.w_consumer.shape[1]} input channels, "
                f"producer emits {h}"
            )
        _check_vec(self.b_producer, h, "b_producer")
        _check_vec(self.b_consumer, self.w_consumer.shape[0], "b_consumer")
        if min(self.stride_producer, self.stride_consumer) < 1:
            raise ArgumentError("strides must be >= 1")
        if min(self.padding_producer, self.padding_consumer) < 0:
            raise ArgumentError("paddings must be >= 0")

    @property
    def hidden_width(self) -> int:
        return self.w_producer.shape[0]

    @property
    def in_width(self) -> int:
        return self.w_producer.shape[1]

    @property
    def out_width(self) -> int:
        return self.w_consumer.shape[0]


@dataclass
class FfnBlock:
    """Transformer MLP: expansion w_fc, gelu, projection w_proj."""

    w_fc: np.ndarray  # (H, D)
    b_fc: np.ndarray  # (H,)
    w_proj: np.ndarray  # (D', H)
    b_proj: np.ndarray  # (D',)
    activation: str = "gelu"

    def __post_init__(self):
        self.w_fc = _f64(self.w_fc)
        self.b_fc = _f64(self.b_fc)
        self.w_proj = _f64(self.w_proj)
        self.b_proj = _f64(self.b_proj)
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")
        h = self.w_fc.shape[0]
        if self.w_proj.shape[1] != h:
            raise ShapeError(
                f"w_proj expects width {self.w_proj.shape[1]}, w_fc emits {h}"
            )
        _check_vec(self.b_fc, h, "b_fc")
        _check_vec(self.b_proj, self.w_proj.shape[0], "b_proj")

    @property
    def hidden_width(self) -> int:
        return self.w_fc.shape[0]

    @property
    def in_width(self) -> int:
        return self.w_fc.shape[1]

    @property
    def out_width(self) -> int:
        return self.w_proj.shape[0]


@dataclass
class AttentionBlock:
    """Multi-head (optionally grouped-query) self-attention.

    With gqa_groups == 1 this is standard MHA: w_k/w_v carry n_heads KV
    heads. With gqa_groups == G > 1 the query heads are split into G
    contiguous groups and each group shares one KV head, so w_k/w_v carry
    G * head_dim rows.
    """

    w_q: np.ndarray  # (n_h * d_h, D)
    w_k: np.ndarray  # (n_kv * d_h, D)
    w_v: np.ndarray  # (n_kv * d_h, D)
    w_o: np.ndarray  # (D', n_h * d_h)
    n_heads: int
    head_dim: int
    gqa_groups: int = 1
    causal: bool = False

    def __post_init__(self):
        self.w_q = _f64(self.w_q)
        self.w_k = _f64(self.w_k)
        self.w_v = _f64(self.w_v)
        self.w_o = _f64(self.w_o)
        nh, dh, g = self.n_heads, self.head_dim, self.gqa_groups
        if nh < 1 or dh < 1 or g < 1:
            raise ArgumentError("n_heads, head_dim and gqa_groups must be positive")
        if nh % g != 0:
            raise ArgumentError(f"gqa_groups={g} must divide n_heads={nh}")
        if self.w_q.shape[0] != nh * dh:
            raise ShapeError(f"w_q has {self.w_q.shape[0]} rows, expected {nh * dh}")
        if self.w_o.shape[1] != nh * dh:
            raise ShapeError(f"w_o has {self.w_o.shape[1]} cols, expected {nh * dh}")
        n_kv = self.n_kv_heads
        for name, w in (("w_k", self.w_k), ("w_v", self.w_v)):
            if w.shape[0] != n_kv * dh:
                raise ShapeError(
                    f"{name} has {w.shape[0]} rows, expected {n_kv * dh} "
                    f"({n_kv} KV heads of width {dh})"
                )
            if w.shape[1] != self.w_q.shape[1]:
                raise ShapeError(f"{name} input width differs from w_q")

    @property
    def n_kv_heads(self) -> int:
        return self.n_heads if self.gqa_groups == 1 else self.gqa_groups

    @property
    def hidden_width(self) -> int:
        # Width of the concatenated per-head vector entering w_o.
        return self.n_heads * self.head_dim

    @property
    def in_width(self) -> int:
        return self.w_q.shape[1]

    @property
    def out_width(self) -> int:
        return self.w_o.shape[0]


Block = DenseBlock | ConvBlock | FfnBlock | AttentionBlock


@dataclass
class BlockGraph:
    """Feed-forward sequence of blocks with shape-checked wiring."""

    blocks: list = field(default_factory=list)
    input_shape: tuple = ()

    def __post_init__(self):
        self.blocks = list(self.blocks)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not self.blocks:
            raise ArgumentError("graph must contain at least one block")
        for i in range(len(self.blocks) - 1):
            out_w = self.blocks[i].out_width
            in_w = self.blocks[i + 1].in_width
            if out_w != in_w:
                raise ShapeError(
                    f"block {i} emits width {out_w} but block {i + 1} "
                    f"expects {in_w}"
                )

    def with_block(self, index: int, block: Block) -> "BlockGraph":
        blocks = list(self.blocks)
        blocks[index] = block
        return BlockGraph(blocks, self.input_shape)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, hin, win = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv input has {c} channels, kernel expects {cw}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        hin += 2 * padding
        win += 2 * padding
    hout = (hin - kh) // stride + 1
    wout = (win - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv output would be empty: input {x.shape}, kernel {w.shape}")
    out = np.zeros((n, o, hout, wout))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + hout * stride : stride, j : j + wout * stride : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + b[None, :, None, None]


def _flatten_channels_last(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N*H*W, C): every spatial position is one sample row.
    return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])


def _flatten_tokens(x: np.ndarray) -> np.ndarray:
    # (..., D) -> (N_eff, D)
    return x.reshape(-1, x.shape[-1])


def _dense_like_forward(x, w_p, b_p, activation, w_c, b_c):
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    h = apply_activation(activation, x2 @ w_p.T + b_p)
    y = h @ w_c.T + b_c
    return y.reshape(*lead, w_c.shape[0]), h


def _softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(block: AttentionBlock, x: np.ndarray):
    """Returns (output, concatenated per-head vector entering w_o)."""
    if x.ndim != 3:
        raise ShapeError(f"attention input must be (N, T, D), got {x.shape}")
    n, t, d = x.shape
    nh, dh = block.n_heads, block.head_dim
    n_kv = block.n_kv_heads
    q = (x @ block.w_q.T).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
    k = (x @ block.w_k.T).reshape(n, t, n_kv, dh).transpose(0, 2, 1, 3)
    v = (x @ block.w_v.T).reshape(n, t, n_kv, dh).transpose(0, 2, 1, 3)
    head_map = np.arange(nh) // (nh // n_kv)
    k = k[:, head_map]
    v = v[:, head_map]
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    if block.causal:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    ctx = _softmax(scores) @ v  # (N, nh, T, dh)
    pre_wo = ctx.transpose(0, 2, 1, 3).reshape(n, t, nh * dh)
    return pre_wo @ block.w_o.T, _flatten_tokens(pre_wo)


def block_forward(block: Block, x: np.ndarray):
    """Returns (output, consumer-input activations flattened to (N_eff, H))."""
    if isinstance(block, DenseBlock):
        y, h = _dense_like_forward(
            x, block.w_producer, block.b_producer, block.activation,
            block.w_consumer, block.b_consumer,
        )
        return y, h
    if isinstance(block, FfnBlock):
        y, h = _dense_like_forward(
            x, block.w_fc, block.b_fc, block.activation, block.w_proj, block.b_proj
        )
        return y, h
    if isinstance(block, ConvBlock):
        if x.ndim != 4:
            raise ShapeError(f"conv block input must be (N, C, H, W), got {x.shape}")
        h = apply_activation(
            block.activation,
            conv2d(x, block.w_producer, block.b_producer,
                   block.stride_producer, block.padding_producer),
        )
        y = conv2d(h, block.w_consumer, block.b_consumer,
                   block.stride_consumer, block.padding_consumer)
        return y, _flatten_channels_last(h)
    if isinstance(block, AttentionBlock):
        return attention_forward(block, x)
    raise ArgumentError(f"unknown block type {type(block).__name__}")


def block_input_features(block: Block, x: np.ndarray) -> np.ndarray:
    """Block input flattened to (N_eff, C) rows of producer input features."""
    if isinstance(block, ConvBlock):
        if x.ndim != 4:
            raise ShapeError(f"conv block input must be (N, C, H, W), got {x.shape}")
        return _flatten_channels_last(x)
    return _flatten_tokens(x)


def forward(graph: BlockGraph, batch: np.ndarray, capture: int | None = None,
            tap: str = TAP_CONSUMER_INPUT):
    """Run the graph on a batch; optionally capture activations at one block.

    Returns (output, captured) where captured is None without a capture
    request, otherwise an (N_eff, width) matrix with every token / spatial
    position counted as one sample row.
    """
    batch = _f64(batch)
    if capture is not None and not 0 <= capture < len(graph.blocks):
        raise ArgumentError(
            f"capture index {capture} out of range for {len(graph.blocks)} blocks"
        )
    if tap not in (TAP_CONSUMER_INPUT, TAP_INPUT):
        raise ArgumentError(f"unknown tap point {tap!r}")
    if graph.input_shape and batch.shape[-len(graph.input_shape):] != graph.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape} does not end with input shape "
            f"{graph.input_shape}"
        )
    x = batch
    captured = None
    for i, block in enumerate(graph.blocks):
        if capture == i and tap == TAP_INPUT:
            captured = block_input_features(block, x)
        x, h = block_forward(block, x)
        if capture == i and tap == TAP_CONSUMER_INPUT:
            captured = h
    return x, captured


def graphs_allclose(a: BlockGraph, b: BlockGraph, rtol=1e-12, atol=0.0) -> bool:
    if len(a.blocks) != len(b.blocks):
        return False
    for ba, bb in zip(a.blocks, b.blocks):
        if type(ba) is not type(bb):
            return False
        for name, va in vars(ba).items():
            vb = getattr(bb, name)
            if isinstance(va, np.ndarray):
                if va.shape != vb.shape or not np.allclose(va, vb, rtol=rtol, atol=atol):
                    return False
            elif va != vb:
                return False
    return True
