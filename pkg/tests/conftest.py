import numpy as np
import pytest

from grail.model import (
    AttentionBlock,
    BlockGraph,
    ConvBlock,
    DenseBlock,
    FfnBlock,
)


def make_dense_block(rng, c=6, h=8, o=5, activation="relu"):
    return DenseBlock(
        rng.standard_normal((h, c)) / np.sqrt(c),
        0.1 * rng.standard_normal(h),
        activation,
        rng.standard_normal((o, h)) / np.sqrt(h),
        0.1 * rng.standard_normal(o),
    )


def make_ffn_block(rng, d=6, h=12, d_out=None):
    d_out = d if d_out is None else d_out
    return FfnBlock(
        rng.standard_normal((h, d)) / np.sqrt(d),
        0.1 * rng.standard_normal(h),
        rng.standard_normal((d_out, h)) / np.sqrt(h),
        0.1 * rng.standard_normal(d_out),
    )


def make_conv_block(rng, c=3, h=6, o=4, k=3, activation="relu", padding=1):
    return ConvBlock(
        rng.standard_normal((h, c, k, k)) / np.sqrt(c * k * k),
        0.1 * rng.standard_normal(h),
        activation,
        rng.standard_normal((o, h, k, k)) / np.sqrt(h * k * k),
        0.1 * rng.standard_normal(o),
        stride_producer=1, padding_producer=padding,
        stride_consumer=1, padding_consumer=padding,
    )


def make_attention_block(rng, d=8, n_heads=4, head_dim=2, gqa_groups=1,
                         causal=False, d_out=None):
    d_out = d if d_out is None else d_out
    n_kv = n_heads if gqa_groups == 1 else gqa_groups
    return AttentionBlock(
        rng.standard_normal((n_heads * head_dim, d)) / np.sqrt(d),
        rng.standard_normal((n_kv * head_dim, d)) / np.sqrt(d),
        rng.standard_normal((n_kv * head_dim, d)) / np.sqrt(d),
        rng.standard_normal((d_out, n_heads * head_dim)) / np.sqrt(n_heads * head_dim),
        n_heads=n_heads, head_dim=head_dim, gqa_groups=gqa_groups, causal=causal,
    )


def single_block_graph(block, input_shape):
    return BlockGraph([block], input_shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
