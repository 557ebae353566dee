import numpy as np
import pytest

from conftest import (
    make_attention_block,
    make_conv_block,
    make_dense_block,
    make_ffn_block,
)
from grail.calibration import GramStats, gram_from_rows, accumulate_gram
from grail.compensation import (
    CompensationResult,
    RidgeConfig,
    merge_attention,
    merge_block,
    merge_conv,
    merge_dense,
    merge_ffn,
    naive_reduce_block,
    output_error,
    reduced_grams,
    reduced_grams_general,
    solve_reconstruction,
)
from grail.errors import ArgumentError, DegenerateStatisticsError, ShapeError
from grail.model import BlockGraph, forward
from grail.reducers import build_reducer, lift_heads, naive_reconstruction
from grail.selectors import SelectionDecision


def prune(width, kept, unit="channel"):
    return SelectionDecision("prune", unit, width, kept=tuple(kept))


def fold(width, clusters, unit="channel"):
    return SelectionDecision("fold", unit, width, clusters=tuple(clusters))


def brute_force_ridge(x, m, lam):
    """Normal-equations oracle: minimize ||X - X M B^T||_F^2 + lam ||B||_F^2."""
    xr = x @ m
    k = xr.shape[1]
    bt = np.linalg.solve(xr.T @ xr + lam * np.eye(k), xr.T @ x)
    return bt.T


CFG = RidgeConfig()


class TestSolveReconstruction:
    def test_matches_normal_equations_oracle(self, rng):
        x = rng.standard_normal((64, 10))
        reducer = build_reducer(prune(10, [0, 2, 5, 9]), 10)
        stats = gram_from_rows(x)
        res = solve_reconstruction(stats, reducer, CFG)
        expected = brute_force_ridge(x, reducer.m, res.lambda_used)
        assert np.abs(res.b - expected).max() < 1e-8

    def test_fold_matches_oracle(self, rng):
        x = rng.standard_normal((50, 6))
        reducer = build_reducer(fold(6, [(0, 1), (2, 3, 4), (5,)]), 6)
        stats = gram_from_rows(x)
        res = solve_reconstruction(stats, reducer, CFG)
        expected = brute_force_ridge(x, reducer.m, res.lambda_used)
        assert np.abs(res.b - expected).max() < 1e-8

    def test_keep_all_recovers_identity(self, rng):
        x = rng.standard_normal((40, 5))
        reducer = build_reducer(prune(5, range(5)), 5)
        res = solve_reconstruction(gram_from_rows(x), reducer, CFG, ridge=0.0)
        assert np.abs(res.b - np.eye(5)).max() < 1e-9

    def test_whitened_gram_closed_form(self):
        # G = I and orthonormal prune columns give B = M / (1 + lambda)
        reducer = build_reducer(prune(6, [1, 3, 4]), 6)
        stats = GramStats(np.eye(6), 100, (0, "consumer_input"))
        lam = 0.25
        res = solve_reconstruction(stats, reducer, CFG, ridge=lam)
        assert np.abs(res.b - reducer.m / (1.0 + lam)).max() < 1e-12

    def test_lambda_anchored_to_reduced_diag(self, rng):
        x = rng.standard_normal((30, 5)) * 10.0
        reducer = build_reducer(prune(5, [0, 3]), 5)
        stats = gram_from_rows(x)
        cfg = RidgeConfig(alpha=1e-2)
        res = solve_reconstruction(stats, reducer, cfg)
        g_red = stats.g[np.ix_([0, 3], [0, 3])]
        assert res.lambda_used == pytest.approx(1e-2 * np.diag(g_red).mean())

    def test_dead_channels_raise_degenerate(self):
        stats = GramStats(np.zeros((4, 4)), 10, (0, "consumer_input"))
        reducer = build_reducer(prune(4, [0, 1]), 4)
        with pytest.raises(DegenerateStatisticsError, match="dead"):
            solve_reconstruction(stats, reducer, CFG)

    def test_width_mismatch(self, rng):
        stats = gram_from_rows(rng.standard_normal((10, 5)))
        with pytest.raises(ShapeError):
            solve_reconstruction(stats, build_reducer(prune(4, [0]), 4), CFG)

    def test_alpha_bounds(self):
        with pytest.raises(ArgumentError):
            RidgeConfig(alpha=0.0)
        with pytest.raises(ArgumentError):
            RidgeConfig(alpha=1.0)


class TestReducedGrams:
    def test_prune_fast_path_equals_general(self, rng):
        g = rng.standard_normal((8, 8))
        g = g @ g.T
        reducer = build_reducer(prune(8, [1, 4, 6]), 8)
        fast = reduced_grams(g, reducer)
        slow = reduced_grams_general(g, reducer)
        assert np.abs(fast[0] - slow[0]).max() < 1e-12
        assert np.abs(fast[1] - slow[1]).max() < 1e-12

    def test_fold_uses_general_path(self, rng):
        g = rng.standard_normal((6, 6))
        g = g @ g.T
        reducer = build_reducer(fold(6, [(0, 1, 2), (3, 4, 5)]), 6)
        g_cross, g_red = reduced_grams(g, reducer)
        assert np.abs(g_cross - g @ reducer.m).max() < 1e-12
        assert np.abs(g_red - reducer.m.T @ g @ reducer.m).max() < 1e-12


class TestOutputError:
    def test_matches_direct_frobenius_for_prune(self, rng):
        x = rng.standard_normal((30, 6))
        w = rng.standard_normal((4, 6))
        reducer = build_reducer(prune(6, [0, 2, 5]), 6)
        stats = gram_from_rows(x)
        res = solve_reconstruction(stats, reducer, CFG, ridge=0.0)
        direct = np.linalg.norm(x @ w.T - (x @ reducer.m) @ (w @ res.b).T)
        via_gram = output_error(stats.g, w, reducer.m, res.b)
        assert via_gram == pytest.approx(direct, rel=1e-8)

    def test_zero_for_perfect_reconstruction(self, rng):
        w = rng.standard_normal((3, 4))
        reducer = build_reducer(prune(4, range(4)), 4)
        g = np.eye(4)
        assert output_error(g, w, reducer.m, np.eye(4)) == pytest.approx(0.0)

    def test_compensation_never_worse_at_zero_ridge(self, rng):
        for trial in range(20):
            x = rng.standard_normal((40, 8))
            w = rng.standard_normal((5, 8))
            reducer = build_reducer(prune(8, sorted(
                rng.choice(8, size=4, replace=False).tolist())), 8)
            stats = gram_from_rows(x)
            res = solve_reconstruction(stats, reducer, CFG, ridge=0.0)
            before = output_error(stats.g, w, reducer.m,
                                  naive_reconstruction(reducer))
            after = output_error(stats.g, w, reducer.m, res.b)
            assert after <= before + 1e-9


class TestMergeDense:
    def test_forward_matches_manual_composition(self, rng):
        block = make_dense_block(rng, c=5, h=10, o=4)
        graph = BlockGraph([block], (5,))
        batch = rng.standard_normal((40, 5))
        stats = accumulate_gram(graph, batch, 0)
        decision = prune(10, [0, 2, 3, 7, 9])
        new_block, res = merge_dense(block, decision, stats, CFG)
        assert new_block.hidden_width == 5
        # consumer weights absorbed B; producer rows selected
        assert np.abs(new_block.w_consumer - block.w_consumer @ res.b).max() == 0.0
        assert np.array_equal(new_block.b_consumer, block.b_consumer)
        # compensated output equals W B applied to reduced activations
        out, h_red = forward(BlockGraph([new_block], (5,)), batch, capture=0)
        manual = h_red @ (block.w_consumer @ res.b).T + block.b_consumer
        assert np.abs(out - manual).max() < 1e-10

    def test_errors_populated_and_ordered(self, rng):
        block = make_dense_block(rng, c=5, h=10, o=4)
        graph = BlockGraph([block], (5,))
        stats = accumulate_gram(graph, rng.standard_normal((40, 5)), 0)
        _, res = merge_dense(block, prune(10, [0, 1, 2, 3, 4]), stats, CFG,
                             ridge=0.0, block_index=0)
        assert res.block_index == 0
        assert np.isfinite(res.calib_error_before)
        assert res.calib_error_after <= res.calib_error_before + 1e-9

    def test_fold_merge_runs_end_to_end(self, rng):
        block = make_dense_block(rng, c=5, h=8, o=4)
        graph = BlockGraph([block], (5,))
        stats = accumulate_gram(graph, rng.standard_normal((30, 5)), 0)
        decision = fold(8, [(0, 1), (2, 3, 4), (5,), (6, 7)])
        new_block, res = merge_dense(block, decision, stats, CFG)
        assert new_block.hidden_width == 4
        out, _ = forward(BlockGraph([new_block], (5,)),
                         rng.standard_normal((4, 5)))
        assert np.all(np.isfinite(out))


class TestMergeFfn:
    def test_proj_absorbs_b(self, rng):
        block = make_ffn_block(rng, d=6, h=12)
        graph = BlockGraph([block], (6,))
        stats = accumulate_gram(graph, rng.standard_normal((50, 6)), 0)
        decision = prune(12, [0, 1, 4, 5, 8, 11])
        new_block, res = merge_ffn(block, decision, stats, CFG)
        assert np.abs(new_block.w_proj - block.w_proj @ res.b).max() == 0.0
        assert np.array_equal(new_block.b_proj, block.b_proj)
        assert new_block.hidden_width == 6


class TestMergeConv:
    def test_consumer_kernel_channel_mix_matches_loop(self, rng):
        block = make_conv_block(rng, c=3, h=8, o=4, k=3, padding=1)
        graph = BlockGraph([block], (3, 6, 6))
        batch = rng.standard_normal((2, 3, 6, 6))
        stats = accumulate_gram(graph, batch, 0)
        decision = prune(8, [0, 3, 4, 6])
        new_block, res = merge_conv(block, decision, stats, CFG)
        # per-offset oracle: each spatial tap mixes channels with B
        expected = np.zeros_like(new_block.w_consumer)
        for oi in range(4):
            for ki in range(3):
                for kj in range(3):
                    expected[oi, :, ki, kj] = res.b.T @ block.w_consumer[oi, :, ki, kj]
        assert np.abs(new_block.w_consumer - expected).max() < 1e-12

    def test_reduced_graph_forward_shape(self, rng):
        block = make_conv_block(rng, c=3, h=8, o=4, k=3, padding=1)
        graph = BlockGraph([block], (3, 6, 6))
        batch = rng.standard_normal((2, 3, 6, 6))
        stats = accumulate_gram(graph, batch, 0)
        new_block, _ = merge_conv(block, prune(8, [1, 2, 5]), stats, CFG)
        out, h = forward(BlockGraph([new_block], (3, 6, 6)), batch, capture=0)
        assert out.shape == (2, 4, 6, 6)
        assert h.shape[1] == 3


class TestMergeAttention:
    def test_mha_narrows_qkv_and_absorbs_b(self, rng):
        block = make_attention_block(rng, d=8, n_heads=4, head_dim=2)
        graph = BlockGraph([block], (8,))
        batch = rng.standard_normal((3, 6, 8))
        stats = accumulate_gram(graph, batch, 0)
        decision = prune(4, [0, 2], unit="head")
        new_block, res = merge_attention(block, decision, stats, CFG)
        assert new_block.n_heads == 2
        assert new_block.w_q.shape == (4, 8)
        assert new_block.w_k.shape == (4, 8)
        assert new_block.w_o.shape == (8, 4)
        assert np.abs(new_block.w_o - block.w_o @ res.b).max() == 0.0

    def test_gqa_keeps_shared_kv(self, rng):
        block = make_attention_block(rng, d=8, n_heads=4, head_dim=2,
                                     gqa_groups=2)
        graph = BlockGraph([block], (8,))
        stats = accumulate_gram(graph, rng.standard_normal((3, 6, 8)), 0)
        decision = prune(4, [0, 2], unit="head")
        new_block, _ = merge_attention(block, decision, stats, CFG)
        assert np.array_equal(new_block.w_k, block.w_k)
        assert np.array_equal(new_block.w_v, block.w_v)
        assert new_block.n_heads == 2
        assert new_block.gqa_groups == 2
        # reduced graph still runs
        out, _ = forward(BlockGraph([new_block], (8,)),
                         rng.standard_normal((2, 4, 8)))
        assert out.shape == (2, 4, 8)

    def test_channel_decision_rejected(self, rng):
        block = make_attention_block(rng, d=8, n_heads=4, head_dim=2)
        stats = GramStats(np.eye(8), 5, (0, "consumer_input"))
        with pytest.raises(ArgumentError, match="head"):
            merge_attention(block, prune(8, [0, 1]), stats, CFG)

    def test_keep_all_heads_near_identity_output(self, rng):
        block = make_attention_block(rng, d=8, n_heads=4, head_dim=2)
        graph = BlockGraph([block], (8,))
        batch = rng.standard_normal((3, 6, 8))
        stats = accumulate_gram(graph, batch, 0)
        decision = prune(4, [0, 1, 2, 3], unit="head")
        new_block, _ = merge_attention(block, decision, stats, CFG,
                                       ridge=1e-12)
        out_old, _ = forward(graph, batch)
        out_new, _ = forward(BlockGraph([new_block], (8,)), batch)
        assert np.abs(out_old - out_new).max() < 1e-6


class TestNaiveReduceBlock:
    def test_prune_equals_plain_column_drop(self, rng):
        block = make_dense_block(rng, c=5, h=8, o=4)
        decision = prune(8, [1, 3, 6])
        new_block, res = naive_reduce_block(block, decision)
        assert np.array_equal(new_block.w_consumer,
                              block.w_consumer[:, [1, 3, 6]])
        assert res.lambda_used == 0.0
        assert np.isnan(res.calib_error_before)

    def test_fold_consumer_copies_centroid_columns(self, rng):
        block = make_dense_block(rng, c=5, h=4, o=3)
        decision = fold(4, [(0, 2), (1, 3)])
        new_block, _ = naive_reduce_block(block, decision)
        expected = np.stack([block.w_consumer[:, 0] + block.w_consumer[:, 2],
                             block.w_consumer[:, 1] + block.w_consumer[:, 3]],
                            axis=1)
        assert np.abs(new_block.w_consumer - expected).max() < 1e-12

    def test_errors_equal_when_gram_given(self, rng):
        block = make_dense_block(rng, c=5, h=8, o=4)
        graph = BlockGraph([block], (5,))
        stats = accumulate_gram(graph, rng.standard_normal((20, 5)), 0)
        _, res = naive_reduce_block(block, prune(8, [0, 1, 2]), stats)
        assert res.calib_error_before == res.calib_error_after
        assert np.isfinite(res.calib_error_before)


class TestMergeBlockDispatch:
    @pytest.mark.parametrize("maker,shape,decision", [
        (lambda r: make_dense_block(r, c=4, h=6, o=4), (4,),
         prune(6, [0, 1, 2])),
        (lambda r: make_ffn_block(r, d=4, h=6), (4,), prune(6, [0, 1, 2])),
        (lambda r: make_conv_block(r, c=3, h=6, o=3, k=3, padding=1),
         (3, 5, 5), prune(6, [0, 1, 2])),
        (lambda r: make_attention_block(r, d=6, n_heads=3, head_dim=2), (6,),
         prune(3, [0, 2], unit="head")),
    ])
    def test_dispatch_reduces_width(self, rng, maker, shape, decision):
        block = maker(rng)
        graph = BlockGraph([block], shape)
        if len(shape) == 3:
            batch = rng.standard_normal((2, *shape))
        elif isinstance(decision.unit, str) and decision.unit == "head":
            batch = rng.standard_normal((2, 5, shape[0]))
        else:
            batch = rng.standard_normal((16, shape[0]))
        stats = accumulate_gram(graph, batch, 0)
        new_block, res = merge_block(block, decision, stats, CFG)
        assert isinstance(res, CompensationResult)
        assert new_block.hidden_width < block.hidden_width
        out, _ = forward(BlockGraph([new_block], shape), batch)
        assert np.all(np.isfinite(out))
