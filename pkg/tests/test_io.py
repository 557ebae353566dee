import struct

import numpy as np
import pytest

from conftest import (
    make_attention_block,
    make_conv_block,
    make_dense_block,
    make_ffn_block,
)
from grail.errors import FormatError
from grail.io_formats import (
    load_calibration,
    load_gram,
    load_model,
    save_calibration,
    save_gram,
    save_model,
)
from grail.model import BlockGraph, forward


def roundtrip(graph, tmp_path):
    path = tmp_path / "model.grlw"
    save_model(graph, path)
    return load_model(path)


class TestModelRoundTrip:
    @pytest.mark.parametrize("maker,shape", [
        (lambda r: make_dense_block(r, c=4, h=6, o=4), (4,)),
        (lambda r: make_ffn_block(r, d=5, h=9), (5,)),
        (lambda r: make_conv_block(r, c=3, h=5, o=3), (3, 4, 4)),
        (lambda r: make_attention_block(r, d=6, n_heads=3, head_dim=2), (6,)),
        (lambda r: make_attention_block(r, d=6, n_heads=4, head_dim=2,
                                        gqa_groups=2, causal=True), (6,)),
    ])
    def test_bit_exact_at_storage_precision(self, rng, tmp_path, maker, shape):
        graph = BlockGraph([maker(rng)], shape)
        loaded = roundtrip(graph, tmp_path)
        assert loaded.input_shape == graph.input_shape
        for name, val in vars(graph.blocks[0]).items():
            got = getattr(loaded.blocks[0], name)
            if isinstance(val, np.ndarray):
                assert np.array_equal(got, val.astype(np.float32).astype(np.float64))
            else:
                assert got == val

    def test_double_roundtrip_is_identity(self, rng, tmp_path):
        graph = BlockGraph([make_dense_block(rng)], (6,))
        once = roundtrip(graph, tmp_path)
        twice = roundtrip(once, tmp_path)
        for name, val in vars(once.blocks[0]).items():
            if isinstance(val, np.ndarray):
                assert np.array_equal(val, getattr(twice.blocks[0], name))

    def test_forward_unchanged_after_reload(self, rng, tmp_path):
        graph = roundtrip(BlockGraph([make_dense_block(rng)], (6,)), tmp_path)
        again = roundtrip(graph, tmp_path)
        batch = rng.standard_normal((4, 6))
        out1, _ = forward(graph, batch)
        out2, _ = forward(again, batch)
        assert np.array_equal(out1, out2)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.grlw"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="GRLW"):
            load_model(path)

    def test_bad_version(self, rng, tmp_path):
        path = tmp_path / "m.grlw"
        save_model(BlockGraph([make_dense_block(rng)], (6,)), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_model(path)

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "m.grlw"
        save_model(BlockGraph([make_dense_block(rng)], (6,)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)

    def test_manifest_count_mismatch(self, rng, tmp_path):
        import json
        path = tmp_path / "m.grlw"
        save_model(BlockGraph([make_dense_block(rng)], (6,)), path)
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<I", raw[8:12])
        manifest = json.loads(raw[12 : 12 + mlen])
        manifest["blocks"][0]["tensors"]["w_producer"]["count"] = 12
        new_manifest = json.dumps(manifest, sort_keys=True).encode()
        path.write_bytes(raw[:8] + struct.pack("<I", len(new_manifest))
                         + new_manifest + raw[12 + mlen:])
        with pytest.raises(FormatError, match="declares 12 elements"):
            load_model(path)


class TestCalibrationFiles:
    def test_roundtrip_bit_identical(self, rng, tmp_path):
        batch = rng.standard_normal((128, 16)).astype(np.float32)
        path = tmp_path / "c.grlc"
        save_calibration(batch, path)
        loaded = load_calibration(path)
        assert np.array_equal(loaded, batch.astype(np.float64))

    def test_rank4_roundtrip(self, rng, tmp_path):
        batch = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        path = tmp_path / "c.grlc"
        save_calibration(batch, path)
        assert np.array_equal(load_calibration(path), batch.astype(np.float64))

    def test_zero_samples_rejected(self, tmp_path):
        path = tmp_path / "c.grlc"
        save_calibration(np.zeros((0, 4)), path)
        with pytest.raises(FormatError, match="zero samples"):
            load_calibration(path)

    def test_payload_shorter_than_header(self, rng, tmp_path):
        path = tmp_path / "c.grlc"
        save_calibration(rng.standard_normal((4, 3)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_calibration(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "c.grlc"
        path.write_bytes(b"GRLW" + b"\x00" * 16)
        with pytest.raises(FormatError, match="GRLC"):
            load_calibration(path)


class TestGramFiles:
    def test_roundtrip(self, rng, tmp_path):
        g = rng.standard_normal((8, 8))
        g = g + g.T
        path = tmp_path / "g.grlg"
        save_gram(g, 100, path)
        loaded, n = load_gram(path)
        assert n == 100
        assert np.array_equal(loaded, g)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "g.grlg"
        save_gram(np.eye(4), 10, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_gram(path)
