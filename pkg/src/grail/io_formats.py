"""Binary (de)serialization for models, calibration batches, and Gram dumps.

All formats are little-endian with a 4-byte ASCII magic and a u32 version.
Tensor payloads are row-major IEEE-754: float32 for weights and calibration
data, float64 for Gram matrices. Round trips are bit-exact at the stored
precision.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .model import (
    AttentionBlock,
    BlockGraph,
    ConvBlock,
    DenseBlock,
    FfnBlock,
)

MODEL_MAGIC = b"GRLW"
CALIB_MAGIC = b"GRLC"
GRAM_MAGIC = b"GRLG"
VERSION = 1

_DENSE_TENSORS = ("w_producer", "b_producer", "w_consumer", "b_consumer")
_CONV_TENSORS = _DENSE_TENSORS
_FFN_TENSORS = ("w_fc", "b_fc", "w_proj", "b_proj")
_ATTN_TENSORS = ("w_q", "w_k", "w_v", "w_o")

_BLOCK_TENSORS = {
    "dense": _DENSE_TENSORS,
    "conv": _CONV_TENSORS,
    "ffn": _FFN_TENSORS,
    "attention": _ATTN_TENSORS,
}


def _block_type(block) -> str:
    if isinstance(block, DenseBlock):
        return "dense"
    if isinstance(block, ConvBlock):
        return "conv"
    if isinstance(block, FfnBlock):
        return "ffn"
    if isinstance(block, AttentionBlock):
        return "attention"
    raise FormatError(f"cannot serialize block type {type(block).__name__}")


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(data)}")
    return data


def _check_header(f, magic: bytes) -> None:
    got = f.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}; expected {magic.decode()!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}; expected {VERSION}")


def save_model(graph: BlockGraph, path) -> None:
    manifest_blocks = []
    payload_parts = []
    offset = 0
    for block in graph.blocks:
        btype = _block_type(block)
        tensors = {}
        for name in _BLOCK_TENSORS[btype]:
            arr = np.ascontiguousarray(getattr(block, name), dtype="<f4")
            tensors[name] = {
                "shape": list(arr.shape),
                "offset": offset,
                "count": int(arr.size),
            }
            payload_parts.append(arr.tobytes())
            offset += arr.size
        entry = {"type": btype, "tensors": tensors}
        if btype in ("dense", "conv"):
            entry["activation"] = block.activation
        if btype == "conv":
            entry["stride_producer"] = block.stride_producer
            entry["padding_producer"] = block.padding_producer
            entry["stride_consumer"] = block.stride_consumer
            entry["padding_consumer"] = block.padding_consumer
        if btype == "ffn":
            entry["activation"] = block.activation
        if btype == "attention":
            entry["n_heads"] = block.n_heads
            entry["head_dim"] = block.head_dim
            entry["gqa_groups"] = block.gqa_groups
            entry["causal"] = block.causal
        manifest_blocks.append(entry)
    manifest = json.dumps(
        {"input_shape": list(graph.input_shape), "blocks": manifest_blocks},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for part in payload_parts:
            f.write(part)


def _take_tensor(payload: np.ndarray, meta: dict, name: str) -> np.ndarray:
    shape = tuple(int(d) for d in meta["shape"])
    count = int(meta["count"])
    expected = int(np.prod(shape)) if shape else 1
    if count != expected:
        raise FormatError(
            f"manifest for {name} declares {count} elements but shape {shape} "
            f"implies {expected}"
        )
    start = int(meta["offset"])
    if start < 0 or start + count > payload.size:
        raise FormatError(
            f"truncated payload: tensor {name} needs elements "
            f"[{start}, {start + count}) of {payload.size}"
        )
    return payload[start : start + count].reshape(shape).astype(np.float64)


def load_model(path) -> BlockGraph:
    with open(path, "rb") as f:
        _check_header(f, MODEL_MAGIC)
        (manifest_len,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
        try:
            manifest = json.loads(_read_exact(f, manifest_len, "manifest"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        payload = np.frombuffer(f.read(), dtype="<f4")

    blocks = []
    for i, entry in enumerate(manifest.get("blocks", [])):
        btype = entry.get("type")
        if btype not in _BLOCK_TENSORS:
            raise FormatError(f"block {i}: unknown type {btype!r}")
        try:
            tensors = {
                name: _take_tensor(payload, entry["tensors"][name], f"block {i}.{name}")
                for name in _BLOCK_TENSORS[btype]
            }
        except KeyError as exc:
            raise FormatError(f"block {i}: manifest missing tensor {exc}") from exc
        if btype == "dense":
            blocks.append(DenseBlock(
                tensors["w_producer"], tensors["b_producer"], entry["activation"],
                tensors["w_consumer"], tensors["b_consumer"],
            ))
        elif btype == "conv":
            blocks.append(ConvBlock(
                tensors["w_producer"], tensors["b_producer"], entry["activation"],
                tensors["w_consumer"], tensors["b_consumer"],
                entry["stride_producer"], entry["padding_producer"],
                entry["stride_consumer"], entry["padding_consumer"],
            ))
        elif btype == "ffn":
            blocks.append(FfnBlock(
                tensors["w_fc"], tensors["b_fc"], tensors["w_proj"],
                tensors["b_proj"], entry["activation"],
            ))
        else:
            blocks.append(AttentionBlock(
                tensors["w_q"], tensors["w_k"], tensors["w_v"], tensors["w_o"],
                entry["n_heads"], entry["head_dim"], entry["gqa_groups"],
                bool(entry["causal"]),
            ))
    if not blocks:
        raise FormatError("model file contains no blocks")
    return BlockGraph(blocks, tuple(manifest.get("input_shape", ())))


def save_calibration(batch: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(batch, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CALIB_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def load_calibration(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, CALIB_MAGIC)
        (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
        if not 1 <= rank <= 4:
            raise FormatError(f"calibration rank {rank} out of range [1, 4]")
        shape = tuple(
            int(d) for d in np.frombuffer(_read_exact(f, 4 * rank, "dims"), dtype="<u4")
        )
        payload = np.frombuffer(f.read(), dtype="<f4")
    if shape[0] == 0:
        raise FormatError("calibration file holds zero samples")
    expected = int(np.prod(shape))
    if payload.size != expected:
        raise FormatError(
            f"truncated payload: header shape {shape} implies {expected} values, "
            f"found {payload.size}"
        )
    return payload.reshape(shape).astype(np.float64)


def save_gram(g: np.ndarray, n_samples: int, path) -> None:
    arr = np.ascontiguousarray(g, dtype="<f8")
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise FormatError(f"Gram matrix must be square, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(GRAM_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", arr.shape[0]))
        f.write(struct.pack("<Q", int(n_samples)))
        f.write(arr.tobytes())


def load_gram(path):
    with open(path, "rb") as f:
        _check_header(f, GRAM_MAGIC)
        (h,) = struct.unpack("<I", _read_exact(f, 4, "width"))
        (n_samples,) = struct.unpack("<Q", _read_exact(f, 8, "sample count"))
        payload = np.frombuffer(f.read(), dtype="<f8")
    if payload.size != h * h:
        raise FormatError(
            f"truncated payload: width {h} implies {h * h} values, found {payload.size}"
        )
    return payload.reshape(h, h).copy(), n_samples
