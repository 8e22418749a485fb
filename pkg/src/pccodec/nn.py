"""Deterministic sparse-tensor math: sparse 3D convolution with gradients,
dense layers, embeddings, Adam, and flat-f32 parameter serialization.

Everything here is plain numpy.  Neighbor lookup goes through binary search
on Morton keys so iteration order is canonical, and all accumulation happens
in a fixed offset order; identical inputs therefore produce bit-identical
outputs on a given platform, which the entropy-coding path relies on.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, ShapeError
from .geometry import morton_keys

MAX_COORD = (1 << 16) - 1


@dataclass(frozen=True, eq=False)
class SparseFeatureMap:
    """Feature rows attached to Morton-sorted voxel coordinates."""

    coords: np.ndarray  # (N, 3) int32, Morton-sorted, unique
    feats: np.ndarray  # (N, C) float

    def __post_init__(self):
        if len(self.coords) != len(self.feats):
            raise ShapeError("coords/feats row mismatch")

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def keys(self) -> np.ndarray:
        return morton_keys(self.coords)


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass(frozen=True, eq=False)
class Embedding:
    table: np.ndarray  # (V, C)


def kernel_offsets(size: int) -> np.ndarray:
    """Lexicographically ordered offsets of a size^3 kernel (size odd)."""
    r = size // 2
    axes = np.arange(-r, r + 1, dtype=np.int32)
    grid = np.stack(np.meshgrid(axes, axes, axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class SparseConvKernel:
    """Per-offset out x in weight matrices plus one shared bias."""

    offsets: np.ndarray  # (K, 3) int32, unique
    weights: np.ndarray  # (K, out, in)
    bias: np.ndarray  # (out,)

    @property
    def reach(self) -> int:
        return int(np.abs(self.offsets).max())


class NeighborMap:
    """Resolved gather indices: idx[k, j] = input row of out_coords[j] + offsets[k], or -1."""

    __slots__ = ("offsets", "idx", "n_out")

    def __init__(self, offsets, idx, n_out):
        self.offsets = offsets
        self.idx = idx
        self.n_out = n_out


def build_neighbor_map(
    in_coords: np.ndarray,
    out_coords: np.ndarray,
    offsets: np.ndarray,
    in_keys: np.ndarray | None = None,
) -> NeighborMap:
    """Binary-search every (output, offset) pair against the sorted input keys."""
    if in_keys is None:
        in_keys = morton_keys(in_coords)
    n_in = len(in_keys)
    n_out = len(out_coords)
    k = len(offsets)
    idx = np.full((k, n_out), -1, dtype=np.int64)
    if n_in == 0 or n_out == 0:
        return NeighborMap(offsets, idx, n_out)
    base = np.asarray(out_coords, dtype=np.int64)
    for ki in range(k):
        nb = base + offsets[ki]
        valid = ((nb >= 0) & (nb <= MAX_COORD)).all(axis=1)
        if not valid.any():
            continue
        keys = morton_keys(nb[valid])
        pos = np.searchsorted(in_keys, keys)
        pos[pos >= n_in] = n_in - 1
        hit = in_keys[pos] == keys
        rows = np.flatnonzero(valid)[hit]
        idx[ki, rows] = pos[hit]
    return NeighborMap(offsets, idx, n_out)


def conv_apply(feats_in: np.ndarray, nbmap: NeighborMap, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out[j] = sum_k W[k] @ in[j + offset_k] + bias, fixed offset order."""
    if weights.shape[2] != feats_in.shape[1]:
        raise ShapeError(
            f"kernel expects {weights.shape[2]} input channels, got {feats_in.shape[1]}"
        )
    out = np.tile(bias.astype(feats_in.dtype), (nbmap.n_out, 1))
    for ki in range(len(weights)):
        rows = nbmap.idx[ki]
        present = rows >= 0
        if not present.any():
            continue
        gathered = feats_in[rows[present]]
        out[present] += gathered @ weights[ki].T
    return out


def conv_grads(
    feats_in: np.ndarray, nbmap: NeighborMap, weights: np.ndarray, grad_out: np.ndarray
):
    """Gradients of conv_apply w.r.t. input rows, kernel weights, and bias."""
    if grad_out.shape[0] != nbmap.n_out:
        raise ShapeError("grad_out rows do not match the forward output")
    grad_in = np.zeros_like(feats_in)
    grad_w = np.zeros_like(weights)
    for ki in range(len(weights)):
        rows = nbmap.idx[ki]
        present = rows >= 0
        if not present.any():
            continue
        g = grad_out[present]
        src = rows[present]
        gathered = feats_in[src]
        grad_w[ki] = g.T @ gathered
        np.add.at(grad_in, src, g @ weights[ki])
    grad_b = grad_out.sum(axis=0, dtype=grad_out.dtype)
    return grad_in, grad_w, grad_b


def sparse_conv(fmap: SparseFeatureMap, kernel: SparseConvKernel, out_coords: np.ndarray):
    """Spec-facing sparse convolution; returns (SparseFeatureMap, ctx for backward)."""
    nbmap = build_neighbor_map(fmap.coords, out_coords, kernel.offsets)
    out = conv_apply(fmap.feats, nbmap, kernel.weights, kernel.bias)
    ctx = (fmap, kernel, nbmap)
    return SparseFeatureMap(np.asarray(out_coords), out), ctx


def sparse_conv_backward(grad_out: np.ndarray, ctx):
    """Backward pass matching sparse_conv; returns (grad_input, grad_kernel, grad_bias)."""
    fmap, kernel, nbmap = ctx
    return conv_grads(fmap.feats, nbmap, kernel.weights, grad_out)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects {w.shape[1]} inputs, got {x.shape[1]}")
    return x @ w.T + b


def dense_grads(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0, dtype=grad_out.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (out > 0)


def mlp_forward(x: np.ndarray, layers) -> np.ndarray:
    """Affine chain with ReLU on hidden layers and raw logits at the output."""
    h = x
    for i, layer in enumerate(layers):
        h = dense_forward(h, layer.weights, layer.bias)
        if i + 1 < len(layers):
            h = relu(h)
    return h


def embedding_lookup(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return table[np.asarray(idx, dtype=np.int64)]


def embedding_grad(table_shape, idx: np.ndarray, grad_out: np.ndarray, dtype) -> np.ndarray:
    g = np.zeros(table_shape, dtype=dtype)
    np.add.at(g, np.asarray(idx, dtype=np.int64), grad_out)
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> None:
    """One in-place Adam update over a dict of parameter arrays."""
    state.t += 1
    bc1 = 1.0 - hyper.beta1 ** state.t
    bc2 = 1.0 - hyper.beta2 ** state.t
    step = hyper.lr / bc1
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        params[name] -= step * m / (np.sqrt(v / bc2) + hyper.eps)


# --- parameter serialization: JSON manifest + flat little-endian f32 payload ---

_CKPT_MAGIC = b"PCCK"


def params_to_bytes(params: dict, frozen: dict | None = None, meta: dict | None = None) -> bytes:
    """Serialize named f32 arrays with a (name, shape, offset, frozen) manifest."""
    entries = []
    payload = bytearray()
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "frozen": bool(frozen.get(name, True)) if frozen is not None else True,
            }
        )
        payload += arr.tobytes()
        offset += arr.size
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    return _CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest + bytes(payload)


def params_from_bytes(data: bytes):
    """Inverse of params_to_bytes; returns (params, frozen_flags, meta)."""
    if data[:4] != _CKPT_MAGIC:
        raise InvariantViolation("not a parameter checkpoint")
    (mlen,) = struct.unpack("<I", data[4:8])
    manifest = json.loads(data[8 : 8 + mlen].decode())
    payload = np.frombuffer(data[8 + mlen :], dtype="<f4")
    params = {}
    frozen = {}
    for ent in manifest["entries"]:
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = payload[ent["offset"] : ent["offset"] + size].reshape(ent["shape"])
        params[ent["name"]] = arr.astype(np.float32)
        frozen[ent["name"]] = ent["frozen"]
    return params, frozen, manifest.get("meta", {})


def save_params(path, params: dict, frozen: dict | None = None, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params, frozen, meta))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def params_digest(params: dict) -> int:
    """Stable 64-bit id of a parameter set (hash of its serialized arrays)."""
    blob = params_to_bytes(params)
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")
