"""Per-instance adaptation of the prediction heads and the weight bitstream.

The frozen backbone runs once; the trunk outputs feeding every head are
cached, so the optimization loop touches only the four small projection
heads.  Tuned weights are shipped as quantized deltas against the pretrained
heads: sign + Exp-Golomb binarization through adaptive per-bin binary
contexts.  The encoder re-runs head inference with the *quantized* weights
before committing to the geometry stream, so both codec sides agree exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .context_model import LN2, ContextModel, split_code, tunable_names
from .errors import CacheTooLarge, DecodeError, TrainingDiverged
from .geometry import VoxelPyramid
from .nn import AdamHyper, AdamState, adam_step, dense_forward, softmax
from .range_coder import AdaptiveBitDecoder, AdaptiveBitEncoder


@dataclass
class IaftConfig:
    """Knobs for instance-adaptive head tuning."""

    iterations: int = 200
    lr: float = 0.02
    l1_weight: float = 1e-4  # pulls deltas toward zero to shrink the weight stream
    quant_step: float = 2.0 ** -7
    l1_on_absolute: bool = False  # True penalizes |pretrained + delta| instead
    cache_limit_bytes: int = 1 << 31
    seed: int = 0


@dataclass
class TunedHeads:
    """Raw per-parameter deltas (tuned - pretrained) plus the quantizer step."""

    deltas: dict
    quant_step: float


@dataclass
class BackboneCache:
    """Trunk outputs and target nibbles per (level, group, stage)."""

    stages: list = field(default_factory=list)  # (head name, X rows, symbols)
    nbytes: int = 0


def head_order(params: dict) -> list:
    """Canonical head enumeration used by the weight segment layout."""
    heads = sorted({n.rsplit(".", 1)[0] for n in tunable_names(params)})
    return heads


def cache_backbone(pyramid: VoxelPyramid, model: ContextModel, limit_bytes: int | None = None) -> BackboneCache:
    """One frozen-backbone pass; caches every head's input rows and targets."""
    cache = BackboneCache()
    limit = limit_bytes if limit_bytes is not None else IaftConfig().cache_limit_bytes
    for src, tgt in zip(pyramid.levels[:-1], pyramid.levels[1:]):
        session = model.level_session(src, tgt.coords)
        truth = np.asarray(tgt.codes, dtype=np.int64)
        while not session.done():
            name, rows, _pmfs = session.next_stage()
            g, s = name[:2], name[2:]
            X = session._X[g]
            o0, o1 = split_code(truth[rows])
            if model.cfg.cascade:
                sym = o0 if s == "s0" else o1
                stage_X = X if s == "s0" else X + model.params[f"cond_{g}"][o0]
                trunk_w = model.params[f"trunk_{g}{s}.w"]
                trunk_b = model.params[f"trunk_{g}{s}.b"]
                T = np.maximum(stage_X @ trunk_w.T + trunk_b, 0)
                cache.stages.append((f"head_{g}{s}", T, sym))
                cache.nbytes += T.nbytes
            elif s == "s0":
                trunk_w = model.params[f"trunk_{g}s0.w"]
                trunk_b = model.params[f"trunk_{g}s0.b"]
                T = np.maximum(X @ trunk_w.T + trunk_b, 0)
                cache.stages.append((f"head_{g}s0", T, truth[rows]))
                cache.nbytes += T.nbytes
            if cache.nbytes > limit:
                raise CacheTooLarge(f"backbone cache exceeds {limit} bytes")
            session.feed(o0 if s == "s0" else o1)
    return cache


def cache_logits(cache: BackboneCache, params: dict) -> dict:
    """Head logits recomputed from cached trunk outputs (bit-identical to a
    full forward because the same matmul runs on the same rows)."""
    out = {}
    for i, (head, T, _sym) in enumerate(cache.stages):
        out[i] = dense_forward(T, params[head + ".w"], params[head + ".b"])
    return out


def finetune(pyramid: VoxelPyramid, model: ContextModel, cfg: IaftConfig, cache: BackboneCache | None = None) -> TunedHeads:
    """Adam on the head parameters only; mean nibble bits + L1 on the deltas."""
    if cache is None:
        cache = cache_backbone(pyramid, model, cfg.cache_limit_bytes)
    pretrained = {n: model.params[n] for n in tunable_names(model.params)}
    heads = {n: p.copy() for n, p in pretrained.items()}
    if cfg.iterations == 0:
        return TunedHeads({n: np.zeros_like(p) for n, p in pretrained.items()}, cfg.quant_step)

    nsym = sum(len(sym) for _, _, sym in cache.stages)
    if nsym == 0:
        return TunedHeads({n: np.zeros_like(p) for n, p in pretrained.items()}, cfg.quant_step)
    state = AdamState()
    hyper = AdamHyper(lr=cfg.lr)
    nparams = sum(p.size for p in heads.values())
    scale = 1.0 / (nsym * LN2)
    for _ in range(cfg.iterations):
        grads = {}
        bits = 0.0
        for head, T, sym in cache.stages:
            if len(sym) == 0:
                continue
            w = heads[head + ".w"]
            b = heads[head + ".b"]
            P = softmax(dense_forward(T, w, b))
            rows = np.arange(len(sym))
            picked = P[rows, sym]
            bits += float(-np.log2(np.maximum(picked, 1e-30)).sum())
            gL = P
            gL[rows, sym] -= 1.0
            gL *= scale
            gw = gL.T @ T
            gb = gL.sum(axis=0)
            grads[head + ".w"] = grads.get(head + ".w", 0) + gw
            grads[head + ".b"] = grads.get(head + ".b", 0) + gb
        if not np.isfinite(bits):
            raise TrainingDiverged("instance adaptation produced non-finite loss")
        for name in heads:
            ref = heads[name] if cfg.l1_on_absolute else heads[name] - pretrained[name]
            grads[name] = grads.get(name, 0) + cfg.l1_weight * np.sign(ref) / nparams
        adam_step(heads, grads, state, hyper)
    deltas = {n: heads[n] - pretrained[n] for n in heads}
    return TunedHeads(deltas, cfg.quant_step)


def quantize_deltas(tuned: TunedHeads) -> dict:
    """Integer delta grid: q = round(delta / step)."""
    return {
        n: np.rint(d.astype(np.float64) / tuned.quant_step).astype(np.int64)
        for n, d in tuned.deltas.items()
    }


def apply_quantized(params: dict, qdeltas: dict, step: float) -> dict:
    """Pretrained + q*step on the heads; backbone arrays are shared untouched."""
    out = dict(params)
    step32 = np.float32(step)
    for name, q in qdeltas.items():
        out[name] = params[name] + q.astype(np.float32) * step32
    return out


def _encode_eg0(enc: AdaptiveBitEncoder, prefix_ctx: str, suffix_ctx: str, n: int) -> None:
    m = n + 1
    L = m.bit_length()
    for i in range(L - 1):
        enc.encode_bit(f"{prefix_ctx}{min(i, 11)}", 0)
    enc.encode_bit(f"{prefix_ctx}{min(L - 1, 11)}", 1)
    for i in range(L - 2, -1, -1):
        enc.encode_bit(f"{suffix_ctx}{min(i, 11)}", (m >> i) & 1)


def _decode_eg0(dec: AdaptiveBitDecoder, prefix_ctx: str, suffix_ctx: str) -> int:
    L = 0
    while dec.decode_bit(f"{prefix_ctx}{min(L, 11)}") == 0:
        L += 1
        if L > 64:
            raise DecodeError("weight stream: runaway Exp-Golomb prefix")
    m = 1
    for i in range(L - 1, -1, -1):
        m = (m << 1) | dec.decode_bit(f"{suffix_ctx}{min(i, 11)}")
    return m - 1


def encode_weights(tuned: TunedHeads, params: dict) -> bytes:
    """Weight segment: [step f32][per head: count varint, length varint, bytes]."""
    from .container import write_varint  # local import; container has no deps on us

    qdeltas = quantize_deltas(tuned)
    out = bytearray(struct.pack("<f", np.float32(tuned.quant_step)))
    for head in head_order(params):
        values = np.concatenate(
            [qdeltas[head + ".w"].ravel(), qdeltas[head + ".b"].ravel()]
        )
        enc = AdaptiveBitEncoder()
        for v in values.tolist():
            _encode_eg0(enc, "p", "s", abs(v))
            if v != 0:
                enc.encode_bit("sign", 1 if v < 0 else 0)
        stream = enc.finish()
        out += write_varint(len(values))
        out += write_varint(len(stream))
        out += stream
    return bytes(out)


def decode_weights(data: bytes, params: dict):
    """Inverse of encode_weights; returns (tuned param dict, quant step)."""
    from .container import read_varint as _read_varint
    from .errors import ParseError

    def read_varint(buf, pos):
        try:
            return _read_varint(buf, pos)
        except ParseError as exc:
            raise DecodeError(f"weight segment framing: {exc}") from exc

    if len(data) < 4:
        raise DecodeError("weight segment truncated")
    (step,) = struct.unpack("<f", data[:4])
    pos = 4
    qdeltas = {}
    for head in head_order(params):
        w_shape = params[head + ".w"].shape
        b_shape = params[head + ".b"].shape
        expect = int(np.prod(w_shape)) + int(np.prod(b_shape))
        count, pos = read_varint(data, pos)
        if count != expect:
            raise DecodeError(f"weight segment: {head} carries {count} values, expected {expect}")
        length, pos = read_varint(data, pos)
        if pos + length > len(data):
            raise DecodeError("weight segment truncated")
        dec = AdaptiveBitDecoder(data[pos : pos + length])
        pos += length
        values = np.zeros(expect, dtype=np.int64)
        for i in range(expect):
            mag = _decode_eg0(dec, "p", "s")
            if mag != 0 and dec.decode_bit("sign"):
                mag = -mag
            values[i] = mag
        wsize = int(np.prod(w_shape))
        qdeltas[head + ".w"] = values[:wsize].reshape(w_shape)
        qdeltas[head + ".b"] = values[wsize:].reshape(b_shape)
    if pos != len(data):
        raise DecodeError("weight segment has trailing bytes")
    return apply_quantized(params, qdeltas, step), step
