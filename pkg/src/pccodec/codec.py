"""End-to-end encoder/decoder over the occupancy pyramid.

The geometry segment is one continuous range-coded stream covering, in
canonical order:

    [root nibbles]                                   (uniform prior over 1..255)
    per predicted scale l = 1 .. cutoff-1:
        group1/stage0, group1/stage1[, group2/stage0, group2/stage1]

Scales >= cutoff carry no symbols; only the next scale's voxel count rides
in the header and the decoder reconstructs those scales by picking the k
most probable children under the model (first group first, then the second
group conditioned on the first group's own reconstruction).

A crc32 over every coded nibble rides in the container so any probability
divergence between encoder and decoder surfaces as a hard error instead of
silent corruption.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .container import BitstreamContainer, rate_split, write_varint
from .context_model import Checkpoint, ContextModel, split_code
from .errors import ConfigError, DecodeError, EmptyCloud, InvalidK
from .finetune import (
    IaftConfig,
    apply_quantized,
    cache_backbone,
    decode_weights,
    encode_weights,
    finetune,
    quantize_deltas,
)
from .geometry import (
    CHILD_OFFSETS,
    OccupancyLevel,
    PointCloud,
    VoxelPyramid,
    build_pyramid,
    morton_keys,
    morton_sort,
    o2v,
)
from .range_coder import (
    RangeDecoder,
    RangeEncoder,
    decode_symbols,
    encode_symbols,
    ideal_bits,
    quantize_pmf,
    quantize_pmf_batch,
)

_BIT_MATRIX = np.array([[(o >> b) & 1 for b in range(8)] for o in range(256)], dtype=np.float64)


@dataclass
class CodecConfig:
    """Per-encode settings; `coarse_cutoff` is the first scale reconstructed
    from a transmitted count (== depth or None means fully lossless)."""

    coarse_cutoff: int | None = None
    iaft: IaftConfig | None = None

    def cutoff_for(self, depth: int) -> int:
        if self.coarse_cutoff is None:
            return depth
        if not 0 <= self.coarse_cutoff <= depth:
            raise ConfigError(f"cutoff scale {self.coarse_cutoff} outside [0, {depth}]")
        return self.coarse_cutoff


@dataclass
class StageStat:
    name: str
    ideal_bits: float
    symbols: int


@dataclass
class EncodeStats:
    stages: list = field(default_factory=list)
    geometry_bytes: int = 0
    tuned: bool = False
    fallback: bool = False

    def framed_geometry_bits(self) -> int:
        if self.geometry_bytes == 0:
            return 0
        return 8 * (len(write_varint(self.geometry_bytes)) + self.geometry_bytes)

    def total_ideal_bits(self) -> float:
        return sum(s.ideal_bits for s in self.stages)


def _root_tables():
    """Exact uniform prior over the 255 nonzero codes, nibble-factorized."""
    p0 = np.array([15.0] + [16.0] * 15) / 255.0
    f0 = quantize_pmf(p0)
    f1 = np.empty((16, 16), dtype=np.int64)
    f1[0] = quantize_pmf(np.array([0.0] + [1.0 / 15] * 15))
    f1[1:] = quantize_pmf(np.full(16, 1.0 / 16))
    return f0, f1


def _encode_geometry(pyramid: VoxelPyramid, model: ContextModel, cutoff: int):
    """Returns (streams, crc over coded nibbles, per-stage stats).

    All coded scales share one range-coder stream; `streams` is [] when no
    scale is coded and a single-element list otherwise.
    """
    stats = []
    crc = 0
    if cutoff == 0:
        return [], crc, stats
    enc = RangeEncoder()
    root = pyramid.levels[0]
    o0, o1 = int(root.codes[0]) % 16, int(root.codes[0]) >> 4
    f0, f1 = _root_tables()
    freqs = np.stack([f0, f1[o0]])
    encode_symbols(enc, np.array([o0, o1]), freqs)
    crc = zlib.crc32(bytes([o0, o1]), crc)
    stats.append(StageStat("L0/root", ideal_bits(freqs, np.array([o0, o1])), 2))
    for l in range(1, cutoff):
        src = pyramid.levels[l - 1]
        tgt = pyramid.levels[l]
        session = model.level_session(src, tgt.coords)
        truth = np.asarray(tgt.codes, dtype=np.int64)
        while not session.done():
            name, rows, pmfs = session.next_stage()
            o0, o1 = split_code(truth[rows])
            sym = o0 if name.endswith("s0") else o1
            ib = 0.0
            if len(rows):
                qfreqs = quantize_pmf_batch(pmfs)
                encode_symbols(enc, sym, qfreqs)
                ib = ideal_bits(qfreqs, sym)
            crc = zlib.crc32(sym.astype(np.uint8).tobytes(), crc)
            stats.append(StageStat(f"L{l}/{name}", ib, len(rows)))
            session.feed(sym)
    return [enc.finish()], crc, stats


def encode(pc: PointCloud, ckpt: Checkpoint, cfg: CodecConfig | None = None) -> BitstreamContainer:
    """Compress a voxelized cloud; the result carries encoder-side stats."""
    cfg = cfg or CodecConfig()
    if len(pc) == 0:
        raise EmptyCloud("nothing to encode")
    cutoff = cfg.cutoff_for(pc.depth)
    pyramid = build_pyramid(pc)
    model = ckpt.model()

    sizes = [len(lv) for lv in pyramid.levels] + [len(pc)]
    point_counts = [sizes[s + 1] for s in range(cutoff, pc.depth)]

    plain_streams, crc, plain_stats = _encode_geometry(pyramid, model, cutoff)
    plain_bytes = sum(len(s) for s in plain_streams)
    stats = EncodeStats(stages=plain_stats, geometry_bytes=plain_bytes)
    weight_segment = b""
    streams = plain_streams
    fallback = False

    if cfg.iaft is not None and cfg.iaft.iterations > 0 and cutoff > 0:
        cache = cache_backbone(pyramid, model, cfg.iaft.cache_limit_bytes)
        tuned = finetune(pyramid, model, cfg.iaft, cache)
        wseg = encode_weights(tuned, ckpt.params)
        tuned_params = apply_quantized(ckpt.params, quantize_deltas(tuned), tuned.quant_step)
        tuned_model = ContextModel(tuned_params, ckpt.config)
        tuned_streams, tuned_crc, tuned_stats = _encode_geometry(pyramid, tuned_model, cutoff)
        assert tuned_crc == crc  # same ground-truth symbols either way
        tuned_bytes = sum(len(s) for s in tuned_streams)
        plain_bits = stats.framed_geometry_bits()
        tuned_bits = 8 * len(wseg) + EncodeStats(geometry_bytes=tuned_bytes).framed_geometry_bits()
        if tuned_bits < plain_bits:
            weight_segment = wseg
            streams = tuned_streams
            stats = EncodeStats(stages=tuned_stats, geometry_bytes=tuned_bytes, tuned=True)
        else:
            fallback = True
            stats.fallback = True

    container = BitstreamContainer(
        depth=pc.depth,
        coarse_cutoff=cutoff,
        model_id=ckpt.digest(),
        point_counts=point_counts,
        weight_segment=weight_segment,
        geometry_streams=streams,
        check=crc,
        fallback=fallback,
        encoder_stats=stats,
    )
    return container


def joint_pmf(stage0: np.ndarray, stage1: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Joint 256-entry code PMF from cascade stages.

    stage0[i, o0] and stage1[i, o0, o1] combine to entry o = o0 + 16*o1.
    With renormalize=True the (invalid) code-0 mass is redistributed
    proportionally across codes 1..255.
    """
    joint = stage0[:, :, None] * stage1
    out = joint.transpose(0, 2, 1).reshape(len(stage0), 256)
    if renormalize:
        out = zero_code_renormalize(out)
    return out


def zero_code_renormalize(joint: np.ndarray) -> np.ndarray:
    out = joint.copy()
    out[:, 0] = 0.0
    out /= np.maximum(out.sum(axis=1, keepdims=True), 1e-30)
    return out


def _select_topk(parents: np.ndarray, childprob: np.ndarray, kq: int):
    """Globally pick the kq most probable children; Morton key breaks ties.

    Returns (selected child coords, per-parent implied codes).
    """
    codes = np.zeros(len(parents), dtype=np.int64)
    if kq == 0 or len(parents) == 0:
        return np.zeros((0, 3), dtype=np.int32), codes
    flat = childprob.ravel()
    children_all = (parents[:, None, :] * 2 + CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
    keys = morton_keys(children_all)
    order = np.lexsort((keys, -flat))
    pick = order[:kq]
    np.bitwise_or.at(codes, pick // 8, np.int64(1) << (pick % 8))
    return children_all[pick].astype(np.int32), codes


def topk_reconstruct(model: ContextModel, context_level, parent_coords: np.ndarray, k: int):
    """Reconstruct one scale from its voxel count only.

    `context_level` is the coarser level with known (or implied) codes, or
    None at the root where a uniform prior applies.  The first checkerboard
    group is resolved first; its implied codes condition the second group.
    Returns (child coords, implied OccupancyLevel for the parents).
    """
    n = len(parent_coords)
    if k < 1 or k > 8 * n:
        raise InvalidK(f"k={k} outside [1, {8 * n}]")
    scale = 0 if context_level is None else context_level.scale + 1

    if context_level is None:
        uniform = np.full((n, 256), 1.0 / 255.0)
        uniform[:, 0] = 0.0
        childprob = uniform @ _BIT_MATRIX
        children, codes = _select_topk(parent_coords, childprob, k)
        keep = codes > 0
        level = OccupancyLevel(scale, parent_coords[keep], codes[keep].astype(np.uint8))
        return morton_sort(children), level

    bb = model._backbone(context_level, parent_coords)
    g1 = bb["g1"]
    g2 = bb["g2"]
    n1c, n2c = 8 * len(g1), 8 * len(g2)
    if n2c == 0:
        k1, k2 = k, 0
    elif n1c == 0:
        k1, k2 = 0, k
    else:
        k1 = (k * n1c) // (n1c + n2c)
        k2 = (k * n2c) // (n1c + n2c)
        k1 += k - k1 - k2  # remainder to the first group
        if k1 > n1c:
            k2 += k1 - n1c
            k1 = n1c
        if k2 > n2c:
            k1 += k2 - n2c
            k2 = n2c

    j1 = zero_code_renormalize(model.code_joint(bb["F"][g1], "g1"))
    sel1, codes1 = _select_topk(parent_coords[g1], j1 @ _BIT_MATRIX, k1)

    codes_all = np.zeros(n, dtype=np.int64)
    codes_all[g1] = codes1
    if len(g2):
        c2, _ = model._aggregate(bb, codes1)
        j2 = zero_code_renormalize(model.code_joint(c2, "g2"))
        sel2, codes2 = _select_topk(parent_coords[g2], j2 @ _BIT_MATRIX, k2)
        codes_all[g2] = codes2
    else:
        sel2 = np.zeros((0, 3), dtype=np.int32)

    children = morton_sort(np.concatenate([sel1, sel2], axis=0))
    keep = codes_all > 0
    level = OccupancyLevel(scale, parent_coords[keep], codes_all[keep].astype(np.uint8))
    return children, level


def decode(container, ckpt: Checkpoint, collect_levels: list | None = None) -> PointCloud:
    """Invert encode(); raises DecodeError on any stream inconsistency.

    `collect_levels`, if given, receives every decoded (or count-implied)
    OccupancyLevel in scale order.
    """
    if isinstance(container, (bytes, bytearray)):
        container = BitstreamContainer.from_bytes(bytes(container))
    if container.model_id != ckpt.digest():
        raise ConfigError("bitstream was produced with a different checkpoint")
    params = ckpt.params
    if container.weight_segment:
        params, _step = decode_weights(container.weight_segment, ckpt.params)
    model = ContextModel(params, ckpt.config)

    depth = container.depth
    cutoff = container.coarse_cutoff
    streams = container.geometry_streams
    crc = 0

    if cutoff > 0 and len(streams) != 1:
        raise DecodeError(f"expected one geometry stream, found {len(streams)}")
    if cutoff == 0 and streams:
        raise DecodeError("fully count-reconstructed stream must carry no symbols")

    coords = np.array([[0, 0, 0]], dtype=np.int32)
    prev_level = None
    if cutoff > 0:
        dec = RangeDecoder(streams[0])
        f0, f1 = _root_tables()
        o0 = int(decode_symbols(dec, 1, f0[None, :])[0])
        o1 = int(decode_symbols(dec, 1, f1[o0][None, :])[0])
        code = o0 + 16 * o1
        if code == 0:
            raise DecodeError("root decoded to the empty code")
        crc = zlib.crc32(bytes([o0, o1]), crc)
        prev_level = OccupancyLevel(0, coords, np.array([code], dtype=np.uint8))
        coords = o2v(prev_level.coords, prev_level.codes)
    else:
        coords, prev_level = topk_reconstruct(model, None, coords, container.point_counts[0])
    if collect_levels is not None:
        collect_levels.append(prev_level)

    for l in range(1, depth):
        if l < cutoff:
            session = model.level_session(prev_level, coords)
            while not session.done():
                name, rows, pmfs = session.next_stage()
                if len(rows):
                    freqs = quantize_pmf_batch(pmfs)
                    sym = decode_symbols(dec, len(rows), freqs)
                else:
                    sym = np.zeros(0, dtype=np.int64)
                crc = zlib.crc32(sym.astype(np.uint8).tobytes(), crc)
                session.feed(sym)
            codes = session.codes()
            if np.any(codes == 0):
                raise DecodeError(f"scale {l}: decoded an empty occupancy code")
            prev_level = OccupancyLevel(l, coords, codes.astype(np.uint8))
            coords = o2v(prev_level.coords, prev_level.codes)
        else:
            k = container.point_counts[l - cutoff]
            coords, prev_level = topk_reconstruct(model, prev_level, coords, k)
        if collect_levels is not None:
            collect_levels.append(prev_level)

    if crc != container.check:
        raise DecodeError("stream check value mismatch (encoder/decoder desync)")
    return PointCloud(coords, depth)


def compute_bpp(container, pc: PointCloud) -> float:
    """Total container bits divided by the original point count."""
    if isinstance(container, BitstreamContainer):
        nbytes = len(container.to_bytes())
    else:
        nbytes = len(container)
    return 8.0 * nbytes / len(pc)
