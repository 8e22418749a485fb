"""Occupancy-code context model with spatial and channel-wise conditioning.

One parameter-shared network processes every pyramid scale.  Per scale
transition it runs:

1. a prior network over the coarser level's code embeddings (two residual
   sparse-conv blocks),
2. upsampling: each child voxel copies its parent feature and adds one of 8
   child-offset embeddings,
3. a target sparse conv producing the per-child context field,
4. two-phase coding over a 3D checkerboard: even-parity voxels first, then
   odd-parity voxels conditioned on the decoded even-parity codes through a
   masked neighborhood convolution and a fusion layer,
5. within each phase, a two-stage nibble cascade (low nibble, then the high
   nibble conditioned on it) through per-stage trunk+projection heads.

Only the final projection heads are tunable per instance; everything else is
a frozen backbone.  Encoder and decoder drive the identical ``LevelSession``
state machine, so probability tables match bit for bit on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvariantViolation, TrainingDiverged
from .geometry import OccupancyLevel, VoxelPyramid, morton_keys, o2v
from .nn import (
    AdamHyper,
    AdamState,
    SparseFeatureMap,
    adam_step,
    build_neighbor_map,
    conv_apply,
    conv_grads,
    dense_forward,
    kernel_offsets,
    relu,
    softmax,
)

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; the ablation grid toggles the last three."""

    channels: int = 64
    kernel_size: int = 3
    agg_kernel: int = 3  # neighborhood used when conditioning the second group
    checkerboard: bool = True  # spatial two-phase grouping
    aggregation: bool = True  # neighbor conditioning for the second phase
    cascade: bool = True  # two-stage nibble factorization

    @property
    def head_width(self) -> int:
        return 16 if self.cascade else 256

    @property
    def groups(self):
        return ("g1", "g2") if self.checkerboard else ("g1",)

    def to_meta(self) -> dict:
        return {
            "channels": self.channels,
            "kernel_size": self.kernel_size,
            "agg_kernel": self.agg_kernel,
            "checkerboard": self.checkerboard,
            "aggregation": self.aggregation,
            "cascade": self.cascade,
        }

    @staticmethod
    def from_meta(meta: dict) -> "ModelConfig":
        return ModelConfig(
            channels=int(meta["channels"]),
            kernel_size=int(meta["kernel_size"]),
            agg_kernel=int(meta["agg_kernel"]),
            checkerboard=bool(meta["checkerboard"]),
            aggregation=bool(meta["aggregation"]),
            cascade=bool(meta["cascade"]),
        )


def split_code(o):
    """8-bit code -> (low nibble, high nibble)."""
    o = np.asarray(o)
    return o % 16, o // 16


def merge_code(o0, o1):
    """Inverse of split_code; code 0 is invalid for an occupied voxel."""
    o0 = np.asarray(o0)
    o1 = np.asarray(o1)
    merged = o0 + 16 * o1
    if np.any(merged == 0):
        raise InvariantViolation("occupied voxel cannot carry code 0")
    return merged


def partition_checkerboard(coords: np.ndarray):
    """Indices of even-parity (first) and odd-parity (second) voxels."""
    parity = (coords[:, 0] + coords[:, 1] + coords[:, 2]) & 1
    return np.flatnonzero(parity == 0), np.flatnonzero(parity == 1)


def init_params(cfg: ModelConfig, seed: int = 0):
    """Seeded parameter dict plus frozen/tunable flags (heads are tunable)."""
    rng = np.random.default_rng(seed)
    C = cfg.channels
    p: dict = {}

    def emb(name, rows):
        p[name] = rng.normal(0.0, 0.05, size=(rows, C)).astype(np.float32)

    def conv(name, size):
        k = len(kernel_offsets(size))
        p[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / (k * C)), size=(k, C, C)).astype(
            np.float32
        )
        p[name + ".b"] = np.zeros(C, dtype=np.float32)

    def dense(name, out_dim, in_dim, std=None):
        std = np.sqrt(2.0 / in_dim) if std is None else std
        p[name + ".w"] = rng.normal(0.0, std, size=(out_dim, in_dim)).astype(np.float32)
        p[name + ".b"] = np.zeros(out_dim, dtype=np.float32)

    emb("code_emb", 256)
    conv("prior1", cfg.kernel_size)
    conv("prior2", cfg.kernel_size)
    emb("up_emb", 8)
    conv("target", cfg.kernel_size)
    if cfg.checkerboard and cfg.aggregation:
        emb("agg_emb", 256)
        conv("agg", cfg.agg_kernel)
        dense("fuse", C, 2 * C)
    for g in cfg.groups:
        dense(f"trunk_{g}s0", C, C)
        dense(f"head_{g}s0", cfg.head_width, C, std=0.01)
        if cfg.cascade:
            emb(f"cond_{g}", 16)
            dense(f"trunk_{g}s1", C, C)
            dense(f"head_{g}s1", 16, C, std=0.01)
    frozen = {name: not name.startswith("head_") for name in p}
    return p, frozen


def tunable_names(params: dict):
    return [n for n in params if n.startswith("head_")]


def _acc(grads: dict, name: str, val: np.ndarray) -> None:
    if name in grads:
        grads[name] += val
    else:
        grads[name] = val


class ContextModel:
    """Parameter dict + config; all methods are pure given those."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    # ----------------------------------------------------------------- backbone

    def _backbone(self, level: OccupancyLevel, child_coords: np.ndarray, train: bool = False, cache: dict | None = None):
        """Context field for the children of `level` plus shared stage inputs."""
        p = self.params
        cfg = self.cfg
        cache = cache if cache is not None else {}

        if "geom" not in cache:
            src_keys = morton_keys(level.coords)
            child_keys = morton_keys(child_coords)
            par = np.searchsorted(src_keys, child_keys >> np.uint64(3))
            par = np.minimum(par, len(src_keys) - 1)
            if not np.array_equal(src_keys[par], child_keys >> np.uint64(3)):
                raise InvariantViolation("child coords are not children of the level")
            boff = (
                ((child_coords[:, 0] & 1) << 2)
                | ((child_coords[:, 1] & 1) << 1)
                | (child_coords[:, 2] & 1)
            ).astype(np.int64)
            offs = kernel_offsets(cfg.kernel_size)
            nb_src = build_neighbor_map(level.coords, level.coords, offs, in_keys=src_keys)
            nb_tgt = build_neighbor_map(child_coords, child_coords, offs, in_keys=child_keys)
            if cfg.checkerboard:
                g1, g2 = partition_checkerboard(child_coords)
            else:
                g1 = np.arange(len(child_coords))
                g2 = np.zeros(0, dtype=np.int64)
            nb_agg = None
            if cfg.checkerboard and cfg.aggregation and len(g2):
                nb_agg = build_neighbor_map(
                    child_coords, child_coords[g2], kernel_offsets(cfg.agg_kernel), in_keys=child_keys
                )
            cache["geom"] = (par, boff, nb_src, nb_tgt, g1, g2, nb_agg)
        par, boff, nb_src, nb_tgt, g1, g2, nb_agg = cache["geom"]

        codes = np.asarray(level.codes, dtype=np.int64)
        E = p["code_emb"][codes]
        A1 = conv_apply(E, nb_src, p["prior1.w"], p["prior1.b"])
        R1 = relu(A1)
        P1 = E + R1
        A2 = conv_apply(P1, nb_src, p["prior2.w"], p["prior2.b"])
        R2 = relu(A2)
        Z = P1 + R2
        U = Z[par] + p["up_emb"][boff]
        F = conv_apply(U, nb_tgt, p["target.w"], p["target.b"])

        bb = {
            "level": level,
            "coords": child_coords,
            "F": F,
            "g1": g1,
            "g2": g2,
            "nb_agg": nb_agg,
        }
        if train:
            bb.update(
                {"E": E, "R1": R1, "P1": P1, "R2": R2, "U": U, "par": par, "boff": boff,
                 "nb_src": nb_src, "nb_tgt": nb_tgt, "src_codes": codes}
            )
        return bb

    def propagate_context(self, level: OccupancyLevel, child_coords: np.ndarray) -> SparseFeatureMap:
        """Context field for `child_coords`; validates they expand the level."""
        expected = o2v(level.coords, level.codes)
        if not np.array_equal(expected, np.asarray(child_coords, dtype=expected.dtype)):
            raise InvariantViolation("child coords must equal the level expansion")
        bb = self._backbone(level, np.asarray(child_coords, dtype=np.int32))
        return SparseFeatureMap(bb["coords"], bb["F"])

    def upsampled_features(self, level: OccupancyLevel, child_coords: np.ndarray) -> np.ndarray:
        """Parent-copied features plus child-offset embeddings (pre target conv)."""
        p = self.params
        bb_keys = morton_keys(level.coords)
        child_keys = morton_keys(child_coords)
        par = np.searchsorted(bb_keys, child_keys >> np.uint64(3))
        boff = (
            ((child_coords[:, 0] & 1) << 2)
            | ((child_coords[:, 1] & 1) << 1)
            | (child_coords[:, 2] & 1)
        ).astype(np.int64)
        codes = np.asarray(level.codes, dtype=np.int64)
        E = p["code_emb"][codes]
        offs = kernel_offsets(self.cfg.kernel_size)
        nb_src = build_neighbor_map(level.coords, level.coords, offs, in_keys=bb_keys)
        P1 = E + relu(conv_apply(E, nb_src, p["prior1.w"], p["prior1.b"]))
        Z = P1 + relu(conv_apply(P1, nb_src, p["prior2.w"], p["prior2.b"]))
        return Z[par] + p["up_emb"][boff]

    # ------------------------------------------------------------------- stages

    def _stage_forward(self, X: np.ndarray, g: str, s: str):
        p = self.params
        T = relu(dense_forward(X, p[f"trunk_{g}{s}.w"], p[f"trunk_{g}{s}.b"]))
        L = dense_forward(T, p[f"head_{g}{s}.w"], p[f"head_{g}{s}.b"])
        return softmax(L), T

    def _stage_backward(self, X, T, gL, g, s, grads):
        p = self.params
        _acc(grads, f"head_{g}{s}.w", gL.T @ T)
        _acc(grads, f"head_{g}{s}.b", gL.sum(axis=0))
        gT = gL @ p[f"head_{g}{s}.w"]
        gpre = gT * (T > 0)
        _acc(grads, f"trunk_{g}{s}.w", gpre.T @ X)
        _acc(grads, f"trunk_{g}{s}.b", gpre.sum(axis=0))
        return gpre @ p[f"trunk_{g}{s}.w"]

    def _aggregate(self, bb, g1_codes: np.ndarray):
        """Second-phase context: fuse own feature with masked-neighbor sum."""
        p = self.params
        F = bb["F"]
        g1 = bb["g1"]
        g2 = bb["g2"]
        if not self.cfg.aggregation or len(g2) == 0:
            return F[g2], None
        A = np.zeros_like(F)
        if len(g1):
            # Code 0 marks a first-group voxel with no reconstructed children
            # (possible only on the lossy path); it contributes nothing.
            codes = np.asarray(g1_codes, dtype=np.int64)
            occ = codes >= 1
            rows = g1[occ]
            A[rows] = F[rows] + p["agg_emb"][codes[occ]]
        G = conv_apply(A, bb["nb_agg"], p["agg.w"], p["agg.b"])
        cat = np.concatenate([F[g2], G], axis=1)
        c2 = relu(dense_forward(cat, p["fuse.w"], p["fuse.b"]))
        return c2, (A, G, cat, c2)

    def code_joint(self, X: np.ndarray, g: str) -> np.ndarray:
        """Raw joint code distribution (n, 256) with entry o = o0 + 16*o1."""
        p = self.params
        if not self.cfg.cascade:
            P, _ = self._stage_forward(X, g, "s0")
            return P
        p0, _ = self._stage_forward(X, g, "s0")
        cond = p[f"cond_{g}"]
        Xall = X[:, None, :] + cond[None, :, :]
        T1 = relu(Xall @ p[f"trunk_{g}s1.w"].T + p[f"trunk_{g}s1.b"])
        L1 = T1 @ p[f"head_{g}s1.w"].T + p[f"head_{g}s1.b"]
        p1 = softmax(L1)  # (n, o0, o1)
        joint = p0[:, :, None] * p1
        return joint.transpose(0, 2, 1).reshape(len(X), 256)

    # ------------------------------------------------------------------ session

    def level_session(self, level: OccupancyLevel, child_coords: np.ndarray) -> "LevelSession":
        return LevelSession(self, level, child_coords)

    def stage_count(self) -> int:
        return 4 if self.cfg.checkerboard else 2

    # ----------------------------------------------------------- loss & training

    def pyramid_bits(self, pyramid: VoxelPyramid) -> tuple[float, int]:
        """Teacher-forced model cost of all predicted levels, in bits.

        Drives the same session machinery as the codec, so this equals the
        pre-quantization information content the coder would pay.
        """
        total = 0.0
        nsym = 0
        for src, tgt in zip(pyramid.levels[:-1], pyramid.levels[1:]):
            session = self.level_session(src, tgt.coords)
            truth = np.asarray(tgt.codes, dtype=np.int64)
            while not session.done():
                name, rows, pmfs = session.next_stage()
                o0, o1 = split_code(truth[rows])
                sym = o0 if name.endswith("s0") else o1
                if len(rows):
                    picked = pmfs[np.arange(len(rows)), sym]
                    total += float(-np.log2(np.maximum(picked, 1e-30)).sum())
                nsym += len(rows)
                session.feed(sym)
        return total, nsym

    def loss_and_grads(self, pyramid: VoxelPyramid, caches: list | None = None):
        """Mean bits/nibble over all predicted levels plus parameter gradients."""
        transitions = list(zip(pyramid.levels[:-1], pyramid.levels[1:]))
        nsym_total = sum(2 * len(tgt) for _, tgt in transitions)
        if nsym_total == 0:
            return 0.0, {}
        grads: dict = {}
        bits = 0.0
        scale = 1.0 / (nsym_total * LN2)
        for li, (src, tgt) in enumerate(transitions):
            cache = caches[li] if caches is not None else None
            bits += self._level_loss_grads(src, tgt, grads, scale, cache)
        for name in self.params:
            if name not in grads:
                grads[name] = np.zeros_like(self.params[name])
        return bits / nsym_total, grads

    def _level_loss_grads(self, src, tgt, grads, scale, cache):
        p = self.params
        cfg = self.cfg
        bb = self._backbone(src, tgt.coords, train=True, cache=cache)
        F = bb["F"]
        g1 = bb["g1"]
        g2 = bb["g2"]
        codes = np.asarray(tgt.codes, dtype=np.int64)
        bits = 0.0
        gF = np.zeros_like(F)

        def stage_pair(X, g, group_codes):
            """Forward+backward for one group's stage(s); returns (bits, gX)."""
            nonlocal bits
            o0, o1 = split_code(group_codes)
            if cfg.cascade:
                P0, T0 = self._stage_forward(X, g, "s0")
                picked0 = P0[np.arange(len(X)), o0]
                b = float(-np.log2(np.maximum(picked0, 1e-30)).sum())
                gL0 = P0.copy()
                gL0[np.arange(len(X)), o0] -= 1.0
                gL0 *= scale
                gX = self._stage_backward(X, T0, gL0, g, "s0", grads)

                cond = p[f"cond_{g}"]
                X1 = X + cond[o0]
                P1, T1 = self._stage_forward(X1, g, "s1")
                picked1 = P1[np.arange(len(X)), o1]
                b += float(-np.log2(np.maximum(picked1, 1e-30)).sum())
                gL1 = P1.copy()
                gL1[np.arange(len(X)), o1] -= 1.0
                gL1 *= scale
                gX1 = self._stage_backward(X1, T1, gL1, g, "s1", grads)
                gX += gX1
                gcond = np.zeros_like(cond)
                np.add.at(gcond, o0, gX1)
                _acc(grads, f"cond_{g}", gcond)
                return b, gX
            P, T = self._stage_forward(X, g, "s0")
            picked = P[np.arange(len(X)), group_codes]
            b = float(-np.log2(np.maximum(picked, 1e-30)).sum())
            gL = P.copy()
            gL[np.arange(len(X)), group_codes] -= 1.0
            gL *= scale
            return b, self._stage_backward(X, T, gL, g, "s0", grads)

        if len(g1):
            b, gX = stage_pair(F[g1], "g1", codes[g1])
            bits += b
            gF[g1] += gX

        if cfg.checkerboard and len(g2):
            c2, agg_ctx = self._aggregate(bb, codes[g1])
            b, gc2 = stage_pair(c2, "g2", codes[g2])
            bits += b
            if agg_ctx is None:
                gF[g2] += gc2
            else:
                A, G, cat, c2out = agg_ctx
                gpre = gc2 * (c2out > 0)
                _acc(grads, "fuse.w", gpre.T @ cat)
                _acc(grads, "fuse.b", gpre.sum(axis=0))
                gcat = gpre @ p["fuse.w"]
                C = F.shape[1]
                gF[g2] += gcat[:, :C]
                gG = gcat[:, C:]
                gA, gWa, gba = conv_grads(A, bb["nb_agg"], p["agg.w"], gG)
                _acc(grads, "agg.w", gWa)
                _acc(grads, "agg.b", gba)
                if len(g1):
                    gF[g1] += gA[g1]
                    gemb = np.zeros_like(p["agg_emb"])
                    np.add.at(gemb, codes[g1], gA[g1])
                    _acc(grads, "agg_emb", gemb)

        # target conv
        gU, gWt, gbt = conv_grads(bb["U"], bb["nb_tgt"], p["target.w"], gF)
        _acc(grads, "target.w", gWt)
        _acc(grads, "target.b", gbt)
        gZ = np.zeros((len(src.coords), F.shape[1]), dtype=F.dtype)
        np.add.at(gZ, bb["par"], gU)
        gup = np.zeros_like(p["up_emb"])
        np.add.at(gup, bb["boff"], gU)
        _acc(grads, "up_emb", gup)

        # prior block 2: Z = P1 + relu(conv(P1))
        gP1 = gZ.copy()
        gA2 = gZ * (bb["R2"] > 0)
        gP1c, gW2, gb2 = conv_grads(bb["P1"], bb["nb_src"], p["prior2.w"], gA2)
        _acc(grads, "prior2.w", gW2)
        _acc(grads, "prior2.b", gb2)
        gP1 += gP1c
        # prior block 1: P1 = E + relu(conv(E))
        gE = gP1.copy()
        gA1 = gP1 * (bb["R1"] > 0)
        gEc, gW1, gb1 = conv_grads(bb["E"], bb["nb_src"], p["prior1.w"], gA1)
        _acc(grads, "prior1.w", gW1)
        _acc(grads, "prior1.b", gb1)
        gE += gEc
        gcode = np.zeros_like(p["code_emb"])
        np.add.at(gcode, bb["src_codes"], gE)
        _acc(grads, "code_emb", gcode)
        return bits


class LevelSession:
    """Streams one scale transition's coding stages in canonical order.

    The caller alternates next_stage()/feed(): the encoder feeds ground
    truth nibbles, the decoder feeds what it decoded.  Both sides execute
    the same computations on the same inputs, so emitted PMFs agree
    bit-for-bit.
    """

    def __init__(self, model: ContextModel, level: OccupancyLevel, child_coords: np.ndarray):
        self.model = model
        self.bb = model._backbone(level, child_coords)
        cfg = model.cfg
        self._stages = ["g1s0", "g1s1"] + (["g2s0", "g2s1"] if cfg.checkerboard else [])
        self._pos = 0
        self._awaiting = None
        n = len(child_coords)
        self._codes = np.zeros(n, dtype=np.int64)
        self._o0 = {}
        self._joint = {}  # per group, reshaped (n, o1, o0) when cascade is off
        self._X = {}

    def done(self) -> bool:
        return self._pos >= len(self._stages)

    def _group_rows(self, g: str) -> np.ndarray:
        return self.bb["g1"] if g == "g1" else self.bb["g2"]

    def _group_input(self, g: str) -> np.ndarray:
        X = self._X.get(g)
        if X is None:
            if g == "g1":
                X = self.bb["F"][self.bb["g1"]]
            else:
                g1 = self.bb["g1"]
                X, _ = self.model._aggregate(self.bb, self._codes[g1])
            self._X[g] = X
        return X

    def next_stage(self):
        """Returns (stage_name, target row indices, (n, 16) PMFs)."""
        if self._awaiting is not None:
            raise ContractViolation("feed() the previous stage first")
        if self.done():
            raise ContractViolation("all stages consumed")
        name = self._stages[self._pos]
        g, s = name[:2], name[2:]
        rows = self._group_rows(g)
        X = self._group_input(g)
        cfg = self.model.cfg
        if cfg.cascade:
            if s == "s0":
                pmfs, _ = self.model._stage_forward(X, g, "s0")
            else:
                o0 = self._o0[g]
                X1 = X + self.model.params[f"cond_{g}"][o0]
                pmfs, _ = self.model._stage_forward(X1, g, "s1")
        else:
            if s == "s0":
                P, _ = self.model._stage_forward(X, g, "s0")
                jr = P.reshape(len(X), 16, 16)  # (n, o1, o0)
                self._joint[g] = jr
                pmfs = jr.sum(axis=1)
            else:
                jr = self._joint[g]
                o0 = self._o0[g]
                cols = jr[np.arange(len(jr)), :, o0]
                denom = np.maximum(cols.sum(axis=1, keepdims=True), 1e-30)
                pmfs = cols / denom
        self._awaiting = (name, rows)
        return name, rows, pmfs

    def feed(self, symbols: np.ndarray) -> None:
        """Supply the nibbles for the stage returned by next_stage()."""
        if self._awaiting is None:
            raise ContractViolation("call next_stage() before feed()")
        name, rows = self._awaiting
        g, s = name[:2], name[2:]
        symbols = np.asarray(symbols, dtype=np.int64)
        if len(symbols) != len(rows):
            raise ContractViolation(f"stage {name} expects {len(rows)} symbols")
        if s == "s0":
            self._o0[g] = symbols
            self._codes[rows] = symbols
        else:
            self._codes[rows] = self._o0[g] + 16 * symbols
        self._awaiting = None
        self._pos += 1

    def codes(self) -> np.ndarray:
        if not self.done():
            raise ContractViolation("stages remain; codes are incomplete")
        return self._codes


class Checkpoint:
    """Trained parameters plus their architecture, bound by a 64-bit id.

    Both codec sides must hold the same checkpoint; the id in every
    bitstream header is checked before any symbol is decoded.
    """

    def __init__(self, params: dict, frozen: dict, config: ModelConfig):
        self.params = params
        self.frozen = frozen
        self.config = config
        self._digest = None

    def model(self) -> ContextModel:
        return ContextModel(self.params, self.config)

    def to_bytes(self) -> bytes:
        from .nn import params_to_bytes

        return params_to_bytes(self.params, self.frozen, meta=self.config.to_meta())

    def digest(self) -> int:
        if self._digest is None:
            import hashlib

            self._digest = int.from_bytes(
                hashlib.sha256(self.to_bytes()).digest()[:8], "little"
            )
        return self._digest

    @staticmethod
    def from_bytes(data: bytes) -> "Checkpoint":
        from .nn import params_from_bytes

        params, frozen, meta = params_from_bytes(data)
        return Checkpoint(params, frozen, ModelConfig.from_meta(meta))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return Checkpoint.from_bytes(fh.read())


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    iterations: int = 400
    lr: float = 5e-3
    seed: int = 0


def train_ucm(corpus, tc: TrainConfig):
    """Adam-train a model on the corpus pyramids; mean bits/nibble objective.

    Deterministic given tc.seed.  Returns (Checkpoint, loss_curve).
    """
    from .geometry import build_pyramid  # local import to avoid cycle at import time

    if not corpus:
        raise InvariantViolation("training corpus is empty")
    params, frozen = init_params(tc.model, seed=tc.seed)
    model = ContextModel(params, tc.model)
    pyramids = [pc if isinstance(pc, VoxelPyramid) else build_pyramid(pc) for pc in corpus]
    pyramids = [py for py in pyramids if len(py.levels) > 1]
    if not pyramids:
        raise InvariantViolation("corpus has no multi-level pyramids to learn from")
    caches = [[{} for _ in py.levels[:-1]] for py in pyramids]
    rng = np.random.default_rng(tc.seed)
    state = AdamState()
    hyper = AdamHyper(lr=tc.lr)
    curve = []
    for _ in range(tc.iterations):
        idx = int(rng.integers(len(pyramids)))
        loss, grads = model.loss_and_grads(pyramids[idx], caches[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {len(curve)}")
        adam_step(params, grads, state, hyper)
        curve.append(loss)
    return Checkpoint(params, frozen, tc.model), curve
