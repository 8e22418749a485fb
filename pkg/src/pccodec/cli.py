"""Command-line front end: synth / train / encode / decode / bench / inspect."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import ply
from .codec import CodecConfig, compute_bpp, decode, encode
from .container import BitstreamContainer, header_bits, rate_split
from .context_model import Checkpoint, ModelConfig, TrainConfig, train_ucm
from .errors import CodecError
from .finetune import IaftConfig
from .geometry import from_voxels, voxelize

MODEL_DIR_ENV = "PCCODEC_MODEL_DIR"


def _resolve_model(path: str) -> str:
    if os.path.exists(path):
        return path
    env_dir = os.environ.get(MODEL_DIR_ENV)
    if env_dir:
        cand = os.path.join(env_dir, path)
        if os.path.exists(cand):
            return cand
    raise FileNotFoundError(f"checkpoint {path!r} not found (also tried ${MODEL_DIR_ENV})")


def _load_cloud(path: str, depth: int, prequantized: bool):
    pts = ply.read_ply(path)
    if prequantized:
        return from_voxels(np.rint(pts).astype(np.int64), depth)
    return voxelize(pts, depth)


def _iaft_from_args(args) -> IaftConfig | None:
    if args.iaft_iters <= 0:
        return None
    return IaftConfig(
        iterations=args.iaft_iters,
        lr=args.iaft_lr,
        l1_weight=args.l1_weight,
        quant_step=args.quant_step,
    )


def _apply_config_file(args, argv):
    """key=value lines act as defaults for flags not given on the command line."""
    if not getattr(args, "config", None):
        return args
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            explicit.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    with open(args.config) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key in explicit or not hasattr(args, key):
                continue
            current = getattr(args, key)
            if isinstance(current, bool):
                setattr(args, key, value.lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(args, key, int(value))
            elif isinstance(current, float):
                setattr(args, key, float(value))
            else:
                setattr(args, key, value)
    return args


def _parse_sweep(spec: str):
    # "s_loss=4..8" -> list of cutoff values
    key, _, rng = spec.partition("=")
    if key.strip() not in ("s_loss", "cutoff") or ".." not in rng:
        raise ValueError(f"bad sweep spec {spec!r}; expected s_loss=A..B")
    lo, hi = (int(v) for v in rng.split("..", 1))
    if hi < lo:
        lo, hi = hi, lo
    return list(range(lo, hi + 1))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pccodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a synthetic corpus to disk as PLY")
    sp.add_argument("--kind", choices=bench_mod.CORPUS_KINDS, required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--points", type=int, default=4096)
    sp.add_argument("--depth", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--ascii", action="store_true", help="write ascii PLY")
    sp.add_argument("--config", help="key=value defaults file")

    tp = sub.add_parser("train", help="train a small model on PLY files or a synthetic corpus")
    tp.add_argument("--corpus", help="directory of .ply files")
    tp.add_argument("--synth", help="KIND:COUNT:POINTS:DEPTH synthetic corpus spec")
    tp.add_argument("--depth", type=int, default=8, help="voxelization depth for PLY input")
    tp.add_argument("--prequantized", action="store_true", help="PLY coords are already voxel ints")
    tp.add_argument("--channels", type=int, default=16)
    tp.add_argument("--kernel-size", type=int, default=3)
    tp.add_argument("--iters", type=int, default=400)
    tp.add_argument("--lr", type=float, default=5e-3)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--no-checkerboard", action="store_true")
    tp.add_argument("--no-aggregation", action="store_true")
    tp.add_argument("--no-cascade", action="store_true")
    tp.add_argument("--out", required=True, help="checkpoint output path")
    tp.add_argument("--config", help="key=value defaults file")

    ep = sub.add_parser("encode", help="compress a PLY cloud")
    ep.add_argument("--in", dest="infile", required=True)
    ep.add_argument("--model", required=True)
    ep.add_argument("--out", help="container path (default: <in>.opc)")
    ep.add_argument("--depth", type=int, default=8)
    ep.add_argument("--prequantized", action="store_true")
    ep.add_argument("--s-loss", type=int, default=-1, help="first count-reconstructed scale (-1 = lossless)")
    ep.add_argument("--iaft-iters", type=int, default=0)
    ep.add_argument("--iaft-lr", type=float, default=0.02)
    ep.add_argument("--l1-weight", type=float, default=1e-4)
    ep.add_argument("--quant-step", type=float, default=2.0 ** -7)
    ep.add_argument("--config", help="key=value defaults file")

    dp = sub.add_parser("decode", help="decompress a container back to PLY")
    dp.add_argument("--in", dest="infile", required=True)
    dp.add_argument("--model", required=True)
    dp.add_argument("--out", help="PLY output path (default: <in>.ply)")
    dp.add_argument("--ascii", action="store_true")
    dp.add_argument("--config", help="key=value defaults file")

    bp = sub.add_parser("bench", help="run the evaluation harness on synthetic corpora")
    bp.add_argument("--model", required=True)
    bp.add_argument("--kinds", default="dense-surface", help="comma-separated corpus kinds")
    bp.add_argument("--count", type=int, default=2, help="instances per kind")
    bp.add_argument("--points", type=int, default=2048)
    bp.add_argument("--depth", type=int, default=7)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--iaft-iters", type=int, default=0, help="adds a head-adaptation config")
    bp.add_argument("--iaft-lr", type=float, default=0.02)
    bp.add_argument("--l1-weight", type=float, default=1e-4)
    bp.add_argument("--quant-step", type=float, default=2.0 ** -7)
    bp.add_argument("--sweep", help="s_loss=A..B rate-distortion sweep")
    bp.add_argument("--out-dir", required=True)
    bp.add_argument("--timings", action="store_true", help="include wall times in report files")
    bp.add_argument("--no-figures", action="store_true")
    bp.add_argument("--config", help="key=value defaults file")

    ip = sub.add_parser("inspect", help="dump container header and rate split")
    ip.add_argument("--in", dest="infile", required=True)
    ip.add_argument("--config", help="key=value defaults file")
    return p


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    spec = bench_mod.CorpusSpec(args.kind, args.seed, args.points, args.depth, args.count)
    clouds = bench_mod.synth_corpus(spec)
    for i, pc in enumerate(clouds):
        path = os.path.join(args.out, f"{args.kind}_{i:03d}.ply")
        ply.write_ply(path, pc.points.astype(np.float32), binary=not args.ascii)
        print(f"wrote {path} ({len(pc)} voxels, depth {pc.depth})")
    return 0


def cmd_train(args) -> int:
    corpus = []
    if args.synth:
        kind, count, points, depth = args.synth.split(":")
        spec = bench_mod.CorpusSpec(kind, args.seed, int(points), int(depth), int(count))
        corpus = bench_mod.synth_corpus(spec)
    elif args.corpus:
        files = sorted(
            os.path.join(args.corpus, f) for f in os.listdir(args.corpus) if f.endswith(".ply")
        )
        if not files:
            print(f"no .ply files in {args.corpus}", file=sys.stderr)
            return 2
        corpus = [_load_cloud(f, args.depth, args.prequantized) for f in files]
    else:
        print("train needs --corpus or --synth", file=sys.stderr)
        return 2
    cfg = ModelConfig(
        channels=args.channels,
        kernel_size=args.kernel_size,
        checkerboard=not args.no_checkerboard,
        aggregation=not args.no_aggregation,
        cascade=not args.no_cascade,
    )
    tc = TrainConfig(model=cfg, iterations=args.iters, lr=args.lr, seed=args.seed)
    ckpt, curve = train_ucm(corpus, tc)
    ckpt.save(args.out)
    tail = float(np.mean(curve[-20:])) if curve else float("nan")
    print(f"trained {args.iters} iterations on {len(corpus)} clouds")
    print(f"final loss: {tail:.4f} bits/nibble")
    print(f"checkpoint: {args.out} (id {ckpt.digest():016x})")
    return 0


def cmd_encode(args) -> int:
    ckpt = Checkpoint.load(_resolve_model(args.model))
    pc = _load_cloud(args.infile, args.depth, args.prequantized)
    cutoff = None if args.s_loss < 0 else args.s_loss
    cfg = CodecConfig(coarse_cutoff=cutoff, iaft=_iaft_from_args(args))
    container = encode(pc, ckpt, cfg)
    out = args.out or args.infile + ".opc"
    blob = container.to_bytes()
    with open(out, "wb") as fh:
        fh.write(blob)
    w, g = rate_split(container)
    stats = container.encoder_stats
    print(f"encoded {len(pc)} voxels at depth {pc.depth} -> {len(blob)} bytes")
    print(f"rate split: weights {w} bits | geometry {g} bits | header {header_bits(container)} bits")
    print(f"bpp: {compute_bpp(container, pc):.4f}")
    if stats is not None and stats.fallback:
        print("head adaptation fell back to the pretrained model (rate would not improve)")
    elif stats is not None and stats.tuned:
        print("head adaptation accepted")
    print(f"container: {out}")
    return 0


def cmd_decode(args) -> int:
    ckpt = Checkpoint.load(_resolve_model(args.model))
    with open(args.infile, "rb") as fh:
        blob = fh.read()
    pc = decode(blob, ckpt)
    out = args.out or args.infile + ".ply"
    ply.write_ply(out, pc.points.astype(np.float32), binary=not args.ascii)
    print(f"decoded {len(pc)} voxels at depth {pc.depth} -> {out}")
    return 0


def cmd_bench(args) -> int:
    ckpt = Checkpoint.load(_resolve_model(args.model))
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    instances = []
    for kind in kinds:
        spec = bench_mod.CorpusSpec(kind, args.seed, args.points, args.depth, args.count)
        for i, pc in enumerate(bench_mod.synth_corpus(spec)):
            instances.append((f"{kind}_{i:03d}", pc))
    configs = [bench_mod.BenchConfig(name="lossless")]
    if args.iaft_iters > 0:
        configs.append(bench_mod.BenchConfig(name=f"iaft{args.iaft_iters}", iaft=_iaft_from_args(args)))
    if args.sweep:
        for cutoff in _parse_sweep(args.sweep):
            configs.append(bench_mod.BenchConfig(name=f"s_loss{cutoff}", coarse_cutoff=cutoff))
    reports = bench_mod.run_benchmark(instances, ckpt, configs)
    paths = bench_mod.write_reports(
        reports, args.out_dir, with_timings=args.timings, figures=not args.no_figures
    )
    print(bench_mod.format_table(sorted(reports, key=lambda r: (r.instance, r.config)), args.timings))
    for label, path in sorted(paths.items()):
        print(f"{label}: {path}")
    return 0


def cmd_inspect(args) -> int:
    with open(args.infile, "rb") as fh:
        container = BitstreamContainer.from_bytes(fh.read())
    w, g = rate_split(container)
    print(f"depth: {container.depth}")
    print(f"mode: {'lossless' if container.lossless else f'lossy from scale {container.coarse_cutoff}'}")
    print(f"model id: {container.model_id:016x}")
    print(f"adaptation: weights={'present' if container.weight_segment else 'none'}"
          f"{' (fallback)' if container.fallback else ''}")
    if container.point_counts:
        print(f"reconstruction counts: {container.point_counts}")
    print(f"streams: {len(container.geometry_streams)}")
    print(f"rate split: weights {w} bits | geometry {g} bits | header {header_bits(container)} bits")
    print(f"check value: {container.check:08x}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _apply_config_file(args, argv)
    except (OSError, ValueError) as exc:
        print(f"config file error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except CodecError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
