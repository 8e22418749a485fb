"""Benchmark harness: corpus synthesis, rate/distortion metrics, reports.

Corpus kinds cover the density spectrum plus three corruption styles
(additive jitter, random dropout, smooth non-rigid deformation).  Every
generator is a pure function of (kind, seed, points, depth).

Reports land as an aligned text table plus CSV files; rate-distortion
figures are rendered alongside.  Timing columns are kept out of the CSV by
default so repeated runs with the same seeds produce byte-identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .codec import CodecConfig, compute_bpp, decode, encode
from .container import header_bits, rate_split
from .context_model import Checkpoint
from .errors import InvalidAnchor, InvalidInput, InvariantViolation
from .finetune import IaftConfig
from .geometry import PointCloud, build_pyramid, from_voxels, voxelize

UNIT = ((0.0, 0.0, 0.0), 1.0)

CORPUS_KINDS = (
    "dense-surface",
    "sparse-lidar-like",
    "gaussian-splat-like",
    "noise",
    "dropout",
    "deform",
)


@dataclass(frozen=True)
class CorpusSpec:
    kind: str
    seed: int
    points: int
    depth: int
    count: int = 1


def _surface_points(rng, n):
    """Smooth random closed surface around the cube center."""
    amps = rng.uniform(0.01, 0.05, size=3)
    freqs = rng.integers(1, 5, size=(3, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 2))
    u = rng.uniform(0, 2 * np.pi, size=n)
    v = rng.uniform(0, np.pi, size=n)
    r = np.full(n, 0.32)
    for a, (fu, fv), (pu, pv) in zip(amps, freqs, phases):
        r = r + a * np.sin(fu * u + pu) * np.sin(fv * v + pv)
    x = 0.5 + r * np.sin(v) * np.cos(u)
    y = 0.5 + r * np.sin(v) * np.sin(u)
    z = 0.5 + r * np.cos(v)
    return np.stack([x, y, z], axis=1)


def _lidar_points(rng, n):
    """Concentric elevation rings with angular jitter and a bumpy range profile."""
    beams = 16
    center = np.array([0.5, 0.5, 0.35])
    elevations = np.linspace(-0.35, 0.25, beams)
    per = max(1, n // beams)
    harmonics = rng.integers(1, 6, size=3)
    hphase = rng.uniform(0, 2 * np.pi, size=3)
    hamp = rng.uniform(0.02, 0.08, size=3)
    pts = []
    for bi in range(beams):
        m = per if bi < beams - 1 else n - per * (beams - 1)
        if m <= 0:
            continue
        az = np.linspace(0, 2 * np.pi, m, endpoint=False) + rng.normal(0, 0.01, size=m)
        rad = np.full(m, 0.34)
        for h, ph, a in zip(harmonics, hphase, hamp):
            rad = rad + a * np.sin(h * az + ph)
        el = elevations[bi] + rng.normal(0, 0.004, size=m)
        pts.append(
            center
            + np.stack(
                [rad * np.cos(el) * np.cos(az), rad * np.cos(el) * np.sin(az), rad * np.sin(el)],
                axis=1,
            )
        )
    return np.clip(np.concatenate(pts, axis=0), 0.0, 0.999)


def _splat_points(rng, n):
    """Anisotropic Gaussian blobs anchored on a coarse surface."""
    anchors = _surface_points(rng, max(1, n // 40))
    out = []
    remaining = n
    for i, c in enumerate(anchors):
        m = remaining if i == len(anchors) - 1 else min(remaining, max(1, n // len(anchors)))
        remaining -= m
        scales = rng.uniform(0.002, 0.018, size=3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        cov = q @ np.diag(scales ** 2) @ q.T
        out.append(rng.multivariate_normal(c, cov, size=m))
        if remaining <= 0:
            break
    return np.clip(np.concatenate(out, axis=0), 0.0, 0.999)


def synth_cloud(kind: str, seed: int, points: int, depth: int) -> PointCloud:
    """One deterministic instance of the given corpus kind."""
    if kind not in CORPUS_KINDS:
        raise InvalidInput(f"unknown corpus kind {kind!r}")
    rng = np.random.default_rng([seed, CORPUS_KINDS.index(kind)])
    if kind == "dense-surface":
        return voxelize(_surface_points(rng, points), depth, bounds=UNIT)
    if kind == "sparse-lidar-like":
        return voxelize(_lidar_points(rng, points), depth, bounds=UNIT)
    if kind == "gaussian-splat-like":
        return voxelize(_splat_points(rng, points), depth, bounds=UNIT)
    if kind == "noise":
        base = voxelize(_surface_points(rng, points), depth, bounds=UNIT)
        jitter = rng.integers(-2, 3, size=base.points.shape)
        moved = np.clip(base.points + jitter, 0, (1 << depth) - 1)
        return from_voxels(moved, depth)
    if kind == "dropout":
        base = voxelize(_surface_points(rng, points), depth, bounds=UNIT)
        keep = rng.random(len(base)) < 0.5
        if not keep.any():
            keep[0] = True
        return from_voxels(base.points[keep], depth)
    if kind == "deform":
        pts = _surface_points(rng, points)
        for axis in range(3):
            amp = rng.uniform(0.02, 0.06)
            k = rng.integers(1, 4, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            pts[:, axis] += amp * np.sin(2 * np.pi * (pts @ k) + phase)
        return voxelize(np.clip(pts, 0.0, 0.999), depth, bounds=UNIT)
    raise InvalidInput(f"unknown corpus kind {kind!r}")


def synth_corpus(spec: CorpusSpec):
    """`spec.count` deterministic instances (same spec+seed => same clouds)."""
    return [
        synth_cloud(spec.kind, int(np.random.default_rng([spec.seed, i]).integers(2 ** 31)), spec.points, spec.depth)
        for i in range(spec.count)
    ]


def raw_code_bpp(pc: PointCloud) -> float:
    """Anchor rate: 8 bits per occupancy code, no model."""
    return 8.0 * build_pyramid(pc).total_codes() / len(pc)


def cr_gain(bpp_method: float, bpp_anchor: float) -> float:
    """Relative rate change vs an anchor, in percent (negative = savings)."""
    if not bpp_anchor > 0:
        raise InvalidAnchor("anchor bpp must be positive")
    return (bpp_method - bpp_anchor) / bpp_anchor * 100.0


PSNR_SENTINEL = 999.0


def d1_psnr(reference: PointCloud, decoded: PointCloud, depth: int | None = None) -> float:
    """Symmetric point-to-point geometry PSNR.

    mse(A->B) averages each point's squared distance to its nearest neighbor
    in the other cloud; the reported value uses the worse direction with
    peak 3*(2**depth - 1)**2.  Identical clouds return the 999 dB sentinel.
    """
    if len(reference) == 0 or len(decoded) == 0:
        raise InvalidInput("PSNR needs two non-empty clouds")
    depth = reference.depth if depth is None else depth
    a = reference.points.astype(np.float64)
    b = decoded.points.astype(np.float64)
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    mse = max(float(np.mean(d_ab ** 2)), float(np.mean(d_ba ** 2)))
    if mse == 0.0:
        return PSNR_SENTINEL
    peak = 3.0 * ((1 << depth) - 1) ** 2
    return float(min(10.0 * np.log10(peak / mse), PSNR_SENTINEL))


@dataclass(frozen=True)
class BenchConfig:
    """One codec setting evaluated by the harness."""

    name: str
    coarse_cutoff: int | None = None  # None = lossless
    iaft: IaftConfig | None = None

    def codec_config(self) -> CodecConfig:
        return CodecConfig(coarse_cutoff=self.coarse_cutoff, iaft=self.iaft)


@dataclass
class EvalReport:
    instance: str
    config: str
    points: int
    depth: int
    cutoff: int
    bpp: float
    weight_bits: int
    geom_bits: int
    header_bits: int
    anchor_bpp: float
    cr_gain_pct: float
    psnr_db: float
    enc_s: float
    dec_s: float


REPORT_COLUMNS = (
    "instance",
    "config",
    "points",
    "depth",
    "cutoff",
    "bpp",
    "weight_bits",
    "geom_bits",
    "header_bits",
    "anchor_bpp",
    "cr_gain_pct",
    "psnr_db",
)
TIMING_COLUMNS = ("enc_s", "dec_s")


def run_benchmark(instances, ckpt: Checkpoint, configs, verify: bool = True):
    """Encode/decode every instance under every config; returns EvalReports.

    Before any metric is reported for an instance, a lossless roundtrip is
    re-verified and the per-stream rate bound is checked; a failure aborts
    with the offending instance id.
    """
    reports = []
    for instance_id, pc in instances:
        anchor = raw_code_bpp(pc)
        if verify:
            probe = encode(pc, ckpt)
            if decode(probe.to_bytes(), ckpt) != pc:
                raise InvariantViolation(f"lossless roundtrip failed for {instance_id}")
            _check_rate_bound(probe, instance_id)
        for bc in configs:
            t0 = time.perf_counter()
            container = encode(pc, ckpt, bc.codec_config())
            t1 = time.perf_counter()
            out = decode(container.to_bytes(), ckpt)
            t2 = time.perf_counter()
            _check_rate_bound(container, instance_id)
            lossless = container.lossless
            if lossless and out != pc:
                raise InvariantViolation(f"lossless roundtrip failed for {instance_id} ({bc.name})")
            bpp = compute_bpp(container, pc)
            w, g = rate_split(container)
            reports.append(
                EvalReport(
                    instance=instance_id,
                    config=bc.name,
                    points=len(pc),
                    depth=pc.depth,
                    cutoff=container.coarse_cutoff,
                    bpp=bpp,
                    weight_bits=w,
                    geom_bits=g,
                    header_bits=header_bits(container),
                    anchor_bpp=anchor,
                    cr_gain_pct=cr_gain(bpp, anchor),
                    psnr_db=PSNR_SENTINEL if lossless else d1_psnr(pc, out),
                    enc_s=t1 - t0,
                    dec_s=t2 - t1,
                )
            )
    return reports


def _check_rate_bound(container, instance_id):
    stats = container.encoder_stats
    if stats is None:
        return
    if 8 * stats.geometry_bytes > stats.total_ideal_bits() + 64:
        raise InvariantViolation(f"{instance_id}: geometry stream exceeds its rate bound")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(reports, with_timings: bool = False) -> str:
    cols = REPORT_COLUMNS + (TIMING_COLUMNS if with_timings else ())
    rows = [[_fmt(getattr(r, c)) for c in cols] for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def format_csv(reports, with_timings: bool = False) -> str:
    cols = REPORT_COLUMNS + (TIMING_COLUMNS if with_timings else ())
    lines = [",".join(cols)]
    for r in reports:
        lines.append(",".join(_fmt(getattr(r, c)) for c in cols))
    return "\n".join(lines) + "\n"


def rd_points_csv(reports) -> str:
    lines = ["instance,config,cutoff,bpp,psnr_db"]
    for r in sorted(reports, key=lambda r: (r.instance, r.cutoff, r.config)):
        lines.append(f"{r.instance},{r.config},{r.cutoff},{r.bpp:.4f},{r.psnr_db:.4f}")
    return "\n".join(lines) + "\n"


def write_reports(reports, out_dir, with_timings: bool = False, figures: bool = True):
    """Emit report.txt, report.csv, rd_points.csv and (optionally) figures."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    reports = sorted(reports, key=lambda r: (r.instance, r.config))
    paths = {}
    table = format_table(reports, with_timings)
    paths["table"] = os.path.join(out_dir, "report.txt")
    with open(paths["table"], "w") as fh:
        fh.write(table)
    paths["csv"] = os.path.join(out_dir, "report.csv")
    with open(paths["csv"], "w") as fh:
        fh.write(format_csv(reports, with_timings))
    paths["rd"] = os.path.join(out_dir, "rd_points.csv")
    with open(paths["rd"], "w") as fh:
        fh.write(rd_points_csv(reports))
    if figures:
        paths.update(render_figures(reports, os.path.join(out_dir, "figures")))
    return paths


def render_figures(reports, fig_dir):
    """Rate-distortion curves and a mean-bpp bar chart as PNG files."""
    import os

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(fig_dir, exist_ok=True)
    paths = {}

    by_instance = {}
    for r in reports:
        by_instance.setdefault(r.instance, []).append(r)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for instance, rows in sorted(by_instance.items()):
        rows = sorted(rows, key=lambda r: r.bpp)
        xs = [r.bpp for r in rows]
        ys = [min(r.psnr_db, 140.0) for r in rows]  # clamp the sentinel for display
        ax.plot(xs, ys, marker="o", linewidth=1.2, markersize=3.5, label=instance)
    ax.set_xlabel("rate (bpp)")
    ax.set_ylabel("D1 PSNR (dB, lossless clamped)")
    ax.set_title("rate-distortion")
    ax.grid(True, alpha=0.3)
    if len(by_instance) <= 12:
        ax.legend(fontsize=7)
    paths["rd_fig"] = os.path.join(fig_dir, "rd_curves.png")
    fig.savefig(paths["rd_fig"], dpi=120, bbox_inches="tight")
    plt.close(fig)

    by_config = {}
    for r in reports:
        by_config.setdefault(r.config, []).append(r.bpp)
    names = sorted(by_config)
    means = [float(np.mean(by_config[n])) for n in names]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.bar(range(len(names)), means, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean bpp")
    ax.set_title("rate by configuration")
    ax.grid(True, axis="y", alpha=0.3)
    paths["bpp_fig"] = os.path.join(fig_dir, "bpp_bars.png")
    fig.savefig(paths["bpp_fig"], dpi=120, bbox_inches="tight")
    plt.close(fig)
    return paths
