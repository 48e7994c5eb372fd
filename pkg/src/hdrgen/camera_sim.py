"""Synthetic HDR scenes and the forward camera pipeline that derives LDR inputs.

The generator composes a smooth oriented gradient with Gaussian intensity
blobs, exponentiates the normalized field so the global max/min radiance
ratio is exactly 2**dynamic_range_stops, and keeps every pixel strictly
positive. The camera model is exposure scaling, a power-law response
curve, clipping to [0, 1], and 8-bit quantization (round half-up) - the
lossy steps the reconstruction model has to invert.

``make_dataset`` writes (scene_i.pfm, scene_i.ppm) pairs plus a CSV
manifest and is bit-reproducible from its master seed. Any externally
produced paired directory can be used through the same manifest format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .imgio import (
    DynamicRangeTag,
    ImageBuffer,
    read_pfm,
    read_ppm,
    write_pfm,
    write_ppm,
)

VALID_SIZES = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class CameraParams:
    """Forward camera model: v -> quantize(clip((exposure * v) ** gamma))."""

    exposure: float = 1.0          # linear multiplier; stops apply as 2**stops
    gamma: float = 1.0 / 2.4       # display-referred response exponent
    clip_low: float = 0.0
    clip_high: float = 1.0
    quantization_levels: int = 256

    def __post_init__(self):
        if self.exposure <= 0:
            raise ValueError(f"exposure must be positive, got {self.exposure}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.quantization_levels < 2:
            raise ValueError("quantization_levels must be >= 2")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 32
    n_blobs: int = 3
    dynamic_range_stops: float = 8.0

    def __post_init__(self):
        if self.size not in VALID_SIZES:
            raise ValueError(f"size must be one of {VALID_SIZES}, got {self.size}")
        if not 4.0 <= self.dynamic_range_stops <= 16.0:
            raise ValueError(
                f"dynamic_range_stops must be in [4, 16], got {self.dynamic_range_stops}"
            )
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be >= 0")


def synth_hdr_scene(spec: SceneSpec) -> ImageBuffer:
    """Deterministic synthetic HDR scene for the given spec.

    The luminance field (gradient + blobs, plus a faint smooth chroma
    tilt per channel) is normalized to [0, 1] and mapped through
    2**(stops * (field - 0.5)), so radiance spans exactly
    [2**-(stops/2), 2**(stops/2)].
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n), indexing="ij"
    )

    theta = rng.uniform(0.0, 2.0 * np.pi)
    field = np.cos(theta) * xs + np.sin(theta) * ys

    for _ in range(spec.n_blobs):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.06, 0.22)
        amp = rng.uniform(0.6, 1.6) * rng.choice([-1.0, 1.0], p=[0.25, 0.75])
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        field = field + amp * np.exp(-d2 / (2.0 * sigma * sigma))

    # faint smooth per-channel tilt so the three channels are distinct
    field = field[:, :, None] + 0.02 * np.stack(
        [
            rng.uniform(-1.0, 1.0) * xs + rng.uniform(-1.0, 1.0) * ys
            for _ in range(3)
        ],
        axis=-1,
    )

    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo)
    hdr = np.exp2(spec.dynamic_range_stops * (field - 0.5))
    return ImageBuffer(hdr.astype(np.float32), DynamicRangeTag.HDR_LINEAR)


def ldr_from_hdr(hdr: ImageBuffer, params: CameraParams) -> ImageBuffer:
    """Run the forward camera pipeline: expose, apply CRF, clip, quantize."""
    if hdr.tag is not DynamicRangeTag.HDR_LINEAR:
        raise ValueError(f"ldr_from_hdr expects HDR_LINEAR, got {hdr.tag.name}")
    v = hdr.data.astype(np.float64)
    u = np.clip((params.exposure * v) ** params.gamma, params.clip_low, params.clip_high)
    q = params.quantization_levels - 1
    u = np.floor(u * q + 0.5) / q
    return ImageBuffer(u.astype(np.float32), DynamicRangeTag.LDR_NORMALIZED)


def saturation_fraction(
    ldr: ImageBuffer, low_thresh: float, high_thresh: float
) -> tuple[float, float]:
    """Fractions of values at or below ``low_thresh`` / at or above ``high_thresh``."""
    if ldr.tag is not DynamicRangeTag.LDR_NORMALIZED:
        raise ValueError(f"saturation_fraction expects LDR_NORMALIZED, got {ldr.tag.name}")
    if not 0.0 <= low_thresh < high_thresh <= 1.0:
        raise ValueError(
            f"need 0 <= low_thresh < high_thresh <= 1, got ({low_thresh}, {high_thresh})"
        )
    vals = ldr.data
    frac_under = float(np.mean(vals <= low_thresh))
    frac_over = float(np.mean(vals >= high_thresh))
    return frac_under, frac_over


# ----------------------------------------------------------------------
# Dataset generation and the manifest format
# ----------------------------------------------------------------------

MANIFEST_HEADER = "index,hdr_path,ldr_path,seed,exposure,gamma"

ParamsSampler = Callable[[np.random.Generator, int, int], CameraParams]


def stratified_exposure_sampler(
    stops_range: tuple[float, float] = (-2.5, 2.5), gamma: float = 1.0 / 2.4
) -> ParamsSampler:
    """Exposure sampler stratifying stops across ``stops_range``.

    Pair i of n lands in the i-th of n equal stop buckets (with uniform
    jitter inside the bucket), so under- and over-exposures both occur
    whenever the range straddles zero and n >= 2.
    """
    lo, hi = stops_range
    if not hi > lo:
        raise ValueError("stops_range must be increasing")

    def sampler(rng: np.random.Generator, index: int, n_pairs: int) -> CameraParams:
        w = (hi - lo) / n_pairs
        stops = lo + (index + rng.uniform()) * w
        return CameraParams(exposure=float(2.0 ** stops), gamma=gamma)

    return sampler


@dataclass(frozen=True)
class ManifestRow:
    index: int
    hdr_path: str
    ldr_path: str
    seed: int
    exposure: float
    gamma: float


def make_dataset(
    n_pairs: int,
    spec_template: SceneSpec,
    params_sampler: ParamsSampler,
    out_dir: str | Path,
) -> Path:
    """Write ``n_pairs`` (PFM, PPM) pairs plus ``manifest.csv``; return its path.

    Per-pair seeds and camera draws derive from spec_template.seed through
    independent SeedSequence streams, so regeneration is byte-identical.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    child_seeds = np.random.SeedSequence(spec_template.seed).spawn(n_pairs)

    rows: list[ManifestRow] = []
    for i, ss in enumerate(child_seeds):
        rng = np.random.default_rng(ss)
        scene_seed = int(rng.integers(0, 2**31 - 1))
        params = params_sampler(rng, i, n_pairs)
        hdr = synth_hdr_scene(replace(spec_template, seed=scene_seed))
        ldr = ldr_from_hdr(hdr, params)
        hdr_name = f"scene_{i:04d}.pfm"
        ldr_name = f"scene_{i:04d}.ppm"
        write_pfm(hdr, out / hdr_name)
        write_ppm(ldr, out / ldr_name)
        rows.append(
            ManifestRow(i, hdr_name, ldr_name, scene_seed, params.exposure, params.gamma)
        )

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        f.write(MANIFEST_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r.index},{r.hdr_path},{r.ldr_path},{r.seed},"
                f"{r.exposure!r},{r.gamma!r}\n"
            )
    return manifest


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse a manifest CSV; paths stay relative to the manifest directory."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or ",".join(header) != MANIFEST_HEADER:
            raise ValueError(f"bad manifest header in {path}")
        rows = [
            ManifestRow(int(r[0]), r[1], r[2], int(r[3]), float(r[4]), float(r[5]))
            for r in reader
            if r
        ]
    if not rows:
        raise ValueError(f"empty manifest: {path}")
    return rows


def load_pair(manifest_path: str | Path, row: ManifestRow) -> tuple[ImageBuffer, ImageBuffer]:
    """Load the (HDR, LDR) pair a manifest row points at."""
    base = Path(manifest_path).parent
    return read_pfm(base / row.hdr_path), read_ppm(base / row.ldr_path)
