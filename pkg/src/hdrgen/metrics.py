"""Quantitative evaluation: PSNR, SSIM, and the exposure-balance statistic.

All image metrics are computed on tone-mapped values (display gamma 2.2)
rather than linear radiance, which would be dominated by highlights.
SSIM uses non-overlapping 8x8 windows with the usual stabilizers
C1 = 0.01^2 and C2 = 0.03^2 at unit dynamic range, so the computation is
exactly specified and dependency-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .camera_sim import load_pair, read_manifest
from .imgio import ImageBuffer, LogAffineDomain, tonemap
from .nets import load_checkpoint
from .schedule import ScheduleKind, discretize

EVAL_TONEMAP_GAMMA = 2.2
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
EVAL_CSV_HEADER = "index,psnr_db,ssim,exposure_gap"


def _as_array(x) -> np.ndarray:
    if isinstance(x, ImageBuffer):
        return np.asarray(x.data, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def psnr(x, y, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE), capped at 99 dB for (near-)identical inputs."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(x, y) -> float:
    """Windowed SSIM over non-overlapping 8x8 tiles, per channel, averaged."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    h, w = a.shape[:2]
    win = SSIM_WINDOW
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} smaller than one {win}x{win} window")
    c1, c2 = 0.01**2, 0.03**2
    ny, nx = h // win, w // win
    a = a[: ny * win, : nx * win]
    b = b[: ny * win, : nx * win]
    # (ny, nx, win*win, C) tiles
    ta = a.reshape(ny, win, nx, win, -1).transpose(0, 2, 1, 3, 4).reshape(ny, nx, win * win, -1)
    tb = b.reshape(ny, win, nx, win, -1).transpose(0, 2, 1, 3, 4).reshape(ny, nx, win * win, -1)
    mu_a = ta.mean(axis=2)
    mu_b = tb.mean(axis=2)
    var_a = ta.var(axis=2)
    var_b = tb.var(axis=2)
    cov = ((ta - mu_a[:, :, None]) * (tb - mu_b[:, :, None])).mean(axis=2)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


def exposure_gap(x_pred, x_ldr) -> float:
    """|mean(x_pred) - mean(x_ldr)| for [0, 1] images."""
    a, b = _as_array(x_pred), _as_array(x_ldr)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(abs(a.mean() - b.mean()))


# ----------------------------------------------------------------------
# Manifest-level evaluation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    index: int
    psnr_db: float
    ssim: float
    exposure_gap: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    exposure_gap_mean: float
    exposure_gap_std: float

    @staticmethod
    def from_rows(rows: list[EvalRow]) -> "EvalReport":
        ps = np.array([r.psnr_db for r in rows], dtype=np.float64)
        ss = np.array([r.ssim for r in rows], dtype=np.float64)
        eg = np.array([r.exposure_gap for r in rows], dtype=np.float64)
        return EvalReport(
            rows=tuple(rows),
            psnr_mean=float(ps.mean()),
            psnr_std=float(ps.std()),
            ssim_mean=float(ss.mean()),
            ssim_std=float(ss.std()),
            exposure_gap_mean=float(eg.mean()),
            exposure_gap_std=float(eg.std()),
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write(EVAL_CSV_HEADER + "\n")
            for r in self.rows:
                f.write(f"{r.index},{r.psnr_db!r},{r.ssim!r},{r.exposure_gap!r}\n")
            f.write(
                f"aggregate,{self.psnr_mean!r}±{self.psnr_std!r},"
                f"{self.ssim_mean!r}±{self.ssim_std!r},"
                f"{self.exposure_gap_mean!r}±{self.exposure_gap_std!r}\n"
            )


def score_prediction(
    index: int, pred_tm: np.ndarray, gt_tm: np.ndarray, ldr: np.ndarray
) -> EvalRow:
    """Metrics for one tonemapped prediction against tonemapped ground truth."""
    return EvalRow(
        index=index,
        psnr_db=psnr(pred_tm, gt_tm, peak=1.0),
        ssim=ssim(pred_tm, gt_tm),
        exposure_gap=exposure_gap(pred_tm, ldr),
    )


def sample_from_checkpoint(
    checkpoint_path: str | Path,
    ldr: ImageBuffer,
    *,
    seed: int = 0,
    guidance_scale: float | None = None,
    use_ema: bool = True,
) -> ImageBuffer:
    """Reconstruct one HDR image from a single LDR input, deterministically."""
    ckpt = load_checkpoint(checkpoint_path)
    bundle = ckpt.bundle
    if use_ema and ckpt.ema_state:
        bundle.load_flat_state(ckpt.ema_state)
    bundle.eval()
    if ckpt.domain is None or ckpt.schedule_params is None:
        raise ValueError("checkpoint lacks domain/schedule metadata needed for sampling")
    domain = LogAffineDomain(**ckpt.domain)
    sched = discretize(
        ScheduleKind(ckpt.schedule_params["kind"]),
        ckpt.schedule_params["shift_ratio"],
        ckpt.schedule_params["T"],
    )
    scale = ckpt.guidance_scale if guidance_scale is None else guidance_scale
    guidance = diffusion.GuidanceConfig.for_z_dim(bundle.config.z_dim, scale=scale)
    ldr_t = torch.from_numpy(ldr.data.transpose(2, 0, 1).copy()).float()
    with torch.no_grad():
        z = bundle.encoder(ldr_t)
    extra = ldr_t if bundle.config.concat_ldr else None
    x0 = diffusion.sample(bundle.denoiser, z, sched, guidance, rng_seed=seed, ldr=extra)
    return domain.model_to_hdr(x0.numpy().transpose(1, 2, 0))


def evaluate(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    out_csv: str | Path | None = None,
    *,
    guidance_scale: float | None = None,
    seed: int = 0,
    batch_size: int = 16,
    use_ema: bool = True,
) -> EvalReport:
    """Sample one HDR per manifest LDR with a fixed seed, tonemap, and score.

    Uses the checkpoint's EMA weights, value domain, and noise schedule.
    """
    ckpt = load_checkpoint(checkpoint_path)
    bundle = ckpt.bundle
    if use_ema and ckpt.ema_state:
        bundle.load_flat_state(ckpt.ema_state)
    bundle.eval()
    if ckpt.domain is None or ckpt.schedule_params is None:
        raise ValueError("checkpoint lacks domain/schedule metadata needed for sampling")
    domain = LogAffineDomain(**ckpt.domain)
    sched = discretize(
        ScheduleKind(ckpt.schedule_params["kind"]),
        ckpt.schedule_params["shift_ratio"],
        ckpt.schedule_params["T"],
    )
    scale = ckpt.guidance_scale if guidance_scale is None else guidance_scale
    guidance = diffusion.GuidanceConfig.for_z_dim(bundle.config.z_dim, scale=scale)

    rows_meta = read_manifest(manifest_path)
    preds, gts, ldrs = [], [], []
    for start in range(0, len(rows_meta), batch_size):
        chunk = rows_meta[start : start + batch_size]
        hdr_buffers, ldr_arrays = [], []
        for row in chunk:
            hdr, ldr = load_pair(manifest_path, row)
            hdr_buffers.append(hdr)
            ldr_arrays.append(ldr.data)
        ldr_batch = torch.from_numpy(
            np.stack(ldr_arrays).transpose(0, 3, 1, 2).copy()
        ).float()
        with torch.no_grad():
            z = bundle.encoder(ldr_batch)
        extra = ldr_batch if bundle.config.concat_ldr else None
        x0 = diffusion.sample(
            bundle.denoiser, z, sched, guidance, rng_seed=seed + start, ldr=extra
        )
        for i, row in enumerate(chunk):
            pred_hdr = domain.model_to_hdr(x0[i].numpy().transpose(1, 2, 0))
            preds.append(tonemap(pred_hdr, EVAL_TONEMAP_GAMMA).data)
            gts.append(tonemap(hdr_buffers[i], EVAL_TONEMAP_GAMMA).data)
            ldrs.append(ldr_arrays[i])

    rows = [
        score_prediction(meta.index, p, g, l)
        for meta, p, g, l in zip(rows_meta, preds, gts, ldrs)
    ]
    report = EvalReport.from_rows(rows)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
