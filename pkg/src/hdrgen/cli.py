"""The ``hdrgen`` command line: batch data generation, training, sampling,
evaluation, ablations, schedule export, and tone mapping.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go
to stderr; data goes only to the paths named in flags.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import metrics, training
from .camera_sim import SceneSpec, make_dataset, stratified_exposure_sampler
from .imgio import read_pfm, read_ppm, tonemap, write_pfm, write_ppm
from .schedule import ScheduleKind, discretize, snr_curve_csv
from .training import TrainConfig, Variant


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrgen",
        description="Single-image LDR-to-HDR reconstruction with a conditional diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, required=True, help="number of (HDR, LDR) pairs")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--stops", type=float, default=8.0, help="scene dynamic range in stops")
    p.add_argument("--gamma", type=float, default=1.0 / 2.4, help="camera response exponent")

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("sample", help="reconstruct HDR from one LDR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ldr", required=True, help="input PPM")
    p.add_argument("--out", required=True, help="output PFM (a tonemapped PPM preview is written alongside)")
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--eval-manifest", required=True, help="held-out manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override max_steps per variant")
    p.add_argument(
        "--variants",
        default=",".join(v.value for v in Variant),
        help="comma-separated subset of the variants",
    )

    p = sub.add_parser("schedule", help="export a noise schedule as CSV")
    p.add_argument("--kind", choices=["cosine", "shifted"], default="shifted")
    p.add_argument("--shift", type=float, default=0.25)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("tonemap", help="tonemap an HDR PFM to a PPM")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _train_config(args) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_text(Path(args.config).read_text())
    else:
        config = TrainConfig()
    overrides = {}
    if args.manifest is not None:
        overrides["manifest"] = args.manifest
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    config = replace(config, **overrides)
    if not config.manifest:
        raise ValueError("no manifest given (flag --manifest or config key)")
    return config


def _run(args) -> None:
    if args.command == "synth-data":
        spec = SceneSpec(
            seed=args.seed, size=args.size, n_blobs=args.blobs,
            dynamic_range_stops=args.stops,
        )
        manifest = make_dataset(
            args.n, spec, stratified_exposure_sampler(gamma=args.gamma), args.out
        )
        print(manifest)

    elif args.command == "train":
        ckpt = training.train(_train_config(args), resume_from=args.resume)
        print(ckpt)

    elif args.command == "sample":
        ldr = read_ppm(args.ldr)
        hdr = metrics.sample_from_checkpoint(
            args.checkpoint, ldr, seed=args.seed, guidance_scale=args.guidance
        )
        out = Path(args.out)
        write_pfm(hdr, out)
        write_ppm(tonemap(hdr, metrics.EVAL_TONEMAP_GAMMA), out.with_suffix(".ppm"))
        print(out)

    elif args.command == "eval":
        report = metrics.evaluate(
            args.checkpoint, args.manifest, args.out,
            guidance_scale=args.guidance, seed=args.seed,
        )
        print(f"psnr {report.psnr_mean:.3f}±{report.psnr_std:.3f} dB, "
              f"ssim {report.ssim_mean:.4f}±{report.ssim_std:.4f}")

    elif args.command == "ablate":
        config = _train_config(args)
        variants = tuple(Variant(v.strip()) for v in args.variants.split(",") if v.strip())
        csv_path = training.run_ablation(config, variants, args.eval_manifest)
        print(csv_path)

    elif args.command == "schedule":
        kind = ScheduleKind.COSINE if args.kind == "cosine" else ScheduleKind.SHIFTED_COSINE
        snr_curve_csv(discretize(kind, args.shift, args.steps), args.out)
        print(args.out)

    elif args.command == "tonemap":
        write_ppm(tonemap(read_pfm(args.input), args.gamma), args.out)
        print(args.out)

    else:  # pragma: no cover - argparse enforces the choices
        raise ValueError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        _run(args)
    except Exception as e:  # noqa: BLE001 - single CLI failure boundary
        print(f"hdrgen: error: {e}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
