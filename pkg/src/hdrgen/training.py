"""End-to-end training: data binding, guidance dropout, losses, EMA, ablations.

The loop is fully deterministic given (seed, config, platform): every
stochastic draw (batch indices, timesteps, noise, guidance dropout)
comes from one torch Generator whose state is captured in checkpoints,
so a resumed run continues the exact trajectory of an uninterrupted one.

Variants mirror the ablation grid over the decoder and the exposure term:

  full          autoencoder conditioning, all four loss terms
  encoder_only  decoder removed (no reconstruction term), exposure kept
  no_exposure   decoder kept, exposure term dropped
  vanilla       conv-stem conditioning instead of the trained autoencoder;
                no reconstruction or exposure terms
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import diffusion, metrics
from .camera_sim import load_pair, read_manifest
from .imgio import LogAffineDomain, write_ppm, tonemap
from .losses import (
    LOSS_CSV_HEADER,
    FeatureStack,
    LossInputs,
    LossReport,
    LossWeights,
    model_domain_to_unit,
    total_loss,
)
from .nets import (
    ModelBundle,
    NetConfig,
    build_bundle,
    load_checkpoint,
    save_checkpoint,
)
from .schedule import NoiseSchedule, ScheduleKind, discretize


class Variant(Enum):
    FULL = "full"
    ENCODER_ONLY = "encoder_only"
    NO_EXPOSURE = "no_exposure"
    VANILLA = "vanilla"


# published full-scale reference PSNRs (256x256 training on real datasets),
# reported alongside desk-scale ablation results for context only
REFERENCE_FULL_SCALE_PSNR = {
    Variant.FULL: 16.97,
    Variant.NO_EXPOSURE: 16.71,
    Variant.VANILLA: 16.36,
}


@dataclass(frozen=True)
class TrainConfig:
    manifest: str = ""
    out_dir: str = "runs/default"
    variant: str = "full"
    # networks
    base_resolution: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    recurrent_steps: int = 2
    z_dim: int = 64
    time_embed_dim: int = 128
    attention_levels: tuple[int, ...] = (1, 2)
    # noise schedule; the shifted curve is meant for resolutions well above
    # the 32px desk scale, so the unshifted cosine is the default here
    schedule_kind: str = "cosine"
    shift_ratio: float = 1.0
    timesteps: int = 1000
    # experiment: also feed the LDR image to the denoiser spatially
    concat_ldr: bool = False
    # guidance
    guidance_scale: float = 2.0
    p_uncond: float = 0.1
    # losses
    zeta: float = 0.1
    loss_scales: tuple[int, ...] = ()   # empty -> (R/4, R/2, R)
    # optimization
    batch_size: int = 8
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    max_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 1000
    # value domain; None means "fit to the dataset at startup"
    log_min: float | None = None
    log_max: float | None = None
    epsilon_log: float = 1e-4

    def __post_init__(self):
        Variant(self.variant)
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def net_config(self) -> NetConfig:
        return NetConfig(
            base_resolution=self.base_resolution,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            recurrent_steps=self.recurrent_steps,
            z_dim=self.z_dim,
            time_embed_dim=self.time_embed_dim,
            attention_levels=self.attention_levels,
            init_seed=self.seed,
            concat_ldr=self.concat_ldr,
        )

    def scales(self) -> tuple[int, ...]:
        if self.loss_scales:
            return self.loss_scales
        r = self.base_resolution
        return (r // 4, r // 2, r)

    def loss_weights(self) -> LossWeights:
        v = Variant(self.variant)
        return LossWeights(
            zeta=self.zeta,
            use_mstl=True,
            use_rec=v in (Variant.FULL, Variant.NO_EXPOSURE),
            use_lpips=True,
            use_exp=v in (Variant.FULL, Variant.ENCODER_ONLY),
            scales=self.scales(),
        )

    def encoder_kind(self) -> str:
        return "stem" if Variant(self.variant) is Variant.VANILLA else "unet"

    def with_decoder(self) -> bool:
        return Variant(self.variant) in (Variant.FULL, Variant.NO_EXPOSURE)

    # -- flat key = value serialization ---------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "auto"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "TrainConfig":
        kv = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            kv[key] = val
        return TrainConfig.from_mapping(kv)

    @staticmethod
    def from_mapping(kv: dict[str, str]) -> "TrainConfig":
        typed = {}
        known = {f.name: f for f in fields(TrainConfig)}
        for key, val in kv.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            typed[key] = _parse_field(known[key], val)
        return TrainConfig(**typed)


def _parse_field(f, val: str):
    type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if "None" in type_name:
        return None if val.lower() in ("auto", "none") else float(val)
    if type_name == "bool":
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {val!r} for key {f.name}")
    if type_name == "int":
        return int(val)
    if type_name == "float":
        return float(val)
    if type_name == "str":
        return val
    # tuple[int, ...]
    if val.strip() == "":
        return ()
    return tuple(int(x) for x in val.split(","))


# ----------------------------------------------------------------------
# Train state
# ----------------------------------------------------------------------

def sample_null_mask(generator: torch.Generator, n: int, p_uncond: float) -> torch.Tensor:
    """Boolean mask of examples whose condition is replaced by the null token."""
    return torch.rand(n, generator=generator) < p_uncond


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    ema: dict[str, torch.Tensor]
    schedule: NoiseSchedule
    weights: LossWeights
    guidance: diffusion.GuidanceConfig
    extractor: FeatureStack
    generator: torch.Generator
    domain: LogAffineDomain
    hdr_model: torch.Tensor   # (N, 3, R, R) model-domain targets
    ldr: torch.Tensor         # (N, 3, R, R) inputs in [0, 1]
    step: int = 0
    reports: list[LossReport] = field(default_factory=list)

    def ema_update(self) -> None:
        d = self.config.ema_decay
        with torch.no_grad():
            for name, p in self.bundle.named_parameters():
                self.ema[name].mul_(d).add_(p, alpha=1.0 - d)


def _load_dataset(config: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, LogAffineDomain]:
    rows = read_manifest(config.manifest)
    hdrs, ldrs = [], []
    for row in rows:
        hdr, ldr = load_pair(config.manifest, row)
        if hdr.width != config.base_resolution or hdr.height != config.base_resolution:
            raise ValueError(
                f"pair {row.index}: expected {config.base_resolution}px images, "
                f"got {hdr.width}x{hdr.height}"
            )
        hdrs.append(hdr)
        ldrs.append(ldr.data)

    if config.log_min is None or config.log_max is None:
        vmin = min(float(h.data.min()) for h in hdrs)
        vmax = max(float(h.data.max()) for h in hdrs)
        domain = LogAffineDomain.from_hdr_values(vmin, vmax, config.epsilon_log)
    else:
        domain = LogAffineDomain(config.log_min, config.log_max, config.epsilon_log)

    x0 = np.stack([domain.hdr_to_model(h) for h in hdrs]).transpose(0, 3, 1, 2)
    ldr = np.stack(ldrs).transpose(0, 3, 1, 2)
    return (
        torch.from_numpy(x0.copy()).float(),
        torch.from_numpy(ldr.copy()).float(),
        domain,
    )


def init_train_state(config: TrainConfig, resume_from: str | Path | None = None) -> TrainState:
    hdr_model, ldr, domain = _load_dataset(config)
    bundle = build_bundle(
        config.net_config(),
        with_decoder=config.with_decoder(),
        encoder_kind=config.encoder_kind(),
    )
    optimizer = torch.optim.Adam(list(bundle.parameters()), lr=config.learning_rate)
    generator = torch.Generator(device="cpu").manual_seed(config.seed)
    sched = discretize(
        ScheduleKind(config.schedule_kind), config.shift_ratio, config.timesteps
    )
    state = TrainState(
        config=config,
        bundle=bundle,
        optimizer=optimizer,
        ema=bundle.flat_state(),
        schedule=sched,
        weights=config.loss_weights(),
        guidance=diffusion.GuidanceConfig.for_z_dim(
            config.z_dim, scale=config.guidance_scale, p_uncond=config.p_uncond
        ),
        extractor=FeatureStack(seed=config.seed),
        generator=generator,
        domain=domain,
        hdr_model=hdr_model,
        ldr=ldr,
    )
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_config=config.net_config())
        bundle.load_flat_state(ckpt.bundle.flat_state())
        state.ema = {k: v.clone() for k, v in ckpt.ema_state.items()}
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            generator.set_state(ckpt.rng_state)
        state.step = ckpt.step
    return state


def train_step(state: TrainState, batch: tuple[torch.Tensor, torch.Tensor] | None = None) -> LossReport:
    """One optimizer update; returns the itemized loss report.

    ``batch`` overrides the per-step uniform batch draw (the draw, the
    timesteps, the noise, and the guidance dropout all consume the state's
    generator in a fixed order).
    """
    cfg = state.config
    gen = state.generator
    if batch is None:
        idx = torch.randint(0, state.hdr_model.shape[0], (cfg.batch_size,), generator=gen)
        x0, ldr = state.hdr_model[idx], state.ldr[idx]
    else:
        x0, ldr = batch
    n = x0.shape[0]

    t = torch.randint(1, state.schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = diffusion.q_sample(x0, t, eps, state.schedule)

    z = state.bundle.encoder(ldr)
    mask = sample_null_mask(gen, n, cfg.p_uncond)
    null = state.guidance.null_token.to(z.dtype).unsqueeze(0).expand(n, -1)
    z_cond = torch.where(mask[:, None], null, z)

    extra = {"ldr": ldr} if cfg.concat_ldr else {}
    eps_pred = state.bundle.denoiser(x_t, t, z_cond, **extra)

    inputs = LossInputs(eps_true=eps, eps_pred=eps_pred, ldr=ldr)
    if state.weights.use_rec:
        inputs.ldr_decoded = state.bundle.decoder(z)
    if state.weights.use_lpips or state.weights.use_exp:
        x0_hat = diffusion.predict_x0(x_t, eps_pred, t, state.schedule)
        inputs.x0 = x0
        inputs.x0_hat = x0_hat
        if state.weights.use_exp:
            inputs.x0_hat_unit = model_domain_to_unit(
                x0_hat, state.domain.log_min, state.domain.log_max, state.domain.epsilon_log
            )

    loss, report = total_loss(inputs, state.weights, state.extractor)
    if not math.isfinite(report.total):
        raise RuntimeError(
            f"non-finite loss at step {state.step + 1}: {report.per_term}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.ema_update()
    state.step += 1
    state.reports.append(report)
    return report


def _save(state: TrainState, path: Path) -> None:
    save_checkpoint(
        path,
        state.bundle,
        step=state.step,
        ema_state=state.ema,
        optimizer_state=state.optimizer.state_dict(),
        rng_state=state.generator.get_state(),
        domain={
            "log_min": state.domain.log_min,
            "log_max": state.domain.log_max,
            "epsilon_log": state.domain.epsilon_log,
        },
        schedule_params={
            "kind": state.schedule.kind.value,
            "shift_ratio": state.schedule.shift_ratio,
            "T": state.schedule.T,
        },
        guidance_scale=state.config.guidance_scale,
        variant=state.config.variant,
        config_text=state.config.to_text(),
    )


def train(config: TrainConfig, resume_from: str | Path | None = None) -> Path:
    """Run to max_steps, writing a per-step loss CSV and periodic checkpoints.

    Returns the final checkpoint path. Checkpoints land on every multiple
    of checkpoint_every plus the final step.
    """
    state = init_train_state(config, resume_from=resume_from)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "loss.csv"
    mode = "a" if resume_from is not None and csv_path.exists() else "w"
    final: Path | None = None
    with open(csv_path, mode) as f:
        if mode == "w":
            f.write(LOSS_CSV_HEADER + "\n")
        while state.step < config.max_steps:
            report = train_step(state)
            f.write(report.csv_row(state.step) + "\n")
            if state.step % config.checkpoint_every == 0 or state.step == config.max_steps:
                final = out / f"ckpt_{state.step:06d}.pt"
                _save(state, final)
    assert final is not None
    return final


# ----------------------------------------------------------------------
# Ablation harness
# ----------------------------------------------------------------------

ABLATION_CSV_HEADER = "variant,psnr_db,ssim,reference_full_scale_psnr"


def run_ablation(
    base_config: TrainConfig,
    variants: tuple[Variant, ...],
    eval_manifest: str | Path,
    eval_seed: int = 1234,
) -> Path:
    """Train every variant with the shared seed, score each on the held-out
    manifest, and emit a comparison CSV plus one tonemapped sample per
    variant. An untrained-initialization row anchors the comparison; the
    reference column carries published full-scale scores for context.

    Returns the ablation CSV path.
    """
    root = Path(base_config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    results: list[tuple[str, float, float]] = []

    # untrained baseline: the full-variant bundle at initialization
    untrained_cfg = replace(
        base_config, variant=Variant.FULL.value, out_dir=str(root / "untrained"), max_steps=1
    )
    u_state = init_train_state(untrained_cfg)
    Path(untrained_cfg.out_dir).mkdir(parents=True, exist_ok=True)
    u_ckpt = Path(untrained_cfg.out_dir) / "ckpt_000000.pt"
    _save(u_state, u_ckpt)
    u_report = metrics.evaluate(u_ckpt, eval_manifest, seed=eval_seed)
    results.append(("untrained", u_report.psnr_mean, u_report.ssim_mean))

    for variant in variants:
        cfg = replace(
            base_config, variant=variant.value, out_dir=str(root / variant.value)
        )
        ckpt = train(cfg)
        report = metrics.evaluate(
            ckpt, eval_manifest, out_csv=root / f"eval_{variant.value}.csv", seed=eval_seed
        )
        results.append((variant.value, report.psnr_mean, report.ssim_mean))

        first = read_manifest(eval_manifest)[0]
        _, ldr = load_pair(eval_manifest, first)
        hdr_hat = metrics.sample_from_checkpoint(ckpt, ldr, seed=eval_seed)
        write_ppm(
            tonemap(hdr_hat, metrics.EVAL_TONEMAP_GAMMA),
            root / f"sample_{variant.value}.ppm",
        )

    csv_path = root / "ablation.csv"
    with open(csv_path, "w") as f:
        f.write(ABLATION_CSV_HEADER + "\n")
        for name, p, s in results:
            ref = ""
            try:
                ref_val = REFERENCE_FULL_SCALE_PSNR.get(Variant(name))
                ref = "" if ref_val is None else repr(ref_val)
            except ValueError:
                pass
            f.write(f"{name},{p!r},{s!r},{ref}\n")
    return csv_path
