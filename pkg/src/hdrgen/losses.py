"""Training loss terms and their combination.

Four terms feed the total objective:

  multiscale   weighted sum over dyadic resolutions d of
               (1/d) * (1/d^2) * channel-averaged squared error between
               box-downsampled true and predicted noise
  reconstruction   mean squared error between the input LDR and the
               autoencoder's decoded LDR
  perceptual   stage-summed MSE of channel-unit-normalized activations of
               a fixed convolutional feature stack
  exposure     -zeta * |sum(x)/sum(max(x,1)) - sum(y)/sum(max(y,1))|,
               a reward for exposure contrast between the predicted image
               and the input LDR (for in-range inputs the ratios are just
               the image means)

All terms accept (C, H, W) or (B, C, H, W) tensors, preserve the input
dtype (float64 in, float64 math), and are differentiable, so analytic
gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    """Term switches, the exposure scale zeta, and the multiscale resolutions."""

    zeta: float = 0.1
    use_mstl: bool = True
    use_rec: bool = True
    use_lpips: bool = True
    use_exp: bool = True
    scales: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")
        if not (self.use_mstl or self.use_rec or self.use_lpips or self.use_exp):
            raise ValueError("at least one loss term must be enabled")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        base = max(self.scales)
        for s in self.scales:
            if s < 1 or base % s != 0:
                raise ValueError(f"scale {s} does not divide the base resolution {base}")

    @property
    def base_resolution(self) -> int:
        return max(self.scales)


@dataclass(frozen=True)
class LossReport:
    total: float
    per_term: dict = field(default_factory=dict)

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.total!r},{self.per_term.get('mstl', 0.0)!r},"
            f"{self.per_term.get('rec', 0.0)!r},{self.per_term.get('lpips', 0.0)!r},"
            f"{self.per_term.get('exp', 0.0)!r}"
        )


LOSS_CSV_HEADER = "step,total,mstl,rec,lpips,exp"


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got shape {tuple(x.shape)}")


def downsample_avg(x: torch.Tensor, d: int) -> torch.Tensor:
    """Non-overlapping box average of a square image down to d x d."""
    xb = _batched(x)
    side = xb.shape[-1]
    if xb.shape[-2] != side:
        raise ValueError(f"input must be square, got {tuple(xb.shape)}")
    if d < 1 or side % d != 0:
        raise ValueError(f"target side {d} must divide input side {side}")
    out = F.avg_pool2d(xb, kernel_size=side // d)
    return out if x.dim() == 4 else out.squeeze(0)


def multiscale_loss(
    eps_true: torch.Tensor, eps_pred: torch.Tensor, scales: tuple[int, ...]
) -> torch.Tensor:
    """Sum over scales d of (1/d) * (1/d^2) * mean-over-channels of the
    summed squared error between box-downsampled noise tensors."""
    a, b = _batched(eps_true), _batched(eps_pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    side = a.shape[-1]
    if max(scales) != side:
        raise ValueError(
            f"largest scale {max(scales)} must equal the input side {side}"
        )
    channels = a.shape[1]
    batch = a.shape[0]
    total = a.new_zeros(())
    for d in scales:
        diff = downsample_avg(a, d) - downsample_avg(b, d)
        total = total + diff.pow(2).sum() / (d * d * d * channels * batch)
    return total


def reconstruction_loss(ldr_true: torch.Tensor, ldr_decoded: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    a, b = _batched(ldr_true), _batched(ldr_decoded)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


class FeatureStack(torch.nn.Module):
    """Fixed random convolutional feature pyramid for the perceptual term.

    Weights are drawn once from a seeded generator and never trained; tanh
    keeps every stage smooth so finite-difference gradient checks hold.
    A learned feature extractor with the same call signature (image ->
    list of stage activations) can be substituted.
    """

    def __init__(
        self,
        seed: int = 0,
        in_channels: int = 3,
        widths: tuple[int, ...] = (16, 32, 64),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = torch.nn.ModuleList()
        prev = in_channels
        for w in widths:
            conv = torch.nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5
                )
                conv.bias.zero_()
            self.convs.append(conv)
            prev = w
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h)
        return feats


def perceptual_loss(
    x_a: torch.Tensor, x_b: torch.Tensor, feature_extractor: torch.nn.Module
) -> torch.Tensor:
    """Stage-summed MSE between channel-unit-normalized feature activations."""
    a, b = _batched(x_a), _batched(x_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    for fa, fb in zip(feature_extractor(a), feature_extractor(b)):
        na = fa / (fa.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8)
        nb = fb / (fb.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8)
        total = total + (na - nb).pow(2).mean()
    return total


def exposure_loss(
    x0_hat_norm: torch.Tensor, x_ldr_norm: torch.Tensor, zeta: float
) -> torch.Tensor:
    """-zeta * |sum(x)/sum(max(x, 1)) - sum(y)/sum(max(y, 1))| per image,
    averaged over the batch. For inputs in [0, 1] each ratio reduces to the
    image mean; the max keeps the denominator sane if a prediction strays
    out of range early in training."""
    if zeta < 0:
        raise ValueError(f"zeta must be >= 0, got {zeta}")
    x, y = _batched(x0_hat_norm), _batched(x_ldr_norm)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    rx = x.sum(dim=(1, 2, 3)) / x.clamp(min=1.0).sum(dim=(1, 2, 3))
    ry = y.sum(dim=(1, 2, 3)) / y.clamp(min=1.0).sum(dim=(1, 2, 3))
    return -zeta * (rx - ry).abs().mean()


@dataclass
class LossInputs:
    """Everything enabled terms may need; unused entries can stay None.

    eps_true/eps_pred are model-domain noise tensors; ldr/ldr_decoded are
    [0, 1] images; x0/x0_hat are model-domain images for the perceptual
    term; x0_hat_unit is the prediction mapped to [0, 1) for the exposure
    term (decode to linear radiance, then v / (1 + v)).
    """

    eps_true: torch.Tensor | None = None
    eps_pred: torch.Tensor | None = None
    ldr: torch.Tensor | None = None
    ldr_decoded: torch.Tensor | None = None
    x0: torch.Tensor | None = None
    x0_hat: torch.Tensor | None = None
    x0_hat_unit: torch.Tensor | None = None


def model_domain_to_unit(
    x: torch.Tensor, log_min: float, log_max: float, epsilon_log: float
) -> torch.Tensor:
    """Map model-domain values to [0, 1): affine to the log range, decode to
    linear radiance, then the gamma-1 display curve v / (1 + v)."""
    logv = (x + 1.0) / 2.0 * (log_max - log_min) + log_min
    v = torch.exp(logv) - epsilon_log
    v = v.clamp(min=0.0)
    return v / (1.0 + v)


def total_loss(
    inputs: LossInputs,
    weights: LossWeights,
    feature_extractor: torch.nn.Module | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Combine the enabled terms; disabled terms contribute exactly zero.

    Returns the differentiable scalar plus an itemized report whose
    per-term values sum to the total.
    """
    terms: dict[str, torch.Tensor] = {}
    if weights.use_mstl:
        terms["mstl"] = multiscale_loss(inputs.eps_true, inputs.eps_pred, weights.scales)
    if weights.use_rec:
        terms["rec"] = reconstruction_loss(inputs.ldr, inputs.ldr_decoded)
    if weights.use_lpips:
        if feature_extractor is None:
            raise ValueError("perceptual term enabled but no feature_extractor given")
        terms["lpips"] = perceptual_loss(inputs.x0_hat, inputs.x0, feature_extractor)
    if weights.use_exp:
        terms["exp"] = exposure_loss(inputs.x0_hat_unit, inputs.ldr, weights.zeta)

    total = None
    for v in terms.values():
        total = v if total is None else total + v
    per_term = {
        name: float(terms[name].detach()) if name in terms else 0.0
        for name in ("mstl", "rec", "lpips", "exp")
    }
    # the report total is the exact float sum of the itemized values
    return total, LossReport(total=sum(per_term.values()), per_term=per_term)
