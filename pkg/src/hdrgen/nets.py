"""Learned components: LDR encoder, LDR decoder, and the denoising UNet.

The denoiser is a UNet whose conv blocks are recurrent-residual (each
block's convolution is iterated with a residual skip) and whose
decoder-side skip connections pass through additive attention gates.
Downsampling is max-pooling stride 2, upsampling factor-2 nearest
interpolation plus a conv. The timestep enters through a sinusoidal
embedding; the conditioning latent is projected and added to that
embedding, and the combined vector is injected into every block.

The encoder mirrors the contracting path and ends in global average
pooling to a z_dim vector; the decoder inverts it back to an LDR-range
image. A lightweight conv-stem encoder is provided as the
no-autoencoder conditioning alternative.

Group normalization is used throughout so evaluation-mode outputs are
deterministic functions of the inputs and parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = "hdrgen-checkpoint-v1"


@dataclass(frozen=True)
class NetConfig:
    base_resolution: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    recurrent_steps: int = 2
    z_dim: int = 64
    time_embed_dim: int = 128
    attention_levels: tuple[int, ...] = (1, 2)
    init_seed: int = 0
    # experiment flag: concatenate the LDR image to x_t along channels
    concat_ldr: bool = False

    def __post_init__(self):
        r = self.base_resolution
        if r < 16 or (r & (r - 1)) != 0:
            raise ValueError(f"base_resolution must be a power of two >= 16, got {r}")
        depth = len(self.channel_multipliers)
        if depth < 1:
            raise ValueError("channel_multipliers must be non-empty")
        if r < 2**depth:
            raise ValueError(
                f"resolution {r} too small for depth {depth} (need >= {2**depth})"
            )
        if self.recurrent_steps < 1:
            raise ValueError("recurrent_steps must be >= 1")
        if self.z_dim < 8:
            raise ValueError("z_dim must be >= 8")
        # attention gates sit on skip connections, which exist at levels
        # 0 .. depth-2 (the bottom level has no skip)
        for lvl in self.attention_levels:
            if not 0 <= lvl <= depth - 2:
                raise ValueError(
                    f"attention level {lvl} outside skip levels 0..{depth - 2}"
                )

    @property
    def depth(self) -> int:
        return len(self.channel_multipliers)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style sin/cos embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class RecurrentConv(nn.Module):
    """One conv layer iterated ``steps`` times with the block input re-fed.

    steps = 1 collapses to a plain conv -> norm -> activation layer.
    """

    def __init__(self, channels: int, steps: int):
        super().__init__()
        self.steps = steps
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(_groups(channels), channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm(self.conv(x)))
        for _ in range(self.steps - 1):
            h = F.silu(self.norm(self.conv(x + h)))
        return h


class R2Block(nn.Module):
    """Recurrent-residual block: 1x1 channel projection, embedding injection,
    two recurrent conv layers, and a residual skip over them."""

    def __init__(self, ch_in: int, ch_out: int, emb_dim: int, steps: int):
        super().__init__()
        self.proj = nn.Conv2d(ch_in, ch_out, kernel_size=1)
        self.emb = nn.Linear(emb_dim, ch_out)
        self.rec1 = RecurrentConv(ch_out, steps)
        self.rec2 = RecurrentConv(ch_out, steps)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.proj(x) + self.emb(F.silu(emb))[:, :, None, None]
        return h + self.rec2(self.rec1(h))


class AttentionGate(nn.Module):
    """Additive attention gate: the gating signal from the decoder path
    weights the encoder skip feature map pixel-wise."""

    def __init__(self, ch_gate: int, ch_skip: int, ch_inter: int):
        super().__init__()
        self.w_gate = nn.Conv2d(ch_gate, ch_inter, kernel_size=1)
        self.w_skip = nn.Conv2d(ch_skip, ch_inter, kernel_size=1)
        self.psi = nn.Conv2d(ch_inter, 1, kernel_size=1)

    def forward(self, gate: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        a = torch.sigmoid(self.psi(F.relu(self.w_gate(gate) + self.w_skip(skip))))
        return skip * a


class UpsampleConv(nn.Module):
    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.conv = nn.Conv2d(ch_in, ch_out, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Denoiser(nn.Module):
    """Noise predictor: (x_t, t, condition vector) -> predicted noise."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        chs = config.channels
        depth = config.depth
        emb_dim = config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        # normalizing z first keeps the conditioning pathway well-scaled no
        # matter how small the encoder's output starts out
        self.z_proj = nn.Sequential(
            nn.LayerNorm(config.z_dim),
            nn.Linear(config.z_dim, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )

        in_channels = 6 if config.concat_ldr else 3
        self.stem = nn.Conv2d(in_channels, chs[0], kernel_size=3, padding=1)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

        self.down = nn.ModuleList(
            R2Block(chs[max(lvl - 1, 0)], chs[lvl], emb_dim, config.recurrent_steps)
            for lvl in range(depth)
        )
        # besides the per-block channel bias, the conditioning embedding gets
        # direct spatial projections into the two deepest feature maps; a
        # global latent cannot dictate layout through channel biases alone
        self.cond_spatial = nn.ModuleDict()
        self.spatial_sizes: dict[str, tuple[int, int]] = {}
        for lvl in range(max(depth - 2, 0), depth):
            size = config.base_resolution // 2**lvl
            self.cond_spatial[str(lvl)] = nn.Linear(emb_dim, chs[lvl] * size**2)
            self.spatial_sizes[str(lvl)] = (chs[lvl], size)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        self.gates = nn.ModuleDict()
        for lvl in range(depth - 2, -1, -1):
            self.upsample.append(UpsampleConv(chs[lvl + 1], chs[lvl]))
            self.up.append(
                R2Block(2 * chs[lvl], chs[lvl], emb_dim, config.recurrent_steps)
            )
            if lvl in config.attention_levels:
                self.gates[str(lvl)] = AttentionGate(
                    chs[lvl], chs[lvl], max(chs[lvl] // 2, 1)
                )
        self.out = nn.Conv2d(chs[0], 3, kernel_size=1)
        # damped (not zeroed) output init keeps early reverse steps tame while
        # leaving gradients through the input nonzero from the start
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            self.out.bias.mul_(0.1)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor | int,
        z: torch.Tensor,
        ldr: torch.Tensor | None = None,
    ) -> torch.Tensor:
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
        if x_t.shape[-1] != self.config.base_resolution:
            raise ValueError(
                f"expected {self.config.base_resolution}px input, got {x_t.shape[-1]}px"
            )
        batch = x_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long, device=x_t.device)
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[0] == 1 and batch > 1:
            z = z.expand(batch, -1)
        if self.config.concat_ldr:
            if ldr is None:
                raise ValueError("concat_ldr is enabled: the LDR image is required")
            if ldr.dim() == 3:
                ldr = ldr.unsqueeze(0)
            x_t = torch.cat([x_t, ldr.to(x_t.dtype)], dim=1)
        elif ldr is not None:
            raise ValueError("concat_ldr is disabled: unexpected LDR input")

        emb = sinusoidal_embedding(t, self.config.time_embed_dim).to(self.stem.weight.dtype)
        emb = self.time_mlp(emb) + self.z_proj(z)

        skips = []
        h = self.stem(x_t)
        for lvl, block in enumerate(self.down):
            h = block(h, emb)
            key = str(lvl)
            if key in self.cond_spatial:
                ch, size = self.spatial_sizes[key]
                h = h + self.cond_spatial[key](F.silu(emb)).reshape(-1, ch, size, size)
            if lvl < self.config.depth - 1:
                skips.append(h)
                h = self.pool(h)

        for i, lvl in enumerate(range(self.config.depth - 2, -1, -1)):
            h = self.upsample[i](h)
            skip = skips.pop()
            if str(lvl) in self.gates:
                skip = self.gates[str(lvl)](h, skip)
            h = self.up[i](torch.cat([skip, h], dim=1), emb)

        out = self.out(h)
        return out.squeeze(0) if squeeze else out


class LdrEncoder(nn.Module):
    """Contracting conv path ending in global average pooling to z_dim."""

    def __init__(self, config: NetConfig):
        super().__init__()
        chs = config.channels
        layers: list[nn.Module] = [nn.Conv2d(3, chs[0], kernel_size=3, padding=1)]
        for lvl in range(config.depth):
            ch_in = chs[max(lvl - 1, 0)] if lvl > 0 else chs[0]
            layers += [
                nn.Conv2d(ch_in, chs[lvl], kernel_size=3, padding=1),
                nn.GroupNorm(_groups(chs[lvl]), chs[lvl]),
                nn.SiLU(),
                nn.Conv2d(chs[lvl], chs[lvl], kernel_size=3, padding=1),
                nn.GroupNorm(_groups(chs[lvl]), chs[lvl]),
                nn.SiLU(),
            ]
            if lvl < config.depth - 1:
                layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(chs[-1], config.z_dim)
        self.config = config

    def forward(self, ldr: torch.Tensor) -> torch.Tensor:
        squeeze = ldr.dim() == 3
        if squeeze:
            ldr = ldr.unsqueeze(0)
        if ldr.shape[-1] != self.config.base_resolution:
            raise ValueError(
                f"expected {self.config.base_resolution}px input, got {ldr.shape[-1]}px"
            )
        h = self.body(ldr)
        z = self.head(h.mean(dim=(2, 3)))
        return z.squeeze(0) if squeeze else z


class LdrDecoder(nn.Module):
    """Transpose of the encoder: z_dim vector to a [0, 1] image."""

    def __init__(self, config: NetConfig):
        super().__init__()
        chs = config.channels
        self.bottom = config.base_resolution // 2 ** (config.depth - 1)
        self.ch_bottom = chs[-1]
        self.head = nn.Linear(config.z_dim, self.ch_bottom * self.bottom**2)
        blocks: list[nn.Module] = []
        for lvl in range(config.depth - 2, -1, -1):
            blocks += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(chs[lvl + 1], chs[lvl], kernel_size=3, padding=1),
                nn.GroupNorm(_groups(chs[lvl]), chs[lvl]),
                nn.SiLU(),
                nn.Conv2d(chs[lvl], chs[lvl], kernel_size=3, padding=1),
                nn.GroupNorm(_groups(chs[lvl]), chs[lvl]),
                nn.SiLU(),
            ]
        blocks.append(nn.Conv2d(chs[0], 3, kernel_size=1))
        self.body = nn.Sequential(*blocks)
        self.config = config

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.config.z_dim:
            raise ValueError(f"expected z_dim {self.config.z_dim}, got {z.shape[-1]}")
        h = self.head(z).reshape(-1, self.ch_bottom, self.bottom, self.bottom)
        out = torch.sigmoid(self.body(h))
        return out.squeeze(0) if squeeze else out


class ConvStemEncoder(nn.Module):
    """Plain strided-conv embedding of the LDR image, used when the model
    is conditioned without the trained autoencoder."""

    def __init__(self, config: NetConfig):
        super().__init__()
        c = config.base_channels
        self.body = nn.Sequential(
            nn.Conv2d(3, c, kernel_size=3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, kernel_size=3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(2 * c, config.z_dim)
        self.config = config

    def forward(self, ldr: torch.Tensor) -> torch.Tensor:
        squeeze = ldr.dim() == 3
        if squeeze:
            ldr = ldr.unsqueeze(0)
        z = self.head(self.body(ldr).mean(dim=(2, 3)))
        return z.squeeze(0) if squeeze else z


# ----------------------------------------------------------------------
# Bundle construction and checkpoints
# ----------------------------------------------------------------------

@dataclass
class ModelBundle:
    encoder: nn.Module
    decoder: nn.Module | None
    denoiser: Denoiser
    config: NetConfig
    encoder_kind: str = "unet"  # "unet" | "stem"

    def modules(self) -> dict[str, nn.Module]:
        mods = {"encoder": self.encoder, "denoiser": self.denoiser}
        if self.decoder is not None:
            mods["decoder"] = self.decoder
        return mods

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()

    def named_parameters(self):
        for name, m in self.modules().items():
            for pname, p in m.named_parameters():
                yield f"{name}.{pname}", p

    def train(self) -> None:
        for m in self.modules().values():
            m.train()

    def eval(self) -> None:
        for m in self.modules().values():
            m.eval()

    def flat_state(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.named_parameters()}

    def load_flat_state(self, flat: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                p.copy_(flat[name])


def build_bundle(
    config: NetConfig, with_decoder: bool = True, encoder_kind: str = "unet"
) -> ModelBundle:
    """Construct all networks with fan-in-scaled init from config.init_seed."""
    if encoder_kind not in ("unet", "stem"):
        raise ValueError(f"unknown encoder_kind {encoder_kind!r}")
    with torch.random.fork_rng():
        torch.manual_seed(config.init_seed)
        encoder = LdrEncoder(config) if encoder_kind == "unet" else ConvStemEncoder(config)
        decoder = LdrDecoder(config) if with_decoder else None
        denoiser = Denoiser(config)
    return ModelBundle(encoder, decoder, denoiser, config, encoder_kind)


def count_parameters(bundle: ModelBundle) -> int:
    return sum(p.numel() for p in bundle.parameters() if p.requires_grad)


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    *,
    step: int,
    ema_state: dict[str, torch.Tensor],
    optimizer_state: dict | None = None,
    rng_state: torch.Tensor | None = None,
    domain: dict | None = None,
    schedule_params: dict | None = None,
    guidance_scale: float = 2.0,
    variant: str = "full",
    config_text: str = "",
) -> None:
    """Write a single versioned archive with config, parameters, EMA shadow,
    optimizer moments, the step counter, and the training RNG state."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in asdict(bundle.config).items()
        },
        "encoder_kind": bundle.encoder_kind,
        "with_decoder": bundle.decoder is not None,
        "variant": variant,
        "step": int(step),
        "model_state": bundle.flat_state(),
        "ema_state": {k: v.detach().clone() for k, v in ema_state.items()},
        "optimizer_state": optimizer_state,
        "rng_state": rng_state,
        "domain": domain,
        "schedule_params": schedule_params,
        "guidance_scale": guidance_scale,
        "config_text": config_text,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


@dataclass
class LoadedCheckpoint:
    bundle: ModelBundle
    ema_state: dict[str, torch.Tensor]
    step: int
    optimizer_state: dict | None
    rng_state: torch.Tensor | None
    domain: dict | None
    schedule_params: dict | None
    guidance_scale: float
    variant: str
    config_text: str


def load_checkpoint(
    path: str | Path, expected_config: NetConfig | None = None
) -> LoadedCheckpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    raw = payload["net_config"]
    config = NetConfig(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    )
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    bundle = build_bundle(
        config,
        with_decoder=payload["with_decoder"],
        encoder_kind=payload["encoder_kind"],
    )
    bundle.load_flat_state(payload["model_state"])
    return LoadedCheckpoint(
        bundle=bundle,
        ema_state=payload["ema_state"],
        step=payload["step"],
        optimizer_state=payload["optimizer_state"],
        rng_state=payload["rng_state"],
        domain=payload["domain"],
        schedule_params=payload["schedule_params"],
        guidance_scale=payload["guidance_scale"],
        variant=payload["variant"],
        config_text=payload["config_text"],
    )
