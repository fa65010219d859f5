"""The trainable networks: segmentation encoder-decoder with max-pooling
index reuse, the shape-prior VAE encoder and generator, and the mask
discriminator. All are defined at configurable desk scale; batch
normalization precedes every weight layer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_CLASSES = 3


class ConsistencyError(RuntimeError):
    """Internal wiring broke an invariant (e.g. unpool index outside its window)."""


@dataclass(frozen=True)
class SegNetConfig:
    input_size: tuple[int, int] = (64, 32)  # (width, height)
    in_channels: int = 1
    channel_widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = NUM_CLASSES

    @property
    def num_stages(self) -> int:
        return len(self.channel_widths)

    def validate(self) -> None:
        w, h = self.input_size
        factor = 2 ** self.num_stages
        if w % factor or h % factor:
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^{self.num_stages}"
            )
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")


@dataclass(frozen=True)
class VaeGanConfig:
    mask_size: tuple[int, int] = (64, 32)  # (width, height), matches seg output
    latent_dim: int = 16
    encoder_widths: tuple[int, ...] = (16, 32, 64)
    generator_widths: tuple[int, ...] = (64, 32, 16)
    discriminator_widths: tuple[int, ...] = (16, 32, 64)
    rec_feature_layer: int = 1  # 1-based index of a hidden discriminator conv layer

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if not 1 <= self.rec_feature_layer <= len(self.discriminator_widths):
            raise ValueError(
                f"rec_feature_layer {self.rec_feature_layer} does not index a hidden "
                f"conv layer (discriminator has {len(self.discriminator_widths)})"
            )
        w, h = self.mask_size
        for widths, name in ((self.encoder_widths, "encoder"), (self.generator_widths, "generator")):
            factor = 2 ** len(widths)
            if w % factor or h % factor:
                raise ValueError(f"mask size {self.mask_size} not divisible for {name} depth")


@dataclass
class ShapeLatent:
    """Diagonal-Gaussian latent: per-sample mean and strictly positive scale."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same shape")
        if (self.sigma <= 0).any():
            raise ValueError("sigma must be strictly positive")


def pool_with_indices(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """2x2 non-overlapping max pool returning flat argmax positions.

    Ties resolve to the first occurrence in row-major order within each
    window. Indices are flat offsets into the (H, W) plane, as recorded by
    the pooling pass and consumed by `unpool_with_indices`.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W), got {x.dim()} dims")
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by the 2x2 window")
    return F.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)


def unpool_with_indices(
    pooled: torch.Tensor, indices: torch.Tensor, out_size: tuple[int, int]
) -> torch.Tensor:
    """Place each pooled value back at its recorded argmax position, zeros elsewhere."""
    if pooled.shape != indices.shape:
        raise ValueError("pooled values and indices must have the same shape")
    h, w = out_size
    if (h, w) != (2 * pooled.shape[-2], 2 * pooled.shape[-1]):
        raise ValueError(f"out_size {out_size} does not match pooled size {tuple(pooled.shape[-2:])}")
    rows = torch.div(indices, w, rounding_mode="floor")
    cols = indices - rows * w
    grid_r = torch.arange(pooled.shape[-2], device=pooled.device).view(1, 1, -1, 1)
    grid_c = torch.arange(pooled.shape[-1], device=pooled.device).view(1, 1, 1, -1)
    in_window = (torch.div(rows, 2, rounding_mode="floor") == grid_r) & (
        torch.div(cols, 2, rounding_mode="floor") == grid_c
    )
    if not bool(in_window.all()):
        raise ConsistencyError("unpool index falls outside its 2x2 window")
    b, c = pooled.shape[:2]
    out = pooled.new_zeros(b, c, h * w)
    out.scatter_(2, indices.reshape(b, c, -1), pooled.reshape(b, c, -1))
    return out.view(b, c, h, w)


def _bn_conv(cin: int, cout: int, relu: bool = True, slope: float = 0.0) -> nn.Sequential:
    layers: list[nn.Module] = [nn.BatchNorm2d(cin), nn.Conv2d(cin, cout, 3, padding=1)]
    if relu:
        layers.append(nn.LeakyReLU(slope) if slope else nn.ReLU())
    return nn.Sequential(*layers)


def _bn_conv_down(cin: int, cout: int, slope: float = 0.0) -> nn.Sequential:
    return nn.Sequential(
        nn.BatchNorm2d(cin),
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.LeakyReLU(slope) if slope else nn.ReLU(),
    )


class SegmentationNet(nn.Module):
    """Encoder-decoder segmentation network; the decoder unpools with the
    encoder's recorded max-pooling indices. Output is a per-pixel softmax
    over (background, sclera, iris) at the input's spatial size."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.channel_widths
        enc, cin = [], config.in_channels
        for w in widths:
            enc.append(nn.Sequential(_bn_conv(cin, w), _bn_conv(w, w)))
            cin = w
        self.encoder_stages = nn.ModuleList(enc)
        dec = []
        for i in reversed(range(len(widths))):
            w = widths[i]
            wout = widths[i - 1] if i > 0 else widths[0]
            dec.append(nn.Sequential(_bn_conv(w, w), _bn_conv(w, wout)))
        self.decoder_stages = nn.ModuleList(dec)
        self.classifier = nn.Sequential(
            nn.BatchNorm2d(widths[0]), nn.Conv2d(widths[0], config.num_classes, 3, padding=1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w, h = self.config.input_size
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or x.shape[-2:] != (h, w):
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, {h}, {w}), got {tuple(x.shape)}"
            )
        stack = []
        for stage in self.encoder_stages:
            x = stage(x)
            stack.append(x.shape[-2:])
            x, idx = pool_with_indices(x)
            stack[-1] = (stack[-1], idx)
        for stage in self.decoder_stages:
            size, idx = stack.pop()
            x = unpool_with_indices(x, idx, size)
            x = stage(x)
        return torch.softmax(self.classifier(x), dim=1)


class ShapeEncoder(nn.Module):
    """Maps 3-channel mask probabilities to a diagonal-Gaussian latent."""

    def __init__(self, config: VaeGanConfig):
        super().__init__()
        config.validate()
        self.config = config
        blocks, cin = [], NUM_CLASSES
        for w in config.encoder_widths:
            blocks.append(_bn_conv_down(cin, w))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        fw, fh = self._final_size()
        flat = config.encoder_widths[-1] * fw * fh
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)

    def _final_size(self) -> tuple[int, int]:
        factor = 2 ** len(self.config.encoder_widths)
        return self.config.mask_size[0] // factor, self.config.mask_size[1] // factor

    def forward(self, y: torch.Tensor) -> ShapeLatent:
        w, h = self.config.mask_size
        if y.dim() != 4 or y.shape[1] != NUM_CLASSES or y.shape[-2:] != (h, w):
            raise ValueError(f"expected mask batch (B, 3, {h}, {w}), got {tuple(y.shape)}")
        feat = self.blocks(y).flatten(1)
        mu = self.fc_mu(feat)
        logvar = self.fc_logvar(feat).clamp(-20.0, 4.0)
        return ShapeLatent(mu=mu, sigma=torch.exp(0.5 * logvar))


def reparameterize(latent: ShapeLatent, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample z = mu + sigma * eps with standard-normal eps from the given RNG."""
    eps = torch.randn(
        latent.mu.shape, generator=generator, dtype=latent.mu.dtype, device=latent.mu.device
    )
    return latent.mu + latent.sigma.clamp_min(1e-8) * eps


class ShapeGenerator(nn.Module):
    """Decodes a latent vector into 3-channel mask probabilities."""

    def __init__(self, config: VaeGanConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.generator_widths
        factor = 2 ** len(widths)
        self.start_size = (config.mask_size[0] // factor, config.mask_size[1] // factor)
        self.fc = nn.Linear(config.latent_dim, widths[0] * self.start_size[0] * self.start_size[1])
        blocks, cin = [], widths[0]
        for w in widths:
            blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _bn_conv(cin, w)))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(nn.BatchNorm2d(cin), nn.Conv2d(cin, NUM_CLASSES, 3, padding=1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"expected latent (B, {self.config.latent_dim}), got {tuple(z.shape)}")
        sw, sh = self.start_size
        x = self.fc(z).view(z.shape[0], -1, sh, sw)
        x = self.blocks(x)
        return torch.softmax(self.head(x), dim=1)


class ShapeDiscriminator(nn.Module):
    """Judges mask probability maps; exposes hidden conv features for the
    feature-space reconstruction loss (1-based layer indexing)."""

    def __init__(self, config: VaeGanConfig):
        super().__init__()
        config.validate()
        self.config = config
        blocks, cin = [], NUM_CLASSES
        for w in config.discriminator_widths:
            blocks.append(_bn_conv_down(cin, w, slope=0.2))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        factor = 2 ** len(config.discriminator_widths)
        flat = cin * (config.mask_size[0] // factor) * (config.mask_size[1] // factor)
        self.head = nn.Linear(flat, 1)

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        w, h = self.config.mask_size
        if y.dim() != 4 or y.shape[1] != NUM_CLASSES or y.shape[-2:] != (h, w):
            raise ValueError(f"expected mask batch (B, 3, {h}, {w}), got {tuple(y.shape)}")
        features = []
        x = y
        for block in self.blocks:
            x = block(x)
            features.append(x)
        validity = torch.sigmoid(self.head(x.flatten(1))).squeeze(1)
        return validity, features

    def feature_at(self, features: list[torch.Tensor], layer: int | None = None) -> torch.Tensor:
        layer = self.config.rec_feature_layer if layer is None else layer
        if not 1 <= layer <= len(features):
            raise ValueError(f"layer {layer} out of range 1..{len(features)}")
        return features[layer - 1]


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministically (re-)initialize all weights from the given RNG.

    Conv/linear weights are He-normal, biases zero; batch-norm scale 1,
    shift 0. Iteration order is the module's registration order, so a fixed
    seed yields bit-identical parameters.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.dim() > 2 else 1)
            std = math.sqrt(2.0 / max(fan_in, 1))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers (order-independent names)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    kind: str
    configs: dict
    state_dicts: dict
    step: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    kind: str,
    modules: dict[str, nn.Module],
    configs: dict,
    step: int,
    extra: dict | None = None,
) -> None:
    """Write a named-tensor archive with configs and the step counter."""
    payload = {
        "kind": kind,
        "configs": {k: asdict(v) for k, v in configs.items()},
        "state_dicts": {k: m.state_dict() for k, m in modules.items()},
        "step": step,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(
        kind=payload["kind"],
        configs=payload["configs"],
        state_dicts=payload["state_dicts"],
        step=payload["step"],
        extra=payload.get("extra", {}),
    )


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_prior_checkpoint(path) -> tuple[ShapeEncoder, ShapeGenerator, ShapeDiscriminator, VaeGanConfig, int]:
    """Rebuild the stage-1 networks; any shape mismatch fails loudly."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "prior":
        raise ValueError(f"{path} is not a shape-prior checkpoint (kind={ckpt.kind!r})")
    cfg = VaeGanConfig(**_tupled(ckpt.configs["vaegan"]))
    encoder = ShapeEncoder(cfg)
    generator = ShapeGenerator(cfg)
    discriminator = ShapeDiscriminator(cfg)
    encoder.load_state_dict(ckpt.state_dicts["encoder"], strict=True)
    generator.load_state_dict(ckpt.state_dicts["generator"], strict=True)
    discriminator.load_state_dict(ckpt.state_dicts["discriminator"], strict=True)
    return encoder, generator, discriminator, cfg, ckpt.step


def load_seg_checkpoint(path) -> tuple[SegmentationNet, SegNetConfig, int, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "seg":
        raise ValueError(f"{path} is not a segmentation checkpoint (kind={ckpt.kind!r})")
    cfg = SegNetConfig(**_tupled(ckpt.configs["segnet"]))
    model = SegmentationNet(cfg)
    model.load_state_dict(ckpt.state_dicts["model"], strict=True)
    return model, cfg, ckpt.step, ckpt.extra
