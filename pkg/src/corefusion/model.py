"""Dual-encoder U-Net with element-wise maximum skip fusion.

Two independent residual encoders (RGB guide, bilinearly pre-upsampled
thermal) each emit a feature pyramid. The pyramids are fused level by level
with an element-wise maximum and handed to a single U-Net decoder. The two
bottleneck tensors are also tapped, before fusion, by projection heads that
feed the contrastive regulariser.

If one modality is absent the surviving encoder's pyramid goes to the
decoder unfused.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SCALE

ENCODERS = ("rgb", "thermal")
HEADS = ("head_rgb", "head_thermal")
PARAMETER_TAGS = ("rgb_encoder", "thermal_encoder", "decoder", "head_rgb", "head_thermal")
ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
}

FeaturePyramid = List[torch.Tensor]


@dataclass
class ModelConfig:
    depth: int = 4
    widths: Tuple[int, ...] = (8, 16, 32, 64)
    thermal_in_channels: int = 1
    rgb_in_channels: int = 3
    blocks_per_level: int = 2
    projection_dim: int = 64
    temperature: float = 1.0
    output_activation: str = "tanh"
    seed: int = 0
    # False gives parameter-free normalisation (used by zero-propagation checks)
    norm_affine: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if len(self.widths) != self.depth:
            raise ValueError(f"need {self.depth} widths, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"widths must be non-decreasing, got {self.widths}")
        if self.thermal_in_channels < 1 or self.rgb_in_channels < 1:
            raise ValueError("input channel counts must be positive")
        if self.blocks_per_level < 0:
            raise ValueError("blocks_per_level must be >= 0")
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be positive")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def min_input_size(self) -> int:
        # depth skip levels plus one more halving for the bottleneck
        return 2**self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, stride=1, affine=True):
        super().__init__(_conv(cin, cout, stride), nn.GroupNorm(_groups(cout), cout, affine=affine), nn.ReLU())


class ResidualBlock(nn.Module):
    """Basic ResNet block: two 3x3 conv/norm stages with an identity shortcut."""

    def __init__(self, channels: int, affine: bool = True):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.norm1 = nn.GroupNorm(_groups(channels), channels, affine=affine)
        self.conv2 = _conv(channels, channels)
        self.norm2 = nn.GroupNorm(_groups(channels), channels, affine=affine)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + x)


class Encoder(nn.Module):
    """Residual encoder producing ``depth`` skip levels and a bottleneck."""

    def __init__(self, in_channels: int, widths: Sequence[int], blocks: int, affine: bool = True):
        super().__init__()
        self.in_channels = in_channels
        stages = []
        prev = in_channels
        for i, w in enumerate(widths):
            layers = [ConvNormAct(prev, w, stride=1 if i == 0 else 2, affine=affine)]
            layers += [ResidualBlock(w, affine) for _ in range(blocks)]
            stages.append(nn.Sequential(*layers))
            prev = w
        bottleneck = [ConvNormAct(prev, prev, stride=2, affine=affine)]
        bottleneck += [ResidualBlock(prev, affine) for _ in range(blocks)]
        stages.append(nn.Sequential(*bottleneck))
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> FeaturePyramid:
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int, affine: bool = True):
        super().__init__()
        self.body = nn.Sequential(ConvNormAct(cin + cskip, cout, affine=affine), ConvNormAct(cout, cout, affine=affine))

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.body(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, widths: Sequence[int], activation: str, affine: bool = True):
        super().__init__()
        blocks = []
        prev = widths[-1]
        for w in reversed(widths):
            blocks.append(DecoderBlock(prev, w, w, affine))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[0], 1, 1)
        self.activation = activation

    def forward(self, skips: FeaturePyramid) -> torch.Tensor:
        x = skips[-1]
        for block, skip in zip(self.blocks, reversed(skips[:-1])):
            x = block(x, skip)
        return ACTIVATIONS[self.activation](self.head(x))


class ProjectionHead(nn.Module):
    """avgpool -> FC -> BN -> ReLU -> FC -> BN."""

    def __init__(self, in_channels: int, dim: int, affine: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.fc1 = nn.Linear(in_channels, dim)
        self.bn1 = nn.BatchNorm1d(dim, affine=affine)
        self.fc2 = nn.Linear(dim, dim)
        self.bn2 = nn.BatchNorm1d(dim, affine=affine)

    def forward(self, x):
        x = x.mean(dim=(-2, -1))
        x = F.relu(self.bn1(self.fc1(x)))
        return self.bn2(self.fc2(x))


def fuse_max(a: FeaturePyramid, b: FeaturePyramid) -> FeaturePyramid:
    """Element-wise maximum at every pyramid level.

    On exact ties the subgradient goes to ``a``.
    """
    if len(a) != len(b):
        raise ValueError(f"pyramids have {len(a)} and {len(b)} levels")
    fused = []
    for i, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ValueError(f"level {i}: shapes {tuple(x.shape)} and {tuple(y.shape)} differ")
        fused.append(torch.where(x >= y, x, y))
    return fused


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {tuple(x.shape)}")
    return x, False


class CoReFusionNet(nn.Module):
    """The full network; submodule names double as parameter tags."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        affine = config.norm_affine
        self.rgb_encoder = Encoder(config.rgb_in_channels, config.widths, config.blocks_per_level, affine)
        self.thermal_encoder = Encoder(config.thermal_in_channels, config.widths, config.blocks_per_level, affine)
        self.decoder = Decoder(config.widths, config.output_activation, affine)
        self.head_rgb = ProjectionHead(config.widths[-1], config.projection_dim, affine)
        self.head_thermal = ProjectionHead(config.widths[-1], config.projection_dim, affine)

    # -- building blocks -------------------------------------------------

    def _encoder(self, which: str) -> Encoder:
        if which not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {which!r}")
        return self.rgb_encoder if which == "rgb" else self.thermal_encoder

    def encode(self, which: str, img: torch.Tensor) -> FeaturePyramid:
        enc = self._encoder(which)
        x, _ = _batched(img)
        if x.shape[1] != enc.in_channels:
            raise ValueError(f"{which} encoder expects {enc.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        m = self.config.min_input_size
        if h % m or w % m:
            raise ValueError(f"input {h}x{w} must be divisible by {m} for depth {self.config.depth}")
        return enc(x)

    def decode(self, skips: FeaturePyramid) -> torch.Tensor:
        cfg = self.config
        if len(skips) != cfg.depth + 1:
            raise ValueError(f"expected {cfg.depth + 1} pyramid levels, got {len(skips)}")
        widths = list(cfg.widths) + [cfg.widths[-1]]
        h, w = skips[0].shape[-2:]
        for i, (s, c) in enumerate(zip(skips, widths)):
            expect = (c, h >> i, w >> i)
            if tuple(s.shape[1:]) != expect:
                raise ValueError(f"skip level {i} has shape {tuple(s.shape[1:])}, expected {expect}")
        return self.decoder(skips)

    def project(self, which: str, bottleneck: torch.Tensor) -> torch.Tensor:
        if which not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {which!r}")
        head = self.head_rgb if which == "head_rgb" else self.head_thermal
        x, _ = _batched(bottleneck)
        if x.shape[1] != head.in_channels:
            raise ValueError(f"bottleneck has {x.shape[1]} channels, head expects {head.in_channels}")
        return head(x)

    def upsample_thermal(self, lr_thermal: torch.Tensor, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        x, _ = _batched(lr_thermal)
        if size is None:
            size = (x.shape[-2] * SCALE, x.shape[-1] * SCALE)
        if size == tuple(x.shape[-2:]):
            return x
        return F.interpolate(x, size=size, mode="bilinear", align_corners=True)

    # -- forward paths ---------------------------------------------------

    def forward_full(self, hr_rgb, lr_thermal, with_projections: bool = True):
        """Both modalities. Returns ``(pred, z_rgb, z_thermal)``.

        Projections are ``None`` when ``with_projections`` is false.
        """
        rgb, squeeze = _batched(hr_rgb)
        lr, _ = _batched(lr_thermal)
        h, w = rgb.shape[-2:]
        if tuple(lr.shape[-2:]) != (h // SCALE, w // SCALE) or h % SCALE or w % SCALE:
            raise ValueError(f"lr_thermal {tuple(lr.shape[-2:])} must be hr_rgb {(h, w)} / {SCALE}")
        if rgb.shape[0] != lr.shape[0]:
            raise ValueError("hr_rgb and lr_thermal batch sizes differ")
        p_rgb = self.encode("rgb", rgb)
        p_th = self.encode("thermal", self.upsample_thermal(lr, (h, w)))
        pred = self.decode(fuse_max(p_rgb, p_th))
        z_rgb = z_th = None
        if with_projections:
            z_rgb = self.project("head_rgb", p_rgb[-1])
            z_th = self.project("head_thermal", p_th[-1])
        if squeeze:
            pred = pred.squeeze(0)
            z_rgb = None if z_rgb is None else z_rgb.squeeze(0)
            z_th = None if z_th is None else z_th.squeeze(0)
        return pred, z_rgb, z_th

    def forward_single(self, which: str, img) -> torch.Tensor:
        """One modality only; thermal input is LR and is upsampled x8 first."""
        x, squeeze = _batched(img)
        if which == "thermal":
            x = self.upsample_thermal(x)
        pred = self.decode(self.encode(which, x))
        return pred.squeeze(0) if squeeze else pred

    def forward(self, hr_rgb=None, lr_thermal=None):
        if hr_rgb is not None and lr_thermal is not None:
            return self.forward_full(hr_rgb, lr_thermal, with_projections=False)[0]
        if lr_thermal is not None:
            return self.forward_single("thermal", lr_thermal)
        if hr_rgb is not None:
            return self.forward_single("rgb", hr_rgb)
        raise ValueError("at least one modality is required")

    def predict_path(self, path: str, hr_rgb=None, lr_thermal=None) -> torch.Tensor:
        """Prediction for a named inference path (full, thermal_only, rgb_only)."""
        if path == "full":
            return self.forward_full(hr_rgb, lr_thermal, with_projections=False)[0]
        if path == "thermal_only":
            return self.forward_single("thermal", lr_thermal)
        if path == "rgb_only":
            return self.forward_single("rgb", hr_rgb)
        raise ValueError(f"unknown inference path {path!r}")


INFERENCE_PATHS = ("full", "thermal_only", "rgb_only")


def parameter_tags(net: CoReFusionNet) -> Dict[str, str]:
    """Map each parameter name to the submodule that owns it."""
    tags = {}
    for name, _ in net.named_parameters():
        tag = name.split(".", 1)[0]
        if tag not in PARAMETER_TAGS:
            raise RuntimeError(f"parameter {name} has no submodule tag")
        tags[name] = tag
    return tags


@torch.no_grad()
def init_parameters(config: ModelConfig, dtype: torch.dtype = torch.float32) -> CoReFusionNet:
    """Build a network whose weights depend only on ``config.seed``.

    Conv and linear weights are He-normal (fan-in), biases zero,
    normalisation scales one and offsets zero. The output conv is scaled by
    0.01 so initial predictions sit near zero.
    """
    net = CoReFusionNet(config).to(dtype)
    gen = torch.Generator().manual_seed(config.seed)
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=dtype) * std)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, (nn.GroupNorm, nn.BatchNorm1d)) and module.affine:
            module.weight.fill_(1.0)
            module.bias.zero_()
    net.decoder.head.weight.mul_(0.01)
    return net
