"""Differentiable training objectives.

Every function takes torch tensors and stays inside the autograd graph.
Image arguments are ``(C, H, W)`` or batched ``(N, C, H, W)``; batched
losses average a per-sample value over ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .data import denormalize

PSNR_CAP_DB = 100.0
PSNR_SCALE_DB = 40.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_psnr: float = 0.1
    w_ssim: float = 0.1
    beta: float = 0.0

    def __post_init__(self):
        for name in ("w_mse", "w_psnr", "w_ssim", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class SsimConstants:
    c1: float
    c2: float
    data_range: float

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")

    @classmethod
    def for_range(cls, data_range: float = 1.0) -> "SsimConstants":
        return cls((0.01 * data_range) ** 2, (0.03 * data_range) ** 2, data_range)


@dataclass
class LossBreakdown:
    mse: torch.Tensor
    psnr_loss: torch.Tensor
    ssim_loss: torch.Tensor
    contrastive: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("mse", "psnr_loss", "ssim_loss", "contrastive", "total")}


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def psnr(pred, target, max_value: float = 1.0, cap_db: float = PSNR_CAP_DB) -> torch.Tensor:
    """10 log10(MAX^2 / MSE) over the whole input, capped at ``cap_db``.

    The cap is realised by flooring the MSE, so gradients vanish beyond it.
    """
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = mse(pred, target)
    floor = max_value**2 * 10.0 ** (-cap_db / 10.0)
    return 10.0 * torch.log10(max_value**2 / torch.clamp(err, min=floor))


def psnr_loss(pred, target, cap_db: float = PSNR_CAP_DB) -> torch.Tensor:
    """Mean over the batch of ``1 - PSNR/40``, PSNR taken on [0, 1] images.

    Inputs live in the normalised [-1, 1] domain.
    """
    _same_shape(pred, target)
    p, t = _per_sample(denormalize(pred)), _per_sample(denormalize(target))
    vals = torch.stack([psnr(p[i], t[i], 1.0, cap_db) for i in range(p.shape[0])])
    return (1.0 - vals / PSNR_SCALE_DB).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _ssim_map(x, y, c1, c2, mu_x, mu_y, xx, yy, xy):
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2 * (mu_x * mu_y) + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, y, constants: Optional[SsimConstants] = None, mode: str = "windowed") -> torch.Tensor:
    """Structural similarity of two same-shaped images (or batches).

    ``global`` evaluates the formula once with image-wide biased statistics
    per sample and channel; ``windowed`` averages it over all valid 11x11
    Gaussian (sigma 1.5) windows. Channels and batch entries are averaged.
    """
    _same_shape(x, y)
    if constants is None:
        constants = SsimConstants.for_range(1.0)
    c1, c2 = constants.c1, constants.c2
    x4, y4 = _per_sample(x), _per_sample(y)
    if mode == "global":
        mu_x = x4.mean(dim=(-2, -1), keepdim=True)
        mu_y = y4.mean(dim=(-2, -1), keepdim=True)
        dx, dy = x4 - mu_x, y4 - mu_y
        var_x = (dx * dx).mean(dim=(-2, -1))
        var_y = (dy * dy).mean(dim=(-2, -1))
        cov = (dx * dy).mean(dim=(-2, -1))
        mu_x, mu_y = mu_x[..., 0, 0], mu_y[..., 0, 0]
        num = (2 * (mu_x * mu_y) + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        return (num / den).mean()
    if mode != "windowed":
        raise ValueError(f"mode must be 'global' or 'windowed', got {mode!r}")
    n, c, h, w = x4.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"windowed SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")
    win = gaussian_window(dtype=x4.dtype).to(x4.device)[None, None]

    def filt(t):
        return F.conv2d(t.reshape(n * c, 1, h, w), win)

    mu_x, mu_y = filt(x4), filt(y4)
    smap = _ssim_map(x4, y4, c1, c2, mu_x, mu_y, filt(x4 * x4), filt(y4 * y4), filt(x4 * y4))
    return smap.mean()


def ssim_loss(pred, target, mode: str = "windowed") -> torch.Tensor:
    """Mean over the batch of ``1 - SSIM``; inputs in [-1, 1], SSIM taken on [0, 1]."""
    _same_shape(pred, target)
    p, t = _per_sample(denormalize(pred)), _per_sample(denormalize(target))
    consts = SsimConstants.for_range(1.0)
    vals = torch.stack([ssim(p[i], t[i], consts, mode) for i in range(p.shape[0])])
    return (1.0 - vals).mean()


def _similarity(views: torch.Tensor, temperature: float) -> torch.Tensor:
    norms = views.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm projection: cosine similarity is undefined")
    unit = views / norms[:, None]
    return unit @ unit.T / temperature


def contrastive_pair_term(i: int, j: int, views: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """-log(exp(sim_ij) / sum_{k != i} exp(sim_ik)); the positive j stays in the sum.

    Indices are zero-based rows of ``views`` (shape ``(2n, d)``).
    """
    m = views.shape[0]
    if m < 4 or m % 2:
        raise ValueError(f"need an even number of at least 4 views (n >= 2 pairs), got {m}")
    if i == j:
        raise ValueError("anchor and positive must differ")
    sim = _similarity(views, temperature)
    others = torch.cat([sim[i, :i], sim[i, i + 1 :]])
    return torch.logsumexp(others, dim=0) - sim[i, j]


def interleave(z_rgb: torch.Tensor, z_thermal: torch.Tensor) -> torch.Tensor:
    """Rows ordered rgb_1, thermal_1, rgb_2, thermal_2, ..."""
    return torch.stack([z_rgb, z_thermal], dim=1).reshape(-1, z_rgb.shape[-1])


def contrastive_loss(z_rgb: torch.Tensor, z_thermal: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """(1/n) sum_k [l(2k-1, 2k) + l(2k, 2k-1)] over interleaved views."""
    if z_rgb.shape != z_thermal.shape or z_rgb.dim() != 2:
        raise ValueError(f"projection batches must be equal (n, d) shapes, got {tuple(z_rgb.shape)}, {tuple(z_thermal.shape)}")
    n = z_rgb.shape[0]
    if n < 2:
        raise ValueError(f"contrastive loss needs at least 2 pairs, got {n}")
    sim = _similarity(interleave(z_rgb, z_thermal), temperature)
    m = 2 * n
    eye = torch.eye(m, dtype=torch.bool, device=sim.device)
    denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    partner = torch.arange(m, device=sim.device) ^ 1
    terms = denom - sim[torch.arange(m, device=sim.device), partner]
    return terms.sum() / n


def total_loss(
    pred,
    target,
    z_rgb: Optional[torch.Tensor] = None,
    z_thermal: Optional[torch.Tensor] = None,
    weights: LossWeights = LossWeights(),
    temperature: float = 1.0,
    ssim_mode: str = "windowed",
) -> LossBreakdown:
    """Weighted sum of MSE, PSNR, SSIM and contrastive terms.

    Without projections (single-modality step) the contrastive term is zero
    whatever ``beta`` is.
    """
    l_mse = mse(pred, target)
    l_psnr = psnr_loss(pred, target)
    l_ssim = ssim_loss(pred, target, ssim_mode)
    if z_rgb is None or z_thermal is None:
        l_c = torch.zeros((), dtype=l_mse.dtype, device=l_mse.device)
    else:
        l_c = contrastive_loss(z_rgb, z_thermal, temperature)
    total = weights.w_mse * l_mse + weights.w_psnr * l_psnr + weights.w_ssim * l_ssim + weights.beta * l_c
    return LossBreakdown(l_mse, l_psnr, l_ssim, l_c, total)
