"""Input checks for the estimator API."""

from __future__ import annotations

from typing import Mapping, Optional, Tuple

import numpy as np

from .data import SCALE


def _check_batch(arr, name: str, channels: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be (N, C, H, W), got shape {arr.shape}")
    if arr.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channel(s), got {arr.shape[1]}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    return arr


def check_paired_input(
    X, rgb_channels: int = 3, thermal_channels: int = 1, require_both: bool = False
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Validate ``X = {"rgb": ..., "lr_thermal": ...}``.

    Either key may be missing or ``None`` (a missing modality) unless
    ``require_both``. Returns ``(rgb, lr_thermal)`` as float64 batches.
    """
    if isinstance(X, Mapping):
        unknown = set(X) - {"rgb", "lr_thermal"}
        if unknown:
            raise ValueError(f"unknown input keys {sorted(unknown)}; expected 'rgb' and/or 'lr_thermal'")
        rgb, lr = X.get("rgb"), X.get("lr_thermal")
    elif isinstance(X, (tuple, list)) and len(X) == 2:
        rgb, lr = X
    else:
        raise TypeError("X must be a mapping with 'rgb'/'lr_thermal' entries or an (rgb, lr_thermal) pair")
    if rgb is None and lr is None:
        raise ValueError("X carries neither modality")
    if require_both and (rgb is None or lr is None):
        raise ValueError("both 'rgb' and 'lr_thermal' are required here")
    rgb = None if rgb is None else _check_batch(rgb, "rgb", rgb_channels)
    lr = None if lr is None else _check_batch(lr, "lr_thermal", thermal_channels)
    if rgb is not None:
        h, w = rgb.shape[-2:]
        if h % SCALE or w % SCALE:
            raise ValueError(f"rgb size {h}x{w} is not divisible by {SCALE}")
    if rgb is not None and lr is not None:
        if rgb.shape[0] != lr.shape[0]:
            raise ValueError(f"rgb has {rgb.shape[0]} samples, lr_thermal {lr.shape[0]}")
        if lr.shape[-2:] != (rgb.shape[-2] // SCALE, rgb.shape[-1] // SCALE):
            raise ValueError(f"lr_thermal {lr.shape[-2:]} must be rgb {rgb.shape[-2:]} / {SCALE}")
    return rgb, lr


def hr_shape(rgb, lr) -> Tuple[int, int, int]:
    """``(N, H, W)`` of the high-resolution output implied by the inputs."""
    if rgb is not None:
        return rgb.shape[0], rgb.shape[-2], rgb.shape[-1]
    return lr.shape[0], lr.shape[-2] * SCALE, lr.shape[-1] * SCALE


def check_target(y, n: int, h: int, w: int) -> np.ndarray:
    """Validate HR thermal targets in [0, 1], shape ``(N, 1, H, W)``."""
    y = _check_batch(y, "y", 1)
    if y.shape != (n, 1, h, w):
        raise ValueError(f"y must have shape {(n, 1, h, w)}, got {y.shape}")
    if y.min() < 0 or y.max() > 1:
        raise ValueError("y must lie in [0, 1]")
    return y
