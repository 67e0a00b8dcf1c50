"""Evaluation metrics on 8-bit quantised images, and per-path reports.

Predictions are always converted to integers in [0, 255] before SSIM/PSNR
are measured, matching how the results are reported.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch

from . import losses
from .data import DatasetManifest, denormalize, load_pair, normalize
from .model import INFERENCE_PATHS, CoReFusionNet

EVAL_PSNR_CAP_DB = 100.0
REPORT_COLUMNS = ("scene_id", "path", "ssim", "psnr")
SUMMARY_ID = "__mean__"

# files each inference path is allowed to read
PATH_MODALITIES = {
    "full": ("rgb", "lr_thermal", "hr_thermal"),
    "thermal_only": ("lr_thermal", "hr_thermal"),
    "rgb_only": ("rgb", "hr_thermal"),
}


def quantize(img) -> np.ndarray:
    """[-1, 1] floats -> uint8 via denormalise, clamp, x255, round half away from zero."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    scaled = np.clip(denormalize(arr), 0.0, 1.0) * 255.0
    # values are non-negative, so floor(x + 0.5) rounds half away from zero
    return np.floor(scaled + 0.5).astype(np.uint8)


def dequantize(q) -> np.ndarray:
    return normalize(np.asarray(q, dtype=np.float64) / 255.0)


def _lift(a, b) -> Tuple[torch.Tensor, torch.Tensor]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return torch.from_numpy(a.astype(np.float64)), torch.from_numpy(b.astype(np.float64))


def eval_ssim(a, b) -> float:
    """Windowed SSIM on 0-255 integer images."""
    x, y = _lift(a, b)
    return float(losses.ssim(x, y, losses.SsimConstants.for_range(255.0), "windowed"))


def eval_psnr(a, b) -> float:
    """PSNR with MAX = 255; identical images give the 100 dB cap."""
    x, y = _lift(a, b)
    return float(losses.psnr(x, y, 255.0, EVAL_PSNR_CAP_DB))


@dataclass
class MetricsReport:
    path: str
    n_samples: int
    mean_ssim: float
    mean_psnr_db: float
    per_sample: List[Tuple[str, float, float]] = field(default_factory=list)

    @classmethod
    def from_samples(cls, path: str, per_sample) -> "MetricsReport":
        per_sample = [(str(s), float(a), float(b)) for s, a, b in per_sample]
        n = len(per_sample)
        mean_ssim = math.fsum(r[1] for r in per_sample) / n if n else float("nan")
        mean_psnr = math.fsum(r[2] for r in per_sample) / n if n else float("nan")
        return cls(path, n, mean_ssim, mean_psnr, per_sample)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "n_samples": self.n_samples,
            "mean_ssim": self.mean_ssim,
            "mean_psnr_db": self.mean_psnr_db,
            "per_sample": [{"scene_id": s, "ssim": a, "psnr": b} for s, a, b in self.per_sample],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rows = [(r["scene_id"], r["ssim"], r["psnr"]) for r in d["per_sample"]]
        return cls(d["path"], int(d["n_samples"]), float(d["mean_ssim"]), float(d["mean_psnr_db"]), rows)

    def csv_rows(self):
        for s, a, b in self.per_sample:
            yield [s, self.path, repr(a), repr(b)]
        yield [SUMMARY_ID, self.path, repr(self.mean_ssim), repr(self.mean_psnr_db)]


def write_reports(reports: List[MetricsReport], csv_path, json_path=None):
    """CSV with one row per sample plus a summary row per path, and a JSON twin."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerows(r.csv_rows())
    if json_path is None:
        json_path = csv_path.with_suffix(".json")
    Path(json_path).write_text(json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2) + "\n")
    return csv_path, Path(json_path)


def read_reports_json(json_path) -> List[MetricsReport]:
    doc = json.loads(Path(json_path).read_text())
    return [MetricsReport.from_dict(d) for d in doc["reports"]]


def _as_tensor(arr, dtype):
    return None if arr is None else torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


@torch.no_grad()
def predict_pairs(net: CoReFusionNet, pairs, path: str, batch_size: int = 8) -> List[np.ndarray]:
    """Run one inference path over loaded pairs; returns [-1, 1] predictions."""
    if path not in INFERENCE_PATHS:
        raise ValueError(f"path must be one of {INFERENCE_PATHS}, got {path!r}")
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    try:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            rgb = lr = None
            if path != "thermal_only":
                rgb = _as_tensor(np.stack([p.hr_rgb for p in chunk]), dtype)
            if path != "rgb_only":
                lr = _as_tensor(np.stack([p.lr_thermal for p in chunk]), dtype)
            pred = net.predict_path(path, rgb, lr)
            out.extend(pred.double().numpy())
    finally:
        net.train(was_training)
    return out


def score_pairs(net: CoReFusionNet, pairs, path: str) -> MetricsReport:
    """Quantised SSIM/PSNR of ``path`` predictions against ``hr_thermal``."""
    preds = predict_pairs(net, pairs, path)
    rows = []
    for p, pred in zip(pairs, preds):
        q_pred = quantize(pred)
        q_true = quantize(normalize(p.hr_thermal))
        rows.append((p.scene_id, eval_ssim(q_pred, q_true), eval_psnr(q_pred, q_true)))
    return MetricsReport.from_samples(path, rows)


def evaluate(net: CoReFusionNet, manifest: DatasetManifest, split: str, path: str) -> MetricsReport:
    """Evaluate one inference path on a dataset split.

    Only the files the path needs are read, so a thermal-only evaluation
    never opens ``rgb.png`` and an RGB-only one never opens the LR thermal.
    """
    if path not in PATH_MODALITIES:
        raise ValueError(f"path must be one of {INFERENCE_PATHS}, got {path!r}")
    pairs = [load_pair(manifest, sid, PATH_MODALITIES[path]) for sid in manifest.scenes(split)]
    return score_pairs(net, pairs, path)
