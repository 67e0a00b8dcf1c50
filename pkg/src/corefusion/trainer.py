"""Adam training loop, beta sweeps and training logs."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import DatasetManifest, SamplePair, augment_flip, load_split, normalize
from .losses import LossWeights, total_loss
from .metrics import MetricsReport, score_pairs
from .model import INFERENCE_PATHS, CoReFusionNet, ModelConfig, init_parameters

log = logging.getLogger(__name__)

DEFAULT_BETAS = (0.0, 0.001, 0.01, 0.1, 1.0)
LOG_COLUMNS = (
    "epoch", "train_ssim", "train_psnr", "val_ssim", "val_psnr",
    "mse", "psnr_loss", "ssim_loss", "contrastive", "total",
)
SWEEP_COLUMNS = ("beta", "path", "best_epoch", "train_ssim", "train_psnr", "val_ssim", "val_psnr")
CURVE_COLUMNS = ("beta", "epoch", "split", "metric", "value")


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; training aborted")
        self.parameter = name


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 125
    max_steps: Optional[int] = None
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 1
    modality_dropout: float = 0.0
    ssim_mode: str = "windowed"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ConfigError("Adam coefficients out of range")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_weights.beta > 0 and self.batch_size < 2:
            raise ConfigError("contrastive loss (beta > 0) needs batch_size >= 2")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise ConfigError(f"modality_dropout must lie in [0, 1], got {self.modality_dropout}")
        if self.ssim_mode not in ("windowed", "global"):
            raise ConfigError(f"ssim_mode must be 'windowed' or 'global', got {self.ssim_mode!r}")

    def with_beta(self, beta: float) -> "TrainConfig":
        return replace(self, loss_weights=replace(self.loss_weights, beta=float(beta)))


@dataclass
class EpochRecord:
    epoch: int
    train_ssim: float
    train_psnr: float
    val_ssim: float
    val_psnr: float
    mse: float
    psnr_loss: float
    ssim_loss: float
    contrastive: float
    total: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    steps: int = 0
    initial_train_mse: float = float("nan")
    final_train_mse: float = float("nan")
    best_epoch: Optional[int] = None
    best_val_ssim: float = float("-inf")

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {c: (int(row[c]) if c == "epoch" else _parse(row[c])) for c in LOG_COLUMNS}
                out.append(EpochRecord(**vals))
        return out


def _fmt(v):
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _parse(s: str) -> float:
    return float(s) if s else float("nan")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, Optional[torch.Tensor]],
    state: AdamState,
    config: TrainConfig,
) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update; inputs are not modified.

    A missing gradient (``None`` or absent key) counts as zero.
    """
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# training


def _to_batch(pairs: Sequence[SamplePair], dtype):
    rgb = torch.from_numpy(np.stack([p.hr_rgb for p in pairs])).to(dtype)
    lr = torch.from_numpy(np.stack([p.lr_thermal for p in pairs])).to(dtype)
    hr = torch.from_numpy(np.stack([p.hr_thermal for p in pairs])).to(dtype)
    return rgb, lr, normalize(hr)


@torch.no_grad()
def dataset_mse(net: CoReFusionNet, pairs: Sequence[SamplePair], batch_size: int = 8) -> float:
    """Full-path MSE in the normalised domain, no augmentation."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    total, count = 0.0, 0
    try:
        for s in range(0, len(pairs), batch_size):
            rgb, lr, target = _to_batch(pairs[s : s + batch_size], dtype)
            pred = net.forward_full(rgb, lr, with_projections=False)[0]
            total += float(((pred - target) ** 2).sum())
            count += target.numel()
    finally:
        net.train(was_training)
    return total / count


def _nan_report(path="full"):
    return MetricsReport(path, 0, float("nan"), float("nan"), [])


def fit_pairs(
    net: CoReFusionNet,
    train_pairs: Sequence[SamplePair],
    val_pairs: Sequence[SamplePair],
    config: TrainConfig,
    out_dir=None,
) -> Tuple[CoReFusionNet, TrainLog, Dict[str, torch.Tensor]]:
    """Train ``net`` in place on in-memory pairs.

    Returns ``(net, log, best_state)`` where ``best_state`` is the state dict
    at the best validation SSIM (the final state if there is no val split).
    """
    config.validate()
    if not train_pairs:
        raise ConfigError("training split is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    dtype = next(net.parameters()).dtype
    weights = config.loss_weights
    temperature = net.config.temperature
    names = [n for n, _ in net.named_parameters()]
    state = AdamState()
    tlog = TrainLog()
    tlog.initial_train_mse = dataset_mse(net, train_pairs)
    best_state = copy.deepcopy(net.state_dict())

    n = len(train_pairs)
    bs = min(config.batch_size, n)
    if weights.beta > 0 and bs < 2:
        raise ConfigError("contrastive loss needs at least 2 training scenes")
    net.train()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(("mse", "psnr_loss", "ssim_loss", "contrastive", "total"), 0.0)
        n_steps = 0
        for start in range(0, n - bs + 1, bs):
            if config.max_steps is not None and tlog.steps >= config.max_steps:
                break
            flips = rng.random((bs, 2)) < 0.5
            batch = [augment_flip(train_pairs[i], fh, fv) for i, (fh, fv) in zip(order[start : start + bs], flips)]
            rgb, lr, target = _to_batch(batch, dtype)
            thermal_only = config.modality_dropout > 0 and rng.random() < config.modality_dropout
            if thermal_only:
                pred, z_rgb, z_th = net.forward_single("thermal", lr), None, None
            else:
                pred, z_rgb, z_th = net.forward_full(rgb, lr, with_projections=weights.beta > 0)
            parts = total_loss(pred, target, z_rgb, z_th, weights, temperature, config.ssim_mode)
            net.zero_grad(set_to_none=True)
            parts.total.backward()
            params = dict(net.named_parameters())
            grads = {k: params[k].grad for k in names}
            new, state = adam_step({k: params[k].detach() for k in names}, grads, state, config)
            with torch.no_grad():
                for k in names:
                    params[k].copy_(new[k])
            for k, v in parts.as_floats().items():
                sums[k] += v
            n_steps += 1
            tlog.steps += 1
        if n_steps == 0:
            break
        last = epoch == config.max_epochs or (config.max_steps is not None and tlog.steps >= config.max_steps)
        do_eval = epoch % config.eval_every == 0 or last
        tr = va = _nan_report()
        if do_eval:
            tr = score_pairs(net, list(train_pairs), "full")
            if val_pairs:
                va = score_pairs(net, list(val_pairs), "full")
        means = {k: v / n_steps for k, v in sums.items()}
        tlog.append(EpochRecord(epoch, tr.mean_ssim, tr.mean_psnr_db, va.mean_ssim, va.mean_psnr_db, **means))
        if do_eval:
            log.info("epoch %d step %d total %.4f val ssim %.4f", epoch, tlog.steps, means["total"], va.mean_ssim)
            if out_dir is not None:
                save_checkpoint(net, out_dir / f"epoch_{epoch:04d}.ckpt", {"epoch": epoch})
            score = va.mean_ssim if val_pairs else tr.mean_ssim
            if score > tlog.best_val_ssim:
                tlog.best_val_ssim = score
                tlog.best_epoch = epoch
                best_state = copy.deepcopy(net.state_dict())
                if out_dir is not None:
                    save_checkpoint(net, out_dir / "best.ckpt", {"epoch": epoch})
        if last:
            break
    tlog.final_train_mse = dataset_mse(net, train_pairs)
    return net, tlog, best_state


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    model_config: Optional[ModelConfig] = None,
    out_dir=None,
) -> Tuple[CoReFusionNet, TrainLog]:
    """Train a fresh network on ``manifest``; returns the final network and its log.

    With ``out_dir`` set, periodic and best checkpoints plus ``train_log.csv``
    are written there.
    """
    config.validate()
    train_pairs = load_split(manifest, "train")
    val_pairs = load_split(manifest, "val")
    if not train_pairs:
        raise ConfigError("dataset has no training scenes")
    net = init_parameters(model_config or ModelConfig())
    net, tlog, _ = fit_pairs(net, train_pairs, val_pairs, config, out_dir)
    if out_dir is not None:
        tlog.write_csv(Path(out_dir) / "train_log.csv")
        save_checkpoint(net, Path(out_dir) / "final.ckpt", {"epoch": tlog.records[-1].epoch})
    return net, tlog


# ---------------------------------------------------------------------------
# beta sweep


@dataclass
class SweepRow:
    beta: float
    path: str
    best_epoch: Optional[int]
    train_ssim: float
    train_psnr: float
    val_ssim: float
    val_psnr: float


@dataclass
class SweepResult:
    rows: List[SweepRow]
    logs: Dict[float, TrainLog]

    def best_beta(self) -> float:
        full = [r for r in self.rows if r.path == "full"]
        return max(full, key=lambda r: r.val_ssim).beta

    def write_table(self, path) -> Path:
        """One row per (beta, path) plus a summary row naming the best beta."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                writer.writerow([_fmt(getattr(r, c)) if c != "best_epoch" else r.best_epoch for c in SWEEP_COLUMNS])
            best = next(r for r in self.rows if r.path == "full" and r.beta == self.best_beta())
            writer.writerow(["best", "full", best.best_epoch, _fmt(best.train_ssim), _fmt(best.train_psnr),
                             _fmt(best.val_ssim), _fmt(best.val_psnr)])
        return path

    def write_curves(self, path) -> Path:
        """Long-format per-epoch train/val curves for every beta."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for beta, tlog in self.logs.items():
                for r in tlog.records:
                    for split in ("train", "val"):
                        for metric in ("ssim", "psnr"):
                            v = getattr(r, f"{split}_{metric}")
                            if not math.isnan(v):
                                writer.writerow([repr(beta), r.epoch, split, metric, repr(v)])
        return path


def evaluate_all_paths(net, train_pairs, val_pairs, beta, best_epoch) -> List[SweepRow]:
    rows = []
    for path in INFERENCE_PATHS:
        tr = score_pairs(net, list(train_pairs), path)
        va = score_pairs(net, list(val_pairs), path) if val_pairs else _nan_report(path)
        rows.append(SweepRow(beta, path, best_epoch, tr.mean_ssim, tr.mean_psnr_db, va.mean_ssim, va.mean_psnr_db))
    return rows


def sweep_beta(
    base_config: TrainConfig,
    betas: Sequence[float],
    manifest: DatasetManifest,
    model_config: Optional[ModelConfig] = None,
    out_dir=None,
) -> SweepResult:
    """Train once per beta from the same seeds and score every inference path.

    Each run is scored at its best-validation-SSIM checkpoint.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("betas must be non-empty")
    configs = [base_config.with_beta(b) for b in betas]
    train_pairs = load_split(manifest, "train")
    val_pairs = load_split(manifest, "val")
    rows, logs = [], {}
    for beta, cfg in zip(betas, configs):
        run_dir = Path(out_dir) / f"beta_{beta:g}" if out_dir is not None else None
        net = init_parameters(model_config or ModelConfig())
        net, tlog, best_state = fit_pairs(net, train_pairs, val_pairs, cfg, run_dir)
        if run_dir is not None:
            tlog.write_csv(run_dir / "train_log.csv")
        net.load_state_dict(best_state)
        rows.extend(evaluate_all_paths(net, train_pairs, val_pairs, beta, tlog.best_epoch))
        logs[beta] = tlog
    return SweepResult(rows, logs)
