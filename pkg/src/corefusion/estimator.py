"""scikit-learn style wrapper around the network and training loop."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import SamplePair, denormalize
from .losses import LossWeights
from .metrics import score_pairs
from .model import CoReFusionNet, ModelConfig, init_parameters
from .trainer import TrainConfig, fit_pairs
from .validation import check_paired_input, check_target, hr_shape


def _pairs(rgb, lr, y=None):
    n = (rgb if rgb is not None else lr).shape[0]
    return [
        SamplePair(
            None if rgb is None else rgb[i],
            None if lr is None else lr[i],
            None if y is None else y[i],
            f"sample_{i:05d}",
        )
        for i in range(n)
    ]


class CoReFusionRegressor(RegressorMixin, BaseEstimator):
    """Guided x8 thermal super-resolution as a fit/predict estimator.

    ``X`` is a mapping ``{"rgb": (N, 3, H, W), "lr_thermal": (N, 1, H/8, W/8)}``
    with values in [0, 1]; ``y`` is the HR thermal target ``(N, 1, H, W)``
    in [0, 1]. At predict time either modality may be omitted, which selects
    the corresponding single-encoder path.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``beta`` weights the contrastive term.
    """

    def __init__(
        self,
        depth=4,
        widths=(8, 16, 32, 64),
        blocks_per_level=2,
        projection_dim=64,
        temperature=1.0,
        output_activation="tanh",
        beta=0.0,
        w_mse=1.0,
        w_psnr=0.1,
        w_ssim=0.1,
        learning_rate=1e-4,
        batch_size=8,
        max_epochs=125,
        max_steps=None,
        modality_dropout=0.0,
        eval_every=1,
        random_state=0,
    ):
        self.depth = depth
        self.widths = widths
        self.blocks_per_level = blocks_per_level
        self.projection_dim = projection_dim
        self.temperature = temperature
        self.output_activation = output_activation
        self.beta = beta
        self.w_mse = w_mse
        self.w_psnr = w_psnr
        self.w_ssim = w_ssim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.modality_dropout = modality_dropout
        self.eval_every = eval_every
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            widths=tuple(self.widths),
            blocks_per_level=self.blocks_per_level,
            projection_dim=self.projection_dim,
            temperature=self.temperature,
            output_activation=self.output_activation,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            seed=self.random_state,
            loss_weights=LossWeights(self.w_mse, self.w_psnr, self.w_ssim, self.beta),
            eval_every=self.eval_every,
            modality_dropout=self.modality_dropout,
        )

    def fit(self, X, y, eval_set=None):
        """Train from scratch. ``eval_set=(X_val, y_val)`` enables best-checkpoint selection."""
        rgb, lr = check_paired_input(X, require_both=True)
        n, h, w = hr_shape(rgb, lr)
        y = check_target(y, n, h, w)
        model_config = self._model_config()
        if h % model_config.min_input_size or w % model_config.min_input_size:
            raise ValueError(f"image size {h}x{w} must be divisible by {model_config.min_input_size}")
        val = []
        if eval_set is not None:
            vr, vl = check_paired_input(eval_set[0], require_both=True)
            vy = check_target(eval_set[1], *hr_shape(vr, vl))
            val = _pairs(vr, vl, vy)
        net = init_parameters(model_config)
        net, tlog, best_state = fit_pairs(net, _pairs(rgb, lr, y), val, self._train_config())
        if val:
            net.load_state_dict(best_state)
        net.eval()
        self.net_ = net
        self.train_log_ = tlog
        return self

    def _inputs(self, X):
        check_is_fitted(self, "net_")
        cfg: ModelConfig = self.net_.config
        return check_paired_input(X, cfg.rgb_in_channels, cfg.thermal_in_channels)

    @torch.no_grad()
    def predict(self, X):
        """HR thermal prediction in [0, 1], shape ``(N, 1, H, W)``."""
        rgb, lr = self._inputs(X)
        net: CoReFusionNet = self.net_
        dtype = next(net.parameters()).dtype
        as_t = lambda a: None if a is None else torch.from_numpy(a).to(dtype)  # noqa: E731
        net.eval()
        out = net(as_t(rgb), as_t(lr))
        return denormalize(out.double().numpy())

    def score(self, X, y, sample_weight=None):
        """Mean SSIM on 8-bit quantised predictions (higher is better)."""
        rgb, lr = self._inputs(X)
        y = check_target(y, *hr_shape(rgb, lr))
        path = "full" if rgb is not None and lr is not None else ("thermal_only" if lr is not None else "rgb_only")
        report = score_pairs(self.net_, _pairs(rgb, lr, y), path)
        ssims = np.array([r[1] for r in report.per_sample])
        return float(np.average(ssims, weights=sample_weight))
