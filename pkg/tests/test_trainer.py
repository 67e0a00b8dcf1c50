import csv
import math

import numpy as np
import pytest
import torch

from corefusion.checkpoint import load_checkpoint
from corefusion.data import generate_synthetic_dataset, load_split
from corefusion.losses import LossWeights
from corefusion.metrics import evaluate
from corefusion.model import ModelConfig, init_parameters
from corefusion.trainer import (
    LOG_COLUMNS,
    AdamState,
    ConfigError,
    NonFiniteGradientError,
    TrainConfig,
    TrainLog,
    adam_step,
    fit_pairs,
    sweep_beta,
    train,
)

TINY = ModelConfig(depth=2, widths=(4, 8), blocks_per_level=1, projection_dim=8, seed=1)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return generate_synthetic_dataset(5, 10, 16, 16, tmp_path_factory.mktemp("ds"), val_count=3)


def quick(beta=0.0, **kw):
    base = dict(batch_size=4, max_epochs=3, seed=2, learning_rate=1e-3, loss_weights=LossWeights(beta=beta))
    return TrainConfig(**{**base, **kw})


# -- adam --------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = {"w": torch.tensor([1.0, -2.0])}
    state = AdamState(3, {"w": torch.tensor([0.5, 0.5])}, {"w": torch.tensor([0.1, 0.1])})
    cfg = TrainConfig()
    new, st = adam_step(p, {"w": torch.zeros(2)}, AdamState(), cfg)
    assert torch.equal(new["w"], p["w"])
    _, st = adam_step(p, {"w": torch.zeros(2)}, state, cfg)
    assert bool((st.m["w"] < state.m["w"]).all()) and bool((st.v["w"] < state.v["w"]).all())


def test_adam_first_step_is_minus_lr():
    cfg = TrainConfig(learning_rate=1e-3)
    p = {"x": torch.tensor([0.0], dtype=torch.float64)}
    new, st = adam_step(p, {"x": torch.tensor([1.0], dtype=torch.float64)}, AdamState(), cfg)
    # m_hat = v_hat = 1 at t=1
    assert float(new["x"][0]) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_adam_is_pure():
    cfg = TrainConfig()
    p = {"a": torch.randn(3, generator=torch.Generator().manual_seed(0))}
    g = {"a": torch.ones(3)}
    s = AdamState()
    a1, s1 = adam_step(p, g, s, cfg)
    a2, s2 = adam_step(p, g, s, cfg)
    assert torch.equal(a1["a"], a2["a"]) and s.step == 0 and not s.m


def test_adam_matches_torch_optim():
    torch.manual_seed(0)
    w = torch.randn(5, dtype=torch.float64)
    ref = w.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    cfg = TrainConfig(learning_rate=0.01)
    params, state = {"w": w.clone()}, AdamState()
    for k in range(5):
        g = torch.sin(torch.arange(5, dtype=torch.float64) + k)
        ref.grad = g.clone()
        opt.step()
        params, state = adam_step(params, {"w": g}, state, cfg)
    assert torch.allclose(params["w"], ref.detach(), atol=1e-14)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step({"bad": torch.zeros(2)}, {"bad": torch.tensor([1.0, float("nan")])}, AdamState(), TrainConfig())


# -- config ------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1, loss_weights=LossWeights(beta=0.1))
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(modality_dropout=1.5)
    TrainConfig(batch_size=1)


# -- training ----------------------------------------------------------------


def test_training_is_deterministic(dataset):
    a, la = train(quick(beta=0.5), dataset, TINY)
    b, lb = train(quick(beta=0.5), dataset, TINY)
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert la.records == lb.records


def test_beta_zero_logs_zero_contrastive_and_freezes_heads(dataset):
    net0 = init_parameters(TINY)
    net, tlog = train(quick(beta=0.0), dataset, TINY)
    assert all(r.contrastive == 0.0 for r in tlog.records)
    for name, p in net.named_parameters():
        if name.startswith("head_"):
            assert torch.equal(p, dict(net0.named_parameters())[name]), name


def test_beta_positive_moves_heads_and_logs_contrastive(dataset):
    net0 = init_parameters(TINY)
    net, tlog = train(quick(beta=1.0), dataset, TINY)
    assert all(r.contrastive > 0 for r in tlog.records)
    moved = [n for n, p in net.named_parameters() if n.startswith("head_") and not torch.equal(p, dict(net0.named_parameters())[n])]
    assert moved


def test_log_shape_and_csv(dataset, tmp_path):
    net, tlog = train(quick(max_epochs=4, eval_every=2), dataset, TINY, out_dir=tmp_path)
    assert [r.epoch for r in tlog.records] == [1, 2, 3, 4]
    assert math.isnan(tlog.records[0].val_ssim) and not math.isnan(tlog.records[1].val_ssim)
    with (tmp_path / "train_log.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) - 1 == 4
    assert TrainLog.read_csv(tmp_path / "train_log.csv").records[1] == tlog.records[1]
    assert {p.name for p in tmp_path.glob("*.ckpt")} >= {"epoch_0002.ckpt", "epoch_0004.ckpt", "best.ckpt", "final.ckpt"}
    loaded, meta = load_checkpoint(tmp_path / "final.ckpt")
    assert all(torch.equal(loaded.state_dict()[k], v) for k, v in net.state_dict().items())


def test_log_rejects_non_increasing_epochs():
    from corefusion.trainer import EpochRecord

    tlog = TrainLog()
    tlog.append(EpochRecord(1, *[0.0] * 9))
    with pytest.raises(ValueError):
        tlog.append(EpochRecord(1, *[0.0] * 9))


def test_max_steps_caps_training(dataset):
    _, tlog = train(quick(max_epochs=50, max_steps=5), dataset, TINY)
    assert tlog.steps == 5
    # 7 train scenes, batch 4 -> one step per epoch
    assert len(tlog) == 5


def test_validation_metrics_come_from_quantised_pipeline(dataset):
    net, tlog = train(quick(max_epochs=1), dataset, TINY)
    rep = evaluate(net, dataset, "val", "full")
    assert tlog.records[-1].val_ssim == rep.mean_ssim
    assert tlog.records[-1].val_psnr == rep.mean_psnr_db


def test_modality_dropout_all_thermal_leaves_rgb_encoder(dataset):
    net0 = init_parameters(TINY)
    net, tlog = train(quick(beta=1.0, modality_dropout=1.0), dataset, TINY)
    for name, p in net.named_parameters():
        if name.startswith(("rgb_encoder", "head_")):
            assert torch.equal(p, dict(net0.named_parameters())[name]), name
    assert all(r.contrastive == 0.0 for r in tlog.records)


def test_non_finite_loss_aborts(dataset):
    pairs = load_split(dataset, "train")
    net = init_parameters(TINY)
    with torch.no_grad():
        net.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteGradientError):
        fit_pairs(net, pairs, [], quick(max_epochs=1))


# -- sweep -------------------------------------------------------------------


def test_sweep_rows_and_tables(dataset, tmp_path):
    res = sweep_beta(quick(max_epochs=2), [0.0, 0.5], dataset, TINY, out_dir=tmp_path)
    assert len(res.rows) == 2 * 3
    assert {(r.beta, r.path) for r in res.rows} == {(b, p) for b in (0.0, 0.5) for p in ("full", "thermal_only", "rgb_only")}
    table = res.write_table(tmp_path / "sweep.csv")
    lines = table.read_text().splitlines()
    assert lines[0] == "beta,path,best_epoch,train_ssim,train_psnr,val_ssim,val_psnr"
    assert len(lines) == 1 + 2 * 3 + 1
    assert lines[-1].startswith("best,full,")
    curves = res.write_curves(tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "beta,epoch,split,metric,value"
    assert len(curves) == 1 + 2 * 2 * 2 * 2
    assert (tmp_path / "beta_0" / "train_log.csv").exists()


def test_single_beta_sweep_equals_direct_training(dataset):
    cfg = quick(max_epochs=2)
    res = sweep_beta(cfg, [0.0], dataset, TINY)
    pairs_tr, pairs_va = load_split(dataset, "train"), load_split(dataset, "val")
    net, tlog, best = fit_pairs(init_parameters(TINY), pairs_tr, pairs_va, cfg)
    net.load_state_dict(best)
    for path in ("full", "thermal_only", "rgb_only"):
        row = next(r for r in res.rows if r.path == path)
        rep = evaluate(net, dataset, "val", path)
        assert (row.val_ssim, row.val_psnr) == (rep.mean_ssim, rep.mean_psnr_db)
    assert res.logs[0.0].records == tlog.records


def test_sweep_requires_betas(dataset):
    with pytest.raises(ConfigError):
        sweep_beta(quick(), [], dataset, TINY)
