import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from corefusion.data import stack_pairs, synthesize_scene
from corefusion.estimator import CoReFusionRegressor

SMALL = dict(depth=2, widths=(4, 8), blocks_per_level=1, projection_dim=8, batch_size=4, max_epochs=2,
             learning_rate=1e-3)


def make_xy(n=6, size=16, seed=3):
    pairs = [synthesize_scene(seed, i, size, size) for i in range(n)]
    rgb = np.stack([p.hr_rgb for p in pairs])
    lr = np.stack([p.lr_thermal for p in pairs])
    y = np.stack([p.hr_thermal for p in pairs])
    return {"rgb": rgb, "lr_thermal": lr}, y


@pytest.fixture(scope="module")
def fitted():
    X, y = make_xy()
    return CoReFusionRegressor(**SMALL).fit(X, y), X, y


def test_params_roundtrip_and_clone():
    est = CoReFusionRegressor(**SMALL, beta=0.1)
    params = est.get_params()
    assert params["beta"] == 0.1 and params["widths"] == (4, 8)
    c = clone(est)
    assert c.get_params() == params
    c.set_params(beta=0.5)
    assert c.beta == 0.5 and est.beta == 0.1


def test_fit_predict_shapes_and_range(fitted):
    est, X, y = fitted
    pred = est.predict(X)
    assert pred.shape == y.shape
    assert pred.min() >= 0 and pred.max() <= 1
    assert len(est.train_log_) == 2


def test_predict_missing_modality(fitted):
    est, X, _ = fitted
    th = est.predict({"lr_thermal": X["lr_thermal"]})
    rg = est.predict({"rgb": X["rgb"]})
    full = est.predict(X)
    assert th.shape == rg.shape == full.shape
    assert not np.array_equal(th, full)
    # tuple form with None means the same thing
    assert np.array_equal(est.predict((None, X["lr_thermal"])), th)


def test_score_is_quantised_ssim(fitted):
    est, X, y = fitted
    s = est.score(X, y)
    assert -1 <= s <= 1
    assert est.score({"lr_thermal": X["lr_thermal"]}, y) != s


def test_fit_is_deterministic():
    X, y = make_xy(4)
    a = CoReFusionRegressor(**SMALL).fit(X, y).predict(X)
    b = CoReFusionRegressor(**SMALL).fit(X, y).predict(X)
    assert np.array_equal(a, b)


def test_eval_set_selects_best():
    X, y = make_xy(6)
    Xv, yv = make_xy(2, seed=4)
    est = CoReFusionRegressor(**{**SMALL, "max_epochs": 3}).fit(X, y, eval_set=(Xv, yv))
    assert est.train_log_.best_epoch in (1, 2, 3)


def test_unfitted_raises():
    X, _ = make_xy(1)
    with pytest.raises(NotFittedError):
        CoReFusionRegressor().predict(X)


@pytest.mark.parametrize(
    "mutate, exc",
    [
        (lambda X, y: ({"rgb": X["rgb"]}, y), ValueError),  # fit needs both
        (lambda X, y: ({**X, "depth": X["rgb"]}, y), ValueError),
        (lambda X, y: ({**X, "rgb": X["rgb"][:, :1]}, y), ValueError),
        (lambda X, y: ({**X, "lr_thermal": X["lr_thermal"][:2]}, y), ValueError),
        (lambda X, y: ({**X, "lr_thermal": X["lr_thermal"][..., :1]}, y), ValueError),
        (lambda X, y: (X, y * 2), ValueError),
        (lambda X, y: (X, y[:2]), ValueError),
        (lambda X, y: ({**X, "rgb": np.where(X["rgb"] > 0.5, np.nan, X["rgb"])}, y), ValueError),
        (lambda X, y: (X["rgb"], y), TypeError),
    ],
)
def test_fit_input_validation(mutate, exc):
    X, y = make_xy(4)
    Xb, yb = mutate(X, y)
    with pytest.raises(exc):
        CoReFusionRegressor(**SMALL).fit(Xb, yb)


def test_fit_rejects_size_not_divisible_by_model():
    X, y = make_xy(4, size=8)
    with pytest.raises(ValueError, match="divisible"):
        CoReFusionRegressor(**{**SMALL, "depth": 4, "widths": (4, 4, 8, 8)}).fit(X, y)


def test_stack_pairs_agrees_with_manual_stack():
    pairs = [synthesize_scene(1, i, 16, 16) for i in range(3)]
    stacked = stack_pairs(pairs)
    assert np.array_equal(stacked[0], np.stack([p.hr_rgb for p in pairs]))
