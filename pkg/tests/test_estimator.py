"""Estimator-shell tests: params, clone, fit/sample, persistence."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sinddm import SinDDM

from conftest import make_test_image

FAST = dict(
    steps=30,
    batch_size=4,
    hidden_width=8,
    blocks=2,
    convs_per_block=2,
    embed_dim=16,
    num_scales=3,
    random_state=21,
)


@pytest.fixture(scope="module")
def fitted():
    return SinDDM(**FAST).fit(make_test_image(32, 32, seed=3))


def test_get_params_round_trips_through_set_params():
    est = SinDDM()
    params = est.get_params()
    assert params["scale_factor"] == 1.5
    assert params["timesteps"] == 100
    assert params["hidden_width"] == 88
    est.set_params(steps=500, lr=2e-3)
    assert est.get_params()["steps"] == 500
    assert est.get_params()["lr"] == 2e-3


def test_clone_copies_hyperparameters_without_fitted_state(fitted):
    fresh = clone(fitted)
    assert fresh.get_params() == fitted.get_params()
    assert not hasattr(fresh, "checkpoint_")


def test_sample_requires_fit():
    est = SinDDM(**FAST)
    with pytest.raises(NotFittedError):
        est.sample(1)
    with pytest.raises(NotFittedError):
        est.save("/tmp/never-written.sinddm")


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        SinDDM(**FAST).fit(np.zeros((32, 32)))


def test_fit_exposes_trailing_underscore_state(fitted):
    assert fitted.num_scales_ == 3
    assert fitted.dims_[-1] == (32, 32)
    assert len(fitted.dims_) == 3
    assert fitted.checkpoint_.step == FAST["steps"]
    assert len(fitted.history_) == FAST["steps"]
    assert {"step", "scale", "loss", "lr"} <= set(fitted.history_[0])


def test_fit_returns_self():
    est = SinDDM(**FAST)
    assert est.fit(make_test_image(32, 32, seed=3)) is est


def test_sample_shape_range_and_determinism(fitted):
    out = fitted.sample(3, random_state=0)
    assert out.shape == (3, 32, 32, 3)
    assert np.all(out >= -1.0) and np.all(out <= 1.0)
    again = fitted.sample(3, random_state=0)
    np.testing.assert_array_equal(out, again)
    other = fitted.sample(3, random_state=1)
    assert not np.array_equal(out, other)


def test_sample_honors_out_dims(fitted):
    out = fitted.sample(1, random_state=2, out_dims=(32, 48))
    assert out.shape == (1, 32, 48, 3)


def test_save_load_round_trip(fitted, tmp_path):
    path = tmp_path / "est.sinddm"
    fitted.save(path)
    loaded = SinDDM.load(path)
    assert loaded.num_scales_ == fitted.num_scales_
    assert loaded.dims_ == fitted.dims_
    for key in ("hidden_width", "steps", "scale_factor", "random_state"):
        assert loaded.get_params()[key] == fitted.get_params()[key]
    np.testing.assert_array_equal(
        fitted.sample(2, random_state=9), loaded.sample(2, random_state=9)
    )
