import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from splitgs import SplitGaussianReconstructor
from splitgs.dataio import Dataset
from splitgs.errors import InvalidParameterError
from splitgs.synth import SynthSpec, make_synthetic

CONFIG = {"encoding": {"spatial_bands": 2, "temporal_bands": 2}, "log_every": 0}


@pytest.fixture(scope="module")
def data():
    sc = make_synthetic(SynthSpec(width=16, height=16, frames=3, focal=38.0, init_static=80,
                                  init_dynamic=10), seed=0)
    return Dataset(sc.frames, np.zeros(3), "metric", sc.init_points)


@pytest.fixture(scope="module")
def fitted(data):
    est = SplitGaussianReconstructor(dap_iters=2, stage1_iters=3, stage2_iters=2, hidden_width=8,
                                     hidden_depth=1, config=CONFIG)
    return est.fit(data)


def test_params_roundtrip_and_clone():
    est = SplitGaussianReconstructor(stage1_iters=5, config=CONFIG)
    assert est.get_params()["stage1_iters"] == 5
    c = clone(est)
    assert c.get_params() == est.get_params()


def test_predict_before_fit(data):
    with pytest.raises(NotFittedError):
        SplitGaussianReconstructor().predict(data)


def test_fit_predict_score(fitted, data):
    assert fitted.n_static_ > 0 and fitted.n_dynamic_ > 0
    imgs = fitted.predict(data)
    assert imgs.shape == (3, 16, 16, 3) and imgs.min() >= 0 and imgs.max() <= 1
    one = fitted.predict((0.5, data.frames[1].camera), which="static")
    assert one.shape == (1, 16, 16, 3)
    assert np.isfinite(fitted.score(data))
    ev = fitted.evaluate(data, decompose=True)
    assert len(ev["renders"]["dynamic"]) == 3
    with pytest.raises(InvalidParameterError):
        fitted.predict(data, which="neither")


def test_save_and_reload(fitted, data, tmp_path):
    fitted.save(tmp_path / "e.ckpt")
    again = SplitGaussianReconstructor.from_checkpoint(tmp_path / "e.ckpt")
    assert again.stage1_iters == 3 and again.hidden_width == 8
    assert np.array_equal(again.predict(data), fitted.predict(data))
