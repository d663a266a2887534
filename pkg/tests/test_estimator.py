import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dpfield.estimator import PrimitiveFieldEstimator, check_grid, check_points
from dpfield.synth import corpus_spec, voxelize


@pytest.fixture(scope="module")
def fitted():
    grid = voxelize(corpus_spec("box1"), 32)
    est = PrimitiveFieldEstimator(n_parts=2, epochs=(40, 0), n_volume=(1024, 1024), n_surface=64)
    return est.fit(grid), grid


def test_params_round_trip():
    est = PrimitiveFieldEstimator(n_parts=4, primitive="cylinder")
    params = est.get_params()
    assert params["n_parts"] == 4 and params["primitive"] == "cylinder"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")


def test_predict_transform_shapes(fitted):
    est, grid = fitted
    pts = np.random.default_rng(0).uniform(-1, 1, (25, 3))
    occ = est.predict(pts)
    parts = est.transform(pts)
    assert occ.shape == (25,) and parts.shape == (25, 2)
    np.testing.assert_array_equal(occ, parts.max(axis=1))
    np.testing.assert_array_equal(est.predict_parts(pts), parts.argmax(axis=1))
    assert est.log_.shape == (40, 7)
    assert 0.0 <= est.score(grid) <= 1.0


def test_accepts_raw_arrays():
    grid = voxelize(corpus_spec("box1"), 32)
    est = PrimitiveFieldEstimator(n_parts=1, epochs=(3, 0), n_volume=(256, 256), n_surface=32).fit(grid.values)
    assert est.model_.n_parts == 1


def test_validation():
    with pytest.raises(NotFittedError):
        PrimitiveFieldEstimator().predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        check_points(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        check_points(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        check_grid(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        PrimitiveFieldEstimator(n_parts=0).fit(np.zeros((32, 32, 32)))
