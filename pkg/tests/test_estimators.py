import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualts.errors import ShapeMismatch
from dualts.estimators import DualLevelEncoder, LinearProbeClassifier, LinearProbeRegressor
from dualts.synthetic import SyntheticSpec, generate_synthetic

SMALL = dict(d_model=16, n_heads=2, d_ff=32, patch_len=8, stride=8, epochs=2, batch_size=8,
             precision="f64", random_state=0)


@pytest.fixture(scope="module")
def class_set():
    ds = generate_synthetic(SyntheticSpec("class-frequency", N=60, T=32, sigma=0.1))
    return ds.values, ds.labels


@pytest.fixture(scope="module")
def encoder(class_set):
    return DualLevelEncoder(**SMALL).fit(class_set[0][:40], X_val=class_set[0][40:])


def test_params_round_trip():
    est = DualLevelEncoder(**SMALL)
    assert est.get_params()["d_model"] == 16
    twin = clone(est)
    assert twin.get_params() == est.get_params()


def test_transform_shapes(encoder, class_set):
    X = class_set[0]
    assert encoder.transform(X).shape == (60, 16)
    assert encoder.transform(X[:, :, 0]).shape == (60, 16)
    assert encoder.transform_timestamps(X[:3]).shape == (3, 5, 16)
    assert np.array_equal(encoder.transform(X[:2]), encoder.transform(X[:2]))
    with pytest.raises(ShapeMismatch):
        encoder.transform(X[:, :16])


def test_unfitted_encoder():
    with pytest.raises(NotFittedError):
        DualLevelEncoder().transform(np.zeros((2, 32)))


def test_nan_input_rejected():
    X = np.zeros((4, 32))
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        DualLevelEncoder(**SMALL).fit(X)


def test_save_load(encoder, class_set, tmp_path):
    path = tmp_path / "enc.tdrl"
    encoder.save(path)
    back = DualLevelEncoder.load(path)
    assert np.array_equal(back.transform(class_set[0]), encoder.transform(class_set[0]))
    assert back.get_params() == encoder.get_params()


def test_probe_classifier(encoder, class_set):
    X, y = class_set
    labels = np.where(y == 1, "high", "low")
    clf = LinearProbeClassifier(encoder, epochs=20).fit(X[:40], labels[:40])
    assert set(clf.classes_) == {"high", "low"}
    proba = clf.predict_proba(X[40:])
    assert proba.shape == (20, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(X[40:])) <= {"high", "low"}
    assert 0.0 <= clf.score(X[40:], labels[40:]) <= 1.0


def test_probe_needs_fitted_encoder(class_set):
    with pytest.raises(ValueError):
        LinearProbeClassifier().fit(*class_set)


def test_probe_regressor():
    ds = generate_synthetic(SyntheticSpec("ar-process", T_total=200, sigma=0.0))
    v = ds.values
    X = np.stack([v[i:i + 32] for i in range(150)])
    Y = np.stack([v[i + 32:i + 40] for i in range(150)])
    enc = DualLevelEncoder(**SMALL).fit(X)
    reg = LinearProbeRegressor(enc, epochs=10).fit(X[:100], Y[:100])
    pred = reg.predict(X[100:])
    assert pred.shape == (50, 8, 1)
    assert np.isfinite(reg.score(X[100:], Y[100:]))
