import numpy as np
import pytest
from sklearn.base import clone

from coupledflow import ShortcutFlowRestorer
from coupledflow.coupling import DegradationModel, GaussianSpec, degrade
from coupledflow.exceptions import ConfigurationError

PRIOR = GaussianSpec([1.0, -1.0], 1.0)
MODEL = DegradationModel([[0.6, 0.2], [0.0, 0.6]], 0.4)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    z1 = PRIOR.sample(2000, rng)
    return degrade(z1, MODEL, rng), z1


def small(**kw):
    base = dict(iterations=300, hidden=(16, 16), learning_rate=1e-3,
                estimator_params={"max_iter": 300, "hidden": (16,)})
    base.update(kw)
    return ShortcutFlowRestorer(**base)


def test_params_follow_conventions():
    est = ShortcutFlowRestorer(sigma=0.1)
    assert est.get_params()["sigma"] == 0.1
    assert clone(est).get_params() == est.get_params()
    est.set_params(n_steps=4)
    assert est.n_steps == 4


def test_fit_predict_shapes(data):
    lq, z1 = data
    est = small().fit(lq, z1)
    assert est.n_features_in_ == 2
    out = est.predict(lq[:50])
    assert out.shape == (50, 2) and np.all(np.isfinite(out))
    assert len(est.train_log_) == 300


def test_predict_is_deterministic(data):
    lq, z1 = data
    a = small(coupling="lq-anchored").fit(lq, z1)
    b = small(coupling="lq-anchored").fit(lq, z1)
    assert np.array_equal(a.predict(lq[:20]), b.predict(lq[:20]))
    assert np.array_equal(a.predict(lq[:20]), a.predict(lq[:20]))
    assert a.predict(lq[:20], n_steps=4, dt_mode="instantaneous").shape == (20, 2)


def test_score_beats_constant(data):
    lq, z1 = data
    est = small(coupling="oracle-anchored", prior=PRIOR, degradation=MODEL, iterations=1500).fit(lq, z1)
    assert est.score(lq[:500], z1[:500]) > 0.0


def test_oracle_needs_model(data):
    with pytest.raises(ConfigurationError):
        small(coupling="oracle-anchored").fit(*data)


def test_dimension_checks(data):
    lq, z1 = data
    with pytest.raises(ConfigurationError):
        small(iterations=1).fit(lq, z1[:, :1])
    est = small(coupling="lq-anchored", iterations=1).fit(lq, z1)
    with pytest.raises(ConfigurationError):
        est.predict(lq[:, :1])
