import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xcotgrid.estimator import XCoTGenerator


def test_params_round_trip():
    est = XCoTGenerator(d_model=16, sft_steps=10)
    params = est.get_params()
    assert params["d_model"] == 16 and params["rewards"] == "fit"
    assert clone(est).get_params() == params
    assert est.set_params(temperature=0.5).temperature == 0.5


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        XCoTGenerator().predict([])


def test_fit_predict_score(train_samples):
    est = XCoTGenerator(d_model=16, n_layers=1, n_heads=2, sft_steps=20, batch_size=4, grpo_steps=1,
                        grammar_mask=True)
    est.fit(train_samples[:32])
    assert len(est.sft_metrics_) == 1 and len(est.grpo_metrics_) == 1
    preds = est.predict(train_samples[:3])
    assert all(p.shape == (8, 8) for p in preds)  # grammar mask guarantees parseable traces
    assert 0.0 <= est.score(train_samples[:3]) <= 3.0
    again = XCoTGenerator(**est.get_params()).fit(train_samples[:32])
    assert all(np.array_equal(a, b) for a, b in zip(preds, again.predict(train_samples[:3])))
    records = [s.to_record() for s in train_samples[:2]]
    assert len(est.predict(records)) == 2


def test_invalid_options(train_samples):
    with pytest.raises(ValueError):
        XCoTGenerator(trace="direct", grpo_steps=1, sft_steps=2).fit(train_samples[:4])
    with pytest.raises(ValueError):
        XCoTGenerator(rewards="xyz")._weights()
