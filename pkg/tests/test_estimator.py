import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mclq import MCLForecaster
from mclq.estimator import check_windows


def small(**kw):
    base = dict(n_hypotheses=3, hidden_width=8, n_layers=2, batch_size=16, n_iter=5, random_state=0)
    base.update(kw)
    return MCLForecaster(**base)


def data(N=20, D=1, Lc=4, Lp=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N, D, Lc)), rng.normal(size=(N, D, Lp))


class TestValidation:
    def test_two_dimensional_is_univariate(self):
        assert check_windows(np.zeros((5, 7))).shape == (5, 1, 7)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            check_windows(np.array([[[np.nan]]]))

    def test_rejects_mismatched_batch(self):
        with pytest.raises(ValueError):
            check_windows(np.zeros((3, 1, 2)), np.zeros((4, 1, 2)))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            check_windows(np.zeros(3))


class TestEstimator:
    def test_get_params_and_clone(self):
        est = small(loss="annealed", T0=3.0)
        params = est.get_params()
        assert params["loss"] == "annealed" and params["T0"] == 3.0
        assert clone(est).get_params() == params

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            small().predict(np.zeros((1, 1, 4)))

    @pytest.mark.parametrize("backbone", ["mlp", "rnn"])
    def test_fit_predict_shapes(self, backbone):
        X, y = data()
        est = small(backbone=backbone).fit(X, y)
        assert est.predict(X).shape == (20, 3, 1, 3)
        s = est.predict_scores(X)
        assert s.shape == (20, 3)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert est.n_iter_ == 5 and len(est.history_) == 5

    def test_uniform_scores_without_heads(self):
        X, y = data()
        est = small(score_heads=False).fit(X, y)
        np.testing.assert_allclose(est.predict_scores(X), 1 / 3)
        assert est.loss_config().beta == 0.0

    def test_predict_rejects_wrong_context_length(self):
        X, y = data()
        est = small().fit(X, y)
        with pytest.raises(ValueError, match="expected contexts"):
            est.predict(np.zeros((1, 1, 5)))

    def test_score_is_negative_distortion(self):
        X, y = data()
        est = small().fit(X, y)
        assert est.score(X, y) < 0

    def test_deterministic_fit(self):
        X, y = data()
        a = small().fit(X, y).predict(X)
        b = small().fit(X, y).predict(X)
        assert a.tobytes() == b.tobytes()

    def test_json_round_trip(self):
        X, y = data()
        est = small(scaler="zscore").fit(X, y)
        back = MCLForecaster.from_json(est.to_json())
        assert back.get_params() == est.get_params()
        np.testing.assert_array_equal(back.predict(X), est.predict(X))

    def test_scaler_inverts_predictions(self):
        X, y = data()
        from mclq.network import forward

        est = small(scaler="mean").fit(X + 10, y + 10)
        m = (X + 10).mean(axis=2)
        raw = forward(est.params_, (X + 10) / m[:, :, None])[0]
        np.testing.assert_allclose(est.predict(X + 10), raw * m[:, None, :, None], rtol=1e-13)

    def test_fit_paths(self):
        paths = np.random.default_rng(0).normal(size=(6, 2, 12)).cumsum(axis=2)
        est = small().fit_paths(paths, 4, 3)
        assert est.predict(paths[:, :, :4]).shape == (6, 3, 2, 3)

    def test_sample_respects_scores(self):
        X, y = data()
        est = small().fit(X, y)
        draws = est.sample(X[:2], 7, seed=1)
        assert draws.shape == (2, 7, 1, 3)
        hyps = est.predict(X[:2])
        for i in range(2):
            for d in draws[i]:
                assert any(np.array_equal(d, h) for h in hyps[i])

    def test_forecasts(self):
        X, y = data()
        fcs = small().fit(X, y).predict_forecasts(X[:3])
        assert len(fcs) == 3 and fcs[0].K == 3

    def test_covariates(self):
        X, y = data()
        cov = np.linspace(0, 1, 20)[:, None]
        est = small().fit(X, y, covariates=cov)
        assert est.params_.n_covariates == 1
        assert est.predict(X, cov).shape == (20, 3, 1, 3)
