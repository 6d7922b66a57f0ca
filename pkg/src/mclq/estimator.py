"""scikit-learn style front end for the multi-hypothesis forecaster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .network import Forecast, ModelParams, forward, init_params, params_from_json, params_to_json
from .processes import ArrayWindowSampler
from .training import LossConfig, TrainConfig, fit as fit_loop, scale

__all__ = ["MCLForecaster", "check_windows"]


def check_windows(X, y=None, *, name="X"):
    """Validate window arrays; 2-D input is read as univariate ``(N, L)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n_windows, D, L), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if y is None:
        return X
    y = check_windows(y, name="y")
    if y.shape[0] != X.shape[0] or y.shape[1] != X.shape[1]:
        raise ValueError(f"X {X.shape} and y {y.shape} disagree on n_windows or D")
    return X, y


class MCLForecaster(BaseEstimator):
    """K-head forecaster trained with the winner-takes-all loss or its relaxations.

    ``fit(X, y)`` trains on fixed (context, target) windows; ``fit_stream``
    trains on a sampler that draws a fresh batch per step. Predictions are
    ``(n_windows, K, D, Lp)`` arrays.

    Parameters
    ----------
    n_hypotheses : int
        Number of prediction heads ``K``.
    backbone : {"mlp", "rnn"}
    hidden_width, n_layers : int
        Backbone width and (MLP) depth.
    score_heads : bool
        Whether score heads are built and trained.
    loss : {"wta", "relaxed", "annealed"}
    epsilon, T0, rho, T_lim, beta, divide_by_horizon
        Loss hyperparameters, see :class:`mclq.training.LossConfig`.
    learning_rate, batch_size, n_iter, steps_per_epoch, clip_norm, plateau
        Optimizer settings.
    scaler : {"none", "mean", "zscore"}
        Per-window scaling computed on the context.
    random_state : int
        Seeds both initialization and batch sampling.
    """

    def __init__(self, n_hypotheses=10, backbone="mlp", hidden_width=200, n_layers=3, score_heads=True,
                 loss="relaxed", epsilon=0.1, T0=10.0, rho=0.95, T_lim=5e-4, beta=0.5,
                 divide_by_horizon=True, learning_rate=1e-3, batch_size=4096, n_iter=500, steps_per_epoch=30,
                 clip_norm=None, plateau=False, scaler="none", random_state=0):
        self.n_hypotheses = n_hypotheses
        self.backbone = backbone
        self.hidden_width = hidden_width
        self.n_layers = n_layers
        self.score_heads = score_heads
        self.loss = loss
        self.epsilon = epsilon
        self.T0 = T0
        self.rho = rho
        self.T_lim = T_lim
        self.beta = beta
        self.divide_by_horizon = divide_by_horizon
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.steps_per_epoch = steps_per_epoch
        self.clip_norm = clip_norm
        self.plateau = plateau
        self.scaler = scaler
        self.random_state = random_state

    # -------------------------------------------------------------- configs

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.epsilon, self.T0, self.rho, self.T_lim,
                          self.beta if self.score_heads else 0.0, self.divide_by_horizon)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.n_iter, self.steps_per_epoch,
                           self.random_state, self.scaler, self.clip_norm, self.plateau)

    def _init(self, D, Lc, Lp, n_covariates):
        return init_params(self.backbone, self.n_hypotheses, D, Lc, Lp, self.random_state, self.hidden_width,
                           self.n_layers, n_covariates, self.score_heads)

    # -------------------------------------------------------------- fitting

    def fit(self, X, y, covariates=None):
        """Train on windows ``X (N, D, Lc)``, ``y (N, D, Lp)``."""
        X, y = check_windows(X, y)
        if covariates is not None:
            covariates = np.asarray(covariates, dtype=float).reshape(X.shape[0], -1)
        ncov = 0 if covariates is None else covariates.shape[1]
        Lc = X.shape[2]

        def sampler(rng, batch_size):
            idx = rng.integers(0, X.shape[0], size=batch_size)
            return (X[idx], y[idx]) if covariates is None else (X[idx], y[idx], covariates[idx])

        return self._fit_sampler(sampler, X.shape[1], Lc, y.shape[2], ncov)

    def fit_paths(self, paths, ctx_len, pred_len):
        """Train on random windows cut from fixed paths ``(N, D, L)``."""
        paths = check_windows(paths, name="paths")
        return self._fit_sampler(ArrayWindowSampler(paths, ctx_len, pred_len), paths.shape[1], ctx_len, pred_len, 0)

    def fit_stream(self, sampler, D, ctx_len, pred_len, n_covariates=0):
        """Train on ``sampler(rng, batch_size)`` drawing fresh windows each step."""
        return self._fit_sampler(sampler, D, ctx_len, pred_len, n_covariates)

    def _fit_sampler(self, sampler, D, Lc, Lp, ncov):
        params = self._init(D, Lc, Lp, ncov)
        params, history = fit_loop(sampler, params, self.loss_config(), self.train_config())
        self._set_fitted(params, history)
        return self

    def _set_fitted(self, params: ModelParams, history=None):
        self.params_ = params
        self.history_ = history or []
        self.n_iter_ = len(self.history_)
        self.n_features_in_ = params.D
        return self

    # -------------------------------------------------------------- inference

    def _forward(self, X, covariates=None):
        check_is_fitted(self, "params_")
        X = check_windows(X)
        p = self.params_
        if X.shape[1] != p.D or (p.arch == "mlp" and X.shape[2] != p.Lc):
            raise ValueError(f"expected contexts of shape (N, {p.D}, {p.Lc}), got {X.shape}")
        Xs, _, sc = scale(X, None, self.scaler)
        hyps, step_scores, _ = forward(p, Xs, covariates)
        return sc.inverse_transform(hyps), step_scores.mean(axis=-1)

    def predict(self, X, covariates=None):
        """Hypotheses ``(N, K, D, Lp)`` in the original data scale."""
        return self._forward(X, covariates)[0]

    def predict_scores(self, X, covariates=None):
        """Normalized scores ``(N, K)``; uniform when score heads are disabled."""
        _, raw = self._forward(X, covariates)
        return raw / raw.sum(axis=1, keepdims=True)

    def predict_forecasts(self, X, covariates=None) -> list[Forecast]:
        hyps, raw = self._forward(X, covariates)
        return [Forecast(h, s) for h, s in zip(hyps, raw)]

    def sample(self, X, n_samples, covariates=None, seed=0):
        """Draw ``n_samples`` trajectories per window by resampling hypotheses on their scores."""
        hyps, raw = self._forward(X, covariates)
        idx = np.stack([metrics.resample_by_scores(s, n_samples, seed + i) for i, s in enumerate(raw)])
        return np.take_along_axis(hyps, idx[:, :, None, None], axis=1)

    def score(self, X, y, covariates=None):
        """Negative distortion, so that larger is better."""
        X, y = check_windows(X, y)
        return -metrics.distortion(y, self.predict(X, covariates))

    # -------------------------------------------------------------- persistence

    def to_json(self, extra: dict | None = None) -> str:
        """Checkpoint JSON; ``extra`` is stored alongside the estimator settings."""
        check_is_fitted(self, "params_")
        return params_to_json(self.params_, {**(extra or {}), "estimator": self.get_params()})

    @classmethod
    def from_json(cls, text: str) -> "MCLForecaster":
        params, extra = params_from_json(text)
        est = cls(**extra.get("estimator", {}))
        return est._set_fitted(params)
