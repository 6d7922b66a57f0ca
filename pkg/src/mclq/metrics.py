"""Evaluation metrics for K-hypothesis forecasts.

Array conventions: targets ``(N, D, Lp)``, hypotheses ``(N, K, D, Lp)``,
weights ``(N, K)`` summing to one per window. ``weights=None`` means uniform.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "QUANTILES",
    "MetricsReport",
    "distortion",
    "conditional_mean",
    "rmse",
    "crps_sum",
    "weighted_quantile",
    "total_variation",
    "resample_by_scores",
    "evaluate",
]

QUANTILES = np.arange(1, 20) / 20.0
_CUM_TOL = 1e-12


@dataclass(frozen=True)
class MetricsReport:
    distortion: float
    rmse: float
    crps_sum: float
    total_variation: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["distortion", "rmse", "crps_sum", "total_variation"])
            w.writerow([repr(v) for v in asdict(self).values()])


def _as_batch(targets, hyps):
    targets = np.asarray(targets, dtype=float)
    hyps = np.asarray(hyps, dtype=float)
    if targets.ndim == 2:
        targets = targets[None]
    if hyps.ndim == 3:
        hyps = hyps[None]
    if hyps.ndim != 4 or targets.ndim != 3 or hyps.shape[0] != targets.shape[0] or hyps.shape[2:] != targets.shape[1:]:
        raise ValueError(f"incompatible shapes: targets {targets.shape}, hypotheses {hyps.shape}")
    return targets, hyps


def _weights(weights, N, K):
    if weights is None:
        return np.full((N, K), 1.0 / K)
    w = np.asarray(weights, dtype=float).reshape(N, K)
    return w / w.sum(axis=1, keepdims=True)


def window_distances(targets, hyps) -> np.ndarray:
    """``(N, K)`` distances ``sqrt(sum_d mean_t (x - x_hat)^2)``."""
    targets, hyps = _as_batch(targets, hyps)
    diff = hyps - targets[:, None]
    return np.sqrt(np.mean(diff * diff, axis=-1).sum(axis=-1))


def distortion(targets, hyps) -> float:
    """Mean over windows of the distance to the closest hypothesis."""
    return float(window_distances(targets, hyps).min(axis=1).mean())


def conditional_mean(hyps, weights=None) -> np.ndarray:
    """Score-weighted (or uniform) average of the hypotheses: ``(..., K, D, L) -> (..., D, L)``."""
    hyps = np.asarray(hyps, dtype=float)
    if weights is None:
        return hyps.mean(axis=-3)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum(axis=-1, keepdims=True)
    return np.einsum("...k,...kdl->...dl", w, hyps)


def rmse(targets, hyps, weights=None) -> float:
    """RMSE of the dimension-summed series against the conditional mean."""
    targets, hyps = _as_batch(targets, hyps)
    xbar = conditional_mean(hyps, None if weights is None else _weights(weights, *hyps.shape[:2]))
    err = targets.sum(axis=1) - xbar.sum(axis=1)
    return float(np.sqrt(np.mean(err * err)))


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Lower weighted quantile: smallest value whose cumulative weight reaches ``q``.

    ``values``/``weights`` are ``(..., K)``; ``q`` is a scalar or 1-D array.
    Returns ``(len(q), ...)`` for array ``q``.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    cw = np.cumsum(np.take_along_axis(weights, order, axis=-1), axis=-1)
    qs = np.atleast_1d(np.asarray(q, dtype=float))
    out = []
    for qi in qs:
        idx = np.argmax(cw >= qi - _CUM_TOL, axis=-1)
        out.append(np.take_along_axis(v, idx[..., None], axis=-1)[..., 0])
    res = np.stack(out)
    return res if np.ndim(q) else res[0]


def crps_sum(targets, hyps, weights=None, quantiles=QUANTILES) -> float:
    """CRPS of the dimension-summed series via the weighted quantile loss.

    The quantile losses of all windows and steps are normalized by the global
    sum of absolute summed targets, then averaged over ``quantiles``.
    """
    targets, hyps = _as_batch(targets, hyps)
    N, K = hyps.shape[:2]
    w = _weights(weights, N, K)
    agg_t = targets.sum(axis=1)                       # (N, Lp)
    agg_h = np.moveaxis(hyps.sum(axis=2), 1, -1)      # (N, Lp, K)
    denom = float(np.abs(agg_t).sum())
    if denom == 0:
        raise ValueError("CRPS-Sum undefined: summed absolute target is zero")
    Q = weighted_quantile(agg_h, np.broadcast_to(w[:, None, :], agg_h.shape), quantiles)  # (nq, N, Lp)
    qs = np.asarray(quantiles, dtype=float)[:, None, None]
    loss = 2.0 * (Q - agg_t) * ((agg_t <= Q).astype(float) - qs)
    return float(np.mean(loss.sum(axis=(1, 2)) / denom))


def resample_by_scores(scores, n_draws: int, seed: int = 0) -> np.ndarray:
    """``n_draws`` categorical draws of hypothesis indices with probabilities ``scores``."""
    p = np.asarray(scores, dtype=float)
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    return rng.choice(p.size, size=int(n_draws), replace=True, p=p)


def trajectory_tv(paths) -> np.ndarray:
    """Sum of Euclidean step increments of ``(..., D, L)`` paths."""
    d = np.diff(np.asarray(paths, dtype=float), axis=-1)
    return np.sqrt((d * d).sum(axis=-2)).sum(axis=-1)


def total_variation(hyps, weights=None, n_draws: int | None = None, seed: int = 0) -> float:
    """Mean over windows and hypotheses of the trajectory total variation.

    With ``weights``, hypotheses are resampled with replacement in proportion
    to the weights (``n_draws`` per window, default ``K``) before averaging.
    """
    hyps = np.asarray(hyps, dtype=float)
    if hyps.ndim == 3:
        hyps = hyps[None]
    if hyps.shape[-1] < 2:
        raise ValueError("total variation needs at least two time steps")
    tv = trajectory_tv(hyps)  # (N, K)
    if weights is None:
        return float(tv.mean())
    N, K = tv.shape
    w = _weights(weights, N, K)
    n = K if n_draws is None else n_draws
    per_window = [tv[i, resample_by_scores(w[i], n, seed=seed + i)].mean() for i in range(N)]
    return float(np.mean(per_window))


def evaluate(targets, hyps, weights=None, seed: int = 0) -> MetricsReport:
    targets, hyps = _as_batch(targets, hyps)
    return MetricsReport(
        distortion=distortion(targets, hyps),
        rmse=rmse(targets, hyps, weights),
        crps_sum=crps_sum(targets, hyps, weights),
        total_variation=total_variation(hyps, weights, seed=seed) if hyps.shape[-1] > 1 else 0.0,
    )
