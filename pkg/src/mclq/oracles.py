"""Reference quantizers used as ground truth for trained forecasters.

* Lloyd-Max quantizers of the standard normal law,
* Karhunen-Loeve product codebooks for Brownian motion and the Brownian bridge,
* Lloyd's algorithm on an ensemble of sampled trajectories.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, ndtri
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .processes import Trajectory

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "ScalarQuantizer",
    "KLSpec",
    "Codebook",
    "BM_10",
    "gaussian_quantizer_1d",
    "kl_eigen",
    "product_codebook",
    "lloyd_trajectories",
    "LloydQuantizer",
    "codebook_to_json",
    "codebook_from_json",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ConvergenceError(RuntimeError):
    """Iterative solver hit its iteration cap; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


def _norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.isinf(x), 0.0, _INV_SQRT_2PI * np.exp(-0.5 * np.where(np.isinf(x), 0.0, x) ** 2))


def _norm_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=float) / _SQRT2))


def _cell_mass(a, b):
    # upper-tail form keeps relative accuracy for cells far in the right tail
    a, b = np.asarray(a, float), np.asarray(b, float)
    upper = 0.5 * (erf(-a / _SQRT2) - erf(-b / _SQRT2))
    lower = _norm_cdf(b) - _norm_cdf(a)
    return np.where(a > 0, upper, lower)


@dataclass(frozen=True)
class ScalarQuantizer:
    levels: np.ndarray
    cell_probs: np.ndarray
    n_iter: int = 0

    @property
    def thresholds(self) -> np.ndarray:
        return 0.5 * (self.levels[1:] + self.levels[:-1])

    def distortion(self) -> float:
        """Expected squared error of the quantizer under N(0, 1)."""
        edges = np.concatenate([[-np.inf], self.thresholds, [np.inf]])
        a, b = edges[:-1], edges[1:]
        # E[(X - c)^2 ; a < X < b] = m2 - 2 c m1 + c^2 m0
        m0 = _cell_mass(a, b)
        m1 = _norm_pdf(a) - _norm_pdf(b)
        fa = np.where(np.isinf(a), 0.0, np.nan_to_num(a) * _norm_pdf(a))
        fb = np.where(np.isinf(b), 0.0, np.nan_to_num(b) * _norm_pdf(b))
        m2 = m0 + fa - fb
        c = self.levels
        return float(np.sum(m2 - 2 * c * m1 + c * c * m0))


def gaussian_quantizer_1d(K: int, tol: float = 1e-12, max_iter: int = 100_000) -> ScalarQuantizer:
    """Lloyd-Max quantizer of the standard normal distribution with ``K`` levels."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    K = int(K)
    levels = ndtri((np.arange(1, K + 1) - 0.5) / K)
    for it in range(1, max_iter + 1):
        edges = np.concatenate([[-np.inf], 0.5 * (levels[1:] + levels[:-1]), [np.inf]])
        a, b = edges[:-1], edges[1:]
        new = (_norm_pdf(a) - _norm_pdf(b)) / _cell_mass(a, b)
        new = 0.5 * (new - new[::-1])  # enforce symmetry about 0
        change = np.max(np.abs(new - levels))
        levels = new
        if change < tol:
            break
    else:
        raise ConvergenceError(f"Lloyd-Max did not converge in {max_iter} iterations", last=levels)
    edges = np.concatenate([[-np.inf], 0.5 * (levels[1:] + levels[:-1]), [np.inf]])
    probs = _cell_mass(edges[:-1], edges[1:])
    probs = probs / probs.sum()
    return ScalarQuantizer(levels, probs, it)


def kl_eigen(process: str, n: int, T: float = 1.0) -> tuple[float, Callable[[np.ndarray], np.ndarray]]:
    """Closed-form ``n``-th Karhunen-Loeve eigenpair on ``[0, T]``.

    Brownian motion: ``lambda_n = T^2 / (pi^2 (n - 1/2)^2)``,
    ``e_n(t) = sqrt(2/T) sin(pi (n - 1/2) t / T)``. Brownian bridge: same with
    ``n`` in place of ``n - 1/2``. With ``T = 1`` these reduce to the usual
    unit-interval forms.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not T > 0:
        raise ValueError("T must be positive")
    if process == "brownian_motion":
        freq = n - 0.5
    elif process == "brownian_bridge":
        freq = float(n)
    else:
        raise ValueError(f"no closed-form KL expansion for {process!r}")
    lam = T * T / (math.pi**2 * freq**2)
    scale = math.sqrt(2.0 / T)

    def eigenfunction(t):
        return scale * np.sin(math.pi * freq * np.asarray(t, dtype=float) / T)

    return lam, eigenfunction


@dataclass(frozen=True)
class KLSpec:
    process: str
    levels_per_coord: tuple[int, ...]
    grid: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "levels_per_coord", tuple(int(k) for k in self.levels_per_coord))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        if not self.levels_per_coord or min(self.levels_per_coord) < 1:
            raise ValueError("levels_per_coord must be a non-empty sequence of positive ints")

    @property
    def m(self) -> int:
        return len(self.levels_per_coord)

    @property
    def K(self) -> int:
        return math.prod(self.levels_per_coord)


@dataclass
class Codebook:
    """``K`` codevectors stored as an array of shape ``(K, D, Lp)``."""

    codevectors: np.ndarray
    dt: float = 1.0
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        cv = np.asarray(self.codevectors, dtype=float)
        if cv.ndim == 2:
            cv = cv[:, None, :]
        if cv.ndim != 3:
            raise ValueError(f"codevectors must be K x D x Lp, got shape {cv.shape}")
        self.codevectors = cv
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (cv.shape[0],):
                raise ValueError("weights must have one entry per codevector")
            if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
                raise ValueError("weights must be non-negative and sum to 1")
            self.weights = w

    @property
    def K(self) -> int:
        return self.codevectors.shape[0]

    @property
    def D(self) -> int:
        return self.codevectors.shape[1]

    @property
    def Lp(self) -> int:
        return self.codevectors.shape[2]

    def trajectories(self, t_start: float = 0.0) -> list[Trajectory]:
        return [Trajectory(c, self.dt, t_start) for c in self.codevectors]

    def shifted(self, offsets: np.ndarray) -> np.ndarray:
        """Codevectors translated per window: ``(N, D)`` offsets -> ``(N, K, D, Lp)``."""
        offsets = np.asarray(offsets, dtype=float)
        return self.codevectors[None] + offsets[:, None, :, None]


BM_10 = {"process": "brownian_motion", "levels_per_coord": (5, 2)}


def product_codebook(spec: KLSpec, max_size: int = 10**6, tol: float = 1e-12) -> Codebook:
    """Product quantizer from the truncated KL expansion.

    Codevector for multi-index ``(i_1..i_m)`` is
    ``sum_n sqrt(lambda_n) * alpha[i_n] * e_n(grid)``, with ``alpha`` the
    Lloyd-Max levels for ``K_n`` points; its weight is the product of the
    scalar cell probabilities.
    """
    if spec.K > max_size:
        raise ValueError(f"product codebook of size {spec.K} exceeds the cap {max_size}")
    quantizers = [gaussian_quantizer_1d(k, tol) for k in spec.levels_per_coord]
    basis = []
    for n in range(1, spec.m + 1):
        lam, e = kl_eigen(spec.process, n, spec.T)
        basis.append(math.sqrt(lam) * e(spec.grid))
    codes, weights = [], []
    for idx in itertools.product(*(range(k) for k in spec.levels_per_coord)):
        path = np.zeros_like(spec.grid)
        w = 1.0
        for n, i in enumerate(idx):
            path = path + quantizers[n].levels[i] * basis[n]
            w *= quantizers[n].cell_probs[i]
        codes.append(path)
        weights.append(w)
    weights = np.asarray(weights)
    dt = float(spec.grid[1] - spec.grid[0]) if spec.grid.size > 1 else 1.0
    meta = {"kind": "kl_product", "process": spec.process, "levels_per_coord": list(spec.levels_per_coord),
            "T": spec.T}
    return Codebook(np.asarray(codes)[:, None, :], dt, weights / weights.sum(), meta)


def _sq_dists(X, C, x_sq=None):
    """Squared Euclidean distances ``(N, K)`` via ``|x|^2 - 2 x.c + |c|^2``, clamped at zero."""
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)
    c_sq = np.einsum("ij,ij->i", C, C)
    return np.maximum(x_sq[:, None] - 2.0 * (X @ C.T) + c_sq[None, :], 0.0)


def _kmeans_pp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def _cell_means(X, labels, K):
    # fixed-order accumulation keeps the reduction deterministic
    onehot = (labels[None, :] == np.arange(K)[:, None]).astype(float)
    sums = onehot @ X
    counts = np.bincount(labels, minlength=K)
    return sums, counts


def lloyd_trajectories(samples, K: int, init: str = "kmeans_pp", seed: int = 0, max_iter: int = 300,
                       tol: float = 1e-10):
    """Lloyd's algorithm on trajectories flattened to ``D * Lp`` vectors.

    ``samples`` is a list of :class:`Trajectory` or an array ``(N, D, Lp)``.
    Returns ``(codebook, history)`` where ``history[j]`` is the mean squared
    distance to the nearest codevector after iteration ``j``. Empty cells are
    re-seeded at the sample farthest from its codevector; such events are
    listed in ``codebook.meta["events"]``.
    """
    if isinstance(samples, np.ndarray):
        arr = np.asarray(samples, dtype=float)
        dt = 1.0
    else:
        if not samples:
            raise ValueError("no samples")
        shapes = {s.values.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"samples do not share a shape: {sorted(shapes)}")
        arr = np.stack([s.values for s in samples])
        dt = samples[0].dt
    if arr.ndim == 2:
        arr = arr[:, None, :]
    N, D, Lp = arr.shape
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if N < K:
        raise ValueError(f"need at least K={K} samples, got {N}")
    X = arr.reshape(N, D * Lp)
    rng = np.random.default_rng(seed)
    if init == "kmeans_pp":
        C = _kmeans_pp(X, K, rng)
    elif init == "subset":
        C = X[np.sort(rng.choice(N, size=K, replace=False))].copy()
    else:
        raise ValueError(f"unknown init {init!r}")

    history: list[float] = []
    events: list[dict] = []
    x_sq = np.einsum("ij,ij->i", X, X)
    d2 = _sq_dists(X, C, x_sq)
    for it in range(max_iter):
        labels = np.argmin(d2, axis=1)  # first minimum: lowest index wins ties
        sums, counts = _cell_means(X, labels, K)
        newC = C.copy()
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            resid = np.einsum("ij,ij->i", X - newC[labels], X - newC[labels])
            far = int(np.argmax(resid))
            events.append({"iteration": it, "cell": int(k), "reseeded_at": far})
            logger.info("Lloyd: empty cell %d at iteration %d, re-seeded at sample %d", k, it, far)
            newC[k] = X[far]
            labels[far] = k
        new_d2 = _sq_dists(X, newC, x_sq)
        resid = X - newC[np.argmin(new_d2, axis=1)]
        cur = float(np.einsum("ij,ij->i", resid, resid).mean())
        if history and cur > history[-1]:
            # rounding at the fixed point; keep the previous codebook
            break
        C, d2 = newC, new_d2
        history.append(cur)
        if len(history) > 1:
            prev = history[-2]
            if prev - cur <= tol * max(prev, np.finfo(float).tiny):
                break
    labels = np.argmin(d2, axis=1)
    counts = np.bincount(labels, minlength=K)
    meta = {"kind": "lloyd", "n_samples": N, "n_iter": len(history), "events": events}
    book = Codebook(C.reshape(K, D, Lp), dt, counts / N, meta)
    return book, history


class LloydQuantizer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`lloyd_trajectories`.

    Accepts ``X`` of shape ``(n_samples, D, L)`` or ``(n_samples, n_features)``.

    Attributes
    ----------
    codebook_ : Codebook
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    weights_ : ndarray of shape (n_clusters,)
        Empirical cell masses.
    distortion_history_ : list of float
    labels_ : ndarray of shape (n_samples,)
    """

    def __init__(self, n_clusters=10, init="kmeans_pp", max_iter=300, tol=1e-10, random_state=0):
        self.n_clusters = n_clusters
        self.init = init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim not in (2, 3):
            raise ValueError(f"X must be 2-D or 3-D, got {X.ndim}-D")
        self._trailing_shape = X.shape[1:]
        book, hist = lloyd_trajectories(X if X.ndim == 3 else X[:, None, :], self.n_clusters, self.init,
                                        self.random_state, self.max_iter, self.tol)
        self.codebook_ = book
        self.cluster_centers_ = book.codevectors.reshape(book.K, -1)
        self.weights_ = book.weights
        self.distortion_history_ = hist
        self.n_iter_ = len(hist)
        self.labels_ = self.predict(X)
        return self

    def _flat(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[1:] != self._trailing_shape:
            raise ValueError(f"expected samples of shape {self._trailing_shape}, got {X.shape[1:]}")
        return X.reshape(X.shape[0], -1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(_sq_dists(self._flat(X), self.cluster_centers_))

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.argmin(_sq_dists(self._flat(X), self.cluster_centers_), axis=1)

    def score(self, X, y=None):
        """Negative mean squared quantization error."""
        check_is_fitted(self, "cluster_centers_")
        return -float(np.min(_sq_dists(self._flat(X), self.cluster_centers_), axis=1).mean())


def codebook_to_json(book: Codebook, extra: dict | None = None) -> str:
    doc = {
        "D": book.D,
        "Lp": book.Lp,
        "dt": book.dt,
        "weights": None if book.weights is None else [float(w) for w in book.weights],
        "codevectors": book.codevectors.tolist(),
        "meta": book.meta,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc)


def codebook_from_json(text: str) -> Codebook:
    doc = json.loads(text)
    cv = np.asarray(doc["codevectors"], dtype=float)
    if cv.ndim != 3 or cv.shape[1:] != (doc["D"], doc["Lp"]):
        raise ValueError(f"codevectors shape {cv.shape} disagrees with D={doc['D']}, Lp={doc['Lp']}")
    return Codebook(cv, float(doc["dt"]), doc.get("weights"), doc.get("meta", {}))


def brownian_window_codebook(pred_len: int, dt: float, levels_per_coord=(5, 2), process: str = "brownian_motion",
                             tol: float = 1e-12) -> Codebook:
    """KL product codebook for the ``pred_len`` increments following a conditioning point.

    By the Markov property the future of a Brownian path after time ``t0`` is
    ``W_{t0}`` plus a fresh Brownian motion; the codebook quantizes that fresh
    motion on ``[0, pred_len * dt]`` sampled at ``dt, 2 dt, ...``. Add the last
    observed value (:meth:`Codebook.shifted`) to use it on a window.
    """
    T = pred_len * dt
    grid = dt * np.arange(1, pred_len + 1)
    book = product_codebook(KLSpec(process, tuple(levels_per_coord), grid, T), tol=tol)
    book.dt = dt
    return book
