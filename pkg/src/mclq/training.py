"""Winner-takes-all loss family, exact gradients, Adam, scaling and training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import ModelParams, backward_outputs, forward
from .processes import WindowPair

logger = logging.getLogger(__name__)

__all__ = [
    "LossConfig",
    "TrainConfig",
    "LossBreakdown",
    "Scaler",
    "AdamState",
    "TrainingDivergedError",
    "per_head_loss",
    "winner",
    "head_weights",
    "temperature",
    "score_loss",
    "compound_loss",
    "batch_loss_and_grad",
    "backward",
    "adam_step",
    "clip_by_norm",
    "scale",
    "unscale",
    "fit",
    "write_history_csv",
]

BCE_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite or exploded; ``params`` is the last good state."""

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class LossConfig:
    """Loss variant and its hyperparameters.

    ``variant`` is ``"wta"``, ``"relaxed"`` (uses ``epsilon``) or ``"annealed"``
    (uses ``T0``, ``rho``, ``T_lim``).
    """

    variant: str = "wta"
    epsilon: float = 0.1
    T0: float = 10.0
    rho: float = 0.95
    T_lim: float = 5e-4
    beta: float = 0.0
    divide_by_horizon: bool = True

    def __post_init__(self):
        if self.variant not in ("wta", "relaxed", "annealed"):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if not self.T0 > 0 or not 0 < self.rho < 1 or not self.T_lim > 0:
            raise ValueError("annealing needs T0 > 0, 0 < rho < 1, T_lim > 0")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4096
    n_iter: int = 500
    steps_per_epoch: int = 30
    seed: int = 0
    scaler: str = "none"
    clip_norm: float | None = None
    plateau: bool = False
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    log_every: int = 50


@dataclass
class LossBreakdown:
    per_head: np.ndarray
    winner: int
    weights: np.ndarray
    wta_term: float
    score_term: float
    total: float


# ----------------------------------------------------------------- loss pieces


def per_head_loss(hypothesis, target, divide_by_horizon: bool = False) -> float:
    """Sum of squared errors over time and dimension, optionally divided by ``Lp``."""
    hyp = np.asarray(hypothesis, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if hyp.shape != tgt.shape:
        raise ValueError(f"shape mismatch: hypothesis {hyp.shape} vs target {tgt.shape}")
    loss = float(np.sum((hyp - tgt) ** 2))
    return loss / tgt.shape[-1] if divide_by_horizon else loss


def winner(per_head) -> int:
    """Index of the smallest loss; ties go to the lowest index."""
    losses = np.asarray(per_head, dtype=float)
    if losses.size == 0:
        raise ValueError("need at least one head")
    if np.any(np.isnan(losses)):
        raise ValueError(f"NaN in per-head losses: {losses}")
    return int(np.argmin(losses))


def temperature(config: LossConfig, epoch: int) -> float:
    return config.T0 * config.rho ** epoch


def _weights_batch(losses, config, epoch):
    """Vectorized head weights for losses ``(B, K)``."""
    B, K = losses.shape
    if np.any(np.isnan(losses)):
        raise ValueError("NaN in per-head losses")
    if np.any(np.all(np.isinf(losses), axis=1)):
        raise ValueError("all per-head losses are infinite")
    win = np.argmin(losses, axis=1)
    onehot = np.zeros((B, K))
    onehot[np.arange(B), win] = 1.0
    if config.variant == "wta" or K == 1:
        return onehot
    if config.variant == "relaxed":
        eps = config.epsilon
        q = np.full((B, K), eps / (K - 1))
        q[np.arange(B), win] = 1.0 - eps
        return q
    T = temperature(config, epoch)
    if T < config.T_lim:
        return onehot
    z = -(losses - losses.min(axis=1, keepdims=True)) / T
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def head_weights(per_head, config: LossConfig, epoch: int = 0) -> np.ndarray:
    """Weights ``q`` over heads for one window (constants w.r.t. parameters)."""
    losses = np.asarray(per_head, dtype=float)
    return _weights_batch(losses[None, :], config, epoch)[0]


def _bce_terms(scores, target):
    s = np.clip(scores, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * np.log(s) + (1.0 - target) * np.log1p(-s))


def score_loss(scores, win: int) -> float:
    """Sum over heads and steps of ``BCE(1[k == winner], score)``.

    ``scores`` is ``(K,)`` or ``(K, steps)``.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    target = np.zeros_like(s)
    target[win] = 1.0
    return float(_bce_terms(s, target).sum())


# ----------------------------------------------------------------- full objective


@dataclass
class BatchResult:
    total: float
    wta_term: float
    score_term: float
    per_head: np.ndarray
    winners: np.ndarray
    weights: np.ndarray
    grads: dict | None


def batch_loss_and_grad(params: ModelParams, contexts, targets, config: LossConfig, epoch: int = 0,
                        covariates=None, need_grad: bool = True, weights=None, winners=None) -> BatchResult:
    """Mean compound loss over a batch and its exact gradient.

    ``weights`` / ``winners`` override the computed head weights and winner
    indices; they are treated as constants, which is what the gradient is
    taken with respect to anyway.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 2:
        targets = targets[None]
    hyps, step_scores, cache = forward(params, contexts, covariates)
    B, K, D, Lp = hyps.shape
    if targets.shape != (B, D, Lp):
        raise ValueError(f"expected targets of shape {(B, D, Lp)}, got {targets.shape}")
    norm = 1.0 / Lp if config.divide_by_horizon else 1.0
    resid = hyps - targets[:, None]
    per_head = norm * (resid * resid).sum(axis=(2, 3))
    win = np.argmin(per_head, axis=1) if winners is None else np.asarray(winners)
    q = _weights_batch(per_head, config, epoch) if weights is None else np.asarray(weights, dtype=float)
    wta = float(np.sum(q * per_head) / B)
    score_term = 0.0
    onehot = np.zeros((B, K))
    onehot[np.arange(B), win] = 1.0
    use_scores = params.score_heads and config.beta > 0
    if use_scores:
        score_term = float(_bce_terms(step_scores, onehot[:, :, None]).sum() / B)
    total = wta + config.beta * score_term
    grads = None
    if need_grad:
        d_hyp = (2.0 * norm / B) * q[:, :, None, None] * resid
        d_logit = None
        if params.score_heads:
            if use_scores:
                inside = (step_scores > BCE_CLAMP) & (step_scores < 1.0 - BCE_CLAMP)
                d_logit = (config.beta / B) * (step_scores - onehot[:, :, None]) * inside
            else:
                d_logit = np.zeros_like(step_scores)
        grads = backward_outputs(params, cache, d_hyp, d_logit)
    return BatchResult(total, wta, score_term, per_head, win, q, grads)


def compound_loss(window: WindowPair, params: ModelParams, config: LossConfig, epoch: int = 0,
                  covariates=None) -> LossBreakdown:
    r = batch_loss_and_grad(params, window.context.values[None], window.target.values[None], config, epoch,
                            covariates=covariates, need_grad=False)
    return LossBreakdown(r.per_head[0], int(r.winners[0]), r.weights[0], r.wta_term, r.score_term, r.total)


def backward(window: WindowPair, params: ModelParams, config: LossConfig, epoch: int = 0, covariates=None) -> dict:
    """Gradient of the compound loss of one window w.r.t. every parameter tensor."""
    r = batch_loss_and_grad(params, window.context.values[None], window.target.values[None], config, epoch,
                            covariates=covariates)
    _check_finite_grads(r.grads)
    return r.grads


def _check_finite_grads(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r} (max |g| = {np.nanmax(np.abs(g))})")


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_by_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        return {k: g * f for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new tensors and the advanced state."""
    if clip_norm is not None:
        grads, _ = clip_by_norm(grads, clip_norm)
    t = state.t + 1
    new, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        new[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[k], v_new[k] = m, v
    return new, AdamState(m_new, v_new, t)


# ----------------------------------------------------------------- scaling

_FLOOR = 1e-8


@dataclass(frozen=True)
class Scaler:
    """Per-window, per-dimension affine map ``x -> (x - loc) / scale``.

    ``loc`` and ``scale`` have shape ``(N, D)``.
    """

    kind: str
    loc: np.ndarray
    scale: np.ndarray

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        return (x - self.loc[..., None]) / self.scale[..., None]

    def inverse_transform(self, x):
        """Invert on arrays ``(N, D, L)`` or hypotheses ``(N, K, D, L)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == self.loc.ndim + 2:
            return x * self.scale[:, None, :, None] + self.loc[:, None, :, None]
        return x * self.scale[..., None] + self.loc[..., None]


def fit_scaler(context, kind: str = "mean") -> Scaler:
    """Statistics from contexts ``(N, D, Lc)`` (or a single ``(D, Lc)``)."""
    c = np.asarray(context, dtype=float)
    if c.shape[-1] < 1:
        raise ValueError("context must be non-empty")
    if kind == "mean":
        mean = c.mean(axis=-1)
        div = np.where(np.abs(mean) < _FLOOR, 1.0, mean)
        return Scaler(kind, np.zeros_like(div), div)
    if kind == "zscore":
        return Scaler(kind, c.mean(axis=-1), np.maximum(c.std(axis=-1), _FLOOR))
    if kind == "none":
        shape = c.shape[:-1]
        return Scaler(kind, np.zeros(shape), np.ones(shape))
    raise ValueError(f"unknown scaler {kind!r}")


def scale(context, target, kind: str = "mean"):
    """Scale a (context, target) pair with statistics of the context.

    Returns ``(scaled_context, scaled_target, scaler)``; ``target`` may be None.
    """
    sc = fit_scaler(context, kind)
    return sc.transform(context), None if target is None else sc.transform(target), sc


def unscale(values, scaler: Scaler):
    return scaler.inverse_transform(values)


# ----------------------------------------------------------------- training loop


def fit(sampler: Callable, params: ModelParams, loss: LossConfig, train: TrainConfig,
        callback: Callable | None = None) -> tuple[ModelParams, list[dict]]:
    """Train ``params`` on batches drawn from ``sampler``.

    ``sampler(rng, batch_size)`` returns ``(contexts, targets)`` or
    ``(contexts, targets, covariates)``. One history row per step with keys
    ``step, epoch, wta_term, score_term, temperature, total, lr``.
    """
    rng = np.random.default_rng(train.seed)
    state = AdamState()
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    history: list[dict] = []
    lr = train.lr
    best_epoch_loss, bad_epochs, epoch_losses = math.inf, 0, []
    for step in range(train.n_iter):
        epoch = step // max(train.steps_per_epoch, 1)
        batch = sampler(rng, train.batch_size)
        X, Y = batch[0], batch[1]
        C = batch[2] if len(batch) > 2 else None
        if train.scaler != "none":
            X, Y, _ = scale(X, Y, train.scaler)
        current = params.with_tensors(tensors)
        r = batch_loss_and_grad(current, X, Y, loss, epoch, covariates=C)
        T = temperature(loss, epoch) if loss.variant == "annealed" else float("nan")
        row = {"step": step, "epoch": epoch, "wta_term": r.wta_term, "score_term": r.score_term,
               "temperature": T, "total": r.total, "lr": lr}
        if not math.isfinite(r.total) or r.total > 1e12:
            raise TrainingDivergedError(f"training diverged at step {step} (loss={r.total})",
                                        params=current.copy(), history=history)
        try:
            _check_finite_grads(r.grads)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"step {step}: {exc}", params=current.copy(), history=history) from exc
        history.append(row)
        tensors, state = adam_step(tensors, r.grads, state, lr, clip_norm=train.clip_norm)
        if train.log_every and step % train.log_every == 0:
            logger.info("step %d epoch %d total %.6g wta %.6g score %.6g", step, epoch, r.total, r.wta_term,
                        r.score_term)
        if callback is not None:
            callback(step, params.with_tensors(tensors), row)
        epoch_losses.append(r.total)
        end_of_epoch = (step + 1) % max(train.steps_per_epoch, 1) == 0
        if train.plateau and end_of_epoch:
            mean_loss = float(np.mean(epoch_losses))
            epoch_losses = []
            if mean_loss < best_epoch_loss:
                best_epoch_loss, bad_epochs = mean_loss, 0
            else:
                bad_epochs += 1
                if bad_epochs > train.plateau_patience:
                    lr *= train.plateau_factor
                    bad_epochs = 0
                    logger.info("plateau: learning rate reduced to %g", lr)
    return params.with_tensors(tensors), history


def write_history_csv(history: list[dict], path) -> None:
    cols = ["step", "wta_term", "score_term", "temperature", "total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if c == "step" else repr(float(row[c])) for c in cols])
