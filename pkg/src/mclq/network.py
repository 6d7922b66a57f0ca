"""Multi-head forecaster: shared backbone, K prediction heads, K score heads.

Two backbones are supported:

``mlp``
    ReLU MLP on the flattened context; each head maps the last hidden layer
    to a whole ``D x Lp`` trajectory in one shot.
``rnn``
    Vanilla tanh cell ``h_t = tanh(x_t W_x + h_{t-1} W_h + b)``. The context
    is encoded from a trainable ``h0``; each head is then unrolled on its own
    predictions (no teacher forcing).

Batched arrays use the layout ``(batch, K, D, Lp)`` for hypotheses and
``(batch, K)`` for scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelParams",
    "Forecast",
    "init_params",
    "forward",
    "forward_mlp",
    "rnn_encode",
    "rnn_unroll",
    "backward_outputs",
    "params_to_json",
    "params_from_json",
]

SCHEMA_VERSION = 1


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ModelParams:
    """All weights of the forecaster plus the shape metadata needed to use them.

    ``tensors`` holds named arrays; head tensors are stacked along a leading
    ``K`` axis (``pred_W: (K, H, out)``, ``score_W: (K, H)``).
    """

    arch: str
    K: int
    D: int
    Lc: int
    Lp: int
    hidden_width: int
    n_layers: int = 3
    n_covariates: int = 0
    score_heads: bool = True
    tensors: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.K, self.D, self.Lc, self.Lp, self.hidden_width, self.n_layers,
                           self.n_covariates, self.score_heads, {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: dict) -> "ModelParams":
        return ModelParams(self.arch, self.K, self.D, self.Lc, self.Lp, self.hidden_width, self.n_layers,
                           self.n_covariates, self.score_heads, tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def unflatten(self, vec) -> dict:
        out, i = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[i : i + v.size]).reshape(v.shape)
            i += v.size
        return out

    @property
    def n_inputs(self) -> int:
        if self.arch == "mlp":
            return self.D * self.Lc + self.n_covariates
        return self.D


@dataclass(frozen=True)
class Forecast:
    """``K`` hypotheses ``(K, D, Lp)`` with their raw sigmoid scores ``(K,)``."""

    hypotheses: np.ndarray
    scores: np.ndarray

    @property
    def K(self) -> int:
        return self.hypotheses.shape[0]

    @property
    def normalized_scores(self) -> np.ndarray:
        s = np.asarray(self.scores, dtype=float)
        return s / s.sum()


def init_params(arch: str = "mlp", K: int = 10, D: int = 1, Lc: int = 1, Lp: int = 1, seed: int = 0,
                hidden_width: int = 200, n_layers: int = 3, n_covariates: int = 0,
                score_heads: bool = True) -> ModelParams:
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights, zero biases, zero ``h0``."""
    if arch not in ("mlp", "rnn"):
        raise ValueError(f"unknown architecture {arch!r}")
    for name, v in (("K", K), ("D", D), ("Lc", Lc), ("Lp", Lp), ("hidden_width", hidden_width)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    if arch == "rnn" and n_covariates:
        raise ValueError("covariates are only supported by the mlp backbone")
    rng = np.random.default_rng(seed)
    H = hidden_width

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t = {}
    if arch == "mlp":
        if n_layers < 1:
            raise ValueError("mlp needs at least one hidden layer")
        fan = D * Lc + n_covariates
        for i in range(n_layers):
            t[f"W{i}"] = uni(fan, (fan, H))
            t[f"b{i}"] = np.zeros(H)
            fan = H
        out = D * Lp
    else:
        t["W_x"] = uni(D, (D, H))
        t["W_h"] = uni(H, (H, H))
        t["b"] = np.zeros(H)
        t["h0"] = np.zeros(H)
        out = D
    t["pred_W"] = uni(H, (K, H, out))
    t["pred_b"] = np.zeros((K, out))
    if score_heads:
        t["score_W"] = uni(H, (K, H))
        t["score_b"] = np.zeros(K)
    return ModelParams(arch, K, D, Lc, Lp, H, n_layers if arch == "mlp" else 1, n_covariates, score_heads, t)


def _mlp_input(params, contexts, covariates):
    contexts = np.asarray(contexts, dtype=float)
    if contexts.ndim == 2:
        contexts = contexts[None]
    B = contexts.shape[0]
    if contexts.shape[1:] != (params.D, params.Lc):
        raise ValueError(f"expected contexts of shape (N, {params.D}, {params.Lc}), got {contexts.shape}")
    x = contexts.reshape(B, -1)
    if params.n_covariates:
        if covariates is None:
            raise ValueError(f"model expects {params.n_covariates} covariates per window")
        cov = np.asarray(covariates, dtype=float).reshape(B, -1)
        if cov.shape[1] != params.n_covariates:
            raise ValueError(f"expected {params.n_covariates} covariates, got {cov.shape[1]}")
        x = np.concatenate([x, cov], axis=1)
    elif covariates is not None:
        raise ValueError("model was built without covariates")
    return x


def _heads_matrix(pred_W):
    """Stacked head weights ``(K, H, out)`` as one ``(H, K * out)`` matrix."""
    K, H, out = pred_W.shape
    return pred_W.transpose(1, 0, 2).reshape(H, K * out)


def forward_mlp(params: ModelParams, contexts, covariates=None):
    """Batched MLP forward pass.

    Returns ``(hypotheses (B, K, D, Lp), step_scores (B, K, 1), cache)``.
    """
    t = params.tensors
    x = _mlp_input(params, contexts, covariates)
    acts = [x]
    pre = []
    h = x
    for i in range(params.n_layers):
        z = h @ t[f"W{i}"] + t[f"b{i}"]
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    B = x.shape[0]
    hyp = h @ _heads_matrix(t["pred_W"]) + t["pred_b"].reshape(-1)
    hyp = hyp.reshape(B, params.K, params.D, params.Lp)
    if params.score_heads:
        scores = sigmoid(h @ t["score_W"].T + t["score_b"])[:, :, None]
    else:
        scores = np.full((B, params.K, 1), 0.5)
    return hyp, scores, {"acts": acts, "pre": pre}


def _rnn_contexts(params, contexts):
    contexts = np.asarray(contexts, dtype=float)
    if contexts.ndim == 2:
        contexts = contexts[None]
    if contexts.ndim != 3 or contexts.shape[1] != params.D or contexts.shape[2] < 1:
        raise ValueError(f"expected contexts of shape (N, {params.D}, Lc>=1), got {contexts.shape}")
    return contexts


def rnn_encode(params: ModelParams, contexts, return_states: bool = False):
    """Encode contexts ``(B, D, Lc)`` into the hidden state ``(B, H)``."""
    t = params.tensors
    contexts = _rnn_contexts(params, contexts)
    B = contexts.shape[0]
    h = np.broadcast_to(t["h0"], (B, params.hidden_width))
    states = [h]
    for j in range(contexts.shape[2]):
        h = np.tanh(contexts[:, :, j] @ t["W_x"] + h @ t["W_h"] + t["b"])
        states.append(h)
    return (h, states) if return_states else h


def rnn_unroll(params: ModelParams, h, steps: int):
    """Unroll every head independently from hidden state ``h (B, H)``.

    Returns ``(hypotheses (B, K, D, steps), step_scores (B, K, steps), states)``
    where ``states[t]`` is the ``(B, K, H)`` state feeding step ``t``.
    """
    t = params.tensors
    B = h.shape[0]
    hk = np.broadcast_to(h[:, None, :], (B, params.K, params.hidden_width))
    hyps = np.empty((B, params.K, params.D, steps))
    scores = np.full((B, params.K, steps), 0.5)
    states = [hk]
    for s in range(steps):
        x_hat = np.matmul(hk.transpose(1, 0, 2), t["pred_W"]).transpose(1, 0, 2) + t["pred_b"]
        hyps[:, :, :, s] = x_hat
        if params.score_heads:
            scores[:, :, s] = sigmoid((hk * t["score_W"]).sum(axis=-1) + t["score_b"])
        if s + 1 < steps:
            hk = np.tanh(x_hat @ t["W_x"] + hk @ t["W_h"] + t["b"])
            states.append(hk)
    return hyps, scores, states


def forward(params: ModelParams, contexts, covariates=None):
    """Dispatch to the backbone. Returns ``(hyps, step_scores, cache)``."""
    if params.arch == "mlp":
        return forward_mlp(params, contexts, covariates)
    if covariates is not None:
        raise ValueError("the rnn backbone does not take covariates")
    contexts = _rnn_contexts(params, contexts)
    h, enc_states = rnn_encode(params, contexts, return_states=True)
    hyps, scores, dec_states = rnn_unroll(params, h, params.Lp)
    return hyps, scores, {"contexts": contexts, "enc": enc_states, "dec": dec_states, "hyps": hyps}


def forecasts(params: ModelParams, contexts, covariates=None) -> list[Forecast]:
    hyps, step_scores, _ = forward(params, contexts, covariates)
    return [Forecast(h, s.mean(axis=-1)) for h, s in zip(hyps, step_scores)]


def backward_outputs(params: ModelParams, cache, d_hyp, d_logit) -> dict:
    """Backpropagate output gradients to every parameter.

    ``d_hyp`` is dL/d(hypotheses) ``(B, K, D, Lp)``; ``d_logit`` is dL/d(score
    pre-activation) ``(B, K, S)`` with ``S = 1`` for the MLP and ``Lp`` for the
    RNN (``None`` when score heads are off).
    """
    if params.arch == "mlp":
        return _backward_mlp(params, cache, d_hyp, d_logit)
    return _backward_rnn(params, cache, d_hyp, d_logit)


def _backward_mlp(params, cache, d_hyp, d_logit):
    t = params.tensors
    acts, pre = cache["acts"], cache["pre"]
    B = d_hyp.shape[0]
    h = acts[-1]
    dy = d_hyp.reshape(B, -1)
    K, H, out = t["pred_W"].shape
    g = {
        "pred_W": (h.T @ dy).reshape(H, K, out).transpose(1, 0, 2),
        "pred_b": dy.sum(axis=0).reshape(K, out),
    }
    dh = dy @ _heads_matrix(t["pred_W"]).T
    if params.score_heads:
        dl = d_logit[:, :, 0]
        g["score_W"] = dl.T @ h
        g["score_b"] = dl.sum(axis=0)
        dh += dl @ t["score_W"]
    for i in reversed(range(params.n_layers)):
        dz = dh * (pre[i] > 0)
        g[f"W{i}"] = acts[i].T @ dz
        g[f"b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ t[f"W{i}"].T
    return {k: g[k] for k in t}


def _backward_rnn(params, cache, d_hyp, d_logit):
    t = params.tensors
    W_x, W_h = t["W_x"], t["W_h"]
    dec = cache["dec"]
    B, K, D, L = d_hyp.shape
    g = {k: np.zeros_like(v) for k, v in t.items()}
    dh_next = np.zeros((B, K, params.hidden_width))
    for s in reversed(range(L)):
        hk = dec[s]
        dx = d_hyp[:, :, :, s].copy()
        dh = np.zeros_like(hk)
        if s + 1 < L:
            h_new = dec[s + 1]
            da = dh_next * (1.0 - h_new * h_new)
            g["W_x"] += cache["hyps"][:, :, :, s].reshape(B * K, D).T @ da.reshape(B * K, -1)
            g["W_h"] += hk.reshape(B * K, -1).T @ da.reshape(B * K, -1)
            g["b"] += da.sum(axis=(0, 1))
            dx += da @ W_x.T
            dh += da @ W_h.T
        g["pred_W"] += np.matmul(hk.transpose(1, 2, 0), dx.transpose(1, 0, 2))
        g["pred_b"] += dx.sum(axis=0)
        dh += np.matmul(dx.transpose(1, 0, 2), t["pred_W"].transpose(0, 2, 1)).transpose(1, 0, 2)
        if params.score_heads:
            dl = d_logit[:, :, s]
            g["score_W"] += (dl[:, :, None] * hk).sum(axis=0)
            g["score_b"] += dl.sum(axis=0)
            dh += dl[:, :, None] * t["score_W"][None]
        dh_next = dh
    # heads all start from the shared encoder state
    dh = dh_next.sum(axis=1)
    contexts = cache["contexts"]
    enc = cache["enc"]
    for j in reversed(range(contexts.shape[2])):
        h_new, h_prev = enc[j + 1], enc[j]
        da = dh * (1.0 - h_new * h_new)
        g["W_x"] += contexts[:, :, j].T @ da
        g["W_h"] += h_prev.T @ da
        g["b"] += da.sum(axis=0)
        dh = da @ W_h.T
    g["h0"] += dh.sum(axis=0)
    return g


def params_to_json(params: ModelParams, extra: dict | None = None) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "arch": params.arch,
        "K": params.K,
        "D": params.D,
        "Lc": params.Lc,
        "Lp": params.Lp,
        "hidden_width": params.hidden_width,
        "n_layers": params.n_layers,
        "n_covariates": params.n_covariates,
        "score_heads": params.score_heads,
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.tensors.items()},
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc)


def params_from_json(text: str) -> tuple[ModelParams, dict]:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {doc.get('schema_version')!r}")
    tensors = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["tensors"].items()}
    p = ModelParams(doc["arch"], doc["K"], doc["D"], doc["Lc"], doc["Lp"], doc["hidden_width"], doc["n_layers"],
                    doc["n_covariates"], doc["score_heads"], tensors)
    return p, doc.get("extra", {})
