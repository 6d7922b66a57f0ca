"""Synthetic stochastic processes and context/target windowing.

All generators derive one independent random stream per path from
``(seed, path_index)``, so path ``i`` does not depend on how many paths
were requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Trajectory",
    "WindowPair",
    "ProcessSpec",
    "AR5_DEFAULT",
    "path_rng",
    "sample_brownian",
    "sample_bridge",
    "sample_ar",
    "sample_ar_continuations",
    "make_windows",
    "stack_windows",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


@dataclass(frozen=True)
class Trajectory:
    """A ``D x L`` sampled path on a uniform time grid."""

    values: np.ndarray
    dt: float = 1.0
    t_start: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"trajectory values must be D x L with D, L >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("trajectory values must be finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.length)

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.values[:, start:stop], self.dt, self.t_start + start * self.dt)


@dataclass(frozen=True)
class WindowPair:
    context: Trajectory
    target: Trajectory

    def __post_init__(self):
        c, t = self.context, self.target
        if c.dim != t.dim:
            raise ValueError(f"context has D={c.dim} but target has D={t.dim}")
        if not np.isclose(c.dt, t.dt, rtol=1e-12, atol=0.0):
            raise ValueError("context and target must share dt")
        expected = c.t_start + c.length * c.dt
        if not np.isclose(t.t_start, expected, rtol=1e-9, atol=1e-12):
            raise ValueError(f"target must start at {expected}, starts at {t.t_start}")


@dataclass(frozen=True)
class ProcessSpec:
    """Parameters of one of the synthetic processes.

    ``kind`` is ``"brownian_motion"``, ``"brownian_bridge"`` or ``"ar"``.
    AR-only fields are ignored by the Brownian kinds and vice versa.
    """

    kind: str = "brownian_motion"
    phi: tuple[float, ...] = (1.0,)
    sigma: float = 1.0
    warmup: int = 100
    endpoint: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in ("brownian_motion", "brownian_bridge", "ar"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        object.__setattr__(self, "phi", tuple(float(p) for p in self.phi))
        if self.kind == "ar":
            if len(self.phi) < 1:
                raise ValueError("AR order must be >= 1")
            if self.sigma < 0:
                raise ValueError("sigma must be non-negative")
            if self.warmup < self.order:
                raise ValueError(f"warmup ({self.warmup}) must be >= order ({self.order})")

    @property
    def order(self) -> int:
        return len(self.phi)


AR5_DEFAULT = ProcessSpec(kind="ar", phi=(0.4, 0.2, 0.2, 0.1, 0.1), sigma=0.06, warmup=100)


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for path ``index`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]))


def _check_positive(name, value):
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def _brownian_values(rng, n_steps, dt):
    w = np.zeros(n_steps)
    if n_steps > 1:
        np.cumsum(rng.standard_normal(n_steps - 1) * np.sqrt(dt), out=w[1:])
    return w


def sample_brownian(n_steps: int, n_paths: int, dt: float, rng_seed: int) -> list[Trajectory]:
    """Standard Brownian motion sampled at ``n_steps`` grid points ``0, dt, ...``."""
    _check_positive("n_steps", n_steps)
    _check_positive("n_paths", n_paths)
    if not dt > 0:
        raise ValueError("dt must be positive")
    return [Trajectory(_brownian_values(path_rng(rng_seed, i), n_steps, dt), dt, 0.0) for i in range(n_paths)]


def sample_bridge(n_steps: int, n_paths: int, endpoint: float = 1.0, rng_seed: int = 0) -> list[Trajectory]:
    """Brownian bridge on ``[0, 1]`` pinned at ``endpoint`` on both ends."""
    if int(n_steps) != n_steps or n_steps < 2:
        raise ValueError(f"bridge needs n_steps >= 2, got {n_steps!r}")
    _check_positive("n_paths", n_paths)
    dt = 1.0 / (n_steps - 1)
    t = np.arange(n_steps) * dt
    t[-1] = 1.0
    out = []
    for i in range(n_paths):
        w = _brownian_values(path_rng(rng_seed, i), n_steps, dt)
        b = endpoint + (w - t * w[-1])
        # pin exactly; the subtraction above leaves rounding residue
        b[0] = endpoint
        b[-1] = endpoint
        out.append(Trajectory(b, dt, 0.0))
    return out


def _ar_recursion(phi, sigma, init, noise):
    """Run the AR recursion from ``init`` (oldest first) over ``noise``.

    Vectorized over leading axes: ``init`` is ``(..., p)``, ``noise`` is
    ``(..., n)``; returns ``(..., n)``.
    """
    p = len(phi)
    n = noise.shape[-1]
    buf = np.empty(noise.shape[:-1] + (p + n,))
    buf[..., :p] = init
    coef = np.asarray(phi[::-1])  # aligns with buf[t-p:t], oldest first
    for t in range(n):
        buf[..., p + t] = buf[..., t : t + p] @ coef + sigma * noise[..., t]
    return buf[..., p:]


def sample_ar(spec: ProcessSpec, length: int, n_paths: int, rng_seed: int, dt: float | None = None,
              init: Sequence[float] | None = None) -> list[Trajectory]:
    """AR(p) paths: Gaussian initial state, warmup discarded, then ``length`` values.

    The warmup and the retained segment consume one stream per path, warmup
    first. ``init`` forces the initial state instead of drawing it. ``dt``
    defaults to ``1 / length`` (time normalized by the path length).
    """
    if spec.kind != "ar":
        raise ValueError(f"sample_ar needs an AR spec, got kind={spec.kind!r}")
    if int(length) != length or length <= 0:
        raise ValueError(f"length must be positive, got {length!r}")
    _check_positive("n_paths", n_paths)
    p = spec.order
    dt = 1.0 / length if dt is None else dt
    out = []
    for i in range(n_paths):
        rng = path_rng(rng_seed, i)
        x0 = rng.standard_normal(p) * spec.sigma
        if init is not None:
            x0 = np.asarray(init, dtype=float)
            if x0.shape != (p,):
                raise ValueError(f"init must have length {p}")
        noise = rng.standard_normal(spec.warmup - p + length)
        series = np.concatenate([x0, _ar_recursion(spec.phi, spec.sigma, x0, noise)])
        out.append(Trajectory(series[spec.warmup :], dt, 0.0))
    return out


def sample_ar_continuations(context: Trajectory, spec: ProcessSpec, horizon: int, n_paths: int,
                            rng_seed: int) -> list[Trajectory]:
    """Continue ``context`` ``n_paths`` times through the AR recursion."""
    values = continuation_array(context, spec, horizon, n_paths, rng_seed)
    t0 = context.t_start + context.length * context.dt
    return [Trajectory(v, context.dt, t0) for v in values]


def continuation_array(context: Trajectory, spec: ProcessSpec, horizon: int, n_paths: int,
                       rng_seed: int) -> np.ndarray:
    """Array form of :func:`sample_ar_continuations`, shape ``(n_paths, 1, horizon)``."""
    if spec.kind != "ar":
        raise ValueError("continuations need an AR spec")
    _check_positive("horizon", horizon)
    _check_positive("n_paths", n_paths)
    p = spec.order
    if context.length < p:
        raise ValueError(f"context of length {context.length} is shorter than the AR order {p}")
    if context.dim != 1:
        raise ValueError("AR continuations are univariate")
    noise = np.stack([path_rng(rng_seed, i).standard_normal(horizon) for i in range(n_paths)])
    init = np.broadcast_to(context.values[0, -p:], (n_paths, p))
    return _ar_recursion(spec.phi, spec.sigma, init, noise)[:, None, :]


def make_windows(paths: Sequence[Trajectory], ctx_len: int, pred_len: int, strategy: str = "random",
                 seed: int = 0) -> list[WindowPair]:
    """Cut one (context, target) window per path.

    ``strategy="random"`` picks the slicing point uniformly among admissible
    ones (stream derived from ``(seed, path index)``); ``"last"`` takes the
    final window.
    """
    _check_positive("ctx_len", ctx_len)
    _check_positive("pred_len", pred_len)
    if strategy not in ("random", "last"):
        raise ValueError(f"unknown window strategy {strategy!r}")
    total = ctx_len + pred_len
    out = []
    for i, path in enumerate(paths):
        if path.length < total:
            raise ValueError(f"path {i} has length {path.length} < ctx_len + pred_len = {total}")
        n_start = path.length - total + 1
        start = n_start - 1 if strategy == "last" else int(path_rng(seed, i).integers(n_start))
        out.append(WindowPair(path.slice(start, start + ctx_len), path.slice(start + ctx_len, start + total)))
    return out


def stack_windows(windows: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(N, D, Lc)`` contexts and ``(N, D, Lp)`` targets."""
    return (np.stack([w.context.values for w in windows]), np.stack([w.target.values for w in windows]))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"d{d}" for d in range(traj.dim)])
        for t, col in zip(traj.times, traj.values.T):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in col])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"]:
        raise ValueError(f"{path}: missing header row starting with 't'")
    header = rows[0]
    if header[1:] != [f"d{d}" for d in range(len(header) - 1)] or len(header) < 2:
        raise ValueError(f"{path}: header must be t,d0..d{{D-1}}, got {header}")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.shape[0] < 1:
        raise ValueError(f"{path}: no data rows")
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    if len(t) > 2 and not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-12):
        raise ValueError(f"{path}: time grid is not uniform")
    return Trajectory(data[:, 1:].T, dt, float(t[0]))


def read_trajectory_dir(directory) -> list[Trajectory]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise ValueError(f"no CSV trajectories found in {directory}")
    return [read_trajectory_csv(f) for f in files]


# ---------------------------------------------------------------- batch samplers
#
# Training draws a fresh batch every step; these produce arrays directly from
# one generator rather than per-path streams.


def _random_slices(paths, ctx_len, pred_len, rng):
    B, D, L = paths.shape
    total = ctx_len + pred_len
    if L < total:
        raise ValueError(f"paths of length {L} are shorter than ctx_len + pred_len = {total}")
    start = rng.integers(0, L - total + 1, size=B)
    idx = start[:, None] + np.arange(total)
    win = np.take_along_axis(paths, np.broadcast_to(idx[:, None, :], (B, D, total)), axis=2)
    return win[:, :, :ctx_len], win[:, :, ctx_len:], start


@dataclass
class BrownianWindowSampler:
    """Random windows from Brownian paths with ``n_steps`` samples spaced ``dt``."""

    ctx_len: int = 1
    pred_len: int = 249
    n_steps: int = 500
    dt: float = 1.0 / 500

    def __call__(self, rng, batch_size):
        inc = rng.standard_normal((batch_size, 1, self.n_steps - 1)) * np.sqrt(self.dt)
        paths = np.concatenate([np.zeros((batch_size, 1, 1)), np.cumsum(inc, axis=2)], axis=2)
        X, Y, _ = _random_slices(paths, self.ctx_len, self.pred_len, rng)
        return X, Y


@dataclass
class BridgeWindowSampler:
    """Random windows from bridges on ``[0, 1]``; the covariate is the time of the last context sample."""

    ctx_len: int = 1
    pred_len: int = 250
    n_steps: int = 500
    endpoint: float = 1.0

    def __call__(self, rng, batch_size):
        dt = 1.0 / (self.n_steps - 1)
        t = np.arange(self.n_steps) * dt
        inc = rng.standard_normal((batch_size, 1, self.n_steps - 1)) * np.sqrt(dt)
        w = np.concatenate([np.zeros((batch_size, 1, 1)), np.cumsum(inc, axis=2)], axis=2)
        paths = self.endpoint + w - t * w[:, :, -1:]
        X, Y, start = _random_slices(paths, self.ctx_len, self.pred_len, rng)
        return X, Y, ((start + self.ctx_len - 1) * dt)[:, None]


@dataclass
class ARWindowSampler:
    """Random windows from fresh AR paths (warmup discarded) of ``path_len`` values."""

    spec: ProcessSpec = AR5_DEFAULT
    ctx_len: int = 100
    pred_len: int = 250
    path_len: int = 500

    def __call__(self, rng, batch_size):
        p = self.spec.order
        x0 = rng.standard_normal((batch_size, p)) * self.spec.sigma
        noise = rng.standard_normal((batch_size, self.spec.warmup - p + self.path_len))
        series = np.concatenate([x0, _ar_recursion(self.spec.phi, self.spec.sigma, x0, noise)], axis=1)
        paths = series[:, None, self.spec.warmup :]
        X, Y, _ = _random_slices(paths, self.ctx_len, self.pred_len, rng)
        return X, Y


@dataclass
class ArrayWindowSampler:
    """Random windows from a fixed array of paths ``(N, D, L)``."""

    paths: np.ndarray
    ctx_len: int
    pred_len: int

    def __call__(self, rng, batch_size):
        pick = rng.integers(0, self.paths.shape[0], size=batch_size)
        X, Y, _ = _random_slices(self.paths[pick], self.ctx_len, self.pred_len, rng)
        return X, Y
