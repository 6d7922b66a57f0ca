"""Command-line front end: ``mclq {synth,oracle,train,predict,eval}``.

Every command writes into the ``--out`` directory. Exit codes: 0 success,
2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import PRESETS, ConfigError, RunConfig, load_config
from .estimator import MCLForecaster
from .network import params_from_json
from .oracles import (
    Codebook,
    ConvergenceError,
    KLSpec,
    brownian_window_codebook,
    codebook_from_json,
    codebook_to_json,
    lloyd_trajectories,
    product_codebook,
)
from .processes import (
    ARWindowSampler,
    ArrayWindowSampler,
    BridgeWindowSampler,
    BrownianWindowSampler,
    ProcessSpec,
    Trajectory,
    continuation_array,
    make_windows,
    read_trajectory_csv,
    read_trajectory_dir,
    sample_ar,
    sample_bridge,
    sample_brownian,
    stack_windows,
    write_trajectory_csv,
)
from .training import TrainingDivergedError, write_history_csv

logger = logging.getLogger("mclq")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- helpers


def _process(cfg: RunConfig) -> tuple[str, ProcessSpec, float]:
    kind = cfg.get("process.kind")
    if kind not in ("brownian_motion", "brownian_bridge", "ar"):
        raise ConfigError(f"process.kind must be brownian_motion, brownian_bridge or ar, got {kind!r}")
    n_steps = cfg.get("process.n_steps")
    if kind == "brownian_bridge":
        dt = 1.0 / (n_steps - 1) if n_steps > 1 else 1.0
    else:
        dt = cfg.get("process.dt") or 1.0 / n_steps
    spec = ProcessSpec(kind=kind, phi=cfg.get("process.phi"), sigma=cfg.get("process.sigma"),
                       warmup=cfg.get("process.warmup"), endpoint=cfg.get("process.endpoint"))
    return kind, spec, dt


def _sample_paths(cfg: RunConfig, n_paths: int, seed: int) -> list[Trajectory]:
    kind, spec, dt = _process(cfg)
    n_steps = cfg.get("process.n_steps")
    if kind == "brownian_motion":
        return sample_brownian(n_steps, n_paths, dt, rng_seed=seed)
    if kind == "brownian_bridge":
        return sample_bridge(n_steps, n_paths, spec.endpoint, rng_seed=seed)
    return sample_ar(spec, n_steps, n_paths, rng_seed=seed, dt=dt)


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out must be a directory: {out}")
    return out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, args.preset, overrides)


def _load_paths_dir(path) -> tuple[np.ndarray, list[Trajectory]]:
    trajs = read_trajectory_dir(_existing(path, "data directory"))
    shapes = {t.values.shape for t in trajs}
    if len(shapes) != 1:
        raise UsageError(f"trajectories in {path} do not share a shape: {sorted(shapes)}")
    return np.stack([t.values for t in trajs]), trajs


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    cfg.require("process.kind", "process.n_paths")
    n_paths = cfg.get("process.n_paths")
    if n_paths < 1:
        raise ConfigError(f"process.n_paths must be at least 1, got {n_paths}")
    seed = cfg.get("seed")
    paths = _sample_paths(cfg, n_paths, seed)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n_paths - 1)))
    files = []
    for i, p in enumerate(paths):
        name = f"path_{i:0{width}d}.csv"
        write_trajectory_csv(p, out / name)
        files.append({"file": name, "seed": seed, "index": i})
    kind, spec, dt = _process(cfg)
    _write_json(out / "manifest.json", {"process": kind, "n_steps": cfg.get("process.n_steps"), "dt": paths[0].dt,
                                        "phi": list(spec.phi), "sigma": spec.sigma, "warmup": spec.warmup,
                                        "endpoint": spec.endpoint, "seed": seed, "paths": files})
    (out / "resolved_config.txt").write_text(cfg.resolved_text(), encoding="utf-8")
    return EXIT_OK


def _ar_context(cfg: RunConfig, spec: ProcessSpec, dt: float, seed: int) -> Trajectory:
    ctx_path = cfg.get("oracle.context")
    if ctx_path is not None:
        return read_trajectory_csv(_existing(ctx_path, "oracle.context"))
    (path,) = sample_ar(spec, cfg.get("window.ctx_len"), 1, rng_seed=seed, dt=dt)
    return path


def cmd_oracle(cfg: RunConfig, out: Path) -> int:
    cfg.require("oracle.kind", "process.kind")
    kind = cfg.get("oracle.kind")
    seed = cfg.get("seed")
    proc, spec, dt = _process(cfg)
    n_steps = cfg.get("process.n_steps")
    n_eval = cfg.get("oracle.eval_samples")
    extra: dict = {"oracle": kind, "seed": seed}
    history = None
    if kind == "kl_product":
        if proc == "ar":
            raise ConfigError("kl_product needs a Brownian process")
        grid = dt * np.arange(n_steps)
        book = product_codebook(KLSpec(proc, cfg.get("oracle.levels_per_coord"), grid, T=float(grid[-1]) or dt))
        book.dt = dt
        fresh = np.stack([p.values for p in _sample_paths(cfg, n_eval, seed + 1)])
        if proc == "brownian_bridge":
            # the bridge codebook describes the zero-pinned bridge; shift to the endpoint
            book.codevectors = book.codevectors + spec.endpoint
        extra["distortion"] = metrics.distortion(fresh, np.broadcast_to(book.codevectors, (n_eval,) + book.codevectors.shape))
        extra["mc_distortion"] = extra["distortion"]
    elif kind == "kl_window":
        if proc != "brownian_motion":
            raise ConfigError("kl_window is defined for brownian_motion")
        pred_len = cfg.get("window.pred_len")
        book = brownian_window_codebook(pred_len, dt, cfg.get("oracle.levels_per_coord"))
        book.meta["shift"] = "last_context"
        ctx_len = cfg.get("window.ctx_len") if cfg.has("window.ctx_len") else 1
        X, Y = BrownianWindowSampler(ctx_len, pred_len, n_steps, dt)(np.random.default_rng(seed + 1), n_eval)
        extra["distortion"] = metrics.distortion(Y, book.shifted(X[:, :, -1]))
        extra["mc_distortion"] = extra["distortion"]
    elif kind == "lloyd":
        data = cfg.get("data.path")
        if data is not None:
            samples, trajs = _load_paths_dir(data)
            sample_dt = trajs[0].dt
            held = None
        elif proc == "ar":
            ctx = _ar_context(cfg, spec, dt, seed)
            pred_len = cfg.get("window.pred_len")
            samples = continuation_array(ctx, spec, pred_len, cfg.get("oracle.n_samples"), rng_seed=seed + 1)
            held = continuation_array(ctx, spec, pred_len, n_eval, rng_seed=seed + 2)
            sample_dt = ctx.dt
            extra["context"] = ctx.values.tolist()
        else:
            samples = np.stack([p.values for p in _sample_paths(cfg, cfg.get("oracle.n_samples"), seed + 1)])
            held = np.stack([p.values for p in _sample_paths(cfg, n_eval, seed + 2)])
            sample_dt = dt
        book, history = lloyd_trajectories(samples, cfg.get("oracle.K"), cfg.get("oracle.init"), seed,
                                           cfg.get("oracle.max_iter"), cfg.get("oracle.tol"))
        book.dt = sample_dt
        tile = lambda n: np.broadcast_to(book.codevectors, (n,) + book.codevectors.shape)  # noqa: E731
        extra["distortion"] = metrics.distortion(samples, tile(len(samples)))
        extra["mse_history"] = history
        if held is not None:
            extra["mc_distortion"] = metrics.distortion(held, tile(len(held)))
    else:
        raise ConfigError(f"oracle.kind must be kl_product, kl_window or lloyd, got {kind!r}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "codebook.json").write_text(codebook_to_json(book, extra), encoding="utf-8")
    if history is not None:
        with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mse"])
            w.writerows([i, repr(v)] for i, v in enumerate(history))
    (out / "resolved_config.txt").write_text(cfg.resolved_text(), encoding="utf-8")
    logger.info("oracle %s: K=%d distortion %.6g", kind, book.K, extra["distortion"])
    return EXIT_OK


def _estimator(cfg: RunConfig) -> MCLForecaster:
    return MCLForecaster(
        n_hypotheses=cfg.get("model.K"), backbone=cfg.get("model.arch"), hidden_width=cfg.get("model.hidden_width"),
        n_layers=cfg.get("model.n_layers"), score_heads=cfg.get("model.score_heads"), loss=cfg.get("loss.variant"),
        epsilon=cfg.get("loss.epsilon"), T0=cfg.get("loss.T0"), rho=cfg.get("loss.rho"), T_lim=cfg.get("loss.T_lim"),
        beta=cfg.get("loss.beta"), divide_by_horizon=cfg.get("loss.divide_by_horizon"),
        learning_rate=cfg.get("train.lr"), batch_size=cfg.get("train.batch_size"), n_iter=cfg.get("train.n_iter"),
        steps_per_epoch=cfg.get("train.steps_per_epoch"), clip_norm=cfg.get("train.clip_norm"),
        plateau=cfg.get("train.plateau"), scaler=cfg.get("train.scaler"), random_state=cfg.get("seed"))


def cmd_train(cfg: RunConfig, out: Path) -> int:
    cfg.require("window.ctx_len", "window.pred_len")
    Lc, Lp = cfg.get("window.ctx_len"), cfg.get("window.pred_len")
    data = cfg.get("data.path")
    est = _estimator(cfg)
    n_cov = 0
    if data is not None:
        paths, trajs = _load_paths_dir(data)
        sampler, D, dt = ArrayWindowSampler(paths, Lc, Lp), paths.shape[1], trajs[0].dt
        if paths.shape[2] < Lc + Lp:
            raise UsageError(f"paths of length {paths.shape[2]} are shorter than ctx_len + pred_len = {Lc + Lp}")
        proc = "data"
    else:
        cfg.require("process.kind")
        proc, spec, dt = _process(cfg)
        n_steps = cfg.get("process.n_steps")
        if n_steps < Lc + Lp:
            raise ConfigError(f"process.n_steps={n_steps} is shorter than ctx_len + pred_len = {Lc + Lp}")
        D = 1
        if proc == "brownian_motion":
            sampler = BrownianWindowSampler(Lc, Lp, n_steps, dt)
        elif proc == "brownian_bridge":
            sampler, n_cov = BridgeWindowSampler(Lc, Lp, n_steps, spec.endpoint), 1
        else:
            sampler = ARWindowSampler(spec, Lc, Lp, n_steps)
    if n_cov and est.backbone == "rnn":
        raise ConfigError("the rnn backbone does not take the bridge time covariate; use model.arch = mlp")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.resolved_text(), encoding="utf-8")
    try:
        est.fit_stream(sampler, D, Lc, Lp, n_cov)
    except TrainingDivergedError as exc:
        if exc.history:
            write_history_csv(exc.history, out / "history.csv")
        raise
    extra = {"process": proc, "dt": dt, "config": cfg.resolved_text()}
    (out / "checkpoint.json").write_text(est.to_json(extra), encoding="utf-8")
    write_history_csv(est.history_, out / "history.csv")
    return EXIT_OK


def _load_checkpoint(path):
    text = _existing(path, "checkpoint").read_text(encoding="utf-8")
    _, extra = params_from_json(text)
    return MCLForecaster.from_json(text), extra


def _covariates(est: MCLForecaster, contexts: list[Trajectory]):
    if est.params_.n_covariates == 0:
        return None
    # the bridge model's covariate is the time of the last context sample
    return np.array([[c.t_start + (c.length - 1) * c.dt] for c in contexts])


def cmd_predict(args, out: Path) -> int:
    if not args.checkpoint or not args.context:
        raise UsageError("predict needs --checkpoint and --context")
    est, extra = _load_checkpoint(args.checkpoint)
    ctx = read_trajectory_csv(_existing(args.context, "context"))
    if ctx.length == 1 and "dt" in extra:
        # a single-row CSV carries no spacing; use the training grid
        ctx = Trajectory(ctx.values, float(extra["dt"]), ctx.t_start)
    p = est.params_
    if ctx.dim != p.D or (p.arch == "mlp" and ctx.length != p.Lc):
        want = f"({p.D}, {p.Lc})" if p.arch == "mlp" else f"({p.D}, L>=1)"
        raise UsageError(f"context has shape {ctx.values.shape} but the checkpoint expects {want}")
    X = ctx.values[None]
    cov = _covariates(est, [ctx])
    hyps = est.predict(X, cov)[0]
    scores = est.predict_scores(X, cov)[0]
    t0 = ctx.t_start + ctx.length * ctx.dt
    times = t0 + ctx.dt * np.arange(p.Lp)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "forecast.json", {"K": p.K, "D": p.D, "Lp": p.Lp, "dt": ctx.dt, "t_start": t0,
                                        "scores": scores.tolist(), "hypotheses": hyps.tolist()})
    with open(out / "hypotheses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hypothesis", "score", "t"] + [f"d{d}" for d in range(p.D)])
        for k in range(p.K):
            for j, t in enumerate(times):
                w.writerow([k, repr(float(scores[k])), repr(float(t))] + [repr(float(v)) for v in hyps[k, :, j]])
    return EXIT_OK


def _write_plot_csv(path: Path, targets, hyps, weights, n_windows: int) -> None:
    N, K, D, L = hyps.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "time", "dimension", "hypothesis", "value", "score", "target"])
        for i in range(min(N, n_windows)):
            for k in range(K):
                for d in range(D):
                    for t in range(L):
                        w.writerow([i, t, d, k, repr(float(hyps[i, k, d, t])), repr(float(weights[i, k])),
                                    repr(float(targets[i, d, t]))])


def _report(targets, hyps, weights, seed) -> dict:
    return json.loads(metrics.evaluate(targets, hyps, weights, seed=seed).to_json())


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    if not args.checkpoint and not args.codebook:
        raise UsageError("eval needs --checkpoint, --codebook, or both")
    if not args.data:
        raise UsageError("eval needs --data (a directory of trajectory CSVs)")
    trajs = read_trajectory_dir(_existing(args.data, "data directory"))
    est = _load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    book: Codebook | None = None
    if args.codebook:
        book = codebook_from_json(_existing(args.codebook, "codebook").read_text(encoding="utf-8"))
    shift = book is not None and book.meta.get("shift") == "last_context"
    seed = cfg.get("seed")
    if est is not None or shift:
        Lc = est.params_.Lc if est is not None else cfg.get("window.ctx_len")
        Lp = est.params_.Lp if est is not None else book.Lp
        too_short = [t.length for t in trajs if t.length < Lc + Lp]
        if too_short:
            raise UsageError(f"paths of length {too_short[0]} are shorter than ctx_len + pred_len = {Lc + Lp}")
        windows = make_windows(trajs, Lc, Lp, "last")
        X, Y = stack_windows(windows)
        contexts = [w.context for w in windows]
    else:
        X, contexts = None, None
        lengths = {t.values.shape for t in trajs}
        if lengths != {(book.D, book.Lp)}:
            raise UsageError(f"codebook expects trajectories of shape {(book.D, book.Lp)}, got {sorted(lengths)}")
        Y = np.stack([t.values for t in trajs])
    results, plots = {}, {}
    if est is not None:
        cov = _covariates(est, contexts)
        hyps = est.predict(X, cov)
        w = est.predict_scores(X, cov) if est.params_.score_heads else np.full(hyps.shape[:2], 1 / hyps.shape[1])
        results["model"] = _report(Y, hyps, w if est.params_.score_heads else None, seed)
        plots["model"] = (hyps, w)
    if book is not None:
        if book.Lp != Y.shape[2] or book.D != Y.shape[1]:
            raise UsageError(f"codebook has shape {(book.D, book.Lp)} but targets are {Y.shape[1:]}")
        hyps = book.shifted(X[:, :, -1]) if shift else np.broadcast_to(book.codevectors, (len(Y),) + book.codevectors.shape)
        w = np.full(hyps.shape[:2], 1 / book.K)
        results["oracle"] = _report(Y, hyps, None, seed)
        plots["oracle"] = (hyps, w)
    out.mkdir(parents=True, exist_ok=True)
    n_plot = cfg.get("eval.n_windows")
    if len(results) == 1:
        (name,) = results
        _write_json(out / "metrics.json", results[name])
        metrics.MetricsReport(**results[name]).write_csv(out / "metrics.csv")
        _write_plot_csv(out / "plot.csv", Y, *plots[name], n_plot)
    else:
        doc = dict(results)
        doc["distortion_ratio"] = results["model"]["distortion"] / results["oracle"]["distortion"]
        _write_json(out / "metrics.json", doc)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "distortion", "rmse", "crps_sum", "total_variation"])
            for name, rep in results.items():
                w.writerow([name] + [repr(rep[k]) for k in ("distortion", "rmse", "crps_sum", "total_variation")])
        for name, (hyps, wts) in plots.items():
            _write_plot_csv(out / f"plot_{name}.csv", Y, hyps, wts, n_plot)
    return EXIT_OK


# ----------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named configuration to start from")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="mclq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="simulate process paths to CSV")
    sub.add_parser("oracle", parents=[common], help="compute a reference codebook")
    sub.add_parser("train", parents=[common], help="train a forecaster")
    p = sub.add_parser("predict", parents=[common], help="forecast from a context CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", required=True)
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint and/or codebook on data")
    e.add_argument("--checkpoint")
    e.add_argument("--codebook")
    e.add_argument("--data")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MCLQ_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        out = _out_dir(args)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "oracle":
            return cmd_oracle(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "predict":
            return cmd_predict(args, out)
        return cmd_eval(args, cfg, out)
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        print(f"mclq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, ConvergenceError, FloatingPointError) as exc:
        print(f"mclq {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
