"""Flat ``key = value`` run configuration with typed keys and named presets."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "KEYS", "PRESETS", "load_config"]


class ConfigError(ValueError):
    """Bad or missing configuration; the CLI maps it to exit code 2."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


# key -> (parser, default as text; None means no default)
KEYS: dict[str, tuple] = {
    "seed": (int, "0"),
    "process.kind": (str, None),
    "process.n_steps": (int, "500"),
    "process.dt": (_opt_float, "none"),
    "process.endpoint": (float, "1.0"),
    "process.phi": (_floats, "0.4,0.2,0.2,0.1,0.1"),
    "process.sigma": (float, "0.06"),
    "process.warmup": (int, "100"),
    "process.n_paths": (int, None),
    "window.ctx_len": (int, None),
    "window.pred_len": (int, None),
    "model.arch": (str, "mlp"),
    "model.K": (int, "10"),
    "model.hidden_width": (int, "200"),
    "model.n_layers": (int, "3"),
    "model.score_heads": (_bool, "true"),
    "loss.variant": (str, "relaxed"),
    "loss.epsilon": (float, "0.1"),
    "loss.T0": (float, "10.0"),
    "loss.rho": (float, "0.95"),
    "loss.T_lim": (float, "5e-4"),
    "loss.beta": (float, "0.5"),
    "loss.divide_by_horizon": (_bool, "true"),
    "train.lr": (float, "1e-3"),
    "train.batch_size": (int, "4096"),
    "train.n_iter": (int, "500"),
    "train.steps_per_epoch": (int, "30"),
    "train.scaler": (str, "none"),
    "train.clip_norm": (_opt_float, "none"),
    "train.plateau": (_bool, "false"),
    "data.path": (_opt_str, "none"),
    "oracle.kind": (str, None),
    "oracle.levels_per_coord": (_ints, "5,2"),
    "oracle.K": (int, "10"),
    "oracle.init": (str, "kmeans_pp"),
    "oracle.max_iter": (int, "300"),
    "oracle.tol": (float, "1e-10"),
    "oracle.n_samples": (int, "100000"),
    "oracle.eval_samples": (int, "10000"),
    "oracle.context": (_opt_str, "none"),
    "eval.n_windows": (int, "100"),
}

_TOY_BM = {
    "process.kind": "brownian_motion",
    "process.n_steps": "500",
    "window.ctx_len": "1",
    "window.pred_len": "249",
    "model.arch": "mlp",
    "model.K": "10",
    "model.hidden_width": "200",
    "model.n_layers": "3",
    "model.score_heads": "false",
    "loss.variant": "relaxed",
    "loss.epsilon": "0.05",
    "train.lr": "1e-3",
    "train.batch_size": "4096",
    "train.n_iter": "500",
    "train.scaler": "none",
}

PRESETS: dict[str, dict[str, str]] = {
    "toy-bm": _TOY_BM,
    "toy-bm-annealed": {**_TOY_BM, "loss.variant": "annealed", "loss.T0": "10", "loss.rho": "0.95",
                        "loss.T_lim": "5e-4"},
    "toy-bridge": {**_TOY_BM, "process.kind": "brownian_bridge", "process.endpoint": "1.0",
                   "window.pred_len": "250"},
    "toy-ar5": {**_TOY_BM, "process.kind": "ar", "process.phi": "0.4,0.2,0.2,0.1,0.1", "process.sigma": "0.06",
                "process.warmup": "100", "window.ctx_len": "100", "window.pred_len": "250"},
    "bm-10": {"oracle.kind": "kl_product", "process.kind": "brownian_motion", "process.n_steps": "500",
              "oracle.levels_per_coord": "5,2", "oracle.eval_samples": "10000"},
    "bm-10-window": {"oracle.kind": "kl_window", "process.kind": "brownian_motion", "process.n_steps": "500",
                     "window.pred_len": "249", "oracle.levels_per_coord": "5,2", "oracle.eval_samples": "10000"},
    "ar5-lloyd": {"oracle.kind": "lloyd", "process.kind": "ar", "process.phi": "0.4,0.2,0.2,0.1,0.1",
                  "process.sigma": "0.06", "process.warmup": "100", "process.n_steps": "500",
                  "window.ctx_len": "100", "window.pred_len": "250", "oracle.K": "10",
                  "oracle.n_samples": "100000"},
}


@dataclass
class RunConfig:
    """Resolved configuration: raw text values plus typed access."""

    raw: dict[str, str]

    def get(self, key: str):
        parser, default = KEYS[key]
        text = self.raw.get(key, default)
        if text is None:
            raise ConfigError(f"missing required config key {key!r}")
        try:
            return parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None

    def require(self, *keys: str) -> None:
        for k in keys:
            self.get(k)

    def has(self, key: str) -> bool:
        return key in self.raw

    def validate(self) -> None:
        """Parse every key that has a value so type errors surface before any work starts."""
        for key in self.raw:
            self.get(key)

    def resolved_text(self) -> str:
        """All keys with a value, defaults filled in, one ``key = value`` per line."""
        lines = []
        for key, (_, default) in KEYS.items():
            text = self.raw.get(key, default)
            if text is not None:
                lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case-sensitive (loss.T0)
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return dict(cp["run"])


def load_config(path=None, preset: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge, in increasing priority: preset, config file, explicit overrides.

    A ``preset = NAME`` line in the file selects a preset when none is given.
    """
    file_values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        file_values = parse_text(p.read_text(encoding="utf-8"))
    preset = preset or file_values.pop("preset", None)
    file_values.pop("preset", None)
    raw: dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw.update(PRESETS[preset])
    raw.update(file_values)
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig(raw)
    cfg.validate()
    return cfg
