"""Sectioned ``key = value`` run configuration with per-problem defaults."""
from __future__ import annotations

import configparser
import copy
from pathlib import Path


class ConfigError(ValueError):
    pass


_COMMON = {
    "problem": {"kind": "", "resolution": 0, "seed": 0, "samples": 20},
    "phase1": {"mode": "supervised", "lr": 1e-3, "weight_decay": 1e-6, "step_size": 300,
               "gamma": 0.5, "lambda_rec": 1.5, "epochs": 900, "batch_size": 32, "seed": 0,
               "channels": (8, 16, 16, 8), "kernel_size": 3, "latent_channels": 4,
               "activation": "tanh", "mask": "smooth", "n_train": 1000, "n_test": 200, "snapshot_epochs": (10, 100)},
    "phase2": {"lambda2": 0.005, "lbfgs_lr": 1.0, "memory": 10, "c1": 1e-4, "c2": 0.9,
               "max_iters": 100, "tolerance_change": 1e-9, "obj_weight": 1.0,
               "m_init": "xy(1-x)(1-y)"},
    "paths": {"data": "", "checkpoint": "", "checkpoints": ()},
}

_KIND = {
    "poisson": {
        "problem": {"resolution": 64, "alpha": 1e-6},
    },
    "wave": {
        "problem": {"resolution": 64, "alpha": 0.0, "a": 1.0 / 3.0, "T": 5.0},
        "phase1": {"weight_decay": 1e-4, "epochs": 300, "channels": (32, 64, 32, 4), "kernel_size": 5,
                   "n_train": 1000, "n_test": 200, "step_size": 100},
        "phase2": {"lambda2": 0.001, "m_init": "pulse"},
    },
    "burgers": {
        "problem": {"resolution": 130, "alpha": 0.01, "nu": 0.01, "T": 1.0, "dt": 0.1},
        "phase1": {"weight_decay": 1e-4, "epochs": 300, "batch_size": 8,
                   "channels": (32, 64, 32, 4), "kernel_size": 5, "step_size": 100,
                   "n_initial": 40, "n_forces": 10, "n_test": 40},
        "phase2": {"lambda2": 0.3, "obj_weight": 10.0, "lbfgs_lr": 0.5,
                   "tolerance_change": 4e-6, "m_init": "constant:0.1"},
    },
}


def defaults(kind: str) -> dict:
    if kind not in _KIND:
        raise ConfigError(f"unknown problem kind {kind!r}; expected one of {sorted(_KIND)}")
    out = copy.deepcopy(_COMMON)
    for section, values in _KIND[kind].items():
        out[section].update(values)
    out["problem"]["kind"] = kind
    return out


def _convert(raw: str, like, where: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if like and isinstance(like[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


class RunConfig:
    """Validated configuration; access values as ``cfg["phase1"]["lr"]``."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @property
    def kind(self) -> str:
        return self.values["problem"]["kind"]

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        pairs = [(s, k, v) for s in parser.sections() for k, v in parser.items(s)]
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            pairs.append((section, name, value))
        kind = None
        for s, k, v in pairs:
            if s == "problem" and k == "kind":
                kind = v.strip()
        if not kind:
            raise ConfigError("missing required key problem.kind")
        values = defaults(kind)
        for s, k, v in pairs:
            if s not in values:
                raise ConfigError(f"unknown section [{s}]")
            if k not in values[s]:
                raise ConfigError(f"unknown key {s}.{k} for a {kind} problem")
            values[s][k] = _convert(v, values[s][k], f"{s}.{k}")
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, overrides)

    def validate(self) -> None:
        p, t, c = self["problem"], self["phase1"], self["phase2"]
        if p["resolution"] < 3:
            raise ConfigError("problem.resolution must be >= 3")
        if p["samples"] < 1:
            raise ConfigError("problem.samples must be >= 1")
        if t["mode"] not in ("supervised", "residual"):
            raise ConfigError(f"phase1.mode must be supervised or residual, got {t['mode']!r}")
        if t["mode"] == "residual" and self.kind != "poisson":
            raise ConfigError("residual training is available for the Poisson problem only")
        if len(t["channels"]) != 4:
            raise ConfigError("phase1.channels needs four comma-separated widths")
        if not 0 < c["c1"] < c["c2"] < 1:
            raise ConfigError("phase2 needs 0 < c1 < c2 < 1")
        for key in ("lr", "weight_decay", "lambda_rec"):
            if t[key] < 0:
                raise ConfigError(f"phase1.{key} must be >= 0")
        if c["lambda2"] < 0 or p.get("alpha", 0.0) < 0:
            raise ConfigError("lambda2 and alpha must be >= 0")

    def to_text(self) -> str:
        lines = []
        for section, values in self.values.items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)
