"""Experiment configuration files.

INI-style sections of ``key = value`` lines.  List values are comma
separated.  Every section and key is checked against :data:`SCHEMA`; anything
unknown is an error so that a typo never silently falls back to a default.

Sections::

    [task]        kind, count, noise, seed, path, images, labels
    [model]       sizes, activation, head, output_activation
    [train]       epochs, lr, momentum, weight_decay, batch_size
    [defense]     variant, K, epsilon, p, n, alpha, start_epoch, layers,
                  alpha_mix, substitutive, inner_K, input_eps, random_init
    [run]         seeds, out, metrics, workers, checkpoint
    [sweep.<m>]   grid for corruption method <m> (multi_step, gradient,
                  gaussian, uniform, quantize); each key takes a list
    [probe]       epsilon, p, n, K, alpha, grouping, batch_size
    [quantize]    bits
    [eta]         k, samples, workers
    [bound]       hessian, gradient, p, n, epsilon, resolution
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..constraints import parse_norm
from ..errors import ConfigError
from .sweep import METHOD_PARAMS, METHODS


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _opt_int(s):
    return None if s.strip().lower() in ("", "none", "all") else _int(s)


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _norm(s):
    return parse_norm(s.strip())


def _list(conv):
    def parse(s):
        items = [x.strip() for x in s.split(",") if x.strip()]
        if not items:
            raise ValueError("empty list")
        return [conv(x) for x in items]

    return parse


def _str(s):
    return s.strip()


SCHEMA = {
    "task": {"kind": _str, "count": _int, "noise": float, "seed": _int, "path": _str, "images": _str, "labels": _str},
    "model": {"sizes": _list(_int), "activation": _str, "head": _str, "output_activation": _str},
    "train": {"epochs": _int, "lr": float, "momentum": float, "weight_decay": float, "batch_size": _int},
    "defense": {
        "variant": _str,
        "K": _int,
        "epsilon": float,
        "p": _norm,
        "n": _opt_int,
        "alpha": _opt_float,
        "start_epoch": _int,
        "layers": _list(_int),
        "alpha_mix": float,
        "substitutive": _bool,
        "inner_K": _int,
        "input_eps": float,
        "random_init": _bool,
    },
    "run": {"seeds": _list(_int), "out": _str, "metrics": _list(_str), "workers": _int, "checkpoint": _str},
    "probe": {
        "epsilon": float,
        "p": _norm,
        "n": _opt_int,
        "K": _opt_int,
        "alpha": _opt_float,
        "grouping": _str,
        "batch_size": _int,
    },
    "quantize": {"bits": _list(_int)},
    "eta": {"k": _list(_int), "samples": _int, "workers": _int},
    "bound": {
        "hessian": _list(float),
        "gradient": _list(float),
        "p": _norm,
        "n": _opt_int,
        "epsilon": _list(float),
        "resolution": float,
    },
}

_SWEEP_TYPES = {
    "epsilon": float,
    "p": _norm,
    "n": _opt_int,
    "K": _opt_int,
    "alpha": _opt_float,
    "batch_size": _int,
    "sigma": float,
    "b": float,
    "bits": _int,
}

DEFAULTS = {
    "task": {"kind": "synth_moons", "count": 400, "noise": 0.1, "seed": 0},
    "model": {"sizes": [2, 16, 16, 2], "activation": "relu", "head": "softmax_ce", "output_activation": "identity"},
    "train": {"epochs": 30, "lr": 0.1, "momentum": 0.0, "weight_decay": 0.0, "batch_size": 32},
    "run": {"seeds": [0], "out": "results", "metrics": ["loss", "accuracy"], "workers": 1},
    "probe": {"epsilon": 0.05, "p": math.inf, "n": None, "K": None, "alpha": None, "grouping": "layers",
              "batch_size": 32},
    "quantize": {"bits": [2, 4, 8, 16]},
    "eta": {"k": [3, 5, 20, 100], "samples": 100_000, "workers": 1},
    "bound": {"hessian": [1.0, 1.0], "gradient": [1.0, 0.0], "p": 2.0, "n": None, "epsilon": [0.1, 0.05, 0.025],
              "resolution": 1e-4},
}


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    source: str | None = None

    def section(self, name: str) -> dict:
        out = dict(DEFAULTS.get(name, {}))
        out.update(self.sections.get(name, {}))
        return out

    def has(self, name: str) -> bool:
        return name in self.sections

    @property
    def seeds(self) -> list[int]:
        return self.section("run")["seeds"]


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig(source=source)
    for name in cp.sections():
        if name.startswith("sweep."):
            method = name[len("sweep."):]
            if method not in METHODS:
                raise ConfigError(f"{source}: unknown sweep method [{name}]; expected one of {METHODS}")
            allowed = METHOD_PARAMS[method]
            grid = {}
            for key, raw in cp[name].items():
                if key not in allowed:
                    raise ConfigError(f"{source}: [{name}] has unknown key {key!r}; allowed: {', '.join(allowed)}")
                try:
                    grid[key] = _list(_SWEEP_TYPES[key])(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{name}] {key} = {raw!r}: {exc}") from None
            cfg.sweep[method] = grid
            continue
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
        values = {}
        for key, raw in cp[name].items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"{source}: [{name}] has unknown key {key!r}")
            try:
                values[key] = SCHEMA[name][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{name}] {key} = {raw!r}: {exc}") from None
        cfg.sections[name] = values
    if not cfg.seeds:
        raise ConfigError(f"{source}: at least one seed is required")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))
