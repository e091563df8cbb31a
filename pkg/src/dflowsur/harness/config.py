"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment.  Strategy parameters use
dotted keys (``energy.t_c``) and may hold comma-separated lists, in which case
one report row is produced per combination.  Relative paths are resolved
against the directory of the config file.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import ConfigurationError

STRATEGIES = ("uncond", "conditional", "energy", "dflow")
EVALUATORS = ("oracle", "surrogate")
DIAGNOSTICS = ("alignment", "uq", "gap")
OUTPUT_ENV = "DFLOWSUR_OUTPUT"

# strategy -> ordered (parameter, caster, default list)
STRATEGY_PARAMS = {
    "uncond": (("T", int, [200]),),
    "conditional": (("T", int, [200]),),
    "energy": (("lam", float, [10.0]), ("t_c", float, [0.0]), ("T", int, [1000])),
    "dflow": (("T", int, [50]), ("K", int, [200]), ("tau", float, [0.1]), ("tol", float, [1e-8])),
}
PATH_KEYS = ("model", "conditional_model", "surrogate", "dataset", "output")


@dataclass
class ExperimentConfig:
    strategy: list = field(default_factory=lambda: ["dflow"])
    n: int = 20
    seed: int = 0
    evaluator: str = "oracle"
    target: float = 0.7
    alpha_deg: float = 2.0
    desired_loss: float = 1e-4
    workers: int = 1
    diagnostics: list = field(default_factory=list)
    uq_steps: int = 12
    model: str = None
    conditional_model: str = None
    surrogate: str = None
    dataset: str = None
    output: str = "results"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.strategy:
            raise ConfigurationError("no strategy configured")
        for s in self.strategy:
            if s not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
        if self.evaluator not in EVALUATORS:
            raise ConfigurationError(f"unknown evaluator {self.evaluator!r}; choose from {EVALUATORS}")
        for d in self.diagnostics:
            if d not in DIAGNOSTICS:
                raise ConfigurationError(f"unknown diagnostic {d!r}; choose from {DIAGNOSTICS}")
        if self.n < 1:
            raise ConfigurationError("batch size n must be at least 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if not np.isfinite(self.target):
            raise ConfigurationError("target must be finite")
        for key, values in self.params.items():
            strategy, _, name = key.partition(".")
            known = dict((p, c) for p, c, _ in STRATEGY_PARAMS.get(strategy, ()))
            if name not in known:
                raise ConfigurationError(f"unknown strategy parameter {key!r}")
            if not values:
                raise ConfigurationError(f"{key} has no values")

    def values(self, strategy, name):
        for p, _, default in STRATEGY_PARAMS[strategy]:
            if p == name:
                return self.params.get(f"{strategy}.{name}", default)
        raise ConfigurationError(f"{strategy} has no parameter {name!r}")

    def runs(self):
        """Expand strategies into ``(strategy, {param: value})`` in a stable order."""
        out = []
        for s in self.strategy:
            names = [p for p, _, _ in STRATEGY_PARAMS[s]]
            grids = [self.values(s, p) for p in names]
            for combo in itertools.product(*grids):
                out.append((s, dict(zip(names, combo))))
        return out

    def output_dir(self):
        """Output directory; the environment variable wins over the file."""
        return Path(os.environ.get(OUTPUT_ENV) or self.output)


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _cast(key, caster, raw):
    try:
        if caster is int:
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        return caster(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {caster.__name__}") from None


_SCALARS = {
    "n": int,
    "seed": int,
    "workers": int,
    "uq_steps": int,
    "target": float,
    "alpha_deg": float,
    "desired_loss": float,
    "evaluator": str,
}


def parse_pairs(pairs, base_dir=None):
    """Turn ``{key: raw string}`` into :class:`ExperimentConfig` keyword arguments."""
    kw = {"params": {}}
    for key, raw in pairs.items():
        if key == "strategy":
            kw["strategy"] = _split(raw)
        elif key == "diagnostics":
            kw["diagnostics"] = [] if raw.strip() in ("", "none") else _split(raw)
        elif key in _SCALARS:
            kw[key] = _cast(key, _SCALARS[key], raw.strip())
        elif key in PATH_KEYS:
            p = Path(raw.strip())
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            kw[key] = str(p)
        elif "." in key:
            strategy, _, name = key.partition(".")
            casters = dict((p, c) for p, c, _ in STRATEGY_PARAMS.get(strategy, ()))
            if name not in casters:
                raise ConfigurationError(f"unknown strategy parameter {key!r}")
            kw["params"][key] = [_cast(key, casters[name], v) for v in _split(raw)]
        else:
            raise ConfigurationError(f"unknown configuration key {key!r}")
    return kw


def read_pairs(lines, source="<config>"):
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        pairs[key] = value
    return pairs


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    pairs, base = {}, None
    if path is not None:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            pairs = read_pairs(fh, str(path))
        base = path.parent
    kw = parse_pairs(pairs, base)
    extra = parse_pairs(read_pairs(overrides, "<override>"))
    params = {**kw.pop("params"), **extra.pop("params")}
    kw.update(extra)
    return ExperimentConfig(params=params, **kw)


def dump_config(config):
    """Inverse of :func:`load_config` (one key per line, stable order).

    Paths are written absolute so the dump reloads identically from any
    directory.
    """
    lines = [
        f"strategy = {', '.join(config.strategy)}",
        f"n = {config.n}",
        f"seed = {config.seed}",
        f"evaluator = {config.evaluator}",
        f"target = {config.target!r}",
        f"alpha_deg = {config.alpha_deg!r}",
        f"desired_loss = {config.desired_loss!r}",
        f"workers = {config.workers}",
        f"diagnostics = {', '.join(config.diagnostics) or 'none'}",
        f"uq_steps = {config.uq_steps}",
    ]
    for key in PATH_KEYS:
        value = getattr(config, key)
        if value is not None:
            lines.append(f"{key} = {Path(value).resolve()}")
    for key in sorted(config.params):
        lines.append(f"{key} = {', '.join(repr(v) for v in config.params[key])}")
    return "\n".join(lines) + "\n"
