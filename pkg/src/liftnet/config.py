"""Run configuration: a flat, typed ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment and blank lines are
ignored.  Every key must name a field of :class:`RunConfig`, and values are
converted to the field's type.  Booleans are ``true``/``false``; strings are
written bare.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .prox import parse_activation


class ConfigError(ValueError):
    pass


TASKS = ("train", "invert", "bench", "data")


@dataclass(frozen=True)
class RunConfig:
    task: str = "train"
    seed: int = 0
    precision: int = 64
    # dataset
    data_source: str = "synth"
    data_images: str = ""
    data_labels: str = ""
    data_count: int = 200
    data_val_count: int = 50
    data_size: int = 16
    # degradation
    degrade: str = "noise"
    noise_sigma: float = 0.15
    blur_size: int = 5
    blur_sigma: float = 1.0
    inpaint_drop: float = 0.3
    # architecture
    hidden: int = 64
    layers: int = 3
    activation: str = "soft_shrink:0.2"
    init_scale: float = 1.0
    # training
    strategy: str = "bregman"
    mu: float = 5e-3
    variant: str = "adam"
    lr: float = 1e-3
    lr_aux: float = 1e-3
    momentum: float = 0.9
    p1: float = 0.9
    p2: float = 0.999
    eps: float = 1e-8
    aux_init: str = "replicate"
    steps: int = 2000
    record_every: int = 100
    image_every: int = 0
    image_count: int = 4
    record_wall_time: bool = False
    # inversion
    checkpoint: str = ""
    invert_noise: float = 0.1
    invert_alpha: float = 7e-2
    invert_count: int = 5
    tau_x: float = 0.0
    tau_z: float = 0.0
    pdhg_iters: int = 1000
    pdhg_tol: float = 1e-5
    outer_iters: int = 500
    # benchmark
    bench_layers: str = "1,2,4,8,16,32,64,128"
    bench_repeat: int = 5
    bench_width: int = 64
    bench_batch: int = 64

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# Published experiment constants restored by --paper-scale
PAPER_SCALE = {
    "data_count": 5000,
    "data_val_count": 500,
    "data_size": 28,
    "hidden": 784,
    "layers": 7,
    "steps": 50000,
    "lr": 8e-4,
    "lr_aux": 8e-4,
}


def _positive(cfg, *names):
    for n in names:
        if not getattr(cfg, n) > 0:
            raise ConfigError(f"{n} must be positive")


def _nonnegative(cfg, *names):
    for n in names:
        if getattr(cfg, n) < 0:
            raise ConfigError(f"{n} must be nonnegative")


def _choice(cfg, name, options):
    if getattr(cfg, name) not in options:
        raise ConfigError(f"{name} must be one of {', '.join(options)}")


def validate(cfg: RunConfig):
    """Raise ``ConfigError`` for any out-of-range value."""
    _choice(cfg, "task", TASKS)
    _choice(cfg, "data_source", ("synth", "mnist"))
    _choice(cfg, "degrade", ("noise", "blur", "inpaint"))
    _choice(cfg, "strategy", ("bregman", "conventional"))
    _choice(cfg, "variant", ("plain", "nesterov", "heavyball", "adam"))
    _choice(cfg, "aux_init", ("replicate", "forward", "gaussian"))
    if cfg.precision not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    _positive(cfg, "data_size", "hidden", "layers", "mu", "lr", "lr_aux", "eps", "blur_size",
              "blur_sigma", "invert_alpha", "bench_repeat", "bench_width", "bench_batch",
              "record_every")
    _nonnegative(cfg, "data_count", "data_val_count", "noise_sigma", "steps", "image_every", "image_count",
                 "invert_noise", "invert_count", "tau_x", "tau_z", "pdhg_iters", "pdhg_tol", "outer_iters")
    if cfg.blur_size % 2 == 0:
        raise ConfigError("blur_size must be odd")
    if not 0 < cfg.inpaint_drop < 1:
        raise ConfigError("inpaint_drop must lie in (0, 1)")
    if not (0 <= cfg.p1 < 1 and 0 <= cfg.p2 < 1 and 0 <= cfg.momentum < 1):
        raise ConfigError("p1, p2 and momentum must lie in [0, 1)")
    if cfg.data_source == "mnist" and not cfg.data_images:
        raise ConfigError("data_images is required for the mnist source")
    try:
        parse_activation(cfg.activation)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid activation {cfg.activation!r}") from exc
    try:
        counts = bench_layer_counts(cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid bench_layers {cfg.bench_layers!r}") from exc
    if not counts or min(counts) < 1:
        raise ConfigError("bench_layers must list positive layer counts")


def bench_layer_counts(cfg: RunConfig) -> list[int]:
    return [int(t) for t in cfg.bench_layers.split(",") if t.strip()]


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from exc
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> dict:
    """Typed ``{key: value}`` from config text; unknown or repeated keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _convert(key, value)
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Every field, defaults included, in declaration order."""
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def build_config(values: dict, paper_scale: bool = False) -> RunConfig:
    """Defaults, then the published constants if requested, then ``values``."""
    base = dict(PAPER_SCALE) if paper_scale else {}
    base.update(values)
    try:
        return RunConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, paper_scale: bool = False, **overrides) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values, paper_scale)
