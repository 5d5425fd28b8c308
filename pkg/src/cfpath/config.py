"""Line-oriented ``key = value`` config files.

Values are typed from the target dataclass's field defaults. ``#`` starts
a comment. Unknown and duplicate keys are rejected with their line number.
"""
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import StageEncoderConfig
from .errors import ParseError
from .sampling import SamplingPlan, Strategy, max_counts

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    base_lr: float = 1.5e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    strategy: str = "baseline"
    s_fixed: int = 5
    t_fixed: int = 50
    activation_epoch: int = 5
    s_start: int = 30
    s_step: int = 5
    s_min: int = 1
    t_step: int = 20
    tau: float = 0.2
    m: float = 0.99
    momentum_schedule: bool = False
    symmetrize: bool = True
    originals: str = "third_pass"
    seed: int = 0
    data_fraction: float = 1.0
    ssl_patches_per_slide: int = 0
    input_size: int = 64
    width: float = 0.125
    depths: tuple = (1, 1, 2, 1)
    head_dim: int = 12
    mlp_ratio: float = 2.0
    window: int = 8
    proj_dim: int = 256
    proj_hidden: int = 256

    @property
    def plan(self):
        return SamplingPlan(Strategy.parse(self.strategy), self.s_fixed, self.t_fixed,
                            self.activation_epoch, self.s_start, self.s_step, self.s_min, self.t_step)

    @property
    def encoder_config(self):
        return StageEncoderConfig(input_size=self.input_size, width=self.width, depths=self.depths,
                                  head_dim=self.head_dim, mlp_ratio=self.mlp_ratio, window=self.window)

    def replace(self, **changes):
        cfg = dataclasses.replace(self, **changes)
        validate_train_config(cfg)
        return cfg

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate_train_config(cfg):
    """Raise ValueError naming the offending field."""
    checks = [
        ("epochs", cfg.epochs >= 1, "must be >= 1"),
        ("warmup_epochs", 0 <= cfg.warmup_epochs < cfg.epochs, "must satisfy 0 <= warmup_epochs < epochs"),
        ("batch_size", cfg.batch_size >= 2, "must be >= 2"),
        ("base_lr", cfg.base_lr > 0, "must be positive"),
        ("tau", cfg.tau > 0, "must be positive"),
        ("m", 0 <= cfg.m < 1, "must be in [0, 1)"),
        ("data_fraction", 0 < cfg.data_fraction <= 1, "must be in (0, 1]"),
        ("originals", cfg.originals in ("third_pass", "view_a"), "must be third_pass or view_a"),
        ("ssl_patches_per_slide", cfg.ssl_patches_per_slide >= 0, "must be >= 0"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise _FieldError(name, f"{name} {msg}")
    try:
        plan = cfg.plan
        cfg.encoder_config
    except ValueError as exc:
        raise _FieldError("strategy", str(exc)) from None
    need = max_counts(plan, cfg.epochs)
    if need > cfg.batch_size - 1:
        raise _FieldError(
            "batch_size",
            f"{plan.strategy.value} requests up to {need} sampled keys per anchor "
            f"but batch_size {cfg.batch_size} offers only {cfg.batch_size - 1}")


class _FieldError(ValueError):
    def __init__(self, field_name, message):
        self.field_name = field_name
        super().__init__(message)


def _convert(raw, default, key):
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float):
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(f"{key}: must be finite")
        return value
    if isinstance(default, tuple):
        items = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(float(p)) if kind is int else kind(p) for p in items)
    return raw.strip().strip('"').strip("'")


def read_kv(path_or_text, cls, *, text=False):
    """Parse into ``(values, lines)``: field -> typed value, field -> line number."""
    if text:
        content, path = path_or_text, None
    else:
        path = Path(path_or_text)
        try:
            content = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc}", path=path) from exc
    defaults = {f.name: _field_default(f) for f in fields(cls)}
    values, lines = {}, {}
    for n, raw in enumerate(content.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", n, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ParseError(f"unknown key {key!r}", n, path)
        if key in values:
            raise ParseError(f"duplicate key {key!r} (first on line {lines[key]})", n, path)
        try:
            values[key] = _convert(value, defaults[key], key)
        except ValueError as exc:
            raise ParseError(str(exc), n, path) from None
        lines[key] = n
    return values, lines


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return ""


def parse_config(path_or_text, cls=TrainConfig, *, text=False, validate=None):
    """Build a validated ``cls`` from a config file; empty input gives the defaults."""
    values, lines = read_kv(path_or_text, cls, text=text)
    path = None if text else Path(path_or_text)
    try:
        cfg = cls(**values)
        if validate is None and cls is TrainConfig:
            validate = validate_train_config
        if validate is not None:
            validate(cfg)
    except _FieldError as exc:
        raise ParseError(str(exc), lines.get(exc.field_name), path) from None
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None
    return cfg


def format_config(cfg):
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
