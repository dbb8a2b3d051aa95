"""Plain-text ``key=value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Iterable

from .errors import ContractViolation

RATIOS = {"1": Fraction(1), "1/2": Fraction(1, 2), "1/4": Fraction(1, 4), "1/8": Fraction(1, 8)}
VARIANTS = ("full", "no_sffm", "no_gmgm", "no_mgfm")


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _range(text: str) -> tuple:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or parts[0] > parts[1]:
        raise ValueError(f"expected 'lo,hi' or a single value, got {text!r}")
    return tuple(parts)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _channels(text: str) -> tuple:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 4:
        raise ValueError(f"channels needs 4 comma-separated ints, got {text!r}")
    return parts


def _ratio(text: str) -> Fraction:
    key = text.strip().replace(" ", "")
    if key not in RATIOS:
        raise ValueError(f"crop_ratio must be one of {', '.join(RATIOS)}")
    return RATIOS[key]


@dataclass
class Config:
    seed: int = 42
    image_size: int = 64
    channels: tuple = (32, 64, 128, 256)
    crop_ratio: Fraction = Fraction(1, 4)
    lr0: float = 4e-4
    weight_decay: float = 0.01
    batch: int = 4
    epochs: int = 50
    lambda_dice: float = 1.0
    label_smoothing: float = 0.05
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    data_dir: str = ""
    out_dir: str = "runs"
    degradation: str = "none"
    haze_t: tuple = (0.3, 0.7)
    haze_A: tuple = (0.8, 1.0)
    ll_gamma: tuple = (1.5, 2.5)
    ll_gain: tuple = (0.2, 0.5)
    ll_sigma: float = 0.02
    # extensions beyond the core key set
    n_scenes: int = 200
    density: float = 0.25
    variant: str = "full"
    augment: bool = True
    checkpoint: str = ""
    pred_dir: str = ""
    split: str = "test"
    kde_bandwidth: float = 0.02
    audit_seeds: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ContractViolation(msg)

        need(self.image_size > 0 and self.image_size % 32 == 0, "image_size must be a positive multiple of 32")
        need(len(self.channels) == 4 and min(self.channels) > 0, "channels must be 4 positive ints")
        need(self.crop_ratio in RATIOS.values(), "crop_ratio must be one of 1, 1/2, 1/4, 1/8")
        need(self.lr0 >= 0, "lr0 must be >= 0")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.batch >= 1 and self.epochs >= 0, "batch must be >= 1 and epochs >= 0")
        need(self.lambda_dice >= 0, "lambda_dice must be >= 0")
        need(0 <= self.label_smoothing <= 0.2, "label_smoothing must lie in [0, 0.2]")
        need(self.lookahead_k >= 1 and 0 < self.lookahead_alpha <= 1, "lookahead_k >= 1, lookahead_alpha in (0, 1]")
        need(self.degradation in ("none", "haze", "lowlight"), "degradation must be none, haze or lowlight")
        need(0 < self.haze_t[0] and self.haze_t[1] <= 1, "haze_t must lie in (0, 1]")
        need(0.6 <= self.haze_A[0] and self.haze_A[1] <= 1, "haze_A must lie in [0.6, 1]")
        need(self.ll_gamma[0] >= 1, "ll_gamma must be >= 1")
        need(0 < self.ll_gain[0] and self.ll_gain[1] <= 1, "ll_gain must lie in (0, 1]")
        need(self.ll_sigma >= 0, "ll_sigma must be >= 0")
        need(self.n_scenes >= 1, "n_scenes must be >= 1")
        need(0 < self.density <= 0.6, "density must lie in (0, 0.6]")
        need(self.variant in VARIANTS, f"variant must be one of {', '.join(VARIANTS)}")
        need(self.split in ("train", "val", "test"), "split must be train, val or test")
        need(self.kde_bandwidth > 0, "kde_bandwidth must be > 0")
        need(self.audit_seeds >= 1, "audit_seeds must be >= 1")

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


_PARSERS = {
    int: int, float: float, str: str, bool: _bool, tuple: _range, Fraction: _ratio,
}


def valid_keys() -> list:
    return [f.name for f in fields(Config)]


def _field_parser(name: str):
    if name == "channels":
        return _channels
    default = Config.__dataclass_fields__[name].default
    return _PARSERS[type(default)]


def _format(name: str, value) -> str:
    if name == "channels":
        return ",".join(str(c) for c in value)
    if name == "crop_ratio":
        return str(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return _fmt_float(value)
    if isinstance(value, tuple):
        return ",".join(_fmt_float(v) for v in value)
    return str(value)


def parse_pairs(pairs: Iterable[tuple], base: Config | None = None) -> Config:
    values = {} if base is None else {f.name: getattr(base, f.name) for f in fields(Config)}
    keys = set(valid_keys())
    for key, raw in pairs:
        if key not in keys:
            raise ContractViolation(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
        try:
            values[key] = _field_parser(key)(raw.strip())
        except ValueError as exc:
            raise ContractViolation(f"bad value for {key}: {exc}") from None
    return Config(**values)


def parse(text: str, base: Config | None = None) -> Config:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return parse_pairs(pairs, base)


def dump(cfg: Config) -> str:
    return "".join(f"{f.name}={_format(f.name, getattr(cfg, f.name))}\n" for f in fields(Config))


def load(path: str, base: Config | None = None) -> Config:
    with open(path) as fh:
        return parse(fh.read(), base)
