"""Run configuration: defaults, a flat ``key = value`` file format, validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

__all__ = ["RunConfig", "ConfigError", "resolve_threads"]


class ConfigError(ValueError):
    """Invalid configuration key, value or combination."""


KINDS = ("udf", "sdf")
HEADS = ("default", "abs", "relu", "identity")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of an encode/decode run.

    ``sigma`` of None picks the per-kind default (0.01 SDF, 0.025 UDF).
    Seeds of None are drawn from OS entropy by the command that needs them.
    ``attr_width`` of None reuses ``width``.
    """

    kind: str = "sdf"
    width: int = 32
    num_hidden: int = 2
    lr: float = 1e-4
    epochs: int = 500
    batch_size: int = 10_000
    lambda_l1: float = 1e-8
    lambda_a: float = 1e-3
    sigma: Optional[float] = None
    d_star: float = 0.1
    bitwidth: int = 8
    omega0: float = 30.0
    levels: int = 16
    attr_levels: int = 8
    sigma_p: float = 1.4
    r_mc: int = 256
    widths: tuple = (16, 24, 32, 48, 64, 96)
    param_seed: Optional[int] = None
    data_seed: Optional[int] = None
    joint: bool = False
    head: str = "default"
    truncate: bool = True
    m_total: int = 250_000
    m_attr: int = 250_000
    n_points: int = 100_000
    attr_width: Optional[int] = None
    attributes: bool = True
    qat_epochs: int = 50
    qat_lr: float = 1e-7
    threads: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        positive = ("width", "epochs", "batch_size", "r_mc", "m_total", "n_points", "levels",
                    "attr_levels", "num_hidden")
        for name in positive:
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r_mc < 8:
            raise ConfigError("r_mc must be at least 8")
        if self.m_total < 10:
            raise ConfigError("m_total must be at least 10")
        if not 2 <= self.bitwidth <= 16:
            raise ConfigError(f"bitwidth must lie in [2, 16], got {self.bitwidth}")
        for name in ("lr", "lambda_l1", "lambda_a", "qat_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.d_star > 0:
            raise ConfigError("d_star must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.sigma_p <= 0 or self.omega0 <= 0:
            raise ConfigError("sigma_p and omega0 must be positive")
        if any(w < 1 for w in self.widths) or not self.widths:
            raise ConfigError("widths must be a nonempty list of positive integers")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.qat_epochs < 0 or self.m_attr < 0:
            raise ConfigError("qat_epochs and m_attr must be non-negative")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -------------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Parse ``key = value`` lines on top of ``base`` (defaults if None)."""
        return (base or cls()).replace(**parse_pairs(text))

    @classmethod
    def from_file(cls, path: Union[str, Path], base: Optional["RunConfig"] = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        return cls.loads(text, base)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_value(key: str, raw: str):
    """Convert a raw string to the type of the config field ``key``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if t.startswith("Optional"):
            if raw.lower() in ("none", ""):
                return None
            t = t[len("Optional["):-1]
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            return _parse_bool(raw)
        if t == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def resolve_threads(flag: Optional[int]) -> int:
    """--threads, else NF3D_THREADS, else the CPU count."""
    if flag is not None:
        return flag
    env = os.environ.get("NF3D_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"NF3D_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("NF3D_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1
