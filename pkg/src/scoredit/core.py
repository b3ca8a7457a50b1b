"""Shared value types, configuration, noise schedule, and seeded randomness.

Everything downstream (gradients, masking, the optimization loop) works on
these types. Value types are immutable after construction; ``RngStream`` is
the single mutable object and must stay single-owner.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import numpy as np

SCHEDULE_LEN = 1000


class ConfigError(ValueError):
    """Invalid configuration value, range, or config-file syntax."""


class ShapeMismatchError(ValueError):
    """Tensor operands do not have compatible shapes."""


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridTensor:
    """Dense rank-3 float32 array (channels, height, width).

    Carrier for latents, noise draws, gradients, and decoded images. The
    wrapped array is treated as owned and must not be mutated afterwards.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected rank-3 tensor, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeMismatchError(f"empty tensor shape {arr.shape}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_external(cls, data: Any) -> "GridTensor":
        """Construct from untrusted input, rejecting NaN/Inf entries."""
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected rank-3 tensor, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains non-finite values")
        return cls(arr)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "GridTensor":
        return cls(np.zeros(shape, dtype=np.float32))

    @classmethod
    def full(cls, shape: tuple[int, int, int], value: float) -> "GridTensor":
        return cls(np.full(shape, value, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def _check_shape(self, other: "GridTensor") -> None:
        if self.shape != other.shape:
            raise ShapeMismatchError(f"shape mismatch: {self.shape} vs {other.shape}")

    def add(self, other: "GridTensor") -> "GridTensor":
        self._check_shape(other)
        return GridTensor(self.data + other.data)

    def sub(self, other: "GridTensor") -> "GridTensor":
        self._check_shape(other)
        return GridTensor(self.data - other.data)

    def scale(self, c: float) -> "GridTensor":
        return GridTensor(self.data * np.float32(c))

    def mul(self, other: "GridTensor") -> "GridTensor":
        self._check_shape(other)
        return GridTensor(self.data * other.data)


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention factors alpha_bar[t] for t in [0, 999]."""

    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.shape != (SCHEDULE_LEN,):
            raise ConfigError(f"schedule must have {SCHEDULE_LEN} entries, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ConfigError("schedule contains non-finite values")
        if arr[0] > 1.0 or arr[-1] <= 0.0:
            raise ConfigError("schedule must satisfy alpha_bar[0] <= 1 and alpha_bar[999] > 0")
        if not (np.diff(arr) < 0).all():
            raise ConfigError("schedule must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", arr)

    def at(self, t: int) -> float:
        if not 0 <= t < SCHEDULE_LEN:
            raise ConfigError(f"timestep {t} outside [0, {SCHEDULE_LEN - 1}]")
        return float(self.alpha_bar[t])


def default_schedule() -> NoiseSchedule:
    """Scaled-linear variance schedule over 1000 steps.

    beta_t interpolates sqrt(beta) linearly between sqrt(0.00085) and
    sqrt(0.012); alpha_bar is the running product of (1 - beta_t). Backends
    override this via the handshake; the default only serves the analytic
    backend.
    """
    sqrt_beta = np.linspace(math.sqrt(0.00085), math.sqrt(0.012), SCHEDULE_LEN, dtype=np.float64)
    beta = sqrt_beta**2
    return NoiseSchedule(np.cumprod(1.0 - beta))


# ---------------------------------------------------------------------------
# Engine configuration
# ---------------------------------------------------------------------------


class LossMode(enum.Enum):
    SBP = "sbp"
    DDS = "dds"
    SDS = "sds"


@dataclass(frozen=True)
class EngineConfig:
    """All hyperparameters of the optimization loop and its ablation toggles."""

    steps: int = 300
    lr: float = 2000.0
    lambda_: float = 0.02
    ema_alpha: float = 0.1
    eta0: float = 0.01
    eta_decay: float = 0.99
    gamma_lo: float = 0.01
    gamma_hi: float = 0.15
    gamma_span: float = 5.0
    t_min: int = 50
    t_max: int = 950
    cfg_omega: float = 0.0
    loss_mode: LossMode = LossMode.SBP
    max_resamples: int = 100
    seed: int = 0
    use_mask: bool = True
    use_ema: bool = True
    use_filter: bool = True
    use_normalize: bool = True
    use_anneal: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1]")
        if self.eta0 < 0.0:
            raise ConfigError("eta0 must be >= 0")
        if not 0.0 < self.eta_decay < 1.0:
            raise ConfigError("eta_decay must lie in (0, 1)")
        if self.gamma_lo > self.gamma_hi:
            raise ConfigError("gamma_lo must be <= gamma_hi")
        if not (0 <= self.t_min <= self.t_max <= SCHEDULE_LEN - 1):
            raise ConfigError("require 0 <= t_min <= t_max <= 999")
        if self.max_resamples < 1:
            raise ConfigError("max_resamples must be >= 1")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def effective_eta0(self) -> float:
        """eta0 with the filtering ablation folded in (off means threshold 0)."""
        return self.eta0 if self.use_filter else 0.0

    @property
    def effective_lambda(self) -> float:
        """lambda with the spatial-regularization ablation folded in."""
        return self.lambda_ if self.use_mask else 0.0

    def to_mapping(self) -> dict[str, Any]:
        """Flat key/value view using the external (config-file) key names."""
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, LossMode):
                value = value.value
            out[_external_key(f.name)] = value
        return out

    @classmethod
    def field_keys(cls) -> list[str]:
        return [_external_key(f.name) for f in dataclasses.fields(cls)]

    @classmethod
    def from_mappings(cls, *overrides: Mapping[str, Any]) -> "EngineConfig":
        """Build a config from layered overrides, later mappings winning.

        Keys use the external names (``lambda``, not ``lambda_``). Unknown
        keys raise; precedence is ``defaults < overrides[0] < overrides[1]``.
        """
        merged: dict[str, Any] = {}
        for layer in overrides:
            for key, value in layer.items():
                if key not in cls.field_keys():
                    raise ConfigError(f"unknown config key: {key!r}")
                merged[key] = value
        kwargs: dict[str, Any] = {}
        for f in dataclasses.fields(cls):
            key = _external_key(f.name)
            if key not in merged:
                continue
            kwargs[f.name] = _coerce_field(key, f.type, merged[key])
        return cls(**kwargs)


def _external_key(field_name: str) -> str:
    return field_name.rstrip("_")


def _coerce_field(key: str, annotation: str, value: Any) -> Any:
    if annotation == "LossMode":
        if isinstance(value, LossMode):
            return value
        try:
            return LossMode(str(value).lower())
        except ValueError:
            raise ConfigError(f"{key}: expected one of sbp/dds/sds, got {value!r}") from None
    if annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


# ---------------------------------------------------------------------------
# Config file (flat key = value document, TOML-compatible scalars)
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse a flat key-value document with TOML scalar syntax.

    Supports comments (#), bare keys, quoted strings, booleans, integers,
    and floats. Tables/arrays are rejected: the config surface is flat.
    """
    result: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            raise ConfigError(f"line {lineno}: tables are not supported in the flat config")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().strip('"')
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in result:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        result[key] = _parse_scalar(value.strip(), lineno)
    return result


def load_config_file(path: str) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


def _parse_scalar(token: str, lineno: int) -> Any:
    if not token:
        raise ConfigError(f"line {lineno}: missing value")
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        body = token[1:-1]
        if '"' in body:
            raise ConfigError(f"line {lineno}: malformed string")
        return body
    if token == "true":
        return True
    if token == "false":
        return False
    cleaned = token.replace("_", "")
    try:
        return int(cleaned, 0)
    except ValueError:
        pass
    try:
        return float(cleaned)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {token!r}") from None


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


class RngStream:
    """Seeded PCG64 stream with a fixed cross-platform draw order.

    Same seed gives the identical sequence of standard-normal tensors and
    uniform integers on every platform. Single-owner: never share one stream
    between concurrent runs.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        if not -(2**63) <= seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def standard_normal(self, shape: Iterable[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape), dtype=np.float32)

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return int(self._gen.integers(lo, hi + 1))


def sample_noise(rng: RngStream, shape: tuple[int, int, int]) -> GridTensor:
    """Draw a standard-normal tensor, advancing the stream deterministically."""
    if any(dim <= 0 for dim in shape):
        raise ShapeMismatchError(f"shape dimensions must be positive, got {shape}")
    return GridTensor(rng.standard_normal(shape))


def sample_timestep(rng: RngStream, t_min: int, t_max: int) -> int:
    """Draw a uniform integer timestep in [t_min, t_max] inclusive."""
    if not (0 <= t_min <= t_max <= SCHEDULE_LEN - 1):
        raise ConfigError(f"invalid timestep range [{t_min}, {t_max}]")
    return rng.integer(t_min, t_max)
