"""Tensor payload codec: base64 of little-endian row-major float32 bytes."""

from __future__ import annotations

import base64
import binascii
import math
from typing import Any

import numpy as np


class WireError(ValueError):
    """Malformed tensor payload."""


def encode_tensor(arr: np.ndarray) -> dict[str, Any]:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(data.shape),
        "dtype": "f32",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_tensor(obj: Any, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    if not isinstance(obj, dict):
        raise WireError("tensor payload must be an object")
    if obj.get("dtype") != "f32":
        raise WireError(f"unsupported dtype {obj.get('dtype')!r}")
    shape = obj.get("shape")
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
    ):
        raise WireError(f"malformed shape {shape!r}")
    if expect_shape is not None and tuple(shape) != tuple(expect_shape):
        raise WireError(f"shape {tuple(shape)} does not match expected {tuple(expect_shape)}")
    data = obj.get("data")
    if not isinstance(data, str):
        raise WireError("tensor data must be a base64 string")
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise WireError(f"invalid base64 payload: {exc}") from None
    count = math.prod(shape)
    if len(raw) != count * 4:
        raise WireError(f"payload holds {len(raw)} bytes, expected {count * 4}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise WireError("tensor payload contains non-finite values")
    return arr.astype(np.float32, copy=True)
