"""Tensor and payload encoding for the denoiser wire protocol.

Tensors travel as ``{"shape": [...], "dtype": "f32", "data": <base64>}``
where the payload is raw little-endian row-major float32 bytes. Decoding
validates shape, length, and finiteness before any state is touched.
"""

from __future__ import annotations

import base64
import binascii
import math
from typing import Any, Mapping

import numpy as np

from scoredit.core import GridTensor

PROTOCOL_VERSION = "denoise-wire/1"


class ProtocolError(ValueError):
    """Malformed wire payload or protocol-version mismatch."""


def encode_tensor(arr: np.ndarray) -> dict[str, Any]:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(data.shape),
        "dtype": "f32",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def encode_grid(t: GridTensor) -> dict[str, Any]:
    return encode_tensor(t.data)


def decode_tensor(obj: Any, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    if not isinstance(obj, Mapping):
        raise ProtocolError(f"tensor payload must be an object, got {type(obj).__name__}")
    if obj.get("dtype") != "f32":
        raise ProtocolError(f"unsupported dtype {obj.get('dtype')!r}")
    shape = obj.get("shape")
    if (
        not isinstance(shape, (list, tuple))
        or not shape
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
    ):
        raise ProtocolError(f"malformed shape {shape!r}")
    if expect_shape is not None and tuple(shape) != tuple(expect_shape):
        raise ProtocolError(f"shape {tuple(shape)} does not match expected {expect_shape}")
    data = obj.get("data")
    if not isinstance(data, str):
        raise ProtocolError("tensor data must be a base64 string")
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ProtocolError(f"invalid base64 payload: {exc}") from None
    count = math.prod(shape)
    if len(raw) != count * 4:
        raise ProtocolError(f"payload holds {len(raw)} bytes, expected {count * 4}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise ProtocolError("tensor payload contains non-finite values")
    return arr.astype(np.float32, copy=True)


def decode_grid(obj: Any, expect_shape: tuple[int, int, int] | None = None) -> GridTensor:
    arr = decode_tensor(obj, expect_shape)
    if arr.ndim != 3:
        raise ProtocolError(f"expected a rank-3 tensor, got shape {arr.shape}")
    return GridTensor(arr)
