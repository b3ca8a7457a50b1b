"""HTTP client for a denoiser service speaking the wire protocol.

Endpoints: GET /handshake; POST /encode, /decode, /predict, /tokenize,
/embed_text, /embed_image, and /session (source-latent registration for
modes that noise it server-side). JSON bodies, UTF-8, tensors encoded per
:mod:`scoredit.backend.wire`. Transport failures are retried once; protocol
violations and backend-reported errors are surfaced as distinct types and
never retried.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np
import requests

from scoredit.attnmask import AttentionBundle, AttentionError
from scoredit.backend.base import (
    AttentionSpec,
    BackendHandshake,
    Capabilities,
    DenoiserBackend,
    RemoteBackendError,
    TransportError,
)
from scoredit.backend.wire import (
    PROTOCOL_VERSION,
    ProtocolError,
    decode_grid,
    decode_tensor,
    encode_grid,
    encode_tensor,
)
from scoredit.core import ConfigError, GridTensor, LossMode, NoiseSchedule
from scoredit.grad import NoisePredictionPair
from scoredit.promptdiff import TokenSpan


class RemoteBackend(DenoiserBackend):
    def __init__(self, base_url: str, timeout: float = 300.0, retries: int = 1):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._http = requests.Session()
        self._session_token: str | None = None
        self._handshake: BackendHandshake | None = None

    def clone(self) -> "RemoteBackend":
        return RemoteBackend(self.base_url, timeout=self.timeout, retries=self.retries)

    # -- transport -----------------------------------------------------------

    def _request(self, method: str, path: str, payload: dict | None = None) -> Any:
        url = f"{self.base_url}{path}"
        headers = {}
        if self._session_token is not None:
            headers["X-Session"] = self._session_token
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._http.request(
                    method, url, json=payload, headers=headers, timeout=self.timeout
                )
                break
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
        else:
            raise TransportError(f"{method} {url} failed: {last_exc}")
        if resp.status_code >= 400:
            self._raise_backend_error(resp)
        try:
            return resp.json()
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"{path}: response is not valid JSON: {exc}") from None

    @staticmethod
    def _raise_backend_error(resp: requests.Response) -> None:
        try:
            err = resp.json()["error"]
            raise RemoteBackendError(str(err["code"]), str(err["message"]))
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ProtocolError(
                f"backend returned status {resp.status_code} without an error payload"
            ) from None

    # -- protocol surface ------------------------------------------------------

    def handshake(self) -> BackendHandshake:
        doc = self._request("GET", "/handshake")
        try:
            protocol = str(doc["protocol"])
            if protocol != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"protocol mismatch: service speaks {protocol!r}, "
                    f"client speaks {PROTOCOL_VERSION!r}"
                )
            shape = tuple(int(d) for d in doc["latent_shape"])
            if len(shape) != 3:
                raise ProtocolError(f"latent_shape must have 3 dims, got {shape}")
            schedule = NoiseSchedule(np.asarray(doc["schedule"], dtype=np.float64))
            attn = doc["attention"]
            caps = doc.get("capabilities", {})
            hs = BackendHandshake(
                latent_shape=shape,  # type: ignore[arg-type]
                schedule=schedule,
                attention=AttentionSpec(
                    self_resolution=int(attn["self_resolution"]),
                    cross_resolution=int(attn["cross_resolution"]),
                    self_layers=int(attn.get("self_layers", 1)),
                    cross_layers=int(attn.get("cross_layers", 1)),
                ),
                capabilities=Capabilities(
                    encode=bool(caps.get("encode", True)),
                    decode=bool(caps.get("decode", True)),
                    attention=bool(caps.get("attention", True)),
                    embeddings=bool(caps.get("embeddings", True)),
                    tokenize=bool(caps.get("tokenize", True)),
                ),
                protocol=protocol,
            )
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            if isinstance(exc, ProtocolError):
                raise
            raise ProtocolError(f"malformed handshake: {exc}") from None
        self._handshake = hs
        return hs

    def _latent_shape(self) -> tuple[int, int, int]:
        if self._handshake is None:
            self.handshake()
        assert self._handshake is not None
        return self._handshake.latent_shape

    def begin_session(self, z_src: GridTensor) -> None:
        doc = self._request("POST", "/session", {"z_src": encode_grid(z_src)})
        try:
            self._session_token = str(doc["session"])
        except (KeyError, TypeError):
            raise ProtocolError("session response missing token") from None

    def encode(self, image: np.ndarray) -> GridTensor:
        payload = {"image": encode_tensor(np.asarray(image, dtype=np.float32) / 255.0)}
        doc = self._request("POST", "/encode", payload)
        return decode_grid(_field(doc, "latent"), expect_shape=self._latent_shape())

    def decode(self, latent: GridTensor) -> np.ndarray:
        doc = self._request("POST", "/decode", {"latent": encode_grid(latent)})
        img = decode_tensor(_field(doc, "image"))
        if img.ndim != 3 or img.shape[2] != 3:
            raise ProtocolError(f"decoded image has shape {img.shape}, expected (H, W, 3)")
        return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    def predict(
        self,
        z_t: GridTensor,
        t: int,
        y_tgt: str,
        y_src: str,
        omega: float = 0.0,
        want_attention: bool = False,
        mode: LossMode = LossMode.SBP,
        eps: GridTensor | None = None,
    ) -> tuple[NoisePredictionPair, AttentionBundle | None]:
        payload: dict[str, Any] = {
            "z_t": encode_grid(z_t),
            "t": int(t),
            "y_tgt": y_tgt,
            "y_src": y_src,
            "omega": float(omega),
            "want_attention": bool(want_attention),
            "mode": mode.value,
        }
        if eps is not None:
            payload["eps"] = encode_grid(eps)
        doc = self._request("POST", "/predict", payload)
        shape = self._latent_shape()
        pair = NoisePredictionPair(
            decode_grid(_field(doc, "eps_target"), expect_shape=shape),
            decode_grid(_field(doc, "eps_source"), expect_shape=shape),
        )
        bundle = None
        if "attention" in doc and doc["attention"] is not None:
            bundle = self._decode_attention(doc["attention"])
        return pair, bundle

    def _decode_attention(self, doc: Any) -> AttentionBundle:
        try:
            self_maps = [decode_tensor(m) for m in doc["self"]]
            cross_maps = {
                int(tok): [decode_tensor(v) for v in layers]
                for tok, layers in doc["cross"].items()
            }
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ProtocolError):
                raise
            raise ProtocolError(f"malformed attention payload: {exc}") from None
        try:
            return AttentionBundle.build(self_maps, cross_maps)
        except AttentionError as exc:
            raise ProtocolError(f"invalid attention maps: {exc}") from None

    def tokenize(self, text: str) -> list[TokenSpan]:
        doc = self._request("POST", "/tokenize", {"text": text})
        try:
            return [
                TokenSpan(str(tok["text"]), int(tok["start"]), int(tok["end"]))
                for tok in doc["tokens"]
            ]
        except (KeyError, TypeError, ValueError):
            raise ProtocolError("malformed tokenize response") from None

    def embed_text(self, text: str) -> np.ndarray:
        doc = self._request("POST", "/embed_text", {"text": text})
        return decode_tensor(_field(doc, "embedding")).reshape(-1)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        payload = {"image": encode_tensor(np.asarray(image, dtype=np.float32) / 255.0)}
        doc = self._request("POST", "/embed_image", payload)
        return decode_tensor(_field(doc, "embedding")).reshape(-1)


def _field(doc: Any, name: str) -> Any:
    try:
        return doc[name]
    except (KeyError, TypeError):
        raise ProtocolError(f"response missing field {name!r}") from None
