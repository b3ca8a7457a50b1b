"""FastAPI application implementing the denoise-wire protocol.

One in-flight denoiser call at a time (requests queue on a lock); sessions
register a source latent for modes that noise it server-side and are keyed
by the X-Session request header. Errors use the protocol's
``{"error": {"code", "message"}}`` payload with a non-2xx status.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse

from sdservice import PROTOCOL_VERSION
from sdservice.backbones import Backbone, BackboneError
from sdservice.wire import WireError, decode_tensor, encode_tensor

MODES = ("sbp", "dds", "sds")


@dataclass
class ServiceConfig:
    backbone: str = "tiny"
    device: str = "cpu"
    self_resolution: int = 32
    cross_resolution: int = 16
    protocol: str = PROTOCOL_VERSION
    host: str = "127.0.0.1"
    port: int = 8799


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class SessionStore:
    sessions: dict[str, np.ndarray] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def create(self, z_src: np.ndarray) -> str:
        token = uuid.uuid4().hex
        with self.lock:
            self.sessions[token] = z_src
        return token

    def get(self, token: str | None) -> np.ndarray | None:
        if token is None:
            return None
        with self.lock:
            return self.sessions.get(token)


def create_app(backbone: Backbone, config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    if (backbone.self_resolution, backbone.cross_resolution) != (
        config.self_resolution,
        config.cross_resolution,
    ):
        raise BackboneError(
            f"configured capture resolutions ({config.self_resolution}, "
            f"{config.cross_resolution}) do not match the backbone's "
            f"({backbone.self_resolution}, {backbone.cross_resolution})"
        )

    app = FastAPI(title="sdservice", version=PROTOCOL_VERSION)
    sessions = SessionStore()
    predict_lock = threading.Lock()  # one denoiser call in flight per device

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    def bad_request(message: str, code: str = "bad_request") -> ServiceError:
        return ServiceError(400, code, message)

    def get_tensor(doc: dict, name: str, expect_shape=None) -> np.ndarray:
        if name not in doc:
            raise bad_request(f"missing field {name!r}")
        try:
            return decode_tensor(doc[name], expect_shape)
        except WireError as exc:
            raise bad_request(f"{name}: {exc}") from None

    def get_image(doc: dict) -> np.ndarray:
        img = get_tensor(doc, "image")
        size = backbone.image_size
        if img.ndim != 3 or img.shape != (size, size, 3):
            raise bad_request(
                f"expected an RGB image tensor of shape ({size}, {size}, 3), "
                f"got {tuple(img.shape)}"
            )
        return np.clip(img, 0.0, 1.0)

    async def parse_json(request: Request) -> dict[str, Any]:
        try:
            doc = await request.json()
        except Exception:
            raise bad_request("body is not valid JSON") from None
        if not isinstance(doc, dict):
            raise bad_request("body must be a JSON object")
        return doc

    @app.get("/handshake")
    def handshake():
        return {
            "protocol": config.protocol,
            "latent_shape": list(backbone.latent_shape),
            "schedule": [float(v) for v in backbone.schedule()],
            "attention": {
                "self_resolution": backbone.self_resolution,
                "cross_resolution": backbone.cross_resolution,
                "self_layers": backbone.self_layers,
                "cross_layers": backbone.cross_layers,
            },
            "capabilities": {
                "encode": True,
                "decode": True,
                "attention": True,
                "embeddings": True,
                "tokenize": True,
            },
        }

    @app.post("/session")
    async def session(request: Request):
        doc = await parse_json(request)
        z_src = get_tensor(doc, "z_src", expect_shape=backbone.latent_shape)
        return {"session": sessions.create(z_src)}

    @app.post("/encode")
    async def encode(request: Request):
        doc = await parse_json(request)
        image = get_image(doc)
        try:
            latent = backbone.encode(image)
        except BackboneError as exc:
            raise ServiceError(500, "model_failure", str(exc)) from None
        return {"latent": encode_tensor(latent)}

    @app.post("/decode")
    async def decode(request: Request):
        doc = await parse_json(request)
        latent = get_tensor(doc, "latent", expect_shape=backbone.latent_shape)
        try:
            image = backbone.decode(latent)
        except BackboneError as exc:
            raise ServiceError(500, "model_failure", str(exc)) from None
        return {"image": encode_tensor(image)}

    @app.post("/predict")
    async def predict(request: Request, x_session: str | None = Header(default=None)):
        doc = await parse_json(request)
        for name in ("t", "y_tgt", "y_src", "mode"):
            if name not in doc:
                raise bad_request(f"missing field {name!r}")
        mode = doc["mode"]
        if mode not in MODES:
            raise bad_request(f"mode must be one of {MODES}, got {mode!r}")
        t = doc["t"]
        if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t < 1000:
            raise bad_request(f"t must be an integer timestep in [0, 999], got {t!r}")
        z_t = get_tensor(doc, "z_t", expect_shape=backbone.latent_shape)
        omega = doc.get("omega", 0.0)
        if not isinstance(omega, (int, float)) or isinstance(omega, bool):
            raise bad_request("omega must be a number")
        want_attention = doc.get("want_attention", False)
        if not isinstance(want_attention, bool):
            raise bad_request("want_attention must be a boolean")
        eps = None
        if mode in ("dds", "sds"):
            eps = get_tensor(doc, "eps", expect_shape=backbone.latent_shape)
        z_src = sessions.get(x_session)
        if mode == "dds" and z_src is None:
            raise bad_request(
                "dds mode requires a source latent registered via /session "
                "and an X-Session header",
                code="missing_session",
            )
        try:
            with predict_lock:
                out = backbone.predict(
                    z_t, t, str(doc["y_tgt"]), str(doc["y_src"]),
                    float(omega), want_attention, mode, eps, z_src,
                )
        except BackboneError as exc:
            raise ServiceError(500, "model_failure", str(exc)) from None
        response: dict[str, Any] = {
            "eps_target": encode_tensor(out.eps_target),
            "eps_source": encode_tensor(out.eps_source),
        }
        if want_attention:
            response["attention"] = {
                "self": [encode_tensor(m.astype(np.float32)) for m in out.self_maps],
                "cross": {
                    str(tok): [encode_tensor(v.astype(np.float32)) for v in layers]
                    for tok, layers in out.cross_maps.items()
                },
            }
        return response

    @app.post("/tokenize")
    async def tokenize(request: Request):
        doc = await parse_json(request)
        if "text" not in doc or not isinstance(doc["text"], str):
            raise bad_request("missing string field 'text'")
        return {"tokens": backbone.tokenize(doc["text"])}

    @app.post("/embed_text")
    async def embed_text(request: Request):
        doc = await parse_json(request)
        if "text" not in doc or not isinstance(doc["text"], str):
            raise bad_request("missing string field 'text'")
        return {"embedding": encode_tensor(backbone.embed_text(doc["text"]))}

    @app.post("/embed_image")
    async def embed_image(request: Request):
        doc = await parse_json(request)
        image = get_image(doc)
        return {"embedding": encode_tensor(backbone.embed_image(image))}

    return app
