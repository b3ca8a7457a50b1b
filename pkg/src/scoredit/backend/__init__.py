from scoredit.backend.analytic import (
    AnalyticBackend,
    GmmComponent,
    GmmWorld,
    Region,
    demo_world,
    gmm_attention,
    gmm_predict,
    world_from_json,
    world_to_json,
)
from scoredit.backend.base import (
    AttentionSpec,
    BackendError,
    BackendHandshake,
    Capabilities,
    DenoiserBackend,
    RemoteBackendError,
    TransportError,
)
from scoredit.backend.remote import RemoteBackend
from scoredit.backend.wire import PROTOCOL_VERSION, ProtocolError, decode_tensor, encode_tensor

__all__ = [
    "AnalyticBackend",
    "AttentionSpec",
    "BackendError",
    "BackendHandshake",
    "Capabilities",
    "DenoiserBackend",
    "GmmComponent",
    "GmmWorld",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "Region",
    "RemoteBackend",
    "RemoteBackendError",
    "TransportError",
    "decode_tensor",
    "demo_world",
    "encode_tensor",
    "gmm_attention",
    "gmm_predict",
    "world_from_json",
    "world_to_json",
]
