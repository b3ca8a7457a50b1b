"""Denoiser backend abstraction shared by in-process and remote backends."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np

from scoredit.attnmask import AttentionBundle
from scoredit.core import GridTensor, LossMode, NoiseSchedule
from scoredit.grad import NoisePredictionPair
from scoredit.promptdiff import TokenSpan


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Network-level failure; the only retryable category."""


class RemoteBackendError(BackendError):
    """Error payload reported by the backend service."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class AttentionSpec:
    self_resolution: int = 32
    cross_resolution: int = 16
    self_layers: int = 1
    cross_layers: int = 1


@dataclass(frozen=True)
class Capabilities:
    encode: bool = True
    decode: bool = True
    attention: bool = True
    embeddings: bool = True
    tokenize: bool = True


@dataclass(frozen=True)
class BackendHandshake:
    latent_shape: tuple[int, int, int]
    schedule: NoiseSchedule
    attention: AttentionSpec
    capabilities: Capabilities = field(default_factory=Capabilities)
    protocol: str = ""

    def __post_init__(self) -> None:
        _, h, w = self.latent_shape
        attn = self.attention
        if attn.self_resolution % attn.cross_resolution != 0:
            raise BackendError(
                f"self resolution {attn.self_resolution} is not a multiple of "
                f"cross resolution {attn.cross_resolution}"
            )
        if h % attn.self_resolution != 0 or w % attn.self_resolution != 0:
            raise BackendError(
                f"latent size {(h, w)} is not a multiple of the self resolution "
                f"{attn.self_resolution}"
            )


class DenoiserBackend(abc.ABC):
    """Operations a denoiser must provide to drive the optimization loop.

    ``predict`` must be deterministic for fixed inputs: all sampling happens
    engine-side and noise is passed in explicitly where a mode requires it.
    """

    @abc.abstractmethod
    def handshake(self) -> BackendHandshake: ...

    @abc.abstractmethod
    def encode(self, image: np.ndarray) -> GridTensor:
        """Map an RGB uint8 (H, W, 3) image to a latent tensor."""

    @abc.abstractmethod
    def decode(self, latent: GridTensor) -> np.ndarray:
        """Map a latent tensor back to an RGB uint8 (H, W, 3) image."""

    @abc.abstractmethod
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
    ) -> tuple[NoisePredictionPair, AttentionBundle | None]: ...

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[TokenSpan]: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def begin_session(self, z_src: GridTensor) -> None:
        """Register the source latent for modes that noise it server-side."""

    def clone(self) -> "DenoiserBackend":
        """Independent backend handle for a concurrent run."""
        return self
