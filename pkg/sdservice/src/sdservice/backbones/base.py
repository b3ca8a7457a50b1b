"""Backbone interface the service wraps: denoiser, autoencoder, embeddings."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np


class BackboneError(RuntimeError):
    pass


@dataclass
class PredictOutput:
    eps_target: np.ndarray
    eps_source: np.ndarray
    self_maps: list[np.ndarray] = field(default_factory=list)
    cross_maps: dict[int, list[np.ndarray]] = field(default_factory=dict)


class Backbone(abc.ABC):
    """Everything model-specific; all boundary arrays are numpy float32.

    ``predict`` must be deterministic: no internal sampling, noise arrives
    from the caller.
    """

    latent_shape: tuple[int, int, int]
    image_size: int
    self_resolution: int
    cross_resolution: int
    self_layers: int
    cross_layers: int

    @abc.abstractmethod
    def schedule(self) -> np.ndarray:
        """Cumulative-product noise schedule, 1000 float64 entries."""

    @abc.abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) float32 in [0, 1] -> latent (C, h, w); posterior mean."""

    @abc.abstractmethod
    def decode(self, latent: np.ndarray) -> np.ndarray:
        """latent (C, h, w) -> (H, W, 3) float32 in [0, 1]."""

    @abc.abstractmethod
    def predict(
        self,
        z_t: np.ndarray,
        t: int,
        y_tgt: str,
        y_src: str,
        omega: float,
        want_attention: bool,
        mode: str,
        eps: np.ndarray | None,
        z_src: np.ndarray | None,
    ) -> PredictOutput: ...

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[dict]:
        """Token dicts with ``text``, ``start``, ``end`` character offsets."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        """Unit-norm embedding vector."""

    @abc.abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        """Unit-norm embedding vector for an (H, W, 3) float32 image."""
