"""Pure gradient mathematics for the optimization loop.

Forward noising, classifier-free guidance, the raw prediction-difference
gradients (target-branch, source-branch, and plain noise-residual variants),
and the regularized blend that pulls unmasked areas back to the source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scoredit.core import GridTensor, LossMode, ShapeMismatchError


@dataclass(frozen=True)
class NoisePredictionPair:
    """Noise predictions for the target and source prompt branches."""

    eps_target: GridTensor
    eps_source: GridTensor

    def __post_init__(self) -> None:
        if self.eps_target.shape != self.eps_source.shape:
            raise ShapeMismatchError(
                f"prediction shapes differ: {self.eps_target.shape} vs {self.eps_source.shape}"
            )


def add_noise(z: GridTensor, eps: GridTensor, alpha_bar_t: float) -> GridTensor:
    """Forward-noise a latent: sqrt(a)*z + sqrt(1-a)*eps."""
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    z._check_shape(eps)
    a = np.float32(np.sqrt(alpha_bar_t))
    b = np.float32(np.sqrt(1.0 - alpha_bar_t))
    return GridTensor(a * z.data + b * eps.data)


def apply_cfg(cond: GridTensor, uncond: GridTensor, omega: float) -> GridTensor:
    """Classifier-free guidance: (1 + omega)*cond - omega*uncond."""
    cond._check_shape(uncond)
    if omega == 0.0:
        return cond
    return GridTensor(np.float32(1.0 + omega) * cond.data - np.float32(omega) * uncond.data)


def raw_gradient(pair: NoisePredictionPair, eps: GridTensor, mode: LossMode) -> GridTensor:
    """Raw update direction before masking, regularization, and scaling.

    Prediction-difference modes subtract the source-branch prediction; the
    plain residual mode subtracts the noise that formed the noisy latent.
    The two difference modes share this formula and differ only in how the
    backend produced ``eps_source``.
    """
    if mode in (LossMode.SBP, LossMode.DDS):
        return pair.eps_target.sub(pair.eps_source)
    pair.eps_target._check_shape(eps)
    return pair.eps_target.sub(eps)


def blend_regularizer(
    grad: GridTensor,
    mask_hat: np.ndarray | None,
    z: GridTensor,
    z_src: GridTensor,
    lam: float,
) -> GridTensor:
    """Blend the (masked) gradient with the pull-to-source term.

    ``mask_hat`` is a single-channel (H, W) map in [0, 1] applied identically
    to every channel; None means no spatial modulation.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    z._check_shape(z_src)
    z._check_shape(grad)
    masked = grad.data
    if mask_hat is not None:
        if mask_hat.shape != grad.shape[1:]:
            raise ShapeMismatchError(
                f"mask shape {mask_hat.shape} does not match spatial dims {grad.shape[1:]}"
            )
        masked = masked * mask_hat.astype(np.float32)[None, :, :]
    out = np.float32(1.0 - lam) * masked + np.float32(lam) * (z.data - z_src.data)
    return GridTensor(out)
