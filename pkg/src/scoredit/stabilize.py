"""Gradient filtering, reverse-sigmoid annealing, and std normalization.

Weak, spatially scattered gradients are detected by their low standard
deviation and rejected; the rejection threshold decays exponentially within
a step and resets once a gradient is accepted. Accepted gradients are
rescaled to a target standard deviation that anneals from high to low over
the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from scoredit.core import EngineConfig, GridTensor


@dataclass
class FilterState:
    """Per-step threshold state: eta = eta0 * decay^rejections."""

    eta0: float
    decay: float
    eta: float = field(init=False)
    rejections_this_step: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.eta = self.eta0

    def reset(self) -> None:
        self.eta = self.eta0
        self.rejections_this_step = 0


def grad_std(g: GridTensor) -> float:
    """Population standard deviation over all elements (float64 accumulation)."""
    if g.data.size < 2:
        raise ValueError("standard deviation needs at least 2 elements")
    return float(np.std(g.data, dtype=np.float64))


def test_and_decay(state: FilterState, std: float) -> bool:
    """Accept iff std >= eta; decay eta on reject, reset it on accept."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std >= state.eta:
        state.reset()
        return True
    state.eta *= state.decay
    state.rejections_this_step += 1
    return False


def gamma_at(k: int, n_steps: int, cfg: EngineConfig) -> float:
    """Step-magnitude schedule: reverse sigmoid from gamma_hi down to gamma_lo.

    With annealing disabled the magnitude is held at 1.
    """
    if not 1 <= k <= n_steps:
        raise ValueError(f"step {k} outside [1, {n_steps}]")
    if not cfg.use_anneal:
        return 1.0
    if n_steps == 1:
        x = 0.0
    else:
        x = -cfg.gamma_span + 2.0 * cfg.gamma_span * (k - 1) / (n_steps - 1)
    sigmoid = 1.0 / (1.0 + math.exp(-x))
    # convex-combination form: lands exactly on the midpoint of [lo, hi]
    # when sigmoid = 1/2
    return cfg.gamma_lo * sigmoid + cfg.gamma_hi * (1.0 - sigmoid)


DEGENERATE_STD = 1e-12


def normalize_and_scale(g: GridTensor, gamma: float, use_normalize: bool = True) -> tuple[GridTensor, bool]:
    """Rescale a gradient to standard deviation gamma.

    Returns ``(tensor, is_noop)``; a (near-)zero gradient is returned as an
    exact zero tensor with the no-op flag set rather than amplified. With
    normalization disabled the gradient is only scaled by gamma.
    """
    if not use_normalize:
        return g.scale(gamma), False
    std = grad_std(g)
    if std < DEGENERATE_STD:
        return GridTensor.zeros(g.shape), True
    return GridTensor(g.data * np.float32(gamma / std)), False
