"""Edit-region mask estimation from backend attention maps.

Per-layer self- and cross-attention maps are averaged, the cross map is
sharpened by a self-attention matrix product, min-max normalized, smoothed
with an exponential moving average across steps, and finally blended with
the all-ones mask on a linear ramp so spatial suppression phases in over
the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

ROW_SUM_TOL = 1e-3
DEGENERATE_SPAN = 1e-12


class AttentionError(ValueError):
    """Malformed or inconsistent attention payload."""


@dataclass(frozen=True)
class AttentionBundle:
    """Per-layer self maps plus per-token, per-layer cross maps.

    Self maps are row-stochastic square matrices of size N_spatial; cross
    maps are nonnegative vectors of size N_cross, keyed by token index in
    the target-prompt tokenization.
    """

    self_maps: tuple[np.ndarray, ...]
    cross_maps: dict[int, tuple[np.ndarray, ...]]

    @classmethod
    def build(
        cls,
        self_maps: Sequence[np.ndarray],
        cross_maps: Mapping[int, Sequence[np.ndarray]],
        validate: bool = True,
    ) -> "AttentionBundle":
        selfs = tuple(np.asarray(m, dtype=np.float64) for m in self_maps)
        crosses = {
            int(tok): tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in layers)
            for tok, layers in cross_maps.items()
        }
        bundle = cls(selfs, crosses)
        if validate:
            bundle.validate()
        return bundle

    @property
    def n_spatial(self) -> int:
        return self.self_maps[0].shape[0]

    @property
    def n_cross(self) -> int:
        first = next(iter(self.cross_maps.values()))
        return first[0].shape[0]

    def validate(self) -> None:
        if not self.self_maps:
            raise AttentionError("bundle has no self-attention layers")
        if not self.cross_maps:
            raise AttentionError("bundle has no cross-attention maps")
        n = self.self_maps[0].shape[0]
        for m in self.self_maps:
            if m.ndim != 2 or m.shape != (n, n):
                raise AttentionError(f"self map must be {n}x{n}, got {m.shape}")
            if (m < 0).any():
                raise AttentionError("self map has negative entries")
            if np.abs(m.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
                raise AttentionError("self map rows must sum to 1 within 1e-3")
        nc = self.n_cross
        for tok, layers in self.cross_maps.items():
            if not layers:
                raise AttentionError(f"token {tok} has no cross-map layers")
            for v in layers:
                if v.shape != (nc,):
                    raise AttentionError(f"cross map for token {tok} has size {v.shape}, want {nc}")
                if (v < 0).any():
                    raise AttentionError(f"cross map for token {tok} has negative entries")


@dataclass
class MaskState:
    """Moving-average state of the edit-region mask."""

    m_ema: np.ndarray | None = None
    k: int = 0
    initialized: bool = False


def average_layers(bundle: AttentionBundle) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Uniform arithmetic mean over layers, separately per attention kind."""
    if not bundle.self_maps or not bundle.cross_maps:
        raise AttentionError("cannot average an empty layer list")
    self_avg = np.mean(np.stack(bundle.self_maps), axis=0)
    cross_avg = {tok: np.mean(np.stack(layers), axis=0) for tok, layers in bundle.cross_maps.items()}
    return self_avg, cross_avg


def _side(n: int, what: str) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise AttentionError(f"{what} size {n} is not a perfect square")
    return side


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with endpoints aligned to the grid corners."""
    h, w = grid.shape
    out = np.empty((out_h, out_w), dtype=np.float64)
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    out[:] = top * (1 - wy) + bot * wy
    return out


def upsample_cross(v: np.ndarray, n_spatial: int) -> np.ndarray:
    """Bilinearly lift a cross map to the self-attention resolution."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    side_in = _side(v.size, "cross map")
    side_out = _side(n_spatial, "self map")
    if side_out % side_in != 0:
        raise AttentionError(f"side ratio {side_out}/{side_in} is not an integer")
    if side_in == side_out:
        return v.copy()
    return bilinear_resize(v.reshape(side_in, side_in), side_out, side_out).reshape(-1)


def enhance(self_avg: np.ndarray, cross_avg: np.ndarray) -> np.ndarray:
    """Sharpen a cross map by the averaged self-attention matrix."""
    if self_avg.shape[1] != cross_avg.shape[0]:
        raise AttentionError(
            f"dimension mismatch: self {self_avg.shape} vs cross {cross_avg.shape}"
        )
    return self_avg @ cross_avg


def average_tokens(per_token: Mapping[int, np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the enhanced maps across tokens."""
    if not per_token:
        raise AttentionError("no tokens to average: prompt diffing found no nouns")
    return np.mean(np.stack(list(per_token.values())), axis=0)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant map becomes all-ones (no suppression)."""
    lo = float(v.min())
    hi = float(v.max())
    if hi - lo < DEGENERATE_SPAN:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def update_ema(state: MaskState, m_new: np.ndarray, alpha: float) -> MaskState:
    """Fold a new mask into the moving average; the first call stores it verbatim."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if state.initialized:
        assert state.m_ema is not None
        if state.m_ema.shape != m_new.shape:
            raise AttentionError(
                f"mask shape changed: {state.m_ema.shape} vs {m_new.shape}"
            )
        state.m_ema = (1.0 - alpha) * state.m_ema + alpha * m_new
    else:
        state.m_ema = m_new.copy()
        state.initialized = True
    state.k += 1
    return state


def blend_identity(m_k: np.ndarray, beta: float) -> np.ndarray:
    """Convex blend with the all-ones mask; beta = 1 leaves the mask as-is."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta * m_k + (1.0 - beta)


def mask_to_latent_resolution(m: np.ndarray, latent_hw: tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample a square mask grid to the latent resolution."""
    h, w = latent_hw
    side = _side(m.size, "mask")
    grid = m.reshape(side, side)
    if h % side != 0 or w % side != 0:
        raise AttentionError(f"latent size {latent_hw} is not an integer multiple of {side}")
    if (h, w) == (side, side):
        return grid.copy()
    return np.clip(bilinear_resize(grid, h, w), 0.0, 1.0)


def compute_mask(
    bundle: AttentionBundle,
    tokens: Sequence[int],
    state: MaskState,
    k: int,
    n_steps: int,
    latent_hw: tuple[int, int],
    ema_alpha: float = 0.1,
    use_ema: bool = True,
) -> tuple[np.ndarray, MaskState]:
    """Full mask pipeline for one accepted step.

    Averages layers, lifts each requested token's cross map to self-map
    resolution, sharpens, averages tokens, normalizes, updates the moving
    average, ramps in with beta = k / n_steps, and returns the mask at
    latent resolution together with the updated state.
    """
    if not tokens:
        raise AttentionError("no noun tokens supplied")
    if not 1 <= k <= n_steps:
        raise ValueError(f"step {k} outside [1, {n_steps}]")
    self_avg, cross_avg = average_layers(bundle)
    enhanced: dict[int, np.ndarray] = {}
    for tok in tokens:
        if tok not in cross_avg:
            raise AttentionError(f"bundle is missing cross map for token {tok}")
        enhanced[tok] = enhance(self_avg, upsample_cross(cross_avg[tok], bundle.n_spatial))
    m_new = minmax_normalize(average_tokens(enhanced))
    if use_ema:
        state = update_ema(state, m_new, ema_alpha)
        assert state.m_ema is not None
        m_k = state.m_ema
    else:
        state.k += 1
        m_k = m_new
    beta = k / n_steps
    m_hat = blend_identity(m_k, beta)
    return mask_to_latent_resolution(m_hat, latent_hw), state


def write_pgm(mask: np.ndarray, path: str) -> None:
    """Dump a [0, 1] mask as an 8-bit binary PGM snapshot."""
    grid = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    if grid.ndim == 1:
        side = _side(grid.size, "mask")
        grid = grid.reshape(side, side)
    data = np.round(grid * 255.0).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())
