"""Attention capture via forward hooks on named attention modules.

Hooked modules must stash their post-softmax attention probabilities on a
``last_attn_probs`` attribute shaped (batch, heads, queries, keys). The
catcher reads the requested batch element, averages over heads, and groups
the maps by declared capture resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class AttentionCatcher:
    """Collects head-averaged attention maps during one forward pass."""

    self_resolution: int
    cross_resolution: int
    batch_index: int = 0
    self_maps: list[np.ndarray] = field(default_factory=list)
    cross_maps: list[np.ndarray] = field(default_factory=list)
    _handles: list = field(default_factory=list)

    def attach(self, module: torch.nn.Module, kind: str) -> None:
        if kind not in ("self", "cross"):
            raise ValueError(f"kind must be self or cross, got {kind!r}")

        def hook(mod, args, output):
            probs = getattr(mod, "last_attn_probs", None)
            if probs is None:
                return
            head_mean = probs[self.batch_index].mean(dim=0)
            grid = head_mean.detach().cpu().numpy().astype(np.float64)
            n_query = grid.shape[0]
            if kind == "self" and n_query == self.self_resolution**2:
                # renormalize rows: head averaging keeps stochasticity, this
                # guards against accumulated rounding
                rows = grid.sum(axis=1, keepdims=True)
                self.self_maps.append(grid / np.where(rows > 0, rows, 1.0))
            elif kind == "cross" and n_query == self.cross_resolution**2:
                self.cross_maps.append(np.maximum(grid, 0.0))

        self._handles.append(module.register_forward_hook(hook))

    def clear(self) -> None:
        self.self_maps.clear()
        self.cross_maps.clear()

    def detach_all(self) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles.clear()
