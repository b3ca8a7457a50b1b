"""Compact latent-denoiser backbone for tests and offline development.

A small randomly-initialized (fixed seed) UNet-style network with one real
self-attention block at 32x32 and two cross-attention blocks at 16x16, so
the service's hook-based attention capture, batching, and session logic run
against genuine attention modules without any model weights. The
autoencoder is an analytic area-down / bilinear-up transform (deterministic
both ways), and embeddings are seeded projections. Outputs are calibrated
once at startup so prompt-branch differences sit well above the engine's
default rejection threshold.
"""

from __future__ import annotations

import math
import re
import zlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sdservice.backbones.base import Backbone, BackboneError, PredictOutput
from sdservice.hooks import AttentionCatcher

LATENT_CHANNELS = 4
LATENT_SIDE = 64
IMAGE_SIDE = 512
TEXT_DIM = 64
SCHEDULE_LEN = 1000

_WORD_RE = re.compile(r"\S+")


def scaled_linear_schedule() -> np.ndarray:
    sqrt_beta = np.linspace(math.sqrt(0.00085), math.sqrt(0.012), SCHEDULE_LEN)
    return np.cumprod(1.0 - sqrt_beta**2)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.to_qkv = nn.Linear(channels, channels * 3, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.last_attn_probs: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (B, N, C)
        qkv = self.to_qkv(tokens).chunk(3, dim=-1)
        q, k, v = (
            part.view(b, h * w, self.heads, c // self.heads).transpose(1, 2)
            for part in qkv
        )
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        self.last_attn_probs = attn
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).view(b, c, h, w)
        return x + out


class CrossAttention2d(nn.Module):
    def __init__(self, channels: int, text_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.last_attn_probs: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        q = self.to_q(tokens).view(b, h * w, self.heads, c // self.heads).transpose(1, 2)
        k = self.to_k(text).view(b, text.shape[1], self.heads, c // self.heads).transpose(1, 2)
        v = self.to_v(text).view(b, text.shape[1], self.heads, c // self.heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        self.last_attn_probs = attn
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).view(b, c, h, w)
        return x + out


class TinyUNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, 32, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(16, 32), nn.SiLU(), nn.Linear(32, 32))
        self.down1 = nn.Conv2d(32, 48, 3, padding=1)
        self.self_attn = SelfAttention2d(48)
        self.down2 = nn.Conv2d(48, 64, 3, padding=1)
        self.cross_attn1 = CrossAttention2d(64, TEXT_DIM)
        self.cross_attn2 = CrossAttention2d(64, TEXT_DIM)
        self.up1 = nn.Conv2d(64, 48, 3, padding=1)
        self.up2 = nn.Conv2d(48, 32, 3, padding=1)
        self.conv_out = nn.Conv2d(32, LATENT_CHANNELS, 3, padding=1)
        # coarse prompt-dependent field; keeps the two prompt branches well
        # separated so their difference clears the engine's rejection threshold
        self.prompt_field = nn.Linear(TEXT_DIM, LATENT_CHANNELS * 8 * 8)
        self.act = nn.SiLU()

    @staticmethod
    def _time_features(t: torch.Tensor) -> torch.Tensor:
        freqs = torch.exp(torch.linspace(0.0, 4.0, 8, dtype=torch.float32))
        angles = t[:, None] / 1000.0 * freqs[None, :] * 2 * math.pi
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv_in(z_t))
        h = h + self.time_mlp(self._time_features(t))[:, :, None, None]
        h = F.avg_pool2d(h, 2)  # 32x32
        h = self.act(self.down1(h))
        h = self.self_attn(h)
        skip32 = h
        h = F.avg_pool2d(h, 2)  # 16x16
        h = self.act(self.down2(h))
        h = self.cross_attn1(h, text)
        h = self.cross_attn2(h, text)
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = self.act(self.up1(h)) + skip32
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = self.act(self.up2(h))
        field = self.prompt_field(text.mean(dim=1)).view(-1, LATENT_CHANNELS, 8, 8)
        field = F.interpolate(field, scale_factor=8, mode="bilinear", align_corners=False)
        return self.conv_out(h) + 2.0 * field


def _seeded_vector(key: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class TinyBackbone(Backbone):
    latent_shape = (LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE)
    image_size = IMAGE_SIDE
    self_resolution = 32
    cross_resolution = 16
    self_layers = 1
    cross_layers = 2

    def __init__(self, device: str = "cpu", seed: int = 1234):
        self.device = torch.device(device)
        torch.manual_seed(seed)
        self.model = TinyUNet().to(self.device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._schedule = scaled_linear_schedule()
        rng = np.random.default_rng(seed)
        self._image_proj = rng.standard_normal((16 * 16 * 3, TEXT_DIM)) / math.sqrt(768)
        self.uncond_evaluations = 0
        self._out_scale = self._calibrate()

    def schedule(self) -> np.ndarray:
        return self._schedule

    # -- denoiser ------------------------------------------------------------

    def _calibrate(self) -> float:
        """Fix the output scale so noise predictions have unit-order spread."""
        probe = torch.from_numpy(
            np.random.default_rng(0).standard_normal(self.latent_shape).astype(np.float32)
        )[None].to(self.device)
        t = torch.tensor([500.0], device=self.device)
        text = self._encode_prompts(["calibration probe"])
        with torch.no_grad():
            out = self.model(probe, t, text)
        std = float(out.std())
        if std <= 0:
            raise BackboneError("degenerate calibration output")
        return 0.5 / std

    def _token_words(self, text: str) -> list[tuple[str, int, int]]:
        return [(m.group().lower(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]

    def _encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        """Deterministic per-token embeddings with sinusoidal positions,
        zero-padded to a common length."""
        per_prompt = []
        for prompt in prompts:
            words = self._token_words(prompt) or [("", 0, 0)]
            rows = []
            for pos, (word, _, _) in enumerate(words):
                base = _seeded_vector(word, TEXT_DIM)
                phase = np.arange(TEXT_DIM) * (pos + 1) / 10000.0
                rows.append(base + 0.1 * np.sin(2 * np.pi * phase))
            per_prompt.append(np.stack(rows))
        max_len = max(p.shape[0] for p in per_prompt)
        batch = np.zeros((len(prompts), max_len, TEXT_DIM), dtype=np.float32)
        for i, p in enumerate(per_prompt):
            batch[i, : p.shape[0]] = p
        return torch.from_numpy(batch).to(self.device)

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
    ) -> PredictOutput:
        if mode in ("dds", "sds") and eps is None:
            raise BackboneError(f"mode {mode} requires the sampled noise")
        latents = [z_t]
        prompts = [y_tgt]
        if mode == "sbp":
            latents.append(z_t)
            prompts.append(y_src)
        elif mode == "dds":
            if z_src is None:
                raise BackboneError("dds mode requires a registered source latent")
            a = float(self._schedule[t])
            z_src_t = math.sqrt(a) * z_src + math.sqrt(1.0 - a) * eps
            latents.append(z_src_t.astype(np.float32))
            prompts.append(y_src)
        if omega != 0.0:
            latents.append(z_t)
            prompts.append("")
            self.uncond_evaluations += 1

        catcher = AttentionCatcher(self.self_resolution, self.cross_resolution)
        if want_attention:
            catcher.attach(self.model.self_attn, "self")
            catcher.attach(self.model.cross_attn1, "cross")
            catcher.attach(self.model.cross_attn2, "cross")
        try:
            batch = torch.from_numpy(np.stack(latents).astype(np.float32)).to(self.device)
            ts = torch.full((len(latents),), float(t), device=self.device)
            text = self._encode_prompts(prompts)
            with torch.no_grad():
                out = self.model(batch, ts, text) * self._out_scale
        finally:
            catcher.detach_all()
        preds = out.cpu().numpy().astype(np.float32)

        def guided(cond: np.ndarray) -> np.ndarray:
            if omega == 0.0:
                return cond
            return ((1.0 + omega) * cond - omega * preds[-1]).astype(np.float32)

        eps_target = guided(preds[0])
        if mode == "sds":
            assert eps is not None
            eps_source = eps.astype(np.float32)
        else:
            eps_source = guided(preds[1])

        output = PredictOutput(eps_target=eps_target, eps_source=eps_source)
        if want_attention:
            output.self_maps = catcher.self_maps
            n_tokens = len(self._token_words(y_tgt))
            output.cross_maps = {
                i: [layer[:, i] for layer in catcher.cross_maps] for i in range(n_tokens)
            }
        return output

    # -- autoencoder -----------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
            raise BackboneError(
                f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} RGB image, got {image.shape}"
            )
        factor = IMAGE_SIDE // LATENT_SIDE
        pooled = image.reshape(LATENT_SIDE, factor, LATENT_SIDE, factor, 3).mean(axis=(1, 3))
        latent = np.zeros(self.latent_shape, dtype=np.float32)
        latent[:3] = np.transpose(pooled * 2.0 - 1.0, (2, 0, 1))
        return latent

    def decode(self, latent: np.ndarray) -> np.ndarray:
        if tuple(latent.shape) != self.latent_shape:
            raise BackboneError(f"latent shape {latent.shape} != {self.latent_shape}")
        rgb = torch.from_numpy(np.clip((latent[:3] + 1.0) / 2.0, 0.0, 1.0))[None]
        big = F.interpolate(
            rgb, size=(IMAGE_SIDE, IMAGE_SIDE), mode="bilinear", align_corners=False
        )[0]
        return np.transpose(big.numpy(), (1, 2, 0)).astype(np.float32)

    # -- text and embeddings -----------------------------------------------------

    def tokenize(self, text: str) -> list[dict]:
        return [
            {"text": word, "start": start, "end": end}
            for word, start, end in self._token_words(text)
        ]

    def embed_text(self, text: str) -> np.ndarray:
        words = self._token_words(text)
        if not words:
            return _seeded_vector("", TEXT_DIM).astype(np.float32)
        acc = np.zeros(TEXT_DIM)
        for word, _, _ in words:
            acc += _seeded_vector(word, TEXT_DIM)
        norm = np.linalg.norm(acc)
        if norm == 0:
            acc[0] = 1.0
            norm = 1.0
        return (acc / norm).astype(np.float32)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        if image.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
            raise BackboneError(
                f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} RGB image, got {image.shape}"
            )
        factor = IMAGE_SIDE // 16
        pooled = image.reshape(16, factor, 16, factor, 3).mean(axis=(1, 3))
        vec = pooled.reshape(-1) @ self._image_proj
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = _seeded_vector("blank-image", TEXT_DIM)
            norm = 1.0
        return (vec / norm).astype(np.float32)
