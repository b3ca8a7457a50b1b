"""Pretrained latent-diffusion backbone adapter (requires `diffusers`).

Wraps a Stable-Diffusion-family pipeline: UNet noise prediction with
attention-probability capture at the declared resolutions, VAE posterior
mean encode / decode, and the pipeline's text & image encoders for
embeddings. The capture path stores post-softmax probabilities on each
attention module (``last_attn_probs``) so the shared hook machinery in
:mod:`sdservice.hooks` handles head averaging and grouping, exactly as for
the tiny test backbone.

This adapter needs model weights on disk and the `diffusers` package; it is
skipped wherever neither is available.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from sdservice.backbones.base import Backbone, BackboneError, PredictOutput
from sdservice.hooks import AttentionCatcher

try:  # pragma: no cover - exercised only where diffusers is installed
    import diffusers
    from diffusers.models.attention_processor import Attention

    HAVE_DIFFUSERS = True
except ImportError:  # pragma: no cover
    HAVE_DIFFUSERS = False


class _ProbCapturingProcessor:  # pragma: no cover - needs model weights
    """Attention processor that stashes softmax probabilities on the module."""

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        residual = hidden_states
        query = attn.to_q(hidden_states)
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        key = attn.to_k(context)
        value = attn.to_v(context)
        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)
        probs = attn.get_attention_scores(query, key, attention_mask)
        batch = residual.shape[0]
        heads = probs.shape[0] // batch
        attn.last_attn_probs = probs.view(batch, heads, *probs.shape[1:])
        hidden_states = torch.bmm(probs, value)
        hidden_states = attn.batch_to_head_dim(hidden_states)
        hidden_states = attn.to_out[0](hidden_states)
        return attn.to_out[1](hidden_states)


class PretrainedBackbone(Backbone):  # pragma: no cover - needs model weights
    self_resolution = 32
    cross_resolution = 16
    self_layers = 0  # filled after inspecting the UNet
    cross_layers = 0

    def __init__(self, model_id: str = "runwayml/stable-diffusion-v1-5",
                 device: str = "cpu"):
        if not HAVE_DIFFUSERS:
            raise BackboneError(
                "the pretrained backbone needs the 'diffusers' package; "
                "install it or use --backbone tiny"
            )
        self.device = torch.device(device)
        pipe = diffusers.StableDiffusionPipeline.from_pretrained(
            model_id, torch_dtype=torch.float32, safety_checker=None,
            requires_safety_checker=False,
        )
        self.pipe = pipe.to(self.device)
        self.pipe.unet.eval()
        self.pipe.vae.eval()
        self.pipe.text_encoder.eval()
        sample = self.pipe.unet.config.sample_size
        self.latent_shape = (self.pipe.unet.config.in_channels, sample, sample)
        self.image_size = sample * self.pipe.vae_scale_factor
        self._schedule = np.asarray(
            self.pipe.scheduler.alphas_cumprod.cpu().numpy(), dtype=np.float64
        )
        self._install_processors()

    def _install_processors(self):
        self._self_modules = []
        self._cross_modules = []
        for name, module in self.pipe.unet.named_modules():
            if not isinstance(module, Attention):
                continue
            module.set_processor(_ProbCapturingProcessor())
            if "attn1" in name.rsplit(".", 1)[-1]:
                self._self_modules.append(module)
            else:
                self._cross_modules.append(module)
        self.self_layers = len(self._self_modules)
        self.cross_layers = len(self._cross_modules)

    def schedule(self) -> np.ndarray:
        return self._schedule

    def _embed_prompts(self, prompts):
        tok = self.pipe.tokenizer(
            prompts, padding="max_length",
            max_length=self.pipe.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        )
        with torch.no_grad():
            return self.pipe.text_encoder(tok.input_ids.to(self.device))[0]

    def predict(self, z_t, t, y_tgt, y_src, omega, want_attention, mode, eps, z_src):
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
            latents.append(math.sqrt(a) * z_src + math.sqrt(1.0 - a) * eps)
            prompts.append(y_src)
        if omega != 0.0:
            latents.append(z_t)
            prompts.append("")

        catcher = AttentionCatcher(self.self_resolution, self.cross_resolution)
        if want_attention:
            for module in self._self_modules:
                catcher.attach(module, "self")
            for module in self._cross_modules:
                catcher.attach(module, "cross")
        try:
            batch = torch.from_numpy(np.stack(latents).astype(np.float32)).to(self.device)
            embeds = self._embed_prompts(prompts)
            ts = torch.full((len(latents),), int(t), device=self.device, dtype=torch.long)
            with torch.no_grad():
                out = self.pipe.unet(batch, ts, encoder_hidden_states=embeds).sample
        finally:
            catcher.detach_all()
        preds = out.cpu().numpy().astype(np.float32)

        def guided(cond):
            if omega == 0.0:
                return cond
            return ((1.0 + omega) * cond - omega * preds[-1]).astype(np.float32)

        eps_target = guided(preds[0])
        eps_source = eps.astype(np.float32) if mode == "sds" else guided(preds[1])
        output = PredictOutput(eps_target=eps_target, eps_source=eps_source)
        if want_attention:
            n_tokens = len(self.tokenize(y_tgt))
            output.self_maps = catcher.self_maps
            output.cross_maps = {
                # column i+1 skips the BOS token of the CLIP tokenizer
                i: [layer[:, i + 1] for layer in catcher.cross_maps]
                for i in range(n_tokens)
            }
        return output

    def encode(self, image):
        arr = torch.from_numpy(image.astype(np.float32) * 2.0 - 1.0)
        arr = arr.permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            posterior = self.pipe.vae.encode(arr).latent_dist
            latent = posterior.mean * self.pipe.vae.config.scaling_factor
        return latent[0].cpu().numpy().astype(np.float32)

    def decode(self, latent):
        arr = torch.from_numpy(latent)[None].to(self.device)
        with torch.no_grad():
            img = self.pipe.vae.decode(arr / self.pipe.vae.config.scaling_factor).sample
        img = ((img[0] + 1.0) / 2.0).clamp(0, 1).permute(1, 2, 0)
        return img.cpu().numpy().astype(np.float32)

    def tokenize(self, text):
        enc = self.pipe.tokenizer(text, return_offsets_mapping=True,
                                  add_special_tokens=False)
        tokens = self.pipe.tokenizer.convert_ids_to_tokens(enc["input_ids"])
        return [
            {"text": tok, "start": int(start), "end": int(end)}
            for tok, (start, end) in zip(tokens, enc["offset_mapping"])
        ]

    def embed_text(self, text):
        emb = self._embed_prompts([text]).mean(dim=1)[0].cpu().numpy()
        return (emb / np.linalg.norm(emb)).astype(np.float32)

    def embed_image(self, image):
        latent = self.encode(image)
        vec = latent.reshape(len(latent), -1).mean(axis=1)
        return (vec / np.linalg.norm(vec)).astype(np.float32)
