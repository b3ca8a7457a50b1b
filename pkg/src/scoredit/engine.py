"""The edit loop: sample, predict, filter, mask, regularize, normalize, step.

Starting from the encoded source image, each step draws a timestep and
noise, asks the backend for noise predictions on the noisy latent, rejects
weak gradients (resampling noise at a fixed timestep until one passes or
the cap is hit), masks the accepted gradient by the attention-derived edit
region, blends in the pull-to-source term, rescales to the annealed target
magnitude, and takes a plain gradient-descent step. The latent is decoded
once, at the end.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from scoredit import __version__
from scoredit.attnmask import AttentionBundle, MaskState, compute_mask, write_pgm
from scoredit.backend.base import BackendHandshake, DenoiserBackend
from scoredit.core import (
    EngineConfig,
    GridTensor,
    LossMode,
    RngStream,
    sample_noise,
    sample_timestep,
)
from scoredit.grad import add_noise, blend_regularizer, raw_gradient
from scoredit.imgio import read_image
from scoredit.promptdiff import RuleTagger, align_tokens, diff_prompts, tokenize_words
from scoredit.stabilize import FilterState, gamma_at, grad_std, normalize_and_scale, test_and_decay

TELEMETRY_SCHEMA_VERSION = 1


class EngineError(RuntimeError):
    """Unrecoverable problem while preparing or running an edit."""


class EngineAborted(EngineError):
    """Backend failure mid-run; carries the telemetry gathered so far."""

    def __init__(self, cause: Exception, telemetry: list["StepRecord"]):
        super().__init__(f"run aborted after {len(telemetry)} steps: {cause}")
        self.cause = cause
        self.telemetry = telemetry


@dataclass(frozen=True)
class EditRequest:
    source_image: str | np.ndarray
    y_src: str
    y_tgt: str
    config: EngineConfig
    nouns: Sequence[str] | None = None
    mask_dump_dir: str | None = None
    mask_dump_every: int = 0

    def __post_init__(self) -> None:
        if not self.y_tgt.strip():
            raise EngineError("target prompt must be nonempty")


@dataclass
class StepRecord:
    k: int
    t: int
    accepted: bool
    rejections: int
    eta_final: float
    std_raw: float
    gamma: float
    beta: float
    update_std: float
    noop: bool
    mask_min: float | None = None
    mask_mean: float | None = None
    mask_max: float | None = None

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EditResult:
    final_latent: GridTensor
    image: np.ndarray
    telemetry: list[StepRecord]
    wall_time_s: float


@dataclass
class EngineState:
    """Mutable per-run state; single-owner, one backend session."""

    cfg: EngineConfig
    handshake: BackendHandshake
    y_src: str
    y_tgt: str
    z: GridTensor
    z_src: GridTensor
    rng: RngStream
    tokens: list[int]
    filter_state: FilterState
    mask_state: MaskState = field(default_factory=MaskState)
    k: int = 0
    mask_dump_dir: str | None = None
    mask_dump_every: int = 0


def resolve_noun_tokens(
    req: EditRequest, backend: DenoiserBackend
) -> list[int]:
    """Token indices whose attention maps will drive the mask.

    Explicit nouns bypass prompt diffing entirely; otherwise the prompt pair
    is compared and its noun words aligned to the backend tokenization.
    """
    spans = backend.tokenize(req.y_tgt)
    if req.nouns:
        wanted = {n.strip().lower() for n in req.nouns if n.strip()}
        word_spans = [w for w in tokenize_words(req.y_tgt) if w.word in wanted]
        missing = wanted - {w.word for w in word_spans}
        if missing:
            raise EngineError(
                f"nouns {sorted(missing)} do not occur in the target prompt"
            )
        return align_tokens(word_spans, spans)
    result = diff_prompts(req.y_src, req.y_tgt, RuleTagger(), spans)
    if not result.token_indices:
        raise EngineError(
            "prompt diffing found no noun tokens; pass explicit nouns "
            "(--nouns) or disable masking"
        )
    return result.token_indices


def run_step(state: EngineState, backend: DenoiserBackend) -> StepRecord:
    """One optimization step: accepted-update record or skipped-step record."""
    cfg = state.cfg
    state.k += 1
    k = state.k
    state.filter_state.reset()
    t = sample_timestep(state.rng, cfg.t_min, cfg.t_max)
    schedule = state.handshake.schedule
    latent_shape = state.handshake.latent_shape
    needs_eps = cfg.loss_mode in (LossMode.DDS, LossMode.SDS)

    accepted = False
    rejections = 0
    g_raw: GridTensor | None = None
    bundle: AttentionBundle | None = None
    std_raw = 0.0
    for _attempt in range(cfg.max_resamples):
        eps = sample_noise(state.rng, latent_shape)
        z_t = add_noise(state.z, eps, schedule.at(t))
        pair, bundle = backend.predict(
            z_t,
            t,
            state.y_tgt,
            state.y_src,
            omega=cfg.cfg_omega,
            want_attention=cfg.use_mask,
            mode=cfg.loss_mode,
            eps=eps if needs_eps else None,
        )
        g_raw = raw_gradient(pair, eps, cfg.loss_mode)
        std_raw = grad_std(g_raw)
        if test_and_decay(state.filter_state, std_raw):
            accepted = True
            break
        rejections = state.filter_state.rejections_this_step

    gamma = gamma_at(k, cfg.steps, cfg)
    beta = k / cfg.steps
    eta_final = cfg.effective_eta0 * cfg.eta_decay**rejections
    record = StepRecord(
        k=k,
        t=t,
        accepted=accepted,
        rejections=rejections,
        eta_final=eta_final,
        std_raw=std_raw,
        gamma=gamma,
        beta=beta,
        update_std=0.0,
        noop=not accepted,
    )
    if not accepted:
        # cap reached: the latent is untouched but the schedules advanced
        state.filter_state.reset()
        return record

    assert g_raw is not None
    mask_hat: np.ndarray | None = None
    if cfg.use_mask:
        if bundle is None:
            raise EngineError(
                "backend returned no attention maps for the noun tokens; "
                "cannot build the edit mask"
            )
        mask_hat, state.mask_state = compute_mask(
            bundle,
            state.tokens,
            state.mask_state,
            k,
            cfg.steps,
            latent_shape[1:],
            ema_alpha=cfg.ema_alpha,
            use_ema=cfg.use_ema,
        )
        record.mask_min = float(mask_hat.min())
        record.mask_mean = float(mask_hat.mean())
        record.mask_max = float(mask_hat.max())
        if state.mask_dump_dir and state.mask_dump_every > 0 and k % state.mask_dump_every == 0:
            write_pgm(mask_hat, os.path.join(state.mask_dump_dir, f"mask_{k:05d}.pgm"))

    g_reg = blend_regularizer(g_raw, mask_hat, state.z, state.z_src, cfg.effective_lambda)
    g_final, noop = normalize_and_scale(g_reg, gamma, cfg.use_normalize)
    if not noop:
        state.z = GridTensor(state.z.data - np.float32(cfg.lr) * g_final.data)
        record.update_std = cfg.lr * grad_std(g_final)
    record.noop = noop
    return record


def run_edit(req: EditRequest, backend: DenoiserBackend) -> EditResult:
    """Run the full edit loop and decode the final latent."""
    started = time.perf_counter()
    cfg = req.config
    handshake = backend.handshake()

    if isinstance(req.source_image, str):
        image = read_image(req.source_image)
    else:
        image = np.asarray(req.source_image, dtype=np.uint8)
    z_src = backend.encode(image)

    tokens: list[int] = []
    if cfg.use_mask:
        tokens = resolve_noun_tokens(req, backend)
    if cfg.loss_mode is LossMode.DDS:
        backend.begin_session(z_src)
    if req.mask_dump_dir:
        os.makedirs(req.mask_dump_dir, exist_ok=True)

    state = EngineState(
        cfg=cfg,
        handshake=handshake,
        y_src=req.y_src,
        y_tgt=req.y_tgt,
        z=z_src,
        z_src=z_src,
        rng=RngStream(cfg.seed),
        tokens=tokens,
        filter_state=FilterState(cfg.effective_eta0, cfg.eta_decay),
        mask_dump_dir=req.mask_dump_dir,
        mask_dump_every=req.mask_dump_every,
    )
    telemetry: list[StepRecord] = []
    try:
        for _ in range(cfg.steps):
            telemetry.append(run_step(state, backend))
    except Exception as exc:  # noqa: BLE001 - partial telemetry must survive
        if isinstance(exc, EngineError):
            raise
        raise EngineAborted(exc, telemetry) from exc
    image_out = backend.decode(state.z)
    return EditResult(
        final_latent=state.z,
        image=image_out,
        telemetry=telemetry,
        wall_time_s=time.perf_counter() - started,
    )


def telemetry_document(result: EditResult, cfg: EngineConfig) -> dict[str, Any]:
    """JSON-serializable sidecar; excludes wall time so replays are
    byte-identical for a fixed seed."""
    return {
        "schema_version": TELEMETRY_SCHEMA_VERSION,
        "engine_version": __version__,
        "config": cfg.to_mapping(),
        "steps": [rec.to_json() for rec in result.telemetry],
    }
