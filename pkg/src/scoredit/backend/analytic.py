"""Analytic Gaussian-mixture backend: a desk-scale denoiser oracle.

Each prompt label owns a mixture of isotropic Gaussians over the latent
grid. Noise predictions are the exact posterior-mean residuals for that
mixture, attention maps are deterministic bumps tied to named regions, and
"CLIP" embeddings project class posteriors onto a per-label orthonormal
basis. Everything is closed-form, seedless, and reproducible, which makes
the full optimization loop testable without any model weights.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from scoredit.attnmask import AttentionBundle
from scoredit.backend.base import (
    AttentionSpec,
    BackendError,
    BackendHandshake,
    Capabilities,
    DenoiserBackend,
)
from scoredit.backend.wire import PROTOCOL_VERSION, decode_tensor, encode_tensor
from scoredit.core import GridTensor, LossMode, NoiseSchedule, default_schedule
from scoredit.grad import NoisePredictionPair, add_noise, apply_cfg
from scoredit.promptdiff import TokenSpan, tokenize_words

IMAGE_SCALE = 8  # image pixels per latent cell


@dataclass(frozen=True)
class Region:
    """Half-open rectangle [r0, r1) x [c0, c1) at latent resolution."""

    r0: int
    c0: int
    r1: int
    c1: int

    def validate(self, hw: tuple[int, int]) -> None:
        h, w = hw
        if not (0 <= self.r0 < self.r1 <= h and 0 <= self.c0 < self.c1 <= w):
            raise BackendError(f"region {self} outside latent grid {hw}")

    def mask(self, hw: tuple[int, int]) -> np.ndarray:
        out = np.zeros(hw, dtype=bool)
        out[self.r0 : self.r1, self.c0 : self.c1] = True
        return out

    def center(self) -> tuple[float, float]:
        return ((self.r0 + self.r1 - 1) / 2.0, (self.c0 + self.c1 - 1) / 2.0)

    def extent(self) -> tuple[float, float]:
        return (float(self.r1 - self.r0), float(self.c1 - self.c0))


@dataclass(frozen=True)
class GmmComponent:
    mean: GridTensor
    sigma: float
    weight: float
    region: Region
    label: str

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise BackendError("sigma must be >= 0")
        if self.weight <= 0:
            raise BackendError("weight must be > 0")
        object.__setattr__(self, "label", self.label.strip().lower())


@dataclass(frozen=True)
class GmmWorld:
    latent_shape: tuple[int, int, int]
    components: tuple[GmmComponent, ...]
    token_regions: dict[str, Region] = field(default_factory=dict)
    self_resolution: int = 32
    cross_resolution: int = 16
    self_layers: int = 2
    cross_layers: int = 2
    schedule: NoiseSchedule = field(default_factory=default_schedule)

    def __post_init__(self) -> None:
        if not self.components:
            raise BackendError("world needs at least one component")
        hw = self.latent_shape[1:]
        for comp in self.components:
            if comp.mean.shape != self.latent_shape:
                raise BackendError(
                    f"component mean shape {comp.mean.shape} != latent {self.latent_shape}"
                )
            comp.region.validate(hw)
        for region in self.token_regions.values():
            region.validate(hw)
        for label in self.labels():
            total = sum(c.weight for c in self.conditional(label))
            if abs(total - 1.0) > 1e-6:
                raise BackendError(f"weights for label {label!r} sum to {total}, not 1")

    def labels(self) -> list[str]:
        seen: dict[str, None] = {}
        for comp in self.components:
            seen.setdefault(comp.label, None)
        return sorted(seen)

    def conditional(self, label: str) -> tuple[GmmComponent, ...]:
        key = label.strip().lower()
        subset = tuple(c for c in self.components if c.label == key)
        if not subset:
            raise BackendError(f"unknown label {key!r}")
        return subset

    def log_class_densities(self, z: GridTensor) -> dict[str, float]:
        """Per-label mixture log density of a noise-free latent."""
        out = {}
        for label in self.labels():
            comps = self.conditional(label)
            terms = []
            for c in comps:
                var = max(c.sigma**2, 1e-6)
                terms.append(math.log(c.weight) + _log_normal(z.data, c.mean.data, var))
            out[label] = float(logsumexp(terms))
        return out

    def class_posterior(self, z: GridTensor) -> dict[str, float]:
        """Tempered label posterior under a uniform class prior.

        Log densities are averaged per latent dimension before the softmax;
        untampered posteriors saturate to exactly 0/1 at this dimensionality,
        which would make the synthetic embeddings useless as a score.
        """
        logs = self.log_class_densities(z)
        dim = float(np.prod(self.latent_shape))
        labels = sorted(logs)
        arr = np.array([logs[l] for l in labels]) / dim
        probs = np.exp(arr - logsumexp(arr))
        return {l: float(p) for l, p in zip(labels, probs)}


def _log_normal(x: np.ndarray, mean: np.ndarray, var: float) -> float:
    d = x.size
    sq = float(((x.astype(np.float64) - mean.astype(np.float64)) ** 2).sum())
    return -0.5 * (d * math.log(2.0 * math.pi * var) + sq / var)


def responsibilities(
    world: GmmWorld, z_t: GridTensor, t: int, label: str
) -> np.ndarray:
    """Posterior component weights given the noisy latent, via log-sum-exp."""
    comps = world.conditional(label)
    a = world.schedule.at(t)
    logs = np.empty(len(comps))
    zt64 = z_t.data.astype(np.float64)
    for i, c in enumerate(comps):
        marg_var = a * c.sigma**2 + (1.0 - a)
        logs[i] = math.log(c.weight) + _log_normal(
            zt64, math.sqrt(a) * c.mean.data.astype(np.float64), marg_var
        )
    return np.exp(logs - logsumexp(logs))


def gmm_predict(world: GmmWorld, z_t: GridTensor, t: int, label: str) -> GridTensor:
    """Exact posterior-mean noise prediction for the label's mixture.

    Per component, the latent posterior mean given the noisy latent is
    ``(sqrt(a) sigma^2 z_t + (1-a) mu) / (a sigma^2 + 1-a)``; the predicted
    noise is the residual of the responsibility-weighted combination.
    """
    comps = world.conditional(label)
    a = world.schedule.at(t)
    if not 0.0 < a < 1.0:
        raise BackendError(f"alpha_bar[{t}] = {a} outside (0, 1)")
    r = responsibilities(world, z_t, t, label)
    zt64 = z_t.data.astype(np.float64)
    post_mean = np.zeros_like(zt64)
    for ri, c in zip(r, comps):
        denom = a * c.sigma**2 + (1.0 - a)
        m_i = (math.sqrt(a) * c.sigma**2 * zt64 + (1.0 - a) * c.mean.data) / denom
        post_mean += ri * m_i
    eps_hat = (zt64 - math.sqrt(a) * post_mean) / math.sqrt(1.0 - a)
    return GridTensor(eps_hat.astype(np.float32))


@lru_cache(maxsize=16)
def _smoothing_self_map(side: int, tau: float) -> np.ndarray:
    """Row-stochastic local smoothing kernel over a side x side grid."""
    n = side * side
    ys, xs = np.divmod(np.arange(n), side)
    d2 = (ys[:, None] - ys[None, :]) ** 2.0 + (xs[:, None] - xs[None, :]) ** 2.0
    mat = np.exp(-d2 / (2.0 * tau * tau))
    return mat / mat.sum(axis=1, keepdims=True)


def _bump(side: int, center_rc: tuple[float, float], spread: float) -> np.ndarray:
    ys, xs = np.divmod(np.arange(side * side), side)
    d2 = (ys - center_rc[0]) ** 2.0 + (xs - center_rc[1]) ** 2.0
    return np.exp(-d2 / (2.0 * spread * spread))


def gmm_attention(
    world: GmmWorld,
    z_t: GridTensor,
    t: int,
    label: str,
    tokens: dict[int, str],
) -> AttentionBundle:
    """Deterministic attention maps: bumps on token regions, smoothed rows.

    Cross maps are Gaussian bumps centered on each token's region, scaled by
    the responsibility mass of the label's components in that region; self
    maps are local smoothing kernels with a per-layer width.
    """
    if not tokens:
        raise BackendError("no tokens requested for attention")
    hw = world.latent_shape[1:]
    comps = world.conditional(label)
    r = responsibilities(world, z_t, t, label)
    cross_side = world.cross_resolution
    scale_r = cross_side / hw[0]
    scale_c = cross_side / hw[1]
    cross_maps: dict[int, list[np.ndarray]] = {}
    for idx, word in tokens.items():
        region = world.token_regions.get(word.lower())
        if region is None:
            raise BackendError(f"token {word!r} has no region in this world")
        mass = sum(ri for ri, c in zip(r, comps) if c.region == region)
        amp = mass if mass > 0 else 1.0
        cr, cc = region.center()
        er, ec = region.extent()
        center = (cr * scale_r, cc * scale_c)
        base_spread = max(er * scale_r, ec * scale_c, 1.5) / 2.0
        layers = [
            amp * _bump(cross_side, center, base_spread * (1.0 + 0.25 * l))
            for l in range(world.cross_layers)
        ]
        cross_maps[idx] = layers
    self_maps = [
        _smoothing_self_map(world.self_resolution, 1.0 + 0.75 * l)
        for l in range(world.self_layers)
    ]
    return AttentionBundle.build(self_maps, cross_maps)


class AnalyticBackend(DenoiserBackend):
    """In-process backend over a GmmWorld; interchangeable with the remote one."""

    def __init__(self, world: GmmWorld):
        self.world = world
        self._z_src: GridTensor | None = None
        self._label_basis = {label: i for i, label in enumerate(world.labels())}

    # -- session -----------------------------------------------------------

    def begin_session(self, z_src: GridTensor) -> None:
        self._z_src = z_src

    def clone(self) -> "AnalyticBackend":
        return AnalyticBackend(self.world)

    # -- protocol surface ----------------------------------------------------

    def handshake(self) -> BackendHandshake:
        w = self.world
        return BackendHandshake(
            latent_shape=w.latent_shape,
            schedule=w.schedule,
            attention=AttentionSpec(
                self_resolution=w.self_resolution,
                cross_resolution=w.cross_resolution,
                self_layers=w.self_layers,
                cross_layers=w.cross_layers,
            ),
            capabilities=Capabilities(),
            protocol=PROTOCOL_VERSION,
        )

    def encode(self, image: np.ndarray) -> GridTensor:
        c, h, w = self.world.latent_shape
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise BackendError(f"expected an RGB image, got shape {img.shape}")
        if img.shape[0] != h * IMAGE_SCALE or img.shape[1] != w * IMAGE_SCALE:
            raise BackendError(
                f"expected a {h * IMAGE_SCALE}x{w * IMAGE_SCALE} image, got {img.shape[:2]}"
            )
        px = img.astype(np.float64) / 255.0
        pooled = px.reshape(h, IMAGE_SCALE, w, IMAGE_SCALE, 3).mean(axis=(1, 3))
        latent = np.zeros((c, h, w), dtype=np.float32)
        for ch in range(min(3, c)):
            latent[ch] = (pooled[:, :, ch] * 2.0 - 1.0).astype(np.float32)
        return GridTensor(latent)

    def decode(self, latent: GridTensor) -> np.ndarray:
        c, h, w = self.world.latent_shape
        if latent.shape != (c, h, w):
            raise BackendError(f"latent shape {latent.shape} != {self.world.latent_shape}")
        rgb = np.zeros((h, w, 3), dtype=np.float64)
        for ch in range(min(3, c)):
            rgb[:, :, ch] = np.clip((latent.data[ch] + 1.0) / 2.0, 0.0, 1.0)
        big = rgb.repeat(IMAGE_SCALE, axis=0).repeat(IMAGE_SCALE, axis=1)
        return np.round(big * 255.0).astype(np.uint8)

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
    ) -> tuple[NoisePredictionPair, AttentionBundle | None]:
        if mode in (LossMode.DDS, LossMode.SDS) and eps is None:
            raise BackendError(f"mode {mode.value} requires the sampled noise")
        eps_target = self._guided(z_t, t, y_tgt, omega)
        if mode is LossMode.SBP:
            eps_source = self._guided(z_t, t, y_src, omega)
        elif mode is LossMode.DDS:
            if self._z_src is None:
                raise BackendError("dds mode requires a session with a registered source latent")
            assert eps is not None
            z_src_t = add_noise(self._z_src, eps, self.world.schedule.at(t))
            eps_source = self._guided(z_src_t, t, y_src, omega)
        else:
            assert eps is not None
            eps_source = eps
        bundle = None
        if want_attention:
            tokens = {
                i: tok.text
                for i, tok in enumerate(self.tokenize(y_tgt))
                if tok.text.lower() in self.world.token_regions
            }
            if tokens:
                bundle = gmm_attention(self.world, z_t, t, y_tgt.strip().lower(), tokens)
        return NoisePredictionPair(eps_target, eps_source), bundle

    def _guided(self, z_t: GridTensor, t: int, label: str, omega: float) -> GridTensor:
        cond = gmm_predict(self.world, z_t, t, label.strip().lower())
        if omega == 0.0:
            return cond
        return apply_cfg(cond, self._unconditional(z_t, t), omega)

    def _unconditional(self, z_t: GridTensor, t: int) -> GridTensor:
        pooled = _pooled_world(self.world)
        return gmm_predict(pooled, z_t, t, _POOLED_LABEL)

    def tokenize(self, text: str) -> list[TokenSpan]:
        return [TokenSpan(w.word, w.start, w.end) for w in tokenize_words(text)]

    def embed_text(self, text: str) -> np.ndarray:
        labels = self.world.labels()
        dim = max(len(labels), 2)
        key = text.strip().lower()
        if key in self._label_basis:
            vec = np.zeros(dim)
            vec[self._label_basis[key]] = 1.0
            return vec
        rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
        vec = rng.standard_normal(dim)
        return vec / np.linalg.norm(vec)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        z = self.encode(image)
        return self.embed_latent(z)

    def embed_latent(self, z: GridTensor) -> np.ndarray:
        """Class-posterior projection; unit norm by construction."""
        labels = self.world.labels()
        dim = max(len(labels), 2)
        post = self.world.class_posterior(z)
        vec = np.zeros(dim)
        for label, p in post.items():
            vec[self._label_basis[label]] = math.sqrt(p)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


_POOLED_LABEL = "__all__"

_pooled_cache: dict[int, GmmWorld] = {}


def _pooled_world(world: GmmWorld) -> GmmWorld:
    """All components pooled into one conditional (the unconditional branch)."""
    key = id(world)
    cached = _pooled_cache.get(key)
    if cached is not None:
        return cached
    total = sum(c.weight for c in world.components)
    comps = tuple(
        GmmComponent(c.mean, c.sigma, c.weight / total, c.region, _POOLED_LABEL)
        for c in world.components
    )
    pooled = GmmWorld(
        latent_shape=world.latent_shape,
        components=comps,
        token_regions=world.token_regions,
        self_resolution=world.self_resolution,
        cross_resolution=world.cross_resolution,
        self_layers=world.self_layers,
        cross_layers=world.cross_layers,
        schedule=world.schedule,
    )
    _pooled_cache[key] = pooled
    return pooled


# ---------------------------------------------------------------------------
# Demo fixture and world (de)serialization
# ---------------------------------------------------------------------------

DEMO_SOURCE_PROMPT = "a quiet meadow"
DEMO_TARGET_PROMPT = "a quiet meadow with a boulder"
DEMO_POND_PROMPT = "a quiet meadow with a pond"
DEMO_EDIT_REGION = Region(24, 24, 40, 40)
DEMO_POND_REGION = Region(44, 8, 56, 28)


def demo_world(latent_shape: tuple[int, int, int] = (4, 64, 64)) -> GmmWorld:
    """Three-class fixture: a smooth meadow, plus a boulder or a pond.

    Each edit class raises or lowers the mean inside its own region;
    everything outside is identical between classes, so gradients localize
    there and the background is analytically easy to check.
    """
    c, h, w = latent_shape
    base = _smooth_base(latent_shape)

    def scaled(region: Region) -> Region:
        return Region(
            region.r0 * h // 64, region.c0 * w // 64,
            region.r1 * h // 64, region.c1 * w // 64,
        )

    boulder = scaled(DEMO_EDIT_REGION)
    pond = scaled(DEMO_POND_REGION)
    boulder_bump = np.zeros((c, h, w), dtype=np.float32)
    pond_bump = np.zeros((c, h, w), dtype=np.float32)
    for ch in range(min(3, c)):
        boulder_bump[ch, boulder.r0 : boulder.r1, boulder.c0 : boulder.c1] = (
            1.2 if ch < 2 else -0.8
        )
        pond_bump[ch, pond.r0 : pond.r1, pond.c0 : pond.c1] = -0.7 if ch < 2 else 1.1
    whole = Region(0, 0, h, w)
    components = (
        GmmComponent(GridTensor(base), 0.35, 1.0, whole, DEMO_SOURCE_PROMPT),
        GmmComponent(GridTensor(base + boulder_bump), 0.35, 1.0, boulder, DEMO_TARGET_PROMPT),
        GmmComponent(GridTensor(base + pond_bump), 0.35, 1.0, pond, DEMO_POND_PROMPT),
    )
    return GmmWorld(
        latent_shape=latent_shape,
        components=components,
        token_regions={"boulder": boulder, "pond": pond, "meadow": whole},
    )


def _smooth_base(latent_shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = latent_shape
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    base = np.zeros((c, h, w), dtype=np.float32)
    if c > 0:
        base[0] = 0.5 - 0.6 * ys  # sky-to-ground ramp
    if c > 1:
        base[1] = 0.2 + 0.3 * np.sin(2 * np.pi * xs) * ys
    if c > 2:
        base[2] = -0.1 + 0.4 * ys * (1 - ys)
    return base.astype(np.float32)


def world_to_json(world: GmmWorld) -> str:
    doc = {
        "latent_shape": list(world.latent_shape),
        "self_resolution": world.self_resolution,
        "cross_resolution": world.cross_resolution,
        "self_layers": world.self_layers,
        "cross_layers": world.cross_layers,
        "components": [
            {
                "label": c.label,
                "weight": c.weight,
                "sigma": c.sigma,
                "region": [c.region.r0, c.region.c0, c.region.r1, c.region.c1],
                "mean": encode_tensor(c.mean.data),
            }
            for c in world.components
        ],
        "token_regions": {
            tok: [r.r0, r.c0, r.r1, r.c1] for tok, r in world.token_regions.items()
        },
    }
    return json.dumps(doc, indent=2)


def world_from_json(text: str) -> GmmWorld:
    doc = json.loads(text)
    shape = tuple(doc["latent_shape"])
    components = tuple(
        GmmComponent(
            mean=GridTensor(decode_tensor(c["mean"], expect_shape=shape)),
            sigma=float(c["sigma"]),
            weight=float(c["weight"]),
            region=Region(*c["region"]),
            label=str(c["label"]).strip().lower(),
        )
        for c in doc["components"]
    )
    token_regions = {
        str(tok).lower(): Region(*vals) for tok, vals in doc.get("token_regions", {}).items()
    }
    return GmmWorld(
        latent_shape=shape,  # type: ignore[arg-type]
        components=components,
        token_regions=token_regions,
        self_resolution=int(doc.get("self_resolution", 32)),
        cross_resolution=int(doc.get("cross_resolution", 16)),
        self_layers=int(doc.get("self_layers", 2)),
        cross_layers=int(doc.get("cross_layers", 2)),
    )
