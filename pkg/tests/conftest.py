import math

import numpy as np

from scoredit.attnmask import AttentionBundle
from scoredit.backend.analytic import GmmComponent, GmmWorld, Region
from scoredit.backend.base import (
    AttentionSpec,
    BackendHandshake,
    Capabilities,
    DenoiserBackend,
)
from scoredit.backend.wire import PROTOCOL_VERSION
from scoredit.core import GridTensor, default_schedule
from scoredit.grad import NoisePredictionPair
from scoredit.promptdiff import TokenSpan, tokenize_words


class ScriptedBackend(DenoiserBackend):
    """Injectable backend double driven by a predict function.

    ``predict_fn(z_t, t, attempt) -> (eps_target, eps_source)`` as arrays;
    attention is a constant bundle (uniform self map, constant cross maps),
    which the mask pipeline turns into an all-ones mask.
    """

    def __init__(self, predict_fn, latent_shape=(1, 8, 8), self_res=4, cross_res=2):
        self.predict_fn = predict_fn
        self.latent_shape = latent_shape
        self.self_res = self_res
        self.cross_res = cross_res
        self.calls = 0

    def handshake(self):
        return BackendHandshake(
            latent_shape=self.latent_shape,
            schedule=default_schedule(),
            attention=AttentionSpec(self.self_res, self.cross_res, 1, 1),
            capabilities=Capabilities(),
            protocol=PROTOCOL_VERSION,
        )

    def encode(self, image):
        return GridTensor.zeros(self.latent_shape)

    def decode(self, latent):
        h, w = latent.shape[1:]
        ch = np.clip((latent.data[0] + 1) / 2, 0, 1)
        return np.round(np.stack([ch] * 3, axis=-1) * 255).astype(np.uint8)

    def predict(self, z_t, t, y_tgt, y_src, omega=0.0, want_attention=False,
                mode=None, eps=None):
        self.calls += 1
        tgt, src = self.predict_fn(z_t, t, self.calls)
        pair = NoisePredictionPair(GridTensor(tgt), GridTensor(src))
        bundle = None
        if want_attention:
            n = self.self_res * self.self_res
            uniform = np.full((n, n), 1.0 / n)
            const_cross = np.full(self.cross_res * self.cross_res, 0.5)
            tokens = {i: [const_cross] for i, _ in enumerate(self.tokenize(y_tgt))}
            bundle = AttentionBundle.build([uniform], tokens)
        return pair, bundle

    def tokenize(self, text):
        return [TokenSpan(w.word, w.start, w.end) for w in tokenize_words(text)]

    def embed_text(self, text):
        return np.array([1.0, 0.0])

    def embed_image(self, image):
        return np.array([1.0, 0.0])


def mc_eps_estimate(world, z_t, t, label, n=1_000_000, seed=0):
    """Monte-Carlo oracle for the posterior-mean noise prediction.

    Draws latents from the label's prior mixture, reweights them by the
    noising likelihood of the observed noisy latent (self-normalized
    importance sampling), and averages the implied noise residuals. Returns
    the estimate and a delta-method standard error per coordinate. This path
    never touches the closed-form posterior formulas it is used to check.
    """
    comps = world.conditional(label)
    rng = np.random.default_rng(seed)
    a = world.schedule.at(t)
    dim = int(np.prod(world.latent_shape))
    weights = np.array([c.weight for c in comps])
    means = np.stack([c.mean.data.reshape(-1).astype(np.float64) for c in comps])
    sigmas = np.array([c.sigma for c in comps])
    idx = rng.choice(len(comps), size=n, p=weights)
    z = means[idx] + sigmas[idx][:, None] * rng.standard_normal((n, dim))
    zt = z_t.data.reshape(-1).astype(np.float64)
    resid = zt[None, :] - math.sqrt(a) * z
    log_w = -0.5 * (resid**2).sum(axis=1) / (1.0 - a)
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    f = resid / math.sqrt(1.0 - a)
    est = (w[:, None] * f).sum(axis=0)
    se = np.sqrt(((w[:, None] ** 2) * (f - est[None, :]) ** 2).sum(axis=0))
    return est, se


def random_small_world(seed, max_components=3, schedule=None):
    """Random low-dimensional mixture world for oracle comparisons."""
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 3))
    h = int(rng.integers(2, 4))
    w = int(rng.integers(2, 4))
    shape = (c, h, w)
    k = int(rng.integers(1, max_components + 1))
    raw = rng.uniform(0.2, 1.0, size=k)
    weights = raw / raw.sum()
    comps = []
    for i in range(k):
        mean = GridTensor(rng.uniform(-1.5, 1.5, size=shape).astype(np.float32))
        sigma = float(rng.uniform(0.25, 1.0))
        comps.append(GmmComponent(mean, sigma, float(weights[i]), Region(0, 0, h, w), "x"))
    kwargs = {"schedule": schedule} if schedule is not None else {}
    return GmmWorld(
        latent_shape=shape,
        components=tuple(comps),
        token_regions={},
        self_resolution=h,
        cross_resolution=h,
        **kwargs,
    )
