import math

import numpy as np
import pytest
from conftest import mc_eps_estimate, random_small_world

from scoredit.backend.analytic import (
    AnalyticBackend,
    GmmComponent,
    GmmWorld,
    Region,
    demo_world,
    gmm_attention,
    gmm_predict,
    responsibilities,
    world_from_json,
    world_to_json,
)
from scoredit.backend.base import BackendError
from scoredit.backend.wire import PROTOCOL_VERSION
from scoredit.core import GridTensor, LossMode, RngStream, default_schedule, sample_noise
from scoredit.grad import add_noise


def single_component_world(mean_value, sigma, shape=(1, 2, 2)):
    mean = GridTensor.full(shape, mean_value)
    comp = GmmComponent(mean, sigma, 1.0, Region(0, 0, shape[1], shape[2]), "only")
    return GmmWorld(latent_shape=shape, components=(comp,),
                    self_resolution=shape[1], cross_resolution=shape[1])


class TestGmmPredict:
    def test_delta_posterior(self):
        # sigma = 0: prediction is the exact residual toward the mean
        world = single_component_world(0.7, 0.0)
        t = 400
        a = world.schedule.at(t)
        z_t = GridTensor.full((1, 2, 2), 0.3)
        out = gmm_predict(world, z_t, t, "only")
        expected = (0.3 - math.sqrt(a) * 0.7) / math.sqrt(1 - a)
        assert np.allclose(out.data, expected, rtol=1e-6)

    def test_standard_gaussian_prior(self):
        # mu = 0, sigma = 1: eps_hat = sqrt(1-a) * z_t
        world = single_component_world(0.0, 1.0)
        t = 250
        a = world.schedule.at(t)
        z_t = GridTensor(np.linspace(-1, 1, 4, dtype=np.float32).reshape(1, 2, 2))
        out = gmm_predict(world, z_t, t, "only")
        assert np.allclose(out.data, math.sqrt(1 - a) * z_t.data, rtol=1e-5)

    def test_symmetric_two_component_cancellation(self):
        shape = (1, 2, 2)
        plus = GmmComponent(GridTensor.full(shape, 1.0), 0.0, 0.5, Region(0, 0, 2, 2), "x")
        minus = GmmComponent(GridTensor.full(shape, -1.0), 0.0, 0.5, Region(0, 0, 2, 2), "x")
        world = GmmWorld(latent_shape=shape, components=(plus, minus),
                         self_resolution=2, cross_resolution=2)
        out = gmm_predict(world, GridTensor.zeros(shape), 500, "x")
        assert np.allclose(out.data, 0.0, atol=1e-7)

    def test_unknown_label(self):
        world = single_component_world(0.0, 1.0)
        with pytest.raises(BackendError):
            gmm_predict(world, GridTensor.zeros((1, 2, 2)), 100, "nope")

    def test_matches_monte_carlo_oracle_spot(self):
        world = random_small_world(seed=11)
        rng = RngStream(5)
        z = GridTensor(rng.standard_normal(world.latent_shape))
        t = 700
        z_t = add_noise(z, sample_noise(rng, world.latent_shape), world.schedule.at(t))
        pred = gmm_predict(world, z_t, t, "x").data.reshape(-1)
        est, se = mc_eps_estimate(world, z_t, t, "x", n=400_000, seed=3)
        assert (np.abs(est - pred) <= 3.0 * se + 1e-3).all()


class TestResponsibilities:
    def test_sum_to_one(self):
        world = random_small_world(seed=2, max_components=3)
        z_t = GridTensor.zeros(world.latent_shape)
        r = responsibilities(world, z_t, 600, "x")
        assert r.shape[0] == len(world.conditional("x"))
        assert r.sum() == pytest.approx(1.0, abs=1e-12)

    def test_log_domain_stability_far_from_support(self):
        # naive density exponentiation would underflow to 0/0 here
        world = random_small_world(seed=4, max_components=3)
        z_t = GridTensor.full(world.latent_shape, 300.0)
        r = responsibilities(world, z_t, 500, "x")
        assert np.isfinite(r).all()
        assert r.sum() == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance_via_weight_scaling(self):
        # scaling every component weight by c shifts all log densities by
        # log(c); the normalized responsibilities cannot change
        shape = (1, 2, 2)
        def world_with(wts):
            comps = tuple(
                GmmComponent(GridTensor.full(shape, m), 0.5, w, Region(0, 0, 2, 2), "x")
                for m, w in zip((-1.0, 0.5, 2.0), wts)
            )
            return GmmWorld(latent_shape=shape, components=comps,
                            self_resolution=2, cross_resolution=2)
        base = world_with((0.2, 0.3, 0.5))
        z_t = GridTensor.full(shape, 0.4)
        r1 = responsibilities(base, z_t, 300, "x")
        r2 = responsibilities(world_with((0.2, 0.3, 0.5)), z_t, 300, "x")
        assert np.allclose(r1, r2)
        assert r1.sum() == pytest.approx(1.0, abs=1e-12)


class TestGmmAttention:
    def test_whole_grid_region_constant_map(self):
        world = demo_world((4, 64, 64))
        z_t = GridTensor.zeros((4, 64, 64))
        bundle = gmm_attention(world, z_t, 500, "a quiet meadow", {0: "meadow"})
        for layer in bundle.cross_maps[0]:
            spread = layer.max() - layer.min()
            assert spread < 0.75 * layer.max()  # wide bump over the whole grid

    def test_bump_argmax_inside_region(self):
        world = demo_world((4, 64, 64))
        z_t = GridTensor.zeros((4, 64, 64))
        bundle = gmm_attention(world, z_t, 500, "a quiet meadow with a boulder", {3: "boulder"})
        region = world.token_regions["boulder"]
        side = world.cross_resolution
        for layer in bundle.cross_maps[3]:
            idx = int(np.argmax(layer))
            r, c = divmod(idx, side)
            scale = side / world.latent_shape[1]
            assert region.r0 * scale <= r < region.r1 * scale
            assert region.c0 * scale <= c < region.c1 * scale

    def test_self_maps_row_stochastic(self):
        world = demo_world((4, 64, 64))
        bundle = gmm_attention(world, GridTensor.zeros((4, 64, 64)), 500,
                               "a quiet meadow", {0: "meadow"})
        for m in bundle.self_maps:
            assert np.abs(m.sum(axis=1) - 1.0).max() < 1e-9

    def test_token_without_region_errors(self):
        world = demo_world((4, 64, 64))
        with pytest.raises(BackendError):
            gmm_attention(world, GridTensor.zeros((4, 64, 64)), 500,
                          "a quiet meadow", {0: "spaceship"})


class TestAnalyticBackend:
    def test_handshake_shape_and_protocol(self):
        backend = AnalyticBackend(demo_world())
        hs = backend.handshake()
        assert hs.latent_shape == (4, 64, 64)
        assert hs.protocol == PROTOCOL_VERSION
        assert hs.attention.self_resolution == 32
        assert hs.attention.cross_resolution == 16
        assert (np.diff(hs.schedule.alpha_bar) < 0).all()

    def test_encode_decode_roundtrip_smooth_latent(self):
        backend = AnalyticBackend(demo_world())
        base = demo_world().components[0].mean
        img = backend.decode(base)
        assert img.shape == (512, 512, 3) and img.dtype == np.uint8
        z = backend.encode(img)
        # first three channels recovered up to quantization and pooling
        assert float(np.abs(z.data[:3] - base.data[:3]).mean()) < 0.02

    def test_predict_deterministic(self):
        backend = AnalyticBackend(demo_world())
        rng = RngStream(0)
        z_t = GridTensor(rng.standard_normal((4, 64, 64)))
        a1, _ = backend.predict(z_t, 300, "a quiet meadow with a boulder", "a quiet meadow")
        a2, _ = backend.predict(z_t, 300, "a quiet meadow with a boulder", "a quiet meadow")
        assert (a1.eps_target.data == a2.eps_target.data).all()
        assert (a1.eps_source.data == a2.eps_source.data).all()

    def test_identical_prompts_zero_gradient(self):
        backend = AnalyticBackend(demo_world())
        z_t = GridTensor.zeros((4, 64, 64))
        pair, _ = backend.predict(z_t, 300, "a quiet meadow", "a quiet meadow")
        assert np.allclose(pair.eps_target.data, pair.eps_source.data)

    def test_dds_requires_session(self):
        backend = AnalyticBackend(demo_world())
        z_t = GridTensor.zeros((4, 64, 64))
        eps = GridTensor.zeros((4, 64, 64))
        with pytest.raises(BackendError):
            backend.predict(z_t, 300, "a quiet meadow with a boulder", "a quiet meadow",
                            mode=LossMode.DDS, eps=eps)
        backend.begin_session(GridTensor.zeros((4, 64, 64)))
        pair, _ = backend.predict(z_t, 300, "a quiet meadow with a boulder", "a quiet meadow",
                                  mode=LossMode.DDS, eps=eps)
        assert pair.eps_target.shape == (4, 64, 64)

    def test_sds_eps_source_is_eps(self):
        backend = AnalyticBackend(demo_world())
        rng = RngStream(1)
        z_t = GridTensor(rng.standard_normal((4, 64, 64)))
        eps = GridTensor(rng.standard_normal((4, 64, 64)))
        pair, _ = backend.predict(z_t, 300, "a quiet meadow with a boulder", "a quiet meadow",
                                  mode=LossMode.SDS, eps=eps)
        assert (pair.eps_source.data == eps.data).all()

    def test_attention_only_for_region_tokens(self):
        backend = AnalyticBackend(demo_world())
        z_t = GridTensor.zeros((4, 64, 64))
        _, bundle = backend.predict(z_t, 300, "a quiet meadow with a boulder",
                                    "a quiet meadow", want_attention=True)
        assert bundle is not None
        words = backend.tokenize("a quiet meadow with a boulder")
        boulder_idx = next(i for i, t in enumerate(words) if t.text == "boulder")
        assert boulder_idx in bundle.cross_maps

    def test_embeddings_orthonormal_labels(self):
        backend = AnalyticBackend(demo_world())
        a = backend.embed_text("a quiet meadow")
        b = backend.embed_text("a quiet meadow with a boulder")
        assert np.dot(a, b) == pytest.approx(0.0)
        assert np.linalg.norm(a) == pytest.approx(1.0)

    def test_embed_image_tracks_class(self):
        backend = AnalyticBackend(demo_world())
        world = demo_world()
        src_img = backend.decode(world.components[0].mean)
        tgt_img = backend.decode(world.components[1].mean)
        e_tgt_text = backend.embed_text("a quiet meadow with a boulder")
        sim_src = float(np.dot(backend.embed_image(src_img), e_tgt_text))
        sim_tgt = float(np.dot(backend.embed_image(tgt_img), e_tgt_text))
        assert sim_tgt > sim_src

    def test_clone_is_independent(self):
        backend = AnalyticBackend(demo_world())
        backend.begin_session(GridTensor.zeros((4, 64, 64)))
        other = backend.clone()
        assert other is not backend
        assert other._z_src is None


class TestWorldSerialization:
    def test_roundtrip(self):
        world = demo_world()
        again = world_from_json(world_to_json(world))
        assert again.latent_shape == world.latent_shape
        assert again.labels() == world.labels()
        assert set(again.token_regions) == set(world.token_regions)
        for a, b in zip(again.components, world.components):
            assert (a.mean.data == b.mean.data).all()
            assert a.sigma == b.sigma and a.weight == b.weight and a.label == b.label

    def test_weight_validation(self):
        shape = (1, 2, 2)
        comp = GmmComponent(GridTensor.zeros(shape), 0.5, 0.7, Region(0, 0, 2, 2), "x")
        with pytest.raises(BackendError):
            GmmWorld(latent_shape=shape, components=(comp,),
                     self_resolution=2, cross_resolution=2)

    def test_region_validation(self):
        with pytest.raises(BackendError):
            Region(0, 0, 5, 5).validate((4, 4))
