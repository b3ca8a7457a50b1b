import numpy as np
import pytest
from conftest import ScriptedBackend

from scoredit.attnmask import MaskState
from scoredit.backend.analytic import AnalyticBackend, demo_world
from scoredit.backend.base import BackendError
from scoredit.core import EngineConfig, GridTensor, LossMode, RngStream
from scoredit.engine import (
    EditRequest,
    EngineAborted,
    EngineError,
    EngineState,
    resolve_noun_tokens,
    run_edit,
    run_step,
    telemetry_document,
)
from scoredit.stabilize import FilterState

SRC = "a quiet meadow"
TGT = "a quiet meadow with a boulder"


def demo_backend():
    return AnalyticBackend(demo_world())


def demo_request(backend, **overrides):
    defaults = dict(steps=12, lr=1.0, seed=7)
    defaults.update(overrides)
    cfg = EngineConfig(**defaults)
    image = backend.decode(demo_world().components[0].mean)
    return EditRequest(source_image=image, y_src=SRC, y_tgt=TGT, config=cfg)


class TestRunStepInjected:
    def test_constant_predictions_skip_after_cap(self):
        shape = (1, 8, 8)
        backend = ScriptedBackend(lambda z, t, n: (np.ones(shape, np.float32),
                                                   np.ones(shape, np.float32)))
        cfg = EngineConfig(steps=2, max_resamples=9, use_mask=False, seed=0)
        state = EngineState(
            cfg=cfg, handshake=backend.handshake(), y_src="a", y_tgt="b",
            z=GridTensor.zeros(shape), z_src=GridTensor.zeros(shape),
            rng=RngStream(0), tokens=[], filter_state=FilterState(cfg.eta0, cfg.eta_decay),
        )
        rec = run_step(state, backend)
        assert not rec.accepted and rec.noop
        assert rec.rejections == 9
        assert backend.calls == 9
        assert (state.z.data == 0).all()
        # threshold trace: eta decayed once per rejection
        assert rec.eta_final == pytest.approx(0.01 * 0.99**9)
        # next step starts fresh at eta0
        assert state.filter_state.eta == cfg.eta0

    def test_strong_predictions_accept_first_try(self):
        shape = (1, 8, 8)
        rng = np.random.default_rng(0)
        tgt = (rng.standard_normal(shape) * 0.5).astype(np.float32)

        backend = ScriptedBackend(lambda z, t, n: (tgt, np.zeros(shape, np.float32)))
        cfg = EngineConfig(steps=2, use_mask=False, seed=0)
        state = EngineState(
            cfg=cfg, handshake=backend.handshake(), y_src="a", y_tgt="b",
            z=GridTensor.zeros(shape), z_src=GridTensor.zeros(shape),
            rng=RngStream(0), tokens=[], filter_state=FilterState(cfg.eta0, cfg.eta_decay),
        )
        rec = run_step(state, backend)
        assert rec.accepted and rec.rejections == 0
        assert backend.calls == 1
        assert state.filter_state.eta == cfg.eta0

    def test_masked_constant_attention_equals_mask_off(self):
        # constant cross maps min-max normalize to an all-ones mask, so the
        # masked path with lambda = 0 must match the mask-off ablation
        shape = (1, 8, 8)
        rng = np.random.default_rng(3)
        tgt = (rng.standard_normal(shape) * 0.3).astype(np.float32)
        fn = lambda z, t, n: (tgt, np.zeros(shape, np.float32))

        img = np.zeros((8, 8, 3), np.uint8)
        cfg_on = EngineConfig(steps=5, lambda_=0.0, use_mask=True, seed=1, lr=1.0)
        cfg_off = EngineConfig(steps=5, use_mask=False, seed=1, lr=1.0)
        res_on = run_edit(
            EditRequest(source_image=img, y_src="a cat", y_tgt="a cat and a dog",
                        config=cfg_on, nouns=["dog"]),
            ScriptedBackend(fn),
        )
        res_off = run_edit(
            EditRequest(source_image=img, y_src="a cat", y_tgt="a cat and a dog",
                        config=cfg_off),
            ScriptedBackend(fn),
        )
        assert (res_on.final_latent.data == res_off.final_latent.data).all()

    def test_background_update_suppressed_by_warm_mask(self):
        # beta forced to 1 (k = N) with a warm EMA mask that zeroes the
        # outside: the update must land inside the region only
        shape = (1, 8, 8)
        rng = np.random.default_rng(5)
        tgt = (rng.standard_normal(shape) * 0.4).astype(np.float32)
        backend = ScriptedBackend(lambda z, t, n: (tgt, np.zeros(shape, np.float32)))
        cfg = EngineConfig(steps=10, lambda_=0.02, seed=2, lr=1.0)
        warm = np.zeros((4, 4))
        warm[1:3, 1:3] = 1.0  # region R at self-map resolution
        state = EngineState(
            cfg=cfg, handshake=backend.handshake(), y_src="a", y_tgt="b c",
            z=GridTensor.zeros(shape), z_src=GridTensor.zeros(shape),
            rng=RngStream(2), tokens=[0], filter_state=FilterState(cfg.eta0, cfg.eta_decay),
            mask_state=MaskState(m_ema=warm.reshape(-1), k=5, initialized=True),
        )
        state.k = 9  # next step is k = 10 = N, so beta = 1
        # EMA keeps the warm mask dominant; alpha small
        rec = run_step(state, backend)
        assert rec.accepted
        dz = np.abs(state.z.data[0])
        inside = dz[2:6, 2:6].mean()
        outside_mask = np.ones((8, 8), bool)
        outside_mask[2:6, 2:6] = False
        outside = dz[outside_mask].mean()
        assert inside > 0
        assert outside <= 0.35 * inside  # EMA folds in one constant map

    def test_backend_failure_aborts_with_partial_telemetry(self):
        shape = (1, 8, 8)
        calls = {"n": 0}

        strong = (np.random.default_rng(1).standard_normal(shape) * 0.5).astype(np.float32)

        def flaky(z, t, n):
            if n >= 3:
                raise BackendError("backend lost")
            return (strong, np.zeros(shape, np.float32))

        backend = ScriptedBackend(flaky)
        cfg = EngineConfig(steps=10, use_mask=False, seed=0)
        img = np.zeros((8, 8, 3), np.uint8)
        with pytest.raises(EngineAborted) as err:
            run_edit(EditRequest(source_image=img, y_src="a", y_tgt="b", config=cfg), backend)
        assert len(err.value.telemetry) == 2


class TestRunEditAnalytic:
    def test_identical_prompts_reject_to_cap_and_return_source(self):
        backend = demo_backend()
        cfg = EngineConfig(steps=3, max_resamples=5, seed=0, use_mask=False)
        image = backend.decode(demo_world().components[0].mean)
        req = EditRequest(source_image=image, y_src=SRC, y_tgt=SRC, config=cfg)
        result = run_edit(req, backend)
        assert all(not r.accepted and r.rejections == 5 for r in result.telemetry)
        z_src = backend.encode(image)
        assert (result.final_latent.data == z_src.data).all()
        assert (result.image == backend.decode(z_src)).all()

    def test_lambda_one_is_fixed_point(self):
        backend = demo_backend()
        result = run_edit(demo_request(backend, lambda_=1.0, steps=6), backend)
        z_src = backend.encode(demo_request(backend).source_image)
        assert (result.final_latent.data == z_src.data).all()
        assert all(r.noop for r in result.telemetry)

    def test_posterior_of_target_class_increases(self):
        backend = demo_backend()
        req = demo_request(backend, steps=40, lr=1.0)
        result = run_edit(req, backend)
        world = backend.world
        z_src = backend.encode(req.source_image)
        before = world.class_posterior(z_src)[TGT]
        after = world.class_posterior(result.final_latent)[TGT]
        assert after > before

    def test_update_magnitude_contract(self):
        backend = demo_backend()
        result = run_edit(demo_request(backend, steps=10, lr=3.0), backend)
        cfg = EngineConfig(steps=10, lr=3.0, seed=7)
        from scoredit.stabilize import gamma_at

        checked = 0
        for rec in result.telemetry:
            if rec.accepted and not rec.noop:
                assert rec.update_std == pytest.approx(3.0 * gamma_at(rec.k, 10, cfg), rel=1e-4)
                checked += 1
        assert checked > 0

    def test_seeded_replay_identical(self):
        backend = demo_backend()
        req = demo_request(backend, steps=8)
        r1 = run_edit(req, backend)
        r2 = run_edit(req, backend)
        assert (r1.final_latent.data == r2.final_latent.data).all()
        assert [s.to_json() for s in r1.telemetry] == [s.to_json() for s in r2.telemetry]

    def test_telemetry_length_and_schema(self):
        backend = demo_backend()
        req = demo_request(backend, steps=5)
        result = run_edit(req, backend)
        assert len(result.telemetry) == 5
        doc = telemetry_document(result, req.config)
        assert doc["schema_version"] == 1
        assert doc["config"]["lambda"] == 0.02
        assert len(doc["steps"]) == 5
        assert {"k", "t", "accepted", "rejections", "gamma", "beta"} <= set(doc["steps"][0])
        assert "wall_time" not in doc

    def test_dds_mode_runs_and_differs_from_sbp(self):
        backend = demo_backend()
        r_sbp = run_edit(demo_request(backend, steps=6, loss_mode=LossMode.SBP), backend)
        r_dds = run_edit(demo_request(backend, steps=6, loss_mode=LossMode.DDS), backend)
        assert not np.allclose(r_sbp.final_latent.data, r_dds.final_latent.data)

    def test_mask_stats_recorded(self):
        backend = demo_backend()
        result = run_edit(demo_request(backend, steps=4), backend)
        accepted = [r for r in result.telemetry if r.accepted]
        assert accepted
        for rec in accepted:
            assert 0.0 <= rec.mask_min <= rec.mask_mean <= rec.mask_max <= 1.0

    def test_mask_dump(self, tmp_path):
        backend = demo_backend()
        req = EditRequest(
            source_image=backend.decode(demo_world().components[0].mean),
            y_src=SRC, y_tgt=TGT,
            config=EngineConfig(steps=4, lr=1.0, seed=7),
            mask_dump_dir=str(tmp_path), mask_dump_every=2,
        )
        run_edit(req, backend)
        dumps = sorted(p.name for p in tmp_path.glob("*.pgm"))
        assert dumps == ["mask_00002.pgm", "mask_00004.pgm"]


class TestNounResolution:
    def test_prompt_diffing_used_by_default(self):
        backend = demo_backend()
        req = demo_request(backend)
        tokens = resolve_noun_tokens(req, backend)
        words = [t.text for t in backend.tokenize(TGT)]
        assert [words[i] for i in tokens] == ["boulder"]

    def test_explicit_nouns_override(self):
        backend = demo_backend()
        req = EditRequest(
            source_image=demo_request(backend).source_image,
            y_src=SRC, y_tgt=TGT, config=EngineConfig(), nouns=["meadow"],
        )
        tokens = resolve_noun_tokens(req, backend)
        words = [t.text for t in backend.tokenize(TGT)]
        assert [words[i] for i in tokens] == ["meadow"]

    def test_missing_explicit_noun_errors(self):
        backend = demo_backend()
        req = EditRequest(
            source_image=demo_request(backend).source_image,
            y_src=SRC, y_tgt=TGT, config=EngineConfig(), nouns=["spaceship"],
        )
        with pytest.raises(EngineError):
            resolve_noun_tokens(req, backend)

    def test_no_nouns_found_errors(self):
        backend = demo_backend()
        req = EditRequest(
            source_image=demo_request(backend).source_image,
            y_src="a cat", y_tgt="a cat", config=EngineConfig(),
        )
        with pytest.raises(EngineError):
            resolve_noun_tokens(req, backend)

    def test_empty_target_prompt_rejected(self):
        with pytest.raises(EngineError):
            EditRequest(source_image="x.png", y_src="a", y_tgt="  ", config=EngineConfig())
