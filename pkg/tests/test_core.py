import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scoredit.core import (
    ConfigError,
    EngineConfig,
    GridTensor,
    LossMode,
    NoiseSchedule,
    RngStream,
    ShapeMismatchError,
    default_schedule,
    parse_config_text,
    sample_noise,
    sample_timestep,
)


class TestGridTensor:
    def test_length_matches_shape(self):
        g = GridTensor.zeros((2, 3, 4))
        assert g.data.size == 2 * 3 * 4
        assert g.shape == (2, 3, 4)

    def test_rejects_non_rank3(self):
        with pytest.raises(ShapeMismatchError):
            GridTensor(np.zeros((4, 4)))

    def test_external_rejects_nonfinite(self):
        bad = np.zeros((1, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            GridTensor.from_external(bad)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            GridTensor.from_external(bad)

    def test_arithmetic_exact_on_representable_values(self):
        a = GridTensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        b = GridTensor(np.array([[[5.0, 6.0], [7.0, 8.0]]], dtype=np.float32))
        assert (a.add(b).data == np.array([[[6, 8], [10, 12]]], dtype=np.float32)).all()
        assert (a.sub(b).data == np.array([[[-4, -4], [-4, -4]]], dtype=np.float32)).all()
        assert (a.scale(2.0).data == np.array([[[2, 4], [6, 8]]], dtype=np.float32)).all()
        assert (a.mul(b).data == np.array([[[5, 12], [21, 32]]], dtype=np.float32)).all()

    def test_shape_mismatch_rejected_before_computation(self):
        a = GridTensor.zeros((1, 2, 2))
        b = GridTensor.zeros((1, 2, 3))
        for op in (a.add, a.sub, a.mul):
            with pytest.raises(ShapeMismatchError):
                op(b)


class TestRng:
    def test_independent_draws_differ(self):
        rng = RngStream(0)
        first = sample_noise(rng, (1, 1, 1))
        second = sample_noise(rng, (1, 1, 1))
        assert first.data[0, 0, 0] != second.data[0, 0, 0]

    def test_same_seed_identical_tensors(self):
        a = sample_noise(RngStream(1234), (4, 64, 64))
        b = sample_noise(RngStream(1234), (4, 64, 64))
        assert (a.data == b.data).all()

    def test_moments_of_large_sample(self):
        rng = RngStream(7)
        draws = rng.standard_normal((1_000_000,))
        assert abs(float(draws.mean())) < 0.01
        assert abs(float(draws.var()) - 1.0) < 0.01

    def test_rejects_nonpositive_shape(self):
        with pytest.raises(ShapeMismatchError):
            sample_noise(RngStream(0), (0, 1, 1))


class TestSampleTimestep:
    def test_degenerate_range(self):
        assert sample_timestep(RngStream(0), 500, 500) == 500

    def test_defaults_stay_in_range(self):
        rng = RngStream(3)
        for _ in range(2000):
            t = sample_timestep(rng, 50, 950)
            assert 50 <= t <= 950

    def test_range_violation_is_config_error(self):
        rng = RngStream(0)
        with pytest.raises(ConfigError):
            sample_timestep(rng, 900, 100)
        with pytest.raises(ConfigError):
            sample_timestep(rng, -1, 100)
        with pytest.raises(ConfigError):
            sample_timestep(rng, 0, 1000)

    def test_histogram_uniform_within_3_sigma(self):
        # chi-square style check: each bucket count within 3 sigma of n*p
        rng = RngStream(99)
        lo, hi, n = 50, 950, 100_000
        counts = np.zeros(hi - lo + 1, dtype=np.int64)
        for _ in range(n):
            counts[sample_timestep(rng, lo, hi) - lo] += 1
        p = 1.0 / (hi - lo + 1)
        sigma = np.sqrt(n * p * (1 - p))
        assert (np.abs(counts - n * p) <= 3 * sigma + 1).mean() > 0.995


class TestDefaultSchedule:
    def test_strictly_decreasing(self):
        sched = default_schedule()
        assert (np.diff(sched.alpha_bar) < 0).all()

    def test_endpoints(self):
        sched = default_schedule()
        assert sched.at(0) == pytest.approx(0.99915, abs=1e-12)
        # frozen from evaluating the full product once
        assert sched.at(999) == pytest.approx(0.004660098513077238, rel=1e-12)
        assert 0.0 < sched.at(999) < 0.05

    def test_invalid_schedules_rejected(self):
        good = default_schedule().alpha_bar
        with pytest.raises(ConfigError):
            NoiseSchedule(good[:-1])
        increasing = good.copy()
        increasing[10] = increasing[9] + 0.1
        with pytest.raises(ConfigError):
            NoiseSchedule(increasing)
        zero_tail = good.copy()
        zero_tail[-1] = 0.0
        with pytest.raises(ConfigError):
            NoiseSchedule(zero_tail)


class TestEngineConfig:
    def test_defaults_match_contract(self):
        cfg = EngineConfig()
        assert cfg.steps == 300
        assert cfg.lr == 2000.0
        assert cfg.lambda_ == 0.02
        assert cfg.ema_alpha == 0.1
        assert cfg.eta0 == 0.01
        assert cfg.eta_decay == 0.99
        assert (cfg.gamma_lo, cfg.gamma_hi, cfg.gamma_span) == (0.01, 0.15, 5.0)
        assert (cfg.t_min, cfg.t_max) == (50, 950)
        assert cfg.cfg_omega == 0.0
        assert cfg.loss_mode is LossMode.SBP
        assert cfg.max_resamples == 100

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lambda_": 1.5},
            {"lambda_": -0.1},
            {"t_min": 500, "t_max": 100},
            {"t_max": 1000},
            {"gamma_lo": 0.2, "gamma_hi": 0.1},
            {"eta_decay": 1.0},
            {"ema_alpha": 0.0},
            {"steps": 0},
            {"max_resamples": 0},
        ],
    )
    def test_invariants_enforced(self, kwargs):
        with pytest.raises(ConfigError):
            EngineConfig(**kwargs)

    def test_ablation_folding(self):
        assert EngineConfig(use_filter=False).effective_eta0 == 0.0
        assert EngineConfig(use_mask=False).effective_lambda == 0.0
        assert EngineConfig().effective_eta0 == 0.01
        assert EngineConfig().effective_lambda == 0.02

    def test_from_mappings_precedence(self):
        cfg = EngineConfig.from_mappings({"lr": 1.0, "steps": 10}, {"lr": 2.0})
        assert cfg.lr == 2.0 and cfg.steps == 10

    def test_from_mappings_unknown_key(self):
        with pytest.raises(ConfigError):
            EngineConfig.from_mappings({"learning_rate": 1.0})

    def test_loss_mode_parsing(self):
        assert EngineConfig.from_mappings({"loss_mode": "dds"}).loss_mode is LossMode.DDS
        with pytest.raises(ConfigError):
            EngineConfig.from_mappings({"loss_mode": "vsd"})

    def test_roundtrip_mapping(self):
        cfg = EngineConfig(lambda_=0.5, loss_mode=LossMode.SDS)
        again = EngineConfig.from_mappings(cfg.to_mapping())
        assert again == cfg


class TestConfigText:
    def test_basic_document(self):
        doc = """
        # engine settings
        steps = 10
        lr = 1.5          # inline comment
        loss_mode = "dds"
        use_mask = false
        seed = 42
        """
        parsed = parse_config_text(doc)
        assert parsed == {
            "steps": 10,
            "lr": 1.5,
            "loss_mode": "dds",
            "use_mask": False,
            "seed": 42,
        }

    def test_hash_inside_string_kept(self):
        assert parse_config_text('name = "a#b"') == {"name": "a#b"}

    @pytest.mark.parametrize(
        "doc",
        ["steps", "= 3", "steps = ", "[table]\nx = 1", "a = 1\na = 2", 'x = "unclosed'],
    )
    def test_malformed_rejected(self, doc):
        with pytest.raises(ConfigError):
            parse_config_text(doc)


@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=1, max_value=6))
def test_rng_replay_property(seed, dim):
    a = RngStream(seed)
    b = RngStream(seed)
    assert (a.standard_normal((dim, dim)) == b.standard_normal((dim, dim))).all()
    assert a.integer(0, 100) == b.integer(0, 100)
