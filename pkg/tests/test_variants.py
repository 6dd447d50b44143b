import numpy as np
import pytest
import torch

from transition_matching import net
from transition_matching.errors import ConfigError, NumericError
from transition_matching.oracle import GmmTarget, gaussian_posterior_sample, gmm_marginal_velocity
from transition_matching.processes import Scheduler
from transition_matching.rng import rng_stream
from transition_matching.variants import (
    BATCH_BUILDERS,
    VariantConfig,
    dtm_sample,
    dtm_train_step,
    euler_transport,
    fhtm_sample,
    init_train_state,
    sample,
    train_step,
)

SMALL = dict(width=16, head_width=16, d_time=8)
GMM_LIKE = GmmTarget([0.5, 0.5], [[-1.0, 1.0], [1.0, -1.0]], [[0.04, 0.04], [0.04, 0.04]])


def small_state(kind, T=3, seed=0, **variant):
    cfg = VariantConfig(kind, T, **variant)
    return init_train_state(cfg, seed, rng_stream(seed, 1), **SMALL)


class TestConfig:
    def test_defaults(self):
        assert VariantConfig("dtm", 4).process == "dependent"
        assert VariantConfig("artm", 4).process == "independent"
        assert VariantConfig("fhtm", 4).process == "full_history"

    @pytest.mark.parametrize("kw", [
        dict(kind="gan", T=2), dict(kind="dtm", T=0), dict(kind="dtm", T=2, n=3),
        dict(kind="dtm", T=2, head_steps=0), dict(kind="dtm", T=2, solver="rk4"),
        dict(kind="artm", T=2, continuous_time=True),
        dict(kind="artm", T=2, process="dependent"),
        dict(kind="dtm", T=2, process="independent", allow_process_override=True),
        dict(kind="artm", T=2, process="wiggly", allow_process_override=True),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            VariantConfig(**kw)

    def test_ablation_override(self):
        cfg = VariantConfig("artm", 3, process="dependent", allow_process_override=True)
        assert cfg.process == "dependent"


class TestBatches:
    def test_dtm_target_is_difference(self):
        cfg = VariantConfig("dtm", 4)
        x_T = rng_stream(0).standard_normal((64, 2))
        b = BATCH_BUILDERS["dtm"](cfg, x_T, rng_stream(1))
        x_t = b.tokens.reshape(64, 2)
        y = b.target.reshape(64, 2)
        x0 = x_T - y
        np.testing.assert_allclose(x_t, (1 - b.time[:, None]) * x0 + b.time[:, None] * x_T, atol=1e-12)
        assert set(np.round(b.time * 4).astype(int)) <= {0, 1, 2, 3}

    def test_continuous_time_ratios(self):
        cfg = VariantConfig("dtm", 4, continuous_time=True)
        b = BATCH_BUILDERS["dtm"](cfg, np.zeros((256, 2)), rng_stream(2))
        assert len(np.unique(b.time)) == 256 and np.all((b.time >= 0) & (b.time < 1))

    def test_artm_layout(self):
        cfg = VariantConfig("artm", 4, n=2)
        b = BATCH_BUILDERS["artm"](cfg, np.ones((8, 2)), rng_stream(3))
        assert b.tokens.shape == (8, 3, 1) and list(b.positions) == [1, 2]
        # the fed next-state prefix is the first token of the target
        np.testing.assert_array_equal(b.tokens[:, 2], b.target[:, 0])

    def test_fhtm_teacher_forcing(self):
        cfg = VariantConfig("fhtm", 3, n=2)
        b = BATCH_BUILDERS["fhtm"](cfg, np.ones((5, 2)), rng_stream(4))
        assert b.tokens.shape == (5, 7, 1) and b.target.shape == (5, 6, 1)
        np.testing.assert_array_equal(b.tokens[:, 2:], b.target[:, :-1])
        np.testing.assert_array_equal(b.target[:, -2:, 0], np.ones((5, 2)))

    def test_fm_batch_has_no_head_inputs(self):
        b = BATCH_BUILDERS["fm"](VariantConfig("fm", 4), np.zeros((4, 2)), rng_stream(5))
        assert b.s is None


class TestTraining:
    @pytest.mark.parametrize("kind", ["dtm", "artm", "fhtm", "fm"])
    def test_first_loss_is_target_energy(self, kind):
        # zero-initialised output layers predict 0, so the loss is E||B - B_0||^2 per position
        st = small_state(kind)
        x_T = rng_stream(6).standard_normal((4096, 2))
        batch = BATCH_BUILDERS[kind](st.config, x_T, rng_stream(7))
        want = np.mean(np.sum((batch.target - batch.noise) ** 2, axis=-1))
        assert float(net.cfm_objective(st.model, batch).detach()) == pytest.approx(want, rel=1e-5)

    @pytest.mark.parametrize("kind", ["dtm", "artm", "fhtm", "fm"])
    def test_short_run_reduces_loss(self, kind):
        st = small_state(kind)
        st.opt.lr = 3e-3
        data = rng_stream(8)
        losses = [train_step(st, GMM_LIKE.sample(128, data)) for _ in range(150)]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_deterministic_given_seed(self):
        runs = []
        for _ in range(2):
            st = small_state("dtm")
            data = rng_stream(9)
            runs.append([train_step(st, GMM_LIKE.sample(32, data)) for _ in range(5)])
        assert runs[0] == runs[1]

    def test_kind_checked_step(self):
        with pytest.raises(ConfigError):
            dtm_train_step(small_state("fm"), np.zeros((4, 2)))

    def test_divergence_raises(self):
        st = small_state("dtm")
        with pytest.raises(NumericError):
            train_step(st, np.full((4, 2), np.inf))


class TestSampling:
    @pytest.mark.parametrize("kind,T", [("dtm", 3), ("artm", 3), ("fhtm", 3), ("fm", 3)])
    def test_backbone_calls_per_sample(self, kind, T):
        st = small_state(kind, T)
        st.model.reset_counters()
        x = sample(st.model, st.config, 10, rng_stream(10))
        per_state = 1 if kind in ("dtm", "fm") else st.config.n
        assert x.shape == (10, 2) and st.model.backbone_calls == T * per_state

    def test_dtm_overrides(self):
        st = small_state("dtm", 4)
        st.model.reset_counters()
        dtm_sample(st.model, st.config, 5, rng_stream(11), T=16, head_steps=2)
        assert st.model.backbone_calls == 16 and st.model.head_calls == 16 * 2 * 2  # midpoint: two evals per step

    def test_sampling_deterministic(self):
        st = small_state("artm")
        a = sample(st.model, st.config, 6, rng_stream(12))
        b = sample(st.model, st.config, 6, rng_stream(12))
        np.testing.assert_array_equal(a, b)

    def test_fhtm_history_grows(self):
        st = small_state("fhtm", 3)
        x, hist, lengths = fhtm_sample(st.model, st.config, 4, rng_stream(13), return_history=True)
        assert lengths == [2, 4, 6, 8] and hist.shape == (4, 8, 1)
        np.testing.assert_array_equal(x, hist[:, -2:, 0])

    def test_oracle_dtm_single_step_hits_target(self):
        target = GmmTarget.gaussian([1.0, -2.0], [0.5, 0.3])
        cfg = VariantConfig("dtm", 1)

        def post(x, r, rng):
            return gaussian_posterior_sample(target, x, r, rng, bound=None)

        x = dtm_sample(None, cfg, 100_000, rng_stream(14), posterior=post)
        np.testing.assert_allclose(x.mean(0), [1.0, -2.0], atol=0.01)
        np.testing.assert_allclose(x.std(0), [0.5, 0.3], rtol=0.01)

    def test_oracle_fm_transport(self):
        target = GmmTarget.gaussian([1.0, -2.0], [0.5, 0.3])
        x0 = rng_stream(15).standard_normal((50_000, 2))
        x = euler_transport(lambda z, r: gmm_marginal_velocity(target, z, r), x0, Scheduler("uniform", 256))
        np.testing.assert_allclose(x.mean(0), [1.0, -2.0], atol=0.01)
        np.testing.assert_allclose(x.std(0), [0.5, 0.3], rtol=0.02)

    def test_non_finite_chain_reports_step(self):
        cfg = VariantConfig("dtm", 4)
        calls = []

        def post(x, r, rng):
            calls.append(r)
            return np.full_like(x, np.inf if len(calls) == 3 else 0.0)

        with pytest.raises(NumericError) as info:
            dtm_sample(None, cfg, 3, rng_stream(16), posterior=post)
        assert info.value.index == 2
