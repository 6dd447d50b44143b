import math

import numpy as np
import pytest
import torch

from transition_matching import net
from transition_matching.errors import ConfigError, NumericError, ShapeError
from transition_matching.rng import rng_stream
from transition_matching.variants import VariantConfig
from transition_matching.verify import (
    GRADCHECK_TOL,
    corrupted_mask,
    gradient_errors,
    probe_batch,
    suite_masks,
    tiny_model,
    tiny_variant,
)


def small_config(**kw):
    base = dict(token_dim=1, n_tokens=2, max_len=2, width=16, head_width=16, d_time=8)
    base.update(kw)
    return net.ModelConfig(**base)


class TestMasks:
    def test_full(self):
        assert net.attention_mask(4, "full", 4).all()

    def test_fh_causal_is_lower_triangular(self):
        m = net.attention_mask(5, "fh_causal", 2)
        assert torch.equal(m, torch.ones(5, 5, dtype=torch.bool).tril())

    def test_artm_causal(self):
        m = net.attention_mask(5, "artm_causal", 3).int()
        want = torch.tensor([
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
        ])
        assert torch.equal(m, want)

    def test_suite_passes_and_detects_corruption(self):
        assert all(c.passed for c in suite_masks(0))
        assert not all(c.passed for c in suite_masks(0, mask_builder=corrupted_mask))


class TestModel:
    def test_zero_init_head_output(self):
        model = net.build_model(small_config())
        h = model.backbone(torch.randn(3, 2, 1), torch.rand(3))
        v = net.head_velocity(model, torch.randn(3, 2, 1), 0.3, torch.rand(3, 2), h)
        assert torch.count_nonzero(v) == 0

    def test_same_seed_same_weights(self):
        a = net.build_model(small_config(), seed=4)
        b = net.build_model(small_config(), seed=4)
        c = net.build_model(small_config(), seed=5)
        pa, pb, pc = (torch.cat([p.flatten() for p in m.parameters()]) for m in (a, b, c))
        assert torch.equal(pa, pb) and not torch.equal(pa, pc)

    def test_head_is_small(self):
        model = net.build_model(small_config(width=64, head_width=32, layers=2))
        back, head = model.parameter_count()
        assert 0 < head < back

    @pytest.mark.parametrize("kw", [dict(mask="bogus"), dict(head_depth=2), dict(head_depth=7), dict(d_time=7),
                                    dict(max_len=1)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)

    def test_shape_errors(self):
        model = net.build_model(small_config())
        with pytest.raises(ShapeError):
            model.backbone(torch.randn(2, 3, 1), torch.rand(2))
        with pytest.raises(ShapeError):
            model.backbone(torch.randn(2, 2, 2), torch.rand(2))
        with pytest.raises(ShapeError):
            model.backbone(torch.randn(2, 2, 1))

    def test_counters(self):
        model = net.build_model(small_config())
        for _ in range(3):
            model.backbone(torch.randn(1, 2, 1), torch.rand(1))
        assert model.backbone_calls == 3
        model.reset_counters()
        assert model.backbone_calls == 0


@pytest.mark.parametrize("kind", ["dtm", "artm", "fhtm", "fm"])
def test_gradients_match_finite_differences(kind):
    cfg = tiny_variant(kind)
    rng = rng_stream(7, 0)
    model = tiny_model(cfg, 7)
    errs = gradient_errors(model, probe_batch(cfg, 4, rng), rng)
    assert max(errs.values()) < GRADCHECK_TOL


def test_loss_is_nonnegative_and_zero_for_exact_field():
    cfg = tiny_variant("dtm")
    batch = probe_batch(cfg, 8, rng_stream(0))
    model = tiny_model(cfg, 0)
    assert float(net.cfm_objective(model, batch).detach()) >= 0
    batch.target = batch.noise.copy()
    # with B == B_0 the target velocity is zero, which the zero-init head reproduces
    fresh = tiny_model(cfg, 0, randomize=False)
    assert float(net.cfm_objective(fresh, batch).detach()) == 0.0


def test_non_finite_loss_reports_row():
    cfg = tiny_variant("dtm")
    batch = probe_batch(cfg, 4, rng_stream(0))
    batch.target[2, 0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        net.cfm_objective(tiny_model(cfg, 0), batch)
    assert info.value.index == 2


def test_batch_validation():
    cfg = tiny_variant("dtm")
    batch = probe_batch(cfg, 4, rng_stream(0))
    with pytest.raises(ShapeError):
        net.Batch(batch.tokens, batch.time, batch.positions, batch.target[:, :1], batch.noise, batch.s)
    with pytest.raises(ValueError):
        net.Batch(batch.tokens, batch.time, batch.positions, batch.target, batch.noise, batch.s + 2)


class TestIntegrate:
    @pytest.mark.parametrize("solver,order", [("euler", 1), ("midpoint", 2)])
    def test_convergence_order(self, solver, order):
        # db/ds = -b, exact b(1) = exp(-1)
        errs = [abs(net.integrate(lambda b, s: -b, 1.0, n, solver) - math.exp(-1)) for n in (8, 16, 32, 64)]
        slope = np.polyfit(np.log([8, 16, 32, 64]), np.log(errs), 1)[0]
        assert abs(slope + order) < 0.1

    def test_constant_field_exact(self):
        for solver in net.SOLVERS:
            assert net.integrate(lambda b, s: 2.5, 1.0, 3, solver) == pytest.approx(3.5, abs=1e-15)

    def test_time_dependent_field(self):
        # db/ds = s gives b(1) = 1/2; midpoint is exact on linear fields
        assert net.integrate(lambda b, s: s, 0.0, 5, "midpoint") == pytest.approx(0.5, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            net.integrate(lambda b, s: b, 1.0, 0)
        with pytest.raises(ConfigError):
            net.integrate(lambda b, s: b, 1.0, 2, "rk4")
        with pytest.raises(NumericError) as info:
            net.integrate(lambda b, s: np.inf * b, np.ones(2), 4)
        assert info.value.index == 0


class TestOptimizer:
    def _model(self):
        return tiny_model(tiny_variant("dtm"), 3)

    def test_zero_gradient_is_fixed_point(self):
        model = self._model()
        before = [p.detach().clone() for p in model.parameters()]
        st = net.make_optimizer(model, 1e-2)
        for _ in range(5):
            net.optimizer_step(model, {n: torch.zeros_like(p) for n, p in model.named_parameters()}, st)
        assert all(torch.equal(a, p) for a, p in zip(before, model.parameters()))

    def test_deterministic(self):
        cfg = tiny_variant("dtm")
        batch = probe_batch(cfg, 8, rng_stream(1))
        out = []
        for _ in range(2):
            model = self._model()
            st = net.make_optimizer(model, 1e-2)
            for _ in range(5):
                _, g = net.cfm_loss(model, batch)
                net.optimizer_step(model, g, st)
            out.append(torch.cat([p.detach().flatten() for p in model.parameters()]))
        assert torch.equal(out[0], out[1])

    def test_quadratic_converges(self):
        theta = torch.nn.Parameter(torch.tensor([3.0, -2.0], dtype=torch.float64))
        module = torch.nn.Module()
        module.theta = theta
        st = net.make_optimizer(module, 0.05)
        for _ in range(2000):
            net.optimizer_step(module, {"theta": 2 * theta.detach()}, st)
        assert theta.detach().abs().max() < 1e-3

    def test_shape_mismatch(self):
        model = self._model()
        st = net.make_optimizer(model, 1e-3)
        grads = {n: torch.zeros(1, dtype=p.dtype) for n, p in model.named_parameters()}
        with pytest.raises(ShapeError):
            net.optimizer_step(model, grads, st)

    def test_schedule(self):
        st = net.make_optimizer(self._model(), 1.0, warmup=4, total_steps=10, decay="cosine")
        lrs = []
        for k in range(10):
            st.step = k
            lrs.append(st.current_lr())
        assert lrs[:4] == [0.25, 0.5, 0.75, 1.0]
        assert all(a >= b for a, b in zip(lrs[3:], lrs[4:])) and lrs[-1] == pytest.approx(0.0, abs=1e-12)


def test_variant_model_layouts():
    from transition_matching.variants import model_config
    assert model_config(VariantConfig("fhtm", 3)).max_len == 7
    assert model_config(VariantConfig("artm", 3)).max_len == 3
    assert model_config(VariantConfig("fm", 3)).head is False
    assert model_config(VariantConfig("fhtm", 3)).use_time is False
