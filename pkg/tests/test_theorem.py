import numpy as np
import pytest

from transition_matching.errors import ConfigError
from transition_matching.oracle import GmmTarget
from transition_matching.rng import rng_stream
from transition_matching.theorem import (
    CURVE_COLUMNS,
    HARNESS_H,
    HARNESS_TARGET,
    chain_ratios,
    convergence_curve,
    f0,
    fm_euler_chain,
    lipschitz_estimate,
    moment_check,
    run_dtm_chain,
    sqrt_k_rule,
    taylor_residuals,
)


def test_k_rule_values():
    assert [sqrt_k_rule(h) for h in HARNESS_H] == [4, 6, 8, 12, 16, 23, 32]
    assert all(sqrt_k_rule(h) * h <= 0.5 for h in HARNESS_H)


def test_chain_ends_at_kh():
    r = chain_ratios(2.0**-6, 8)
    assert r[-1] == 8 * 2.0**-6 and len(r) == 9


def test_chain_rejects_long_horizon():
    with pytest.raises(ConfigError):
        run_dtm_chain(HARNESS_TARGET, 0.0, 0.1, 6, rng_stream(0))


def test_gaussian_chain_mean_follows_euler():
    # the posterior mean is affine in the state, so the mean chain is the Euler chain
    target = GmmTarget.gaussian(0.0, 1.0)
    x, h, k, n = 1.5, 2.0**-8, 16, 50_000
    assert f0(target, x)[0] == pytest.approx(-1.5)
    end = run_dtm_chain(target, x, h, k, rng_stream(1), n, bound=None)
    want = fm_euler_chain(target, x, h, k)[0]
    assert abs(end.mean() - want) < 3 * end.std() / np.sqrt(n)


def test_one_step_unbiased():
    n = 100_000
    inc = (run_dtm_chain(HARNESS_TARGET, 0.5, 0.25, 1, rng_stream(2), n) - 0.5) / 0.25
    assert abs(inc.mean() - f0(HARNESS_TARGET, 0.5)[0]) < 3 * inc.std() / np.sqrt(n)


def test_curve_shape_and_csv(tmp_path):
    run = convergence_curve(HARNESS_TARGET, 0.0, HARNESS_H[:3], sqrt_k_rule, 2000, rng_stream(3))
    assert run.mse.shape == (3,) and np.all(run.ci_lo <= run.mse) and np.all(run.mse <= run.ci_hi)
    run.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == ",".join(CURVE_COLUMNS) and len(lines) == 4


def test_curve_rejects_increasing_h():
    with pytest.raises(ConfigError):
        convergence_curve(HARNESS_TARGET, 0.0, [0.01, 0.02], sqrt_k_rule, 100, rng_stream(4))


def test_curve_rejects_bad_k_rule():
    with pytest.raises(ConfigError):
        convergence_curve(HARNESS_TARGET, 0.0, [0.1], lambda h: 10, 100, rng_stream(4))


def test_error_halves_when_h_quartered():
    run = convergence_curve(HARNESS_TARGET, 2.0, [2.0**-6, 2.0**-8], sqrt_k_rule, 20_000, rng_stream(5))
    assert 1.5 <= run.quarter_ratios()[0] <= 3.0


def test_moment_bounds():
    chk = moment_check(HARNESS_TARGET, -1.0, 2.0**-5, 6, 5000, rng_stream(6))
    assert chk.passed


def test_euler_taylor_order():
    kh, res = taylor_residuals(HARNESS_TARGET, -1.0, HARNESS_H, sqrt_k_rule)
    slope = np.polyfit(np.log(kh), np.log(res), 1)[0]
    assert abs(slope - 2.0) < 0.3


def test_euler_exact_on_straight_path():
    # from the source mean toward a Gaussian with the same spread the path is a straight line
    end = fm_euler_chain(HARNESS_TARGET, 0.0, 2.0**-6, 8)
    assert end[0] == pytest.approx(8 * 2.0**-6 * f0(HARNESS_TARGET, 0.0)[0], abs=1e-14)


def test_lipschitz_estimate_stable():
    a = lipschitz_estimate(HARNESS_TARGET, -3, 3)
    b = lipschitz_estimate(HARNESS_TARGET, -3, 3, n_x=161, n_r=81)
    assert np.isfinite(a) and abs(a - b) < 0.05 * a
