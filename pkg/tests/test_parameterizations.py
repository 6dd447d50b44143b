import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transition_matching.errors import ConfigError, ShapeError
from transition_matching.parameterizations import (
    check_pairing,
    difference_latent,
    dtm_reconstruct,
    next_state_latent,
    next_state_reconstruct,
)
from transition_matching.processes import Scheduler, independent_linear_pair, linear_pair

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_difference_identity_case():
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(difference_latent(x, x), np.zeros(2))


def test_difference_elementwise():
    np.testing.assert_array_equal(difference_latent([0.0, 1.0], [2.0, 1.0]), [2.0, 0.0])


def test_difference_shape_mismatch():
    with pytest.raises(ShapeError):
        difference_latent(np.zeros(2), np.zeros(3))


def test_single_step_reconstruction_hits_data():
    x0, x_T = np.array([0.1, -0.4]), np.array([2.0, 3.0])
    out = dtm_reconstruct(x0, difference_latent(x0, x_T), Scheduler("uniform", 1), 0)
    np.testing.assert_array_equal(out, x_T)


def test_reconstruct_example():
    assert dtm_reconstruct(np.array([1.0]), np.array([0.5]), Scheduler("uniform", 2), 0)[0] == 1.25


def test_zero_latent_is_identity():
    x = np.array([0.2, 0.7])
    np.testing.assert_array_equal(dtm_reconstruct(x, np.zeros(2), Scheduler("exponential", 3), 1), x)


@pytest.mark.parametrize("kind", ["uniform", "exponential"])
def test_telescoping(kind):
    sched = Scheduler(kind, 9)
    rng = np.random.default_rng(0)
    x0, x_T = rng.standard_normal(4), rng.standard_normal(4)
    y = difference_latent(x0, x_T)
    x = x0
    for t in range(sched.T):
        x = dtm_reconstruct(x, y, sched, t)
    np.testing.assert_allclose(x, x_T, atol=1e-14)


def test_reconstruct_validates():
    with pytest.raises(ShapeError):
        dtm_reconstruct(np.zeros(2), np.zeros(3), Scheduler("uniform", 2), 0)
    with pytest.raises(IndexError):
        dtm_reconstruct(np.zeros(2), np.zeros(2), Scheduler("uniform", 2), 2)


def test_dependent_pair_law_per_sample(rng):
    # (x_t, x_t + y/T) equals (x_t, x_{t+1}) sample by sample under the dependent process
    sched = Scheduler("uniform", 8)
    x_T = rng.standard_normal((500, 3))
    t = rng.integers(0, 8, 500)
    x0, x_t, x_next = linear_pair(x_T, t, sched, rng)
    np.testing.assert_allclose(dtm_reconstruct(x_t, difference_latent(x0, x_T), sched, t), x_next, atol=1e-14)
    np.testing.assert_allclose(x_t + (x_T - x0) / 8, x_next, atol=1e-14)


@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite), finite)
def test_difference_translation_equivariant(x0, x_T, c):
    np.testing.assert_allclose(difference_latent(x0 + c, x_T + c), difference_latent(x0, x_T), atol=1e-9)


def test_next_state_identity(rng):
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(next_state_latent(x), x)
    np.testing.assert_array_equal(next_state_reconstruct(rng.standard_normal(5), x), x)


def test_next_state_round_trip_bit_exact(rng):
    _, x_next = independent_linear_pair(rng.standard_normal((4, 2)), 1, Scheduler("uniform", 3), rng)
    out = next_state_reconstruct(np.zeros_like(x_next), next_state_latent(x_next))
    assert out.tobytes() == x_next.tobytes()


@pytest.mark.parametrize("latent,process,ok", [
    ("difference", "dependent", True), ("difference", "independent", False),
    ("next_state", "independent", True), ("next_state", "full_history", True),
    ("next_state", "dependent", False), ("noise", "dependent", False),
])
def test_pairing(latent, process, ok):
    if ok:
        check_pairing(latent, process)
    else:
        with pytest.raises(ConfigError):
            check_pairing(latent, process)
