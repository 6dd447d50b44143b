import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    from transition_matching.rng import rng_stream

    return rng_stream(1234, 0)
