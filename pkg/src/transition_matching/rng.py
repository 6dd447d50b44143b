"""Reproducible random streams.

Every random draw in the package goes through a :class:`numpy.random.Generator`
backed by Philox, a 64-bit counter-based bit generator. Streams are derived from
``(master_seed, stream_id)`` through :class:`numpy.random.SeedSequence`, so two
ids never share state and the same pair always replays the same sequence.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

StreamId = Union[int, Sequence[int]]


def _spawn_key(stream_id: StreamId) -> tuple[int, ...]:
    if isinstance(stream_id, (int, np.integer)):
        key = (int(stream_id),)
    else:
        key = tuple(int(s) for s in stream_id)
    if any(k < 0 for k in key):
        raise ValueError(f"stream ids must be non-negative, got {stream_id!r}")
    return key


def rng_stream(master_seed: int, stream_id: StreamId = 0) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints, which allows hierarchical
    derivation such as ``(run_id, cell_id)``.
    """
    if master_seed < 0:
        raise ValueError(f"master_seed must be non-negative, got {master_seed}")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=_spawn_key(stream_id))
    return np.random.Generator(np.random.Philox(seq))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for seeding a derived stream."""
    return int(rng.integers(0, 2**63 - 1, dtype=np.int64))
