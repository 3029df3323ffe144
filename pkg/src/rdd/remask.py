"""Confidence-guided re-masking of a revived region after rollback.

Each committed token is independently returned to the mask state with
probability 1 - p^lambda, where p is the confidence recorded when the token
was committed. Certain tokens (p = 1) are never re-masked; shaky ones almost
always are. Draws come from a dedicated seeded stream owned by the decode
session, so re-mask decisions are reproducible regardless of the denoiser.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError
from .types import TokenBuffer

# Stream tag separating re-mask draws from any other randomness tied to the
# same session seed.
_REMASK_STREAM_TAG = 0x5EED


def remask_stream(seed: int) -> np.random.Generator:
    """Dedicated seeded stream for re-mask draws of one decode session."""
    return np.random.default_rng([seed, _REMASK_STREAM_TAG])


def remask_probability(p_conf: float, lambda_: float) -> float:
    """Probability that a token committed at confidence p_conf is re-masked."""
    if not 0.0 < p_conf <= 1.0:
        raise UsageError(f"commit confidence must be in (0, 1], got {p_conf}")
    if lambda_ <= 0:
        raise UsageError(f"lambda must be positive, got {lambda_}")
    return 1.0 - p_conf ** lambda_


def apply_remask(
    buffer: TokenBuffer,
    region: tuple[int, int],
    lambda_: float,
    rng: np.random.Generator,
) -> list[int]:
    """Independently re-mask committed positions in [region[0], region[1]).

    Positions that are already masked are skipped and consume no randomness;
    chained rollbacks revisit regions that contain holes from earlier draws.
    Mutates the buffer in place and returns the re-masked positions ascending.
    """
    start, end = region
    if start < buffer.prompt_len:
        raise UsageError(f"re-mask region [{start}, {end}) overlaps the prompt")
    if end > len(buffer):
        raise UsageError(f"re-mask region [{start}, {end}) exceeds the buffer")
    committed = [i for i in range(start, end) if not buffer.is_masked(i)]
    if not committed:
        return []
    draws = rng.random(len(committed))
    hit = []
    for i, u in zip(committed, draws):
        p = buffer.commit_confidence[i]
        if p is None:
            raise UsageError(f"position {i} committed without a stored confidence")
        if u < remask_probability(p, lambda_):
            buffer.remask_position(i)
            hit.append(i)
    return hit


def apply_random_remask(
    buffer: TokenBuffer,
    region: tuple[int, int],
    ratio: float,
    block_len: int,
    rng: np.random.Generator,
) -> list[int]:
    """Fixed-ratio baseline: re-mask ceil(ratio * block_len) committed positions
    sampled uniformly without replacement. Comparison baseline only, not a
    supported decoding mode."""
    start, end = region
    if start < buffer.prompt_len:
        raise UsageError(f"re-mask region [{start}, {end}) overlaps the prompt")
    if not 0.0 <= ratio <= 1.0:
        raise UsageError(f"random re-mask ratio must be in [0, 1], got {ratio}")
    committed = [i for i in range(start, end) if not buffer.is_masked(i)]
    k = min(len(committed), math.ceil(ratio * block_len))
    if k == 0:
        return []
    picked = sorted(rng.choice(len(committed), size=k, replace=False).tolist())
    hit = [committed[j] for j in picked]
    for i in hit:
        buffer.remask_position(i)
    return hit
