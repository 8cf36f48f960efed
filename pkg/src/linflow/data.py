"""Toy training distribution: two-mode noisy sinusoid sequences.

A sample is a length-`seq_len` sequence of 2-d tokens. Channel 0 holds
jittered grid positions spanning [-1, 1]; channel 1 is a sine over those
positions whose sign flips between the two equiprobable modes. Conditioned
on the mode, every token coordinate is an independent Gaussian around the
mode pattern — so the flattened sample distribution is exactly a
2-component diagonal Gaussian mixture, and its parameters are exported for
closed-form reference computations.
"""

from __future__ import annotations

import numpy as np

AMPLITUDE = 0.8
POSITION_JITTER = 0.05
VALUE_NOISE = 0.1


def mode_patterns(seq_len: int = 16) -> np.ndarray:
    """The two mode means, shaped (2, seq_len, 2)."""
    pos = np.linspace(-1.0, 1.0, seq_len)
    wave = AMPLITUDE * np.sin(np.pi * pos)
    up = np.stack([pos, wave], axis=-1)
    down = np.stack([pos, -wave], axis=-1)
    return np.stack([up, down])


def token_sigmas(seq_len: int = 16) -> np.ndarray:
    """Per-token standard deviations, shaped (seq_len, 2)."""
    return np.broadcast_to(np.array([POSITION_JITTER, VALUE_NOISE]),
                           (seq_len, 2)).copy()


def mixture_params(seq_len: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(weights (2,), means (2, D), per-dim variances (2, D)) over the
    flattened D = seq_len * 2 coordinates."""
    means = mode_patterns(seq_len).reshape(2, -1)
    var = np.tile(token_sigmas(seq_len).reshape(1, -1) ** 2, (2, 1))
    return np.array([0.5, 0.5]), means, var


def sample_batch(rng: np.random.Generator, batch: int, seq_len: int = 16,
                 dtype=np.float32) -> np.ndarray:
    """Draw (batch, seq_len, 2) samples."""
    patterns = mode_patterns(seq_len)
    modes = rng.integers(0, 2, size=batch)
    noise = rng.standard_normal((batch, seq_len, 2)) * token_sigmas(seq_len)
    return (patterns[modes] + noise).astype(dtype)
