"""Unit-power normalisation and real-valued AWGN.

Symbols are real. A complex symbol with per-complex-component variance σ²
is the same channel as two real symbols each with variance σ²/2 at equal
SNR, so modelling reals with variance 10^(-SNR/10) under unit average
power loses nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .tensor import Tensor, add, make_op

NOISELESS = math.inf


@dataclass(frozen=True)
class ChannelConfig:
    snr_set_db: Tuple[float, ...] = (1.0, 3.0, 5.0, 7.0)
    noise_seed: int = 0

    def __post_init__(self):
        if not self.snr_set_db:
            raise ValueError("snr_set_db must be non-empty")
        if not all(math.isfinite(s) for s in self.snr_set_db):
            raise ValueError("snr_set_db values must be finite")
        object.__setattr__(self, "snr_set_db", tuple(float(s) for s in self.snr_set_db))


@dataclass
class NoiseDraw:
    snr_db: float
    sigma2: float
    sample: np.ndarray = field(repr=False)


def snr_to_sigma2(snr_db: float) -> float:
    """Per-component noise variance at unit signal power."""
    if snr_db == NOISELESS:
        return 0.0
    if not math.isfinite(snr_db):
        raise ValueError(f"snr must be finite or +inf, got {snr_db}")
    return 10.0 ** (-snr_db / 10.0)


def normalize_power(x: Tensor) -> Tensor:
    """Scale each row (last axis) to mean square 1: x·√n/‖x‖₂."""
    xd = x.data
    n = xd.shape[-1]
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise ValueError("cannot normalise an all-zero latent")
    s = math.sqrt(n) / norm
    out = xd * s

    def bw(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return (s * g - s * dot * xd / (norm * norm),)

    return make_op(out, (x,), bw, "normalize_power")


def draw_noise(shape: Sequence[int], snr_db: float, rng: np.random.Generator) -> NoiseDraw:
    sigma2 = snr_to_sigma2(snr_db)
    if sigma2 == 0.0:
        return NoiseDraw(snr_db, 0.0, np.zeros(tuple(shape)))
    return NoiseDraw(snr_db, sigma2, rng.standard_normal(tuple(shape)) * math.sqrt(sigma2))


def transmit(x: Tensor, snr_db: float, rng: np.random.Generator) -> Tensor:
    """Y = X + N. The noise is a constant, so dY/dX is the identity."""
    noise = draw_noise(x.shape, snr_db, rng)
    if noise.sigma2 == 0.0:
        return x
    return add(x, Tensor(noise.sample))


def sample_snr(config: ChannelConfig, rng: np.random.Generator) -> float:
    """Uniform pick from the configured SNR set (one per training batch)."""
    return config.snr_set_db[int(rng.integers(len(config.snr_set_db)))]
