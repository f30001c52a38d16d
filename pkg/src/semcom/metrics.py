"""Reconstruction quality: MSE, PSNR and SNR-sweep evaluation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .channel import draw_noise, normalize_power
from .data import Dataset
from .model import ModelConfig, ParameterSet, decode, encode
from .tensor import Tensor, no_grad


@dataclass
class MetricsRecord:
    regimen: str
    seed: int
    phase: str
    epoch: int
    snr_db: Optional[float]
    split: str
    mse: float
    psnr_db: float


def psnr_from_mse(mse: float, max_value: float = 1.0) -> float:
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def psnr(ref: np.ndarray, rec: np.ndarray, max_value: float = 1.0) -> float:
    ref, rec = np.asarray(ref, dtype=np.float64), np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {rec.shape}")
    diff = ref - rec
    return psnr_from_mse(float(np.mean(diff * diff)), max_value)


def snr_key(snr_db: float) -> int:
    return int.from_bytes(struct.pack("<d", float(snr_db)), "little")


def eval_noise_stream(eval_seed: int, index: int, snr_db: float) -> np.random.Generator:
    """Fixed noise source for one (test image, SNR) pair."""
    return rngmod.stream(eval_seed, "eval", index, snr_key(snr_db))


def _sweep(params: ParameterSet, config: ModelConfig, which: str, test: Dataset,
           snrs: Sequence[float], eval_seed: int, batch_size: int):
    """Yield (start index, snr, clamped reconstructions) batch by batch."""
    if len(test) == 0:
        raise ValueError("empty test set")
    h, w = test.extent
    with no_grad():
        for start in range(0, len(test), batch_size):
            imgs = test.images[start:start + batch_size]
            x = normalize_power(encode(imgs, params, config)).data
            for s in snrs:
                noise = np.stack([draw_noise(x.shape[1:], s, eval_noise_stream(eval_seed, start + i, s)).sample
                                  for i in range(x.shape[0])])
                rec = decode(Tensor(x + noise), params, config, which, h, w).data
                yield start, s, np.clip(rec, 0.0, 1.0)


def evaluate(params: ParameterSet, config: ModelConfig, which: str, test: Dataset,
             snrs: Sequence[float], eval_seed: int, batch_size: int = 16, *,
             regimen: str = "", seed: int = 0, phase: str = "", epoch: int = 0) -> List[MetricsRecord]:
    """Mean per-image MSE and mean per-image PSNR for each SNR.

    Reconstructions are clamped to [0, 1] before measuring.
    """
    per_snr = {s: ([], []) for s in snrs}
    for start, s, rec in _sweep(params, config, which, test, snrs, eval_seed, batch_size):
        imgs = test.images[start:start + rec.shape[0]]
        err = ((rec - imgs) ** 2).reshape(rec.shape[0], -1).mean(axis=1)
        per_snr[s][0].extend(err.tolist())
        per_snr[s][1].extend(psnr_from_mse(e) for e in err)
    out = []
    for s in sorted(snrs):
        mses, psnrs = per_snr[s]
        out.append(MetricsRecord(regimen, seed, phase, epoch, float(s), test.split,
                                 float(np.mean(mses)), float(np.mean(psnrs))))
    return out


def reconstruct(params: ParameterSet, config: ModelConfig, which: str, test: Dataset,
                snrs: Sequence[float], eval_seed: int, batch_size: int = 16) -> Dict[float, np.ndarray]:
    """Clamped reconstructions per SNR, using the same noise as ``evaluate``."""
    parts: Dict[float, list] = {s: [] for s in snrs}
    for _, s, rec in _sweep(params, config, which, test, snrs, eval_seed, batch_size):
        parts[s].append(rec)
    return {s: np.concatenate(v) for s, v in parts.items()}
