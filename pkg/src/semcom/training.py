"""Training regimens for one encoder shared by a deep and a shallow decoder.

Regimens
--------
alone
    encoder + dec2 only, T epochs.
iterative
    2T epochs alternating the decoder trained with the encoder: odd epochs
    (enc, dec1), even epochs (enc, dec2).
proposed
    phase 1: encoder + dec1 for T epochs; phase 2: encoder and dec1 frozen,
    dec2 trained for T epochs.
proposed+transfer / proposed+transfer-frozen
    as proposed, with dec1's last two source-decoder stages and unembedding
    head copied into dec2 before phase 2 (and frozen in the -frozen variant).
proposed+kd
    as proposed, with phase-2 loss MSE(I, Î2) + alpha·MSE(Î1, Î2), the
    teacher dec1 decoding the same received symbols as the student.

Randomness comes from named streams of ``master_seed`` (shuffle and noise per
phase, init for parameters), so regimens that differ only in the loss see the
same batches, SNRs and noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from .channel import ChannelConfig, normalize_power, sample_snr, transmit
from .data import Dataset, batches
from .metrics import MetricsRecord, evaluate, psnr_from_mse
from .model import (ConfigError, ModelConfig, ParameterSet, build, decode, encode, set_trainable,
                    transfer_prefixes, transfer_stages)
from .optim import Adam
from .tensor import NonFiniteError, Tensor, add, backward, mse, no_grad, scale

log = logging.getLogger(__name__)

REGIMENS = ("alone", "iterative", "proposed", "proposed+transfer", "proposed+transfer-frozen",
            "proposed+kd")
PROPOSED_FAMILY = tuple(r for r in REGIMENS if r.startswith("proposed"))
TRANSFER_MODES = ("none", "copy", "copy+freeze")


class TrainingAborted(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 5e-4
    batch_size: int = 8
    alpha: float = 0.5
    regimen: str = "proposed"
    master_seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.regimen not in REGIMENS:
            raise ValueError(f"unknown regimen {self.regimen!r}; choose from {', '.join(REGIMENS)}")


@dataclass
class TrainLog:
    records: List[MetricsRecord] = field(default_factory=list)

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)

    def select(self, phase: Optional[str] = None, split: Optional[str] = None) -> List[MetricsRecord]:
        return [r for r in self.records
                if (phase is None or r.phase == phase) and (split is None or r.split == split)]

    def relabel(self, regimen: str) -> "TrainLog":
        return TrainLog([_with_regimen(r, regimen) for r in self.records])


# ---------------------------------------------------------------------------
# losses


def loss_reconstruction(image, recon: Tensor) -> Tensor:
    return mse(image, recon)


def loss_distill(teacher: Tensor, student: Tensor) -> Tensor:
    """MSE between teacher and student reconstructions; the teacher must be detached."""
    if teacher.requires_grad:
        raise ValueError("teacher output must not carry gradients; decode it under no_grad()")
    return mse(teacher, student)


def loss_combined(image, student: Tensor, teacher: Tensor, alpha: float) -> Tensor:
    """Reconstruction loss plus alpha times the distillation loss, summed in that order."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return add(loss_reconstruction(image, student), scale(loss_distill(teacher, student), alpha))


# ---------------------------------------------------------------------------
# loops


@dataclass
class _Run:
    """Everything one training loop needs besides the parameters."""

    model: ModelConfig
    channel: ChannelConfig
    train: TrainConfig
    train_set: Dataset
    test_set: Dataset
    regimen: str

    def streams(self, label: str) -> Tuple[np.random.Generator, np.random.Generator]:
        seed = self.train.master_seed
        return (rngmod.stream(seed, "shuffle/" + label),
                rngmod.stream(seed, "noise/" + label, self.channel.noise_seed))

    def eval_records(self, params, which, phase, epoch) -> List[MetricsRecord]:
        return evaluate(params, self.model, which, self.test_set, self.channel.snr_set_db,
                        self.channel.noise_seed, regimen=self.regimen, seed=self.train.master_seed,
                        phase=phase, epoch=epoch)


def _train_epoch(params: ParameterSet, run: _Run, which: str, opt: Adam, shuffle, noise,
                 phase: str, epoch: int, kd_alpha: Optional[float] = None) -> float:
    h, w = run.train_set.extent
    losses = []
    for b, idx in enumerate(batches(run.train_set, run.train.batch_size, shuffle), start=1):
        imgs = run.train_set.images[idx]
        try:
            snr = sample_snr(run.channel, noise)
            x = normalize_power(encode(imgs, params, run.model))
            y = transmit(x, snr, noise)
            recon = decode(y, params, run.model, which, h, w)
            if kd_alpha is None:
                loss = loss_reconstruction(imgs, recon)
            else:
                with no_grad():
                    teacher = decode(y, params, run.model, "dec1", h, w)
                loss = loss_combined(imgs, recon, teacher, kd_alpha)
            backward(loss)
            opt.step()
        except NonFiniteError as exc:
            raise TrainingAborted(f"{phase} epoch {epoch} batch {b}: {exc}") from exc
        finally:
            opt.zero_grad()
        losses.append(loss.item())
    return float(np.mean(losses))


def _log_epoch(out: TrainLog, run: _Run, params, which, phase, epoch, loss, decoder_epoch=None):
    out.records.append(MetricsRecord(run.regimen, run.train.master_seed, phase, epoch, None, "train",
                                     loss, psnr_from_mse(loss)))
    k = epoch if decoder_epoch is None else decoder_epoch
    if k % run.train.eval_every == 0 or k == run.train.epochs:
        out.records.extend(run.eval_records(params, which, phase, epoch))
    log.info("%s %s epoch %d loss %.6f", run.regimen, phase, epoch, loss)


def _single_decoder(params: ParameterSet, run: _Run, which: str, phase: str, label: str,
                    kd_alpha: Optional[float] = None) -> TrainLog:
    opt = Adam(params, lr=run.train.learning_rate)
    shuffle, noise = run.streams(label)
    out = TrainLog()
    for epoch in range(1, run.train.epochs + 1):
        loss = _train_epoch(params, run, which, opt, shuffle, noise, phase, epoch, kd_alpha)
        _log_epoch(out, run, params, which, phase, epoch, loss)
    return out


def run_phase1(params: ParameterSet, model: ModelConfig, channel: ChannelConfig, train: TrainConfig,
               train_set: Dataset, test_set: Dataset, regimen: str = "proposed") -> TrainLog:
    """Train encoder + dec1 for T epochs; dec2 is frozen and untouched."""
    set_trainable(params, ["enc.", "dec1."], True)
    set_trainable(params, ["dec2."], False)
    run = _Run(model, channel, train, train_set, test_set, regimen)
    return _single_decoder(params, run, "dec1", "phase1", "phase1")


def run_phase2(params: ParameterSet, model: ModelConfig, channel: ChannelConfig, train: TrainConfig,
               train_set: Dataset, test_set: Dataset, kd: bool = False, transfer: str = "none",
               regimen: str = "proposed") -> TrainLog:
    """Freeze encoder + dec1, optionally seed dec2 from dec1, then train dec2 for T epochs."""
    if transfer not in TRANSFER_MODES:
        raise ValueError(f"transfer must be one of {TRANSFER_MODES}")
    set_trainable(params, ["enc.", "dec1."], False)
    set_trainable(params, ["dec2."], True)
    if transfer != "none":
        if not model.tails_match():
            raise ConfigError("transfer needs identical hcd/lcd depths in stages 3-4")
        transfer_stages(params)
        if transfer == "copy+freeze":
            set_trainable(params, transfer_prefixes(), False)
    run = _Run(model, channel, train, train_set, test_set, regimen)
    return _single_decoder(params, run, "dec2", "phase2", "phase2", train.alpha if kd else None)


def run_train_alone(params: ParameterSet, model: ModelConfig, channel: ChannelConfig, train: TrainConfig,
                    train_set: Dataset, test_set: Dataset) -> TrainLog:
    """Encoder paired only with dec2 for T epochs; dec1 untouched."""
    set_trainable(params, ["enc.", "dec2."], True)
    set_trainable(params, ["dec1."], False)
    run = _Run(model, channel, train, train_set, test_set, "alone")
    return _single_decoder(params, run, "dec2", "alone", "phase1")


def run_iterative(params: ParameterSet, model: ModelConfig, channel: ChannelConfig, train: TrainConfig,
                  train_set: Dataset, test_set: Dataset) -> TrainLog:
    """2T epochs; the encoder trains every epoch, each decoder on alternate epochs (T each)."""
    set_trainable(params, ["enc.", "dec1.", "dec2."], True)
    run = _Run(model, channel, train, train_set, test_set, "iterative")
    opt = Adam(params, lr=train.learning_rate)
    shuffle, noise = run.streams("iterative")
    out = TrainLog()
    for epoch in range(1, 2 * train.epochs + 1):
        which = "dec1" if epoch % 2 else "dec2"
        loss = _train_epoch(params, run, which, opt, shuffle, noise, "iterative", epoch)
        _log_epoch(out, run, params, which, f"iterative-{which}", epoch, loss,
                   decoder_epoch=(epoch + 1) // 2)
    return out


PhaseHook = Callable[[str, ParameterSet], None]


def run_regimen(regimen: str, model: ModelConfig, channel: ChannelConfig, train: TrainConfig,
                train_set: Dataset, test_set: Dataset, on_phase_end: Optional[PhaseHook] = None,
                phase1: Optional[Tuple[ParameterSet, TrainLog]] = None) -> Tuple[ParameterSet, TrainLog]:
    """Build fresh parameters from ``master_seed`` and run ``regimen`` end to end.

    ``phase1`` lets proposed-family regimens reuse an already trained phase-1
    result (parameters are copied, not shared).
    """
    if regimen not in REGIMENS:
        raise ValueError(f"unknown regimen {regimen!r}")
    hook = on_phase_end or (lambda name, p: None)
    if regimen in PROPOSED_FAMILY:
        if phase1 is None:
            params = build(model, train.master_seed)
            out = run_phase1(params, model, channel, train, train_set, test_set, regimen)
        else:
            params = phase1[0].copy()
            out = phase1[1].relabel(regimen)
        hook("phase1", params)
        transfer = {"proposed+transfer": "copy", "proposed+transfer-frozen": "copy+freeze"}.get(regimen, "none")
        out.extend(run_phase2(params, model, channel, train, train_set, test_set,
                              kd=regimen == "proposed+kd", transfer=transfer, regimen=regimen))
    else:
        params = build(model, train.master_seed)
        runner = run_iterative if regimen == "iterative" else run_train_alone
        out = runner(params, model, channel, train, train_set, test_set)
    hook("final", params)
    return params, out


def _with_regimen(r: MetricsRecord, regimen: str) -> MetricsRecord:
    return MetricsRecord(regimen, r.seed, r.phase, r.epoch, r.snr_db, r.split, r.mse, r.psnr_db)
