#!/usr/bin/env python3
"""
trainer.py - Hessian-informed training pipeline

Pre-training on low-fidelity E/F/H labels, fine-tuning on high-fidelity
heterogeneous labels under the curriculum schedule for the Hessian loss
weight, and evaluation metrics (energy, force, Hessian and eigenvalue MAEs).
"""

import enum
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import optax
import pandas as pd
from tqdm import tqdm

from hessian_loss import ProjectionConfig, expected_projected_loss
from potential import (
    LossValue, LossWeights, ModelParams, ModelSurface, NeuralPotential, fit_energy_shift,
    loss_and_gradient,
)
from structures import Dataset, Fidelity, Surface


class TrainingError(RuntimeError):
    """Raised for empty phase data or a diverged (NaN) loss."""


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class ScheduleMode(str, enum.Enum):
    LINEAR = "linear"
    FIXED = "fixed"


@dataclass(frozen=True)
class CurriculumSchedule:
    """
    Loss weights and the λ(t) ramp of the Hessian term.

    t_start/t_end default to 10% and 60% of the epoch count when left unset.
    """
    w_E: float = 4.0
    w_F: float = 100.0
    w_0: float = 0.0
    w_H: float = 0.1
    t_start: Optional[int] = None
    t_end: Optional[int] = None
    mode: ScheduleMode = ScheduleMode.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "mode", ScheduleMode(self.mode))
        if self.t_start is not None and self.t_end is not None:
            if not self.t_end > self.t_start >= 0:
                raise ValueError(f"schedule needs t_end > t_start >= 0, got {self.t_start}, {self.t_end}")

    def resolved(self, epochs: int) -> "CurriculumSchedule":
        t_start = self.t_start if self.t_start is not None else int(round(0.1 * epochs))
        t_end = self.t_end if self.t_end is not None else int(round(0.6 * epochs))
        t_end = max(t_end, t_start + 1)
        return CurriculumSchedule(self.w_E, self.w_F, self.w_0, self.w_H, t_start, t_end, self.mode)


def curriculum_weight(t: float, sched: CurriculumSchedule) -> float:
    """λ(t): w_0 up to t_start, linear ramp, then clamped at w_H."""
    if sched.mode == ScheduleMode.FIXED:
        return sched.w_H
    if sched.t_start is None or sched.t_end is None:
        raise ValueError("schedule breakpoints unresolved; call resolved(epochs) first")
    if t <= sched.t_start:
        return sched.w_0
    if t >= sched.t_end:
        return sched.w_H
    frac = (t - sched.t_start) / (sched.t_end - sched.t_start)
    return sched.w_0 + frac * (sched.w_H - sched.w_0)


@dataclass(frozen=True)
class TrainConfig:
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    per_atom_energy: bool = False
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainHistory:
    """One record per epoch."""
    records: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)

    def save(self, path_prefix: str) -> Tuple[str, str]:
        """Write <prefix>.csv and <prefix>.json."""
        os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
        df = self.to_frame()
        csv_path = f"{path_prefix}.csv"
        json_path = f"{path_prefix}.json"
        df.to_csv(csv_path, index=False)
        df.to_json(json_path, orient="records", indent=2)
        return csv_path, json_path


def combine_loss(energy: float, force: float, hessian: float, lam: float,
                 sched: CurriculumSchedule) -> float:
    """w_E·L_E + w_F·L_F + λ·L_H."""
    return sched.w_E * energy + sched.w_F * force + lam * hessian


def total_loss(model: NeuralPotential, params: ModelParams, batch: Sequence, t: float,
               cfg: TrainConfig, step: int = 0) -> LossValue:
    """Curriculum-weighted loss of a batch at epoch t, with its parameter gradient."""
    sched = cfg.schedule.resolved(max(cfg.epochs, 1))
    lam = curriculum_weight(t, sched)
    weights = LossWeights(sched.w_E, sched.w_F, lam)
    return loss_and_gradient(model, params, batch, weights, cfg.projection, cfg.seed, step,
                             per_atom_energy=cfg.per_atom_energy)


def evaluate(surface: Surface, dataset: Dataset) -> Dict[str, float]:
    """
    MAEs of a surface against a labeled dataset.

    Returns:
        Dictionary with energy_mae [eV], force_mae [eV/Å], hessian_mae and
        eigenvalue_mae [eV/Å²] (NaN when no sample carries that label)
    """
    energy_err, force_err, hess_err, eig_err = [], [], [], []
    for sample in dataset:
        labels = sample.labels
        s = sample.structure
        if labels.energy is not None:
            energy_err.append(abs(surface.energy(s) - labels.energy))
        if labels.forces is not None:
            force_err.append(np.abs(surface.forces(s) - labels.forces).ravel())
        if labels.hessian is not None:
            predicted = surface.hessian(s)
            hess_err.append(np.abs(predicted - labels.hessian).ravel())
            eig_err.append(np.abs(np.linalg.eigvalsh(predicted) - np.linalg.eigvalsh(labels.hessian)))

    def mae(chunks):
        return float(np.mean(np.concatenate(chunks))) if chunks else float("nan")

    return {
        "energy_mae": float(np.mean(energy_err)) if energy_err else float("nan"),
        "force_mae": mae(force_err),
        "hessian_mae": mae(hess_err),
        "eigenvalue_mae": mae(eig_err),
        "n_samples": len(dataset),
        "n_hessian": dataset.n_hessian,
    }


def validation_loss(surface: Surface, dataset: Dataset, sched: CurriculumSchedule,
                    cfg: TrainConfig) -> float:
    """Noise-free total loss with λ frozen at w_H, using the expected projected loss."""
    sq_e, sq_f, n_f, h_terms = [], 0.0, 0, []
    for sample in dataset:
        labels = sample.labels
        s = sample.structure
        if labels.energy is not None:
            de = surface.energy(s) - labels.energy
            if cfg.per_atom_energy:
                de /= s.n_atoms
            sq_e.append(de * de)
        if labels.forces is not None:
            sq_f += float(np.sum((surface.forces(s) - labels.forces) ** 2))
            n_f += labels.forces.size
        if labels.hessian is not None:
            h_terms.append(expected_projected_loss(surface.hessian(s) - labels.hessian, cfg.projection.mode))
    loss_e = float(np.mean(sq_e)) if sq_e else 0.0
    loss_f = sq_f / n_f if n_f else 0.0
    loss_h = float(np.mean(h_terms)) if h_terms else 0.0
    return combine_loss(loss_e, loss_f, loss_h, sched.w_H, sched)


def split_validation(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Seeded train/validation split; validation falls back to the training set when empty.

    Hessian-labeled samples are split as their own stratum and at least one
    of them stays in training.
    """
    n_val = int(math.floor(fraction * len(dataset)))
    if n_val == 0 or n_val >= len(dataset):
        return dataset, dataset
    labeled = np.array([i for i, s in enumerate(dataset) if s.has_hessian], dtype=int)
    plain = np.array([i for i, s in enumerate(dataset) if not s.has_hessian], dtype=int)
    max_labeled = max(labeled.size - 1, 0)
    n_labeled = min(int(round(fraction * labeled.size)), max_labeled)
    n_plain = min(max(n_val - n_labeled, 0), plain.size)
    n_labeled = min(n_val - n_plain, max_labeled)

    rng = np.random.default_rng([seed, 7919])
    labeled, plain = rng.permutation(labeled), rng.permutation(plain)
    val = np.concatenate([labeled[:n_labeled], plain[:n_plain]])
    train = np.concatenate([labeled[n_labeled:], plain[n_plain:]])
    return dataset.subset(np.sort(train)), dataset.subset(np.sort(val))


def train_phase(model: NeuralPotential, dataset: Dataset, cfg: TrainConfig, phase: Phase,
                init_params: Optional[ModelParams] = None,
                validation: Optional[Dataset] = None,
                progress: bool = True) -> Tuple[ModelParams, TrainHistory]:
    """
    Run one training phase.

    Pre-training consumes the low-fidelity samples, fine-tuning the
    high-fidelity ones. Adam over seeded shuffled mini-batches; the returned
    parameters are those of the epoch with the lowest validation loss.

    Args:
        model: Network architecture
        dataset: Samples of both fidelities; the phase picks its own
        cfg: Training configuration
        phase: Pretrain or Finetune
        init_params: Starting parameters (fresh initialization if None)
        validation: Explicit validation set (seeded split otherwise)

    Returns:
        Tuple of (best parameters, history)
    """
    phase = Phase(phase)
    fidelity = Fidelity.LOW if phase == Phase.PRETRAIN else Fidelity.HIGH
    data = dataset.filter_fidelity(fidelity)
    if len(data) == 0:
        raise TrainingError(f"no {fidelity.value}-fidelity samples for the {phase.value} phase")

    if validation is None:
        train_set, val_set = split_validation(data, cfg.validation_fraction, cfg.seed)
    else:
        train_set, val_set = data, validation

    if init_params is None:
        params = fit_energy_shift(model, model.init_params(cfg.seed), train_set)
    else:
        params = init_params

    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history

    sched = cfg.schedule.resolved(cfg.epochs)
    optimizer = optax.adam(cfg.learning_rate, b1=cfg.beta1, b2=cfg.beta2, eps=cfg.eps)
    opt_state = optimizer.init(params)

    best_params = params
    best_loss = float("inf")
    step = 0
    n = len(train_set)
    logging.info(f"{phase.value}: {n} training samples ({train_set.n_hessian} with Hessians), "
                 f"{len(val_set)} validation, {cfg.epochs} epochs")

    for epoch in tqdm(range(cfg.epochs), desc=f"Training ({phase.value})", disable=not progress):
        lam = curriculum_weight(epoch, sched)
        weights = LossWeights(sched.w_E, sched.w_F, lam)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        n_batches = 0

        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            batch = [train_set[int(i)] for i in ids]
            value = loss_and_gradient(model, params, batch, weights, cfg.projection, cfg.seed, step,
                                      sample_ids=ids, per_atom_energy=cfg.per_atom_energy)
            if not np.isfinite(value.total):
                raise TrainingError(
                    f"NaN loss at epoch {epoch}, step {step} "
                    f"(energy {value.energy}, force {value.force}, hessian {value.hessian})")
            updates, opt_state = optimizer.update(value.grads, opt_state, params)
            params = optax.apply_updates(params, updates)
            sums += (value.total, value.energy, value.force, value.hessian)
            n_batches += 1
            step += 1

        surface = ModelSurface(model, params)
        val_loss = validation_loss(surface, val_set, sched, cfg)
        metrics = evaluate(surface, val_set)
        means = sums / max(n_batches, 1)
        history.records.append({
            "epoch": epoch,
            "lambda": lam,
            "loss_total": means[0],
            "loss_energy": means[1],
            "loss_force": means[2],
            "loss_hessian": means[3],
            "val_loss": val_loss,
            "val_energy_mae": metrics["energy_mae"],
            "val_force_mae": metrics["force_mae"],
            "val_hessian_mae": metrics["hessian_mae"],
            "val_eigenvalue_mae": metrics["eigenvalue_mae"],
        })
        if not np.isfinite(val_loss):
            raise TrainingError(f"NaN validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params

    logging.info(f"{phase.value} finished: best validation loss {best_loss:.6g}")
    return best_params, history
