#!/usr/bin/env python3
"""
sscha.py - Stochastic self-consistent harmonic approximation

Trial harmonic density matrices, Gaussian ensembles of displaced
configurations, importance reweighting with the Kong-Liu effective sample
ratio, free energy and gradient estimators, and the population/minimization
loop over centroid and effective force constants. Any surface (oracle or
trained model) can serve as the evaluator.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from structures import AMU, HBAR, KB, Structure, Surface, symmetrize
from thermo import (
    VibrationalResult, harmonic_frequencies, internal_basis, mass_weighted_hessian,
    vibrational_free_energy,
)


class SschaError(RuntimeError):
    """Raised for an invalid trial or ensemble."""


class StaleEnsembleError(SschaError):
    """Raised when the Kong-Liu ratio has fallen below the resampling threshold."""


OMEGA2_FLOOR = 1e-8  # eV/Å²/amu


@dataclass(frozen=True)
class SschaConfig:
    ensemble_size: int = 500
    max_populations: int = 30
    alpha_centroid: float = 0.002  # Å per eV/Å of gradient
    alpha_phi: float = 0.002  # dimensionless mixing
    kong_liu_threshold: float = 0.5
    meaningful_factor: float = 0.001
    temperature: float = 0.0
    max_inner_steps: int = 50
    gradient_tol: float = 1e-8
    relax_centroid: bool = True
    project_rigid: Optional[bool] = None  # None: follow the evaluator's rigid_invariant flag
    seed: int = 0
    chunk_size: int = 128

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble size must be >= 2")
        if self.max_populations < 0 or self.max_inner_steps < 1:
            raise ValueError("population and step counts must be positive")
        if self.alpha_centroid < 0 or self.alpha_phi <= 0 or self.meaningful_factor <= 0:
            raise ValueError("step sizes and meaningful factor must be positive")
        if not 0 < self.kong_liu_threshold <= 1:
            raise ValueError(f"Kong-Liu threshold must lie in (0, 1], got {self.kong_liu_threshold}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _sqrt_masses(masses: np.ndarray) -> np.ndarray:
    return np.sqrt(np.repeat(np.asarray(masses, dtype=float), 3))


def enforce_positive_definite(phi: np.ndarray, masses, basis: Optional[np.ndarray] = None,
                              floor: float = OMEGA2_FLOOR) -> np.ndarray:
    """
    Flip negative mass-weighted eigenvalues to their absolute value.

    Args:
        phi: Symmetric force constants [eV/Å²]
        masses: Per-atom masses [amu]
        basis: Optional mass-weighted internal basis; rigid directions are left at zero
        floor: Minimum ω² kept after the flip

    Returns:
        Symmetric positive-definite force constants
    """
    D = mass_weighted_hessian(phi, masses)
    if basis is not None:
        D = symmetrize(basis.T @ D @ basis)
    values, vectors = np.linalg.eigh(D)
    flipped = np.maximum(np.abs(values), floor)
    if basis is not None:
        vectors = basis @ vectors
    D_new = (vectors * flipped) @ vectors.T
    sqrt_m = _sqrt_masses(masses)
    return symmetrize(D_new * np.outer(sqrt_m, sqrt_m))


@dataclass(frozen=True, eq=False)
class TrialHarmonic:
    """
    Centroid, effective force constants and temperature of the trial density.

    basis, when set, is the mass-weighted internal basis; the density then
    lives on the internal modes only.
    """
    centroid: Structure
    phi: np.ndarray
    temperature: float = 0.0
    basis: Optional[np.ndarray] = None

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        n_dof = 3 * self.centroid.n_atoms
        if phi.shape != (n_dof, n_dof):
            raise SschaError(f"force constants {phi.shape} do not match {n_dof} degrees of freedom")
        object.__setattr__(self, "phi", symmetrize(phi))

    @property
    def masses(self) -> np.ndarray:
        return self.centroid.masses

    def modes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Mass-weighted eigenvalues and eigenvectors (as columns in the full space)."""
        D = mass_weighted_hessian(self.phi, self.masses)
        if self.basis is None:
            return np.linalg.eigh(D)
        values, vectors = np.linalg.eigh(symmetrize(self.basis.T @ D @ self.basis))
        return values, self.basis @ vectors

    def mode_energies(self) -> np.ndarray:
        """ħω_μ [eV] of the trial modes."""
        values, _ = self.modes()
        return HBAR * np.sqrt(np.maximum(values, 0.0) / AMU)

    def variances(self) -> np.ndarray:
        """<q_μ²> [amu·Å²] of the mass-weighted normal coordinates."""
        values, _ = self.modes()
        if np.any(values <= 0):
            raise SschaError("trial force constants are not positive definite")
        omega = np.sqrt(values / AMU)  # rad/fs
        if self.temperature <= 0:
            occupation = 1.0
        else:
            occupation = 1.0 / np.tanh(HBAR * omega / (2.0 * KB * self.temperature))
        return HBAR / (2.0 * omega) * occupation / AMU

    def harmonic_free_energy(self) -> float:
        return vibrational_free_energy(self.mode_energies(), self.temperature)

    def log_density(self, positions: np.ndarray) -> np.ndarray:
        """Log of the Gaussian density at flattened configurations (n, 3N)."""
        u = np.atleast_2d(positions) - self.centroid.flat_positions
        _, vectors = self.modes()
        var = self.variances()
        amplitudes = (u * _sqrt_masses(self.masses)) @ vectors
        return -0.5 * np.sum(amplitudes ** 2 / var, axis=1) - 0.5 * np.sum(np.log(2.0 * np.pi * var))

    def harmonic_energy(self, positions: np.ndarray) -> np.ndarray:
        """½ uᵀΦu for flattened configurations (n, 3N)."""
        u = np.atleast_2d(positions) - self.centroid.flat_positions
        return 0.5 * np.einsum("ni,ij,nj->n", u, self.phi, u)


@dataclass
class Ensemble:
    """Configurations drawn from a generating trial, their labels and current weights."""
    generator: TrialHarmonic
    positions: np.ndarray
    log_density_gen: np.ndarray
    weights: np.ndarray
    energies: Optional[np.ndarray] = None
    forces: Optional[np.ndarray] = None
    hessians: Optional[np.ndarray] = None
    population: int = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def evaluated(self) -> bool:
        return self.energies is not None

    @property
    def displacements(self) -> np.ndarray:
        return self.positions - self.generator.centroid.flat_positions


def generate_ensemble(th: TrialHarmonic, n: int, rng: np.random.Generator, population: int = 0) -> Ensemble:
    """
    Draw n configurations from the quantum harmonic Gaussian of a trial.

    Normal-mode amplitudes q_μ ~ N(0, σ_μ²) with σ_μ² = ħ/(2ω_μ)·coth(ħω_μ/2k_BT),
    mapped to Cartesian displacements through M^{-1/2}.
    """
    _, vectors = th.modes()
    sigma = np.sqrt(th.variances())
    q = rng.normal(size=(n, sigma.size)) * sigma
    u = (q @ vectors.T) / _sqrt_masses(th.masses)
    positions = th.centroid.flat_positions + u
    return Ensemble(th, positions, th.log_density(positions), np.ones(n), population=population)


def evaluate_ensemble(ens: Ensemble, evaluator: Surface, chunk_size: int = 128) -> int:
    """Fill energies, forces and Hessians; returns the number of evaluator calls."""
    structure = ens.generator.centroid
    energies, forces, hessians = [], [], []
    calls = 0
    for start in range(0, len(ens), chunk_size):
        e, f, h = evaluator.batch_labels(structure, ens.positions[start:start + chunk_size])
        energies.append(np.asarray(e))
        forces.append(np.asarray(f).reshape(len(e), -1))
        hessians.append(np.asarray(h))
        calls += len(e)
    ens.energies = np.concatenate(energies)
    ens.forces = np.concatenate(forces)
    ens.hessians = np.concatenate(hessians)
    return calls


def kong_liu_ratio(weights: np.ndarray) -> float:
    """(Σw)² / (n·Σw²), in (0, 1]."""
    weights = np.asarray(weights, dtype=float)
    denom = weights.size * np.sum(weights * weights)
    return float(np.sum(weights) ** 2 / denom) if denom > 0 else 0.0


def reweight(ens: Ensemble, th_new: TrialHarmonic) -> Tuple[np.ndarray, float]:
    """Density-ratio weights ρ_new/ρ_gen (log space) stored on the ensemble, and their Kong-Liu ratio."""
    log_w = th_new.log_density(ens.positions) - ens.log_density_gen
    ens.weights = np.exp(log_w)
    return ens.weights, kong_liu_ratio(ens.weights)


def _weighted_mean(values: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Self-normalized weighted mean over axis 0 and its standard error."""
    total = np.sum(w)
    shape = (-1,) + (1,) * (values.ndim - 1)
    wb = w.reshape(shape)
    mean = np.sum(wb * values, axis=0) / total
    err = np.sqrt(np.sum(wb ** 2 * (values - mean) ** 2, axis=0)) / total
    return mean, err


def _current_weights(ens: Ensemble, th: TrialHarmonic, threshold: float) -> np.ndarray:
    weights, ratio = reweight(ens, th)
    if ratio < threshold:
        raise StaleEnsembleError(f"Kong-Liu ratio {ratio:.3f} below {threshold}; resample")
    return weights


def free_energy(ens: Ensemble, th: TrialHarmonic, evaluator: Optional[Surface] = None,
                kong_liu_threshold: float = 0.5) -> Tuple[float, float]:
    """
    F = F_harm(Φ, T) + ⟨V − V_harm⟩_w.

    Returns:
        Tuple of (F [eV], standard error [eV])

    Raises:
        StaleEnsembleError: Kong-Liu ratio below the threshold
    """
    if not ens.evaluated:
        if evaluator is None:
            raise SschaError("ensemble has not been evaluated")
        evaluate_ensemble(ens, evaluator)
    w = _current_weights(ens, th, kong_liu_threshold)
    anharmonic = ens.energies - th.harmonic_energy(ens.positions)
    mean, err = _weighted_mean(anharmonic, w)
    return th.harmonic_free_energy() + float(mean), float(err)


@dataclass
class Gradients:
    centroid: np.ndarray
    phi: np.ndarray
    centroid_error: float
    phi_error: float
    phi_target: np.ndarray


def gradients(ens: Ensemble, th: TrialHarmonic, evaluator: Optional[Surface] = None,
              kong_liu_threshold: float = 0.5) -> Gradients:
    """
    g_𝓡 = −⟨f⟩_w and g_Φ = Φ − ⟨H⟩_w.

    The Φ gradient is the self-consistent mixing form, so a step of α_Φ
    mixes Φ toward the weighted mean Hessian.
    """
    if not ens.evaluated:
        if evaluator is None:
            raise SschaError("ensemble has not been evaluated")
        evaluate_ensemble(ens, evaluator)
    w = _current_weights(ens, th, kong_liu_threshold)
    mean_f, err_f = _weighted_mean(ens.forces, w)
    mean_h, err_h = _weighted_mean(ens.hessians, w)
    target = symmetrize(mean_h)
    return Gradients(-mean_f, th.phi - target, float(np.linalg.norm(err_f)),
                     float(np.linalg.norm(err_h)), target)


@dataclass
class SschaResult:
    trial: TrialHarmonic
    history: pd.DataFrame
    converged: bool
    n_populations: int
    n_evaluations: int
    free_energy: Optional[float] = None
    free_energy_error: Optional[float] = None


def harmonic_start(evaluator: Surface, centroid: Structure, temperature: float = 0.0,
                   project_rigid: Optional[bool] = None) -> TrialHarmonic:
    """Trial from the evaluator's Hessian at the centroid, made positive definite."""
    if project_rigid is None:
        project_rigid = bool(getattr(evaluator, "rigid_invariant", False))
    basis = internal_basis(centroid.positions, centroid.masses) if project_rigid and centroid.n_atoms > 1 else None
    phi = enforce_positive_definite(symmetrize(evaluator.hessian(centroid)), centroid.masses, basis)
    return TrialHarmonic(centroid, phi, temperature, basis)


def _converged(grads: Gradients, cfg: SschaConfig) -> bool:
    phi_ok = np.linalg.norm(grads.phi) <= max(cfg.meaningful_factor * grads.phi_error, cfg.gradient_tol)
    if not cfg.relax_centroid:
        return phi_ok
    centroid_ok = np.linalg.norm(grads.centroid) <= max(cfg.meaningful_factor * grads.centroid_error,
                                                        cfg.gradient_tol)
    return phi_ok and centroid_ok


def sscha_minimize(evaluator: Surface, phi0: np.ndarray, centroid0: Structure,
                   cfg: Optional[SschaConfig] = None, progress: bool = True) -> SschaResult:
    """
    Alternate ensemble sampling and functional minimization.

    Each population draws a fresh ensemble from the current trial. Inner
    steps update 𝓡 ← 𝓡 − α_𝓡 g_𝓡 and Φ ← Φ − α_Φ g_Φ (symmetrized, made
    positive definite) under reweighting until the Kong-Liu ratio falls below
    the threshold or both gradients drop below their meaningful level.

    Args:
        evaluator: Energy/force/Hessian provider
        phi0: Starting force constants (made positive definite here)
        centroid0: Starting centroid structure
        cfg: Minimization settings

    Returns:
        SschaResult; converged is False when max_populations is exhausted
    """
    cfg = cfg or SschaConfig()
    project = cfg.project_rigid
    if project is None:
        project = bool(getattr(evaluator, "rigid_invariant", False))
    basis = internal_basis(centroid0.positions, centroid0.masses) if project and centroid0.n_atoms > 1 else None

    columns = ["population", "step", "free_energy", "free_energy_error", "grad_centroid",
               "grad_phi", "kong_liu"]
    if cfg.max_populations == 0:
        th = TrialHarmonic(centroid0, phi0, cfg.temperature, basis)
        return SschaResult(th, pd.DataFrame(columns=columns), False, 0, 0)

    phi = enforce_positive_definite(symmetrize(phi0), centroid0.masses, basis)
    th = TrialHarmonic(centroid0, phi, cfg.temperature, basis)
    records: List[Dict[str, float]] = []
    n_evaluations = 0
    last_f: Tuple[Optional[float], Optional[float]] = (None, None)

    for population in tqdm(range(cfg.max_populations), desc="SSCHA populations", disable=not progress):
        rng = np.random.default_rng([cfg.seed, population])
        ens = generate_ensemble(th, cfg.ensemble_size, rng, population)
        n_evaluations += evaluate_ensemble(ens, evaluator, cfg.chunk_size)

        for step in range(cfg.max_inner_steps):
            try:
                f_value, f_err = free_energy(ens, th, kong_liu_threshold=cfg.kong_liu_threshold)
                grads = gradients(ens, th, kong_liu_threshold=cfg.kong_liu_threshold)
            except StaleEnsembleError:
                logging.debug(f"Population {population}: ensemble stale after {step} steps")
                break
            last_f = (f_value, f_err)
            records.append({
                "population": population,
                "step": step,
                "free_energy": f_value,
                "free_energy_error": f_err,
                "grad_centroid": float(np.linalg.norm(grads.centroid)),
                "grad_phi": float(np.linalg.norm(grads.phi)),
                "kong_liu": kong_liu_ratio(ens.weights),
            })
            if _converged(grads, cfg):
                logging.info(f"SSCHA converged: population {population}, step {step}, "
                             f"F = {f_value:.6f} ± {f_err:.1e} eV")
                return SschaResult(th, pd.DataFrame(records, columns=columns), True,
                                   population + 1, n_evaluations, f_value, f_err)

            centroid = th.centroid
            if cfg.relax_centroid:
                centroid = centroid.with_positions(centroid.flat_positions - cfg.alpha_centroid * grads.centroid)
            phi = enforce_positive_definite(th.phi - cfg.alpha_phi * grads.phi, centroid.masses, basis)
            th = replace(th, centroid=centroid, phi=phi)

    logging.warning(f"SSCHA did not converge within {cfg.max_populations} populations")
    return SschaResult(th, pd.DataFrame(records, columns=columns), False, cfg.max_populations,
                       n_evaluations, last_f[0], last_f[1])


def anharmonic_frequencies(th: TrialHarmonic) -> VibrationalResult:
    """Frequencies of the mass-weighted effective force constants."""
    project = th.basis is not None
    return harmonic_frequencies(th.phi, th.masses, project=project,
                                geometry=th.centroid.positions if project else None)
