#!/usr/bin/env python3
"""
thermo.py - Harmonic vibrational analysis and RRHO thermochemistry

Mass-weighted Hessians, vibrational frequencies with optional removal of
rigid translations/rotations, and ideal-gas rigid-rotor/harmonic-oscillator
Gibbs free energies in eV.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import linalg

from structures import AMU, HBAR, KB, PASCAL, SPEED_OF_LIGHT, STANDARD_PRESSURE, Structure, symmetrize


class ThermoError(ValueError):
    """Raised for invalid thermochemistry inputs."""


class ImaginaryModeError(ThermoError):
    """Raised when a vibrational mode that must be real is imaginary."""


class EigensolverError(RuntimeError):
    """Raised when diagonalization fails."""


ZERO_MODE_TOL = 1e-8  # eV/Å²/amu


def mass_weighted_hessian(H: np.ndarray, masses) -> np.ndarray:
    """D = M^{-1/2} H M^{-1/2} with the per-atom masses repeated over x, y, z."""
    masses = np.asarray(masses, dtype=float).reshape(-1)
    if np.any(masses <= 0):
        raise ThermoError("masses must be positive")
    inv_sqrt = 1.0 / np.sqrt(np.repeat(masses, 3))
    H = np.asarray(H, dtype=float)
    if H.shape != (inv_sqrt.size, inv_sqrt.size):
        raise ThermoError(f"Hessian shape {H.shape} does not match {masses.size} atoms")
    return symmetrize(H * np.outer(inv_sqrt, inv_sqrt))


def rigid_body_basis(positions: np.ndarray, masses=None) -> np.ndarray:
    """
    Orthonormal basis of rigid translations and rotations.

    In mass-weighted coordinates when masses are given, Cartesian otherwise.
    Linear geometries yield 5 columns, single atoms 3.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = positions.shape[0]
    weights = np.ones(n) if masses is None else np.asarray(masses, dtype=float)
    center = np.average(positions, axis=0, weights=weights)
    sqrt_m = np.sqrt(weights)[:, None]
    rel = positions - center

    vectors = []
    for axis in np.eye(3):
        vectors.append((sqrt_m * axis[None, :]).ravel())
    for axis in np.eye(3):
        vectors.append((sqrt_m * np.cross(axis[None, :], rel)).ravel())
    return linalg.orth(np.stack(vectors, axis=1), rcond=1e-8)


def internal_basis(positions: np.ndarray, masses=None) -> np.ndarray:
    """Orthonormal complement of the rigid-body basis."""
    rigid = rigid_body_basis(positions, masses)
    return linalg.null_space(rigid.T)


def eigenvalues_to_wavenumbers(eigenvalues) -> np.ndarray:
    """Signed cm⁻¹ from mass-weighted eigenvalues [eV/Å²/amu]; negative means imaginary."""
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    omega = np.sign(eigenvalues) * np.sqrt(np.abs(eigenvalues) / AMU)  # rad/fs
    return omega / (2.0 * np.pi * SPEED_OF_LIGHT)


def eigenvalues_to_energies(eigenvalues) -> np.ndarray:
    """Signed ħω [eV] from mass-weighted eigenvalues."""
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    return np.sign(eigenvalues) * HBAR * np.sqrt(np.abs(eigenvalues) / AMU)


@dataclass
class VibrationalResult:
    """Mass-weighted eigenvalues, signed frequencies and modes, sorted ascending."""
    eigenvalues: np.ndarray
    wavenumbers: np.ndarray
    energies: np.ndarray
    modes: np.ndarray
    projected: bool

    @property
    def n_imaginary(self) -> int:
        return int(np.sum(self.wavenumbers < 0))

    def to_dict(self) -> Dict[str, object]:
        return {
            "frequencies_cm": self.wavenumbers.tolist(),
            "frequencies_ev": self.energies.tolist(),
            "projected": self.projected,
        }


def harmonic_frequencies(H: np.ndarray, masses, project: bool = False,
                         geometry: Optional[np.ndarray] = None) -> VibrationalResult:
    """
    Diagonalize the mass-weighted Hessian.

    Args:
        H: Cartesian Hessian [eV/Å²]
        masses: Per-atom masses [amu]
        project: Remove rigid translations/rotations before diagonalizing
        geometry: Positions (N×3) used to build the rigid-body projector

    Returns:
        VibrationalResult with 3N, or 3N-6 / 3N-5 modes when projected
    """
    D = mass_weighted_hessian(H, masses)
    basis = None
    if project:
        if geometry is None:
            raise ThermoError("projection requires the geometry")
        basis = internal_basis(geometry, masses)
        D = basis.T @ D @ basis
    try:
        values, vectors = linalg.eigh(D)
    except linalg.LinAlgError as e:
        raise EigensolverError(f"diagonalization failed: {e}")
    if basis is not None:
        vectors = basis @ vectors
    return VibrationalResult(values, eigenvalues_to_wavenumbers(values),
                             eigenvalues_to_energies(values), vectors, project)


def vibrational_free_energy(energies, temperature: float) -> float:
    """Σ [ħω/2 + k_BT ln(1 - e^{-ħω/k_BT})] over real modes [eV]."""
    energies = np.asarray(energies, dtype=float)
    zpe = 0.5 * np.sum(energies)
    if temperature <= 0:
        return float(zpe)
    x = energies / (KB * temperature)
    return float(zpe + KB * temperature * np.sum(np.log1p(-np.exp(-x))))


@dataclass
class ThermoResult:
    energy: float
    zpe: float
    internal_energy: float
    enthalpy: float
    entropy: float
    gibbs: float
    temperature: float
    pressure: float
    components: Dict[str, float] = field(default_factory=dict)
    frequencies_cm: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "E": self.energy,
            "ZPE": self.zpe,
            "U": self.internal_energy,
            "H": self.enthalpy,
            "S": self.entropy,
            "G": self.gibbs,
            "T": self.temperature,
            "P": self.pressure,
            "components": dict(self.components),
            "frequencies": [] if self.frequencies_cm is None else self.frequencies_cm.tolist(),
        }


def _is_linear(positions: np.ndarray) -> bool:
    return rigid_body_basis(positions).shape[1] == 5


def rrho_thermochemistry(s: Structure, vib: VibrationalResult, temperature: float = 298.15,
                         pressure: float = STANDARD_PRESSURE, sigma_rot: float = 1.0,
                         electronic_energy: float = 0.0, drop_imaginary: bool = False,
                         pinned: bool = False) -> ThermoResult:
    """
    Ideal-gas RRHO free energy.

    G = E + ZPE + U_trans + U_rot + U_vib + PV - T(S_trans + S_rot + S_vib).

    Args:
        s: Structure (masses and geometry)
        vib: Projected vibrational result
        temperature: T [K]
        pressure: P [Pa]
        sigma_rot: Rotational symmetry number
        electronic_energy: E [eV]
        drop_imaginary: Exclude the single imaginary mode (transition states)
        pinned: System held in place by an external field; all 3N modes are vibrations and
            the translational, rotational and PV terms vanish

    Returns:
        ThermoResult in eV and eV/K
    """
    if temperature <= 0:
        raise ThermoError(f"temperature must be positive, got {temperature}")
    if not (vib.projected or pinned):
        raise ThermoError("thermochemistry requires a projected vibrational result")

    energies = np.array(vib.energies)
    modes = np.arange(energies.size)
    if drop_imaginary and np.any(energies < 0):
        lowest = int(np.argmin(energies))
        energies = np.delete(energies, lowest)
        modes = np.delete(modes, lowest)
    imaginary = modes[energies < 0]
    if imaginary.size:
        listed = ", ".join(f"mode {i}: {vib.wavenumbers[i]:.2f} cm^-1" for i in imaginary)
        raise ImaginaryModeError(f"imaginary vibrational frequency ({listed})")

    kT = KB * temperature
    p = pressure * PASCAL

    s_trans = u_trans = s_rot = u_rot = pv = 0.0
    if not pinned:
        total_mass = float(np.sum(s.masses)) * AMU
        wavelength = 2.0 * np.pi * HBAR / np.sqrt(2.0 * np.pi * total_mass * kT)
        volume = kT / p
        s_trans = KB * (np.log(volume / wavelength ** 3) + 2.5)
        u_trans = 1.5 * kT
        pv = kT

    if not pinned and s.n_atoms > 1:
        rel = s.positions - np.average(s.positions, axis=0, weights=s.masses)
        inertia = np.zeros((3, 3))
        for m, r in zip(s.masses, rel):
            inertia += m * (np.dot(r, r) * np.eye(3) - np.outer(r, r))
        moments = np.linalg.eigvalsh(inertia) * AMU
        if _is_linear(s.positions):
            q_rot = 2.0 * moments[-1] * kT / (sigma_rot * HBAR ** 2)
            s_rot = KB * (np.log(q_rot) + 1.0)
            u_rot = kT
        else:
            q_rot = np.sqrt(np.pi) / sigma_rot * np.sqrt((2.0 * kT) ** 3 * np.prod(moments)) / HBAR ** 3
            s_rot = KB * (np.log(q_rot) + 1.5)
            u_rot = 1.5 * kT

    zpe = 0.5 * float(np.sum(energies))
    x = energies / kT
    occupation = np.exp(-x) / -np.expm1(-x)
    u_vib = float(np.sum(energies * occupation))
    s_vib = float(KB * np.sum(x * occupation - np.log1p(-np.exp(-x))))

    internal = electronic_energy + zpe + u_trans + u_rot + u_vib
    enthalpy = internal + pv
    entropy = s_trans + s_rot + s_vib
    gibbs = enthalpy - temperature * entropy

    components = {
        "U_trans": u_trans, "U_rot": u_rot, "U_vib": u_vib, "PV": pv,
        "S_trans": s_trans, "S_rot": s_rot, "S_vib": s_vib,
    }
    logging.debug(f"RRHO at {temperature} K: G = {gibbs:.6f} eV, ZPE = {zpe:.6f} eV")
    return ThermoResult(electronic_energy, zpe, internal, enthalpy, entropy, gibbs,
                        temperature, pressure, components, vib.wavenumbers)


def rrho_gibbs(s: Structure, vib: VibrationalResult, temperature: float = 298.15,
               pressure: float = STANDARD_PRESSURE, sigma_rot: float = 1.0,
               electronic_energy: float = 0.0, drop_imaginary: bool = False,
               pinned: bool = False) -> float:
    """Gibbs free energy G [eV]."""
    return rrho_thermochemistry(s, vib, temperature, pressure, sigma_rot,
                                electronic_energy, drop_imaginary, pinned).gibbs


def structure_thermochemistry(surface, s: Structure, temperature: float = 298.15,
                              pressure: float = STANDARD_PRESSURE, sigma_rot: float = 1.0,
                              drop_imaginary: bool = False) -> ThermoResult:
    """
    Evaluate a surface at a fixed geometry and return its RRHO breakdown.

    Rigid-invariant surfaces are treated as free molecules. Any other surface (tethered
    oracles) keeps all 3N modes as vibrations with no rigid-body terms.
    """
    rigid = bool(getattr(surface, "rigid_invariant", False))
    vib = harmonic_frequencies(surface.hessian(s), s.masses, project=rigid, geometry=s.positions)
    return rrho_thermochemistry(s, vib, temperature, pressure, sigma_rot,
                                surface.energy(s), drop_imaginary, pinned=not rigid)
