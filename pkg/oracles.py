#!/usr/bin/env python3
"""
oracles.py - Analytic reference potential-energy surfaces

Closed-form energy functions standing in for the high-fidelity ("DFT") and
low-fidelity ("xTB") labelers of the multi-fidelity pipeline. Forces and
Hessians are exact derivatives obtained with JAX. Also hosts the exact
quantum oracles (dense-grid Schrödinger solver, optimal Gaussian) used to
check the anharmonic phonon engine.
"""

import enum
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from scipy import linalg, optimize

from structures import (
    AMU, HBAR, Dataset, DimensionError, Fidelity, LabeledSample, LabelSet, Structure,
)

jax.config.update("jax_enable_x64", True)


class PerturbationError(ValueError):
    """Raised when a low-fidelity copy is requested from a perturbed potential."""


class PotentialKind(str, enum.Enum):
    MULLER_BROWN = "muller_brown"
    DOUBLE_WELL_CHAIN = "double_well_chain"
    ANHARMONIC_LATTICE = "anharmonic_lattice"
    MORSE_DIMER = "morse_dimer"


@dataclass(frozen=True)
class FidelityPerturbation:
    """Deterministic smooth perturbation emulating the low-fidelity gap."""
    energy_scale: float = 0.9
    force_noise_amplitude: float = 0.02
    stiffness_scale: float = 0.8
    wavenumber: float = 2.0  # 1/Å, frequency of the pair bias field


# Standard four-Gaussian Müller-Brown constants
_MB_A = (-200.0, -100.0, -170.0, 15.0)
_MB_ALPHA = (-1.0, -1.0, -6.5, 0.7)
_MB_BETA = (0.0, 0.0, 11.0, 0.6)
_MB_GAMMA = (-10.0, -10.0, -6.5, 0.7)
_MB_X0 = (1.0, 0.0, -0.5, -1.0)
_MB_Y0 = (0.0, 0.5, 1.5, 1.0)

# Approximate stationary points of the standard surface; refine with Newton
MULLER_BROWN_MINIMA = {
    "A": (-0.558224, 1.441726),
    "B": (0.623499, 0.028038),
    "C": (-0.050011, 0.466694),
}
MULLER_BROWN_SADDLES = {
    "AC": (-0.822002, 0.624313),
    "CB": (0.212487, 0.292988),
}

DEFAULT_PARAMS: Dict[PotentialKind, Dict[str, object]] = {
    PotentialKind.MULLER_BROWN: {
        "scale": 1.0,
        "tether": 100.0,
        "mass": 1.0,
    },
    PotentialKind.DOUBLE_WELL_CHAIN: {
        "a": 1.0,
        "b": 1.0,
        "c": 0.0,
        "n_sites": 1,
        "embedding": "onsite",
        "spacing": 1.0,
        "mass": 1.0,
        "tether": 100.0,
        "host_spacing": 3.0,
        "k_hh": 5.0,
        "k_bend": 1.0,
        "host_species": "S",
        "guest_species": "H",
    },
    PotentialKind.ANHARMONIC_LATTICE: {
        "n_atoms": 1,
        "k_onsite": 1.0,
        "k_spring": 0.0,
        "spacing": 2.0,
        "gamma": 0.0,
        "mass": 1.0,
        "stiffness": None,
        "reference": None,
    },
    PotentialKind.MORSE_DIMER: {
        "D_e": 1.0,
        "alpha": 1.5,
        "r0": 1.0,
        "species": "H",
    },
}


def _norm(v):
    return jnp.sqrt(jnp.sum(v * v, axis=-1))


def _muller_brown(p, stiffness):
    amp = jnp.array(_MB_A) * p["scale"]
    alpha = stiffness * jnp.array(_MB_ALPHA)
    beta = stiffness * jnp.array(_MB_BETA)
    gamma = stiffness * jnp.array(_MB_GAMMA)
    x0 = jnp.array(_MB_X0)
    y0 = jnp.array(_MB_Y0)
    tether = p["tether"]

    def energy(R):
        x, y, z = R[0, 0], R[0, 1], R[0, 2]
        dx = x - x0
        dy = y - y0
        return jnp.sum(amp * jnp.exp(alpha * dx * dx + beta * dx * dy + gamma * dy * dy)) + 0.5 * tether * z * z

    return energy


def _quartic_sites(u, a, b, c):
    e = jnp.sum(a * u ** 4 - b * u ** 2)
    if u.shape[0] > 1:
        e = e + c * jnp.sum((u[:-1] - u[1:]) ** 2)
    return e


def _double_well_chain(p, stiffness):
    a = stiffness * p["a"]
    b = stiffness * p["b"]
    c = stiffness * p["c"]
    n_sites = int(p["n_sites"])

    if p["embedding"] == "onsite":
        lattice = jnp.arange(n_sites) * p["spacing"]
        tether = p["tether"]

        def energy(R):
            u = R[:, 0] - lattice
            return _quartic_sites(u, a, b, c) + 0.5 * tether * jnp.sum(R[:, 1:] ** 2)

        return energy

    k_hh = stiffness * p["k_hh"]
    k_bend = stiffness * p["k_bend"]
    host_spacing = p["host_spacing"]

    def energy(R):
        hosts = R[0::2]
        guests = R[1::2]
        u = 0.5 * (_norm(guests - hosts[:-1]) - _norm(guests - hosts[1:]))
        e = _quartic_sites(u, a, b, c)
        e = e + k_hh * jnp.sum((_norm(hosts[1:] - hosts[:-1]) - host_spacing) ** 2)
        v1 = R[:-2] - R[1:-1]
        v2 = R[2:] - R[1:-1]
        cos_theta = jnp.sum(v1 * v2, axis=-1) / (_norm(v1) * _norm(v2))
        return e + k_bend * jnp.sum(1.0 + cos_theta)

    return energy


def lattice_stiffness(p) -> np.ndarray:
    """Force-constant matrix K of an anharmonic lattice parameter record."""
    if p.get("stiffness") is not None:
        return np.asarray(p["stiffness"], dtype=float)
    n = int(p["n_atoms"])
    laplacian = np.zeros((n, n))
    for i in range(n - 1):
        laplacian[i, i] += 1.0
        laplacian[i + 1, i + 1] += 1.0
        laplacian[i, i + 1] -= 1.0
        laplacian[i + 1, i] -= 1.0
    per_atom = p["k_onsite"] * np.eye(n) + p["k_spring"] * laplacian
    return np.kron(per_atom, np.eye(3))


def lattice_reference(p) -> np.ndarray:
    if p.get("reference") is not None:
        return np.asarray(p["reference"], dtype=float).reshape(-1, 3)
    n = lattice_stiffness(p).shape[0] // 3
    ref = np.zeros((n, 3))
    ref[:, 0] = np.arange(n) * p["spacing"]
    return ref


def _anharmonic_lattice(p, stiffness):
    K = jnp.asarray(stiffness * lattice_stiffness(p))
    ref = jnp.asarray(lattice_reference(p))
    gamma = stiffness * p["gamma"]

    def energy(R):
        u = (R - ref).reshape(-1)
        return 0.5 * u @ K @ u + gamma * jnp.sum(u ** 4)

    return energy


def _morse_dimer(p, stiffness):
    depth = p["D_e"]
    alpha = np.sqrt(stiffness) * p["alpha"]
    r0 = p["r0"]

    def energy(R):
        r = _norm(R[1] - R[0])
        return depth * (1.0 - jnp.exp(-alpha * (r - r0))) ** 2 - depth

    return energy


_BUILDERS = {
    PotentialKind.MULLER_BROWN: _muller_brown,
    PotentialKind.DOUBLE_WELL_CHAIN: _double_well_chain,
    PotentialKind.ANHARMONIC_LATTICE: _anharmonic_lattice,
    PotentialKind.MORSE_DIMER: _morse_dimer,
}


@dataclass(frozen=True, eq=False)
class ReferencePotential:
    """An analytic surface: kind, parameter record and optional low-fidelity perturbation."""
    kind: PotentialKind
    params: Mapping[str, object] = field(default_factory=dict)
    fidelity_perturbation: Optional[FidelityPerturbation] = None

    def __post_init__(self):
        kind = PotentialKind(self.kind)
        defaults = DEFAULT_PARAMS[kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"Unknown parameters for {kind.value}: {sorted(unknown)}")
        params = dict(defaults)
        params.update(self.params)

        if kind == PotentialKind.DOUBLE_WELL_CHAIN:
            if params["a"] <= 0 or params["b"] < 0 or params["c"] < 0:
                raise ValueError("double well requires a > 0, b >= 0, c >= 0")
            if params["embedding"] not in ("onsite", "hosted"):
                raise ValueError(f"Unknown double-well embedding '{params['embedding']}'")
        elif kind == PotentialKind.MORSE_DIMER:
            if min(params["D_e"], params["alpha"], params["r0"]) <= 0:
                raise ValueError("Morse dimer requires D_e, alpha, r0 > 0")
        elif kind == PotentialKind.ANHARMONIC_LATTICE:
            K = lattice_stiffness(params)
            if np.linalg.eigvalsh(0.5 * (K + K.T)).min() < -1e-10:
                raise ValueError("lattice stiffness matrix must be positive semidefinite")

        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)

    @property
    def is_perturbed(self) -> bool:
        return self.fidelity_perturbation is not None

    @property
    def n_atoms(self) -> int:
        p = self.params
        if self.kind == PotentialKind.MULLER_BROWN:
            return 1
        if self.kind == PotentialKind.DOUBLE_WELL_CHAIN:
            n = int(p["n_sites"])
            return n if p["embedding"] == "onsite" else 2 * n + 1
        if self.kind == PotentialKind.ANHARMONIC_LATTICE:
            return lattice_stiffness(p).shape[0] // 3
        return 2

    @property
    def rigid_invariant(self) -> bool:
        if self.kind == PotentialKind.MORSE_DIMER:
            return True
        return self.kind == PotentialKind.DOUBLE_WELL_CHAIN and self.params["embedding"] == "hosted"

    @property
    def guest_indices(self) -> np.ndarray:
        """Atoms that carry the double-well coordinate."""
        if self.kind == PotentialKind.DOUBLE_WELL_CHAIN and self.params["embedding"] == "hosted":
            return np.arange(1, self.n_atoms, 2)
        return np.arange(self.n_atoms)

    def energy_function(self) -> Callable:
        """Pure jnp energy of an (N, 3) position array."""
        pert = self.fidelity_perturbation
        stiffness = pert.stiffness_scale if pert else 1.0
        base = _BUILDERS[self.kind](self.params, stiffness)
        if pert is None:
            return base

        energy_scale = pert.energy_scale
        amplitude = pert.force_noise_amplitude
        kappa = pert.wavenumber

        def energy(R):
            e = energy_scale * base(R)
            n = R.shape[0]
            if amplitude and n > 1:
                i, j = np.triu_indices(n, 1)
                e = e + amplitude * jnp.sum(jnp.cos(kappa * _norm(R[i] - R[j])))
            return e

        return energy

    @cached_property
    def surface(self) -> "OracleSurface":
        return OracleSurface(self)


def make_potential(kind: Union[str, PotentialKind], params: Optional[Mapping] = None,
                   perturbation: Optional[Mapping] = None) -> ReferencePotential:
    """Build a potential from config-style values."""
    pert = FidelityPerturbation(**perturbation) if perturbation else None
    return ReferencePotential(PotentialKind(kind), dict(params or {}), pert)


class OracleSurface:
    """Exact energy, forces and Hessian of a reference potential."""

    def __init__(self, potential: ReferencePotential):
        fn = potential.energy_function()
        self.potential = potential
        self.rigid_invariant = potential.rigid_invariant
        self._energy = jax.jit(fn)
        self._grad = jax.jit(jax.grad(fn))
        self._hessian = jax.jit(jax.hessian(fn))

        def _all(R):
            return fn(R), -jax.grad(fn)(R), jax.hessian(fn)(R)

        self._batch = jax.jit(jax.vmap(_all))

    def _positions(self, structure: Structure) -> jnp.ndarray:
        expected = self.potential.n_atoms
        if structure.n_atoms != expected:
            raise DimensionError(
                f"{self.potential.kind.value} expects {expected} atoms, structure has {structure.n_atoms}")
        return jnp.asarray(structure.positions)

    def energy(self, structure: Structure) -> float:
        return float(self._energy(self._positions(structure)))

    def forces(self, structure: Structure) -> np.ndarray:
        return -np.asarray(self._grad(self._positions(structure)))

    def hessian(self, structure: Structure) -> np.ndarray:
        n_dof = 3 * structure.n_atoms
        return np.asarray(self._hessian(self._positions(structure))).reshape(n_dof, n_dof)

    def labels(self, structure: Structure) -> LabelSet:
        return LabelSet(self.energy(structure), self.forces(structure), self.hessian(structure))

    def batch_labels(self, structure: Structure, positions: np.ndarray):
        """Energies, forces and Hessians for a stack of positions of the given structure."""
        self._positions(structure)
        positions = jnp.asarray(np.asarray(positions, dtype=float).reshape(-1, structure.n_atoms, 3))
        energies, forces, hessians = self._batch(positions)
        n_dof = 3 * structure.n_atoms
        return (np.asarray(energies), np.asarray(forces),
                np.asarray(hessians).reshape(-1, n_dof, n_dof))


def eval_reference(pot: ReferencePotential, structure: Structure) -> LabelSet:
    """Energy, forces and Hessian of a structure on an analytic surface."""
    return pot.surface.labels(structure)


def low_fidelity_of(pot: ReferencePotential,
                    perturbation: Optional[FidelityPerturbation] = None) -> ReferencePotential:
    """
    Return the low-fidelity copy of a potential.

    The perturbation is smooth: energies are scaled, stiffness parameters are
    scaled, and a pair-distance cosine bias field is added, so the copy keeps
    exact derivatives and the symmetry group of the original.
    """
    if pot.is_perturbed:
        raise PerturbationError(f"{pot.kind.value} potential is already perturbed")
    return replace(pot, fidelity_perturbation=perturbation or FidelityPerturbation())


def reference_structure(pot: ReferencePotential, eta: float = 0.0) -> Structure:
    """Reference geometry of a potential with its double-well atoms displaced by eta along x."""
    p = pot.params
    kind = pot.kind
    if kind == PotentialKind.MULLER_BROWN:
        x, y = MULLER_BROWN_MINIMA["A"]
        return Structure(("X",), [[x + eta, y, 0.0]], masses=[p["mass"]])

    if kind == PotentialKind.DOUBLE_WELL_CHAIN:
        n = int(p["n_sites"])
        if p["embedding"] == "onsite":
            positions = np.zeros((n, 3))
            positions[:, 0] = np.arange(n) * p["spacing"] + eta
            return Structure(("X",) * n, positions, masses=[p["mass"]] * n)
        L = p["host_spacing"]
        positions = np.zeros((2 * n + 1, 3))
        positions[0::2, 0] = np.arange(n + 1) * L
        positions[1::2, 0] = (np.arange(n) + 0.5) * L + eta
        species = [p["host_species"] if i % 2 == 0 else p["guest_species"] for i in range(2 * n + 1)]
        return Structure(tuple(species), positions)

    if kind == PotentialKind.ANHARMONIC_LATTICE:
        positions = lattice_reference(p).copy()
        positions[:, 0] += eta
        n = positions.shape[0]
        return Structure(("X",) * n, positions, masses=[p["mass"]] * n)

    positions = np.array([[0.0, 0.0, 0.0], [p["r0"] + eta, 0.0, 0.0]])
    return Structure((p["species"], p["species"]), positions)


@dataclass
class ScanResult:
    eta: np.ndarray
    energies: np.ndarray
    minima: np.ndarray  # indices into eta

    @property
    def minima_positions(self) -> np.ndarray:
        return self.eta[self.minima]

    @property
    def n_minima(self) -> int:
        return len(self.minima)

    @property
    def is_double_well(self) -> bool:
        return self.n_minima >= 2

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"eta": self.eta, "energy": self.energies})
        df["is_minimum"] = False
        df.loc[self.minima, "is_minimum"] = True
        return df


def find_grid_minima(energies: Sequence[float]) -> np.ndarray:
    """Interior indices where the first difference changes sign from - to +."""
    diff = np.diff(np.asarray(energies, dtype=float))
    return np.where((diff[:-1] < 0) & (diff[1:] > 0))[0] + 1


def double_well_scan(source, grid: Sequence[float], reference: Optional[Structure] = None,
                     moving: Optional[Sequence[int]] = None) -> ScanResult:
    """
    Scan the energy along the symmetric displacement coordinate.

    Args:
        source: ReferencePotential, or any surface with an energy() method
        grid: Order-parameter values eta [Å]
        reference: Undisplaced structure (defaults to the potential's reference)
        moving: Atom indices displaced by eta along x (defaults to the double-well atoms)

    Returns:
        ScanResult with energies and grid minima
    """
    grid = np.asarray(grid, dtype=float)
    if isinstance(source, ReferencePotential):
        surface = source.surface
        reference = reference or reference_structure(source, 0.0)
        moving = source.guest_indices if moving is None else moving
    else:
        surface = source
        if reference is None:
            raise ValueError("a reference structure is required when scanning a surface")
        moving = np.arange(reference.n_atoms) if moving is None else moving

    moving = np.asarray(moving, dtype=int)
    energies = np.empty_like(grid)
    for k, eta in enumerate(grid):
        positions = np.array(reference.positions)
        positions[moving, 0] += eta
        energies[k] = surface.energy(reference.with_positions(positions))
    return ScanResult(grid, energies, find_grid_minima(energies))


def generate_dataset(pot: ReferencePotential, n_samples: int, sigma: float,
                     rng: np.random.Generator, hessian_fraction: float = 1.0,
                     eta: float = 0.0, fidelity: Optional[Fidelity] = None,
                     tag: str = "", chunk_size: int = 256) -> Dataset:
    """
    Label Gaussian-displaced copies of a potential's reference structure.

    Hessian labels are kept on a random subset of round(fraction * n) samples
    (at least one when the fraction is positive).
    """
    if fidelity is None:
        fidelity = Fidelity.LOW if pot.is_perturbed else Fidelity.HIGH
    base = reference_structure(pot, eta)
    displacements = rng.normal(0.0, sigma, size=(n_samples, base.n_atoms, 3))
    positions = base.positions[None] + displacements

    n_hessian = int(round(hessian_fraction * n_samples))
    if hessian_fraction > 0:
        n_hessian = max(1, n_hessian)
    keep = set(rng.permutation(n_samples)[:n_hessian].tolist())

    surface = pot.surface
    samples = []
    for start in range(0, n_samples, chunk_size):
        chunk = positions[start:start + chunk_size]
        energies, forces, hessians = surface.batch_labels(base, chunk)
        for k in range(chunk.shape[0]):
            idx = start + k
            labels = LabelSet(energies[k], forces[k], hessians[k] if idx in keep else None)
            samples.append(LabeledSample(base.with_positions(chunk[k]), labels, fidelity, tag))

    logging.info(f"Generated {n_samples} {Fidelity(fidelity).value}-fidelity samples "
                 f"({n_hessian} with Hessians) on {pot.kind.value}")
    provenance = {
        "potential": pot.kind.value,
        "params": {k: v for k, v in pot.params.items() if not isinstance(v, (list, np.ndarray))},
        "sigma": sigma,
        "eta": eta,
        "perturbed": pot.is_perturbed,
    }
    return Dataset(tuple(samples), provenance)


def grid_ground_state_energy(potential: Callable[[np.ndarray], np.ndarray], mass: float,
                             grid: np.ndarray) -> float:
    """
    Lowest eigenvalue of -ħ²/2m d²/dx² + V(x) on a uniform grid.

    Args:
        potential: Vectorized V(x) [eV]
        mass: Particle mass [amu]
        grid: Uniform grid [Å] wide enough that the wavefunction vanishes at the ends

    Returns:
        Ground-state energy [eV]
    """
    grid = np.asarray(grid, dtype=float)
    h = grid[1] - grid[0]
    kinetic = HBAR ** 2 / (2.0 * mass * AMU * h * h)
    diagonal = 2.0 * kinetic + potential(grid)
    off_diagonal = -kinetic * np.ones(len(grid) - 1)
    values = linalg.eigh_tridiagonal(diagonal, off_diagonal, eigvals_only=True,
                                     select="i", select_range=(0, 0))
    return float(values[0])


def optimal_gaussian_energy(a: float, b: float, mass: float):
    """
    Best Gaussian variational energy for V(u) = a·u⁴ - b·u².

    Minimizes ħ²/(8ms) + a(c⁴ + 6c²s + 3s²) - b(c² + s) over centroid c and
    variance s by a brute-force grid followed by a simplex polish.

    Returns:
        (energy [eV], centroid [Å], variance [Å²])
    """
    kinetic = HBAR ** 2 / (8.0 * mass * AMU)

    def functional(x):
        c, log_s = x
        s = np.exp(log_s)
        return kinetic / s + a * (c ** 4 + 6 * c * c * s + 3 * s * s) - b * (c * c + s)

    scale = np.sqrt(max(b, 1e-12) / (2 * a)) + 1.0
    best = optimize.brute(functional, ((0.0, 2 * scale), (-12.0, 3.0)), Ns=80,
                          finish=optimize.fmin, full_output=True, disp=False)
    (c, log_s), energy = best[0], best[1]
    return float(energy), float(abs(c)), float(np.exp(log_s))
