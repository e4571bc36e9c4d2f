#!/usr/bin/env python3
"""
structures.py - Shared data model for the HINT toolkit

Structures, label sets, labeled samples, datasets and the fixed unit system
(eV / Å / amu / K / fs) used by every other module. All types are immutable
after construction so they can be shared freely across worker threads.
"""

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np


# Physical constants (CODATA 2018)
HBAR = 0.6582119569  # eV·fs
KB = 8.617333262e-5  # eV/K
AMU = 103.642696562  # 1 amu in eV·fs²/Å²
SPEED_OF_LIGHT = 2.99792458e-5  # cm/fs
PASCAL = 6.241509074e-12  # 1 Pa in eV/Å³
STANDARD_PRESSURE = 101325.0  # Pa
MEV_TO_K = 11.604518121  # 1 meV / k_B in K

SYMMETRY_TOL = 1e-8  # eV/Å²

DEFAULT_MASSES = {
    "H": 1.008,
    "D": 2.014,
    "T": 3.016,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "S": 32.06,
    "La": 138.905,
    "X": 1.0,
}


@dataclass(frozen=True)
class UnitSystem:
    """Constants record for the internal unit system."""
    hbar: float = HBAR
    kb: float = KB
    amu: float = AMU
    standard_pressure: float = STANDARD_PRESSURE * PASCAL


UNITS = UnitSystem()


class DimensionError(ValueError):
    """Raised when array shapes disagree with the atom count."""


class Fidelity(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def default_mass(species: str) -> float:
    """Look up the default mass of a species identifier."""
    try:
        return DEFAULT_MASSES[species]
    except KeyError:
        raise DimensionError(f"No default mass for species '{species}'; pass masses explicitly")


@dataclass(frozen=True, eq=False)
class Structure:
    """Atomic species, Cartesian positions [Å], masses [amu] and an optional cell."""
    species: Tuple[str, ...]
    positions: np.ndarray
    masses: Optional[np.ndarray] = None
    cell: Optional[np.ndarray] = None
    pbc: Tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        species = tuple(str(s) for s in self.species)
        positions = _frozen_array(self.positions).reshape(-1, 3) if len(species) else _frozen_array(np.zeros((0, 3)))
        if positions.shape[0] != len(species):
            raise DimensionError(
                f"positions length {positions.shape[0]} does not match species length {len(species)}")

        if self.masses is None:
            masses = _frozen_array([default_mass(s) for s in species])
        else:
            masses = _frozen_array(self.masses).reshape(-1)
        if masses.shape[0] != len(species):
            raise DimensionError(f"masses length {masses.shape[0]} does not match species length {len(species)}")
        if np.any(masses <= 0):
            raise DimensionError("masses must be positive")

        cell = None
        pbc = tuple(bool(p) for p in self.pbc)
        if self.cell is not None:
            cell = _frozen_array(self.cell).reshape(3, 3)
            if abs(np.linalg.det(cell)) <= 1e-10:
                raise DimensionError("cell matrix is singular")
        elif any(pbc):
            raise DimensionError("periodic flags set without a cell")

        object.__setattr__(self, "species", species)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "pbc", pbc)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def flat_positions(self) -> np.ndarray:
        return self.positions.reshape(-1)

    def with_positions(self, positions) -> "Structure":
        """Return a copy with new positions (flat or N×3)."""
        return replace(self, positions=np.asarray(positions, dtype=float).reshape(-1, 3))

    def with_masses(self, masses) -> "Structure":
        return replace(self, masses=np.asarray(masses, dtype=float))


def dof_count(structure: Structure) -> int:
    """Number of Cartesian degrees of freedom, 3N."""
    return 3 * structure.n_atoms


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Return (H + Hᵀ)/2."""
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


def rmsd(a: Structure, b: Structure) -> float:
    """Root-mean-square deviation with identity atom mapping."""
    if a.n_atoms != b.n_atoms:
        raise DimensionError(f"cannot compare structures with {a.n_atoms} and {b.n_atoms} atoms")
    diff = a.positions - b.positions
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Reference energy [eV], forces [eV/Å] and Hessian [eV/Å²]; each optional."""
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.energy is not None:
            object.__setattr__(self, "energy", float(self.energy))
        if self.forces is not None:
            object.__setattr__(self, "forces", _frozen_array(self.forces).reshape(-1, 3))
        if self.hessian is not None:
            hessian = _frozen_array(self.hessian)
            if hessian.ndim != 2:
                raise DimensionError("hessian must be a matrix")
            object.__setattr__(self, "hessian", hessian)

    @property
    def is_empty(self) -> bool:
        return self.energy is None and self.forces is None and self.hessian is None


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """A structure with its labels, fidelity tag and free-form tag."""
    structure: Structure
    labels: LabelSet
    fidelity: Fidelity = Fidelity.HIGH
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "fidelity", Fidelity(self.fidelity))

    @property
    def has_hessian(self) -> bool:
        return self.labels.hessian is not None

    def without_hessian(self) -> "LabeledSample":
        return replace(self, labels=replace(self.labels, hessian=None))


@dataclass
class ValidationReport:
    passed: bool
    violations: List[str]
    warnings: List[str]
    max_asymmetry: float
    sample: LabeledSample


def validate_sample(sample: LabeledSample) -> ValidationReport:
    """
    Check a sample's label dimensions against its structure.

    The returned report carries the sample with its Hessian symmetrized; the
    input is never modified. Asymmetry above the tolerance is a warning, not
    a failure.

    Args:
        sample: Sample to check

    Returns:
        ValidationReport with violations, warnings and the symmetrized sample
    """
    violations = []
    warnings = []
    max_asymmetry = 0.0
    labels = sample.labels
    n_atoms = sample.structure.n_atoms

    if labels.is_empty:
        violations.append("no labels present")

    if labels.forces is not None and labels.forces.shape[0] != n_atoms:
        violations.append(
            f"forces/atom mismatch: {labels.forces.shape[0]} force vectors for {n_atoms} atoms")

    hessian = labels.hessian
    if hessian is not None:
        n_dof = 3 * n_atoms
        if hessian.shape != (n_dof, n_dof):
            violations.append(f"hessian dimension {hessian.shape} does not match {n_dof}x{n_dof}")
        else:
            max_asymmetry = float(np.max(np.abs(hessian - hessian.T))) if n_dof else 0.0
            if max_asymmetry > SYMMETRY_TOL:
                warnings.append(f"hessian asymmetry {max_asymmetry:.3e} eV/Å² symmetrized")
                logging.warning(f"Sample '{sample.tag}': hessian asymmetry {max_asymmetry:.3e} eV/Å² symmetrized")
            hessian = symmetrize(hessian)

    if labels.energy is not None and not np.isfinite(labels.energy):
        violations.append("energy is not finite")

    fixed = replace(sample, labels=replace(labels, hessian=hessian))
    return ValidationReport(
        passed=not violations,
        violations=violations,
        warnings=warnings,
        max_asymmetry=max_asymmetry,
        sample=fixed,
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered collection of labeled samples plus provenance metadata."""
    samples: Tuple[LabeledSample, ...]
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> LabeledSample:
        return self.samples[index]

    @property
    def n_hessian(self) -> int:
        return sum(1 for s in self.samples if s.has_hessian)

    def subset(self, indices: Sequence[int], note: Optional[str] = None) -> "Dataset":
        provenance = dict(self.provenance)
        if note:
            provenance["subset"] = note
        return Dataset(tuple(self.samples[int(i)] for i in indices), provenance)

    def filter_fidelity(self, fidelity: Fidelity) -> "Dataset":
        fidelity = Fidelity(fidelity)
        return Dataset(tuple(s for s in self.samples if s.fidelity == fidelity), self.provenance)

    def with_hessian_fraction(self, fraction: float, rng: np.random.Generator) -> "Dataset":
        """Keep Hessian labels on a random fraction of the labeled samples (at least one if fraction > 0)."""
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"hessian fraction must lie in [0, 1], got {fraction}")
        labeled = [i for i, s in enumerate(self.samples) if s.has_hessian]
        if not labeled:
            return self
        n_keep = int(round(fraction * len(labeled)))
        if fraction > 0:
            n_keep = max(1, n_keep)
        keep = set(rng.permutation(labeled)[:n_keep].tolist())
        samples = tuple(s if (i in keep or not s.has_hessian) else s.without_hessian()
                        for i, s in enumerate(self.samples))
        return Dataset(samples, dict(self.provenance, hessian_fraction=fraction))

    def concat(self, other: "Dataset") -> "Dataset":
        provenance = dict(self.provenance)
        provenance.update({k: v for k, v in other.provenance.items() if k not in provenance})
        return Dataset(self.samples + other.samples, provenance)


class Surface(Protocol):
    """Anything that can label structures: oracles and trained models."""
    rigid_invariant: bool

    def energy(self, structure: Structure) -> float: ...

    def forces(self, structure: Structure) -> np.ndarray: ...

    def hessian(self, structure: Structure) -> np.ndarray: ...

    def labels(self, structure: Structure) -> LabelSet: ...

    def batch_labels(self, structure: Structure, positions: np.ndarray
                     ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]: ...
