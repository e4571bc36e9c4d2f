"""Shared fixtures: small structures, analytic surfaces and oracle potentials."""

import numpy as np
import pytest

from oracles import make_potential
from structures import Fidelity, LabeledSample, LabelSet, Structure


class QuadraticSurface:
    """E = ½ xᵀKx + gᵀx for a single atom; negative entries of K make a saddle."""

    rigid_invariant = False

    def __init__(self, curvatures, gradient=None):
        self.K = np.diag(np.asarray(curvatures, dtype=float))
        self.g = np.zeros(3) if gradient is None else np.asarray(gradient, dtype=float)
        self.calls = 0

    def energy(self, structure):
        x = structure.flat_positions
        return float(0.5 * x @ self.K @ x + self.g @ x)

    def forces(self, structure):
        x = structure.flat_positions
        return -(self.K @ x + self.g).reshape(-1, 3)

    def hessian(self, structure):
        return self.K.copy()

    def labels(self, structure):
        return LabelSet(self.energy(structure), self.forces(structure), self.hessian(structure))

    def batch_labels(self, structure, positions):
        self.calls += len(positions)
        flat = np.asarray(positions, dtype=float).reshape(len(positions), -1)
        energies = 0.5 * np.einsum("bi,ij,bj->b", flat, self.K, flat) + flat @ self.g
        forces = -(flat @ self.K + self.g).reshape(len(positions), -1, 3)
        hessians = np.broadcast_to(self.K, (len(positions),) + self.K.shape).copy()
        return energies, forces, hessians


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def single_atom():
    return Structure(("X",), [[0.0, 0.0, 0.0]], masses=[1.0])


@pytest.fixture
def bowl():
    return QuadraticSurface([1.0, 2.0, 3.0])


@pytest.fixture
def saddle_surface():
    return QuadraticSurface([-1.0, 2.0, 3.0])


@pytest.fixture
def water():
    positions = [[0.0, 0.0, 0.117], [0.0, 0.757, -0.469], [0.0, -0.757, -0.469]]
    return Structure(("O", "H", "H"), positions)


@pytest.fixture
def water_sample(water):
    labels = LabelSet(-1.5, np.zeros((3, 3)), np.eye(9))
    return LabeledSample(water, labels, Fidelity.HIGH, "water")


@pytest.fixture
def hosted():
    """H3S-like host-guest-host chain with one double-well guest."""
    return make_potential("double_well_chain", {"embedding": "hosted", "n_sites": 1})


@pytest.fixture
def onsite():
    return make_potential("double_well_chain", {"embedding": "onsite", "n_sites": 1})


@pytest.fixture
def muller_brown():
    return make_potential("muller_brown")
