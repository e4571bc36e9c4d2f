#!/usr/bin/env python3
"""
potential.py - Descriptor-based neural potential with exact nested derivatives

A radial-fingerprint descriptor feeds a per-atom flax MLP with a smooth
activation. Forces come from reverse-mode differentiation, Hessian-vector
products from forward-over-reverse, and the parameter gradient of the
Hessian-projection loss from a reverse pass over that graph, so the full
Hessian is never built during training.
"""

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import flax.linen
import flax.linen.initializers
import flax.serialization
import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from hessian_loss import (
    ProjectionConfig, draw_projection_vectors, projected_hessian_loss, projection_rng,
)
from structures import Dataset, DimensionError, LabeledSample, LabelSet, Structure, symmetrize

jax.config.update("jax_enable_x64", True)

CHECKPOINT_FORMAT = "hint-neural-pes"
CHECKPOINT_VERSION = 1

ModelParams = Dict[str, object]


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


class MissingLabelError(ValueError):
    """Raised when a sample lacks a label whose loss weight is nonzero."""


def _aux_function_f(t):
    "First auxiliary function used in the definition of the smooth bump."
    return jnp.where(t > 0., jnp.exp(-1. / jnp.where(t > 0., t, 1.)), 0.)


def _aux_function_g(t):
    "Second auxiliary function used in the definition of the smooth bump."
    f_of_t = _aux_function_f(t)
    return f_of_t / (f_of_t + _aux_function_f(1. - t))


def smooth_cutoff(r, r_switch, r_cut):
    """C^∞ switch equal to 1 below r_switch and exactly 0 beyond r_cut."""
    r_switch2 = r_switch * r_switch
    r_cut2 = r_cut * r_cut
    return 1. - _aux_function_g((r * r - r_switch2) / (r_cut2 - r_switch2))


@dataclass(frozen=True)
class DescriptorConfig:
    """
    Radial fingerprint settings.

    Args:
        cutoff: Neighbor cutoff radius [Å]
        n_basis: Number of Gaussian radial functions (>= 2)
        r_min: Position of the first Gaussian center [Å]
        switch_fraction: Fraction of the cutoff where the envelope starts to decay
        basis_type: Only "gaussian_radial" is supported
        species_weighting: Keep one channel block per neighbor species
    """
    cutoff: float = 4.0
    n_basis: int = 8
    r_min: float = 0.5
    switch_fraction: float = 0.5
    basis_type: str = "gaussian_radial"
    species_weighting: bool = True

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("descriptor cutoff must be positive")
        if self.n_basis < 2:
            raise ValueError("descriptor needs at least 2 radial functions")
        if self.basis_type != "gaussian_radial":
            raise ValueError(f"Unknown radial basis '{self.basis_type}'")
        if not 0.0 < self.switch_fraction < 1.0:
            raise ValueError("switch_fraction must lie in (0, 1)")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.r_min, self.cutoff, self.n_basis)

    @property
    def width(self) -> float:
        return (self.cutoff - self.r_min) / (self.n_basis - 1)


def _descriptors(cfg: DescriptorConfig, n_species: int, positions, types, cell, pbc):
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]
    if cell is not None:
        frac = diff @ jnp.linalg.inv(cell)
        diff = diff - (jnp.round(frac) * pbc) @ cell
    off_diagonal = ~np.eye(n, dtype=bool)
    d2 = jnp.sum(diff * diff, axis=-1)
    r = jnp.sqrt(jnp.where(off_diagonal, d2, 1.0))

    centers = jnp.asarray(cfg.centers)
    envelope = smooth_cutoff(r, cfg.switch_fraction * cfg.cutoff, cfg.cutoff)
    envelope = jnp.where(off_diagonal, envelope, 0.0)
    basis = jnp.exp(-0.5 * ((r[..., None] - centers) / cfg.width) ** 2) * envelope[..., None]

    if cfg.species_weighting:
        onehot = jax.nn.one_hot(types, n_species)
        return jnp.einsum("ijk,js->isk", basis, onehot).reshape(n, n_species * cfg.n_basis)
    return jnp.sum(basis, axis=1)


class AtomicMLP(flax.linen.Module):
    """Per-atom energy network with a smooth activation and a linear outlet.

    Args:
        layer_widths: Hidden layer widths; the output layer always has width one.
        activation_function: Must be at least C², softplus by default.
        kernel_init: Initializer for the weight matrices.
    """
    layer_widths: Sequence[int]
    activation_function: Callable = flax.linen.softplus
    kernel_init: Callable = flax.linen.initializers.lecun_normal()

    @flax.linen.compact
    def __call__(self, descriptors):
        result = self.activation_function(
            flax.linen.Dense(self.layer_widths[0], kernel_init=self.kernel_init, name="Inlet")(descriptors)
        )
        for i_w, w in enumerate(self.layer_widths[1:]):
            result = self.activation_function(
                flax.linen.Dense(w, kernel_init=self.kernel_init, name=f"Stage_{i_w + 1}")(result)
            )
        return flax.linen.Dense(1, kernel_init=self.kernel_init, name="Outlet")(result)[..., 0]


@dataclass(frozen=True)
class NeuralPotential:
    """Architecture of the neural potential; parameters live separately in a pytree."""
    descriptor: DescriptorConfig
    species: Tuple[str, ...]
    layer_widths: Tuple[int, ...] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.species:
            raise ValueError("model needs at least one species")
        if not self.layer_widths:
            raise ValueError("model needs at least one hidden layer")

    @property
    def core(self) -> AtomicMLP:
        return AtomicMLP(self.layer_widths)

    @property
    def n_features(self) -> int:
        n = self.descriptor.n_basis
        return n * len(self.species) if self.descriptor.species_weighting else n

    def init_params(self, seed: int = 0) -> ModelParams:
        key = jax.random.PRNGKey(seed)
        core = self.core.init(key, jnp.zeros((1, self.n_features)))["params"]
        n_species = len(self.species)
        return {
            "core": flax.serialization.to_state_dict(core),
            "scale": jnp.ones(n_species),
            "shift": jnp.zeros(n_species),
        }

    def types_of(self, structure: Structure) -> np.ndarray:
        try:
            return np.array([self.species.index(s) for s in structure.species], dtype=np.int32)
        except ValueError:
            unknown = sorted(set(structure.species) - set(self.species))
            raise DimensionError(f"species {unknown} not known to the model {list(self.species)}")

    def descriptors(self, positions, types, cell=None, pbc=None):
        return _descriptors(self.descriptor, len(self.species), positions, types, cell, pbc)

    def atomic_energies(self, params, positions, types, cell=None, pbc=None):
        features = self.descriptors(positions, types, cell, pbc)
        raw = self.core.apply({"params": params["core"]}, features)
        return params["scale"][types] * raw + params["shift"][types]

    def energy_fn(self, params, positions, types, cell=None, pbc=None):
        return jnp.sum(self.atomic_energies(params, positions, types, cell, pbc))


def _structure_args(model: NeuralPotential, structure: Structure):
    cell = None if structure.cell is None else jnp.asarray(structure.cell)
    pbc = None if structure.cell is None else jnp.asarray(structure.pbc, dtype=float)
    return jnp.asarray(structure.positions), jnp.asarray(model.types_of(structure)), cell, pbc


def _hvp_impl(model, params, positions, types, cell, pbc, z):
    def gradient(R):
        return jax.grad(model.energy_fn, argnums=1)(params, R, types, cell, pbc)

    return jax.jvp(gradient, (positions,), (z.reshape(positions.shape),))[1].reshape(-1)


@partial(jax.jit, static_argnums=0)
def _energy(model, params, positions, types, cell, pbc):
    return model.energy_fn(params, positions, types, cell, pbc)


@partial(jax.jit, static_argnums=0)
def _forces(model, params, positions, types, cell, pbc):
    return -jax.grad(model.energy_fn, argnums=1)(params, positions, types, cell, pbc)


@partial(jax.jit, static_argnums=0)
def _hvp(model, params, positions, types, cell, pbc, z):
    return _hvp_impl(model, params, positions, types, cell, pbc, z)


def _hessian_columns(model, params, positions, types, cell, pbc):
    n_dof = positions.size
    columns = jax.vmap(lambda e: _hvp_impl(model, params, positions, types, cell, pbc, e))(jnp.eye(n_dof))
    return columns.T


_full_hessian = jax.jit(_hessian_columns, static_argnums=0)


@partial(jax.jit, static_argnums=0)
def _batch_labels(model, params, positions, types, cell, pbc):
    def one(R):
        e, g = jax.value_and_grad(model.energy_fn, argnums=1)(params, R, types, cell, pbc)
        return e, -g, _hessian_columns(model, params, R, types, cell, pbc)

    return jax.vmap(one)(positions)


def descriptor(structure: Structure, cfg: DescriptorConfig,
               species: Optional[Sequence[str]] = None) -> np.ndarray:
    """Per-atom feature vectors of a structure."""
    species = tuple(species) if species is not None else tuple(sorted(set(structure.species)))
    model = NeuralPotential(cfg, species, (1,))
    positions, types, cell, pbc = _structure_args(model, structure)
    return np.asarray(model.descriptors(positions, types, cell, pbc))


def energy(model: NeuralPotential, params: ModelParams, structure: Structure) -> float:
    return float(_energy(model, params, *_structure_args(model, structure)))


def forces(model: NeuralPotential, params: ModelParams, structure: Structure) -> np.ndarray:
    return np.asarray(_forces(model, params, *_structure_args(model, structure)))


def hvp(model: NeuralPotential, params: ModelParams, structure: Structure, z) -> np.ndarray:
    """Model Hessian times z via forward-over-reverse differentiation."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != 3 * structure.n_atoms:
        raise DimensionError(f"vector of length {z.shape[0]} for {3 * structure.n_atoms} DOF")
    return np.asarray(_hvp(model, params, *_structure_args(model, structure), jnp.asarray(z)))


def full_hessian(model: NeuralPotential, params: ModelParams, structure: Structure,
                 return_defect: bool = False):
    """
    Model Hessian assembled column by column from HvPs, then symmetrized.

    Returns:
        The symmetrized matrix, or (matrix, max asymmetry) if return_defect is set
    """
    raw = np.asarray(_full_hessian(model, params, *_structure_args(model, structure)))
    defect = float(np.max(np.abs(raw - raw.T))) if raw.size else 0.0
    if defect > 1e-8:
        logging.debug(f"Model Hessian symmetry defect {defect:.3e} eV/Å²")
    hessian = symmetrize(raw)
    return (hessian, defect) if return_defect else hessian


def flatten_params(params: ModelParams):
    """Flat parameter vector and the function restoring the pytree."""
    return ravel_pytree(params)


class ModelSurface:
    """Surface interface over a trained model."""
    rigid_invariant = True

    def __init__(self, model: NeuralPotential, params: ModelParams):
        self.model = model
        self.params = params

    def energy(self, structure: Structure) -> float:
        return energy(self.model, self.params, structure)

    def forces(self, structure: Structure) -> np.ndarray:
        return forces(self.model, self.params, structure)

    def hessian(self, structure: Structure) -> np.ndarray:
        return full_hessian(self.model, self.params, structure)

    def labels(self, structure: Structure) -> LabelSet:
        return LabelSet(self.energy(structure), self.forces(structure), self.hessian(structure))

    def batch_labels(self, structure: Structure, positions: np.ndarray):
        _, types, cell, pbc = _structure_args(self.model, structure)
        positions = jnp.asarray(np.asarray(positions, dtype=float).reshape(-1, structure.n_atoms, 3))
        energies, forces_, hessians = _batch_labels(self.model, self.params, positions, types, cell, pbc)
        hessians = np.asarray(hessians)
        return np.asarray(energies), np.asarray(forces_), 0.5 * (hessians + np.swapaxes(hessians, 1, 2))


def fit_energy_shift(model: NeuralPotential, params: ModelParams, dataset: Dataset) -> ModelParams:
    """Least-squares per-species energy shift against the dataset's energy labels."""
    rows, residuals = [], []
    zero_shift = dict(params, shift=jnp.zeros(len(model.species)))
    for sample in dataset:
        if sample.labels.energy is None:
            continue
        types = model.types_of(sample.structure)
        rows.append(np.bincount(types, minlength=len(model.species)))
        residuals.append(sample.labels.energy - energy(model, zero_shift, sample.structure))
    if not rows:
        return params
    shift, *_ = np.linalg.lstsq(np.asarray(rows, dtype=float), np.asarray(residuals), rcond=None)
    return dict(params, shift=jnp.asarray(shift))


def save_checkpoint(path: str, model: NeuralPotential, params: ModelParams,
                    metadata: Optional[Dict[str, object]] = None) -> None:
    """Write a self-describing msgpack checkpoint."""
    d = model.descriptor
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "descriptor": {
            "cutoff": float(d.cutoff),
            "n_basis": int(d.n_basis),
            "r_min": float(d.r_min),
            "switch_fraction": float(d.switch_fraction),
            "basis_type": d.basis_type,
            "species_weighting": bool(d.species_weighting),
        },
        "architecture": {"layer_widths": [int(w) for w in model.layer_widths], "activation": "softplus"},
        "species": list(model.species),
        "metadata": dict(metadata or {}),
        "params": jax.tree_util.tree_map(np.asarray, params),
    }
    with open(path, "wb") as f:
        f.write(flax.serialization.msgpack_serialize(payload))
    logging.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[NeuralPotential, ModelParams]:
    """Read a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        try:
            payload = flax.serialization.msgpack_restore(f.read())
        except Exception as e:
            raise CheckpointError(f"{path}: not a readable checkpoint ({e})")

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format")
    if int(payload.get("version", -1)) > CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload['version']} is newer than supported")

    model = NeuralPotential(
        DescriptorConfig(**payload["descriptor"]),
        tuple(payload["species"]),
        tuple(payload["architecture"]["layer_widths"]),
    )
    params = jax.tree_util.tree_map(jnp.asarray, payload["params"])
    return model, params


# Batched losses

@dataclass(frozen=True)
class LossWeights:
    energy: float = 4.0
    force: float = 100.0
    hessian: float = 0.1


@dataclass
class LossValue:
    total: float
    energy: float
    force: float
    hessian: float
    n_hessian: int
    grads: Optional[ModelParams] = None


def _bucket(n: int) -> int:
    size = 1
    while size < n:
        size *= 2
    return size


def _stack_group(model: NeuralPotential, samples: List[LabeledSample], size: int):
    padded = samples + [samples[0]] * (size - len(samples))
    mask = np.zeros(size)
    mask[:len(samples)] = 1.0
    positions = np.stack([s.structure.positions for s in padded])
    types = np.stack([model.types_of(s.structure) for s in padded])
    if samples[0].structure.cell is None:
        cells = pbcs = None
    else:
        cells = jnp.asarray(np.stack([s.structure.cell for s in padded]))
        pbcs = jnp.asarray(np.stack([np.asarray(s.structure.pbc, dtype=float) for s in padded]))
    return padded, jnp.asarray(positions), jnp.asarray(types), cells, pbcs, jnp.asarray(mask)


@partial(jax.jit, static_argnums=(0, 1))
def _ef_value_and_grad(model, per_atom, params, coeffs, positions, types, cells, pbcs, e_ref, f_ref, mask):
    def terms(p):
        def one(R, t, c, pb):
            e, g = jax.value_and_grad(model.energy_fn, argnums=1)(p, R, t, c, pb)
            return e, -g

        e_pred, f_pred = jax.vmap(one)(positions, types, cells, pbcs)
        de = e_pred - e_ref
        if per_atom:
            de = de / positions.shape[1]
        s_e = jnp.sum(mask * de * de)
        s_f = jnp.sum(mask[:, None, None] * (f_pred - f_ref) ** 2)
        return coeffs[0] * s_e + coeffs[1] * s_f, (s_e, s_f)

    return jax.value_and_grad(terms, has_aux=True)(params)


@partial(jax.jit, static_argnums=0)
def _h_value_and_grad(model, params, coeff, positions, types, cells, pbcs, h_ref, zs, mask):
    def term(p):
        def one(R, t, c, pb, H, Z):
            return projected_hessian_loss(lambda z: _hvp_impl(model, p, R, t, c, pb, z), H, Z)

        losses = jax.vmap(one)(positions, types, cells, pbcs, h_ref, zs)
        s_h = jnp.sum(mask * losses)
        return coeff * s_h, s_h

    return jax.value_and_grad(term, has_aux=True)(params)


def _add(a, b):
    return jax.tree_util.tree_map(jnp.add, a, b)


def loss_and_gradient(model: NeuralPotential, params: ModelParams, batch: Sequence[LabeledSample],
                      weights: LossWeights, projection: ProjectionConfig, seed: int = 0,
                      step: int = 0, sample_ids: Optional[Sequence[int]] = None,
                      per_atom_energy: bool = False) -> LossValue:
    """
    Total loss w_E·L_E + w_F·L_F + w_H·L_H of a batch and its exact parameter gradient.

    L_E is the mean squared energy error, L_F the mean squared force component
    error, and L_H the projected Hessian loss averaged over the samples that
    carry Hessian labels. Projection vectors are drawn from the stream of
    (seed, sample id, step). Groups are reduced in a fixed order.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("loss requires a nonempty batch")
    sample_ids = list(range(len(batch))) if sample_ids is None else list(sample_ids)

    for sample in batch:
        if weights.energy != 0 and sample.labels.energy is None:
            raise MissingLabelError(f"sample '{sample.tag}' has no energy label but w_E = {weights.energy}")
        if weights.force != 0 and sample.labels.forces is None:
            raise MissingLabelError(f"sample '{sample.tag}' has no force labels but w_F = {weights.force}")

    n_samples = len(batch)
    n_components = sum(3 * s.structure.n_atoms for s in batch)
    hessian_ids = [i for i, s in enumerate(batch) if s.has_hessian]
    n_hessian = len(hessian_ids)

    coeffs = jnp.asarray([weights.energy / n_samples, weights.force / n_components])
    coeff_h = weights.hessian / n_hessian if n_hessian else 0.0

    groups: Dict[Tuple[int, bool], List[int]] = {}
    for i, sample in enumerate(batch):
        groups.setdefault((sample.structure.n_atoms, sample.structure.cell is not None), []).append(i)

    grads = jax.tree_util.tree_map(jnp.zeros_like, params)
    s_e = s_f = s_h = 0.0
    shared_rng = None if projection.per_sample else projection_rng(seed, None, step)
    shared_zs: Dict[int, np.ndarray] = {}

    for key in sorted(groups):
        members = [batch[i] for i in groups[key]]
        padded, positions, types, cells, pbcs, mask = _stack_group(model, members, _bucket(len(members)))
        e_ref = jnp.asarray([s.labels.energy if s.labels.energy is not None else 0.0 for s in padded])
        f_ref = jnp.asarray(np.stack([
            s.labels.forces if s.labels.forces is not None else np.zeros((key[0], 3)) for s in padded]))
        (_, (ge, gf)), g = _ef_value_and_grad(
            model, bool(per_atom_energy), params, coeffs, positions, types, cells, pbcs, e_ref, f_ref, mask)
        grads = _add(grads, g)
        s_e += float(ge)
        s_f += float(gf)

        h_members = [i for i in groups[key] if i in hessian_ids]
        if not h_members or weights.hessian == 0:
            continue
        h_samples = [batch[i] for i in h_members]
        n_dof = 3 * key[0]
        zs = []
        for i in h_members:
            if projection.per_sample:
                zs.append(draw_projection_vectors(projection, n_dof, projection_rng(seed, sample_ids[i], step)))
            else:
                if n_dof not in shared_zs:
                    shared_zs[n_dof] = draw_projection_vectors(projection, n_dof, shared_rng)
                zs.append(shared_zs[n_dof])
        size = _bucket(len(h_samples))
        zs = zs + [zs[0]] * (size - len(zs))
        padded, positions, types, cells, pbcs, mask = _stack_group(model, h_samples, size)
        h_ref = jnp.asarray(np.stack([s.labels.hessian for s in padded]))
        (_, gh), g = _h_value_and_grad(
            model, params, coeff_h, positions, types, cells, pbcs, h_ref, jnp.asarray(np.stack(zs)), mask)
        grads = _add(grads, g)
        s_h += float(gh)

    loss_e = s_e / n_samples
    loss_f = s_f / n_components
    loss_h = s_h / n_hessian if n_hessian else 0.0
    total = weights.energy * loss_e + weights.force * loss_f + weights.hessian * loss_h
    return LossValue(total, loss_e, loss_f, loss_h, n_hessian, grads)


def loss_param_gradient(model: NeuralPotential, params: ModelParams, batch: Sequence[LabeledSample],
                        weights: LossWeights, projection: ProjectionConfig, seed: int = 0,
                        step: int = 0, per_atom_energy: bool = False) -> ModelParams:
    """Exact parameter gradient of the total loss, third-order Hessian-loss terms included."""
    return loss_and_gradient(model, params, batch, weights, projection, seed, step,
                             per_atom_energy=per_atom_energy).grads
