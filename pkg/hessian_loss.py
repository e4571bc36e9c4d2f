#!/usr/bin/env python3
"""
hessian_loss.py - Stochastic projected Hessian loss

Projection-vector generation (Rademacher or coordinate columns) and the
projected mean-squared error between model and reference Hessian-vector
products. Reference products use the stored dense Hessian label.
"""

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from structures import DimensionError

jax.config.update("jax_enable_x64", True)


class ProjectionError(ValueError):
    """Raised for an impossible projection request."""


class ProjectionMode(str, enum.Enum):
    RADEMACHER = "rademacher"
    COORDINATE_COLUMN = "coordinate_column"


@dataclass(frozen=True)
class ProjectionConfig:
    """
    Projection settings.

    Args:
        mode: Rademacher (Hutchinson) vectors or one-hot coordinate columns
        m: Vectors per sample per optimizer step
        per_sample: Draw fresh vectors for every sample; otherwise share one set per step
    """
    mode: ProjectionMode = ProjectionMode.RADEMACHER
    m: int = 5
    per_sample: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", ProjectionMode(self.mode))
        if int(self.m) < 1:
            raise ProjectionError(f"projection count m must be >= 1, got {self.m}")
        object.__setattr__(self, "m", int(self.m))


def projection_rng(seed: int, sample_id: Optional[int], step: int) -> np.random.Generator:
    """Counter-based stream for one (seed, sample, step) triple; shared stream when sample_id is None."""
    if sample_id is None:
        return np.random.default_rng([int(seed), int(step)])
    return np.random.default_rng([int(seed), int(sample_id), int(step)])


def draw_projection_vectors(cfg: ProjectionConfig, n_dof: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw m projection vectors of length n_dof.

    Returns:
        Array of shape (m, n_dof)
    """
    if n_dof < 1:
        raise ProjectionError("n_dof must be >= 1")
    if cfg.mode == ProjectionMode.RADEMACHER:
        return (2.0 * rng.integers(0, 2, size=(cfg.m, n_dof)) - 1.0).astype(float)

    if cfg.m > n_dof:
        raise ProjectionError(f"cannot draw {cfg.m} distinct coordinate columns from {n_dof} DOF")
    columns = rng.choice(n_dof, size=cfg.m, replace=False)
    vectors = np.zeros((cfg.m, n_dof))
    vectors[np.arange(cfg.m), columns] = 1.0
    return vectors


def projected_hessian_loss(hvp_model: Callable, H_ref, zs):
    """
    (1/m) Σ_z (1/3N) ‖H̃z − H_ref z‖².

    Args:
        hvp_model: Traceable function z -> H̃z
        H_ref: Reference Hessian (3N×3N)
        zs: Projection vectors (m, 3N)
    """
    zs = jnp.atleast_2d(jnp.asarray(zs))
    H_ref = jnp.atleast_2d(jnp.asarray(H_ref))
    n_dof = zs.shape[1]
    if H_ref.shape != (n_dof, n_dof):
        raise DimensionError(f"reference Hessian {H_ref.shape} does not match vectors of length {n_dof}")
    diff = jax.vmap(hvp_model)(zs) - zs @ H_ref.T
    return jnp.mean(jnp.sum(diff * diff, axis=1)) / n_dof


def expected_projected_loss(delta_h: np.ndarray, mode: ProjectionMode) -> float:
    """Expectation of the projected loss over the projection distribution (m-independent)."""
    delta_h = np.asarray(delta_h, dtype=float)
    n_dof = delta_h.shape[0]
    frob = float(np.sum(delta_h * delta_h))
    if ProjectionMode(mode) == ProjectionMode.RADEMACHER:
        return frob / n_dof
    return frob / (n_dof * n_dof)
