#!/usr/bin/env python3
"""
sampling.py - Configuration selection strategies

Weighted-local-density (WLD) sampling in descriptor space, energy-ranked
subsets within composition groups, and Gaussian-displacement generation.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import pairwise_distances

from structures import Dataset, Fidelity, LabeledSample, LabelSet, Structure, Surface


class SamplingError(ValueError):
    """Raised for invalid selection requests."""


class RankMode(str, enum.Enum):
    TOP_HIGH = "top_high"
    BOTTOM_LOW = "bottom_low"


@dataclass
class EmbeddingSet:
    """Structure-level embedding vectors and the neighbor count k."""
    vectors: np.ndarray
    k: int = 10

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        n = self.vectors.shape[0]
        if not 1 <= self.k < n:
            raise SamplingError(f"k must satisfy 1 <= k < {n}, got {self.k}")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def structure_embedding(per_atom_features: np.ndarray) -> np.ndarray:
    """Mean-pooled per-atom descriptors."""
    return np.asarray(per_atom_features, dtype=float).mean(axis=0)


def embed_dataset(dataset: Dataset, featurize: Callable[[Structure], np.ndarray], k: int = 10) -> EmbeddingSet:
    """Embed every structure of a dataset with a per-atom featurizer."""
    vectors = np.stack([structure_embedding(featurize(s.structure)) for s in dataset])
    return EmbeddingSet(vectors, k)


def wld_weights(emb: EmbeddingSet, exponent: float = 2.0) -> np.ndarray:
    """
    Selection probabilities proportional to the mean k-NN distance^exponent.

    Neighbors are ranked by distance with ties broken by index; the point
    itself is excluded. All-zero weights fall back to uniform.

    Args:
        emb: Embeddings and k
        exponent: 2 gives the mean squared distance

    Returns:
        Probability vector summing to 1
    """
    n = len(emb)
    sq = pairwise_distances(emb.vectors, metric="sqeuclidean")
    np.fill_diagonal(sq, np.inf)
    neighbors = np.argsort(sq, axis=1, kind="stable")[:, :emb.k]
    nearest = np.take_along_axis(sq, neighbors, axis=1)
    raw = np.mean(np.maximum(nearest, 0.0) ** (exponent / 2.0), axis=1)

    total = raw.sum()
    if total <= 0 or not np.isfinite(total):
        logging.warning("All WLD weights are zero (duplicate embeddings); using uniform weights")
        return np.full(n, 1.0 / n)
    return raw / total


def wld_sample(emb: EmbeddingSet, n_select: int, rng: np.random.Generator,
               exponent: float = 2.0) -> np.ndarray:
    """Sequential draws without replacement, renormalizing the WLD weights after each pick."""
    n = len(emb)
    if not 0 <= n_select <= n:
        raise SamplingError(f"cannot select {n_select} of {n} configurations")
    weights = wld_weights(emb, exponent).copy()
    available = np.ones(n, dtype=bool)
    chosen: List[int] = []
    for _ in range(n_select):
        w = np.where(available, weights, 0.0)
        total = w.sum()
        if total <= 0:
            # only zero-weight points remain
            w = available.astype(float)
            total = w.sum()
        pick = int(rng.choice(n, p=w / total))
        chosen.append(pick)
        available[pick] = False
    return np.asarray(chosen, dtype=int)


def _rank_counts(fraction: float, n: int):
    top = int(np.floor(fraction * n + 0.5))
    bottom = int(np.ceil(fraction * n - 0.5))
    return top, bottom


def energy_rank_subset(ds: Dataset, fraction: float, mode: RankMode,
                       grouping: Optional[Callable[[LabeledSample], str]] = None) -> np.ndarray:
    """
    Highest or lowest relative-energy fraction within each composition group.

    Energies are ranked by (relative energy, index), so the TopHigh f and
    BottomLow 1-f selections of a group partition it.

    Args:
        ds: Dataset with energy labels
        fraction: Share of each group to keep, in (0, 1]
        mode: TopHigh or BottomLow
        grouping: Sample -> group key (composition string by default)

    Returns:
        Sorted array of selected indices
    """
    mode = RankMode(mode)
    if not 0 < fraction <= 1:
        raise SamplingError(f"fraction must lie in (0, 1], got {fraction}")
    if grouping is None:
        grouping = lambda s: "".join(sorted(s.structure.species))

    groups: Dict[str, List[int]] = {}
    for i, sample in enumerate(ds):
        if sample.labels.energy is None:
            raise SamplingError(f"sample {i} has no energy label")
        groups.setdefault(grouping(sample), []).append(i)

    selected = []
    for members in groups.values():
        idx = np.asarray(members)
        energies = np.array([ds[i].labels.energy for i in members])
        relative = energies - energies.min()
        order = idx[np.lexsort((idx, relative))]
        top, bottom = _rank_counts(fraction, len(members))
        if mode == RankMode.TOP_HIGH:
            selected.extend(order[len(order) - top:].tolist())
        else:
            selected.extend(order[:bottom].tolist())
    return np.sort(np.asarray(selected, dtype=int))


def gaussian_displace(s: Structure, sigma: float = 0.4, rng: Optional[np.random.Generator] = None) -> Structure:
    """Displace every Cartesian component by an i.i.d. N(0, sigma²) draw; cell unchanged."""
    if sigma <= 0:
        raise SamplingError("sigma must be positive")
    rng = rng or np.random.default_rng()
    return s.with_positions(s.positions + rng.normal(0.0, sigma, size=s.positions.shape))


def gaussian_displacement_set(s: Structure, n: int = 30, sigma: float = 0.4,
                              rng: Optional[np.random.Generator] = None) -> List[Structure]:
    rng = rng or np.random.default_rng()
    return [gaussian_displace(s, sigma, rng) for _ in range(n)]


def restrict_hessian_labels(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Keep Hessian labels on a random fraction of the labeled samples (at least one if fraction > 0)."""
    return ds.with_hessian_fraction(fraction, rng)


def sscha_finetune_dataset(surface: Surface, centroid: Structure, n_displaced: int = 30,
                           sigma: float = 0.4, rng: Optional[np.random.Generator] = None,
                           fidelity: Fidelity = Fidelity.HIGH) -> Dataset:
    """
    One E/F/H sample at the centroid plus Gaussian-displaced E/F samples.

    The displaced samples need no Hessian evaluations.
    """
    rng = rng or np.random.default_rng()
    samples = [LabeledSample(centroid, surface.labels(centroid), fidelity, "centroid")]
    for k, displaced in enumerate(gaussian_displacement_set(centroid, n_displaced, sigma, rng)):
        labels = LabelSet(surface.energy(displaced), surface.forces(displaced))
        samples.append(LabeledSample(displaced, labels, fidelity, f"displaced-{k}"))
    return Dataset(tuple(samples), {"source": "gaussian_displacement", "sigma": sigma})
