import numpy as np
import pytest

from oracles import generate_dataset, reference_structure
from potential import DescriptorConfig, descriptor
from sampling import (
    EmbeddingSet, RankMode, SamplingError, embed_dataset, energy_rank_subset, gaussian_displace,
    gaussian_displacement_set, restrict_hessian_labels, sscha_finetune_dataset, structure_embedding,
    wld_sample, wld_weights,
)
from structures import Dataset, LabeledSample, LabelSet, Structure


def _line(points):
    return EmbeddingSet(np.asarray(points, dtype=float).reshape(-1, 1), k=1)


class TestWldWeights:
    def test_isolated_point_dominates(self):
        w = wld_weights(_line([0.0, 1.0, 2.0, 10.0]))
        assert np.allclose(w, np.array([1.0, 1.0, 1.0, 64.0]) / 67.0)
        assert w.sum() == pytest.approx(1.0)

    def test_exponent_one_uses_plain_distance(self):
        w = wld_weights(_line([0.0, 1.0, 2.0, 10.0]), exponent=1.0)
        assert np.allclose(w, np.array([1.0, 1.0, 1.0, 8.0]) / 11.0)

    def test_duplicates_fall_back_to_uniform(self):
        w = wld_weights(_line([3.0, 3.0, 3.0]))
        assert np.allclose(w, 1.0 / 3.0)

    def test_k_range(self):
        with pytest.raises(SamplingError):
            EmbeddingSet(np.zeros((3, 2)), k=3)
        with pytest.raises(SamplingError):
            EmbeddingSet(np.zeros((3, 2)), k=0)


class TestWldSample:
    def test_distinct_indices(self, rng):
        emb = EmbeddingSet(rng.normal(size=(30, 4)), k=5)
        picks = wld_sample(emb, 12, rng)
        assert len(picks) == 12
        assert len(set(picks.tolist())) == 12

    def test_select_all(self, rng):
        emb = EmbeddingSet(rng.normal(size=(6, 2)), k=2)
        assert sorted(wld_sample(emb, 6, rng).tolist()) == list(range(6))

    def test_too_many(self, rng):
        with pytest.raises(SamplingError):
            wld_sample(EmbeddingSet(np.eye(4), k=1), 5, rng)

    def test_first_pick_frequency(self):
        emb = _line([0.0, 1.0, 2.0, 10.0])
        rng = np.random.default_rng(0)
        hits = sum(int(wld_sample(emb, 1, rng)[0] == 3) for _ in range(2000))
        assert hits / 2000 == pytest.approx(64.0 / 67.0, abs=0.02)


def test_embed_dataset_with_descriptor(hosted, rng):
    ds = generate_dataset(hosted, 8, 0.1, rng)
    cfg = DescriptorConfig(cutoff=4.0, n_basis=4)
    emb = embed_dataset(ds, lambda s: descriptor(s, cfg, ("S", "H")), k=3)
    assert emb.vectors.shape == (8, 8)
    assert np.allclose(emb.vectors[0], structure_embedding(descriptor(ds[0].structure, cfg, ("S", "H"))))


class TestEnergyRank:
    @pytest.fixture
    def ranked(self, water):
        other = Structure(("H", "H"), [[0.0, 0.0, 0.0], [0.74, 0.0, 0.0]])
        samples = [LabeledSample(water, LabelSet(float(e))) for e in [5, 0, 9, 2, 7, 1, 8, 3, 6, 4]]
        samples += [LabeledSample(other, LabelSet(float(e))) for e in [-10.0, -20.0]]
        return Dataset(samples)

    def test_top_high_per_group(self, ranked):
        top = energy_rank_subset(ranked, 0.3, RankMode.TOP_HIGH)
        energies = sorted(ranked[i].labels.energy for i in top)
        assert energies == [-10.0, 7.0, 8.0, 9.0]

    def test_complement_partitions_each_group(self, ranked):
        top = set(energy_rank_subset(ranked, 0.3, "top_high").tolist())
        bottom = set(energy_rank_subset(ranked, 0.7, "bottom_low").tolist())
        assert not top & bottom
        assert top | bottom == set(range(len(ranked)))

    def test_invalid_fraction(self, ranked):
        with pytest.raises(SamplingError):
            energy_rank_subset(ranked, 0.0, RankMode.TOP_HIGH)

    def test_missing_energy(self, water):
        ds = Dataset([LabeledSample(water, LabelSet(None, np.zeros((3, 3))))])
        with pytest.raises(SamplingError):
            energy_rank_subset(ds, 0.5, RankMode.BOTTOM_LOW)

    def test_top_high_energies_exceed_mean(self, muller_brown, rng):
        ds = generate_dataset(muller_brown, 200, 0.3, rng, hessian_fraction=0.0)
        top = energy_rank_subset(ds, 0.05, RankMode.TOP_HIGH)
        energies = np.array([s.labels.energy for s in ds])
        assert energies[top].mean() > energies.mean() + energies.std()


class TestDisplacements:
    def test_gaussian_statistics(self, single_atom, rng):
        moved = gaussian_displacement_set(single_atom, 4000, 0.4, rng)
        coords = np.array([s.positions[0] for s in moved])
        assert coords.std() == pytest.approx(0.4, rel=0.05)
        assert abs(coords.mean()) < 0.03

    def test_sigma_must_be_positive(self, single_atom):
        with pytest.raises(SamplingError):
            gaussian_displace(single_atom, 0.0)

    def test_restrict_hessian_labels(self, hosted, rng):
        ds = generate_dataset(hosted, 20, 0.05, rng)
        kept = restrict_hessian_labels(ds, 0.1, rng)
        assert kept.n_hessian == 2
        assert len(kept) == 20
        assert kept.provenance["hessian_fraction"] == 0.1
        assert restrict_hessian_labels(ds, 0.001, rng).n_hessian == 1

    def test_sscha_finetune_dataset(self, hosted, rng):
        centroid = reference_structure(hosted, 0.0)
        ds = sscha_finetune_dataset(hosted.surface, centroid, n_displaced=5, sigma=0.1, rng=rng)
        assert len(ds) == 6
        assert ds.n_hessian == 1
        assert ds[0].has_hessian and ds[0].tag == "centroid"
        assert all(s.labels.forces is not None for s in ds)
