import numpy as np
import pytest

from hessian_loss import ProjectionConfig
from oracles import generate_dataset, reference_structure
from potential import (
    CheckpointError, DescriptorConfig, LossWeights, MissingLabelError, ModelSurface, NeuralPotential,
    descriptor, energy, fit_energy_shift, flatten_params, forces, full_hessian, hvp, load_checkpoint,
    loss_and_gradient, save_checkpoint, smooth_cutoff,
)
from structures import Dataset, DimensionError, LabeledSample, LabelSet, Structure


@pytest.fixture
def model():
    return NeuralPotential(DescriptorConfig(cutoff=4.0, n_basis=6), ("S", "H"), (8,))


@pytest.fixture
def params(model):
    return model.init_params(0)


@pytest.fixture
def chain(hosted, rng):
    s = reference_structure(hosted, 0.3)
    return s.with_positions(s.positions + 0.05 * rng.normal(size=s.positions.shape))


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q


def _rotate(s, rng, q=None):
    q = _rotation(rng) if q is None else q
    return s.with_positions(s.positions @ q.T + rng.normal(size=3))


class TestDescriptor:
    def test_smooth_cutoff_limits(self):
        assert float(smooth_cutoff(1.0, 2.0, 4.0)) == pytest.approx(1.0)
        assert float(smooth_cutoff(4.5, 2.0, 4.0)) == pytest.approx(0.0)
        mid = float(smooth_cutoff(3.0, 2.0, 4.0))
        assert 0.0 < mid < 1.0

    def test_invariant_under_rigid_motion(self, chain, rng):
        cfg = DescriptorConfig()
        a = descriptor(chain, cfg, ("S", "H"))
        b = descriptor(_rotate(chain, rng), cfg, ("S", "H"))
        assert a.shape == (3, 16)
        assert np.allclose(a, b, atol=1e-10)

    def test_isolated_atom_has_zero_features(self):
        far = Structure(("H", "H"), [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        assert np.allclose(descriptor(far, DescriptorConfig(cutoff=4.0)), 0.0)

    def test_invalid_settings(self):
        with pytest.raises(ValueError):
            DescriptorConfig(n_basis=1)
        with pytest.raises(ValueError):
            DescriptorConfig(cutoff=-1.0)


class TestDerivatives:
    def test_forces_match_finite_differences(self, model, params, chain):
        f = forces(model, params, chain)
        x = chain.flat_positions
        h = 1e-5
        numeric = np.zeros_like(x)
        for i in range(x.size):
            dx = np.zeros_like(x)
            dx[i] = h
            numeric[i] = -(energy(model, params, chain.with_positions(x + dx))
                           - energy(model, params, chain.with_positions(x - dx))) / (2 * h)
        assert np.allclose(f.reshape(-1), numeric, atol=1e-7)

    def test_hessian_matches_force_differences(self, model, params, chain):
        H = full_hessian(model, params, chain)
        x = chain.flat_positions
        h = 1e-5
        numeric = np.zeros((x.size, x.size))
        for i in range(x.size):
            dx = np.zeros_like(x)
            dx[i] = h
            numeric[:, i] = -(forces(model, params, chain.with_positions(x + dx)).reshape(-1)
                              - forces(model, params, chain.with_positions(x - dx)).reshape(-1)) / (2 * h)
        assert np.allclose(H, numeric, atol=1e-6)

    def test_hvp_matches_dense_product(self, model, params, chain, rng):
        z = rng.normal(size=9)
        assert np.allclose(hvp(model, params, chain, z), full_hessian(model, params, chain) @ z, atol=1e-10)

    def test_hvp_dimension_check(self, model, params, chain):
        with pytest.raises(DimensionError):
            hvp(model, params, chain, np.ones(6))

    def test_hessian_is_symmetric_and_translation_free(self, model, params, chain):
        H, defect = full_hessian(model, params, chain, return_defect=True)
        assert defect < 1e-8
        assert np.allclose(H, H.T)
        translation = np.tile([1.0, 0.0, 0.0], 3)
        assert np.allclose(H @ translation, 0.0, atol=1e-8)

    def test_unknown_species(self, model, params):
        with pytest.raises(DimensionError):
            energy(model, params, Structure(("O",), [[0.0, 0.0, 0.0]]))


class TestModelSurface:
    def test_batch_matches_single_calls(self, model, params, chain, rng):
        surface = ModelSurface(model, params)
        stack = chain.positions[None] + 0.02 * rng.normal(size=(3, 3, 3))
        energies, f, H = surface.batch_labels(chain, stack)
        for k in range(3):
            s = chain.with_positions(stack[k])
            assert energies[k] == pytest.approx(surface.energy(s))
            assert np.allclose(f[k], surface.forces(s))
            assert np.allclose(H[k], surface.hessian(s), atol=1e-10)

    def test_rigid_invariance(self, model, params, chain, rng):
        surface = ModelSurface(model, params)
        assert surface.rigid_invariant
        assert surface.energy(_rotate(chain, rng)) == pytest.approx(surface.energy(chain), abs=1e-10)

    def test_forces_and_hessian_rotate_with_the_structure(self, model, params, chain, rng):
        q = _rotation(rng)
        rotated = _rotate(chain, rng, q)
        np.testing.assert_allclose(forces(model, params, rotated), forces(model, params, chain) @ q.T, atol=1e-8)
        big = np.kron(np.eye(chain.n_atoms), q)
        expected = big @ full_hessian(model, params, chain) @ big.T
        np.testing.assert_allclose(full_hessian(model, params, rotated), expected, atol=1e-8)


class TestCheckpoint:
    def test_round_trip(self, model, params, chain, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, model, params, {"phase": "pretrain"})
        loaded_model, loaded_params = load_checkpoint(path)
        assert loaded_model == model
        assert energy(loaded_model, loaded_params, chain) == pytest.approx(energy(model, params, chain), abs=1e-12)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


def test_energy_shift_centres_residuals(model, params, hosted, rng):
    ds = generate_dataset(hosted, 10, 0.05, rng)
    shifted = fit_energy_shift(model, params, ds)
    residuals = [s.labels.energy - energy(model, shifted, s.structure) for s in ds]
    assert abs(np.mean(residuals)) < 1e-8


class TestLoss:
    @pytest.fixture
    def batch(self, hosted, rng):
        ds = generate_dataset(hosted, 4, 0.05, rng, hessian_fraction=0.5)
        return list(ds)

    def test_gradient_matches_finite_differences(self, model, params, batch, rng):
        weights = LossWeights(4.0, 100.0, 1.0)
        projection = ProjectionConfig("rademacher", 3)
        value = loss_and_gradient(model, params, batch, weights, projection, seed=5, step=2)
        flat, unravel = flatten_params(params)
        g, _ = flatten_params(value.grads)
        direction = rng.normal(size=flat.shape)
        direction /= np.linalg.norm(direction)
        eps = 1e-5

        def total(vec):
            return loss_and_gradient(model, unravel(vec), batch, weights, projection, seed=5, step=2).total

        numeric = (total(flat + eps * direction) - total(flat - eps * direction)) / (2 * eps)
        assert float(g @ direction) == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_components_and_counts(self, model, params, batch):
        value = loss_and_gradient(model, params, batch, LossWeights(), ProjectionConfig())
        assert value.n_hessian == 2
        assert value.total == pytest.approx(4.0 * value.energy + 100.0 * value.force + 0.1 * value.hessian)
        assert value.hessian > 0

    def test_hessian_weight_zero_skips_hessian_term(self, model, params, batch):
        value = loss_and_gradient(model, params, batch, LossWeights(hessian=0.0), ProjectionConfig())
        assert value.hessian == 0.0

    def test_missing_forces_rejected(self, model, params, batch):
        stripped = LabeledSample(batch[0].structure, LabelSet(batch[0].labels.energy))
        with pytest.raises(MissingLabelError):
            loss_and_gradient(model, params, [stripped], LossWeights(), ProjectionConfig())
        value = loss_and_gradient(model, params, [stripped], LossWeights(force=0.0, hessian=0.0),
                                  ProjectionConfig())
        assert value.total == pytest.approx(4.0 * value.energy)

    def test_empty_batch(self, model, params):
        with pytest.raises(ValueError):
            loss_and_gradient(model, params, [], LossWeights(), ProjectionConfig())
