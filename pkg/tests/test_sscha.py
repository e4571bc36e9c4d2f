import numpy as np
import pytest

from oracles import make_potential, optimal_gaussian_energy, reference_structure
from sscha import (
    SschaConfig, SschaError, StaleEnsembleError, TrialHarmonic, anharmonic_frequencies,
    enforce_positive_definite, evaluate_ensemble, free_energy, generate_ensemble, gradients,
    harmonic_start, kong_liu_ratio, reweight, sscha_minimize,
)
from structures import AMU, HBAR, KB
from thermo import harmonic_frequencies, vibrational_free_energy


@pytest.fixture
def bowl_trial(bowl, single_atom):
    return TrialHarmonic(single_atom, bowl.hessian(single_atom))


class TestTrial:
    def test_shape_mismatch(self, single_atom):
        with pytest.raises(SschaError):
            TrialHarmonic(single_atom, np.eye(6))

    def test_enforce_positive_definite_flips_negative_modes(self):
        phi = enforce_positive_definite(np.diag([-1.0, 2.0, 3.0]), [1.0])
        np.testing.assert_allclose(phi, np.diag([1.0, 2.0, 3.0]), atol=1e-12)

    def test_harmonic_free_energy_matches_thermo(self, bowl_trial, bowl, single_atom):
        vib = harmonic_frequencies(bowl.hessian(single_atom), single_atom.masses)
        assert bowl_trial.harmonic_free_energy() == pytest.approx(vibrational_free_energy(vib.energies, 0.0))

    def test_classical_limit_of_variance(self, single_atom):
        th = TrialHarmonic(single_atom, np.diag([1.0, 2.0, 3.0]), temperature=10000.0)
        kT = KB * 10000.0
        np.testing.assert_allclose(th.variances(), kT / np.array([1.0, 2.0, 3.0]), rtol=3e-3)

    def test_zero_temperature_variance(self, bowl_trial):
        omega = np.sqrt(np.array([1.0, 2.0, 3.0]) / AMU)
        np.testing.assert_allclose(bowl_trial.variances(), HBAR / (2 * omega) / AMU)

    def test_harmonic_start_flips_saddle(self, saddle_surface, single_atom):
        th = harmonic_start(saddle_surface, single_atom)
        assert np.all(np.linalg.eigvalsh(th.phi) > 0)
        assert th.basis is None


class TestEnsemble:
    def test_sample_variance(self, bowl_trial, rng):
        ens = generate_ensemble(bowl_trial, 20000, rng)
        np.testing.assert_allclose(np.var(ens.displacements, axis=0), bowl_trial.variances(), rtol=0.05)
        assert not ens.evaluated

    def test_evaluate_counts_calls(self, bowl_trial, bowl, rng):
        ens = generate_ensemble(bowl_trial, 50, rng)
        assert evaluate_ensemble(ens, bowl, chunk_size=16) == 50
        assert bowl.calls == 50
        assert ens.hessians.shape == (50, 3, 3)

    def test_kong_liu_ratio(self):
        assert kong_liu_ratio(np.ones(4)) == pytest.approx(1.0)
        assert kong_liu_ratio(np.array([1.0, 0.0, 0.0, 0.0])) == pytest.approx(0.25)
        assert kong_liu_ratio(np.zeros(3)) == 0.0

    def test_reweight_to_generator_is_uniform(self, bowl_trial, rng):
        ens = generate_ensemble(bowl_trial, 100, rng)
        weights, ratio = reweight(ens, bowl_trial)
        np.testing.assert_allclose(weights, 1.0)
        assert ratio == pytest.approx(1.0)

    def test_distant_trial_is_stale(self, bowl_trial, bowl, rng):
        ens = generate_ensemble(bowl_trial, 500, rng)
        evaluate_ensemble(ens, bowl)
        narrow = TrialHarmonic(bowl_trial.centroid, 100.0 * bowl_trial.phi)
        with pytest.raises(StaleEnsembleError):
            free_energy(ens, narrow)

    def test_unevaluated_ensemble_needs_evaluator(self, bowl_trial, rng):
        ens = generate_ensemble(bowl_trial, 10, rng)
        with pytest.raises(SschaError):
            gradients(ens, bowl_trial)

    def test_harmonic_gradients_vanish(self, bowl_trial, bowl, rng):
        ens = generate_ensemble(bowl_trial, 200, rng)
        grads = gradients(ens, bowl_trial, bowl)
        np.testing.assert_allclose(grads.phi, 0.0, atol=1e-12)
        assert grads.phi_error == pytest.approx(0.0, abs=1e-12)


class TestMinimize:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SschaConfig(kong_liu_threshold=0.0)
        with pytest.raises(ValueError):
            SschaConfig(ensemble_size=1)

    def test_zero_populations(self, bowl, single_atom):
        result = sscha_minimize(bowl, np.eye(3), single_atom, SschaConfig(max_populations=0), progress=False)
        assert not result.converged
        assert result.n_evaluations == 0
        assert result.history.empty

    def test_harmonic_surface_recovers_force_constants(self, bowl, single_atom):
        cfg = SschaConfig(ensemble_size=200, alpha_phi=0.5, gradient_tol=1e-6, relax_centroid=False)
        result = sscha_minimize(bowl, 0.5 * bowl.K, single_atom, cfg, progress=False)
        assert result.converged
        np.testing.assert_allclose(result.trial.phi, bowl.K, atol=1e-5)
        exact = TrialHarmonic(single_atom, bowl.K).harmonic_free_energy()
        assert result.free_energy == pytest.approx(exact, rel=1e-5)
        assert list(result.history.columns)[:3] == ["population", "step", "free_energy"]

    def test_quartic_well_matches_optimal_gaussian(self):
        mass = 0.05
        pot = make_potential("double_well_chain", {"embedding": "onsite", "n_sites": 1, "mass": mass})
        start = reference_structure(pot)
        trial = harmonic_start(pot.surface, start)
        cfg = SschaConfig(ensemble_size=2000, alpha_phi=0.3, gradient_tol=0.2, relax_centroid=False)
        result = sscha_minimize(pot.surface, trial.phi, start, cfg, progress=False)
        assert result.converged

        # y and z are harmonic tethers
        tether_zpe = HBAR * np.sqrt(pot.params["tether"] / (mass * AMU))
        expected, _, _ = optimal_gaussian_energy(1.0, 1.0, mass)
        assert result.free_energy - tether_zpe == pytest.approx(expected, abs=0.03)

        vib = anharmonic_frequencies(result.trial)
        assert vib.n_imaginary == 0
        assert result.trial.phi[0, 0] == pytest.approx(0.48, abs=0.3)
