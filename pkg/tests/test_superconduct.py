import numpy as np
import pandas as pd
import pytest

from structures import MEV_TO_K
from superconduct import (
    NoSuperconductivityError, SpectralFunction, SpectralFunctionError, allen_dynes_tc,
    coupling_summary, isotope_rescale, lambda_of, model_spectral_function, omega2_bar, omega_ln,
    read_spectral_function, rescale_frequencies, strong_coupling_factors, tc_pipeline,
    write_spectral_function,
)


@pytest.fixture
def einstein():
    """Narrow single peak at 50 meV carrying λ = 1."""
    return model_spectral_function([50.0], 1.0, width=1.0)


class TestAllenDynes:
    def test_reference_value(self):
        f1, f2 = strong_coupling_factors(1.0, 1000.0, 1000.0, 0.1)
        assert f1 == pytest.approx(1.050679, abs=1e-6)
        assert f2 == pytest.approx(1.0)
        assert allen_dynes_tc(1.0, 1000.0, 1000.0, 0.1) == pytest.approx(73.17, abs=0.01)

    def test_no_superconductivity(self):
        with pytest.raises(NoSuperconductivityError):
            allen_dynes_tc(0.1, 1000.0, 1000.0, 0.2)

    def test_tc_grows_with_coupling(self):
        tcs = [allen_dynes_tc(lam, 1000.0, 1200.0, 0.1) for lam in (0.5, 1.0, 2.0, 3.0)]
        assert np.all(np.diff(tcs) > 0)


class TestMoments:
    def test_einstein_peak(self, einstein):
        assert lambda_of(einstein) == pytest.approx(1.0, rel=1e-3)
        assert omega_ln(einstein) == pytest.approx(50.0, rel=1e-3)
        assert omega2_bar(einstein) == pytest.approx(50.0, rel=1e-3)

    def test_summary_units(self, einstein):
        summary = coupling_summary(einstein, 0.1)
        assert summary.omega_ln_k == pytest.approx(summary.omega_ln_mev * MEV_TO_K)
        assert summary.tc == pytest.approx(
            allen_dynes_tc(summary.lam, summary.omega_ln_k, summary.omega2_k, 0.1))
        assert set(summary.to_dict()) >= {"lam", "tc", "f1", "f2"}

    def test_rescaling_keeps_lambda_and_scales_tc(self, einstein):
        scaled = rescale_frequencies(einstein, 0.8)
        assert lambda_of(scaled) == pytest.approx(lambda_of(einstein), rel=1e-12)
        assert omega_ln(scaled) == pytest.approx(0.8 * omega_ln(einstein), rel=1e-9)
        assert coupling_summary(scaled).tc == pytest.approx(0.8 * coupling_summary(einstein).tc, rel=1e-9)

    def test_isotope_rescale(self, einstein):
        heavy = isotope_rescale(einstein, 1.0, 4.0)
        np.testing.assert_allclose(heavy.frequencies, 0.5 * einstein.frequencies)

    def test_model_skips_non_positive_modes(self):
        a2f = model_spectral_function([-20.0, 0.0, 40.0], 0.5, width=0.5)
        assert lambda_of(a2f) == pytest.approx(0.5, rel=1e-3)

    def test_model_needs_a_positive_mode(self):
        with pytest.raises(SpectralFunctionError):
            model_spectral_function([-5.0], 1.0)


class TestValidation:
    @pytest.mark.parametrize("w, a", [
        ([0.0, 1.0, 2.0], [0.0, 1.0]),
        ([0.0, 2.0, 1.0], [0.0, 1.0, 1.0]),
        ([0.0, 1.0, 2.0], [0.5, 1.0, 1.0]),
        ([0.0, 1.0, 2.0], [0.0, -1.0, 1.0]),
        ([-1.0, 1.0, 2.0], [0.0, 1.0, 1.0]),
        ([1.0], [1.0]),
    ])
    def test_invalid_spectral_functions(self, w, a):
        with pytest.raises(SpectralFunctionError):
            SpectralFunction(w, a)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_spectral_function(str(tmp_path / "missing.dat"))

    def test_single_column(self, tmp_path):
        path = tmp_path / "a2f.dat"
        path.write_text("1.0\n2.0\n3.0\n")
        with pytest.raises(SpectralFunctionError):
            read_spectral_function(str(path))

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "a2f.dat"
        path.write_text("0 0\n1 abc\n2 0.5\n")
        with pytest.raises(SpectralFunctionError):
            read_spectral_function(str(path))

    def test_write_then_read(self, tmp_path, einstein):
        path = str(tmp_path / "out" / "a2f.dat")
        write_spectral_function(einstein, path)
        loaded = read_spectral_function(path)
        np.testing.assert_array_equal(loaded.frequencies, einstein.frequencies)
        np.testing.assert_array_equal(loaded.values, einstein.values)

    def test_comma_separated_with_comments(self, tmp_path):
        path = tmp_path / "a2f.csv"
        path.write_text("# omega, a2F\n0,0\n10,0.2\n20,0.4\n30,0.1\n")
        a2f = read_spectral_function(str(path))
        np.testing.assert_allclose(a2f.frequencies, [0, 10, 20, 30])


class TestPipeline:
    def test_rows_per_mu_star(self, einstein):
        frame = tc_pipeline(einstein, [0.1, 0.13, 0.16], threads=2)
        assert list(frame["mu_star"]) == [0.1, 0.13, 0.16]
        assert np.all(np.diff(frame["tc"]) < 0)

    def test_no_superconductivity_row(self, einstein):
        frame = tc_pipeline(einstein, [0.1, 1.0])
        assert np.isfinite(frame["tc"].iloc[0])
        assert np.isnan(frame["tc"].iloc[1])
        assert frame["lam"].iloc[1] == pytest.approx(lambda_of(einstein))

    def test_empty_mu_star_list(self, einstein):
        frame = tc_pipeline(einstein, [])
        assert isinstance(frame, pd.DataFrame)
        assert frame.empty
        assert "tc" in frame.columns

    def test_reads_path(self, tmp_path, einstein):
        path = str(tmp_path / "a2f.dat")
        write_spectral_function(einstein, path)
        assert len(tc_pipeline(path, [0.1])) == 1
