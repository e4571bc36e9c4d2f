#!/usr/bin/env python3
"""
superconduct.py - Superconducting Tc from the Eliashberg spectral function

Electron-phonon coupling λ, logarithmic and quadratic mean phonon
frequencies, and the Allen-Dynes corrected McMillan critical temperature.
Frequencies are in meV on input; temperatures in K.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from structures import MEV_TO_K

DEFAULT_MU_STAR = 0.125
CM_TO_MEV = 0.12398419843320026  # 1 cm⁻¹ in meV


class SpectralFunctionError(ValueError):
    """Raised for an invalid or unreadable α²F(ω)."""


class NoSuperconductivityError(ValueError):
    """Raised when λ − μ*(1 + 0.62λ) ≤ 0."""


@dataclass(frozen=True, eq=False)
class SpectralFunction:
    """α²F(ω) sampled on an increasing frequency grid [meV]."""
    frequencies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float).reshape(-1)
        a = np.asarray(self.values, dtype=float).reshape(-1)
        if w.size != a.size:
            raise SpectralFunctionError(f"{w.size} frequencies but {a.size} values")
        if w.size < 2:
            raise SpectralFunctionError("spectral function needs at least 2 grid points")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(a)):
            raise SpectralFunctionError("spectral function contains non-finite values")
        if np.any(np.diff(w) <= 0):
            raise SpectralFunctionError("frequency grid must be strictly increasing")
        if w[0] < 0:
            raise SpectralFunctionError("frequency grid must start at ω >= 0")
        if w[0] == 0 and a[0] != 0:
            raise SpectralFunctionError("α²F(0) must vanish")
        if np.any(a < 0):
            raise SpectralFunctionError("α²F must be nonnegative")
        object.__setattr__(self, "frequencies", w)
        object.__setattr__(self, "values", a)

    def positive(self):
        """Grid points with ω > 0."""
        mask = self.frequencies > 0
        return self.frequencies[mask], self.values[mask]


@dataclass
class CouplingSummary:
    lam: float
    omega_ln_mev: float
    omega_ln_k: float
    omega2_mev: float
    omega2_k: float
    mu_star: float
    f1: float
    f2: float
    tc: float

    def to_dict(self):
        return asdict(self)


def lambda_of(a2f: SpectralFunction) -> float:
    """λ = 2 ∫ α²F(ω)/ω dω (trapezoid on the ω > 0 grid)."""
    w, a = a2f.positive()
    if w.size < 2:
        raise SpectralFunctionError("fewer than 2 grid points with ω > 0")
    return float(2.0 * trapezoid(a / w, w))


def omega_ln(a2f: SpectralFunction, lam: Optional[float] = None) -> float:
    """Logarithmic average frequency [meV]."""
    lam = lambda_of(a2f) if lam is None else lam
    if lam <= 0:
        raise SpectralFunctionError("ω_ln is undefined for λ = 0")
    w, a = a2f.positive()
    return float(np.exp(2.0 / lam * trapezoid(a * np.log(w) / w, w)))


def omega2_bar(a2f: SpectralFunction, lam: Optional[float] = None) -> float:
    """Root-mean-square frequency ω̄₂ [meV]."""
    lam = lambda_of(a2f) if lam is None else lam
    if lam <= 0:
        raise SpectralFunctionError("ω̄₂ is undefined for λ = 0")
    w, a = a2f.positive()
    return float(np.sqrt(2.0 / lam * trapezoid(a * w, w)))


def strong_coupling_factors(lam: float, w_ln: float, w2: float, mu_star: float):
    """Allen-Dynes f₁ (strong coupling) and f₂ (spectral shape)."""
    big_l1 = 2.46 * (1.0 + 3.8 * mu_star)
    big_l2 = 1.82 * (1.0 + 6.3 * mu_star) * (w2 / w_ln)
    f1 = (1.0 + (lam / big_l1) ** 1.5) ** (1.0 / 3.0)
    f2 = 1.0 + (w2 / w_ln - 1.0) * lam ** 2 / (lam ** 2 + big_l2 ** 2)
    return f1, f2


def allen_dynes_tc(lam: float, w_ln: float, w2: float, mu_star: float = DEFAULT_MU_STAR) -> float:
    """
    Allen-Dynes Tc.

    Args:
        lam: Electron-phonon coupling λ
        w_ln: ω_ln (Tc comes out in the same unit, use K)
        w2: ω̄₂ in the unit of w_ln
        mu_star: Coulomb pseudopotential μ*

    Raises:
        NoSuperconductivityError: λ − μ*(1 + 0.62λ) ≤ 0
    """
    denom = lam - mu_star * (1.0 + 0.62 * lam)
    if denom <= 0:
        raise NoSuperconductivityError(f"no superconductivity at μ* = {mu_star} (λ = {lam:.4g})")
    f1, f2 = strong_coupling_factors(lam, w_ln, w2, mu_star)
    return float(f1 * f2 * w_ln / 1.2 * np.exp(-1.04 * (1.0 + lam) / denom))


def coupling_summary(a2f: SpectralFunction, mu_star: float = DEFAULT_MU_STAR) -> CouplingSummary:
    lam = lambda_of(a2f)
    w_ln = omega_ln(a2f, lam)
    w2 = omega2_bar(a2f, lam)
    f1, f2 = strong_coupling_factors(lam, w_ln, w2, mu_star)
    tc = allen_dynes_tc(lam, w_ln * MEV_TO_K, w2 * MEV_TO_K, mu_star)
    return CouplingSummary(lam, w_ln, w_ln * MEV_TO_K, w2, w2 * MEV_TO_K, mu_star, f1, f2, tc)


def read_spectral_function(path: str) -> SpectralFunction:
    """Two-column text (whitespace or comma separated, '#' comments): ω [meV], α²F."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Spectral function file not found: {path}")
    try:
        df = pd.read_csv(path, sep=r"[\s,]+", comment="#", header=None, engine="python")
    except pd.errors.EmptyDataError:
        raise SpectralFunctionError(f"{path}: no data")
    df = df.dropna(axis=1, how="all")
    if df.shape[1] < 2:
        raise SpectralFunctionError(f"{path}: expected 2 columns, found {df.shape[1]}")
    try:
        values = df.iloc[:, :2].astype(float).to_numpy()
    except ValueError as e:
        raise SpectralFunctionError(f"{path}: non-numeric entry ({e})")
    return SpectralFunction(values[:, 0], values[:, 1])


def write_spectral_function(a2f: SpectralFunction, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write("# omega_meV a2F\n")
        for w, a in zip(a2f.frequencies, a2f.values):
            f.write(f"{w:.17g} {a:.17g}\n")


def rescale_frequencies(a2f: SpectralFunction, factor: float) -> SpectralFunction:
    """ω → cω with α²F values kept; λ is invariant and ω_ln, ω̄₂, Tc scale by c."""
    if factor <= 0:
        raise SpectralFunctionError("frequency scale factor must be positive")
    return SpectralFunction(a2f.frequencies * factor, a2f.values)


def isotope_rescale(a2f: SpectralFunction, mass_light: float, mass_heavy: float) -> SpectralFunction:
    """Harmonic isotope shift ω → ω·√(m_light/m_heavy)."""
    return rescale_frequencies(a2f, float(np.sqrt(mass_light / mass_heavy)))


def model_spectral_function(frequencies_mev: Sequence[float], lambda_total: float, width: float = 1.0,
                            grid: Optional[np.ndarray] = None) -> SpectralFunction:
    """
    Gaussian-broadened α²F from a phonon frequency table.

    Each positive mode carries an equal share of lambda_total; a peak at ω_i
    carrying λ_i has weight λ_i·ω_i/2. Non-positive frequencies are skipped.
    """
    freqs = np.asarray(frequencies_mev, dtype=float)
    positive = freqs[freqs > 0]
    if positive.size < freqs.size:
        logging.warning(f"Skipping {freqs.size - positive.size} non-positive frequencies in α²F model")
    if positive.size == 0:
        raise SpectralFunctionError("no positive frequencies to build α²F from")
    if grid is None:
        grid = np.linspace(0.0, positive.max() + 6.0 * width, 4001)
    grid = np.asarray(grid, dtype=float)

    lam_i = lambda_total / positive.size
    values = np.zeros_like(grid)
    for w in positive:
        peak = np.exp(-0.5 * ((grid - w) / width) ** 2) / (width * np.sqrt(2.0 * np.pi))
        values += 0.5 * lam_i * w * peak
    if grid[0] == 0:
        values[0] = 0.0
    return SpectralFunction(grid, values)


def tc_pipeline(a2f: Union[str, SpectralFunction], mu_stars: Iterable[float] = (DEFAULT_MU_STAR,),
                threads: int = 1) -> pd.DataFrame:
    """
    One coupling summary per μ*.

    μ* values without superconductivity give a row with Tc = NaN.
    """
    if isinstance(a2f, str):
        a2f = read_spectral_function(a2f)
    mu_stars = list(mu_stars)
    columns = list(CouplingSummary.__dataclass_fields__)
    if not mu_stars:
        return pd.DataFrame(columns=columns)

    def work(mu):
        try:
            return coupling_summary(a2f, mu).to_dict()
        except NoSuperconductivityError as e:
            logging.warning(str(e))
            lam = lambda_of(a2f)
            return {"lam": lam, "mu_star": mu, "tc": float("nan")}

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows: List[dict] = list(pool.map(work, mu_stars))
    return pd.DataFrame(rows, columns=columns)
