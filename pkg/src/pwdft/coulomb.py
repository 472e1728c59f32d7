"""Periodic Coulomb interaction, diagonal in Fourier space."""
from __future__ import annotations

import math

import numpy as np

from .spectral import FourierField, common_modes

# a ChargeDensity is a real-valued FourierField; total charge is |cell|^{1/2} c_0
ChargeDensity = FourierField


def total_charge(rho: FourierField) -> float:
    return float(math.sqrt(rho.cell.volume) * rho.coeffs[rho.modes.zero].real)


def coulomb_kernel(k2: np.ndarray) -> np.ndarray:
    """``4 pi / |k|^2`` with the k = 0 entry set to zero (never divided)."""
    out = np.zeros_like(k2)
    nz = k2 > 0
    out[nz] = 4.0 * math.pi / k2[nz]
    return out


def d_gamma(rho: FourierField, rho2: FourierField) -> float:
    """``D(rho, rho') = 4 pi sum_{k != 0} |k|^{-2} conj(rho_k) rho'_k``."""
    m = common_modes(rho.modes, rho2.modes)
    a, b = rho.to(m).coeffs, rho2.to(m).coeffs
    return float(np.sum(coulomb_kernel(m.k2) * np.conj(a) * b).real)


def coulomb_potential(rho: FourierField) -> FourierField:
    """Zero-mean periodic solution of ``-Laplace V = 4 pi (rho - mean rho)``."""
    return FourierField(rho.modes, coulomb_kernel(rho.modes.k2) * rho.coeffs, copy=False)


def hartree_energy(rho_coeffs: np.ndarray, k2: np.ndarray) -> float:
    """``D(rho, rho) / 2`` from raw coefficients."""
    return float(0.5 * np.sum(coulomb_kernel(k2) * np.abs(rho_coeffs) ** 2))
