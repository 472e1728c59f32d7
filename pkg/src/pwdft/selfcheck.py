"""Quick invariant suite run by ``pwdft selfcheck``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from . import spectral as sp
from .coulomb import coulomb_potential, d_gamma


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float


def random_real_field(modes: sp.ModeSet, rng: np.random.Generator) -> sp.FourierField:
    c = rng.standard_normal(len(modes)) + 1j * rng.standard_normal(len(modes))
    return sp.FourierField(modes, c).symmetrized()


def sample_direct(f: sp.FourierField, n_g: int) -> np.ndarray:
    """Grid values by explicit trigonometric sums (no aliasing shortcut)."""
    a = sp.box_array(f.modes, f.coeffs)
    return np.concatenate([v for _, v in sp.stream_values(a, n_g, f.cell)], axis=0)


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def grid_identities(trials: int = 100, n_c: int = 4, n_g: int = 17, seed: int = 0) -> dict[str, float]:
    """Worst relative deviations of the three grid identities over ``trials`` draws.

    * grid quadrature integrates V_{4 n_c} fields exactly;
    * ``int I(V v w) = int I(V) v w`` for v, w in V_{n_c};
    * the DFT of samples equals the folded (aliased) coefficient sum.
    """
    cell = sp.Cell(10.0)
    rng = np.random.default_rng(seed)
    m4 = sp.ball(cell, 4 * n_c)
    mc = sp.ball(cell, n_c)
    mv = sp.ball(cell, n_g + 3)  # wide enough to alias
    fine = sp.fast_odd_size(4 * ((n_g - 1) // 2) + 1)
    worst = {"exact_integration": 0.0, "interpolated_product": 0.0, "aliasing": 0.0}
    for _ in range(trials):
        f = random_real_field(m4, rng)
        q = sp.integrate_grid(sp.GridField(cell, sample_direct(f, n_g)))
        exact = math.sqrt(cell.volume) * f.coeffs[m4.zero].real
        worst["exact_integration"] = max(worst["exact_integration"],
                                         abs(q - exact) / max(abs(exact), np.abs(f.coeffs).max()))

        V = random_real_field(mv, rng)
        v, w = random_real_field(mc, rng), random_real_field(mc, rng)
        Vs, vs, ws = sample_direct(V, n_g), sample_direct(v, n_g), sample_direct(w, n_g)
        lhs = sp.integrate_grid(sp.GridField(cell, Vs * vs * ws))
        IV = sp.interpolate(sp.GridField(cell, Vs))
        prod = (sp.to_grid(IV, fine).values * sp.to_grid(v, fine).values * sp.to_grid(w, fine).values)
        rhs = sp.integrate_grid(sp.GridField(cell, prod))
        scale = sp.integrate_grid(sp.GridField(cell, np.abs(Vs * vs * ws)))
        worst["interpolated_product"] = max(worst["interpolated_product"], abs(lhs - rhs) / scale)

        d = sp.dft(sp.GridField(cell, Vs))
        folded = np.zeros((n_g,) * 3, dtype=complex)
        idx = V.modes.n % n_g
        np.add.at(folded, (idx[:, 0], idx[:, 1], idx[:, 2]), V.coeffs / math.sqrt(cell.volume))
        worst["aliasing"] = max(worst["aliasing"], _rel(d, folded))
    return worst


def parseval(trials: int = 20, n_c: int = 6, seed: int = 1) -> float:
    cell = sp.Cell(7.0)
    rng = np.random.default_rng(seed)
    m = sp.ball(cell, n_c)
    worst = 0.0
    for _ in range(trials):
        f = random_real_field(m, rng)
        g = sp.to_grid(f, 2 * n_c + 1)
        worst = max(worst, abs(sp.integrate_grid(sp.GridField(cell, g.values**2)) - f.norm() ** 2)
                    / f.norm() ** 2)
    return worst


def poisson(trials: int = 20, seed: int = 2) -> float:
    cell = sp.Cell(10.0)
    rng = np.random.default_rng(seed)
    m = sp.ball(cell, 6)
    worst = 0.0
    for _ in range(trials):
        rho = random_real_field(m, rng)
        V = coulomb_potential(rho)
        lap = V.modes.k2 * V.to(m).coeffs
        target = 4 * math.pi * rho.coeffs
        target[m.zero] = 0.0
        worst = max(worst, _rel(lap, target))
        worst = max(worst, abs(d_gamma(rho, rho) - V.inner(rho)) / abs(d_gamma(rho, rho)))
    return worst


def free_spectrum(n_c: int = 8, L: float = 10.0, n: int = 8) -> float:
    from .ks import KSModel, lowest_eigenpairs

    cell = sp.Cell(L)
    vals, _ = lowest_eigenpairs(KSModel(cell, 1), None, n, n_c, tol=1e-12)
    exact = np.sort(0.5 * sp.ball(cell, n_c).k2)[:n]
    return float(np.max(np.abs(np.sort(vals) - exact)))


def bundled_examples() -> list[tuple[str, str]]:
    root = resources.files("pwdft") / "examples"
    return sorted((p.name, p.read_text(encoding="utf-8")) for p in root.iterdir()
                  if p.name.endswith(".cfg"))


def run_checks(example_runner: Callable[[str, str], float] | None = None) -> list[Check]:
    out: list[Check] = []
    for name, val in grid_identities().items():
        out.append(Check(f"grid identity: {name}", bool(val <= 1e-12), float(val), 1e-12))
    val = parseval()
    out.append(Check("Parseval on the grid", val <= 1e-12, val, 1e-12))
    val = poisson()
    out.append(Check("Poisson and Coulomb form", val <= 1e-12, val, 1e-12))
    val = free_spectrum()
    out.append(Check("free-particle spectrum", val <= 1e-10, val, 1e-10))
    if example_runner is not None:
        for name, text in bundled_examples():
            try:
                val = example_runner(name, text)
                out.append(Check(f"example {name}", True, val, math.inf))
            except Exception as e:  # noqa: BLE001 - reported as a failed check
                out.append(Check(f"example {name}: {type(e).__name__}: {e}", False, math.nan, math.inf))
    return out
