"""Local potentials, nonlocal projectors, core densities and xc functionals.

Every local potential answers three questions:

* ``coefficients(modes)``: its exact Fourier coefficients on a mode set;
* ``sample(n)``: its exact values on the ``n``-point grid;
* ``lowmodes(modes, n_g)``: the coefficients of its ``n_g``-grid
  trigonometric interpolant restricted to ``modes`` (aliasing included).

The last one is all the pseudospectral solvers need from ``V``, because for
``v, w`` in V_{N_c} only the modes ``|k| <= 4 pi N_c / L`` of the
interpolant enter ``sum_x V(x) v(x) w(x)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import spherical_jn

from . import spectral as sp
from .spectral import Cell, FourierField, GridField, ModeSet

# grids larger than this many points are processed slab by slab
STREAM_THRESHOLD = 1 << 25


class LocalPotential:
    """A real periodic potential with ``|V_k| <= C |k|^{-m}`` for ``k != 0``."""

    cell: Cell
    m: float
    C: float

    def coefficients(self, modes: ModeSet) -> np.ndarray:
        raise NotImplementedError

    def sample_slab(self, n: int, i0: int, i1: int) -> np.ndarray:
        """Values on grid planes ``i0 <= i < i1`` of the ``n``-point grid."""
        raise NotImplementedError

    def sample(self, n: int) -> GridField:
        return GridField(self.cell, self.sample_slab(n, 0, n), copy=False)

    def field(self, modes: ModeSet) -> FourierField:
        return FourierField(modes, self.coefficients(modes), copy=False)

    def lowmodes(self, modes: ModeSet, n_g: int | None = None) -> np.ndarray:
        """Coefficients of ``V`` (``n_g is None``) or of its interpolant on ``modes``."""
        if n_g is None:
            return self.coefficients(modes)
        if 2 * modes.half + 1 > n_g:
            raise ValueError(f"{modes!r} exceeds the {n_g}-point grid")
        return _lowmodes_from_samples(self, modes, n_g)

    def certificate(self, modes: ModeSet) -> float:
        """``max |V_k| |k|^m`` over the nonzero modes of ``modes``."""
        c = np.abs(self.coefficients(modes))
        nz = modes.k2 > 0
        return float(np.max(c[nz] * modes.k2[nz] ** (0.5 * self.m), initial=0.0))

    def __add__(self, other: "LocalPotential") -> "SumPotential":
        return SumPotential((self, other))


def _lowmodes_from_samples(pot: LocalPotential, modes: ModeSet, n: int) -> np.ndarray:
    vol = pot.cell.volume
    if n**3 <= STREAM_THRESHOLD:
        d = sp.dft(pot.sample(n))
        idx = modes.n % n
        return math.sqrt(vol) * d[idx[:, 0], idx[:, 1], idx[:, 2]]
    h = modes.half
    block = max(1, (1 << 22) // (n * n))
    slabs = ((i0, pot.sample_slab(n, i0, min(n, i0 + block))) for i0 in range(0, n, block))
    cube = sp.stream_lowmodes(slabs, n, h)
    return math.sqrt(vol) * sp.from_box_array(modes, cube)


def _axis(n: int, i0: int, i1: int, L: float):
    return L / n * np.arange(i0, i1), L / n * np.arange(n)


@dataclass(frozen=True, eq=False)
class ZeroPotential(LocalPotential):
    cell: Cell
    m: float = math.inf
    C: float = 0.0

    def coefficients(self, modes):
        return np.zeros(len(modes), dtype=complex)

    def sample_slab(self, n, i0, i1):
        return np.zeros((i1 - i0, n, n))

    def lowmodes(self, modes, n_g=None):
        return np.zeros(len(modes), dtype=complex)

    def certificate(self, modes):
        return 0.0


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _unit_draws(seed: int, keys: np.ndarray, stream: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        s = _splitmix(np.full(1, seed, dtype=np.uint64) + np.uint64(stream))[0]
        x = _splitmix(keys.astype(np.uint64) ^ s)
        x = _splitmix(x + s)
    return (x >> np.uint64(11)).astype(float) * 2.0**-53


class SyntheticPotential(LocalPotential):
    """``V_k = C |k|^{-m} u(k)`` on the ball ``|n| <= n_max``; ``V_0 = 0``.

    ``u(k)`` has modulus in ``[1/2, 1]`` and a uniform phase, is a pure
    function of ``(seed, n)``, and satisfies ``u(-k) = conj(u(k))``.
    """

    def __init__(self, cell: Cell, m: float, C: float, n_max: int, seed: int = 0):
        if not m > 3:
            raise ValueError(f"decay exponent must exceed 3, got m = {m}")
        if C < 0:
            raise ValueError("amplitude must be nonnegative")
        self.cell, self.m, self.C = cell, float(m), float(C)
        self.n_max, self.seed = int(n_max), int(seed) & ((1 << 64) - 1)
        modes = sp.ball(cell, self.n_max)
        keys = modes.keys
        negkeys = sp._keys(-modes.n)
        canon = np.maximum(keys, negkeys)
        mag = 0.5 + 0.5 * _unit_draws(self.seed, canon, 1)
        phase = 2 * math.pi * _unit_draws(self.seed, canon, 2)
        phase = np.where(keys == canon, phase, -phase)
        c = np.zeros(len(modes), dtype=complex)
        nz = modes.k2 > 0
        c[nz] = self.C * modes.k2[nz] ** (-0.5 * self.m) * mag[nz] * np.exp(1j * phase[nz])
        self._field = FourierField(modes, c, copy=False)

    @property
    def modes(self) -> ModeSet:
        return self._field.modes

    def coefficients(self, modes):
        return self._field.to(modes).coeffs

    def _folded(self, n: int, modes: ModeSet | None = None):
        h = (n - 1) // 2
        src = self._field.modes
        t = (src.n + h) % n - h
        if modes is None:
            return t, self._field.coeffs
        pos = modes.locate(t)
        out = np.zeros(len(modes), dtype=complex)
        hit = pos >= 0
        np.add.at(out, pos[hit], self._field.coeffs[hit])
        return out

    def lowmodes(self, modes, n_g=None):
        if n_g is None:
            return self.coefficients(modes)
        if n_g % 2 == 0:
            return super().lowmodes(modes, n_g)
        return self._folded(n_g, modes)

    def sample_slab(self, n, i0, i1):
        if n % 2 == 1:
            c = self._folded(n, sp.box(self.cell, n))
            v = sp.to_grid(FourierField(sp.box(self.cell, n), c, copy=False), n).values
            return np.array(v[i0:i1])
        t, c = self._folded(n)
        a = np.zeros((n, n, n), dtype=complex)
        np.add.at(a, (t[:, 0] % n, t[:, 1] % n, t[:, 2] % n), c)
        v = sp.sfft.ifftn(a).real * (n**3 / math.sqrt(self.cell.volume))
        return v[i0:i1]

    def certificate(self, modes=None):
        return super().certificate(self.modes if modes is None else modes)


def _centers(centers) -> np.ndarray:
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    if c.shape[1] != 3:
        raise ValueError("centers must be 3-vectors")
    return c


class GaussianSum(LocalPotential):
    """``depth * sum_c sum_R exp(-|x - c - R|^2 / (2 w^2))`` over lattice images R.

    Coefficients decay faster than any power; ``m`` is a nominal exponent
    used for bookkeeping, with the matching sharp constant ``C``.
    """

    def __init__(self, cell: Cell, depth: float, width: float, centers, m: float = 5.0):
        if not width > 0:
            raise ValueError("width must be positive")
        if width >= cell.L:
            raise ValueError("width must be smaller than the cell length")
        self.cell, self.depth, self.width = cell, float(depth), float(width)
        self.centers = _centers(centers)
        self.m = float(m)
        w2 = self.width**2
        amp = abs(self.depth) * (2 * math.pi * w2) ** 1.5 * len(self.centers) / math.sqrt(cell.volume)
        # sup_k k^m exp(-w^2 k^2 / 2) is reached at k^2 = m / w^2
        self.C = amp * (self.m / w2) ** (0.5 * self.m) * math.exp(-0.5 * self.m)

    @property
    def mass(self) -> float:
        """Integral over the cell."""
        return self.depth * len(self.centers) * (2 * math.pi * self.width**2) ** 1.5

    def coefficients(self, modes):
        k = modes.kvec
        g = np.exp(-0.5 * self.width**2 * modes.k2)
        phase = np.exp(-1j * (k @ self.centers.T)).sum(axis=1)
        return self.depth * (2 * math.pi * self.width**2) ** 1.5 / math.sqrt(self.cell.volume) * g * phase

    def _profile(self, x: np.ndarray, c: float) -> np.ndarray:
        L, w = self.cell.L, self.width
        reach = int(math.ceil(9.0 * w / L)) + 1
        R = L * np.arange(-reach, reach + 1)
        d = x[:, None] - c - R[None, :]
        return np.exp(-0.5 * (d / w) ** 2).sum(axis=1)

    def sample_slab(self, n, i0, i1):
        xs, ax = _axis(n, i0, i1, self.cell.L)
        out = np.zeros((i1 - i0, n, n))
        for c in self.centers:
            gx = self._profile(xs, c[0] % self.cell.L)
            gy = self._profile(ax, c[1] % self.cell.L)
            gz = self._profile(ax, c[2] % self.cell.L)
            out += gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
        return self.depth * out

    def lowmodes(self, modes, n_g=None):
        if n_g is None:
            return self.coefficients(modes)
        if 2 * modes.half + 1 > n_g:
            raise ValueError(f"{modes!r} exceeds the {n_g}-point grid")
        # separable: the grid DFT factorizes over the three axes
        _, ax = _axis(n_g, 0, 0, self.cell.L)
        idx = modes.n % n_g
        out = np.zeros(len(modes), dtype=complex)
        for c in self.centers:
            f = [np.fft.fft(self._profile(ax, c[a] % self.cell.L)) / n_g for a in range(3)]
            out += f[0][idx[:, 0]] * f[1][idx[:, 1]] * f[2][idx[:, 2]]
        return self.depth * math.sqrt(self.cell.volume) * out


def synth_potential(cell: Cell, m: float, C: float, n_max: int, seed: int = 0) -> SyntheticPotential:
    return SyntheticPotential(cell, m, C, n_max, seed)


def gaussian_potential(cell: Cell, depth: float, width: float, center, m: float = 5.0) -> GaussianSum:
    """Periodized Gaussian well(s); ``center`` is one point or a list of points."""
    return GaussianSum(cell, depth, width, center, m)


def _radial_ft_factor(p: int, q: np.ndarray) -> np.ndarray:
    """``j_{p+1}(q) / q^{p+1}`` with its small-argument series."""
    q = np.asarray(q, dtype=float)
    out = np.empty_like(q)
    small = q < 0.1
    big = ~small
    out[big] = spherical_jn(p + 1, q[big]) / q[big] ** (p + 1)
    qs = q[small]
    term = np.full_like(qs, 1.0 / _double_factorial(2 * p + 3))
    acc = term.copy()
    for j in range(1, 12):
        term = term * (-0.5 * qs * qs) / (j * (2 * p + 3 + 2 * j))
        acc += term
    out[small] = acc
    return out


def _double_factorial(n: int) -> float:
    return float(np.prod(np.arange(n, 0, -2, dtype=float)))


class CompactWell(LocalPotential):
    """``depth * sum_c (1 - |x - c|^2 / r_c^2)_+^p`` with ``r_c < L / 2``.

    Its Fourier coefficients decay exactly like ``|k|^{-(p+2)}`` (with an
    oscillating factor), so it realizes a potential of decay exponent
    ``m = p + 2`` whose grid values and coefficients are both known in
    closed form at every resolution.
    """

    def __init__(self, cell: Cell, depth: float, radius: float, centers, p: int = 3):
        if not 0 < radius < 0.5 * cell.L:
            raise ValueError("radius must lie in (0, L/2)")
        if int(p) != p or p < 2:
            raise ValueError("power must be an integer >= 2")
        self.cell, self.depth, self.radius, self.p = cell, float(depth), float(radius), int(p)
        self.centers = _centers(centers)
        self.m = float(self.p + 2)
        pref = math.pi * math.gamma(self.p + 1) * 2 ** (self.p + 2)
        # |V_k| |k|^m is proportional to |q j_{p+1}(q)|, whose supremum sits
        # in its first lobes (the envelope tends to 1 from above)
        q = np.linspace(1e-3, 60.0, 600001)
        sup = 1.001 * float(np.max(np.abs(q * spherical_jn(self.p + 1, q))))
        self.C = (abs(self.depth) * len(self.centers) * pref * self.radius ** (1 - self.p) * sup
                  / math.sqrt(cell.volume))

    def radial_transform(self, k: np.ndarray) -> np.ndarray:
        """``int_{R^3} g(x) exp(-i k.x) dx`` for a single unit-depth well."""
        p, rc = self.p, self.radius
        pref = math.pi * math.gamma(p + 1) * 2 ** (p + 2) * rc**3
        return pref * _radial_ft_factor(p, np.asarray(k) * rc)

    @property
    def mass(self) -> float:
        return self.depth * len(self.centers) * float(self.radial_transform(np.zeros(1))[0])

    def l2_norm_squared(self) -> float:
        """``int_cell V^2`` (wells must not overlap)."""
        p2 = 2 * self.p
        # int_0^1 (1-r^2)^{2p} r^2 dr = B(3/2, 2p+1) / 2
        b = math.gamma(1.5) * math.gamma(p2 + 1) / math.gamma(p2 + 2.5)
        return self.depth**2 * len(self.centers) * 4 * math.pi * self.radius**3 * 0.5 * b

    def coefficients(self, modes):
        g = self.radial_transform(np.sqrt(modes.k2))
        phase = np.exp(-1j * (modes.kvec @ self.centers.T)).sum(axis=1)
        return self.depth / math.sqrt(self.cell.volume) * g * phase

    def sample_slab(self, n, i0, i1):
        L = self.cell.L
        xs, ax = _axis(n, i0, i1, L)
        out = np.zeros((i1 - i0, n, n))
        r2c = self.radius**2
        for c in self.centers:
            d = [((a - cc + 0.5 * L) % L - 0.5 * L) ** 2 / r2c for a, cc in ((xs, c[0]), (ax, c[1]), (ax, c[2]))]
            t = 1.0 - (d[0][:, None, None] + d[1][None, :, None] + d[2][None, None, :])
            np.maximum(t, 0.0, out=t)
            out += t**self.p
        return self.depth * out


class SumPotential(LocalPotential):
    def __init__(self, parts: Sequence[LocalPotential]):
        flat: list[LocalPotential] = []
        for p in parts:
            flat.extend(p.parts if isinstance(p, SumPotential) else [p])
        if not flat:
            raise ValueError("empty potential sum")
        self.parts = tuple(flat)
        self.cell = flat[0].cell
        if any(p.cell != self.cell for p in flat):
            raise ValueError("potentials live on different cells")
        self.m = min(p.m for p in flat)
        kmin = self.cell.spacing
        # |k|^{-m_i} <= kmin^{m - m_i} |k|^{-m} for m_i >= m
        self.C = sum(p.C * kmin ** (self.m - p.m) if p.C else 0.0 for p in flat)

    def coefficients(self, modes):
        return sum(p.coefficients(modes) for p in self.parts)

    def sample_slab(self, n, i0, i1):
        return sum(p.sample_slab(n, i0, i1) for p in self.parts)

    def lowmodes(self, modes, n_g=None):
        return sum(p.lowmodes(modes, n_g) for p in self.parts)


# ---------------------------------------------------------------------------
# nonlocal part


@dataclass(frozen=True)
class ProjectorSet:
    """Separable nonlocal operator ``phi -> sum_j (chi_j, phi) chi_j``."""

    projectors: tuple[FourierField, ...] = ()

    def __len__(self) -> int:
        return len(self.projectors)

    def overlaps(self, modes: ModeSet, c: np.ndarray) -> np.ndarray:
        """``(chi_j, phi_i)`` for coefficient rows ``c`` on ``modes``; shape (n, M)."""
        c = np.atleast_2d(c)
        if not self.projectors:
            return np.zeros((c.shape[0], 0))
        chi = np.stack([p.to(modes).coeffs for p in self.projectors])
        return (c @ np.conj(chi).T).real

    def apply(self, modes: ModeSet, c: np.ndarray) -> np.ndarray:
        """Coefficients on ``modes`` of ``V_nl phi`` (projected onto ``modes``)."""
        c2 = np.atleast_2d(c)
        out = np.zeros_like(c2, dtype=complex)
        if self.projectors:
            chi = np.stack([p.to(modes).coeffs for p in self.projectors])
            out = self.overlaps(modes, c2) @ chi
        return out.reshape(np.shape(c))


def smooth_projector(cell: Cell, amplitude: float, kappa: float, center, decay: float,
                     n_max: int) -> FourierField:
    """``chi_k = A |cell|^{-1/2} (1 + |k|^2 / kappa^2)^{-decay/2} exp(-i k.c)`` on ``|n| <= n_max``."""
    modes = sp.ball(cell, n_max)
    c = np.asarray(center, dtype=float)
    coef = (amplitude / math.sqrt(cell.volume) * (1.0 + modes.k2 / kappa**2) ** (-0.5 * decay)
            * np.exp(-1j * (modes.kvec @ c)))
    return FourierField(modes, coef, copy=False)


def apply_nonlocal(P: ProjectorSet, phi: FourierField) -> FourierField:
    """``sum_j (chi_j, phi) chi_j`` restricted to the modes of ``phi``."""
    return FourierField(phi.modes, P.apply(phi.modes, phi.coeffs), copy=False)


def core_density(cell: Cell, charge: float, width: float, centers) -> GaussianSum:
    """Nonnegative smooth core density: Gaussians of total charge ``charge``."""
    if charge < 0:
        raise ValueError("core charge must be nonnegative")
    c = _centers(centers)
    depth = charge / (len(c) * (2 * math.pi * width**2) ** 1.5)
    return GaussianSum(cell, depth, width, c)


# ---------------------------------------------------------------------------
# exchange-correlation


@dataclass(frozen=True)
class XCFunctional:
    """LDA energy density ``e(rho)`` and its derivatives.

    ``kind`` is ``"none"`` (Hartree model), ``"x-alpha"`` with
    ``e = -c_x rho^{4/3}``, or ``"custom"`` with user callables
    ``derivs[j](rho)`` for orders 0..3.
    """

    kind: str = "none"
    c_x: float = 0.0
    derivs: tuple[Callable, ...] = field(default=(), compare=False)
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "x-alpha", "custom"):
            raise ValueError(f"unknown xc kind {self.kind!r}")
        if self.kind == "x-alpha":
            if not self.c_x > 0:
                raise ValueError("x-alpha needs c_x > 0")
            object.__setattr__(self, "alpha", 1.0 / 3.0)
        if self.kind == "custom" and len(self.derivs) < 3:
            raise ValueError("custom xc needs callables for orders 0, 1 and 2")
        if not 0 < self.alpha <= 1:
            raise ValueError("regularity exponent must lie in (0, 1]")

    @property
    def is_zero(self) -> bool:
        return self.kind == "none"

    def __call__(self, rho, order: int = 0):
        return xc_eval(self, rho, order)


X_ALPHA_DIRAC = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)


def x_alpha(c_x: float = X_ALPHA_DIRAC) -> XCFunctional:
    return XCFunctional("x-alpha", c_x)


def xc_eval(xc: XCFunctional, rho, order: int = 0):
    """``d^order e / d rho^order`` at ``rho >= 0`` (scalar or array)."""
    r = np.asarray(rho, dtype=float)
    if np.any(r < 0):
        raise ValueError("density must be nonnegative")
    if order not in (0, 1, 2, 3):
        raise ValueError("order must be 0, 1, 2 or 3")
    if xc.kind == "none":
        out = np.zeros_like(r)
    elif xc.kind == "x-alpha":
        c = xc.c_x
        if order == 0:
            out = -c * r ** (4.0 / 3.0)
        elif order == 1:
            out = -(4.0 / 3.0) * c * np.cbrt(r)
        elif order == 2:
            if np.any(r == 0):
                raise ValueError("x-alpha second derivative is unbounded at zero density")
            out = -(4.0 / 9.0) * c * r ** (-2.0 / 3.0)
        else:
            raise ValueError("third derivative is only exposed for custom functionals")
    else:
        if order >= len(xc.derivs):
            raise ValueError(f"custom functional lacks an order-{order} derivative")
        out = np.asarray(xc.derivs[order](r), dtype=float)
    return float(out) if np.ndim(rho) == 0 else out
