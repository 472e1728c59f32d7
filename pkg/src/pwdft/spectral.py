"""Truncated Fourier spaces on the cubic cell [0, L)^3.

Fields are expanded on the orthonormal planewaves
``e_k(x) = |cell|^{-1/2} exp(i k.x)`` with ``k = (2 pi / L) n``, ``n`` an
integer triple.  Two families of index sets are used:

* the Euclidean ball ``|n| <= n_c`` (the variational space V_{N_c});
* the box ``|n|_inf <= (n_g - 1) / 2`` (trigonometric interpolation on an
  odd ``n_g``-point grid).

Coefficients are always stored in lexicographic order of ``n`` (first
component slowest).  Real-valued fields carry Hermitian-symmetric
coefficients ``c_{-k} = conj(c_k)``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np
import scipy.fft as sfft

_WORKERS: int | None = None

# integer triples are packed into one int64 key; lexicographic order of the
# triples equals numeric order of the keys
_KEY_OFF = 1 << 19
_KEY_BASE = 1 << 20


def set_threads(n: int | None) -> None:
    """Set the worker count used by every FFT in the package."""
    global _WORKERS
    _WORKERS = None if n is None or n <= 1 else int(n)


def fft_workers() -> int | None:
    return _WORKERS


def _keys(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    return ((n[..., 0] + _KEY_OFF) * _KEY_BASE + (n[..., 1] + _KEY_OFF)) * _KEY_BASE + (
        n[..., 2] + _KEY_OFF
    )


@dataclass(frozen=True)
class Cell:
    """Cubic supercell of side ``L`` (Bohr)."""

    L: float

    def __post_init__(self):
        if not (np.isfinite(self.L) and self.L > 0):
            raise ValueError(f"cell length must be positive, got {self.L!r}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def volume(self) -> float:
        return self.L**3

    @property
    def spacing(self) -> float:
        """Dual lattice spacing 2 pi / L."""
        return 2.0 * math.pi / self.L

    def wavevectors(self, n) -> np.ndarray:
        return self.spacing * np.asarray(n, dtype=float)

    def grid_axis(self, n_g: int) -> np.ndarray:
        return self.L / n_g * np.arange(n_g)


def cutoff_from_ecut(ecut: float, L: float) -> int:
    """``N_c = floor(sqrt(2 E_c) L / 2 pi)``."""
    if ecut < 0:
        raise ValueError("cut-off energy must be nonnegative")
    # guard against 7.9999999 when E_c was itself computed from an integer N_c
    return int(math.floor(math.sqrt(2.0 * ecut) * L / (2.0 * math.pi) + 1e-9))


def ecut_from_cutoff(n_c: int, L: float) -> float:
    return 0.5 * (2.0 * math.pi * n_c / L) ** 2


class ModeSet:
    """An immutable finite set of dual-lattice indices on a given cell.

    Use :func:`ball` and :func:`box` to obtain (cached) instances; two
    mode sets with the same cell, kind and size are the same object.
    """

    def __init__(self, cell: Cell, kind: str, size: int):
        if kind == "ball":
            if size < 0:
                raise ValueError("ball radius must be nonnegative")
            half = size
        elif kind == "box":
            if size < 1 or size % 2 == 0:
                raise ValueError(f"box grid size must be odd and positive, got {size}")
            half = (size - 1) // 2
        else:
            raise ValueError(f"unknown mode-set kind {kind!r}")
        self.cell = cell
        self.kind = kind
        self.size = int(size)
        self.half = half
        r = np.arange(-half, half + 1)
        n = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        if kind == "ball":
            n = n[np.einsum("ij,ij->i", n, n) <= size * size]
        n = np.ascontiguousarray(n, dtype=np.int64)
        n.setflags(write=False)
        self.n = n
        self.keys = _keys(n)
        self.keys.setflags(write=False)
        k2 = cell.spacing**2 * np.einsum("ij,ij->i", n, n).astype(float)
        k2.setflags(write=False)
        self.k2 = k2
        self.zero = int(np.searchsorted(self.keys, _keys(np.zeros(3, dtype=np.int64))))
        neg = self.locate(-n)
        neg.setflags(write=False)
        self.neg = neg

    @property
    def n_c(self) -> int | None:
        return self.size if self.kind == "ball" else None

    @property
    def n_g(self) -> int | None:
        return self.size if self.kind == "box" else None

    def __len__(self) -> int:
        return self.n.shape[0]

    def __repr__(self) -> str:
        return f"ModeSet({self.kind}, size={self.size}, L={self.cell.L}, M={len(self)})"

    @property
    def kvec(self) -> np.ndarray:
        return self.cell.wavevectors(self.n)

    def locate(self, n) -> np.ndarray:
        """Positions of the triples ``n`` in this set, ``-1`` where absent."""
        keys = _keys(n)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def contains(self, other: "ModeSet") -> bool:
        if other.cell != self.cell:
            return False
        if self.kind == other.kind:
            return self.size >= other.size
        if self.kind == "box":  # ball inside box
            return other.size <= self.half
        return 3 * other.half**2 <= self.size**2


@functools.lru_cache(maxsize=64)
def ball(cell: Cell, n_c: int) -> ModeSet:
    """Index set of V_{N_c}: ``|k| <= 2 pi N_c / L``."""
    return ModeSet(cell, "ball", int(n_c))


@functools.lru_cache(maxsize=64)
def box(cell: Cell, n_g: int) -> ModeSet:
    """Index set of W_{N_g} for odd ``n_g``: ``|n|_inf <= (n_g - 1) / 2``."""
    return ModeSet(cell, "box", int(n_g))


def common_modes(a: ModeSet, b: ModeSet) -> ModeSet:
    """A mode set containing both ``a`` and ``b``."""
    if a.cell != b.cell:
        raise ValueError("fields live on different cells")
    if a.contains(b):
        return a
    if b.contains(a):
        return b
    h = max(a.half, b.half)
    return ball(a.cell, int(math.ceil(math.sqrt(3.0) * h)))


@dataclass(frozen=True)
class PlanewaveBasis:
    """Cell plus cutoff ``n_c`` and optional odd grid size ``n_g >= 4 n_c + 1``."""

    cell: Cell
    n_c: int
    n_g: int | None = None

    def __post_init__(self):
        if self.n_c < 0:
            raise ValueError("cutoff must be nonnegative")
        if self.n_g is not None:
            if self.n_g % 2 == 0 or self.n_g < 4 * self.n_c + 1:
                raise ValueError("N_g must be odd and >= 4*N_c+1")

    @classmethod
    def from_ecut(cls, cell: Cell, ecut: float, n_g: int | None = None) -> "PlanewaveBasis":
        return cls(cell, cutoff_from_ecut(ecut, cell.L), n_g)

    @property
    def modes(self) -> ModeSet:
        return ball(self.cell, self.n_c)

    @property
    def grid_modes(self) -> ModeSet:
        if self.n_g is None:
            raise ValueError("basis has no grid")
        return box(self.cell, self.n_g)

    @property
    def ecut(self) -> float:
        return ecut_from_cutoff(self.n_c, self.cell.L)

    def __len__(self) -> int:
        return len(self.modes)


class FourierField:
    """Coefficients of a field on a :class:`ModeSet` (read-only)."""

    __slots__ = ("modes", "coeffs")

    def __init__(self, modes: ModeSet, coeffs, *, copy: bool = True):
        c = np.array(coeffs, dtype=complex) if copy else np.asarray(coeffs, dtype=complex)
        if c.shape != (len(modes),):
            raise ValueError(f"expected {len(modes)} coefficients, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "coeffs", c)

    def __setattr__(self, name, value):
        raise AttributeError("FourierField is immutable")

    @classmethod
    def zeros(cls, modes: ModeSet) -> "FourierField":
        return cls(modes, np.zeros(len(modes), dtype=complex), copy=False)

    @classmethod
    def planewave(cls, modes: ModeSet, n, value: complex = 1.0) -> "FourierField":
        """Single coefficient ``value`` at index ``n`` (not Hermitian unless n = 0)."""
        pos = int(modes.locate(np.asarray(n)[None, :])[0])
        if pos < 0:
            raise ValueError(f"mode {tuple(n)} not in {modes!r}")
        c = np.zeros(len(modes), dtype=complex)
        c[pos] = value
        return cls(modes, c, copy=False)

    @property
    def cell(self) -> Cell:
        return self.modes.cell

    def to(self, modes: ModeSet) -> "FourierField":
        """The same field on another index set (missing modes dropped or zero)."""
        if modes is self.modes:
            return self
        if modes.cell != self.cell:
            raise ValueError("fields live on different cells")
        return FourierField(modes, _transfer(self.modes, self.coeffs, modes), copy=False)

    def __add__(self, other: "FourierField") -> "FourierField":
        m = common_modes(self.modes, other.modes)
        return FourierField(m, self.to(m).coeffs + other.to(m).coeffs, copy=False)

    def __sub__(self, other: "FourierField") -> "FourierField":
        return self + (-other)

    def __neg__(self) -> "FourierField":
        return FourierField(self.modes, -self.coeffs, copy=False)

    def __mul__(self, a) -> "FourierField":
        return FourierField(self.modes, a * self.coeffs, copy=False)

    __rmul__ = __mul__

    def inner(self, other: "FourierField") -> float:
        """Real L^2 inner product of two real-valued fields."""
        if other.modes is not self.modes:
            other = other.to(self.modes)
        return float(np.vdot(self.coeffs, other.coeffs).real)

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self, s)

    def hermitian_defect(self) -> float:
        """``max |c_{-k} - conj(c_k)|``; zero for real-valued fields."""
        return float(np.max(np.abs(self.coeffs[self.modes.neg] - np.conj(self.coeffs)), initial=0.0))

    def symmetrized(self) -> "FourierField":
        """Hermitian (real-valued) part of the field."""
        c = 0.5 * (self.coeffs + np.conj(self.coeffs[self.modes.neg]))
        return FourierField(self.modes, c, copy=False)

    def __repr__(self) -> str:
        return f"FourierField({self.modes!r})"


def _transfer(src: ModeSet, c: np.ndarray, dst: ModeSet) -> np.ndarray:
    """Copy coefficients (trailing axis) from ``src`` ordering to ``dst``."""
    pos = src.locate(dst.n)
    out = np.zeros(c.shape[:-1] + (len(dst),), dtype=complex)
    hit = pos >= 0
    out[..., hit] = c[..., pos[hit]]
    return out


class GridField:
    """Real samples of a periodic field on the grid ``(L / N) Z^3 cap [0, L)^3``.

    ``values[i, j, l]`` is the value at ``x = (L / N) (i, j, l)``.
    """

    __slots__ = ("cell", "values")

    def __init__(self, cell: Cell, values, *, copy: bool = True):
        v = np.array(values, dtype=float) if copy else np.asarray(values, dtype=float)
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]) or v.shape[0] < 1:
            raise ValueError(f"grid values must be an N x N x N array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "values", v)

    def __setattr__(self, name, value):
        raise AttributeError("GridField is immutable")

    @property
    def n_g(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_function(cls, cell: Cell, n_g: int, fn: Callable) -> "GridField":
        """Sample ``fn(x, y, z)`` (broadcasting) on the grid."""
        ax = cell.grid_axis(n_g)
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        return cls(cell, fn(x, y, z), copy=False)


# ---------------------------------------------------------------------------
# the section 2 toolbox


def project(f: FourierField, n_c: int) -> FourierField:
    """L^2 projection onto V_{n_c}: keep ``|k| <= 2 pi n_c / L``."""
    return f.to(ball(f.cell, n_c))


def _require_odd(n_g: int) -> None:
    if n_g < 1 or n_g % 2 == 0:
        raise ValueError(f"only odd grid sizes are supported, got N_g = {n_g}")


def dft(g: GridField) -> np.ndarray:
    """Discrete Fourier transform ``N^{-3} sum_x g(x) exp(-i k.x)``.

    The result is indexed in FFT order: entry ``[n1 % N, n2 % N, n3 % N]``
    holds the coefficient for ``k = (2 pi / L) n``.  It is ``N``-periodic in
    ``n`` and equals ``|cell|^{-1/2} sum_K c_{n + N K}`` for a field with
    coefficients ``c``.
    """
    n = g.n_g
    return sfft.fftn(g.values, workers=_WORKERS) / n**3


def dft_direct(g: GridField) -> np.ndarray:
    """Naive O(N^6) evaluation of :func:`dft`; cross-check for small grids."""
    n = g.n_g
    if n > 15:
        raise ValueError("direct DFT is only meant for tiny grids")
    j = np.arange(n)
    idx = np.stack(np.meshgrid(j, j, j, indexing="ij"), axis=-1).reshape(-1, 3)
    phase = np.exp(-2j * np.pi * (idx @ idx.T) / n)
    out = phase @ g.values.reshape(-1) / n**3
    return out.reshape(n, n, n)


def interpolate(g: GridField) -> FourierField:
    """Trigonometric interpolant in W_{N_g}: the box field matching ``g`` on the grid."""
    _require_odd(g.n_g)
    modes = box(g.cell, g.n_g)
    d = dft(g)
    n = modes.n % g.n_g
    c = math.sqrt(g.cell.volume) * d[n[:, 0], n[:, 1], n[:, 2]]
    return FourierField(modes, c, copy=False)


def to_grid(f: FourierField, n_g: int) -> GridField:
    """Exact values of ``f`` on the ``n_g``-point grid.

    Every mode of ``f`` must satisfy ``|n|_inf <= (n_g - 1) / 2``.
    """
    _require_odd(n_g)
    h = (n_g - 1) // 2
    nz = f.coeffs != 0
    if np.any(np.abs(f.modes.n[nz]) > h):
        raise ValueError(
            f"field has modes beyond the Nyquist range of a {n_g}-point grid; oversample"
        )
    a = np.zeros((n_g, n_g, n_g), dtype=complex)
    n = f.modes.n % n_g
    keep = np.all(np.abs(f.modes.n) <= h, axis=1)
    a[n[keep, 0], n[keep, 1], n[keep, 2]] = f.coeffs[keep]
    v = sfft.ifftn(a, workers=_WORKERS) * (n_g**3 / math.sqrt(f.cell.volume))
    scale = np.sum(np.abs(f.coeffs)) / math.sqrt(f.cell.volume)
    if np.max(np.abs(v.imag), initial=0.0) > 1e-13 * scale + 1e-300:
        raise ValueError("field is not real-valued (coefficients not Hermitian-symmetric)")
    return GridField(f.cell, v.real, copy=False)


def integrate_grid(g: GridField) -> float:
    """Grid quadrature ``(L / N)^3 sum_x g(x)`` (the integral of the interpolant)."""
    return float((g.cell.L / g.n_g) ** 3 * np.sum(g.values))


def sobolev_norm(f: FourierField, s: float) -> float:
    """``(sum_k (1 + |k|^2)^s |c_k|^2)^{1/2}``."""
    w = (1.0 + f.modes.k2) ** s
    return float(np.sqrt(np.sum(w * np.abs(f.coeffs) ** 2)))


def sobolev_inner(f: FourierField, g: FourierField, s: float) -> float:
    if g.modes is not f.modes:
        g = g.to(f.modes)
    return float(np.sum((1.0 + f.modes.k2) ** s * np.conj(f.coeffs) * g.coeffs).real)


def hs_best_error(f: FourierField, n_c: int, r: float, s: float) -> tuple[float, float]:
    """Truncation error ``||f - P f||_{H^r}`` and its a priori bound.

    The bound is ``(L / 2 pi)^{s-r} n_c^{-(s-r)} ||f||_{H^s}``, valid for
    ``r <= s``.
    """
    if r > s:
        raise ValueError("need r <= s")
    inside = np.einsum("ij,ij->i", f.modes.n, f.modes.n) <= n_c * n_c
    w = (1.0 + f.modes.k2[~inside]) ** r
    lhs = float(np.sqrt(np.sum(w * np.abs(f.coeffs[~inside]) ** 2)))
    if s == r:
        factor = 1.0
    elif n_c == 0:
        factor = math.inf
    else:
        factor = (f.cell.L / (2 * math.pi)) ** (s - r) * n_c ** (-(s - r))
    return lhs, factor * sobolev_norm(f, s)


def inverse_inequality(f: FourierField, r: float, s: float) -> tuple[float, float]:
    """``||f||_{H^r}`` and the bound ``(2 pi n_c / L)^{r-s} ||f||_{H^s}``, r >= s.

    Holds for ``f`` in V_{n_c} with ``n_c >= 1``; ``n_c`` is taken as the
    ball radius of ``f``'s modes.
    """
    if r < s:
        raise ValueError("need r >= s")
    if f.modes.kind != "ball" or f.modes.size < 1:
        raise ValueError("inverse inequality needs a field on V_{N_c}, N_c >= 1")
    bound = (f.cell.spacing * f.modes.size) ** (r - s) * sobolev_norm(f, s)
    return sobolev_norm(f, r), bound


# ---------------------------------------------------------------------------
# fast real-field transforms used by the solvers


class Transform:
    """Real-field synthesis/analysis between a mode set and an ``n``-point grid.

    Requires ``n >= 2 max|n|_inf + 1`` so that synthesis is exact;
    ``from_real`` returns the (aliased) discrete Fourier coefficients
    restricted to the mode set, scaled to the ``e_k`` basis.  Any grid size
    is accepted here; only the public grid API insists on odd sizes.
    """

    def __init__(self, modes: ModeSet, n: int):
        if n < 2 * modes.half + 1:
            raise ValueError(f"{n}-point grid cannot represent {modes!r}")
        self.modes = modes
        self.n = int(n)
        nn = modes.n
        pos = nn[:, 2] >= 0
        i = np.where(pos, nn[:, 0], -nn[:, 0]) % n
        j = np.where(pos, nn[:, 1], -nn[:, 1]) % n
        l = np.abs(nn[:, 2])
        self._pos = pos
        self._idx = (i * n + j) * (n // 2 + 1) + l
        self._sel = np.flatnonzero(pos)
        self._scale = math.sqrt(modes.cell.volume)

    def half_spectrum(self, c: np.ndarray) -> np.ndarray:
        n = self.n
        a = np.zeros(c.shape[:-1] + (n * n * (n // 2 + 1),), dtype=complex)
        a[..., self._idx[self._sel]] = c[..., self._sel]
        return a.reshape(c.shape[:-1] + (n, n, n // 2 + 1))

    def to_real(self, c: np.ndarray) -> np.ndarray:
        """Grid values of the real field(s) with coefficients ``c`` (trailing axis)."""
        n = self.n
        v = sfft.irfftn(self.half_spectrum(c), s=(n, n, n), axes=(-3, -2, -1), workers=_WORKERS)
        v *= n**3 / self._scale
        return v

    def from_real(self, v: np.ndarray) -> np.ndarray:
        """Coefficients on the mode set of the grid function(s) ``v``."""
        n = self.n
        r = sfft.rfftn(v, axes=(-3, -2, -1), workers=_WORKERS)
        c = r.reshape(r.shape[:-3] + (-1,))[..., self._idx]
        c = np.where(self._pos, c, np.conj(c))
        # the n3 = 0 plane is only Hermitian up to round-off; make it exact so
        # that no invisible imaginary component can build up in iterations
        c = 0.5 * (c + np.conj(c[..., self.modes.neg]))
        c *= self._scale / n**3
        return c


@functools.lru_cache(maxsize=64)
def transform(modes: ModeSet, n: int) -> Transform:
    return Transform(modes, n)


def fast_odd_size(n_min: int) -> int:
    """Smallest odd 3,5,7-smooth integer ``>= n_min``."""
    n = n_min if n_min % 2 else n_min + 1
    while True:
        m = n
        for p in (3, 5, 7):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 2


# ---------------------------------------------------------------------------
# streamed transforms for grids too large to hold in memory


def _phases(n: int, half: int, sign: float) -> np.ndarray:
    """``exp(sign 2 pi i x m / n)`` for ``x`` in 0..n-1 and ``m`` in -half..half."""
    x = np.arange(n)[:, None]
    m = np.arange(-half, half + 1)[None, :]
    return np.exp(sign * 2j * np.pi * ((x * m) % n) / n)


def box_array(modes: ModeSet, c: np.ndarray) -> np.ndarray:
    """Scatter coefficients into a centered ``(2h+1)^3`` cube."""
    h = modes.half
    a = np.zeros((2 * h + 1,) * 3, dtype=complex)
    a[modes.n[:, 0] + h, modes.n[:, 1] + h, modes.n[:, 2] + h] = c
    return a


def from_box_array(modes: ModeSet, a: np.ndarray) -> np.ndarray:
    h = (a.shape[0] - 1) // 2
    if np.any(np.abs(modes.n) > h):
        raise ValueError("mode set exceeds the box array")
    return a[modes.n[:, 0] + h, modes.n[:, 1] + h, modes.n[:, 2] + h]


def stream_values(a: np.ndarray, n: int, cell: Cell, block: int = 16) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(i0, values)`` slabs of the real field with centered box coefficients ``a``.

    Memory is O(n^2 h) instead of O(n^3).
    """
    h = (a.shape[0] - 1) // 2
    e = _phases(n, h, +1.0)
    # contract n3 then n2: b[n1, x2, x3]
    t = np.einsum("abc,zc->abz", a, e, optimize=True)
    b = np.einsum("abz,yb->ayz", t, e, optimize=True).reshape(2 * h + 1, n * n)
    br, bi = np.ascontiguousarray(b.real), np.ascontiguousarray(b.imag)
    scale = 1.0 / math.sqrt(cell.volume)
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        er, ei = e[i0:i1].real, e[i0:i1].imag
        v = er @ br - ei @ bi
        v *= scale
        yield i0, v.reshape(i1 - i0, n, n)


def stream_lowmodes(slabs: Iterable[tuple[int, np.ndarray]], n: int, half: int) -> np.ndarray:
    """Accumulate ``n^{-3} sum_x g(x) exp(-i k.x)`` for ``|m|_inf <= half`` from slabs.

    Returns a centered ``(2 half + 1)^3`` cube of discrete Fourier coefficients.
    """
    e = _phases(n, half, -1.0)
    er, ei = np.ascontiguousarray(e.real), np.ascontiguousarray(e.imag)
    w = 2 * half + 1
    acc = np.zeros((w, n, w), dtype=complex)  # [m1, x2, m3]
    for i0, g in slabs:
        b = g.shape[0]
        flat = g.reshape(b * n, n)
        t = (flat @ er + 1j * (flat @ ei)).reshape(b, n, w)  # [x1, x2, m3]
        acc += np.einsum("xa,xyc->ayc", e[i0:i0 + b], t, optimize=True)
    out = np.einsum("ayc,yb->abc", acc, e, optimize=True)
    return out / n**3
