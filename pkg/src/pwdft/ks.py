"""Kohn-Sham LDA ground states (doubly occupied orbitals) in V_{N_c}.

Energy of an orthonormal set ``Phi = (phi_1 .. phi_N)`` with
``rho = 2 sum_i phi_i^2``::

    E(Phi) = sum_i int |grad phi_i|^2 + int rho V + 2 sum_ij (chi_j, phi_i)^2
             + D(rho, rho) / 2 + sum_x (L/N_g)^3 e(rho_c + rho)(x)

The local term is exact (``rho`` lives on the ``2 N_c`` ball), only the
exchange-correlation term is integrated on the ``N_g`` grid.  The
Hamiltonian is ``-Laplace/2 + V + V_H[rho] + e'(rho_c + rho) + V_nl`` and
``E'(Phi) = 4 H Phi``.

Orbital sets are ``(N, M)`` complex coefficient arrays on the ``N_c``
ball, one Hermitian-symmetric row per orbital.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral as sp
from .coulomb import coulomb_kernel
from .eigensolver import EigensolverError, lobpcg
from .potentials import (STREAM_THRESHOLD, LocalPotential, ProjectorSet, XCFunctional,
                         ZeroPotential, xc_eval)
from .spectral import Cell, FourierField, ModeSet
from .tfw import ConvergenceError


@dataclass(frozen=True)
class KSModel:
    cell: Cell
    n_pairs: int
    potential: LocalPotential | None = None
    projectors: ProjectorSet = ProjectorSet()
    core: LocalPotential | None = None  # nonnegative core density
    xc: XCFunctional = XCFunctional()

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("need at least one electron pair")
        if self.potential is None:
            object.__setattr__(self, "potential", ZeroPotential(self.cell))
        for obj in (self.potential, self.core):
            if obj is not None and obj.cell != self.cell:
                raise ValueError("model components live on different cells")
        for chi in self.projectors.projectors:
            if chi.cell != self.cell:
                raise ValueError("projector lives on a different cell")
            if chi.hermitian_defect() > 1e-12 * max(1.0, float(np.abs(chi.coeffs).max())):
                raise ValueError("projectors must be real-valued")


@dataclass
class OrbitalSet:
    """Orbitals as Hermitian coefficient rows on ``modes``."""

    modes: ModeSet
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=complex))
        if c.shape[1] != len(self.modes):
            raise ValueError("coefficient rows do not match the mode set")
        self.coeffs = c

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def from_fields(cls, fields) -> "OrbitalSet":
        fields = list(fields)
        m = fields[0].modes
        return cls(m, np.stack([f.to(m).coeffs for f in fields]))

    def fields(self) -> list[FourierField]:
        return [FourierField(self.modes, r) for r in self.coeffs]

    def to(self, modes: ModeSet) -> "OrbitalSet":
        if modes is self.modes:
            return self
        return OrbitalSet(modes, sp._transfer(self.modes, self.coeffs, modes))

    def rotate(self, U: np.ndarray) -> "OrbitalSet":
        """Rows ``sum_j U_ij phi_j``."""
        return OrbitalSet(self.modes, np.asarray(U, dtype=float) @ self.coeffs)

    def gram(self) -> np.ndarray:
        return gram(self, self)

    def norm(self, s: float = 0.0) -> float:
        w = (1.0 + self.modes.k2) ** s
        return float(np.sqrt(np.sum(w * np.abs(self.coeffs) ** 2)))

    def __sub__(self, other: "OrbitalSet") -> "OrbitalSet":
        m = sp.common_modes(self.modes, other.modes)
        return OrbitalSet(m, self.to(m).coeffs - other.to(m).coeffs)


def gram(psi: OrbitalSet, phi: OrbitalSet) -> np.ndarray:
    """``[M]_ij = int psi_i phi_j``."""
    m = sp.common_modes(psi.modes, phi.modes)
    return (psi.to(m).coeffs.conj() @ phi.to(m).coeffs.T).real


@dataclass
class KSState:
    orbitals: OrbitalSet
    multipliers: np.ndarray  # Lambda for the returned (eigen-rotated) orbitals
    eigenvalues: np.ndarray
    density: FourierField
    energy: float
    scf_residual: float
    euler_residual: float
    iterations: int
    converged: bool
    degenerate: bool = False
    raw_multipliers: np.ndarray | None = None  # Lambda before diagonalization
    history: list = field(default_factory=list)
    n_g: int | None = None

    def record(self) -> dict:
        return {
            "energy": self.energy,
            "eigenvalues": [float(e) for e in self.eigenvalues],
            "multipliers": [[float(x) for x in row] for row in self.multipliers],
            "scf_residual": self.scf_residual,
            "euler_residual": self.euler_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate_fermi_level": self.degenerate,
        }


class KSHamiltonian:
    """Matrix-free ``H_rho`` restricted to V_{N_c}."""

    def __init__(self, disc: "KSDiscretization", w_s: np.ndarray):
        self.disc = disc
        self.w_s = w_s

    def apply(self, c: np.ndarray) -> np.ndarray:
        d = self.disc
        out = d.kin * c + d.tv.from_real(self.w_s * d.tv.to_real(c))
        if len(d.model.projectors):
            out = out + d.model.projectors.apply(d.modes, c)
        return out

    __call__ = apply


class KSDiscretization:
    def __init__(self, model: KSModel, n_c: int, n_g: int | None = None):
        self.model = model
        cell = model.cell
        self.n_c = int(n_c)
        n_g = 4 * self.n_c + 1 if n_g is None else int(n_g)
        if n_g % 2 == 0 or n_g < 4 * self.n_c + 1:
            raise ValueError("N_g must be odd and >= 4*N_c+1")
        if n_g**3 > STREAM_THRESHOLD and not model.xc.is_zero:
            raise ValueError(f"N_g = {n_g} is too large for the exchange-correlation grid")
        self.n_g = n_g
        self.modes = sp.ball(cell, self.n_c)
        self.modes2 = sp.ball(cell, 2 * self.n_c)
        small = sp.fast_odd_size(4 * self.n_c + 1)
        self.small = n_g if n_g <= small else small
        self.tv = sp.transform(self.modes, self.small)
        self.t2 = sp.transform(self.modes2, self.small)
        self.kin = 0.5 * self.modes.k2
        self.kern2 = coulomb_kernel(self.modes2.k2)
        self.vloc2 = model.potential.coefficients(self.modes2)
        self.vloc_s = self.t2.to_real(self.vloc2)
        self.weight = (cell.L / n_g) ** 3
        self.has_xc = not model.xc.is_zero
        if self.has_xc:
            self.t2_g = sp.transform(self.modes2, n_g)
            self.core_g = (model.core.sample(n_g).values if model.core is not None
                           else np.zeros((n_g,) * 3))

    # -- densities ---------------------------------------------------------

    def density2(self, c: np.ndarray) -> np.ndarray:
        """Coefficients of ``2 sum_i phi_i^2`` on the ``2 N_c`` ball (exact)."""
        vals = self.tv.to_real(np.atleast_2d(c))
        return self.t2.from_real(2.0 * np.einsum("ixyz,ixyz->xyz", vals, vals))

    def _total_density_grid(self, rho2: np.ndarray) -> np.ndarray:
        r = self.core_g + self.t2_g.to_real(rho2)
        return np.maximum(r, 0.0)

    def xc_energy(self, rho2: np.ndarray) -> float:
        if not self.has_xc:
            return 0.0
        r = self._total_density_grid(rho2)
        return self.weight * float(np.sum(xc_eval(self.model.xc, r, 0)))

    def xc_lowmodes(self, rho2: np.ndarray, order: int = 1) -> np.ndarray:
        """Low modes of the ``N_g`` interpolant of ``e^(order)(rho_c + rho)``."""
        r = self._total_density_grid(rho2)
        return self.t2_g.from_real(xc_eval(self.model.xc, r, order))

    # -- energy and operators ---------------------------------------------

    def energy_parts(self, c: np.ndarray) -> dict:
        c = np.atleast_2d(c)
        rho2 = self.density2(c)
        kin = 2.0 * float(np.sum(self.kin * np.abs(c) ** 2))
        loc = float(np.vdot(self.vloc2, rho2).real)
        ov = self.model.projectors.overlaps(self.modes, c)
        nl = 2.0 * float(np.sum(ov**2))
        hart = 0.5 * float(np.vdot(self.kern2 * rho2, rho2).real)
        xc = self.xc_energy(rho2)
        return {"kinetic": kin, "local": loc, "nonlocal": nl, "hartree": hart, "xc": xc}

    def energy(self, c: np.ndarray) -> float:
        return sum(self.energy_parts(c).values())

    def hamiltonian(self, rho2: np.ndarray) -> KSHamiltonian:
        pot2 = self.kern2 * rho2
        if self.has_xc:
            pot2 = pot2 + self.xc_lowmodes(rho2, 1)
        return KSHamiltonian(self, self.vloc_s + self.t2.to_real(pot2))

    def precond(self, r: np.ndarray, shift: float = 1.0) -> np.ndarray:
        return r / (self.kin + shift)


def _as_orbitals(model: KSModel, phi) -> OrbitalSet:
    if isinstance(phi, OrbitalSet):
        return phi
    if isinstance(phi, FourierField):
        return OrbitalSet(phi.modes, phi.coeffs[None, :])
    return OrbitalSet.from_fields(phi)


def _disc_for(model: KSModel, phi: OrbitalSet, n_g: int | None) -> KSDiscretization:
    if phi.modes.kind != "ball":
        raise ValueError("orbitals must live on a V_{N_c} ball")
    return KSDiscretization(model, phi.modes.size, n_g)


def density(phi) -> FourierField:
    """``2 sum_i phi_i^2`` on the ``2 N_c`` ball (exact product)."""
    phi = phi if isinstance(phi, OrbitalSet) else _as_orbitals(None, phi)
    m = phi.modes
    m2 = sp.ball(m.cell, 2 * m.size)
    n = sp.fast_odd_size(4 * m.size + 1)
    vals = sp.transform(m, n).to_real(phi.coeffs)
    rho = 2.0 * np.einsum("ixyz,ixyz->xyz", vals, vals)
    return FourierField(m2, sp.transform(m2, n).from_real(rho), copy=False)


def ks_energy(model: KSModel, phi, n_g: int | None = None, *, parts: bool = False):
    """Kohn-Sham energy; xc integrated on the ``n_g`` grid (default ``4 N_c + 1``)."""
    phi = _as_orbitals(model, phi)
    disc = _disc_for(model, phi, n_g)
    p = disc.energy_parts(phi.coeffs)
    e = sum(p.values())
    if parts:
        err = float(np.max(np.abs(phi.gram() - np.eye(len(phi)))))
        p["status"] = "ok" if err <= 1e-8 else "constraint-violated"
        return e, p
    return e


def ks_gradient(model: KSModel, phi, n_g: int | None = None) -> OrbitalSet:
    """``E'(Phi) = 4 H_{rho_Phi} Phi``."""
    phi = _as_orbitals(model, phi)
    disc = _disc_for(model, phi, n_g)
    H = disc.hamiltonian(disc.density2(phi.coeffs))
    return OrbitalSet(phi.modes, 4.0 * H.apply(phi.coeffs))


def apply_h_ks(model: KSModel, rho: FourierField, phi: FourierField,
               n_g: int | None = None) -> FourierField:
    """``Pi_{N_c} H_rho phi`` for a density ``rho`` on (at most) the ``2 N_c`` ball."""
    disc = KSDiscretization(model, phi.modes.size, n_g)
    H = disc.hamiltonian(rho.to(disc.modes2).coeffs)
    return FourierField(disc.modes, H.apply(phi.coeffs), copy=False)


def _start_block(disc: KSDiscretization, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    M = len(disc.modes)
    X = (rng.standard_normal((n, M)) + 1j * rng.standard_normal((n, M))) / (1.0 + disc.modes.k2)
    return 0.5 * (X + np.conj(X[:, disc.modes.neg]))


def _guards(n: int) -> int:
    return max(3, n // 2)


def lowest_eigenpairs(model: KSModel, rho: FourierField | None, n: int, n_c: int,
                      n_g: int | None = None, tol: float = 1e-10, seed: int = 0,
                      start: np.ndarray | None = None, max_iter: int = 1000):
    """The ``n`` lowest eigenpairs of ``H_rho`` on V_{N_c}: ``(values, OrbitalSet)``."""
    disc = KSDiscretization(model, n_c, n_g)
    rho2 = np.zeros(len(disc.modes2), complex) if rho is None else rho.to(disc.modes2).coeffs
    return _eigs(disc, disc.hamiltonian(rho2), n, tol, seed, start, max_iter)


def _eigs(disc, H, n, tol, seed, start=None, max_iter=1000):
    M = len(disc.modes)
    if n > M:
        raise ValueError("more eigenpairs requested than the basis dimension")
    nb = min(M, n + _guards(n))
    X0 = _start_block(disc, nb, seed)
    if start is not None:
        k = min(len(start), nb)
        X0[:k] = start[:k]
    if nb == M:
        # the block spans the whole space: solve directly
        B = _hermitian_basis(disc.modes)
        AB = H.apply(B)
        Hs = (B.conj() @ AB.T).real
        w, V = np.linalg.eigh(0.5 * (Hs + Hs.T))
        X = V[:, :n].T @ B
        return w[:n], OrbitalSet(disc.modes, X)
    try:
        r = lobpcg(H.apply, X0, n, lambda R: disc.precond(R), tol=tol, max_iter=max_iter)
    except EigensolverError as e:
        raise ConvergenceError(str(e), e) from e
    return r.values, OrbitalSet(disc.modes, r.vectors)


def _hermitian_basis(modes: ModeSet) -> np.ndarray:
    """Real orthonormal basis of the Hermitian coefficient vectors (cos/sin pairs)."""
    M = len(modes)
    rows = []
    for i in range(M):
        j = int(modes.neg[i])
        if j == i:
            e = np.zeros(M, complex)
            e[i] = 1.0
            rows.append(e)
        elif i < j:
            e = np.zeros(M, complex)
            e[i] = e[j] = 1.0 / math.sqrt(2)
            rows.append(e)
            e = np.zeros(M, complex)
            e[i], e[j] = 1j / math.sqrt(2), -1j / math.sqrt(2)
            rows.append(e)
    return np.array(rows)


@dataclass
class SCFOptions:
    tol: float = 1e-10
    max_iter: int = 200
    mixing: str = "anderson"  # or "simple"
    beta: float = 0.3
    depth: int = 5
    seed: int = 0
    eig_tol_min: float | None = None


class _Anderson:
    def __init__(self, beta: float, depth: int):
        self.beta, self.depth = beta, depth
        self.x: list[np.ndarray] = []
        self.f: list[np.ndarray] = []

    def __call__(self, x: np.ndarray, fx: np.ndarray) -> np.ndarray:
        self.x.append(x)
        self.f.append(fx)
        if len(self.x) > self.depth + 1:
            self.x.pop(0)
            self.f.pop(0)
        k = len(self.x)
        if k == 1:
            return x + self.beta * fx
        dF = np.array([self.f[i + 1] - self.f[i] for i in range(k - 1)])
        dX = np.array([self.x[i + 1] - self.x[i] for i in range(k - 1)])
        A = (dF.conj() @ dF.T).real
        b = (dF.conj() @ fx).real
        reg = 1e-12 * np.trace(A)
        g = np.linalg.solve(A + reg * np.eye(k - 1), b)
        xb = x - g @ dX
        fb = fx - g @ dF
        return xb + self.beta * fb


def _euler(H: KSHamiltonian, c: np.ndarray):
    hc = H.apply(c)
    lam = (c.conj() @ hc.T).real
    lam = 0.5 * (lam + lam.T)
    r = hc - lam @ c
    return lam, float(np.max(np.linalg.norm(r, axis=1)))


def scf_solve(model: KSModel, n_c: int, n_g: int | None = None,
              opts: SCFOptions | None = None) -> KSState:
    """Self-consistent ground state with Aufbau occupation of the lowest ``N`` orbitals.

    Stops when ``||rho_out - rho_in|| <= tol`` and the Euler residual of the
    output orbitals is ``<= 10 tol``.
    """
    opts = opts or SCFOptions()
    disc = KSDiscretization(model, n_c, n_g)
    n = model.n_pairs
    eig_floor = opts.eig_tol_min if opts.eig_tol_min is not None else 0.1 * opts.tol
    rho_in = np.zeros(len(disc.modes2), complex)
    mixer = _Anderson(opts.beta, opts.depth) if opts.mixing == "anderson" else None
    start = None
    res = math.inf
    eig_tol = 1e-4
    history = []
    best = None
    it = 0
    while it < opts.max_iter:
        it += 1
        H = disc.hamiltonian(rho_in)
        eps, phi = _eigs(disc, H, n, eig_tol, opts.seed, start)
        start = phi.coeffs
        rho_out = disc.density2(phi.coeffs)
        diff = rho_out - rho_in
        res = float(np.linalg.norm(diff))
        history.append(res)
        if res <= opts.tol and eig_tol <= max(eig_floor, 0.1 * opts.tol) * 1.0001:
            Hout = disc.hamiltonian(rho_out)
            lam, eres = _euler(Hout, phi.coeffs)
            if eres <= 10 * opts.tol:
                best = (phi, rho_out, res, eres, lam)
                break
        eig_tol = max(eig_floor, min(1e-4, 0.1 * res))
        if mixer is None:
            rho_in = rho_in + opts.beta * diff
        else:
            rho_in = mixer(rho_in, diff)
        rho_in = 0.5 * (rho_in + np.conj(rho_in[disc.modes2.neg]))
    converged = best is not None
    if best is None:
        Hout = disc.hamiltonian(rho_out)
        lam, eres = _euler(Hout, phi.coeffs)
        best = (phi, rho_out, res, eres, lam)
    phi, rho_out, res, eres, lam = best
    w, U = np.linalg.eigh(lam)
    rotated = phi.rotate(U.T)
    # the (N+1)-th level, for the degeneracy flag
    H = disc.hamiltonian(rho_out)
    degenerate = False
    if n + 1 <= len(disc.modes):
        try:
            e2, _ = _eigs(disc, H, n + 1, max(opts.tol, 1e-9), opts.seed, rotated.coeffs)
            degenerate = bool(abs(e2[n] - e2[n - 1]) < 1e-8)
        except ConvergenceError:
            pass
    state = KSState(
        orbitals=rotated,
        multipliers=np.diag(w),
        eigenvalues=w,
        density=FourierField(disc.modes2, rho_out, copy=False),
        energy=disc.energy(rotated.coeffs),
        scf_residual=res,
        euler_residual=eres,
        iterations=it,
        converged=converged,
        degenerate=degenerate,
        raw_multipliers=lam,
        history=history,
        n_g=disc.n_g,
    )
    if not converged:
        raise ConvergenceError(
            f"SCF stopped after {it} iterations with density residual {res:.3e}", state)
    return state


# ---------------------------------------------------------------------------
# unitary freedom


def align(psi: OrbitalSet, phi: OrbitalSet, *, cond_max: float = 1e12) -> OrbitalSet:
    """``U Psi`` with ``U = M^T (M M^T)^{-1/2}``, ``M = M_{Psi,Phi}``: the unitary rotation
    of ``Psi`` closest to ``Phi`` in L^2."""
    M = gram(psi, phi)
    w, V = np.linalg.eigh(M @ M.T)
    if w[0] <= w[-1] / cond_max**2 or w[0] <= 0:
        raise ValueError(f"overlap matrix is singular (condition {math.sqrt(w[-1] / max(w[0], 1e-300)):.3e})")
    inv_sqrt = (V / np.sqrt(w)) @ V.T
    U = M.T @ inv_sqrt
    return psi.rotate(U)


def manifold_project(phi: OrbitalSet, n_c: int) -> OrbitalSet:
    """``(M_{P Phi, P Phi})^{-1/2} P Phi`` with ``P`` the projection on V_{N_c}."""
    p = phi.to(sp.ball(phi.modes.cell, n_c))
    G = p.gram()
    w, V = np.linalg.eigh(G)
    if w[0] <= 1e-13 * max(w[-1], 1e-300):
        raise ValueError("projected orbitals are linearly dependent")
    return p.rotate((V / np.sqrt(w)) @ V.T)


def second_order_form(model: KSModel, phi0, eps0, psi, ups, n_g: int | None = None) -> float:
    """``a(Psi, Upsilon) = sum_i <(H - eps_i) psi_i, ups_i> + 4 sum_ij D(phi_i psi_i, phi_j ups_j)
    + 4 sum_ij int e''(rho_c + rho) phi_i psi_i phi_j ups_j`` (xc by ``N_g`` quadrature)."""
    phi0 = _as_orbitals(model, phi0)
    disc = _disc_for(model, phi0, n_g)
    m = disc.modes
    a = np.atleast_2d(_as_orbitals(model, psi).to(m).coeffs)
    b = np.atleast_2d(_as_orbitals(model, ups).to(m).coeffs)
    eps0 = np.asarray(eps0, dtype=float)
    rho2 = disc.density2(phi0.coeffs)
    H = disc.hamiltonian(rho2)
    ha = H.apply(a) - eps0[:, None] * a
    t1 = float(np.sum((ha.conj() * b).real))
    f0 = disc.tv.to_real(phi0.coeffs)
    pa = np.einsum("ixyz,ixyz->xyz", f0, disc.tv.to_real(a))
    pb = np.einsum("ixyz,ixyz->xyz", f0, disc.tv.to_real(b))
    qa, qb = disc.t2.from_real(pa), disc.t2.from_real(pb)
    t2 = 4.0 * float(np.vdot(disc.kern2 * qa, qb).real)
    t3 = 0.0
    if disc.has_xc:
        # products phi psi live on the 2 N_c ball: evaluate them on the N_g grid
        ga, gb = disc.t2_g.to_real(qa), disc.t2_g.to_real(qb)
        e2 = xc_eval(model.xc, disc._total_density_grid(rho2), 2)
        t3 = 4.0 * disc.weight * float(np.sum(e2 * ga * gb))
    return t1 + t2 + t3


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal ``n x n`` matrix."""
    from scipy.stats import ortho_group
    if n == 1:
        return np.array([[rng.choice([-1.0, 1.0])]])
    return ortho_group.rvs(n, random_state=rng)
