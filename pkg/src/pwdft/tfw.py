"""Thomas-Fermi-von Weizsaecker ground states in V_{N_c}.

The unknown is ``v`` with ``rho = v^2`` and ``int v^2 = N``; the energy is

    E(v) = C_W/2 int |grad v|^2 + C_TF int |v|^{10/3} + int V v^2 + D(v^2, v^2) / 2.

Two discretizations share all the code:

* variational: the ``|v|^{10/3}`` term is integrated on an oversampled
  quadrature grid ``N_q >= 4 N_c + 1``; ``int V v^2`` is exact (it only sees
  the modes ``|k| <= 4 pi N_c / L`` of ``V``);
* pseudospectral: both ``|v|^{10/3}`` and ``V`` are replaced by their
  interpolants on the ``N_g``-point grid.

In either case every multiplicative operator restricted to V_{N_c} is
determined by its low modes on the ``2 N_c`` ball, so Hamiltonian products
are formed on a small grid of size ``>= 4 N_c + 1`` whatever ``N_g`` is.
Grids too large for memory are swept in slabs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral as sp
from .coulomb import coulomb_kernel
from .potentials import STREAM_THRESHOLD, LocalPotential, ZeroPotential
from .spectral import Cell, FourierField

C_TF_PRINTED = (10.0 / 3.0) * (3.0 * math.pi**2) ** (2.0 / 3.0)
C_TF_STANDARD = (3.0 / 10.0) * (3.0 * math.pi**2) ** (2.0 / 3.0)


class ConvergenceError(RuntimeError):
    """Raised when a solver stops without meeting its tolerance; carries ``state``."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class TFWModel:
    cell: Cell
    n_electrons: float
    potential: LocalPotential | None = None
    c_w: float = 1.0
    c_tf: float = C_TF_PRINTED

    def __post_init__(self):
        if not (self.c_w > 0 and self.c_tf > 0):
            raise ValueError("C_W and C_TF must be positive")
        if self.n_electrons < 0:
            raise ValueError("electron count must be nonnegative")
        if self.potential is None:
            object.__setattr__(self, "potential", ZeroPotential(self.cell))
        elif self.potential.cell != self.cell:
            raise ValueError("potential lives on a different cell")

    def f(self, rho: np.ndarray) -> np.ndarray:
        """``F'(rho) = 5/3 C_TF rho^{2/3}``."""
        c = np.cbrt(np.maximum(rho, 0.0))
        return (5.0 / 3.0) * self.c_tf * c * c

    def uniform_multiplier(self) -> float:
        return (5.0 / 3.0) * self.c_tf * (self.n_electrons / self.cell.volume) ** (2.0 / 3.0)

    def uniform_energy(self) -> float:
        return self.c_tf * self.n_electrons ** (5.0 / 3.0) * self.cell.volume ** (-2.0 / 3.0)


@dataclass
class TFWOptions:
    tol: float = 1e-10
    max_iter: int = 5000
    seed: int | None = None  # random feasible start when set
    n_q: int | None = None  # variational quadrature grid
    newton: bool = True
    newton_switch: float = 1e-4
    shift: float = 1.0  # preconditioner (C_W/2 |k|^2 + shift)^{-1}
    initial: FourierField | None = None


@dataclass
class TFWState:
    v: FourierField
    lam: float
    energy: float
    residual: float
    iterations: int
    converged: bool
    constraint_error: float
    history: list = field(default_factory=list)
    status: str = "ok"
    n_g: int | None = None
    n_q: int | None = None

    def record(self) -> dict:
        return {
            "energy": self.energy,
            "lambda": self.lam,
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "constraint_error": self.constraint_error,
            "status": self.status,
        }


@dataclass
class _Point:
    c: np.ndarray
    energy: float
    parts: dict
    w_s: np.ndarray | None = None  # total multiplicative potential on the small grid
    f_s: np.ndarray | None = None  # F'(rho) part on the small grid
    v_s: np.ndarray | None = None


class TFWDiscretization:
    """Energy, gradient and Hessian of the discretized TFW functional on V_{N_c}."""

    def __init__(self, model: TFWModel, n_c: int, n_g: int | None = None, n_q: int | None = None):
        self.model = model
        cell = model.cell
        self.n_c = int(n_c)
        self.pseudo = n_g is not None
        grid = n_g if self.pseudo else (n_q or sp.fast_odd_size(4 * self.n_c + 1))
        if grid % 2 == 0 or grid < 4 * self.n_c + 1:
            label = "N_g" if self.pseudo else "N_q"
            raise ValueError(f"{label} must be odd and >= 4*N_c+1")
        self.grid = int(grid)
        self.modes = sp.ball(cell, self.n_c)
        self.modes2 = sp.ball(cell, 2 * self.n_c)
        small = sp.fast_odd_size(4 * self.n_c + 1)
        self.small = self.grid if self.grid <= small else small
        self.direct = self.small == self.grid
        self.streamed = self.grid**3 > STREAM_THRESHOLD
        self.tv = sp.transform(self.modes, self.small)
        self.t2 = sp.transform(self.modes2, self.small)
        if not self.direct and not self.streamed:
            self.tv_g = sp.transform(self.modes, self.grid)
            self.t2_g = sp.transform(self.modes2, self.grid)
        self.vloc2 = model.potential.lowmodes(self.modes2, self.grid if self.pseudo else None)
        self.kin = 0.5 * model.c_w * self.modes.k2
        self.kern2 = coulomb_kernel(self.modes2.k2)
        self.weight = (cell.L / self.grid) ** 3

    # -- grid sweeps -------------------------------------------------------

    def _sweep(self, c: np.ndarray, with_f: bool):
        """``(tf_sum, rho2, F2 or f-grid)`` from values of ``v`` on the quadrature grid."""
        m = self.model
        if self.streamed:
            n, h = self.grid, 2 * self.n_c
            a = sp.box_array(self.modes, c)
            block = max(1, (1 << 21) // (n * n))
            tf = 0.0

            def slabs():
                nonlocal tf
                for i0, vs in sp.stream_values(a, n, m.cell, block):
                    rho = vs * vs
                    cr = np.cbrt(rho)
                    cr *= cr
                    tf += float(np.sum(rho * cr))
                    yield i0, (5.0 / 3.0) * m.c_tf * cr

            if with_f:
                cube = sp.stream_lowmodes(slabs(), n, h)
                f2 = math.sqrt(m.cell.volume) * sp.from_box_array(self.modes2, cube)
            else:
                for _ in slabs():
                    pass
                f2 = None
            vs = self.tv.to_real(c)
            rho2 = self.t2.from_real(vs * vs)
            return m.c_tf * self.weight * tf, rho2, f2, vs
        tv = self.tv if self.direct else self.tv_g
        vg = tv.to_real(c)
        rho = vg * vg
        cr = np.cbrt(rho)
        cr *= cr
        tf = m.c_tf * self.weight * float(np.sum(rho * cr))
        fg = (5.0 / 3.0) * m.c_tf * cr
        if self.direct:
            return tf, self.t2.from_real(rho), fg, vg
        if with_f:
            both = self.t2_g.from_real(np.stack([rho, fg]))
            return tf, both[0], both[1], None
        return tf, self.t2_g.from_real(rho), None, None

    def point(self, c: np.ndarray, with_ops: bool = True) -> _Point:
        c = np.asarray(c, dtype=complex)
        tf, rho2, f, vs = self._sweep(c, with_ops)
        kin = float(np.sum(self.kin * np.abs(c) ** 2))
        vh2 = self.kern2 * rho2
        loc = float(np.vdot(self.vloc2, rho2).real)
        hart = 0.5 * float(np.vdot(vh2, rho2).real)
        parts = {"kinetic": kin, "thomas_fermi": tf, "local": loc, "hartree": hart}
        pt = _Point(c, kin + tf + loc + hart, parts)
        if with_ops:
            if self.direct:
                f_s = f
            else:
                f_s = self.t2.to_real(f)
            pt.f_s = f_s
            pt.w_s = f_s + self.t2.to_real(self.vloc2 + vh2)
            pt.v_s = vs if vs is not None else self.tv.to_real(c)
        return pt

    # -- operators ---------------------------------------------------------

    def apply(self, pt: _Point, w: np.ndarray) -> np.ndarray:
        """``H w`` for coefficient rows ``w`` (Hamiltonian at the density of ``pt``)."""
        return self.kin * w + self.tv.from_real(pt.w_s * self.tv.to_real(w))

    def hessian(self, pt: _Point, w: np.ndarray) -> np.ndarray:
        """``E''(v) w = 2 H w + 4 V_H(v w) v + 8/3 F'(rho) w`` projected on V_{N_c}."""
        ws = self.tv.to_real(w)
        vh = self.t2.to_real(self.kern2 * self.t2.from_real(pt.v_s * ws))
        g = (2.0 * pt.w_s + (8.0 / 3.0) * pt.f_s) * ws + 4.0 * vh * pt.v_s
        return 2.0 * self.kin * w + self.tv.from_real(g)

    def multiplier(self, pt: _Point, hc: np.ndarray | None = None) -> float:
        hc = self.apply(pt, pt.c) if hc is None else hc
        nrm = float(np.vdot(pt.c, pt.c).real)
        return float(np.vdot(pt.c, hc).real) / nrm if nrm > 0 else 0.0

    def roundoff(self, pt: _Point) -> float:
        scale = sum(abs(x) for x in pt.parts.values())
        return 64.0 * np.finfo(float).eps * max(scale, 1e-300)


# ---------------------------------------------------------------------------
# public energies and Hamiltonian


def _check_member(disc: TFWDiscretization, v: FourierField) -> np.ndarray:
    if v.cell != disc.model.cell:
        raise ValueError("field lives on a different cell")
    if not disc.modes.contains(v.modes):
        outside = np.einsum("ij,ij->i", v.modes.n, v.modes.n) > disc.n_c**2
        if np.any(v.coeffs[outside] != 0):
            raise ValueError("field is not in V_{N_c}")
    return v.to(disc.modes).coeffs


def _ball_radius(v: FourierField) -> int:
    nz = np.abs(v.coeffs) > 0
    if not np.any(nz):
        return 0
    return int(math.ceil(math.sqrt(float(np.max(np.einsum("ij,ij->i", v.modes.n[nz], v.modes.n[nz]))))))


def _energy_status(model: TFWModel, v: FourierField) -> str:
    err = abs(float(np.vdot(v.coeffs, v.coeffs).real) - model.n_electrons)
    return "ok" if err <= 1e-8 * max(1.0, model.n_electrons) else "constraint-violated"


def tfw_energy(model: TFWModel, v: FourierField, n_q: int | None = None, *, parts: bool = False):
    """Variational energy; ``|v|^{10/3}`` by quadrature on ``n_q`` points per direction."""
    n_c = _ball_radius(v) if v.modes.kind != "ball" else v.modes.size
    disc = TFWDiscretization(model, n_c, None, n_q)
    pt = disc.point(_check_member(disc, v), with_ops=False)
    if parts:
        return pt.energy, dict(pt.parts, status=_energy_status(model, v))
    return pt.energy


def tfw_energy_ps(model: TFWModel, v: FourierField, n_g: int, *, parts: bool = False):
    """Pseudospectral energy with interpolated ``|v|^{10/3}`` and ``V`` on an ``n_g`` grid."""
    n_c = v.modes.size if v.modes.kind == "ball" else _ball_radius(v)
    if n_g % 2 == 0 or n_g < 4 * n_c + 1:
        raise ValueError("N_g must be odd and >= 4*N_c+1")
    disc = TFWDiscretization(model, n_c, n_g)
    pt = disc.point(_check_member(disc, v), with_ops=False)
    if parts:
        return pt.energy, dict(pt.parts, status=_energy_status(model, v))
    return pt.energy


def tfw_gradient(model: TFWModel, v: FourierField, n_g: int | None = None) -> FourierField:
    """``E'(v) = 2 H_{v^2} v`` in V_{N_c}."""
    disc = TFWDiscretization(model, v.modes.size, n_g)
    pt = disc.point(_check_member(disc, v))
    return FourierField(disc.modes, 2.0 * disc.apply(pt, pt.c), copy=False)


def apply_tfw_hamiltonian(model: TFWModel, rho: FourierField, w: FourierField,
                          n_g: int | None = None) -> FourierField:
    """``Pi_{N_c} H_rho w`` with ``H_rho = -C_W/2 Laplace + I(F'(rho) + V) + V_Coulomb[rho]``.

    ``rho`` is clamped at zero on the grid.  Without ``n_g`` the variational
    Hamiltonian is used (``F'(rho)`` on the default quadrature grid, exact ``V``).
    """
    n_c = w.modes.size
    disc = TFWDiscretization(model, n_c, n_g)
    cw = _check_member(disc, w)
    m = model
    n = disc.grid
    if 2 * rho.modes.half + 1 > n:
        raise ValueError("density has modes beyond the grid")
    if disc.direct:
        f_s = m.f(sp.transform(rho.modes, n).to_real(rho.coeffs))
    elif not disc.streamed:
        rho_g = sp.transform(rho.modes, n).to_real(rho.coeffs)
        f_s = disc.t2.to_real(disc.t2_g.from_real(m.f(rho_g)))
    else:
        a = sp.box_array(rho.modes, rho.coeffs)
        block = max(1, (1 << 21) // (n * n))
        slabs = ((i0, m.f(r)) for i0, r in sp.stream_values(a, n, m.cell, block))
        cube = sp.stream_lowmodes(slabs, n, 2 * n_c)
        f_s = disc.t2.to_real(math.sqrt(m.cell.volume) * sp.from_box_array(disc.modes2, cube))
    rho2 = rho.to(disc.modes2).coeffs
    w_s = f_s + disc.t2.to_real(disc.vloc2 + disc.kern2 * rho2)
    pt = _Point(cw, 0.0, {}, w_s=w_s, f_s=f_s)
    return FourierField(disc.modes, disc.apply(pt, cw), copy=False)


def tfw_residual(model: TFWModel, state_or_v, n_g: int | None = None) -> float:
    """``||Pi_{N_c}(H v - lambda v)||`` with ``lambda = <H v, v> / N``."""
    v = state_or_v.v if isinstance(state_or_v, TFWState) else state_or_v
    if isinstance(state_or_v, TFWState) and n_g is None:
        n_g = state_or_v.n_g
    disc = TFWDiscretization(model, v.modes.size, n_g)
    pt = disc.point(_check_member(disc, v))
    hc = disc.apply(pt, pt.c)
    lam = disc.multiplier(pt, hc)
    return float(np.linalg.norm(hc - lam * pt.c))


def assemble_tfw_matrix(model: TFWModel, v: FourierField, n_g: int) -> np.ndarray:
    """Dense pseudospectral Hamiltonian ``[H]_{kl}`` on V_{N_c} (small ``N_c`` only).

    Kinetic ``C_W/2 |k|^2`` on the diagonal; ``F'(v^2)`` and ``V`` enter through
    their ``n_g``-grid discrete Fourier coefficients at ``k - l``; Coulomb is
    ``4 pi rho^FFT_{k-l} / |k - l|^2`` off the diagonal.
    """
    modes = v.modes
    if len(modes) > 2000:
        raise ValueError("dense assembly is only meant for tiny bases")
    cell = model.cell
    vg = sp.to_grid(v, n_g).values
    rho = vg * vg
    fdft = sp.dft(sp.GridField(cell, model.f(rho)))
    vdft = sp.dft(model.potential.sample(n_g))
    rdft = sp.dft(sp.GridField(cell, rho))
    d = modes.n[:, None, :] - modes.n[None, :, :]
    idx = d % n_g
    q2 = cell.spacing**2 * np.einsum("ijk,ijk->ij", d, d).astype(float)
    pick = lambda a: a[idx[..., 0], idx[..., 1], idx[..., 2]]
    coul = np.zeros_like(q2)
    coul[q2 > 0] = 4.0 * math.pi / q2[q2 > 0]
    h = pick(fdft) + pick(vdft) + coul * pick(rdft)
    h = h + np.diag(0.5 * model.c_w * modes.k2)
    return h


# ---------------------------------------------------------------------------
# solver


def _initial(disc: TFWDiscretization, opts: TFWOptions) -> np.ndarray:
    m = disc.model
    nel = m.n_electrons
    if opts.initial is not None:
        c = opts.initial.to(disc.modes).coeffs.copy()
    elif opts.seed is not None:
        rng = np.random.default_rng(opts.seed)
        M = len(disc.modes)
        c = (rng.standard_normal(M) + 1j * rng.standard_normal(M)) / (1.0 + disc.modes.k2) ** 2
        c = 0.5 * (c + np.conj(c[disc.modes.neg]))
        c[disc.modes.zero] = abs(c[disc.modes.zero]) + 1.0
    else:
        c = np.zeros(len(disc.modes), dtype=complex)
        c[disc.modes.zero] = 1.0
    c = 0.5 * (c + np.conj(c[disc.modes.neg]))
    nrm = math.sqrt(float(np.vdot(c, c).real))
    return c * (math.sqrt(nel) / nrm) if nrm > 0 else c


class _Solver:
    def __init__(self, disc: TFWDiscretization, opts: TFWOptions):
        self.d = disc
        self.o = opts
        self.N = disc.model.n_electrons
        self.prec = 1.0 / (disc.kin + opts.shift)

    def retract(self, x: np.ndarray) -> np.ndarray:
        x = 0.5 * (x + np.conj(x[self.d.modes.neg]))
        return x * (math.sqrt(self.N) / math.sqrt(float(np.vdot(x, x).real)))

    def tangent(self, c: np.ndarray, x: np.ndarray) -> np.ndarray:
        return x - (float(np.vdot(c, x).real) / self.N) * c

    def grad(self, pt: _Point):
        hc = self.d.apply(pt, pt.c)
        lam = self.d.multiplier(pt, hc)
        r = hc - lam * pt.c
        return lam, r, float(np.linalg.norm(r))

    def precondition(self, c: np.ndarray, g: np.ndarray) -> np.ndarray:
        z = self.prec * g
        pc = self.prec * c
        return z - (float(np.vdot(c, z).real) / float(np.vdot(c, pc).real)) * pc

    def newton_step(self, pt: _Point, lam: float, g: np.ndarray) -> np.ndarray | None:
        c = pt.c
        prec = 0.5 * self.prec
        P = lambda x: self.tangent(c, x)
        A = lambda x: P(self.d.hessian(pt, x) - 2.0 * lam * x)
        b = -g
        gn = float(np.linalg.norm(b))
        # superlinear forcing, floored so the target stays above round-off
        tol = max(min(0.25, math.sqrt(gn)), 1e-4) * gn
        x = np.zeros_like(b)
        r = b.copy()
        z = P(prec * r)
        p = z.copy()
        rz = float(np.vdot(r, z).real)
        for _ in range(60):
            ap = A(p)
            pap = float(np.vdot(p, ap).real)
            if pap <= 0:
                return x if np.any(x) else None
            a = rz / pap
            x = x + a * p
            r = r - a * ap
            if np.linalg.norm(r) <= tol:
                break
            z = P(prec * r)
            rz_new = float(np.vdot(r, z).real)
            p = z + (rz_new / rz) * p
            rz = rz_new
        return P(x)

    def run(self, c0: np.ndarray) -> TFWState:
        d, o = self.d, self.o
        pt = d.point(c0)
        lam, r, res = self.grad(pt)
        history = [pt.energy]
        best = (res, pt, lam)
        alpha = 1.0
        s_prev = y_prev = None
        g_prev = None
        it = 0
        newton_ok = o.newton
        status = "ok"
        while res > o.tol and it < o.max_iter:
            it += 1
            g = 2.0 * r
            accepted = None
            if newton_ok and res < o.newton_switch:
                eta = self.newton_step(pt, lam, g)
                if eta is not None:
                    trial = d.point(self.retract(pt.c + eta))
                    tl, tr, tres = self.grad(trial)
                    if trial.energy <= pt.energy + d.roundoff(pt) and tres < 2.0 * res:
                        accepted = (trial, tl, tr, tres)
                    else:
                        newton_ok = False
            if accepted is None:
                dirn = -self.precondition(pt.c, g)
                slope = float(np.vdot(g, dirn).real)
                if slope >= 0:
                    dirn, slope = -g, -float(np.vdot(g, g).real)
                a = alpha
                for _ in range(40):
                    trial = d.point(self.retract(pt.c + a * dirn))
                    if trial.energy <= pt.energy + 1e-4 * a * slope + d.roundoff(pt):
                        break
                    a *= 0.5
                else:
                    status = "line-search-failed"
                    break
                tl, tr, tres = self.grad(trial)
                accepted = (trial, tl, tr, tres)
            trial, tl, tr, tres = accepted
            s = trial.c - pt.c
            y = 2.0 * tr - g
            sy = float(np.vdot(s, y).real)
            sMs = float(np.vdot(s, s / self.prec).real)
            alpha = sMs / sy if sy > 0 else 1.0
            alpha = min(max(alpha, 1e-4), 1e4)
            pt, lam, r, res = trial, tl, tr, tres
            history.append(pt.energy)
            if res < best[0]:
                best = (res, pt, lam)
        res, pt, lam = best
        c = pt.c
        if c[d.modes.zero].real < 0:
            c = -c
        c = c.copy()
        c[d.modes.zero] = c[d.modes.zero].real
        v = FourierField(d.modes, c, copy=False)
        state = TFWState(
            v=v, lam=lam, energy=pt.energy, residual=res, iterations=it,
            converged=res <= o.tol, constraint_error=abs(float(np.vdot(c, c).real) - self.N),
            history=history, status=status if res > o.tol else "ok",
            n_g=d.grid if d.pseudo else None, n_q=None if d.pseudo else d.grid,
        )
        return state


def solve_tfw(model: TFWModel, n_c: int, n_g: int | None = None,
              opts: TFWOptions | None = None) -> TFWState:
    """Minimize the TFW energy on ``{v in V_{N_c} : int v^2 = N}``.

    With ``n_g`` the pseudospectral functional is minimized, otherwise the
    variational one.  Raises :class:`ConvergenceError` (with the best
    iterate attached) when the residual does not reach ``opts.tol``.
    """
    opts = opts or TFWOptions()
    disc = TFWDiscretization(model, n_c, n_g, opts.n_q)
    if model.n_electrons == 0:
        v = FourierField.zeros(disc.modes)
        return TFWState(v, 0.0, 0.0, 0.0, 0, True, 0.0, [0.0], "ok",
                        n_g, None if n_g else disc.grid)
    state = _Solver(disc, opts).run(_initial(disc, opts))
    if not state.converged:
        raise ConvergenceError(
            f"TFW solver stopped after {state.iterations} iterations with residual "
            f"{state.residual:.3e} ({state.status})", state)
    return state
