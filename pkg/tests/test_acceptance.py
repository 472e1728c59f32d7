"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Criteria 7 to 9 are full convergence studies and take several minutes.
"""
import math
import time

import numpy as np
import pytest

from pwdft import coulomb, harness, ks, selfcheck, tfw
from pwdft import potentials as pt
from pwdft import spectral as sp

from _util import direct_values, orthonormal_rows, rand_field, verdict

WELLS = [[4.3, 5, 5], [5.7, 5, 5]]


def _fft_coeff(values, n_g, idx):
    """Discrete Fourier coefficient (1/n^3) sum f(x) e^{-ik.x} at integer offsets ``idx``."""
    f = np.fft.fftn(values) / n_g**3
    i = idx % n_g
    return f[i[..., 0], i[..., 1], i[..., 2]]


def _positive_field(cell, n_c, N, rng):
    m = sp.ball(cell, n_c)
    w = rand_field(m, rng, decay=3.0)
    v = sp.FourierField.planewave(m, (0, 0, 0), 1.0) + w * (0.5 / np.sum(np.abs(w.coeffs)))
    return v * (math.sqrt(N) / v.norm())


def _orbitals(cell, n_c, n, rng):
    m = sp.ball(cell, n_c)
    rows = np.stack([rand_field(m, rng, 2.0).coeffs for _ in range(n)])
    return ks.OrbitalSet(m, orthonormal_rows(rows))


def _tangent(phi, rng):
    rows = np.stack([rand_field(phi.modes, rng, 2.0).coeffs for _ in range(len(phi))])
    rows -= ks.gram(ks.OrbitalSet(phi.modes, rows), phi) @ phi.coeffs
    return ks.OrbitalSet(phi.modes, rows)


def _ks_model(cell):
    c = [[5.0, 5.0, 5.0]]
    return ks.KSModel(cell, 1, pt.gaussian_potential(cell, -2.0, 0.9, c),
                      pt.ProjectorSet((pt.smooth_projector(cell, 0.5, 2.0, c[0], 4, 8),)),
                      pt.core_density(cell, 0.2, 0.8, c), pt.x_alpha())


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_grid_identities():
    t = time.perf_counter()
    worst = selfcheck.grid_identities(trials=100, n_c=4, n_g=17)
    dt = time.perf_counter() - t
    ok = all(v <= 1e-12 for v in worst.values()) and dt < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f} s"
    verdict(1, "grid quadrature, interpolated products and aliasing", ok, detail)


def test_poisson_and_coulomb_form(rng):
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    m = sp.ball(cell, 6)
    lap_err = form_err = 0.0
    min_d = math.inf
    for i in range(1000):
        rho = rand_field(m, rng, decay=1.0)
        min_d = min(min_d, coulomb.d_gamma(rho, rho))
        if i < 50:
            V = coulomb.coulomb_potential(rho).to(m)
            target = 4 * math.pi * rho.coeffs
            target[m.zero] = 0.0  # subtracting the mean removes the zero mode
            lap_err = max(lap_err, np.max(np.abs(m.k2 * V.coeffs - target)) / np.max(np.abs(target)))
            form_err = max(form_err, _rel(V.inner(rho), coulomb.d_gamma(rho, rho)))
    dt = time.perf_counter() - t
    ok = lap_err <= 1e-13 and form_err <= 1e-12 and min_d >= 0 and dt < 5
    verdict(2, "Poisson equation and Coulomb form", ok,
            f"Laplacian {lap_err:.1e}, form {form_err:.1e}, min D {min_d:.2e}, {dt:.1f} s")


def test_free_particle_spectrum():
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    vals, _ = ks.lowest_eigenpairs(ks.KSModel(cell, 1), None, 8, 8, tol=1e-12)
    exact = np.sort(0.5 * sp.ball(cell, 8).k2)[:8]
    err = float(np.max(np.abs(np.sort(vals) - exact)))
    dt = time.perf_counter() - t
    verdict(3, "free-particle spectrum", err <= 1e-10 and dt < 10, f"max error {err:.1e}, {dt:.1f} s")


def test_uniform_tfw_ground_state():
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    model = tfw.TFWModel(cell, 2.0)
    st = tfw.solve_tfw(model, 4, None, tfw.TFWOptions(tol=1e-11))
    vol = cell.volume
    lam = 5 / 3 * model.c_tf * (2 / vol) ** (2 / 3)
    energy = model.c_tf * 2 ** (5 / 3) * vol ** (-2 / 3)
    c = st.v.coeffs.copy()
    c[st.v.modes.zero] = 0.0
    nonconst = float(np.max(np.abs(c)))
    dt = time.perf_counter() - t
    ok = (nonconst <= 1e-10 and _rel(st.lam, lam) <= 1e-10 and _rel(st.energy, energy) <= 1e-10
          and st.residual <= 1e-10 and dt < 5)
    verdict(4, "uniform TFW ground state", ok,
            f"non-constant part {nonconst:.1e}, lambda rel {_rel(st.lam, lam):.1e}, "
            f"energy rel {_rel(st.energy, energy):.1e}, residual {st.residual:.1e}, {dt:.1f} s")


def test_gradient_and_hessian_oracles(rng):
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    h = 1e-4

    tmodel = tfw.TFWModel(cell, 2.0, pt.synth_potential(cell, 5.0, 1.0, 20, seed=5))
    v = _positive_field(cell, 4, 2.0, rng)
    g = tfw.tfw_gradient(tmodel, v)
    t_err = 0.0
    for _ in range(10):
        w = rand_field(v.modes, rng, decay=2.0) * 0.1
        fd = (tfw.tfw_energy(tmodel, v + w * h) - tfw.tfw_energy(tmodel, v - w * h)) / (2 * h)
        t_err = max(t_err, _rel(fd, g.inner(w)))

    kmodel = _ks_model(cell)
    phi = _orbitals(cell, 4, 1, rng)
    G = ks.ks_gradient(kmodel, phi)
    k_err = 0.0
    for _ in range(10):
        w = _tangent(phi, rng)
        ep = ks.ks_energy(kmodel, ks.OrbitalSet(phi.modes, phi.coeffs + h * w.coeffs))
        em = ks.ks_energy(kmodel, ks.OrbitalSet(phi.modes, phi.coeffs - h * w.coeffs))
        exact = float(np.sum((G.coeffs.conj() * w.coeffs).real))
        k_err = max(k_err, _rel((ep - em) / (2 * h), exact))

    st = ks.scf_solve(kmodel, 5, opts=ks.SCFOptions(tol=1e-10))
    phi0, eps = st.orbitals, st.eigenvalues
    a_err = 0.0
    for _ in range(3):
        w = _tangent(phi0, rng)

        def e(s):
            return ks.ks_energy(kmodel, ks.OrbitalSet(phi0.modes, phi0.coeffs + s * w.coeffs))

        s = 1e-2
        d2 = (-e(2 * s) + 16 * e(s) - 30 * e(0) + 16 * e(-s) - e(-2 * s)) / (12 * s**2)
        fd = 0.25 * d2 - float(np.sum(eps * np.sum(np.abs(w.coeffs) ** 2, axis=1)))
        a_err = max(a_err, _rel(fd, ks.second_order_form(kmodel, phi0, eps, w, w)))
    dt = time.perf_counter() - t
    ok = t_err <= 1e-6 and k_err <= 1e-6 and a_err <= 1e-5 and dt < 60
    verdict(5, "gradient and Hessian finite-difference oracles", ok,
            f"TFW gradient {t_err:.1e}, KS gradient {k_err:.1e}, second-order form {a_err:.1e}, {dt:.1f} s")


def _offsets(modes):
    return modes.n[:, None, :] - modes.n[None, :, :]


def dense_tfw(model, v, n_g):
    cell = model.cell
    d = _offsets(v.modes)
    q2 = cell.spacing**2 * np.sum(d * d, axis=-1)
    rho = direct_values(v, n_g).real ** 2
    fprime = 5 / 3 * model.c_tf * rho ** (2 / 3)
    coul = np.where(q2 > 0, 4 * math.pi / np.where(q2 > 0, q2, 1), 0.0)
    H = (_fft_coeff(fprime, n_g, d) + _fft_coeff(model.potential.sample(n_g).values, n_g, d)
         + coul * _fft_coeff(rho, n_g, d))
    return H + np.diag(0.5 * model.c_w * v.modes.k2)


def dense_ks(model, phi, n_g):
    cell = model.cell
    m = phi.modes
    d = _offsets(m)
    q2 = cell.spacing**2 * np.sum(d * d, axis=-1)
    rho = 2 * sum(direct_values(f, n_g).real ** 2 for f in phi.fields())
    coul = np.where(q2 > 0, 4 * math.pi / np.where(q2 > 0, q2, 1), 0.0)
    total = model.core.sample(n_g).values + rho
    exc1 = -4 / 3 * model.xc.c_x * np.cbrt(total)
    m2 = sp.ball(cell, 2 * m.size)
    vloc = dict(zip(map(tuple, m2.n), model.potential.coefficients(m2)))
    V = np.vectorize(lambda a, b, c: vloc[(a, b, c)])(d[..., 0], d[..., 1], d[..., 2])
    H = V / math.sqrt(cell.volume) + coul * _fft_coeff(rho, n_g, d) + _fft_coeff(exc1, n_g, d)
    H = H + np.diag(0.5 * m.k2)
    for chi in model.projectors.projectors:
        c = chi.to(m).coeffs
        H = H + np.outer(c, c.conj())
    return H


def test_dense_matrix_equivalence(rng):
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    n_g = 9

    tmodel = tfw.TFWModel(cell, 2.0, pt.synth_potential(cell, 5.0, 1.0, 20, seed=5))
    v = _positive_field(cell, 2, 2.0, rng)
    H = dense_tfw(tmodel, v, n_g)
    rho = ks.density(ks.OrbitalSet.from_fields([v])) * 0.5
    t_err = 0.0
    for _ in range(10):
        w = rand_field(v.modes, rng)
        got = tfw.apply_tfw_hamiltonian(tmodel, rho, w, n_g).coeffs
        t_err = max(t_err, np.max(np.abs(got - H @ w.coeffs)) / np.abs(H).max())

    kmodel = _ks_model(cell)
    phi = _orbitals(cell, 2, 1, rng)
    K = dense_ks(kmodel, phi, n_g)
    krho = ks.density(phi)
    k_err = 0.0
    for _ in range(10):
        w = rand_field(phi.modes, rng)
        got = ks.apply_h_ks(kmodel, krho, w, n_g).coeffs
        k_err = max(k_err, np.max(np.abs(got - K @ w.coeffs)) / np.abs(K).max())
    dt = time.perf_counter() - t
    ok = t_err <= 1e-12 and k_err <= 1e-12 and dt < 10
    verdict(6, "matrix-free Hamiltonians against assembled Fourier matrices", ok,
            f"TFW {t_err:.1e}, KS {k_err:.1e}, {dt:.1f} s")


def _in(x, lo, hi):
    return lo <= x <= hi


@pytest.mark.slow
def test_tfw_cutoff_rate():
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    model = tfw.TFWModel(cell, 2.0, pt.synth_potential(cell, 5.0, 2.0, 96, seed=7))
    spec = harness.StudySpec("tfw", model, [8, 12, 16, 20, 24], 48, n_g_rule="variational",
                             options=tfw.TFWOptions(tol=1e-12))
    rep = harness.run_study(spec)
    s = {q: rep.slope(q).exponent for q in ("err_H1", "err_L2", "err_lambda_1")}
    ok = (_in(s["err_H1"], -5.0, -4.0) and _in(s["err_L2"], -6.1, -5.0)
          and _in(s["err_lambda_1"], -10.0, -8.0))
    verdict(7, "TFW cutoff rate", ok,
            f"H1 {s['err_H1']:.2f}, L2 {s['err_L2']:.2f}, lambda {s['err_lambda_1']:.2f}, "
            f"{time.perf_counter() - t:.0f} s")


@pytest.mark.slow
def test_tfw_grid_rate():
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    V = pt.CompactWell(cell, -1.0, 2.0, [[3.2, 5, 5], [6.8, 5, 5]], p=3)
    assert V.m == 5
    model = tfw.TFWModel(cell, 2.0, V)
    rep = harness.ng_study("tfw", model, 8, [33, 65, 129, 257, 513], tfw.TFWOptions(tol=1e-13))
    h1 = rep.slope("err_H1").exponent
    en = rep.slope("err_energy").exponent
    ok = _in(h1, -5.7, -4.3) and _in(en, -5.7, -4.3)
    verdict(8, "TFW grid rate", ok, f"H1 {h1:.2f}, energy {en:.2f}, {time.perf_counter() - t:.0f} s")


@pytest.mark.slow
def test_hartree_two_well_rates():
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    V = (pt.gaussian_potential(cell, -1.5, 1.5, WELLS)
         + pt.synth_potential(cell, 5.0, 2.0, 96, seed=7))
    model = ks.KSModel(cell, 1, V)
    spec = harness.StudySpec("ks", model, [10, 12, 14, 16, 18, 20], 40,
                             options=ks.SCFOptions(tol=1e-12))
    rep = harness.run_study(spec)
    s = {q: rep.slope(q, against="Ec").exponent
         for q in ("err_H1", "err_L2", "err_lambda_1", "err_energy")}
    gaps = [r.energy_gap for r in rep.records]
    dt = time.perf_counter() - t
    ok = (_in(s["err_H1"], -2.6, -1.9) and _in(s["err_L2"], -3.2, -2.4)
          and _in(s["err_lambda_1"], -5.2, -3.8) and _in(s["err_energy"], -5.2, -3.8)
          and min(gaps) >= 0 and dt <= 900)
    verdict(9, "Hartree two-well rates against the cut-off energy", ok,
            f"H1 {s['err_H1']:.2f}, L2 {s['err_L2']:.2f}, eigenvalue {s['err_lambda_1']:.2f}, "
            f"energy {s['err_energy']:.2f}, min gap {min(gaps):.2e}, {dt:.0f} s")


def test_unitary_and_alignment(rng):
    t = time.perf_counter()
    cell = sp.Cell(10.0)
    model = ks.KSModel(cell, 3, pt.gaussian_potential(cell, -1.0, 1.0, WELLS), core=None,
                       xc=pt.XCFunctional())
    xmodel = _ks_model(cell)
    phi = _orbitals(cell, 4, 3, rng)
    e_err = a_err = 0.0
    for mdl in (model, ks.KSModel(cell, 3, xmodel.potential, xmodel.projectors, xmodel.core, xmodel.xc)):
        e0 = ks.ks_energy(mdl, phi)
        for _ in range(20):
            e_err = max(e_err, _rel(ks.ks_energy(mdl, phi.rotate(ks.random_unitary(3, rng))), e0))
    for _ in range(20):
        Q = ks.random_unitary(3, rng)
        a_err = max(a_err, float(np.max(np.abs(ks.align(phi.rotate(Q), phi).coeffs - phi.coeffs))))
    ratio = 0.0
    for _ in range(100):
        big = _orbitals(cell, 7, 2, rng)
        proj = big.to(sp.ball(cell, 4))
        ratio = max(ratio, (ks.manifold_project(big, 4) - big).norm() / (proj - big).norm())
    dt = time.perf_counter() - t
    ok = e_err <= 1e-12 and a_err <= 1e-12 and ratio <= math.sqrt(2) and dt < 30
    verdict(10, "unitary invariance, alignment and manifold projection", ok,
            f"energy {e_err:.1e}, alignment {a_err:.1e}, worst projection ratio {ratio:.3f} "
            f"(bound 1.414), {dt:.1f} s")
