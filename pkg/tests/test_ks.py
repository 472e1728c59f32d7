import math

import numpy as np
import pytest

from pwdft import ks
from pwdft import potentials as pt
from pwdft import spectral as sp

from _util import direct_values, orthonormal_rows, rand_field

WELLS = [[4.3, 5, 5], [5.7, 5, 5]]


def random_orbitals(cell, n_c, n, rng, decay=2.0):
    m = sp.ball(cell, n_c)
    rows = np.stack([rand_field(m, rng, decay).coeffs for _ in range(n)])
    return ks.OrbitalSet(m, orthonormal_rows(rows))


def tangent(phi, rng, decay=2.0):
    """Random W with Gram(Phi, W) = 0."""
    rows = np.stack([rand_field(phi.modes, rng, decay).coeffs for _ in range(len(phi))])
    rows -= ks.gram(ks.OrbitalSet(phi.modes, rows), phi) @ phi.coeffs
    return ks.OrbitalSet(phi.modes, rows)


def cosine(modes, n):
    """Normalized cos(k.x) as a Hermitian coefficient vector."""
    a = sp.FourierField.planewave(modes, n).coeffs
    b = sp.FourierField.planewave(modes, tuple(-np.asarray(n))).coeffs
    return (a + b) / math.sqrt(2)


class ConstantShift(pt.LocalPotential):
    def __init__(self, base, shift):
        self.base, self.shift = base, shift
        self.cell, self.m, self.C = base.cell, base.m, base.C

    def coefficients(self, modes):
        c = self.base.coefficients(modes).copy()
        c[modes.zero] += self.shift * math.sqrt(self.cell.volume)
        return c

    def sample_slab(self, n, i0, i1):
        return self.base.sample_slab(n, i0, i1) + self.shift


def xalpha_model(cell):
    c = [[5.0, 5.0, 5.0]]
    return ks.KSModel(
        cell, 1, pt.gaussian_potential(cell, -2.0, 0.9, c),
        pt.ProjectorSet((pt.smooth_projector(cell, 0.5, 2.0, c[0], 4, 8),)),
        pt.core_density(cell, 0.2, 0.8, c), pt.x_alpha())


@pytest.fixture(scope="module")
def two_well():
    cell = sp.Cell(10.0)
    model = ks.KSModel(cell, 1, pt.gaussian_potential(cell, -1.5, 1.5, WELLS))
    return model, ks.scf_solve(model, 5, opts=ks.SCFOptions(tol=1e-10))


@pytest.fixture(scope="module")
def xalpha():
    cell = sp.Cell(10.0)
    model = xalpha_model(cell)
    return model, ks.scf_solve(model, 5, opts=ks.SCFOptions(tol=1e-10))


# -- density ---------------------------------------------------------------------


def test_density_of_constant_orbital(cell):
    m = sp.ball(cell, 3)
    rho = ks.density(ks.OrbitalSet(m, sp.FourierField.planewave(m, (0, 0, 0)).coeffs))
    vals = sp.to_grid(rho, 13).values
    assert np.allclose(vals, 2 / cell.volume, rtol=0, atol=1e-15)


def test_density_charge_and_sign(cell, rng):
    phi = random_orbitals(cell, 4, 3, rng)
    rho = ks.density(phi)
    assert rho.modes.size == 8
    assert math.sqrt(cell.volume) * rho.coeffs[rho.modes.zero].real == pytest.approx(6.0, abs=1e-12)
    assert sp.to_grid(rho, 33).values.min() >= -1e-12


def test_density_matches_pointwise_squares(cell, rng):
    phi = random_orbitals(sp.Cell(6.0), 2, 2, rng)
    rho = ks.density(phi)
    direct = 2 * sum(np.abs(direct_values(f, 11)) ** 2 for f in phi.fields())
    assert np.max(np.abs(direct_values(rho, 11).real - direct)) <= 1e-12 * direct.max()


def test_density_unitary_invariance(cell, rng):
    phi = random_orbitals(cell, 4, 3, rng)
    U = ks.random_unitary(3, rng)
    a, b = ks.density(phi), ks.density(phi.rotate(U))
    assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-12 * np.max(np.abs(a.coeffs))


# -- energy ----------------------------------------------------------------------


def test_energy_of_constant_orbital_is_zero(cell):
    m = sp.ball(cell, 3)
    phi = sp.FourierField.planewave(m, (0, 0, 0))
    e, parts = ks.ks_energy(ks.KSModel(cell, 1), phi, parts=True)
    assert e == pytest.approx(0.0, abs=1e-15)
    assert parts["status"] == "ok"


def test_hartree_model_has_no_xc(cell, rng):
    model = ks.KSModel(cell, 2, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    _, parts = ks.ks_energy(model, random_orbitals(cell, 4, 2, rng), parts=True)
    assert parts["xc"] == 0.0
    assert parts["hartree"] > 0


def test_energy_unitary_invariance(rng):
    cell = sp.Cell(10.0)
    model = xalpha_model(cell)
    phi = random_orbitals(cell, 4, 3, rng)
    e0 = ks.ks_energy(model, phi)
    for _ in range(20):
        e1 = ks.ks_energy(model, phi.rotate(ks.random_unitary(3, rng)))
        assert abs(e1 - e0) <= 1e-12 * abs(e0)


def test_constraint_status(cell, rng):
    phi = random_orbitals(cell, 3, 2, rng)
    bad = ks.OrbitalSet(phi.modes, 1.01 * phi.coeffs)
    _, parts = ks.ks_energy(ks.KSModel(cell, 2), bad, parts=True)
    assert parts["status"] == "constraint-violated"


def test_kinetic_term(cell, rng):
    phi = random_orbitals(cell, 4, 2, rng)
    _, parts = ks.ks_energy(ks.KSModel(cell, 2), phi, parts=True)
    expect = sum(float(np.sum(phi.modes.k2 * np.abs(r) ** 2)) for r in phi.coeffs)
    assert parts["kinetic"] == pytest.approx(expect, rel=1e-13)


@pytest.mark.parametrize("make", ["hartree", "xalpha"])
def test_gradient_matches_central_differences(make, rng):
    cell = sp.Cell(10.0)
    if make == "xalpha":
        model = xalpha_model(cell)
    else:
        model = ks.KSModel(cell, 2, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    phi = random_orbitals(cell, 4, model.n_pairs, rng)
    w = tangent(phi, rng)
    g = ks.ks_gradient(model, phi)
    exact = float(np.sum((g.coeffs.conj() * w.coeffs).real))
    h = 1e-4
    ep = ks.ks_energy(model, ks.OrbitalSet(phi.modes, phi.coeffs + h * w.coeffs))
    em = ks.ks_energy(model, ks.OrbitalSet(phi.modes, phi.coeffs - h * w.coeffs))
    assert (ep - em) / (2 * h) == pytest.approx(exact, rel=1e-6)


# -- Hamiltonian -----------------------------------------------------------------


def test_free_hamiltonian_is_kinetic(cell, rng):
    phi = rand_field(sp.ball(cell, 4), rng)
    rho = sp.FourierField.zeros(sp.ball(cell, 8))
    out = ks.apply_h_ks(ks.KSModel(cell, 1), rho, phi)
    assert np.allclose(out.coeffs, 0.5 * phi.modes.k2 * phi.coeffs, atol=1e-14)


def test_hamiltonian_symmetry(rng):
    cell = sp.Cell(10.0)
    model = xalpha_model(cell)
    rho = ks.density(random_orbitals(cell, 4, 1, rng))
    for _ in range(5):
        a, b = rand_field(sp.ball(cell, 4), rng), rand_field(sp.ball(cell, 4), rng)
        ha, hb = ks.apply_h_ks(model, rho, a), ks.apply_h_ks(model, rho, b)
        lhs, rhs = ha.inner(b), a.inner(hb)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), ha.norm() * b.norm())


def _grid_coefficients(values, cell, n_g, modes):
    """Interpolation coefficients on ``modes`` of samples on the 0-based grid."""
    f = np.fft.fftn(values)
    idx = modes.n % n_g
    return math.sqrt(cell.volume) / n_g**3 * f[idx[:, 0], idx[:, 1], idx[:, 2]]


def dense_hamiltonian(model, phi_rho, n_c, n_g):
    """Assembled planewave matrix of H_rho on the N_c ball, built from scratch."""
    cell = model.cell
    m = sp.ball(cell, n_c)
    kv = m.n
    diff = kv[:, None, :] - kv[None, :, :]
    m2 = sp.ball(cell, 2 * n_c)
    lookup = {tuple(v): i for i, v in enumerate(m2.n)}
    pos = np.vectorize(lambda a, b, c: lookup[(a, b, c)])(diff[..., 0], diff[..., 1], diff[..., 2])

    rho_vals = 2 * sum(np.abs(direct_values(f, n_g)) ** 2 for f in phi_rho.fields())
    rho_hat = _grid_coefficients(rho_vals, cell, n_g, m2)  # exact: rho lives on the 2 N_c ball
    k2 = m2.k2
    hart = np.where(k2 > 0, 4 * math.pi * rho_hat / np.where(k2 > 0, k2, 1), 0)
    pot = model.potential.coefficients(m2) + hart
    if not model.xc.is_zero:
        core = model.core.sample(n_g).values if model.core is not None else 0
        pot = pot + _grid_coefficients(model.xc(np.maximum(core + rho_vals, 0), 1), cell, n_g, m2)
    H = pot[pos] / math.sqrt(cell.volume) + np.diag(0.5 * m.k2)
    for chi in model.projectors.projectors:
        c = chi.to(m).coeffs
        H = H + np.outer(c, c.conj())
    return H


@pytest.mark.parametrize("make", ["hartree", "xalpha"])
def test_eigenpairs_match_dense_matrix(make, rng):
    cell = sp.Cell(10.0)
    model = xalpha_model(cell) if make == "xalpha" else ks.KSModel(
        cell, 1, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    phi = random_orbitals(cell, 2, 1, rng)
    rho = ks.density(phi)
    H = dense_hamiltonian(model, phi, 2, 9)
    assert np.max(np.abs(H - H.conj().T)) <= 1e-13
    exact = np.linalg.eigvalsh(H)[:4]
    vals, orb = ks.lowest_eigenpairs(model, rho, 4, 2, tol=1e-11)
    assert np.max(np.abs(vals - exact)) <= 1e-10
    assert np.allclose(orb.gram(), np.eye(4), atol=1e-12)


def test_free_spectrum():
    cell = sp.Cell(10.0)
    vals, orb = ks.lowest_eigenpairs(ks.KSModel(cell, 1), None, 4, 4, tol=1e-11)
    step = 0.5 * (2 * math.pi / 10) ** 2
    assert np.allclose(vals, [0, step, step, step], atol=1e-10)
    c0 = orb.coeffs[0]
    assert abs(abs(c0[orb.modes.zero]) - 1) <= 1e-10


def test_potential_shift(cell):
    base = pt.gaussian_potential(cell, -1.0, 1.0, WELLS)
    shifted = ConstantShift(base, 0.3)
    v0, _ = ks.lowest_eigenpairs(ks.KSModel(cell, 1, base), None, 3, 4, tol=1e-11)
    v1, _ = ks.lowest_eigenpairs(ks.KSModel(cell, 1, shifted), None, 3, 4, tol=1e-11)
    assert np.allclose(v1, v0 + 0.3, atol=1e-10)


def test_too_many_eigenpairs(cell):
    with pytest.raises(ValueError):
        ks.lowest_eigenpairs(ks.KSModel(cell, 1), None, 100, 1)


# -- self-consistent field -------------------------------------------------------


def test_scf_free_single_pair(cell):
    st = ks.scf_solve(ks.KSModel(cell, 1), 4, opts=ks.SCFOptions(tol=1e-11))
    assert st.energy == pytest.approx(0.0, abs=1e-12)
    assert st.eigenvalues[0] == pytest.approx(0.0, abs=1e-10)


def test_scf_two_wells(two_well):
    model, st = two_well
    assert st.converged
    assert st.scf_residual <= 1e-10
    assert st.euler_residual <= 1e-9
    assert np.allclose(st.orbitals.gram(), np.eye(1), atol=1e-12)
    rho = ks.density(st.orbitals)
    assert np.max(np.abs(rho.coeffs - st.density.coeffs)) <= 1e-10


def test_scf_euler_residual_recomputed(xalpha):
    model, st = xalpha
    H = ks.KSDiscretization(model, 5).hamiltonian(ks.density(st.orbitals).coeffs)
    c = st.orbitals.coeffs
    r = H.apply(c) - st.multipliers @ c
    assert np.max(np.linalg.norm(r, axis=1)) <= 10 * 1e-10


def test_scf_multipliers():
    # unequal wells keep the second level away from any degeneracy
    cell = sp.Cell(10.0)
    V = (pt.gaussian_potential(cell, -1.5, 1.2, [[3.5, 5, 5]])
         + pt.gaussian_potential(cell, -1.0, 1.2, [[6.5, 5, 5]]))
    model = ks.KSModel(cell, 2, V)
    st = ks.scf_solve(model, 4, opts=ks.SCFOptions(tol=1e-10))
    lam = st.raw_multipliers
    assert np.max(np.abs(lam - lam.T)) <= 1e-12
    assert np.allclose(np.linalg.eigvalsh(lam), st.eigenvalues, atol=1e-9)
    vals, _ = ks.lowest_eigenpairs(model, st.density, 2, 4, tol=1e-11)
    assert np.allclose(vals, st.eigenvalues, atol=1e-9)
    assert np.all(np.diff(st.eigenvalues) >= 0)


def test_scf_deterministic(cell):
    model = ks.KSModel(cell, 1, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    a = ks.scf_solve(model, 3, opts=ks.SCFOptions(seed=3))
    b = ks.scf_solve(model, 3, opts=ks.SCFOptions(seed=3))
    assert a.energy == b.energy
    assert np.array_equal(a.orbitals.coeffs, b.orbitals.coeffs)


def test_scf_iteration_cap(cell):
    model = ks.KSModel(cell, 1, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    with pytest.raises(ks.ConvergenceError) as err:
        ks.scf_solve(model, 3, opts=ks.SCFOptions(max_iter=1, tol=1e-14))
    assert err.value.state is not None


def test_simple_mixing(cell):
    model = ks.KSModel(cell, 1, pt.gaussian_potential(cell, -1.0, 1.0, WELLS))
    a = ks.scf_solve(model, 3, opts=ks.SCFOptions(mixing="simple", beta=0.5))
    b = ks.scf_solve(model, 3)
    assert a.energy == pytest.approx(b.energy, abs=1e-9)


def test_state_record(two_well):
    rec = two_well[1].record()
    assert set(rec) >= {"energy", "eigenvalues", "multipliers", "scf_residual", "iterations"}


def test_bad_grid(cell):
    with pytest.raises(ValueError):
        ks.scf_solve(ks.KSModel(cell, 1), 3, n_g=12)


# -- alignment and projection ----------------------------------------------------


def test_align_identity_and_rotation(cell, rng):
    phi = random_orbitals(cell, 4, 3, rng)
    assert np.max(np.abs(ks.align(phi, phi).coeffs - phi.coeffs)) <= 1e-12
    Q = ks.random_unitary(3, rng)
    out = ks.align(phi.rotate(Q), phi)
    assert np.max(np.abs(out.coeffs - phi.coeffs)) <= 1e-12


def test_align_is_optimal(cell, rng):
    phi = random_orbitals(cell, 4, 3, rng)
    psi = random_orbitals(cell, 4, 3, rng)
    psi = ks.OrbitalSet(psi.modes, orthonormal_rows(phi.coeffs + 0.5 * psi.coeffs))
    best = (ks.align(psi, phi) - phi).norm()
    for _ in range(50):
        assert best <= (psi.rotate(ks.random_unitary(3, rng)) - phi).norm() + 1e-14
    M = ks.gram(ks.align(psi, phi), phi)
    assert np.max(np.abs(M - M.T)) <= 1e-12
    assert np.linalg.eigvalsh(M).min() >= -1e-12


def test_align_singular(cell):
    m = sp.ball(cell, 2)
    a = ks.OrbitalSet(m, sp.FourierField.planewave(m, (0, 0, 0)).coeffs)
    b = ks.OrbitalSet(m, cosine(m, (1, 0, 0)))
    with pytest.raises(ValueError):
        ks.align(a, b)


def test_manifold_project(cell, rng):
    phi = random_orbitals(cell, 4, 2, rng)
    out = ks.manifold_project(phi, 4)
    assert np.max(np.abs(out.coeffs - phi.coeffs)) <= 1e-12
    for _ in range(100):
        big = random_orbitals(cell, 7, 2, rng, decay=3.0)
        proj = big.to(sp.ball(cell, 4))
        out = ks.manifold_project(big, 4)
        assert np.allclose(out.gram(), np.eye(2), atol=1e-12)
        assert (out - big).norm() <= math.sqrt(2) * (proj - big).norm()


def test_manifold_project_rank_deficient(cell):
    m = sp.ball(cell, 4)
    c = cosine(m, (4, 0, 0))
    phi = ks.OrbitalSet(m, np.stack([c, cosine(m, (0, 4, 0))]))
    with pytest.raises(ValueError):
        ks.manifold_project(phi, 2)


def test_alignment_error_invariance(cell, rng):
    phi = random_orbitals(cell, 4, 2, rng)
    psi = ks.OrbitalSet(phi.modes, orthonormal_rows(phi.coeffs + 0.1 * tangent(phi, rng).coeffs))
    e0 = (ks.align(psi, phi) - phi).norm()
    e1 = (ks.align(psi.rotate(ks.random_unitary(2, rng)), phi) - phi).norm()
    assert e0 == pytest.approx(e1, rel=1e-12)


# -- second-order form -----------------------------------------------------------


def test_second_order_form_zero_and_symmetry(xalpha, rng):
    model, st = xalpha
    z = ks.OrbitalSet(st.orbitals.modes, np.zeros_like(st.orbitals.coeffs))
    assert ks.second_order_form(model, st.orbitals, st.eigenvalues, z, z) == 0.0
    for _ in range(5):
        a, b = tangent(st.orbitals, rng), tangent(st.orbitals, rng)
        ab = ks.second_order_form(model, st.orbitals, st.eigenvalues, a, b)
        ba = ks.second_order_form(model, st.orbitals, st.eigenvalues, b, a)
        assert abs(ab - ba) <= 1e-12 * max(abs(ab), 1.0)


@pytest.mark.parametrize("which", ["two_well", "xalpha"])
def test_second_order_form_finite_difference(which, request, rng):
    model, st = request.getfixturevalue(which)
    phi, eps = st.orbitals, st.eigenvalues
    w = tangent(phi, rng)

    def e(t):
        return ks.ks_energy(model, ks.OrbitalSet(phi.modes, phi.coeffs + t * w.coeffs))

    h = 1e-2
    d2 = (-e(2 * h) + 16 * e(h) - 30 * e(0) + 16 * e(-h) - e(-2 * h)) / (12 * h**2)
    fd = 0.25 * d2 - float(np.sum(eps * np.sum(np.abs(w.coeffs) ** 2, axis=1)))
    a = ks.second_order_form(model, phi, eps, w, w)
    assert fd == pytest.approx(a, rel=1e-5)


@pytest.mark.parametrize("which", ["two_well", "xalpha"])
def test_coercivity_probe(which, request, rng):
    model, st = request.getfixturevalue(which)
    worst = math.inf
    for _ in range(200):
        w = tangent(st.orbitals, rng, decay=rng.uniform(0.0, 3.0))
        a = ks.second_order_form(model, st.orbitals, st.eigenvalues, w, w)
        worst = min(worst, a / w.norm(1.0) ** 2)
    print(f"coercivity probe {which}: min a(W,W)/|W|_H1^2 = {worst:.4e}")
    assert worst > 0
