"""Convergence studies: cutoff sweeps against a high-cutoff reference, grid sweeps,
multi-norm errors and log-log slope fits."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ks as ksmod
from . import tfw as tfwmod
from .spectral import ecut_from_cutoff, sobolev_norm

NORM_LABELS = {1.0: "H1", 0.0: "L2", -1.0: "Hm1"}


def norm_label(s: float) -> str:
    return NORM_LABELS.get(float(s), f"H{s:g}".replace("-", "m"))


class StudyError(RuntimeError):
    def __init__(self, message: str, report: "ConvergenceReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SlopeFit:
    exponent: float
    intercept: float
    residual: float
    points: int

    def __str__(self) -> str:
        return f"{self.exponent:.4f} (log-intercept {self.intercept:.4f}, {self.points} points)"


def fit_slope(points) -> SlopeFit:
    """Least-squares line through ``(log x, log y)``."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError("need at least three (x, y) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("slope fits need finite positive values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    r = ly - A @ coef
    return SlopeFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(r * r))), len(pts))


@dataclass
class ErrorRecord:
    n_c: int
    e_c: float
    field_errors: dict  # norm label -> error
    eigenvalue_errors: list
    energy_gap: float  # I_{N_c} - I_ref (signed)
    n_g: int | None = None

    def row(self, labels: Sequence[str], n_eig: int) -> list:
        eig = list(self.eigenvalue_errors) + [math.nan] * (n_eig - len(self.eigenvalue_errors))
        return ([self.n_c, self.e_c] + [self.field_errors[k] for k in labels] + eig[:n_eig]
                + [self.energy_gap])


@dataclass
class StudySpec:
    kind: str  # "tfw" or "ks"
    model: object
    cutoffs: Sequence[int]
    n_c_ref: int
    n_g_rule: object = "4nc+1"  # "4nc+1", "variational" (TFW), an int (fixed) or ("mult", a)
    norms: Sequence[float] = (1.0, 0.0, -1.0)
    seed: int = 0
    options: object = None
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in ("tfw", "ks"):
            raise ValueError("study kind must be 'tfw' or 'ks'")
        if self.n_c_ref < 2 * max(self.cutoffs):
            raise ValueError("reference cutoff must be at least twice the largest tested cutoff")
        m = getattr(self.model, "potential", None)
        mexp = getattr(m, "m", math.inf)
        for s in self.norms:
            if not (-mexp + 1.5 < s < mexp + 0.5):
                raise ValueError(f"norm index {s} outside the admissible range for m = {mexp}")

    def grid_for(self, n_c: int) -> int | None:
        r = self.n_g_rule
        if r == "variational":
            return None
        if r == "4nc+1":
            return 4 * n_c + 1
        if isinstance(r, (int, np.integer)):
            return int(r)
        if isinstance(r, tuple) and r[0] == "mult":
            n = int(math.ceil(r[1] * (4 * n_c + 1)))
            return n if n % 2 else n + 1
        raise ValueError(f"unknown grid rule {r!r}")


@dataclass
class ConvergenceReport:
    kind: str
    abscissa: str  # "Nc" or "Ng"
    cell_length: float
    records: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)
    norm_labels: list = field(default_factory=list)
    n_eig: int = 1

    def quantities(self) -> list[str]:
        q = [f"err_{k}" for k in self.norm_labels]
        q += [f"err_lambda_{i + 1}" for i in range(self.n_eig)]
        return q + ["err_energy"]

    def series(self, name: str):
        out = []
        for r in self.records:
            if name == "err_energy":
                y = abs(r.energy_gap)
            elif name.startswith("err_lambda_"):
                i = int(name.rsplit("_", 1)[1]) - 1
                y = r.eigenvalue_errors[i] if i < len(r.eigenvalue_errors) else math.nan
            else:
                y = r.field_errors[name[4:]]
            x = r.n_g if self.abscissa == "Ng" else r.n_c
            out.append((x, r.e_c, y))
        return out

    def _scale(self, name: str) -> float:
        ref = self.reference
        if name == "err_energy":
            return abs(ref.get("energy", math.inf))
        if name.startswith("err_lambda_"):
            i = int(name.rsplit("_", 1)[1]) - 1
            ev = ref.get("eigenvalues", [])
            return abs(ev[i]) if i < len(ev) else math.inf
        return ref.get("norms", {}).get(name[4:], math.inf)

    def slope(self, name: str, against: str = "Nc") -> SlopeFit:
        """Fit ``log err`` against ``log N_c`` (or ``E_c`` / ``N_g``).

        The smallest-abscissa point is dropped when its error exceeds 10% of
        the reference magnitude and at least three points remain.
        """
        pts = sorted(self.series(name), key=lambda t: t[0])
        if len(pts) >= 4 and pts[0][2] > 0.1 * self._scale(name):
            pts = pts[1:]
        col = 1 if against == "Ec" else 0
        return fit_slope([(p[col], p[2]) for p in pts])

    def slopes(self, against: str = "Nc") -> dict:
        out = {}
        for q in self.quantities():
            try:
                out[q] = self.slope(q, against)
            except ValueError:
                pass
        return out

    # -- output ------------------------------------------------------------

    def header(self) -> list[str]:
        h = ["Nc", "Ec"] + self.quantities()
        return (["Ng"] + h) if self.abscissa == "Ng" else h

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            row = r.row(self.norm_labels, self.n_eig)
            if self.abscissa == "Ng":
                row = [r.n_g] + row
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def slopes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "abscissa", "exponent", "intercept", "residual", "points"])
        axes = ["Ng"] if self.abscissa == "Ng" else ["Nc", "Ec"]
        for ax in axes:
            for q, f in self.slopes(ax).items():
                w.writerow([q, ax, _fmt(f.exponent), _fmt(f.intercept), _fmt(f.residual), f.points])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "convergence") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.csv", out / f"{stem}_slopes.csv"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.slopes_csv())
        for q in self.quantities():
            p = out / f"{stem}_{q}.dat"
            lines = [f"{_fmt(x)} {_fmt(y)}" for x, _, y in self.series(q)]
            p.write_text("\n".join(lines) + "\n")
            paths.append(p)
        return paths


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# solving and comparing


def _solve(kind: str, model, n_c: int, n_g, options, initial=None):
    if kind == "tfw":
        opts = options or tfwmod.TFWOptions()
        if initial is not None:
            opts = tfwmod.TFWOptions(**{**opts.__dict__, "initial": initial})
        return tfwmod.solve_tfw(model, n_c, n_g, opts)
    return ksmod.scf_solve(model, n_c, n_g, options)


def _reference_summary(kind: str, state, norms) -> dict:
    if kind == "tfw":
        f = state.v
        return {"energy": state.energy, "eigenvalues": [state.lam],
                "norms": {norm_label(s): sobolev_norm(f, s) for s in norms}}
    o = state.orbitals
    return {"energy": state.energy, "eigenvalues": list(state.eigenvalues),
            "norms": {norm_label(s): o.norm(s) for s in norms}}


def compare(kind: str, state, ref, norms) -> tuple[dict, list, float]:
    """Field errors (per norm), eigenvalue errors and the signed energy gap."""
    if kind == "tfw":
        m = ref.v.modes
        v = state.v.to(m)
        if v.inner(ref.v) < 0:
            v = -v
        d = v - ref.v
        errs = {norm_label(s): sobolev_norm(d, s) for s in norms}
        eig = [abs(state.lam - ref.lam)]
    else:
        m = ref.orbitals.modes
        aligned = ksmod.align(state.orbitals.to(m), ref.orbitals)
        d = aligned - ref.orbitals
        errs = {norm_label(s): d.norm(s) for s in norms}
        eig = list(np.abs(np.sort(state.eigenvalues) - np.sort(ref.eigenvalues)))
    return errs, eig, state.energy - ref.energy


def run_study(spec: StudySpec) -> ConvergenceReport:
    """Solve at ``n_c_ref`` once, then at every tested cutoff, and compare."""
    labels = [norm_label(s) for s in spec.norms]
    L = spec.model.cell.L
    n_eig = 1 if spec.kind == "tfw" else spec.model.n_pairs
    report = ConvergenceReport(spec.kind, "Nc", L, norm_labels=labels, n_eig=n_eig)
    try:
        ref = _solve(spec.kind, spec.model, spec.n_c_ref, spec.grid_for(spec.n_c_ref), spec.options)
    except Exception as e:
        raise StudyError(f"reference solve failed: {e}", report) from e
    report.reference = _reference_summary(spec.kind, ref, spec.norms)

    def one(n_c: int):
        st = _solve(spec.kind, spec.model, n_c, spec.grid_for(n_c), spec.options)
        errs, eig, gap = compare(spec.kind, st, ref, spec.norms)
        return ErrorRecord(n_c, ecut_from_cutoff(n_c, L), errs, eig, gap, spec.grid_for(n_c))

    cutoffs = sorted(spec.cutoffs)
    if spec.jobs > 1:
        with ThreadPoolExecutor(spec.jobs) as ex:
            futures = [ex.submit(one, n) for n in cutoffs]
            for n, fu in zip(cutoffs, futures):
                try:
                    report.records.append(fu.result())
                except Exception as e:
                    raise StudyError(f"solve at N_c = {n} failed: {e}", report) from e
    else:
        for n in cutoffs:
            try:
                report.records.append(one(n))
            except Exception as e:
                raise StudyError(f"solve at N_c = {n} failed: {e}", report) from e
    return report


def ng_study(kind: str, model, n_c: int, n_g_list: Sequence[int], options=None,
             norms: Sequence[float] = (1.0, 0.0, -1.0)) -> ConvergenceReport:
    """Pseudospectral solutions at fixed ``n_c`` for each grid; reference = largest grid.

    Solves run from the coarsest grid upward, each warm-started from the
    previous solution (TFW).
    """
    grids = sorted(set(int(g) for g in n_g_list))
    for g in grids:
        if g % 2 == 0 or g < 4 * n_c + 1:
            raise ValueError("every N_g must be odd and >= 4*N_c+1")
    labels = [norm_label(s) for s in norms]
    n_eig = 1 if kind == "tfw" else model.n_pairs
    report = ConvergenceReport(kind, "Ng", model.cell.L, norm_labels=labels, n_eig=n_eig)
    states = {}
    prev = None
    for g in grids:
        try:
            st = _solve(kind, model, n_c, g, options, initial=prev.v if (kind == "tfw" and prev) else None)
        except Exception as e:
            raise StudyError(f"solve at N_g = {g} failed: {e}", report) from e
        states[g] = prev = st
    ref = states[grids[-1]]
    report.reference = _reference_summary(kind, ref, norms)
    for g in grids[:-1]:
        errs, eig, gap = compare(kind, states[g], ref, norms)
        report.records.append(ErrorRecord(n_c, ecut_from_cutoff(n_c, model.cell.L), errs, eig, gap, g))
    if len(grids) == 1:
        report.records.append(ErrorRecord(
            n_c, ecut_from_cutoff(n_c, model.cell.L), {k: 0.0 for k in labels}, [0.0] * n_eig, 0.0, grids[0]))
    return report


def monotone_within(values: Sequence[float], slack: float = 0.05) -> bool:
    """Non-increasing up to a relative slack."""
    v = list(values)
    return all(b <= a * (1.0 + slack) for a, b in zip(v, v[1:]))
