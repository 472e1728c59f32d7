"""``pwdft`` command line: solves, convergence studies and the self-check suite.

Exit status: 0 on success, 1 when a solver fails, 2 for configuration or
usage errors.  Failures leave ``error.json`` in the output directory.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import fieldio, harness
from . import ks as ksmod
from . import potentials as pt
from . import spectral as sp
from . import tfw as tfwmod
from .eigensolver import EigensolverError

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


def _num(x) -> str:
    return format(float(x), ".17g")


def to_json(obj, indent: int = 0) -> str:
    """JSON with every float printed to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float) or hasattr(obj, "dtype"):
        if hasattr(obj, "dtype") and obj.dtype.kind in "iub":
            return to_json(obj.item(), indent)
        x = float(obj)
        return _num(x) if math.isfinite(x) else json.dumps(str(x))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(to_json(v, indent + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- building objects from a parsed config -----------------------------------


def build_potential(cfg: cfgmod.RunConfig, cell: sp.Cell) -> pt.LocalPotential:
    parts = []
    for sec in cfg.potentials:
        v = sec.values
        kind = v["kind"]
        if kind == "synthetic":
            parts.append(pt.synth_potential(cell, v["m"], v["C"], v["n_max"], v.get("seed", 0)))
        elif kind == "gaussian":
            parts.append(pt.gaussian_potential(cell, v["depth"], v["width"], v["centers"], v.get("m", 5.0)))
        elif kind == "compact":
            parts.append(pt.CompactWell(cell, v["depth"], v["radius"], v["centers"], v.get("p", 3)))
        else:
            parts.append(pt.ZeroPotential(cell))
    if not parts:
        return pt.ZeroPotential(cell)
    return parts[0] if len(parts) == 1 else pt.SumPotential(parts)


def build_model(cfg: cfgmod.RunConfig, kind: str):
    cell = sp.Cell(cfg.L)
    V = build_potential(cfg, cell)
    mv = cfg.section("model").values
    if kind == "tfw":
        extra = {k: mv[k] for k in ("c_w", "c_tf") if k in mv}
        return tfwmod.TFWModel(cell, mv["N"], V, **extra)
    projs = tuple(pt.smooth_projector(cell, s.values["amplitude"], s.values["kappa"], s.values["center"],
                                      s.values["decay"], s.values["n_max"]) for s in cfg.projectors)
    core = None
    if "core" in cfg.sections:
        c = cfg.sections["core"].values
        core = pt.core_density(cell, c["charge"], c["width"], c["centers"])
    xc = pt.XCFunctional()
    if mv.get("xc") == "x-alpha":
        xc = pt.x_alpha(mv.get("c_x", pt.X_ALPHA_DIRAC))
    return ksmod.KSModel(cell, int(mv["N"]), V, pt.ProjectorSet(projs), core, xc)


def build_options(cfg: cfgmod.RunConfig, kind: str, seed: int | None):
    s = cfg.section("solver").values
    if kind == "tfw":
        o = tfwmod.TFWOptions()
        for k in ("tol", "max_iter", "newton"):
            if k in s:
                setattr(o, k, s[k])
        o.seed = seed if seed is not None else s.get("seed")
        return o
    o = ksmod.SCFOptions()
    for k in ("tol", "max_iter", "mixing", "beta", "depth"):
        if k in s:
            setattr(o, k, s[k])
    o.seed = seed if seed is not None else s.get("seed", 0)
    return o


def _grid_rule(cfg: cfgmod.RunConfig, kind: str):
    rule = cfg.value("study", "grid_rule")
    if rule is None:
        return "variational" if kind == "tfw" else "4nc+1"
    return rule


def _norms(cfg: cfgmod.RunConfig):
    return tuple(cfg.value("study", "norms", [1.0, 0.0, -1.0]))


# -- commands -------------------------------------------------------------------


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text, encoding="utf-8")
    return p


def cmd_solve_tfw(cfg, out: Path, seed, quiet=False) -> dict:
    model = build_model(cfg, "tfw")
    st = tfwmod.solve_tfw(model, cfg.n_c, cfg.n_g, build_options(cfg, "tfw", seed))
    rec = {"command": "solve-tfw", "N_c": cfg.n_c, "N_g": cfg.n_g, **st.record()}
    _write(out, "result.json", to_json(rec) + "\n")
    fieldio.save_field(out / "u.pwf", st.v, cfg.n_g or 0)
    if not quiet:
        for k in ("energy", "lambda", "residual"):
            print(f"{k} = {_num(rec[k])}")
        print(f"iterations = {rec['iterations']}")
    return rec


def cmd_solve_ks(cfg, out: Path, seed, quiet=False) -> dict:
    model = build_model(cfg, "ks")
    st = ksmod.scf_solve(model, cfg.n_c, cfg.n_g, build_options(cfg, "ks", seed))
    rec = {"command": "solve-ks", "N_c": cfg.n_c, "N_g": st.n_g, **st.record()}
    _write(out, "result.json", to_json(rec) + "\n")
    for i, phi in enumerate(st.orbitals.fields()):
        fieldio.save_field(out / f"orbital_{i + 1}.pwf", phi, st.n_g or 0)
    fieldio.save_field(out / "density.pwf", st.density, st.n_g or 0)
    if not quiet:
        print(f"energy = {_num(st.energy)}")
        for i, e in enumerate(st.eigenvalues, 1):
            print(f"eigenvalue_{i} = {_num(e)}")
        print(f"scf_residual = {_num(st.scf_residual)}")
        print(f"iterations = {st.iterations}")
    return rec


def _study_finish(report: harness.ConvergenceReport, out: Path, stem: str, quiet: bool) -> dict:
    report.write(out, stem)
    if not quiet:
        sys.stdout.write(report.to_csv())
        sys.stdout.write("\n")
        sys.stdout.write(report.slopes_csv())
    return {"records": len(report.records)}


def cmd_converge(cfg, out: Path, seed, quiet=False) -> dict:
    kind = cfg.value("study", "model")
    spec = harness.StudySpec(kind, build_model(cfg, kind), cfg.value("study", "cutoffs"),
                             cfg.value("study", "reference"), _grid_rule(cfg, kind), _norms(cfg),
                             seed or 0, build_options(cfg, kind, seed), cfg.value("study", "jobs", 1))
    return _study_finish(harness.run_study(spec), out, "convergence", quiet)


def cmd_ng_study(cfg, out: Path, seed, quiet=False) -> dict:
    kind = cfg.value("study", "model")
    rep = harness.ng_study(kind, build_model(cfg, kind), cfg.n_c, cfg.value("study", "grids"),
                           build_options(cfg, kind, seed), _norms(cfg))
    return _study_finish(rep, out, "grid", quiet)


def smoke_run(text: str, out: Path) -> float:
    """Run a config at reduced size: solves as given, studies as one solve at
    their smallest cutoff or grid.  Returns the energy."""
    cfg = cfgmod.parse_config(text)
    cmd = cfg.command
    if cmd == "selfcheck":
        return 0.0
    if cmd in ("converge", "ng-study"):
        kind = cfg.value("study", "model")
        model = build_model(cfg, kind)
        if cmd == "converge":
            n_c = min(cfg.value("study", "cutoffs"))
            spec = harness.StudySpec(kind, model, [n_c], 2 * n_c, _grid_rule(cfg, kind), _norms(cfg))
            n_g = spec.grid_for(n_c)
        else:
            n_c, n_g = cfg.n_c, min(cfg.value("study", "grids"))
        st = harness._solve(kind, model, n_c, n_g, build_options(cfg, kind, None))
        return st.energy
    fn = cmd_solve_tfw if cmd == "solve-tfw" else cmd_solve_ks
    return fn(cfg, out, None, quiet=True)["energy"]


def cmd_selfcheck(out: Path) -> int:
    from .selfcheck import run_checks

    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        checks = run_checks(lambda name, text: smoke_run(text, Path(tmp) / name))
    width = max(len(c.name) for c in checks)
    for c in checks:
        tol = "" if math.isinf(c.tolerance) else f"  (tol {c.tolerance:.0e})"
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {_num(c.value)}{tol}")
    rec = [{"check": c.name, "passed": bool(c.passed), "value": c.value,
            "tolerance": c.tolerance if math.isfinite(c.tolerance) else None} for c in checks]
    _write(out, "selfcheck.json", to_json(rec) + "\n")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_SOLVER


COMMANDS = {
    "solve-tfw": cmd_solve_tfw,
    "solve-ks": cmd_solve_ks,
    "converge": cmd_converge,
    "ng-study": cmd_ng_study,
}


def _error(out: Path, status: str, errors: list[dict]) -> None:
    for e in errors:
        where = f"line {e['line']}: " if e.get("line") else ""
        print(f"error: {where}{e['message']}", file=sys.stderr)
    try:
        _write(out, "error.json", to_json({"status": status, "errors": errors}) + "\n")
    except OSError:
        pass


def _threads(arg: int | None, cfg_value: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("PWDFT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise cfgmod.ConfigError([(0, f"PWDFT_THREADS must be an integer, got {env!r}")])
    return cfg_value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwdft", description="Planewave TFW and Kohn-Sham solvers.")
    p.add_argument("command", choices=cfgmod.COMMANDS)
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="FFT worker threads (fallback: PWDFT_THREADS)")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or Path("pwdft-out")
    try:
        if args.seed is not None and not 0 <= args.seed < 1 << 64:
            raise cfgmod.ConfigError([(0, "--seed must be an unsigned 64-bit integer")])
        if args.threads is not None and args.threads < 1:
            raise cfgmod.ConfigError([(0, "--threads must be positive")])
        if args.command == "selfcheck" and args.config is None:
            cfg = None
        else:
            if args.config is None:
                raise cfgmod.ConfigError([(0, f"{args.command} needs --config")])
            try:
                text = args.config.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError) as e:
                raise cfgmod.ConfigError([(0, f"cannot read {args.config}: {e}")])
            cfg = cfgmod.parse_config(text, args.command)
        if cfg is not None and args.out is None and cfg.value("run", "out"):
            out = Path(cfg.value("run", "out"))
        sp.set_threads(_threads(args.threads, cfg.value("run", "threads") if cfg else None))
    except cfgmod.ConfigError as e:
        _error(out, "config_error", e.records())
        return EXIT_CONFIG

    if args.command == "selfcheck":
        return cmd_selfcheck(out)
    seed = args.seed if args.seed is not None else cfg.value("run", "seed")
    try:
        COMMANDS[args.command](cfg, out, seed)
    except harness.StudyError as e:
        if e.report.records:
            e.report.write(out, "partial")
        _error(out, "solver_error", [{"message": str(e)}])
        return EXIT_SOLVER
    except (tfwmod.ConvergenceError, EigensolverError) as e:
        state = getattr(e, "state", None)
        rec = {"message": str(e)}
        if hasattr(state, "record"):
            rec["state"] = state.record()
        _error(out, "solver_error", [rec])
        return EXIT_SOLVER
    except ValueError as e:
        _error(out, "config_error", [{"message": str(e)}])
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
