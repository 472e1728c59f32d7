"""Run configuration files.

Grammar (one statement per line, UTF-8)::

    # comment            ; also "; comment"
    [section]
    key = value

Keys are case-sensitive.  Lists are comma separated; point lists (centres)
separate points with ``;`` and coordinates with spaces or commas inside a
point, e.g. ``centers = 4.3 5 5; 5.7 5 5``.  The sections ``potential`` and
``projector`` may be repeated (their contributions are summed); every other
section appears at most once.  All problems are collected and reported
together, each tagged with its line number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

COMMANDS = ("solve-tfw", "solve-ks", "converge", "ng-study", "selfcheck")
REPEATABLE = ("potential", "projector")


class ConfigError(ValueError):
    """Carries every problem found, as ``(line, message)`` pairs (line 0 = whole file)."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = sorted(errors)
        super().__init__("\n".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors))

    def records(self) -> list[dict]:
        return [{"line": ln, "message": msg} for ln, msg in self.errors]


# -- value converters ---------------------------------------------------------


def _int(s: str) -> int:
    return int(s.replace("_", ""), 0)


def _float(s: str) -> float:
    x = float(s)
    if not math.isfinite(x):
        raise ValueError("not a finite number")
    return x


def _bool(s: str) -> bool:
    t = s.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected a boolean")


def _list(conv):
    def f(s: str):
        items = [t.strip() for t in s.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        return [conv(t) for t in items]
    return f


def _point(s: str) -> list[float]:
    xs = [_float(t) for t in s.replace(",", " ").split()]
    if len(xs) != 3:
        raise ValueError("a point needs three coordinates")
    return xs


def _points(s: str) -> list[list[float]]:
    pts = [p for p in s.split(";") if p.strip()]
    if not pts:
        raise ValueError("empty point list")
    return [_point(p) for p in pts]


def _choice(*options):
    def f(s: str):
        if s not in options:
            raise ValueError("expected one of " + ", ".join(options))
        return s
    return f


def _u64(s: str) -> int:
    v = _int(s)
    if not 0 <= v < 1 << 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _grid_rule(s: str):
    if s in ("variational", "4nc+1"):
        return s
    if s.startswith("mult:"):
        a = _float(s[5:])
        if a < 1:
            raise ValueError("grid multiplier must be at least 1")
        return ("mult", a)
    return _int(s)


_TYPE_NAMES = {_int: "integer", _float: "number", _bool: "boolean", _u64: "unsigned integer"}

SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "run": {"command": _choice(*COMMANDS), "seed": _u64, "out": str, "threads": _int},
    "cell": {"L": _float},
    "basis": {"N_c": _int, "E_c": _float, "N_g": _int},
    "model": {"N": _float, "c_w": _float, "c_tf": _float, "xc": _choice("none", "x-alpha"),
              "c_x": _float},
    "potential": {"kind": _choice("zero", "synthetic", "gaussian", "compact"), "m": _float,
                  "C": _float, "n_max": _int, "seed": _u64, "depth": _float, "width": _float,
                  "radius": _float, "p": _int, "centers": _points},
    "projector": {"amplitude": _float, "kappa": _float, "center": _point, "decay": _float,
                  "n_max": _int},
    "core": {"charge": _float, "width": _float, "centers": _points},
    "solver": {"tol": _float, "max_iter": _int, "seed": _u64, "newton": _bool,
               "mixing": _choice("anderson", "simple"), "beta": _float, "depth": _int},
    "study": {"model": _choice("tfw", "ks"), "cutoffs": _list(_int), "reference": _int, "grid_rule": _grid_rule,
              "grids": _list(_int), "norms": _list(_float), "jobs": _int},
}

_REQUIRED = {
    "potential": {"synthetic": ("m", "C", "n_max"), "gaussian": ("depth", "width", "centers"),
                  "compact": ("depth", "radius", "centers"), "zero": ()},
    "projector": ("amplitude", "kappa", "center", "decay", "n_max"),
    "core": ("charge", "width", "centers"),
}


@dataclass
class Section:
    name: str
    line: int
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)


@dataclass
class RunConfig:
    command: str | None
    sections: dict  # name -> Section (first occurrence)
    potentials: list  # Section list
    projectors: list
    text: str = ""

    def section(self, name: str) -> Section:
        return self.sections.get(name) or Section(name, 0)

    def value(self, section: str, key: str, default=None):
        return self.section(section).get(key, default)

    @property
    def L(self) -> float:
        return self.value("cell", "L")

    @property
    def n_c(self) -> int | None:
        return self.value("basis", "N_c")

    @property
    def n_g(self) -> int | None:
        return self.value("basis", "N_g")

    @property
    def seed(self) -> int:
        return self.value("run", "seed", 0)


def _split_lines(text: str):
    for i, raw in enumerate(text.splitlines(), 1):
        # ";" separates points inside values, so it only starts a comment at line start
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith(";"):
            continue
        yield i, line


def parse_config(text: str, command: str | None = None) -> RunConfig:
    """Parse and validate ``text``; raise :class:`ConfigError` listing every problem.

    ``command`` (a subcommand name) selects which sections are mandatory; a
    ``[run] command`` entry must agree with it.
    """
    errors: list[tuple[int, str]] = []
    sections: dict[str, Section] = {}
    repeated: dict[str, list[Section]] = {k: [] for k in REPEATABLE}
    cur: Section | None = None
    for ln, line in _split_lines(text):
        if line.startswith("["):
            if not line.endswith("]"):
                errors.append((ln, f"malformed section header {line!r}"))
                cur = None
                continue
            name = line[1:-1].strip()
            if name not in SCHEMA:
                errors.append((ln, f"unknown section [{name}]"))
                cur = None
                continue
            cur = Section(name, ln)
            if name in REPEATABLE:
                repeated[name].append(cur)
            elif name in sections:
                errors.append((ln, f"duplicate section [{name}] (first at line {sections[name].line})"))
            else:
                sections[name] = cur
            continue
        if "=" not in line:
            errors.append((ln, f"expected 'key = value', got {line!r}"))
            continue
        key, val = (t.strip() for t in line.split("=", 1))
        if cur is None:
            errors.append((ln, f"key {key!r} outside any known section"))
            continue
        conv = SCHEMA[cur.name].get(key)
        if conv is None:
            errors.append((ln, f"unknown key {key!r} in [{cur.name}]"))
            continue
        if key in cur.lines:
            errors.append((ln, f"duplicate key {key!r} in [{cur.name}]: lines {cur.lines[key]} and {ln}"))
            continue
        cur.lines[key] = ln
        try:
            cur.values[key] = conv(val)
        except ValueError as e:
            kind = _TYPE_NAMES.get(conv)
            msg = f"expected {kind}" if kind else str(e)
            errors.append((ln, f"bad value for {key!r}: {val!r} ({msg})"))

    cfg = RunConfig(None, sections, repeated["potential"], repeated["projector"], text)
    run_cmd = cfg.value("run", "command")
    if command is not None and run_cmd is not None and run_cmd != command:
        errors.append((cfg.section("run").lines["command"],
                       f"config is for {run_cmd!r} but {command!r} was requested"))
    cfg.command = command or run_cmd
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def _validate(cfg: RunConfig) -> list[tuple[int, str]]:
    errs: list[tuple[int, str]] = []
    cmd = cfg.command

    def at(section: str, key: str) -> int:
        s = cfg.sections.get(section)
        return s.lines.get(key, s.line) if s else 0

    def need(section: str, key: str):
        if cfg.value(section, key) is None:
            errs.append((at(section, key), f"missing [{section}] {key}"))

    if cmd is None:
        errs.append((0, "no command given"))
        return errs
    if cmd == "selfcheck":
        return errs

    need("cell", "L")
    L = cfg.L
    if L is not None and not L > 0:
        errs.append((at("cell", "L"), "L must be positive"))

    n_c, e_c = cfg.value("basis", "N_c"), cfg.value("basis", "E_c")
    if n_c is not None and e_c is not None:
        errs.append((at("basis", "E_c"), "give either N_c or E_c, not both"))
    if e_c is not None and L is not None and L > 0:
        if e_c < 0:
            errs.append((at("basis", "E_c"), "E_c must be nonnegative"))
        else:
            from .spectral import cutoff_from_ecut

            n_c = cfg.section("basis").values["N_c"] = cutoff_from_ecut(e_c, L)
    if n_c is not None and n_c < 0:
        errs.append((at("basis", "N_c"), "N_c must be nonnegative"))
    if cmd in ("solve-tfw", "solve-ks", "ng-study") and n_c is None:
        errs.append((at("basis", "N_c"), "missing [basis] N_c (or E_c)"))
    n_g = cfg.n_g
    if n_g is not None and n_c is not None and (n_g % 2 == 0 or n_g < 4 * n_c + 1):
        errs.append((at("basis", "N_g"), "N_g must be odd and ≥ 4*N_c+1"))

    kind = _model_kind(cfg)
    need("model", "N")
    N = cfg.value("model", "N")
    if N is not None:
        if kind == "ks" and (N != int(N) or N < 1):
            errs.append((at("model", "N"), "N (electron pairs) must be a positive integer"))
        if kind == "tfw" and N < 0:
            errs.append((at("model", "N"), "N (electron count) must be nonnegative"))
    for k in ("c_w", "c_tf"):
        v = cfg.value("model", k)
        if v is not None and not v > 0:
            errs.append((at("model", k), f"{k} must be positive"))
    if kind == "tfw":
        for k in ("xc", "c_x"):
            if cfg.value("model", k) is not None:
                errs.append((at("model", k), f"{k} applies only to Kohn-Sham runs"))
        if cfg.projectors:
            errs.append((cfg.projectors[0].line, "projectors apply only to Kohn-Sham runs"))
        if "core" in cfg.sections:
            errs.append((cfg.sections["core"].line, "a core density applies only to Kohn-Sham runs"))

    for sec in cfg.potentials:
        pk = sec.get("kind")
        if pk is None:
            errs.append((sec.line, "missing [potential] kind"))
            continue
        for key in _REQUIRED["potential"][pk]:
            if key not in sec.values:
                errs.append((sec.line, f"missing {key!r} for {pk} potential"))
        allowed = set(_REQUIRED["potential"][pk]) | {"kind"}
        allowed |= {"synthetic": {"seed"}, "gaussian": {"m"}, "compact": {"p"}, "zero": set()}[pk]
        for key, ln in sec.lines.items():
            if key not in allowed:
                errs.append((ln, f"key {key!r} does not apply to a {pk} potential"))
        if pk == "synthetic" and "m" in sec.values and not sec.values["m"] > 3:
            errs.append((sec.lines["m"], "decay exponent m must exceed 3"))
        if pk == "synthetic" and sec.get("C", 0) < 0:
            errs.append((sec.lines["C"], "C must be nonnegative"))
        if pk == "gaussian" and "width" in sec.values and L:
            if not 0 < sec.values["width"] < L:
                errs.append((sec.lines["width"], "width must lie in (0, L)"))
        if pk == "compact" and "radius" in sec.values and L:
            if not 0 < sec.values["radius"] < L / 2:
                errs.append((sec.lines["radius"], "radius must lie in (0, L/2)"))
        if pk == "compact" and sec.get("p", 3) < 2:
            errs.append((sec.lines["p"], "p must be an integer >= 2"))
    for sec in cfg.projectors + ([cfg.sections["core"]] if "core" in cfg.sections else []):
        for key in _REQUIRED[sec.name]:
            if key not in sec.values:
                errs.append((sec.line, f"missing {key!r} in [{sec.name}]"))

    tol = cfg.value("solver", "tol")
    if tol is not None and not tol > 0:
        errs.append((at("solver", "tol"), "tol must be positive"))
    mi = cfg.value("solver", "max_iter")
    if mi is not None and mi < 1:
        errs.append((at("solver", "max_iter"), "max_iter must be positive"))
    beta = cfg.value("solver", "beta")
    if beta is not None and not 0 < beta <= 1:
        errs.append((at("solver", "beta"), "beta must lie in (0, 1]"))

    if cmd in ("converge", "ng-study"):
        need("study", "model")
    if cmd == "converge":
        need("study", "cutoffs")
        need("study", "reference")
        cuts, ref = cfg.value("study", "cutoffs"), cfg.value("study", "reference")
        if cuts and any(c < 0 for c in cuts):
            errs.append((at("study", "cutoffs"), "cutoffs must be nonnegative"))
        if cuts and ref is not None and ref < 2 * max(cuts):
            errs.append((at("study", "reference"), "reference must be at least twice the largest cutoff"))
        rule = cfg.value("study", "grid_rule")
        if rule == "variational" and kind == "ks":
            errs.append((at("study", "grid_rule"), "the variational grid rule applies only to TFW"))
        if isinstance(rule, int) and cuts and ref is not None:
            if rule % 2 == 0 or rule < 4 * max(ref, *cuts) + 1:
                errs.append((at("study", "grid_rule"), "N_g must be odd and ≥ 4*N_c+1"))
    if cmd == "ng-study":
        need("study", "grids")
        grids = cfg.value("study", "grids")
        if grids and n_c is not None:
            if any(g % 2 == 0 or g < 4 * n_c + 1 for g in grids):
                errs.append((at("study", "grids"), "N_g must be odd and ≥ 4*N_c+1"))
    norms = cfg.value("study", "norms")
    if norms is not None:
        ms = [s.get("m", math.inf) if s.get("kind") in ("synthetic", "gaussian") else
              (s.get("p", 3) + 2 if s.get("kind") == "compact" else math.inf) for s in cfg.potentials]
        m = min(ms, default=math.inf)
        bad = [s for s in norms if not (-m + 1.5 < s < m + 0.5)]
        if bad:
            errs.append((at("study", "norms"), f"norm indices {bad} outside the admissible range for m = {m}"))
    jobs = cfg.value("study", "jobs")
    if jobs is not None and jobs < 1:
        errs.append((at("study", "jobs"), "jobs must be positive"))
    threads = cfg.value("run", "threads")
    if threads is not None and threads < 1:
        errs.append((at("run", "threads"), "threads must be positive"))
    return errs


def _model_kind(cfg: RunConfig) -> str:
    if cfg.command == "solve-tfw":
        return "tfw"
    if cfg.command == "solve-ks":
        return "ks"
    return cfg.value("study", "model", "ks")
