"""Binary field dumps.

``PWF1`` (Fourier field)::

    b"PWF1" | u32 N_c | u32 N_g | f64 L | u64 count | count x (f64 re, f64 im)

little-endian, coefficients in lexicographic order of the integer triple.
Ball fields store ``N_c`` (and ``N_g = 0`` unless a grid is attached); box
fields store ``N_c = 0`` and their odd ``N_g``.

``PWG1`` (grid field)::

    b"PWG1" | u32 0 | u32 N_g | f64 L | u64 N_g^3 | N_g^3 x f64

values in row-major ``[i, j, l]`` order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .spectral import Cell, FourierField, GridField, ball, box

_HEADER = struct.Struct("<4sIIdQ")


def dumps_field(f: FourierField, n_g: int = 0) -> bytes:
    m = f.modes
    if m.kind == "ball":
        head = _HEADER.pack(b"PWF1", m.size, n_g, m.cell.L, len(m))
    else:
        head = _HEADER.pack(b"PWF1", 0, m.size, m.cell.L, len(m))
    body = np.empty(2 * len(m), dtype="<f8")
    body[0::2] = f.coeffs.real
    body[1::2] = f.coeffs.imag
    return head + body.tobytes()


def loads_field(data: bytes) -> FourierField:
    magic, n_c, n_g, L, count = _HEADER.unpack_from(data, 0)
    if magic != b"PWF1":
        raise ValueError(f"not a PWF1 dump (magic {magic!r})")
    cell = Cell(L)
    if n_c == 0 and n_g > 0 and count == n_g**3:
        modes = box(cell, n_g)
    else:
        modes = ball(cell, n_c)
    if count != len(modes):
        raise ValueError(f"coefficient count {count} does not match the index set ({len(modes)})")
    expected = _HEADER.size + 16 * count
    if len(data) != expected:
        raise ValueError(f"PWF1 payload has {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return FourierField(modes, body[0::2] + 1j * body[1::2], copy=False)


def dumps_grid(g: GridField) -> bytes:
    n = g.n_g
    head = _HEADER.pack(b"PWG1", 0, n, g.cell.L, n**3)
    return head + np.ascontiguousarray(g.values, dtype="<f8").tobytes()


def loads_grid(data: bytes) -> GridField:
    magic, _, n_g, L, count = _HEADER.unpack_from(data, 0)
    if magic != b"PWG1":
        raise ValueError(f"not a PWG1 dump (magic {magic!r})")
    if count != n_g**3 or len(data) != _HEADER.size + 8 * count:
        raise ValueError("PWG1 size mismatch")
    v = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n_g, n_g, n_g)
    return GridField(Cell(L), v)


def save_field(path, f: FourierField, n_g: int = 0) -> None:
    Path(path).write_bytes(dumps_field(f, n_g))


def load_field(path) -> FourierField:
    return loads_field(Path(path).read_bytes())


def save_grid(path, g: GridField) -> None:
    Path(path).write_bytes(dumps_grid(g))


def load_grid(path) -> GridField:
    return loads_grid(Path(path).read_bytes())
