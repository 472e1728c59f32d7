"""Block preconditioned eigensolver for real fields stored as Fourier coefficients.

Vectors are rows of complex coefficient arrays with Hermitian symmetry, so
the natural inner product is ``Re <x, y>`` and all Rayleigh-Ritz matrices
are real symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class EigensolverError(RuntimeError):
    def __init__(self, message: str, values=None, vectors=None, residuals=None):
        super().__init__(message)
        self.values = values
        self.vectors = vectors
        self.residuals = residuals


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    iterations: int
    applications: int


def _gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.conj() @ b.T).real


def _orthonormalize(S: np.ndarray, AS: np.ndarray | None = None, drop: float = 1e-13):
    """Svqb: orthonormal rows spanning ``S`` (dropping near-dependent directions)."""
    G = _gram(S, S)
    d = np.sqrt(np.maximum(np.diag(G), 1e-300))
    Gs = G / d[:, None] / d[None, :]
    w, V = np.linalg.eigh(Gs)
    keep = w > drop * max(w[-1], 1e-300)
    T = (V[:, keep] / np.sqrt(w[keep])[None, :]) / d[:, None]
    out = T.T @ S
    return out, (T.T @ AS if AS is not None else None)


def lobpcg(apply: Callable[[np.ndarray], np.ndarray], X0: np.ndarray, nev: int,
           precond: Callable[[np.ndarray], np.ndarray] | None = None, tol: float = 1e-10,
           max_iter: int = 500) -> EigenResult:
    """Lowest ``nev`` eigenpairs of the symmetric operator ``apply``.

    ``X0`` holds ``>= nev`` starting rows; the extra rows act as guard
    vectors.  Converged when every wanted residual ``||A x - theta x||`` is
    ``<= tol``.  Converged directions stop contributing search vectors
    (soft locking) but stay in the Rayleigh-Ritz basis.
    """
    precond = precond or (lambda r: r)
    X, _ = _orthonormalize(np.array(X0, dtype=complex))
    nb = X.shape[0]
    if nb < nev:
        raise ValueError("starting block is rank deficient")
    AX = apply(X)
    napp = nb
    H = _gram(X, AX)
    theta, C = np.linalg.eigh(0.5 * (H + H.T))
    X, AX = C.T @ X, C.T @ AX
    P = AP = None
    it = 0
    res = np.full(nb, np.inf)
    while True:
        R = AX - theta[:, None] * X
        res = np.linalg.norm(R, axis=1)
        if np.all(res[:nev] <= tol):
            break
        if it >= max_iter:
            raise EigensolverError(
                f"eigensolver did not converge in {max_iter} iterations "
                f"(max wanted residual {res[:nev].max():.3e})", theta[:nev], X[:nev], res[:nev])
        it += 1
        active = res > tol
        active[nev:] = True  # guards keep moving
        W = precond(R[active])
        W = W - (W.conj() @ X.T).real @ X
        W, _ = _orthonormalize(W)
        if W.shape[0] == 0:
            break
        AW = apply(W)
        napp += W.shape[0]
        blocks = [X, W]
        ablocks = [AX, AW]
        if P is not None and P.shape[0]:
            blocks.append(P)
            ablocks.append(AP)
        S = np.concatenate(blocks)
        AS = np.concatenate(ablocks)
        S, AS = _orthonormalize(S, AS)
        Hs = _gram(S, AS)
        theta_all, C = np.linalg.eigh(0.5 * (Hs + Hs.T))
        C = C[:, :nb]
        theta = theta_all[:nb]
        Xn, AXn = C.T @ S, C.T @ AS
        # new search directions: the components outside the old X
        Cp = C - (_gram(S, X) @ (_gram(X, S) @ C))
        P, AP = Cp.T @ S, Cp.T @ AS
        P, AP = _orthonormalize(P, AP, drop=1e-10) if P.shape[0] else (P, AP)
        X, AX = Xn, AXn
    return EigenResult(theta[:nev].copy(), X[:nev].copy(), res[:nev].copy(), it, napp)
