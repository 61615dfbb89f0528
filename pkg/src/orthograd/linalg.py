"""Dense matrix kernels: one-sided Jacobi SVD and the nearest orthonormal matrix.

Matrices are plain 2-D numpy arrays. Every decomposition runs in float64 and
results are cast back to the input dtype by the callers that need it.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "DegenerateInputError",
    "SvdConvergenceError",
    "SvdResult",
    "as_matrix",
    "cosine",
    "frobenius_norm",
    "nearest_orthonormal",
    "normalise_columns",
    "svd",
]

JACOBI_TOL = 1e-12
MAX_SWEEPS = 30
COLUMN_EPS = 1e-12


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for its input (zero matrix, zero vector)."""


class SvdConvergenceError(ArithmeticError):
    """Jacobi sweeps hit the sweep limit before the Gram matrix became diagonal."""

    def __init__(self, sweeps: int, off_diagonal: float):
        super().__init__(
            f"Jacobi SVD did not converge in {sweeps} sweeps "
            f"(max relative off-diagonal {off_diagonal:.3e})"
        )
        self.sweeps = sweeps
        self.off_diagonal = off_diagonal


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # (P, k)
    sigma: np.ndarray  # (k,), non-increasing
    vt: np.ndarray  # (k, N)
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(g, *, dtype=np.float64) -> np.ndarray:
    """Validate external input as a finite, non-empty 2-D matrix."""
    a = np.asarray(g, dtype=dtype)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"matrix must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def _column_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=0))


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament ordering: n-1 (or n) rounds of disjoint column pairs covering every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        pairs.sort()
        if pairs:
            arr = np.array(pairs, dtype=np.intp)
            rounds.append((arr[:, 0].copy(), arr[:, 1].copy()))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_tall(w: np.ndarray, tol: float, max_sweeps: int):
    """Hestenes one-sided Jacobi, in place on `w` holding the matrix columns as rows.

    Returns the accumulated right rotations (as rows) and the number of sweeps used.
    """
    n, m = w.shape
    # rotate the columns and the accumulated V in one array: [w | v]
    wv = np.concatenate([w, np.eye(n)], axis=1)
    rounds = _round_robin(n)
    # columns at round-off level relative to the whole matrix are already "zero"
    negligible = (np.finfo(np.float64).eps * np.sqrt(np.einsum("ij,ij->", w, w))) ** 2
    off = 0.0
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for p, q in rounds:
            rp = wv[p]
            rq = wv[q]
            wp = rp[:, :m]
            wq = rq[:, :m]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            scale = np.sqrt(alpha) * np.sqrt(beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where((alpha > negligible) & (beta > negligible), np.abs(gamma) / scale, 0.0)
            active = rel > tol
            if not active.any():
                continue
            rotated = True
            off = max(off, float(rel.max()))
            if not active.all():
                p, q = p[active], q[active]
                rp, rq = rp[active], rq[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            wv[p] = c * rp - s * rq
            wv[q] = s * rp + c * rq
        if not rotated:
            w[:] = wv[:, :m]
            return wv[:, m:], sweep
    raise SvdConvergenceError(max_sweeps, off)


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill the columns of `u` listed in `missing` with an orthonormal completion.

    Candidates are standard basis vectors; the one with the largest residual after
    projecting out the columns already fixed is taken, so the choice is deterministic.
    """
    known = np.ones(u.shape[1], dtype=bool)
    known[missing] = False
    for j in missing:
        basis = u[:, known]
        # ||e_k - B B^T e_k||^2 = 1 - ||B[k]||^2, so pick the row of B with least weight
        k = int(np.argmin(np.einsum("ij,ij->i", basis, basis)))
        col = -(basis @ basis[k])
        col[k] += 1.0
        col -= basis @ (basis.T @ col)
        u[:, j] = col / np.linalg.norm(col)
        known[j] = True


def svd(g, *, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD by cyclic one-sided Jacobi rotations.

    The sweep order is a fixed round-robin schedule, so identical input bits give
    identical output bits. Singular values that are zero to working precision get
    their left vectors from a deterministic orthonormal completion; no truncation.

    Raises SvdConvergenceError if `max_sweeps` sweeps leave a relative off-diagonal
    Gram entry above `tol`.
    """
    a = as_matrix(g)
    rows, cols = a.shape
    if cols > rows:
        res = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=res.vt.T.copy(), sigma=res.sigma, vt=res.u.T.copy(), sweeps=res.sweeps)

    work = np.array(a.T, order="C")  # always a copy; rotated in place
    vrows, sweeps = _jacobi_tall(work, tol, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->i", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[order].T
    vt = vrows[order]

    cutoff = max(rows, cols) * np.finfo(np.float64).eps * (sigma[0] if sigma.size else 0.0)
    small = sigma <= cutoff
    u = np.zeros_like(work)
    big = ~small
    u[:, big] = work[:, big] / sigma[big]
    sigma = np.where(small, 0.0, sigma)
    if small.any():
        _complete_basis(u, np.flatnonzero(small))
    return SvdResult(u=u, sigma=sigma, vt=vt, sweeps=sweeps)


def nearest_orthonormal(g) -> np.ndarray:
    """Closest matrix with orthonormal columns (rows, when wide) in Frobenius norm: U Vᵀ.

    Computed in float64; the result has the dtype of `g` when `g` is a float array.
    """
    arr = np.asarray(g)
    a = as_matrix(arr)
    if not np.any(a):
        raise DegenerateInputError("cannot orthonormalise an all-zero matrix")
    res = svd(a)
    out = res.u @ res.vt
    if np.issubdtype(arr.dtype, np.floating):
        out = out.astype(arr.dtype, copy=False)
    return out


def normalise_columns(g, eps: float = COLUMN_EPS) -> np.ndarray:
    """Scale each column to unit Euclidean norm; columns with norm <= eps pass through."""
    a = np.asarray(g)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    norms = _column_norms(a)
    return a / np.where(norms > eps, norms, 1.0)


def frobenius_norm(g) -> float:
    a = np.asarray(g, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def cosine(x, y) -> float:
    """x·y / (‖x‖ ‖y‖), clamped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("cosine undefined for a zero-norm vector")
    return float(np.clip(np.dot(x / nx, y / ny), -1.0, 1.0))
