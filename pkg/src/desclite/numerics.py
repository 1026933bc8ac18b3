"""Dense float64 matrix helpers and a cyclic-Jacobi symmetric eigensolver.

Matrices are plain 2-D float64 numpy arrays (row-major). Everything here is
pure: inputs are never mutated and results depend only on the arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class EigenDecomposition:
    """Full symmetric spectrum, eigenvalues sorted descending.

    eigenvectors holds one orthonormal eigenvector per column, aligned with
    eigenvalues.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


def l2_distance(x, y) -> float:
    """Euclidean distance between two equal-length vectors."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"l2_distance: lengths differ, {x.shape[0]} vs {y.shape[0]}")
    return float(np.linalg.norm(x - y))


def pairwise_distance_matrix(a, b) -> np.ndarray:
    """All-pairs Euclidean distances between rows of `a` and rows of `b`.

    Uses the expanded form |a|^2 + |b|^2 - 2ab^T; cancellation can push tiny
    squared distances below zero, so values are clamped at 0 before the sqrt.
    When both arguments are the same array the diagonal is exactly zero.
    """
    same = a is b
    a = as_matrix(a, "a")
    b = a if same else as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_distance_matrix: column counts differ, {a.shape[1]} vs {b.shape[1]}"
        )
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    if same:
        np.fill_diagonal(sq, 0.0)
    return np.sqrt(sq)


def sym_eigen(a, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as (A + A^T)/2 first and must be symmetric to
    within 1e-9. Convergence: max off-diagonal magnitude below 1e-12 * |A|_F.

    Raises NumericError if `max_sweeps` sweeps do not converge.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise ShapeError(f"sym_eigen: matrix must be square, got {a.shape}")
    if n and np.abs(a - a.T).max() > 1e-9:
        raise ShapeError("sym_eigen: matrix is not symmetric within 1e-9")
    s = (a + a.T) / 2.0
    v = np.eye(n)
    fro = np.linalg.norm(s)
    if n <= 1 or fro == 0.0:
        return _sorted_eigen(np.diag(s).copy(), v)
    thresh = JACOBI_TOL * fro
    for _ in range(max_sweeps):
        off = np.abs(np.triu(s, 1)).max()
        if off < thresh:
            vals = np.diag(s).copy()
            return _sorted_eigen(vals, v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = s[p, q]
                if abs(apq) < thresh:
                    continue
                theta = (s[q, q] - s[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0.0 else np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                _rotate(s, v, p, q, c, sn)
    raise NumericError(
        f"sym_eigen: no convergence after {max_sweeps} sweeps (n={n})"
    )


def _rotate(s: np.ndarray, v: np.ndarray, p: int, q: int, c: float, sn: float) -> None:
    # similarity transform J^T S J restricted to rows/cols p and q
    sp = s[:, p].copy()
    sq = s[:, q].copy()
    s[:, p] = c * sp - sn * sq
    s[:, q] = sn * sp + c * sq
    rp = s[p, :].copy()
    rq = s[q, :].copy()
    s[p, :] = c * rp - sn * rq
    s[q, :] = sn * rp + c * rq
    vp = v[:, p].copy()
    vq = v[:, q].copy()
    v[:, p] = c * vp - sn * vq
    v[:, q] = sn * vp + c * vq


def _sorted_eigen(vals: np.ndarray, vecs: np.ndarray) -> EigenDecomposition:
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(eigenvalues=vals[order], eigenvectors=vecs[:, order])
