"""Dense real linear algebra for the attack: QR, SVD, rank, projections.

Everything operates on 2-D float64 numpy arrays in row-major order.  The
routines here are deliberately self-contained (Householder QR, one-sided
Jacobi SVD) because the attack's correctness arguments lean on their exact
behaviour at desk scale (matrices up to a few hundred rows/columns); no
LAPACK-grade blocking is needed or wanted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_RANK_TOL = 1e-8

_JACOBI_EPS = 1e-13
_JACOBI_MAX_SWEEPS = 60


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DomainError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} contains non-finite entries")
    return m


def _as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class QrFactorization:
    """Thin QR: q has orthonormal columns, r is upper triangular, q @ r = a."""

    q: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD: u @ diag(singular_values) @ v.T = a, sigma non-increasing.

    Columns of u belonging to exactly-zero singular values are zero vectors;
    v is always orthogonal.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray


def _householder_vectors(a: np.ndarray):
    """Factor a = QR in place; returns (reflectors, r)."""
    m, n = a.shape
    k = min(m, n)
    r = a.copy()
    reflectors = []
    for j in range(k):
        x = r[j:, j].copy()
        norm_x = np.sqrt(np.dot(x, x))
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0] if x[0] != 0.0 else 1.0)
        vnorm2 = np.dot(v, v)
        if vnorm2 == 0.0:
            reflectors.append(None)
            continue
        v /= np.sqrt(vnorm2)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)
    return reflectors, r


def qr_decompose(a) -> QrFactorization:
    """Thin Householder QR with a non-negative-diagonal sign convention."""
    a = as_matrix(a)
    m, n = a.shape
    k = min(m, n)
    reflectors, r_full = _householder_vectors(a)

    # Accumulate Q by applying the reflectors to the leading k columns of I.
    q = np.zeros((m, k))
    q[:k, :k] = np.eye(k)
    for j in range(k - 1, -1, -1):
        v = reflectors[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    r = np.triu(r_full[:k, :])
    # Flip signs so every diagonal entry of R is non-negative.
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    r = signs[:, None] * r
    q = q * signs[None, :k]
    return QrFactorization(q=q, r=r)


def column_span_basis(a, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the numerical column span of `a`.

    Uses Householder QR with column pivoting and truncates at the first
    diagonal entry of R below tol * |r_00|.  For a rank-deficient gradient
    matrix this is the rank-revealing basis the span checks rely on; the
    resulting projector Q Q^T is identical to the SVD-derived one.
    Returns an (m, rank) array; rank may be 0 for the zero matrix.
    """
    a = as_matrix(a)
    if tol <= 0:
        raise DomainError("tol must be positive")
    m, n = a.shape
    k = min(m, n)
    r = a.copy()
    reflectors = []
    rank = 0
    first_pivot = None
    for j in range(k):
        # Pivot: move the remaining column with the largest norm to front.
        norms = np.sqrt(np.sum(r[j:, j:] ** 2, axis=0))
        p = int(np.argmax(norms))
        if p != 0:
            r[:, [j, j + p]] = r[:, [j + p, j]]
        pivot_norm = norms[p]
        if first_pivot is None:
            first_pivot = pivot_norm
        if first_pivot == 0.0 or pivot_norm <= tol * first_pivot:
            break
        x = r[j:, j].copy()
        v = x.copy()
        v[0] += np.copysign(pivot_norm, x[0] if x[0] != 0.0 else 1.0)
        v /= np.sqrt(np.dot(v, v))
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)
        rank += 1

    q = np.zeros((m, rank))
    q[:rank, :rank] = np.eye(rank)
    for j in range(rank - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q


def row_space_basis(a, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the numerical row space of `a` (cols of a.T)."""
    return column_span_basis(as_matrix(a).T, tol)


def svd_decompose(a) -> SvdFactorization:
    """Thin SVD via one-sided Jacobi rotations.

    Accurate at desk scale; singular values are sorted non-increasing.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        t = svd_decompose(a.T)
        return SvdFactorization(u=t.v, singular_values=t.singular_values, v=t.u)

    u = a.copy()
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        converged = True
        for p in range(n - 1):
            for q in range(p + 1, n):
                up = u[:, p]
                uq = u[:, q]
                app = np.dot(up, up)
                aqq = np.dot(uq, uq)
                apq = np.dot(up, uq)
                if abs(apq) <= _JACOBI_EPS * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                converged = False
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                new_q = s * up + c * uq
                u[:, p] = new_p
                u[:, q] = new_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if converged:
            break

    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    nonzero = sigma > 0.0
    u[:, nonzero] = u[:, nonzero] / sigma[nonzero]
    u[:, ~nonzero] = 0.0
    return SvdFactorization(u=u, singular_values=sigma, v=v)


def numerical_rank(a, tol: float = DEFAULT_RANK_TOL) -> int:
    """Count of singular values above tol * sigma_max."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    sigma = svd_decompose(a).singular_values
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > tol * sigma[0]))


def project_onto_column_span(basis_q, x) -> np.ndarray:
    """Q (Q^T x) for an orthonormal basis Q; idempotent by construction."""
    q = np.asarray(basis_q, dtype=np.float64)
    if q.ndim != 2:
        raise DomainError(f"basis must be 2-D, got shape {q.shape}")
    v = _as_vector(x, "x")
    if q.shape[0] != v.shape[0]:
        raise DomainError(
            f"dimension mismatch: basis has {q.shape[0]} rows, x has length {v.shape[0]}"
        )
    return q @ (q.T @ v)


def null_space_projector(a, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Projector onto the null space of `a` (complement of its row space).

    Equals V_N V_N^T where V_N collects the right-singular directions with
    sigma <= tol * sigma_max, computed here as I - V_r V_r^T so that null
    directions missing from the thin factorization are still covered.
    """
    a = as_matrix(a)
    if tol <= 0:
        raise DomainError("tol must be positive")
    d = a.shape[1]
    f = svd_decompose(a)
    sigma = f.singular_values
    if sigma.size == 0 or sigma[0] == 0.0:
        return np.eye(d)
    keep = sigma > tol * sigma[0]
    v_r = f.v[:, keep]
    return np.eye(d) - v_r @ v_r.T


def cosine_similarity(x, y) -> float:
    """cos angle between two vectors; raises DomainError on zero norm."""
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.shape != yv.shape:
        raise DomainError(f"length mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    nx = np.sqrt(np.dot(xv, xv))
    ny = np.sqrt(np.dot(yv, yv))
    if nx == 0.0 or ny == 0.0:
        raise DomainError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(xv, yv) / (nx * ny), -1.0, 1.0))
