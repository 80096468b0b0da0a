"""Small dense SVD (one-sided Jacobi) and the Moore-Penrose pseudo-inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_matrix

__all__ = [
    "SvdResult",
    "SvdConvergenceError",
    "svd",
    "pseudo_inverse",
    "top_r_singular_subspaces",
]

OFF_DIAGONAL_TOL = 1e-12
MAX_SWEEPS = 80


class SvdConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``p = min(m, n)`` columns."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _complete_basis(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Fill columns of q where ``filled`` is False with unit vectors orthogonal
    # to all the others, drawn from the standard basis by largest residual.
    m = q.shape[0]
    for j in np.flatnonzero(~filled):
        basis = q[:, filled]
        best, best_norm = None, -1.0
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                cand -= basis @ (basis.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > best_norm + 1e-12:
                best, best_norm = cand, nrm
        q[:, j] = best / best_norm
        filled[j] = True
    return q


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    norms = np.einsum("ij,ij->j", w, w)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha, beta = norms[i], norms[j]
                if alpha == 0.0 or beta == 0.0:
                    continue
                gamma = w[:, i] @ w[:, j]
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                wi, wj = w[:, i].copy(), w[:, j]
                w[:, i] = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j]
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
                norms[i] = w[:, i] @ w[:, i]
                norms[j] = w[:, j] @ w[:, j]
        if not rotated:
            return w, v
    raise SvdConvergenceError(
        f"Jacobi SVD did not reach off-diagonal tolerance {tol:g} in {max_sweeps} sweeps"
    )


def _normalize_signs(u: np.ndarray, v: np.ndarray) -> None:
    # Largest-magnitude entry of each u column is made positive; first one wins ties.
    for j in range(u.shape[1]):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0


def svd(a, tol: float = OFF_DIAGONAL_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

    Parameters
    ----------
    a : array_like
        Finite ``m x n`` matrix.
    tol : float
        A column pair counts as orthogonal once
        ``|w_i . w_j| <= tol * ||w_i|| ||w_j||``.
    max_sweeps : int
        Sweep budget; :class:`SvdConvergenceError` is raised when exhausted.

    Returns
    -------
    SvdResult
        ``sigma`` is nonincreasing (stable order for ties), and each pair of
        singular vectors is signed so the largest-magnitude entry of ``u[:, i]``
        is positive.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        r = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        u, v = r.v.copy(), r.u.copy()
        _normalize_signs(u, v)
        return SvdResult(u=u, sigma=r.sigma, v=v)

    w, v = _jacobi_tall(a, tol, max_sweeps)
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]

    u = np.zeros((m, n))
    nonzero = sigma > 0.0
    u[:, nonzero] = w[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        u = _complete_basis(u, nonzero.copy())
    _normalize_signs(u, v)
    return SvdResult(u=u, sigma=sigma, v=np.ascontiguousarray(v))


def pseudo_inverse(a) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via :func:`svd`.

    Singular values at or below ``eps * max(m, n) * sigma_max`` are treated
    as zero.
    """
    a = as_matrix(a)
    r = svd(a)
    if r.sigma.size == 0 or r.sigma[0] == 0.0:
        return np.zeros(a.T.shape)
    cutoff = np.finfo(np.float64).eps * max(a.shape) * r.sigma[0]
    inv = np.where(r.sigma > cutoff, 1.0 / np.where(r.sigma > cutoff, r.sigma, 1.0), 0.0)
    return (r.v * inv) @ r.u.T


def top_r_singular_subspaces(a, r: int):
    """Leading ``r`` left and right singular vectors of ``a`` as ``(U_r, V_r)``."""
    a = as_matrix(a)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r!r} out of range for a {a.shape} matrix")
    res = svd(a)
    return res.u[:, :r].copy(), res.v[:, :r].copy()
