"""Dense linear algebra helpers: one-sided Jacobi SVD and matrix blobs."""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "InvalidInputError",
    "svd",
    "spectral_norm",
    "check_finite",
    "write_matrix",
    "read_matrix",
    "matrix_to_bytes",
    "matrix_from_bytes",
]


class InvalidInputError(ValueError):
    """Raised when a numeric routine receives NaN/Inf or malformed data."""


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{what} contains non-finite entries")
    return m


def svd(m, tol: float = 1e-12, max_sweeps: int = 100):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, s, V)`` with ``m = U @ diag(s) @ V.T``, singular values
    sorted non-increasing. ``U`` is ``rows x k`` and ``V`` is ``cols x k``
    with ``k = min(rows, cols)``.
    """
    a = check_finite(m, "svd input")
    if a.ndim != 2:
        raise InvalidInputError("svd expects a 2-D matrix")
    rows, cols = a.shape
    if rows < cols:
        v, s, u = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return u, s, v
    k = cols
    if k == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((0, 0))

    work = a.copy()
    vmat = np.eye(cols)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                cp = work[:, p]
                cq = work[:, q]
                alpha = cp @ cp
                beta = cq @ cq
                gamma = cp @ cq
                if gamma == 0.0:
                    continue
                denom = np.sqrt(alpha * beta)
                if denom == 0.0:
                    continue
                off = max(off, abs(gamma) / denom)
                if abs(gamma) <= tol * denom:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - s_ * work[:, q]
                work[:, q] = s_ * wp + c * work[:, q]
                vp = vmat[:, p].copy()
                vmat[:, p] = c * vp - s_ * vmat[:, q]
                vmat[:, q] = s_ * vp + c * vmat[:, q]
        if off <= tol:
            break

    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    work = work[:, order]
    vmat = vmat[:, order]

    umat = np.zeros((rows, k))
    scale = sing[0] if sing[0] > 0 else 1.0
    nonzero = sing > scale * 1e-14 * max(rows, cols)
    umat[:, nonzero] = work[:, nonzero] / sing[nonzero]
    if not np.all(nonzero):
        umat = _complete_orthonormal(umat, nonzero)
        sing = np.where(nonzero, sing, 0.0)
    return umat, sing, vmat


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged in ``filled`` with an orthonormal completion."""
    rows = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    out = u.copy()
    candidates = iter(np.eye(rows))
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            vec = e.copy()
            for _ in range(2):
                for b in basis:
                    vec -= (b @ vec) * b
            nrm = np.linalg.norm(vec)
            if nrm > 1e-8:
                vec /= nrm
                basis.append(vec)
                out[:, j] = vec
                break
    return out


def spectral_norm(m) -> float:
    """Operator 2-norm (largest singular value)."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    return float(svd(m)[1][0])


_HEADER = struct.Struct("<QQ")


def matrix_to_bytes(m) -> bytes:
    m = check_finite(m)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    rows, cols = m.shape
    return _HEADER.pack(rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise InvalidInputError("matrix blob shorter than its header")
    rows, cols = _HEADER.unpack_from(buf)
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise InvalidInputError(f"matrix blob has {len(buf)} bytes, header implies {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return data.reshape(rows, cols)


def write_matrix(m, path: str | os.PathLike) -> None:
    """Atomically write ``m`` in the little-endian (u64 rows, u64 cols, f64...) format."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(matrix_to_bytes(m))
    os.replace(tmp, path)


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())
