"""Frame constructions on plain arrays.

Two conventions meet here. Lattice-derived global frames are returned in
*column* form ``G`` (columns are the frame axes), which is what makes
``G(Q L) = Q G(L)`` hold. Edge directions are *row* vectors and a frame acts
on them as ``v -> v @ F.T``; the row-form frame of a lattice is ``G.T``.
:func:`global_row_frame` is the bridge the network uses.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .crystal import InvalidLatticeError, Lattice

COLLINEAR_EPS = 1e-6
PCA_GAP = 1e-8
QUAT_MIN_NORM = 1e-12
GLOBAL_METHODS = ("qr", "polar", "pca")


class DegenerateSpectrumError(ValueError):
    pass


class DegenerateQuaternionError(ValueError):
    pass


class CollinearityError(ValueError):
    pass


def is_frame(f, tol: float = 1e-10) -> bool:
    f = np.asarray(f)
    return (
        f.shape == (3, 3)
        and float(np.max(np.abs(f.T @ f - np.eye(3)))) < tol
        and abs(float(np.linalg.det(f)) - 1.0) < tol
    )


def _flip_first_column_if_improper(q: np.ndarray) -> np.ndarray:
    if np.linalg.det(q) < 0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return q


def qr_frame(lmat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(lmat)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs  # column flips make diag(R) positive
    return _flip_first_column_if_improper(q)


def polar_frame(lmat: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(lmat)
    return _flip_first_column_if_improper(u @ vt)


def _first_significant(values: np.ndarray, scale: float) -> float:
    for v in values:
        if abs(v) > 1e-10 * max(scale, 1e-300):
            return float(v)
    return 0.0


def pca_frame(points: np.ndarray, gap: float = PCA_GAP) -> np.ndarray:
    """Column-form frame from the principal axes of a point set.

    Eigenvectors are sorted by decreasing eigenvalue. The sign of u1 and u2 is
    chosen so that the first non-negligible projection of the centred points
    onto it is positive; u3 then follows from det = +1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred
    lam, vecs = np.linalg.eigh(cov)
    order = np.argsort(lam)[::-1]
    lam, vecs = lam[order], vecs[:, order]
    if lam[0] - lam[1] <= gap or lam[1] - lam[2] <= gap:
        raise DegenerateSpectrumError(f"covariance eigenvalues too close: {lam}")
    u = vecs.copy()
    scale = float(np.max(np.abs(centred))) if centred.size else 1.0
    for k in range(2):
        proj = centred @ u[:, k]
        if _first_significant(proj, scale) < 0:
            u[:, k] = -u[:, k]
    if np.linalg.det(u) < 0:
        u[:, 2] = -u[:, 2]
    return u


def global_frame(lattice: Lattice | np.ndarray, method: str = "qr") -> np.ndarray:
    """Equivariant global frame of a lattice in column form: G(Q L) = Q G(L)."""
    lmat = lattice.matrix if isinstance(lattice, Lattice) else np.asarray(lattice, float)
    if lmat.shape != (3, 3) or abs(np.linalg.det(lmat)) <= 1e-8:
        raise InvalidLatticeError("lattice matrix is singular")
    if method == "qr":
        return qr_frame(lmat)
    if method == "polar":
        return polar_frame(lmat)
    if method == "pca":
        return pca_frame(lmat.T)
    raise ValueError(f"unknown global frame method {method!r}")


def global_row_frame(lattice, method: str = "qr") -> np.ndarray:
    """Row-form global frame, the F_global that acts on row directions."""
    return global_frame(lattice, method).T


def _rotation_entries(a, b, c, d):
    return (
        (a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)),
        (2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)),
        (2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d),
    )


def quat_to_rotation(q):
    """Unit-normalise a quaternion (a, b, c, d) and return its rotation matrix.

    Accepts a numpy 4-vector (returns 3x3) or an autodiff Tensor of shape
    (..., 4) (returns a tracked (..., 3, 3) Tensor). Both paths share the
    same matrix formula.
    """
    if isinstance(q, ad.Tensor):
        norm = ad.sqrt(_row_sq_norm(q))
        unit = ad.einsum(_scale_spec(q.value.ndim), q, _recip(norm))
        comps = [unit[..., k] for k in range(4)]
        rows = [ad.stack(list(r), axis=-1) for r in _rotation_entries(*comps)]
        return ad.stack(rows, axis=-2)
    q = np.asarray(q, dtype=np.float64)
    s = float(np.sqrt(q @ q))
    if not s > QUAT_MIN_NORM:
        raise DegenerateQuaternionError(f"quaternion norm {s} too small")
    a, b, c, d = q * (1.0 / s)
    return np.array(_rotation_entries(a, b, c, d), dtype=np.float64)


def _row_sq_norm(x: ad.Tensor) -> ad.Tensor:
    lead = "abcdefg"[: x.value.ndim - 1]
    return ad.einsum(f"{lead}i,{lead}i->{lead}", x, x)


def _recip(x: ad.Tensor) -> ad.Tensor:
    return ad.div(ad.Tensor(np.ones(x.shape)), x)


def _scale_spec(ndim: int) -> str:
    lead = "abcdefg"[: ndim - 1]
    return f"{lead}i,{lead}->{lead}i"


def gram_schmidt_frame(v1, v2, eps: float = COLLINEAR_EPS) -> np.ndarray:
    """Row-form frame with rows (v1_hat, v2_hat, v1_hat x v2_hat)."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = np.linalg.norm(v1)
    if n1 <= eps:
        raise CollinearityError(f"|v1| = {n1:.3g} below {eps}")
    e1 = v1 / n1
    r = v2 - (e1 @ v2) * e1
    nr = np.linalg.norm(r)
    if nr <= eps:
        raise CollinearityError(f"v2 residual {nr:.3g} below {eps}")
    e2 = r / nr
    return np.stack([e1, e2, np.cross(e1, e2)])


def compose_spframe(f_inv, f_global) -> np.ndarray:
    """F_i = F_inv,i @ F_global (both row form)."""
    return np.asarray(f_inv) @ np.asarray(f_global)


def canonicalize(vectors: Sequence, f) -> np.ndarray:
    """Map each row vector v to v @ F.T."""
    return np.asarray(vectors, dtype=np.float64).reshape(-1, 3) @ np.asarray(f).T
