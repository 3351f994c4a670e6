"""Periodic k-nearest-within-radius crystal graphs and radial edge features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crystal import Structure

TIE_TOL = 1e-9


class GraphConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    image: tuple[int, int, int]
    distance: float
    direction: np.ndarray


@dataclass(frozen=True)
class PeriodicGraph:
    """Edges grouped by destination atom; messages flow src -> dst.

    ``direction[e] * distance[e] == x[dst] + L @ image[e] - x[src]``.
    """

    structure: Structure
    src: np.ndarray
    dst: np.ndarray
    image: np.ndarray
    distance: np.ndarray
    direction: np.ndarray
    cutoff: float
    max_neighbors: int

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edge_vectors(self) -> np.ndarray:
        return self.direction * self.distance[:, None]

    def edges(self) -> list[Edge]:
        return [
            Edge(int(s), int(d), tuple(int(k) for k in im), float(r), v.copy())
            for s, d, im, r, v in zip(self.src, self.dst, self.image, self.distance, self.direction)
        ]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.structure.n_atoms)

    def incoming(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.dst == i)

    def to_dict(self) -> dict:
        return {
            "n_atoms": self.structure.n_atoms,
            "cutoff": self.cutoff,
            "max_neighbors": self.max_neighbors,
            "edges": [
                {
                    "src": int(s),
                    "dst": int(d),
                    "image": [int(k) for k in im],
                    "distance": float(r),
                    "direction": [float(c) for c in v],
                }
                for s, d, im, r, v in zip(self.src, self.dst, self.image, self.distance, self.direction)
            ],
        }


def image_bounds(structure: Structure, cutoff: float) -> np.ndarray:
    h = structure.lattice.plane_spacings()
    return np.array([math.ceil(cutoff / hm) for hm in h], dtype=int)


def _tie_groups(d: np.ndarray) -> np.ndarray:
    """Rank sorted-distance clusters; gaps below TIE_TOL share a rank."""
    order = np.argsort(d, kind="stable")
    ranks = np.empty(len(d), dtype=int)
    rank, prev = 0, None
    for idx in order:
        if prev is not None and d[idx] - prev > TIE_TOL:
            rank += 1
        ranks[idx] = rank
        prev = d[idx]
    return ranks


def build_graph(s: Structure, cutoff: float = 4.0, max_neighbors: int = 12) -> PeriodicGraph:
    """For each atom keep the ``max_neighbors`` nearest periodic neighbours within ``cutoff``.

    Ties in distance (within 1e-9 Å) are broken by source index and then by
    the lexicographic image, so the result is deterministic and stable under
    rigid motions.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    lmat = s.lattice.matrix
    cart = s.cart
    bounds = image_bounds(s, cutoff)
    grids = [np.arange(-b, b + 1) for b in bounds]
    images = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, 3)
    shifts = images @ lmat.T  # (K, 3)

    src_all, dst_all, img_all, dist_all, vec_all = [], [], [], [], []
    n = s.n_atoms
    for i in range(n):
        # vec[j, k] = x_i + L k - x_j
        vec = cart[i][None, None, :] + shifts[None, :, :] - cart[:, None, :]
        d = np.linalg.norm(vec, axis=-1)
        jj, kk = np.nonzero((d <= cutoff) & (d > 1e-8))
        if len(jj) == 0:
            raise GraphConstructionError(
                f"atom {i} (Z={s.species[i]}) has no neighbours within cutoff {cutoff} Å"
            )
        dd = d[jj, kk]
        im = images[kk]
        ranks = _tie_groups(dd)
        order = np.lexsort((im[:, 2], im[:, 1], im[:, 0], jj, ranks))[:max_neighbors]
        src_all.append(jj[order])
        dst_all.append(np.full(len(order), i))
        img_all.append(im[order])
        dist_all.append(dd[order])
        vec_all.append(vec[jj[order], kk[order]])

    dist = np.concatenate(dist_all)
    vecs = np.concatenate(vec_all)
    return PeriodicGraph(
        structure=s,
        src=np.concatenate(src_all).astype(int),
        dst=np.concatenate(dst_all).astype(int),
        image=np.concatenate(img_all).astype(int),
        distance=dist,
        direction=vecs / dist[:, None],
        cutoff=float(cutoff),
        max_neighbors=int(max_neighbors),
    )


def rbf_expand(distance, n_centers: int = 64, cutoff: float = 4.0) -> np.ndarray:
    """Gaussian radial basis with centres evenly spaced on [0, cutoff].

    Works on a scalar (returns shape (n_centers,)) or an array of distances
    (returns shape (..., n_centers)).
    """
    if n_centers < 2:
        raise ValueError("n_centers must be >= 2")
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    mu = np.linspace(0.0, cutoff, n_centers)
    gamma = mu[1] - mu[0]
    return np.exp(-(((d[..., None] - mu) / gamma) ** 2))
