"""Synthetic crystals: screw-symmetric demo structures, random cells, and targets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .crystal import Lattice, Structure, SymmetryOp, orbits, wrap
from .graph import GraphConstructionError, PeriodicGraph, build_graph
from .io import StructureRecord, save_record

SCREW_ROTATIONS = {
    180: np.array([[-1, 0, 0], [0, -1, 0], [0, 0, 1]]),
    90: np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]]),
}
MOTIF_SPECIES = (6, 8, 14)


class GenerationError(RuntimeError):
    pass


def _min_periodic_distance(s: Structure) -> float:
    cart = s.cart
    lmat = s.lattice.matrix
    best = np.inf
    shifts = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]) @ lmat.T
    for a in range(s.n_atoms):
        d = np.linalg.norm(cart[a] + shifts[None, :, :] - cart[:, None, :], axis=-1)
        d[a, 13] = np.inf  # zero shift onto itself
        best = min(best, float(d.min()))
    return best


def neighborhood_signature(graph: PeriodicGraph, i: int) -> np.ndarray:
    """Sorted (species, distance) pairs of atom i's incoming edges."""
    idx = graph.incoming(i)
    sp = np.array([graph.structure.species[j] for j in graph.src[idx]], dtype=float)
    sig = np.stack([sp, graph.distance[idx]], axis=1)
    return sig[np.lexsort((sig[:, 1], sig[:, 0]))]


def orbit_neighborhoods_match(graph: PeriodicGraph, orbit_list, tol: float = 1e-8) -> bool:
    for orb in orbit_list:
        ref = neighborhood_signature(graph, orb[0])
        for j in orb[1:]:
            sig = neighborhood_signature(graph, j)
            if sig.shape != ref.shape or np.max(np.abs(sig - ref), initial=0.0) > tol:
                return False
    return True


def _truncation_splits_ties(s: Structure, cutoff: float, max_neighbors: int, tol: float = 1e-6) -> bool:
    """True when the k-nearest cut falls inside a group of equidistant neighbours.

    Ties there are broken by index, which a symmetry operation does not respect.
    """
    full = build_graph(s, cutoff, 10**6)
    for i in range(s.n_atoms):
        d = np.sort(full.distance[full.incoming(i)])
        if len(d) > max_neighbors and d[max_neighbors] - d[max_neighbors - 1] < tol:
            return True
    return False


def generate_screw_structure(
    angle: int = 180,
    c: float = 5.0,
    motif_size: int = 3,
    seed: int = 0,
    cutoff: float = 4.0,
    max_neighbors: int = 12,
    min_distance: float = 1.2,
    max_attempts: int = 100,
) -> StructureRecord:
    """Random motif plus its images under a screw axis along z.

    The screw rotates by ``angle`` about z and translates by c/2. Every motif
    atom is replicated over the full cyclic orbit (2 copies for 180 degrees,
    4 for 90). The returned ops are the group elements including identity.
    Candidates are rejected and reseeded when atoms crowd, an orbit collapses,
    paired atoms end up with different graph neighbourhoods, or the
    neighbour cut splits a set of equidistant neighbours.
    """
    if angle not in SCREW_ROTATIONS:
        raise ValueError("angle must be 90 or 180")
    if motif_size < 3:
        raise ValueError("motif_size must be >= 3")
    w = SCREW_ROTATIONS[angle]
    order = 360 // angle
    screw = SymmetryOp(w, [0.0, 0.0, 0.5])
    group = [SymmetryOp.identity()]
    for _ in range(order - 1):
        group.append(screw.compose(group[-1]))
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        a = rng.uniform(3.6, 4.6)
        b = a if angle == 90 else rng.uniform(3.6, 4.6)
        lattice = Lattice(np.diag([a, b, c]))
        species = [int(z) for z in rng.choice(MOTIF_SPECIES, motif_size)]
        if len(set(species)) < 2:
            species[-1] = next(z for z in MOTIF_SPECIES if z != species[0])
        motif = rng.uniform(0.0, 1.0, (motif_size, 3))
        frac = np.concatenate([wrap(op.apply_frac(motif)) for op in group])
        s = Structure(tuple(species) * order, frac, lattice)
        if _min_periodic_distance(s) < min_distance:
            continue
        orbs = orbits(s, group)
        if len(orbs) != motif_size or any(len(o) != order for o in orbs):
            continue
        try:
            graph = build_graph(s, cutoff, max_neighbors)
        except GraphConstructionError:
            continue
        if not orbit_neighborhoods_match(graph, orbs) or _truncation_splits_ties(s, cutoff, max_neighbors):
            continue
        return StructureRecord(s, group)
    raise GenerationError(f"no valid screw structure after {max_attempts} attempts (seed {seed})")


def synthetic_target(s: Structure, graph: PeriodicGraph) -> float:
    """(1/n) sum_i [ sum_j exp(-d_ij) + sum_{j<k} cos(angle_jik) ] over graph neighbours."""
    total = 0.0
    for i in range(s.n_atoms):
        idx = graph.incoming(i)
        total += float(np.sum(np.exp(-graph.distance[idx])))
        dirs = graph.direction[idx]
        gram = dirs @ dirs.T
        total += float(np.sum(np.triu(gram, k=1)))
    return total / s.n_atoms


def _random_lattice(rng: np.random.Generator, scale: float) -> Lattice:
    while True:
        lengths = rng.uniform(2.8, 4.2, 3) * scale
        alpha, beta, gamma = np.radians(rng.uniform(75.0, 105.0, 3))
        ax = np.array([lengths[0], 0.0, 0.0])
        bx = lengths[1] * np.array([np.cos(gamma), np.sin(gamma), 0.0])
        cx_ = np.cos(beta)
        cy = (np.cos(alpha) - np.cos(beta) * np.cos(gamma)) / np.sin(gamma)
        cz2 = 1.0 - cx_ ** 2 - cy ** 2
        if cz2 > 0.05:
            cvec = lengths[2] * np.array([cx_, cy, np.sqrt(cz2)])
            return Lattice(np.stack([ax, bx, cvec], axis=1))


def random_structure(
    rng: np.random.Generator,
    max_atoms: int = 4,
    min_distance: float = 1.3,
    n_atoms: int | None = None,
) -> Structure:
    """Random triclinic cell with 1..max_atoms atoms (or exactly ``n_atoms``).

    Cells for more than four atoms are scaled up so the density stays near
    that of the small cells. Atoms are placed one at a time, rejecting
    positions closer than ``min_distance`` to any periodic image.
    """
    species_pool = (3, 6, 8, 14)
    while True:
        n = int(rng.integers(1, max_atoms + 1)) if n_atoms is None else int(n_atoms)
        lattice = _random_lattice(rng, max(1.0, (n / 4.0) ** (1.0 / 3.0)))
        frac = np.empty((0, 3))
        for _ in range(50 * n):
            if len(frac) == n:
                break
            cand = np.vstack([frac, rng.uniform(0.0, 1.0, (1, 3))])
            trial = Structure(tuple([1] * len(cand)), wrap(cand), lattice)
            if len(cand) == 1 or _min_periodic_distance(trial) >= min_distance:
                frac = cand
        if len(frac) == n:
            species = tuple(int(z) for z in rng.choice(species_pool, n))
            return Structure(species, wrap(frac), lattice)


def generate_dataset(
    out_dir,
    n_structures: int = 200,
    seed: int = 0,
    cutoff: float = 4.0,
    max_neighbors: int = 12,
    holdout_fraction: float = 0.2,
) -> Path:
    """Write one JSON per structure plus manifest.json with seeded train/holdout splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for k in range(n_structures):
        s = random_structure(rng)
        y = synthetic_target(s, build_graph(s, cutoff, max_neighbors))
        name = f"s{k:04d}.json"
        save_record(StructureRecord(s, property=y), out / name)
        names.append(name)
    perm = np.random.default_rng([seed, 7]).permutation(n_structures)
    n_hold = int(round(holdout_fraction * n_structures))
    holdout = set(perm[:n_hold].tolist())
    manifest = {
        "seed": seed,
        "cutoff": cutoff,
        "max_neighbors": max_neighbors,
        "structures": [
            {"file": name, "split": "holdout" if k in holdout else "train"} for k, name in enumerate(names)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
