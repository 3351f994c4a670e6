"""Crystal structures, coordinate conversion, rigid motions and symmetry orbits.

Conventions: the lattice matrix ``L`` holds the lattice vectors as *columns*,
so a Cartesian position is ``x = L @ f``. Rotations act on column vectors,
``x -> Q @ x + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WRAP_GUARD = 1e-12
DEFAULT_ORBIT_TOL = 1e-5


class InvalidLatticeError(ValueError):
    pass


class InvalidOpError(ValueError):
    pass


class SymmetryViolation(ValueError):
    pass


def wrap(frac) -> np.ndarray:
    """Map fractional coordinates into [0, 1); values within 1e-12 below 1 become 0."""
    f = np.asarray(frac, dtype=np.float64)
    f = f - np.floor(f)
    f[f >= 1.0 - WRAP_GUARD] = 0.0
    f[np.abs(f) < WRAP_GUARD] = 0.0
    return f


@dataclass(frozen=True)
class Lattice:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidLatticeError(f"lattice must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-8:
            raise InvalidLatticeError("lattice matrix is singular (|det| <= 1e-8)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_rows(cls, rows) -> "Lattice":
        """Build from a row-per-vector layout (the file format)."""
        return cls(np.asarray(rows, dtype=np.float64).T)

    @property
    def vectors(self) -> np.ndarray:
        """Lattice vectors as rows, shape (3, 3)."""
        return self.matrix.T

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.matrix)))

    def plane_spacings(self) -> np.ndarray:
        """Distance between adjacent lattice planes for each axis."""
        recip = np.linalg.inv(self.matrix)  # rows are reciprocal vectors / 2pi
        return 1.0 / np.linalg.norm(recip, axis=1)


@dataclass(frozen=True)
class Structure:
    species: tuple[int, ...]
    frac: np.ndarray
    lattice: Lattice

    def __post_init__(self):
        species = tuple(int(z) for z in self.species)
        frac = np.array(self.frac, dtype=np.float64).reshape(-1, 3)
        if len(species) == 0:
            raise ValueError("structure needs at least one atom")
        if frac.shape[0] != len(species):
            raise ValueError(f"{len(species)} species but {frac.shape[0]} coordinates")
        if np.any(frac < 0.0) or np.any(frac >= 1.0):
            raise ValueError("fractional coordinates must lie in [0, 1)")
        frac.setflags(write=False)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac", frac)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def cart(self) -> np.ndarray:
        """Cartesian positions as rows, shape (n, 3)."""
        return self.frac @ self.lattice.matrix.T

    def permuted(self, perm) -> "Structure":
        perm = np.asarray(perm)
        return Structure(tuple(self.species[i] for i in perm), self.frac[perm], self.lattice)


def frac_to_cart(f, lattice: Lattice) -> np.ndarray:
    """Row vectors (..., 3) of fractional coordinates to Cartesian rows."""
    return np.asarray(f, dtype=np.float64) @ lattice.matrix.T


def cart_to_frac(x, lattice: Lattice) -> np.ndarray:
    """Cartesian rows (..., 3) to fractional rows."""
    return np.asarray(x, dtype=np.float64) @ lattice.inverse.T


def _check_rotation(q: np.ndarray, tol: float = 1e-12) -> None:
    if q.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {q.shape}")
    if np.max(np.abs(q.T @ q - np.eye(3))) >= tol or abs(np.linalg.det(q) - 1.0) >= tol:
        raise ValueError("rotation is not in SO(3) to 1e-12")


@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3))


def apply_rigid_motion(s: Structure, g: RigidMotion) -> Structure:
    """Rotate the lattice and move every atom to ``Q x + t``.

    With ``L' = Q L`` the new fractional coordinates are ``f + L^-1 Q^T t``,
    so a pure rotation leaves them bit-identical.
    """
    new_lattice = Lattice(g.rotation @ s.lattice.matrix)
    shift = np.linalg.solve(s.lattice.matrix, g.rotation.T @ g.translation)
    frac = s.frac + shift if np.any(shift) else s.frac.copy()
    return Structure(s.species, wrap(frac), new_lattice)


@dataclass(frozen=True)
class SymmetryOp:
    w_rot: np.ndarray
    w_trans: np.ndarray

    def __post_init__(self):
        w = np.array(self.w_rot, dtype=np.float64)
        if w.shape != (3, 3) or np.any(w != np.round(w)):
            raise InvalidOpError("w_rot must be a 3x3 integer matrix")
        if abs(abs(np.linalg.det(w)) - 1.0) > 1e-9:
            raise InvalidOpError("|det(w_rot)| must be 1")
        t = np.array(self.w_trans, dtype=np.float64).reshape(3)
        object.__setattr__(self, "w_rot", w.astype(np.int64))
        object.__setattr__(self, "w_trans", t)

    @classmethod
    def identity(cls) -> "SymmetryOp":
        return cls(np.eye(3, dtype=int), np.zeros(3))

    def cartesian_rotation(self, lattice: Lattice) -> np.ndarray:
        return lattice.matrix @ self.w_rot @ lattice.inverse

    def validate(self, lattice: Lattice, tol: float = 1e-8) -> None:
        q = self.cartesian_rotation(lattice)
        if np.max(np.abs(q.T @ q - np.eye(3))) >= tol:
            raise InvalidOpError("operation is not orthogonal in Cartesian space for this lattice")

    def apply_frac(self, frac) -> np.ndarray:
        return np.asarray(frac) @ self.w_rot.T + self.w_trans

    def compose(self, other: "SymmetryOp") -> "SymmetryOp":
        """``self`` after ``other``."""
        return SymmetryOp(self.w_rot @ other.w_rot, self.w_rot @ other.w_trans + self.w_trans)


def apply_symmetry_op(s: Structure, op: SymmetryOp) -> Structure:
    op.validate(s.lattice)
    return Structure(s.species, wrap(op.apply_frac(s.frac)), s.lattice)


def min_image_frac_distance(a, b) -> np.ndarray:
    """Max-component distance between fractional points modulo the lattice."""
    d = np.asarray(a) - np.asarray(b)
    d = d - np.round(d)
    return np.max(np.abs(d), axis=-1)


def _match(s: Structure, op: SymmetryOp, tol: float):
    """Pairs (i, j) where op maps atom i onto atom j's site, and species mismatches."""
    mapped = op.apply_frac(s.frac)
    pairs, bad = [], []
    for i in range(s.n_atoms):
        dist = min_image_frac_distance(mapped[i][None, :], s.frac)
        for j in np.flatnonzero(dist < tol):
            (pairs if s.species[i] == s.species[j] else bad).append((i, int(j)))
    return pairs, bad


def orbits(s: Structure, ops, tol: float = DEFAULT_ORBIT_TOL) -> list[list[int]]:
    """Partition atom indices into symmetry orbits under ``ops``.

    Two atoms are linked when an op maps one onto the other's site (modulo the
    lattice, within ``tol``) with matching species; orbits are the transitive
    closure of these links, sorted by smallest member.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ops = list(ops)
    if not any(np.array_equal(o.w_rot, np.eye(3)) and not np.any(o.w_trans) for o in ops):
        raise ValueError("ops must include the identity")
    parent = list(range(s.n_atoms))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    violations = []
    for op in ops:
        pairs, bad = _match(s, op, tol)
        violations.extend(bad)
        for i, j in pairs:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    if violations:
        raise SymmetryViolation(f"ops map atoms onto different species: {violations[:5]}")
    groups: dict[int, list[int]] = {}
    for i in range(s.n_atoms):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def orbit_certificate(s: Structure, ops, i: int, j: int, tol: float = DEFAULT_ORBIT_TOL):
    """An op index mapping atom i onto atom j directly, or None."""
    for k, op in enumerate(ops):
        mapped = op.apply_frac(s.frac[i])
        if s.species[i] == s.species[j] and min_image_frac_distance(mapped, s.frac[j]) < tol:
            return k
    return None


def random_rotation(seed: int) -> RigidMotion:
    """Haar-uniform rotation: a standard-normal quaternion through quat_to_rotation."""
    from .frames import quat_to_rotation

    q = np.random.default_rng(seed).standard_normal(4)
    return RigidMotion(quat_to_rotation(q))


def random_rigid_motion(seed: int, span: float = 5.0) -> RigidMotion:
    rng = np.random.default_rng([seed, 1])
    return RigidMotion(random_rotation(seed).rotation, rng.uniform(-span, span, 3))
