import numpy as np
import pytest

from spframe_lab.crystal import Lattice, RigidMotion, Structure, apply_rigid_motion, random_rotation
from spframe_lab.graph import GraphConstructionError, build_graph, image_bounds, rbf_expand
from spframe_lab.synth import generate_screw_structure, random_structure


def _simple_cubic(a=1.0):
    return Structure((6,), np.zeros((1, 3)), Lattice(np.eye(3) * a))


def _brute_force_neighbors(s, cutoff):
    """All (src, image, distance) within cutoff by scanning a generous image block."""
    out = {i: [] for i in range(s.n_atoms)}
    rng = range(-4, 5)
    for i in range(s.n_atoms):
        for j in range(s.n_atoms):
            for k in [(a, b, c) for a in rng for b in rng for c in rng]:
                v = s.cart[i] + s.lattice.matrix @ np.array(k) - s.cart[j]
                d = float(np.linalg.norm(v))
                if 1e-8 < d <= cutoff:
                    out[i].append((j, k, d))
    return out


def test_simple_cubic_has_six_axis_neighbors():
    g = build_graph(_simple_cubic(), cutoff=1.05, max_neighbors=12)
    assert g.n_edges == 6
    assert np.allclose(g.distance, 1.0)
    images = sorted(tuple(int(v) for v in im) for im in g.image)
    assert images == sorted([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)])
    assert np.allclose(np.abs(g.direction).sum(axis=1), 1.0)


def test_edge_vector_identity():
    s = generate_screw_structure(seed=3).structure
    g = build_graph(s)
    lhs = g.direction * g.distance[:, None]
    rhs = s.cart[g.dst] + g.image @ s.lattice.matrix.T - s.cart[g.src]
    assert np.max(np.abs(lhs - rhs)) < 1e-10
    assert np.allclose(np.linalg.norm(g.direction, axis=1), 1.0, atol=1e-12)


def test_matches_brute_force_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = random_structure(rng, max_atoms=3)
        cutoff = 3.5
        g = build_graph(s, cutoff=cutoff, max_neighbors=1000)
        brute = _brute_force_neighbors(s, cutoff)
        for i in range(s.n_atoms):
            got = sorted((int(g.src[e]), tuple(int(v) for v in g.image[e])) for e in g.incoming(i))
            want = sorted((j, k) for j, k, _ in brute[i])
            assert got == want


def test_keeps_the_nearest_neighbors():
    rng = np.random.default_rng(1)
    s = random_structure(rng, max_atoms=4)
    full = build_graph(s, cutoff=4.0, max_neighbors=1000)
    cut = build_graph(s, cutoff=4.0, max_neighbors=5)
    for i in range(s.n_atoms):
        d_full = np.sort(full.distance[full.incoming(i)])
        d_cut = np.sort(cut.distance[cut.incoming(i)])
        assert np.allclose(d_cut, d_full[: len(d_cut)])


def test_ties_are_broken_by_source_then_image():
    g = build_graph(_simple_cubic(), cutoff=1.05, max_neighbors=3)
    images = [tuple(int(v) for v in im) for im in g.image]
    assert images == [(-1, 0, 0), (0, -1, 0), (0, 0, -1)]


def test_image_bound_formula():
    s = Structure((1,), np.zeros((1, 3)), Lattice(np.diag([1.0, 2.0, 4.0])))
    assert list(image_bounds(s, 4.0)) == [4, 2, 1]


def test_deterministic():
    s = generate_screw_structure(seed=4).structure
    a, b = build_graph(s), build_graph(s)
    for k in ("src", "dst", "image", "distance", "direction"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_empty_neighborhood_names_the_atom():
    with pytest.raises(GraphConstructionError, match="atom 0"):
        build_graph(_simple_cubic(), cutoff=0.5)


def test_bad_arguments():
    with pytest.raises(ValueError):
        build_graph(_simple_cubic(), cutoff=0.0)
    with pytest.raises(ValueError):
        build_graph(_simple_cubic(), max_neighbors=0)


def test_rotation_keeps_edge_data_and_rotates_directions():
    s = generate_screw_structure(seed=5).structure
    g = build_graph(s)
    for seed in range(20):
        q = random_rotation(seed).rotation
        h = build_graph(apply_rigid_motion(s, RigidMotion(q)), g.cutoff, g.max_neighbors)
        assert np.array_equal(h.src, g.src) and np.array_equal(h.image, g.image)
        assert np.max(np.abs(h.direction - g.direction @ q.T)) < 1e-10


def test_rbf_peaks_at_centers():
    mu = np.linspace(0, 4.0, 64)
    v = rbf_expand(mu[10], 64, 4.0)
    assert v.shape == (64,)
    assert v[10] == 1.0
    assert int(np.argmax(rbf_expand(2.0, 64, 4.0))) == int(np.argmin(np.abs(mu - 2.0)))
    assert rbf_expand(np.array([1.0, 2.0]), 8, 4.0).shape == (2, 8)


def test_rbf_rejects_bad_input():
    with pytest.raises(ValueError):
        rbf_expand(0.0)
    with pytest.raises(ValueError):
        rbf_expand(1.0, n_centers=1)


def test_graph_serialises():
    d = build_graph(_simple_cubic(), cutoff=1.05).to_dict()
    assert d["n_atoms"] == 1 and len(d["edges"]) == 6
    assert set(d["edges"][0]) == {"src", "dst", "image", "distance", "direction"}
