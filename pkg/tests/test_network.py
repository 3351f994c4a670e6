import numpy as np
import pytest

from spframe_lab import autodiff as ad
from spframe_lab.crystal import (
    Lattice,
    RigidMotion,
    Structure,
    apply_rigid_motion,
    random_rigid_motion,
    random_rotation,
)
from spframe_lab.frames import global_row_frame, quat_to_rotation
from spframe_lab.graph import build_graph
from spframe_lab.io import InputError
from spframe_lab.network import (
    FRAME_MODES,
    ModelConfig,
    angle_features,
    check_params,
    forward,
    forward_batch,
    init_params,
    make_batch,
    param_shapes,
    spherical_harmonics,
)
from spframe_lab.synth import generate_screw_structure, random_structure

SMALL = dict(feature_dim=8, n_layers=2)


@pytest.fixture(scope="module")
def structure():
    return random_structure(np.random.default_rng(5), n_atoms=5)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=3)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(frame_mode="bogus")
    cfg = ModelConfig.from_dict({"feature_dim": 16, "unknown": 1})
    assert cfg.feature_dim == 16
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_seeded_and_shaped():
    cfg = ModelConfig(**SMALL)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert {k: v.shape for k, v in a.items()} == param_shapes(cfg)
    check_params(cfg, a)


def test_weights_must_match_config():
    cfg = ModelConfig(**SMALL)
    params = init_params(cfg)
    params.pop("out.b2")
    with pytest.raises(InputError):
        check_params(cfg, params)
    params = init_params(cfg)
    params["out.W1"] = np.zeros((2, 2))
    with pytest.raises(InputError):
        check_params(cfg, params)


def test_spherical_harmonics_values():
    y0, y1, y2 = spherical_harmonics(np.array([0.0, 0.0, 1.0]))
    assert y0 == 1.0
    assert np.allclose(y1, [0, 0, 1])
    assert np.allclose(y2, [0, 0, 1, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        assert np.isclose(np.linalg.norm(spherical_harmonics(u)[2]), 1.0, atol=1e-12)


def test_spherical_harmonics_rotate_within_degree():
    """Degree-2 values of rotated directions are an orthogonal map of the originals."""
    rng = np.random.default_rng(1)
    us = rng.standard_normal((12, 3))
    us /= np.linalg.norm(us, axis=1, keepdims=True)
    q = random_rotation(2).rotation
    a = np.array([spherical_harmonics(u)[2] for u in us])
    b = np.array([spherical_harmonics(q @ u)[2] for u in us])
    d, *_ = np.linalg.lstsq(a, b, rcond=None)
    assert np.allclose(a @ d, b, atol=1e-10)
    assert np.allclose(d.T @ d, np.eye(5), atol=1e-10)


def test_angle_features_examples():
    lat = Lattice(np.array([[3.0, 1.0, 0.0], [0.0, 3.0, 0.5], [0.0, 0.0, 3.0]]))
    l1 = lat.vectors[0] / np.linalg.norm(lat.vectors[0])
    vec = lat.vectors / np.linalg.norm(lat.vectors, axis=1, keepdims=True)
    got = angle_features(l1[None], np.eye(3), lat, np.eye(3))[0]
    assert np.allclose(got, [1.0, vec[0] @ vec[1], vec[0] @ vec[2]])
    ortho = Lattice(np.diag([2.0, 3.0, 4.0]))
    assert np.allclose(angle_features([[0.0, 1.0, 0.0]], np.eye(3), ortho, np.eye(3)), [[0, 1, 0]])


def test_angle_features_are_invariant():
    rng = np.random.default_rng(3)
    s = random_structure(rng, n_atoms=3)
    g = build_graph(s)
    q = random_rotation(4).rotation
    moved = apply_rigid_motion(s, RigidMotion(q))
    a = angle_features(g.direction, global_row_frame(s.lattice), s.lattice, global_row_frame(s.lattice))
    b = angle_features(
        g.direction @ q.T, global_row_frame(moved.lattice), moved.lattice, global_row_frame(moved.lattice)
    )
    assert np.max(np.abs(a - b)) < 1e-10


@pytest.mark.parametrize("mode", [m for m in FRAME_MODES if m != "none"])
def test_forward_is_rigid_motion_invariant(mode, structure):
    cfg = ModelConfig(frame_mode=mode, **SMALL)
    params = init_params(cfg)
    y0 = forward(structure, cfg, params).value[0]
    for seed in range(10):
        y = forward(apply_rigid_motion(structure, random_rigid_motion(seed)), cfg, params).value[0]
        assert abs(y - y0) / (abs(y0) + 1e-12) < 1e-9


def test_none_mode_is_not_invariant(structure):
    cfg = ModelConfig(frame_mode="none", **SMALL)
    params = init_params(cfg)
    y0 = forward(structure, cfg, params).value[0]
    devs = [
        abs(forward(apply_rigid_motion(structure, random_rigid_motion(s)), cfg, params).value[0] - y0)
        for s in range(5)
    ]
    assert max(devs) > 1e-6


@pytest.mark.parametrize("mode", ["spframe-quaternion", "local-gs-equivariant"])
def test_permutation(mode, structure):
    cfg = ModelConfig(frame_mode=mode, **SMALL)
    params = init_params(cfg)
    perm = np.random.default_rng(0).permutation(structure.n_atoms)
    a = forward(structure, cfg, params)
    b = forward(structure.permuted(perm), cfg, params)
    assert abs(a.value[0] - b.value[0]) < 1e-12
    assert np.allclose(b.embeddings.value, a.embeddings.value[perm], atol=1e-12)


def test_single_atom_pooling_is_identity():
    s = Structure((6,), np.zeros((1, 3)), Lattice(np.diag([2.0, 2.2, 2.4])))
    cfg = ModelConfig(**SMALL)
    params = init_params(cfg)
    res = forward(s, cfg, params)
    h = np.logaddexp(0.0, res.embeddings.value[0] @ params["out.W1"] + params["out.b1"])
    assert np.isclose(res.value[0], h @ params["out.W2"][:, 0] + params["out.b2"][0], atol=1e-12)


def test_batched_forward_matches_single(structure):
    cfg = ModelConfig(**SMALL)
    params = init_params(cfg)
    other = random_structure(np.random.default_rng(9), n_atoms=3)
    graphs = [build_graph(structure), build_graph(other)]
    both = forward_batch(make_batch(graphs, cfg), cfg, params).value
    assert np.allclose(both, [forward(structure, cfg, params).value[0], forward(other, cfg, params).value[0]], atol=1e-12)


def test_identity_global_flag_changes_only_the_global_frame(structure):
    cfg = ModelConfig(identity_global=True, **SMALL)
    res = forward(structure, cfg, init_params(cfg))
    for f, inv in zip(res.frames, res.invariant_frames):
        assert np.allclose(f, inv)


def test_frames_are_rotations(structure):
    for mode in FRAME_MODES:
        cfg = ModelConfig(frame_mode=mode, **SMALL)
        res = forward(structure, cfg, init_params(cfg))
        for layer in res.frames:
            for f in layer:
                assert np.allclose(f @ f.T, np.eye(3), atol=1e-10)
                assert np.isclose(np.linalg.det(f), 1.0, atol=1e-10)


def test_quaternion_head_shares_the_rotation_kernel(structure):
    cfg = ModelConfig(**SMALL)
    res = forward(structure, cfg, init_params(cfg))
    inv = res.invariant_frames[0]
    assert np.all(np.isfinite(inv))
    # every invariant frame is the image of a positive quaternion under the shared kernel
    for f in inv:
        w = np.sqrt(max(1.0 + np.trace(f), 0.0)) / 2.0
        q = np.array([w, (f[2, 1] - f[1, 2]) / (4 * w), (f[0, 2] - f[2, 0]) / (4 * w), (f[1, 0] - f[0, 1]) / (4 * w)])
        assert np.allclose(quat_to_rotation(q), f, atol=1e-10)


def test_gradients_flow_through_every_frame_mode(structure):
    for mode in FRAME_MODES:
        cfg = ModelConfig(frame_mode=mode, feature_dim=6, n_layers=1)
        with ad.Tape() as tape:
            p = tape.watch(init_params(cfg))
            loss = ad.mean_all(forward(structure, cfg, p).prediction)
        report = ad.grad_check(tape, loss, samples_per_param=2)
        assert report.passed, (mode, report.failures[:3])


def test_bad_species_rejected():
    s = Structure((0,), np.zeros((1, 3)), Lattice(np.eye(3) * 2.0))
    cfg = ModelConfig(**SMALL)
    with pytest.raises(InputError):
        forward(s, cfg, init_params(cfg))


def test_single_neighbor_structure_uses_fallback():
    # two atoms in a long cell: each sees exactly one neighbour along z
    s = Structure((6, 8), np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.1]]), Lattice(np.diag([8.0, 8.0, 15.0])))
    cfg = ModelConfig(frame_mode="local-gs-equivariant", **SMALL)
    g = build_graph(s, cfg.cutoff, cfg.max_neighbors)
    assert list(g.in_degree()) == [1, 1]
    res = forward(s, cfg, init_params(cfg))
    assert np.all(np.isfinite(res.value))
    assert res.diagnostics["gs_fallback_retry"] > 0


def test_demo_structure_pairs_collapse_only_under_equivariant_frames():
    rec = generate_screw_structure(seed=0)
    s = rec.structure
    dists = {}
    for mode in ("local-gs-equivariant", "spframe-quaternion"):
        cfg = ModelConfig(frame_mode=mode)
        e = forward(s, cfg, init_params(cfg)).embeddings.value
        dists[mode] = [np.max(np.abs(e[i] - e[i + 3])) for i in range(3)]
    assert max(dists["local-gs-equivariant"]) < 1e-8
    assert min(dists["spframe-quaternion"]) > 1e-3
