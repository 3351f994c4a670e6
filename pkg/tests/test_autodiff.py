import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spframe_lab import autodiff as ad


def _check(build, *shapes, seed=0, positive=False, tol=1e-6):
    """Build a scalar loss from parameters of the given shapes and grad-check it."""
    rng = np.random.default_rng(seed)
    with ad.Tape() as tape:
        ps = []
        for k, shape in enumerate(shapes):
            v = rng.standard_normal(shape)
            if positive:
                v = np.abs(v) + 0.5
            ps.append(tape.parameter(f"p{k}", v))
        out = build(*ps)
        # fixed random weights make the loss sensitive to every entry
        w = ad.Tensor(rng.standard_normal(out.shape))
        loss = ad.tsum(ad.mul(out, w))
    report = ad.grad_check(tape, loss, samples_per_param=None, tol=tol)
    assert report.passed, report.failures[:3]
    return report


@pytest.mark.parametrize(
    "name,build,shapes,positive",
    [
        ("add", ad.add, [(3, 4), (3, 4)], False),
        ("sub", ad.sub, [(3, 4), (3, 4)], False),
        ("mul", ad.mul, [(3, 4), (3, 4)], False),
        ("div", ad.div, [(3, 4), (3, 4)], True),
        ("neg", lambda a: -a, [(5,)], False),
        ("scale", lambda a: ad.scale(a, 2.5), [(5,)], False),
        ("add_scalar", lambda a: ad.add_scalar(a, 1.5), [(5,)], False),
        ("sigmoid", ad.sigmoid, [(4, 3)], False),
        ("softplus", ad.softplus, [(4, 3)], False),
        ("exp", ad.exp, [(4, 3)], False),
        ("sqrt", ad.sqrt, [(4, 3)], True),
        ("absolute", ad.absolute, [(4, 3)], True),
        ("cos", ad.cos, [(4, 3)], False),
        ("add_row", ad.add_row, [(4, 3), (3,)], False),
        ("mul_row", ad.mul_row, [(4, 3), (3,)], False),
        ("matmul", ad.matmul, [(4, 3), (3, 5)], False),
        ("linear", ad.linear, [(4, 3), (3, 5), (5,)], False),
        ("einsum_batch", lambda a, b: ad.einsum("nab,nb->na", a, b), [(4, 3, 3), (4, 3)], False),
        ("einsum_outer", lambda a, b: ad.einsum("ec,em->ecm", a, b), [(4, 3), (4, 5)], False),
        ("tsum_axis", lambda a: ad.tsum(a, axis=1), [(4, 3)], False),
        ("mean_all", ad.mean_all, [(4, 3)], False),
        ("reshape", lambda a: ad.reshape(a, (3, 4)), [(4, 3)], False),
        ("take", lambda a: ad.take(a, (2, 0, 2), axis=-1), [(4, 3)], False),
        ("take_squeeze", lambda a: a[..., 1], [(4, 3)], False),
        ("gather", lambda a: ad.gather(a, [0, 0, 3, 1]), [(4, 3)], False),
        ("segment_sum", lambda a: ad.segment_sum(a, [1, 0, 1, 1, 2], 3), [(5, 3)], False),
        ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(4, 3), (4, 2)], False),
        ("stack", lambda a, b: ad.stack([a, b], axis=-2), [(4, 3), (4, 3)], False),
        ("where_rows", lambda a, b: ad.where_rows(np.array([True, False, True]), a, b), [(3, 2), (3, 2)], False),
        ("feature_norm", ad.feature_norm, [(4, 6), (6,), (6,)], False),
        ("elementwise", lambda a, b: ad.elementwise(a, "hadamard", b), [(3,), (3,)], False),
    ],
)
def test_op_gradients_match_central_differences(name, build, shapes, positive):
    _check(build, *shapes, positive=positive)


def test_backward_known_gradient():
    with ad.Tape() as tape:
        x = tape.parameter("x", np.array([1.0, 2.0, 3.0]))
        loss = ad.tsum(ad.mul(x, x))
    g = ad.backward(tape, loss)
    assert np.allclose(g["x"], [2.0, 4.0, 6.0], atol=0)


def test_backward_needs_scalar_loss():
    with ad.Tape() as tape:
        x = tape.parameter("x", np.ones(3))
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.ContractError):
        ad.backward(tape, y)


def test_unused_parameter_gets_zero_gradient():
    with ad.Tape() as tape:
        x = tape.parameter("x", np.ones(3))
        tape.parameter("unused", np.ones((2, 2)))
        loss = ad.tsum(x)
    g = ad.backward(tape, loss)
    assert np.array_equal(g["unused"], np.zeros((2, 2)))


def test_duplicate_parameter_rejected():
    with ad.Tape() as tape:
        tape.parameter("x", np.ones(2))
        with pytest.raises(ad.ContractError):
            tape.parameter("x", np.ones(2))


def test_shape_mismatch_raises_dimension_error():
    with pytest.raises(ad.DimensionError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))
    with pytest.raises(ad.DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_einsum_rejects_implicit_reductions():
    a = ad.Tensor(np.ones((2, 3)))
    with pytest.raises(ad.ContractError):
        ad.einsum("ij,kl->il", a, a)
    with pytest.raises(ad.ContractError):
        ad.einsum("ii,ij->ij", ad.Tensor(np.ones((3, 3))), ad.Tensor(np.ones((3, 3))))


def test_replay_without_changes_is_exact():
    with ad.Tape() as tape:
        x = tape.parameter("x", np.linspace(-1, 1, 6).reshape(2, 3))
        loss = ad.mean_all(ad.softplus(ad.matmul(x, ad.Tensor(np.ones((3, 2))))))
    before = loss.item()
    assert tape.replay() == 0.0
    assert loss.item() == before


def test_untracked_ops_outside_tape():
    y = ad.softplus(ad.Tensor(np.zeros(2)))
    assert not y.tracked
    assert np.allclose(y.value, np.log(2.0))


def test_softplus_is_stable_for_large_inputs():
    y = ad.softplus(ad.Tensor(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(y.value))
    assert y.value[2] == 800.0


def test_grad_check_detects_wrong_gradient():
    bad = ad.Op("bad_square", lambda a: a * a, lambda g, a, out: (g * a,))  # true vjp is 2ga
    with ad.Tape() as tape:
        x = tape.parameter("x", np.array([0.7, -1.3]))
        loss = ad.tsum(ad._apply(bad, (x,)))
    report = ad.grad_check(tape, loss, samples_per_param=None)
    assert not report.passed
    assert report.failures


def test_grad_check_float64_mode_also_works_on_smooth_loss():
    with ad.Tape() as tape:
        x = tape.parameter("x", np.array([0.3, -0.2, 1.1]))
        loss = ad.tsum(ad.exp(x))
    assert ad.grad_check(tape, loss, samples_per_param=None, extended=False).passed


def test_checkpoint_roundtrip(tmp_path):
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    ad.save_checkpoint(tmp_path / "c.json", params, {"note": 1})
    back, meta = ad.load_checkpoint(tmp_path / "c.json")
    assert meta == {"note": 1}
    for k in params:
        assert np.array_equal(back[k], params[k])


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other", "version": 1, "params": {}}')
    with pytest.raises(ad.ContractError):
        ad.load_checkpoint(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"format": "spframe-checkpoint", "version": 99, "params": {}}')
    with pytest.raises(ad.ContractError):
        ad.load_checkpoint(tmp_path / "y.json")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_two_layer_network_gradients(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.standard_normal((5, 4)))
    with ad.Tape() as tape:
        w1 = tape.parameter("w1", rng.standard_normal((4, 6)) / 2)
        b1 = tape.parameter("b1", rng.standard_normal(6))
        w2 = tape.parameter("w2", rng.standard_normal((6, 1)) / 2)
        h = ad.softplus(ad.linear(x, w1, b1))
        loss = ad.mean_all(ad.sigmoid(ad.matmul(h, w2)))
    assert ad.grad_check(tape, loss, samples_per_param=None).passed
