"""Dense float64 tensors with a recording tape for reverse-mode gradients.

A :class:`Tape` records every primitive applied to a tracked tensor. Because
the tape keeps the forward function of each node, it can be replayed with
modified parameter values, which is what :func:`grad_check` relies on.

Broadcasting is deliberately absent: binary ops need equal shapes, and the
only mixed-shape ops are the explicit row ops (:func:`add_row`,
:func:`mul_row`) and scalar scaling.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable array value, optionally tracked by a tape."""

    __slots__ = ("value", "tape", "tid", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.tid = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(neg(self), float(other))
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        # Only integer selection along the last axis is supported.
        if isinstance(index, tuple) and len(index) == 2 and index[0] is Ellipsis:
            return take(self, [int(index[1])], axis=-1, squeeze=True)
        raise ContractError("Tensor indexing supports only t[..., k]")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: "Op"
    inputs: tuple[Tensor, ...]
    output: Tensor
    kwargs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; ops on tracked tensors inside the block are
    recorded here. Parameters are leaves registered via :meth:`parameter`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Tensor] = {}
        self._n_tensors = 0

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def _register(self, t: Tensor) -> Tensor:
        t.tape = self
        t.tid = self._n_tensors
        self._n_tensors += 1
        return t

    def parameter(self, name: str, value) -> Tensor:
        if name in self.parameters:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = self._register(Tensor(np.array(value, dtype=np.float64), name=name))
        self.parameters[name] = t
        return t

    def watch(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.parameter(k, v) for k, v in params.items()}

    def clear(self) -> None:
        """Drop recorded nodes so the tape and its tensors can be freed right away."""
        for node in self.nodes:
            node.output.tape = None
        for t in self.parameters.values():
            t.tape = None
        self.nodes = []
        self.parameters = {}

    def replay(self) -> float:
        """Recompute every node from its inputs; return max |old - new|."""
        worst = 0.0
        for node in self.nodes:
            new = node.op.forward(*(t.value for t in node.inputs), **node.kwargs)
            if new.shape == node.output.value.shape and new.size:
                diff = np.abs(new - node.output.value)
                worst = max(worst, float(np.nanmax(diff)) if diff.size else 0.0)
            node.output.value = new
        return worst


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


def _apply(op: Op, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    inputs = tuple(as_tensor(x) for x in inputs)
    out = Tensor(op.forward(*(t.value for t in inputs), **kwargs))
    tapes = {t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return out
    if len(tapes) > 1:
        raise ContractError("inputs recorded on different tapes")
    tape = tapes.pop()
    tape._register(out)
    tape.nodes.append(Node(op, inputs, out, kwargs))
    return out


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------------

def _fwd_add(a, b):
    _same_shape(a, b, "add")
    return a + b


def _fwd_sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def _fwd_mul(a, b):
    _same_shape(a, b, "hadamard")
    return a * b


def _fwd_div(a, b):
    _same_shape(a, b, "div")
    return a / b


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ADD = Op("add", _fwd_add, lambda g, a, b, out: (g, g))
SUB = Op("sub", _fwd_sub, lambda g, a, b, out: (g, -g))
MUL = Op("hadamard", _fwd_mul, lambda g, a, b, out: (g * b, g * a))
DIV = Op("div", _fwd_div, lambda g, a, b, out: (g / b, -g * a / (b * b)))
NEG = Op("neg", lambda a: -a, lambda g, a, out: (-g,))
SCALE = Op("scale", lambda a, s: a * s, lambda g, a, out, s: (g * s,))
ADD_SCALAR = Op("add_scalar", lambda a, c: a + c, lambda g, a, out, c: (g,))
SIGMOID = Op("sigmoid", _sigmoid, lambda g, a, out: (g * out * (1.0 - out),))
SOFTPLUS = Op("softplus", _softplus, lambda g, a, out: (g * _sigmoid(a),))
EXP = Op("exp", np.exp, lambda g, a, out: (g * out,))
SQRT = Op("sqrt", np.sqrt, lambda g, a, out: (g * 0.5 / out,))
ABS = Op("abs", np.abs, lambda g, a, out: (g * np.sign(a),))
COS = Op("cos", np.cos, lambda g, a, out: (-g * np.sin(a),))


def add(a, b):
    return _apply(ADD, (a, b))


def sub(a, b):
    return _apply(SUB, (a, b))


def mul(a, b):
    return _apply(MUL, (a, b))


hadamard = mul


def div(a, b):
    return _apply(DIV, (a, b))


def neg(a):
    return _apply(NEG, (a,))


def scale(a, s: float):
    return _apply(SCALE, (a,), s=float(s))


def add_scalar(a, c: float):
    return _apply(ADD_SCALAR, (a,), c=float(c))


def sigmoid(a):
    return _apply(SIGMOID, (a,))


def softplus(a):
    return _apply(SOFTPLUS, (a,))


def exp(a):
    return _apply(EXP, (a,))


def sqrt(a):
    return _apply(SQRT, (a,))


def absolute(a):
    return _apply(ABS, (a,))


def cos(a):
    return _apply(COS, (a,))


_UNARY = {"sigmoid": sigmoid, "softplus": softplus}
_BINARY = {"add": add, "hadamard": hadamard}


def elementwise(x, fn: str, other=None):
    """Apply ``fn`` entry-wise: sigmoid, softplus, add, hadamard or scale.

    ``other`` is the second operand for add/hadamard and the factor for scale.
    """
    if fn in _UNARY:
        return _UNARY[fn](x)
    if fn in _BINARY:
        if other is None:
            raise ContractError(f"{fn} needs a second operand")
        return _BINARY[fn](x, other)
    if fn == "scale":
        return scale(x, float(other))
    raise ContractError(f"unknown elementwise function {fn!r}")


# -- row ops (the only non-scalar broadcasting) --------------------------------

def _check_row(x, r, what):
    if r.ndim != 1 or x.ndim < 1 or x.shape[-1] != r.shape[0]:
        raise DimensionError(f"{what}: row of shape {r.shape} does not match {x.shape}")


def _fwd_add_row(x, r):
    _check_row(x, r, "add_row")
    return x + r


def _fwd_mul_row(x, r):
    _check_row(x, r, "mul_row")
    return x * r


def _sum_to_row(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


ADD_ROW = Op("add_row", _fwd_add_row, lambda g, x, r, out: (g, _sum_to_row(g)))
MUL_ROW = Op("mul_row", _fwd_mul_row, lambda g, x, r, out: (g * r, _sum_to_row(g * x)))


def add_row(x, r):
    return _apply(ADD_ROW, (x, r))


def mul_row(x, r):
    return _apply(MUL_ROW, (x, r))


# -- contractions ----------------------------------------------------------------

def _parse_einsum(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    a, b = lhs.split(",")
    for sub_, other in ((a, b), (b, a)):
        if len(set(sub_)) != len(sub_):
            raise ContractError(f"repeated index in operand {sub_!r}")
        lonely = set(sub_) - set(other) - set(out)
        if lonely:
            raise ContractError(f"index {sorted(lonely)} summed within one operand")
    return a, b, out


def _fwd_einsum(a, b, spec):
    sa, sb, _ = _parse_einsum(spec)
    if a.ndim != len(sa) or b.ndim != len(sb):
        raise DimensionError(f"einsum {spec}: ranks {a.ndim}, {b.ndim}")
    dims: dict[str, int] = {}
    for sub_, arr in ((sa, a), (sb, b)):
        for ch, n in zip(sub_, arr.shape):
            if dims.setdefault(ch, n) != n:
                raise DimensionError(f"einsum {spec}: index {ch} has sizes {dims[ch]} and {n}")
    return np.einsum(spec, a, b, optimize=True)


def _vjp_einsum(g, a, b, out, spec):
    sa, sb, so = _parse_einsum(spec)
    ga = np.einsum(f"{so},{sb}->{sa}", g, b, optimize=True)
    gb = np.einsum(f"{so},{sa}->{sb}", g, a, optimize=True)
    return ga, gb


EINSUM = Op("einsum", _fwd_einsum, _vjp_einsum)


def einsum(spec: str, a, b):
    """Two-operand contraction with gradients; no implicit broadcasting."""
    return _apply(EINSUM, (a, b), spec=spec)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions {a.shape} x {b.shape}")
    return einsum("ik,kj->ij", a, b)


def linear(x, w, b=None):
    """Row-wise affine map x @ w (+ b) for x of rank >= 1."""
    x = as_tensor(x)
    letters = "abcdefgh"[: x.value.ndim - 1]
    y = einsum(f"{letters}i,ij->{letters}j", x, w)
    return add_row(y, b) if b is not None else y


# -- reductions and reshaping -----------------------------------------------------

def _fwd_sum(a, axis):
    return np.sum(a, axis=axis)


def _vjp_sum(g, a, out, axis):
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


SUM = Op("sum", _fwd_sum, _vjp_sum)


def tsum(a, axis: int | None = None):
    return _apply(SUM, (a,), axis=axis)


def mean_all(a):
    a = as_tensor(a)
    return scale(tsum(a), 1.0 / a.value.size)


def _fwd_reshape(a, shape):
    return a.reshape(shape)


RESHAPE = Op("reshape", _fwd_reshape, lambda g, a, out, shape: (g.reshape(a.shape),))


def reshape(a, shape):
    return _apply(RESHAPE, (a,), shape=tuple(shape))


def _fwd_take(a, idx, axis, squeeze):
    out = np.take(a, idx, axis=axis)
    return np.squeeze(out, axis=axis) if squeeze else out


def _scatter_rows(rows: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """out[k] = sum of rows[e] with seg[e] == k, as a dense one-hot matmul."""
    onehot = np.zeros((n, len(seg)), dtype=rows.dtype)
    onehot[seg, np.arange(len(seg))] = 1.0
    return (onehot @ rows.reshape(len(seg), -1)).reshape((n,) + rows.shape[1:])


def _vjp_take(g, a, out, idx, axis, squeeze):
    if squeeze:
        g = np.expand_dims(g, axis)
    moved = _scatter_rows(np.moveaxis(g, axis, 0), idx, a.shape[axis])
    return (np.moveaxis(moved, 0, axis),)


TAKE = Op("take", _fwd_take, _vjp_take)


def _frozen_index(idx) -> np.ndarray:
    arr = np.array(idx, dtype=np.intp).reshape(-1)
    arr.flags.writeable = False
    return arr


def take(a, idx, axis: int = -1, squeeze: bool = False):
    return _apply(TAKE, (a,), idx=_frozen_index(idx), axis=axis, squeeze=squeeze)


def gather(a, idx):
    """Rows ``a[idx]`` along axis 0."""
    return _apply(TAKE, (a,), idx=_frozen_index(idx), axis=0, squeeze=False)


def _fwd_segment_sum(a, seg, n):
    return _scatter_rows(a, seg, n)


def _vjp_segment_sum(g, a, out, seg, n):
    return (g[seg],)


SEGMENT_SUM = Op("segment_sum", _fwd_segment_sum, _vjp_segment_sum)


def segment_sum(a, seg, n: int):
    """Sum rows of ``a`` into ``n`` buckets given by ``seg``."""
    seg = _frozen_index(seg)
    if len(seg) != as_tensor(a).shape[0]:
        raise DimensionError("segment ids must match the leading axis")
    return _apply(SEGMENT_SUM, (a,), seg=seg, n=int(n))


def _fwd_concat(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _vjp_concat(g, *args, axis):
    xs = args[:-1]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


CONCAT = Op("concat", _fwd_concat, _vjp_concat)


def concat(xs: Sequence, axis: int = -1):
    return _apply(CONCAT, tuple(xs), axis=axis)


def _fwd_stack(*xs, axis):
    return np.stack(xs, axis=axis)


def _vjp_stack(g, *args, axis):
    n = len(args) - 1
    return tuple(np.take(g, i, axis=axis) for i in range(n))


STACK = Op("stack", _fwd_stack, _vjp_stack)


def stack(xs: Sequence, axis: int = -1):
    return _apply(STACK, tuple(xs), axis=axis)


def _fwd_where_rows(a, b, mask):
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))
    _same_shape(a, b, "where_rows")
    return np.where(m, a, b)


def _vjp_where_rows(g, a, b, out, mask):
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))
    return np.where(m, g, 0.0), np.where(m, 0.0, g)


WHERE_ROWS = Op("where_rows", _fwd_where_rows, _vjp_where_rows)


def where_rows(mask, a, b):
    """Row i from ``a`` where mask[i] else from ``b``."""
    return _apply(WHERE_ROWS, (a, b), mask=tuple(bool(m) for m in mask))


# -- normalisation ----------------------------------------------------------------

def _fwd_feature_norm(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _vjp_feature_norm(g, x, out, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gy),)


FEATURE_NORM = Op("feature_norm", _fwd_feature_norm, _vjp_feature_norm)


def feature_norm(x, gamma=None, beta=None, eps: float = 1e-5):
    """Standardise each row over its feature axis, then apply gamma/beta."""
    y = _apply(FEATURE_NORM, (x,), eps=float(eps))
    if gamma is not None:
        y = mul_row(y, gamma)
    if beta is not None:
        y = add_row(y, beta)
    return y


# -- reverse pass -------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` for every parameter registered on ``tape``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[loss.tid] = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.tid, None)
        if g is None:
            continue
        vals = tuple(t.value for t in node.inputs)
        parts = node.op.vjp(g, *vals, node.output.value, **node.kwargs)
        for t, gi in zip(node.inputs, parts):
            if t.tape is not tape or gi is None:
                continue
            if t.tid in grads:
                grads[t.tid] = grads[t.tid] + gi
            else:
                grads[t.tid] = np.array(gi, dtype=np.float64).reshape(t.value.shape)
    return {
        name: grads.get(p.tid, np.zeros_like(p.value)).reshape(p.value.shape)
        for name, p in tape.parameters.items()
    }


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    n_floored: int
    tol: float
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    tape: Tape,
    loss: Tensor,
    step: float = 1e-6,
    tol: float = 1e-5,
    samples_per_param: int | None = 8,
    seed: int = 0,
    floor: float = 1e-7,
    extended: bool = True,
) -> GradCheckReport:
    """Compare :func:`backward` with central differences obtained by replaying the tape.

    For each parameter up to ``samples_per_param`` entries are sampled (all of
    them when None). The relative error is |a - n| / max(|a|, |n|, floor);
    entries where both are exactly zero are skipped.

    With ``extended`` the perturbed replays run in ``np.longdouble``. In
    float64 a step of 1e-6 leaves roughly 1e-10 of rounding noise in each
    difference quotient, which swamps small gradient entries. The truncation
    error h^2 f'''/6 (about 1e-13 here) remains, hence ``floor``: entries
    smaller than it are judged on absolute error tol * floor and counted in
    ``n_floored``.
    """
    if step <= 0 or tol <= 0:
        raise ContractError("step and tol must be positive")
    analytic = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst, checked, skipped, floored = 0.0, 0, 0, 0
    failures = []
    for name, p in tape.parameters.items():
        size = p.value.size
        if samples_per_param is None or samples_per_param >= size:
            flat_idx = np.arange(size)
        else:
            flat_idx = rng.choice(size, samples_per_param, replace=False)
        base = p.value.copy()
        work = base.astype(np.longdouble) if extended else base
        for k in flat_idx:
            idx = np.unravel_index(int(k), p.value.shape)
            vals = []
            for sgn in (1.0, -1.0):
                pert = work.copy()
                pert[idx] += sgn * step
                p.value = pert
                tape.replay()
                vals.append(loss.value.reshape(()))
            numeric = float((vals[0] - vals[1]) / (2.0 * step))
            a = float(analytic[name][idx])
            if a == 0.0 and numeric == 0.0:
                skipped += 1
                continue
            if max(abs(a), abs(numeric)) < floor:
                floored += 1
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            worst = max(worst, rel)
            if rel >= tol:
                failures.append((name, tuple(int(i) for i in idx), a, numeric))
        p.value = base
    tape.replay()
    return GradCheckReport(worst, checked, skipped, floored, tol, failures)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "spframe-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    params = {}
    for k, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ContractError(f"{path}: parameter {k} has {arr.size} values for shape {shape}")
        params[k] = arr.reshape(shape)
    return params, payload.get("meta", {})
