"""Desk-scale frame-aware message-passing network.

Each layer runs a node-wise transformer update on invariant edge features,
rebuilds per-atom frames from the current features, and then applies an
equivariant update whose edge directions are canonicalised by those frames
before being embedded in spherical harmonics of degree 0-2.

Frames are row form throughout (``v -> v @ F.T``), shape (n_atoms, 3, 3).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .crystal import Lattice, Structure
from .frames import (
    COLLINEAR_EPS,
    DegenerateSpectrumError,
    global_row_frame,
    pca_frame,
    quat_to_rotation,
)
from .graph import PeriodicGraph, build_graph, rbf_expand
from .io import InputError

FRAME_MODES = (
    "none",
    "global-qr",
    "global-polar",
    "global-pca",
    "local-gs-equivariant",
    "spframe-gs",
    "spframe-quaternion",
)
MAX_Z = 100
SQRT3 = float(np.sqrt(3.0))
_LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI_CIVITA[_i, _j, _k] = 1.0
    _LEVI_CIVITA[_i, _k, _j] = -1.0


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    n_layers: int = 2
    frame_mode: str = "spframe-quaternion"
    cutoff: float = 4.0
    max_neighbors: int = 12
    n_centers: int = 64
    seed: int = 0
    global_method: str = "qr"
    identity_global: bool = False

    def __post_init__(self):
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.frame_mode not in FRAME_MODES:
            raise ValueError(f"frame_mode must be one of {FRAME_MODES}")
        if self.global_method not in ("qr", "polar", "pca"):
            raise ValueError("global_method must be qr, polar or pca")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    @property
    def global_frame_method(self) -> str:
        """Method used for the shared global frame of this mode."""
        if self.frame_mode.startswith("global-"):
            return self.frame_mode.split("-", 1)[1]
        return self.global_method


# -- parameters -------------------------------------------------------------------

def _attention_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {
        "WQ": (d, d), "WK": (d, d), "WV": (d, d), "WE": (d, d),
        "AK": (2 * d, d), "aK": (d,),
        "AV": (3 * d, d), "aV": (d,), "BV": (d, d),
        "na.g": (d,), "na.b": (d,), "nm.g": (d,), "nm.b": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.feature_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W": (MAX_Z, d),
        "edge.W": (cfg.n_centers, d),
        "edge.b": (d,),
    }
    for layer in range(cfg.n_layers):
        p = f"L{layer}."
        shapes.update({p + "tf." + k: v for k, v in _attention_shapes(d).items()})
        mode = cfg.frame_mode
        if mode in ("local-gs-equivariant", "spframe-gs", "spframe-quaternion"):
            shapes.update({p + "fh." + k: v for k, v in _attention_shapes(d).items()})
        if mode == "spframe-quaternion":
            shapes[p + "fh.Wq"] = (d, 4)
            shapes[p + "fh.bq"] = (4,)
        elif mode in ("local-gs-equivariant", "spframe-gs"):
            width = 2 if mode == "local-gs-equivariant" else 6
            shapes[p + "fh.Wphi"] = (d, width)
            shapes[p + "fh.bphi"] = (width,)
            shapes[p + "fh.WA"] = (3, d)
        shapes.update({
            p + "eq.Win": (d, d),
            p + "eq.Y0": (d,), p + "eq.Y1": (d, 3), p + "eq.Y2": (d, 5),
            p + "eq.n.g": (d,), p + "eq.n.b": (d,),
            p + "eq.Ws": (d, d), p + "eq.bs": (d,),
            p + "eq.Wln": (d, d),
        })
    shapes.update({"out.W1": (d, d), "out.b1": (d,), "out.W2": (d, 1), "out.b2": (1,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Seeded initialisation: N(0, 1/fan_in) weights, unit gains, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1 and leaf[0].islower() and name != "embed.W":
            params[name] = np.zeros(shape)
        elif leaf in ("Y0", "Y1", "Y2"):
            params[name] = rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise InputError(f"parameters do not match config (missing {missing[:3]}, extra {extra[:3]})")
    for k, shape in expected.items():
        if tuple(np.shape(_value(params[k]))) != shape:
            raise InputError(f"parameter {k} has shape {np.shape(_value(params[k]))}, expected {shape}")


def _value(x):
    return x.value if isinstance(x, ad.Tensor) else x


# -- batched graph input ---------------------------------------------------------

def angle_features(directions, frames, lattice: Lattice, f_lattice) -> np.ndarray:
    """Cosines between canonicalised edge directions and canonicalised lattice vectors.

    ``frames`` is one row-form frame or one per edge; ``f_lattice`` is the
    row-form frame applied to the lattice vectors. Returns shape (E, 3).
    """
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = np.broadcast_to(frames, (len(dirs), 3, 3))
    canon = np.einsum("eab,eb->ea", frames, dirs)
    canon = canon / np.linalg.norm(canon, axis=1, keepdims=True)
    lat = lattice.vectors @ np.asarray(f_lattice).T
    lat = lat / np.linalg.norm(lat, axis=1, keepdims=True)
    return canon @ lat.T


def _edge_angle_features(graph: PeriodicGraph, lattice_row: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-edge fallback angles using each atom's edge PCA frame (lattice frame if degenerate)."""
    out = np.zeros((graph.n_edges, 3))
    frames = np.empty((graph.n_edges, 3, 3))
    degenerate = 0
    vecs = graph.edge_vectors
    for i in range(graph.structure.n_atoms):
        idx = graph.incoming(i)
        try:
            f = pca_frame(vecs[idx]).T if len(idx) >= 3 else None
        except DegenerateSpectrumError:
            f = None
        if f is None:
            degenerate += 1
            f = lattice_row
        frames[idx] = f
    if graph.n_edges:
        out = angle_features(graph.direction, frames, graph.structure.lattice, lattice_row)
    return out, degenerate


@dataclass
class GraphBatch:
    """Disjoint union of periodic graphs with precomputed geometric inputs."""

    species: np.ndarray
    graph_id: np.ndarray
    n_graphs: int
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray
    direction: np.ndarray
    rbf: np.ndarray
    global_row: np.ndarray
    angle_feats: np.ndarray
    degree: np.ndarray
    atoms_per_graph: np.ndarray
    graphs: list[PeriodicGraph] = field(repr=False, default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def n_atoms(self) -> int:
        return len(self.species)


def make_batch(graphs: Sequence[PeriodicGraph], cfg: ModelConfig) -> GraphBatch:
    species, gid, src, dst, dist, dirs, grow, angles = [], [], [], [], [], [], [], []
    offset = 0
    notes = {"pca_fallback_qr": 0, "edge_pca_degenerate": 0}
    for g_idx, g in enumerate(graphs):
        s = g.structure
        if any(z < 1 or z > MAX_Z for z in s.species):
            raise InputError(f"atomic numbers must lie in 1..{MAX_Z}")
        method = cfg.global_frame_method
        try:
            row = global_row_frame(s.lattice, method)
        except DegenerateSpectrumError:
            notes["pca_fallback_qr"] += 1
            row = global_row_frame(s.lattice, "qr")
        if cfg.identity_global and cfg.frame_mode.startswith("spframe"):
            row = np.eye(3)
        lattice_row = global_row_frame(s.lattice, "qr")
        feats, degenerate = _edge_angle_features(g, lattice_row)
        notes["edge_pca_degenerate"] += degenerate
        species.extend(s.species)
        gid.extend([g_idx] * s.n_atoms)
        src.append(g.src + offset)
        dst.append(g.dst + offset)
        dist.append(g.distance)
        dirs.append(g.direction)
        grow.append(np.broadcast_to(row, (s.n_atoms, 3, 3)))
        angles.append(feats)
        offset += s.n_atoms
    dst_all = np.concatenate(dst)
    dist_all = np.concatenate(dist)
    n = len(species)
    return GraphBatch(
        species=np.asarray(species, dtype=int),
        graph_id=np.asarray(gid, dtype=int),
        n_graphs=len(graphs),
        src=np.concatenate(src),
        dst=dst_all,
        distance=dist_all,
        direction=np.concatenate(dirs),
        rbf=rbf_expand(dist_all, cfg.n_centers, cfg.cutoff),
        global_row=np.concatenate(grow).copy(),
        angle_feats=np.concatenate(angles),
        degree=np.bincount(dst_all, minlength=n).astype(float),
        atoms_per_graph=np.bincount(np.asarray(gid, dtype=int), minlength=len(graphs)).astype(float),
        graphs=list(graphs),
        notes=notes,
    )


# -- building blocks ------------------------------------------------------------------

def _row_scale(x, s):
    """Multiply row i of x (rank 2 or 3) by the per-row scalar s[i]."""
    x = ad.as_tensor(x)
    spec = {2: "nc,n->nc", 3: "ncm,n->ncm"}[x.value.ndim]
    return ad.einsum(spec, x, s)


def _row_norm(x):
    return ad.sqrt(ad.einsum("nc,nc->n", x, x))


def _recip(x):
    return ad.div(ad.Tensor(np.ones(x.shape)), x)


def embed_nodes(species: Sequence[int], params: dict):
    """One-hot atomic numbers through a learned linear map."""
    z = np.asarray(species, dtype=int)
    if np.any(z < 1) or np.any(z > MAX_Z):
        raise InputError(f"atomic numbers must lie in 1..{MAX_Z}")
    onehot = np.zeros((len(z), MAX_Z))
    onehot[np.arange(len(z)), z - 1] = 1.0
    return ad.matmul(ad.Tensor(onehot), params["embed.W"])


def embed_edges(batch: GraphBatch, params: dict):
    return ad.softplus(ad.linear(ad.Tensor(batch.rbf), params["edge.W"], params["edge.b"]))


def attention_messages(f, e, batch: GraphBatch, p: dict, prefix: str):
    """Per-edge gated messages and their per-destination sums."""
    d = f.shape[-1]
    w = lambda k: p[prefix + k]  # noqa: E731
    q = ad.gather(ad.matmul(f, w("WQ")), batch.dst)
    kf = ad.matmul(f, w("WK"))
    vf = ad.matmul(f, w("WV"))
    key = ad.concat([ad.gather(kf, batch.dst), ad.gather(kf, batch.src)], axis=-1)
    val = ad.concat(
        [ad.gather(vf, batch.dst), ad.gather(vf, batch.src), ad.matmul(e, w("WE"))], axis=-1
    )
    xi_k = ad.softplus(ad.linear(key, w("AK"), w("aK")))
    alpha = ad.scale(ad.mul(q, xi_k), 1.0 / np.sqrt(d))
    xi_v = ad.matmul(ad.softplus(ad.linear(val, w("AV"), w("aV"))), w("BV"))
    gate = ad.sigmoid(ad.feature_norm(alpha, w("na.g"), w("na.b")))
    msg = ad.mul(gate, xi_v)
    return msg, ad.segment_sum(msg, batch.dst, batch.n_atoms)


def transformer_layer(f, e, batch: GraphBatch, p: dict, prefix: str):
    """f_new = softplus(f + norm(sum_j msg_ij))."""
    _, agg = attention_messages(f, e, batch, p, prefix)
    return ad.softplus(ad.add(f, ad.feature_norm(agg, p[prefix + "nm.g"], p[prefix + "nm.b"])))


def batched_gram_schmidt(v1, v2):
    """Row-form frames (n, 3, 3) from two stacks of vectors (n, 3)."""
    e1 = _row_scale(v1, _recip(_row_norm(v1)))
    proj = ad.einsum("nc,nc->n", e1, v2)
    r = ad.sub(v2, _row_scale(e1, proj))
    e2 = _row_scale(r, _recip(_row_norm(r)))
    e3 = ad.einsum("nik,nk->ni", ad.einsum("ijk,nj->nik", ad.Tensor(_LEVI_CIVITA), e1), e2)
    return ad.stack([e1, e2, e3], axis=-2)


def collinear_rows(v1: np.ndarray, v2: np.ndarray, eps: float = COLLINEAR_EPS) -> np.ndarray:
    n1 = np.linalg.norm(v1, axis=1)
    safe = np.where(n1 > 0, n1, 1.0)
    e1 = v1 / safe[:, None]
    resid = v2 - np.sum(e1 * v2, axis=1, keepdims=True) * e1
    return (n1 <= eps) | (np.linalg.norm(resid, axis=1) <= eps)


def _gs_with_fallback(make_vectors, batch: GraphBatch, diagnostics: dict):
    """Gram-Schmidt frames; collinear atoms retry with angle features, then identity."""
    v1, v2 = make_vectors(use_angles=False)
    bad = collinear_rows(v1.value, v2.value)
    if bad.any():
        diagnostics["gs_fallback_retry"] += int(bad.sum())
        r1, r2 = make_vectors(use_angles=True)
        v1 = ad.where_rows(~bad, v1, r1)
        v2 = ad.where_rows(~bad, v2, r2)
        bad = collinear_rows(v1.value, v2.value)
        if bad.any():
            diagnostics["gs_fallback_identity"] += int(bad.sum())
            safe1 = np.tile([1.0, 0.0, 0.0], (batch.n_atoms, 1))
            safe2 = np.tile([0.0, 1.0, 0.0], (batch.n_atoms, 1))
            v1 = ad.where_rows(~bad, v1, ad.Tensor(safe1))
            v2 = ad.where_rows(~bad, v2, ad.Tensor(safe2))
    return batched_gram_schmidt(v1, v2)


def gs_equivariant_frame_head(f, e, batch: GraphBatch, p: dict, prefix: str, diagnostics: dict):
    """v_k = sum_j phi_k(f_i, f_j, e_ij) e_hat_ij, then Gram-Schmidt (equivariant frames)."""
    dirs = ad.Tensor(batch.direction)

    def make_vectors(use_angles: bool):
        edge = e
        if use_angles:
            edge = ad.add(e, ad.matmul(ad.Tensor(batch.angle_feats), p[prefix + "WA"]))
        msg, _ = attention_messages(f, edge, batch, p, prefix)
        phi = ad.linear(msg, p[prefix + "Wphi"], p[prefix + "bphi"])
        out = []
        for k in range(2):
            weighted = ad.einsum("e,ec->ec", phi[..., k], dirs)
            out.append(ad.segment_sum(weighted, batch.dst, batch.n_atoms))
        return out

    return _gs_with_fallback(make_vectors, batch, diagnostics)


def gs_invariant_frame_head(f, e, batch: GraphBatch, p: dict, prefix: str, diagnostics: dict):
    """v_k = sum_j phi_k(f_i, f_j, e_ij) with 3-vector outputs; Gram-Schmidt gives invariant frames."""

    def make_vectors(use_angles: bool):
        edge = e
        if use_angles:
            edge = ad.add(e, ad.matmul(ad.Tensor(batch.angle_feats), p[prefix + "WA"]))
        msg, _ = attention_messages(f, edge, batch, p, prefix)
        phi = ad.linear(msg, p[prefix + "Wphi"], p[prefix + "bphi"])
        summed = ad.segment_sum(phi, batch.dst, batch.n_atoms)
        return ad.take(summed, (0, 1, 2)), ad.take(summed, (3, 4, 5))

    return _gs_with_fallback(make_vectors, batch, diagnostics)


def quaternion_frame_head(f, e, batch: GraphBatch, p: dict, prefix: str, diagnostics: dict):
    """Invariant frames from per-atom quaternions predicted by invariant message passing."""
    _, agg = attention_messages(f, e, batch, p, prefix)
    h = ad.add(f, ad.feature_norm(agg, p[prefix + "nm.g"], p[prefix + "nm.b"]))
    q = ad.softplus(ad.linear(h, p[prefix + "Wq"], p[prefix + "bq"]))
    small = np.linalg.norm(q.value, axis=1) < 1e-12
    if small.any():
        diagnostics["quat_clamped"] += int(small.sum())
        unit = np.tile([1.0, 0.0, 0.0, 0.0], (batch.n_atoms, 1))
        q = ad.where_rows(~small, q, ad.Tensor(unit))
    return quat_to_rotation(q), q


def spherical_harmonics(u) -> tuple:
    """Y0 = 1, Y1 = u, Y2 = real degree-2 harmonics with |Y2(u)| = 1 on the unit sphere.

    Takes a unit 3-vector (numpy) or a Tensor of unit row vectors (E, 3).
    """
    if isinstance(u, ad.Tensor):
        x, y, z = (u[..., k] for k in range(3))
        y2 = ad.stack(
            [
                SQRT3 * (x * y),
                SQRT3 * (y * z),
                1.5 * (z * z) - 0.5,
                SQRT3 * (x * z),
                (0.5 * SQRT3) * (x * x - y * y),
            ],
            axis=-1,
        )
        return None, u, y2
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (3,) or abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise ad.ContractError("spherical_harmonics needs a unit 3-vector")
    x, y, z = u
    y2 = np.array(
        [SQRT3 * x * y, SQRT3 * y * z, 1.5 * z * z - 0.5, SQRT3 * x * z, 0.5 * SQRT3 * (x * x - y * y)]
    )
    return 1.0, u.copy(), y2


def canonical_directions(frames, batch: GraphBatch):
    """e_hat_ij @ F_i.T for each edge, with F_i the frame of the destination atom."""
    per_edge = ad.gather(frames, batch.dst)
    return ad.einsum("eab,eb->ea", per_edge, ad.Tensor(batch.direction))


def equivariant_update(f, frames, batch: GraphBatch, p: dict, prefix: str):
    """Two tensor-product style layers over canonicalised directions.

    First layer: f_{i,l}[c, m] = mean_j f'_j[c] Y_l(u_ij)[m] (plus f'_i for l = 0).
    Second layer: f*_i[c] = mean_j sum_l sum_m W_l[c, m] f_{j,l}[c, m] Y_l(u_ij)[m].
    Output: softplus(softplus(norm(f*)) Ws + bs) + f Wln.
    """
    w = lambda k: p[prefix + k]  # noqa: E731
    n = batch.n_atoms
    inv_deg = ad.Tensor(1.0 / batch.degree[batch.dst])
    u = canonical_directions(frames, batch)
    _, y1, y2 = spherical_harmonics(u)

    fp = ad.matmul(f, w("Win"))
    fj = _row_scale(ad.gather(fp, batch.src), inv_deg)
    f0 = ad.add(fp, ad.segment_sum(fj, batch.dst, n))
    f1 = ad.segment_sum(ad.einsum("ec,em->ecm", fj, y1), batch.dst, n)
    f2 = ad.segment_sum(ad.einsum("ec,em->ecm", fj, y2), batch.dst, n)

    t0 = ad.mul_row(ad.gather(f0, batch.src), w("Y0"))
    t1 = ad.einsum("ecm,em->ec", ad.einsum("ecm,cm->ecm", ad.gather(f1, batch.src), w("Y1")), y1)
    t2 = ad.einsum("ecm,em->ec", ad.einsum("ecm,cm->ecm", ad.gather(f2, batch.src), w("Y2")), y2)
    per_edge = _row_scale(ad.add(ad.add(t0, t1), t2), inv_deg)
    f_star = ad.segment_sum(per_edge, batch.dst, n)

    normed = ad.feature_norm(f_star, w("n.g"), w("n.b"))
    sigma = ad.softplus(ad.linear(ad.softplus(normed), w("Ws"), w("bs")))
    return ad.add(sigma, ad.matmul(f, w("Wln")))


# -- full model -------------------------------------------------------------------------

@dataclass
class ForwardResult:
    prediction: ad.Tensor
    embeddings: ad.Tensor
    frames: list[np.ndarray]
    invariant_frames: list[np.ndarray]
    diagnostics: dict

    @property
    def value(self) -> np.ndarray:
        return self.prediction.value


def _frames_for_layer(f, e, batch, p, layer, cfg, diagnostics):
    prefix = f"L{layer}.fh."
    mode = cfg.frame_mode
    global_row = ad.Tensor(batch.global_row)
    if mode == "none":
        return ad.Tensor(np.broadcast_to(np.eye(3), (batch.n_atoms, 3, 3)).copy()), None
    if mode.startswith("global-"):
        return global_row, None
    if mode == "local-gs-equivariant":
        return gs_equivariant_frame_head(f, e, batch, p, prefix, diagnostics), None
    if mode == "spframe-gs":
        inv = gs_invariant_frame_head(f, e, batch, p, prefix, diagnostics)
    else:
        inv, _ = quaternion_frame_head(f, e, batch, p, prefix, diagnostics)
    return ad.einsum("nab,nbc->nac", inv, global_row), inv


def forward_batch(batch: GraphBatch, cfg: ModelConfig, params: dict) -> ForwardResult:
    """Embed, run ``n_layers`` of (transformer, frame block, equivariant update), pool, MLP."""
    check_params(cfg, params)
    p = {k: ad.as_tensor(v) for k, v in params.items()}
    diagnostics = {"gs_fallback_retry": 0, "gs_fallback_identity": 0, "quat_clamped": 0}
    diagnostics.update(batch.notes)
    f = embed_nodes(batch.species, p)
    e = embed_edges(batch, p)
    frames_log, inv_log = [], []
    for layer in range(cfg.n_layers):
        f = transformer_layer(f, e, batch, p, f"L{layer}.tf.")
        frames, inv = _frames_for_layer(f, e, batch, p, layer, cfg, diagnostics)
        frames_log.append(frames.value.copy())
        inv_log.append(None if inv is None else inv.value.copy())
        f = equivariant_update(f, frames, batch, p, f"L{layer}.eq.")
    pool_w = ad.Tensor(1.0 / batch.atoms_per_graph[batch.graph_id])
    pooled = ad.segment_sum(_row_scale(f, pool_w), batch.graph_id, batch.n_graphs)
    h = ad.softplus(ad.linear(pooled, p["out.W1"], p["out.b1"]))
    y = ad.reshape(ad.linear(h, p["out.W2"], p["out.b2"]), (batch.n_graphs,))
    return ForwardResult(y, f, frames_log, inv_log, diagnostics)


def graph_for(s: Structure, cfg: ModelConfig) -> PeriodicGraph:
    return build_graph(s, cfg.cutoff, cfg.max_neighbors)


def forward(s: Structure, cfg: ModelConfig, params: dict) -> ForwardResult:
    """Single-structure forward pass; prediction has shape (1,)."""
    return forward_batch(make_batch([graph_for(s, cfg)], cfg), cfg, params)
