"""Symmetry-preserving frames for crystal structures at desk scale."""

from .crystal import Lattice, RigidMotion, Structure, SymmetryOp, apply_rigid_motion, orbits
from .frames import compose_spframe, global_frame, gram_schmidt_frame, quat_to_rotation
from .graph import build_graph, rbf_expand
from .harness import count_distinct_embeddings, symmetry_demo, verify_invariance
from .io import load_structure, write_report
from .network import ModelConfig, forward, init_params
from .synth import generate_screw_structure, synthetic_target
from .training import TrainConfig, evaluate_mae, train

__version__ = "0.1.0"

__all__ = [
    "Lattice", "RigidMotion", "Structure", "SymmetryOp", "apply_rigid_motion", "orbits",
    "compose_spframe", "global_frame", "gram_schmidt_frame", "quat_to_rotation",
    "build_graph", "rbf_expand",
    "count_distinct_embeddings", "symmetry_demo", "verify_invariance",
    "load_structure", "write_report",
    "ModelConfig", "forward", "init_params",
    "generate_screw_structure", "synthetic_target",
    "TrainConfig", "evaluate_mae", "train",
]
