"""``spframe-lab`` command line: graphs, frames, verification, demo, training, evaluation.

Exit codes: 0 all checks passed, 1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .crystal import InvalidLatticeError
from .frames import DegenerateSpectrumError, GLOBAL_METHODS, global_frame, is_frame
from .graph import GraphConstructionError
from .harness import symmetry_demo, verify_invariance
from .io import InputError, Report, load_record, write_report
from .network import FRAME_MODES, ModelConfig, check_params, forward, graph_for, init_params
from .synth import GenerationError, generate_dataset
from .training import TrainConfig, TrainingError, evaluate_mae, train

log = logging.getLogger("spframe_lab")

EXIT_PASS, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return data


def _model_config(args, raw: dict) -> ModelConfig:
    d = dict(raw)
    if args.frame_mode is not None:
        d["frame_mode"] = args.frame_mode
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid model config: {exc}") from None


def _params_for(cfg: ModelConfig, checkpoint) -> dict:
    if checkpoint is None:
        return init_params(cfg)
    try:
        params, _ = ad.load_checkpoint(checkpoint)
    except (OSError, json.JSONDecodeError, ad.ContractError) as exc:
        raise InputError(f"{checkpoint}: {exc}") from None
    check_params(cfg, params)
    return params


def _require_input(args) -> Path:
    if args.input is None:
        raise InputError(f"{args.command} needs --input")
    return Path(args.input)


def cmd_build_graph(args, raw) -> Report:
    cfg = _model_config(args, raw)
    s = load_record(_require_input(args)).structure
    g = graph_for(s, cfg)
    report = Report("build-graph", cfg.to_dict())
    report.metrics["graph"] = g.to_dict()
    report.metrics["in_degree"] = g.in_degree().tolist()
    report.check("every_atom_has_neighbors", bool(np.all(g.in_degree() >= 1)))
    return report


def cmd_frames(args, raw) -> Report:
    cfg = _model_config(args, raw)
    s = load_record(_require_input(args)).structure
    report = Report("frames", cfg.to_dict())
    globals_ = {}
    for method in GLOBAL_METHODS:
        try:
            globals_[method] = global_frame(s.lattice, method)
        except DegenerateSpectrumError as exc:
            report.diagnostics.append(f"global {method}: {exc}")
    report.metrics["global_frames"] = globals_
    res = forward(s, cfg, _params_for(cfg, args.checkpoint))
    report.metrics["atom_frames"] = res.frames
    report.metrics["invariant_frames"] = [f for f in res.invariant_frames if f is not None]
    report.diagnostics.extend(f"{k}: {v}" for k, v in res.diagnostics.items() if v)
    ok = all(is_frame(f) for f in globals_.values())
    ok = ok and all(is_frame(f, 1e-8) for layer in res.frames for f in layer)
    report.check("valid_frames", ok)
    return report


def cmd_verify(args, raw) -> Report:
    cfg = _model_config(args, raw)
    s = load_record(_require_input(args)).structure
    trials = args.trials if args.trials is not None else int(raw.get("trials", 100))
    tol = args.tol if args.tol is not None else float(raw.get("tol", 1e-8))
    return verify_invariance(s, cfg, _params_for(cfg, args.checkpoint), trials, tol, seed=cfg.seed)


def cmd_demo(args, raw) -> Report:
    cfg = _model_config(args, raw)
    return symmetry_demo(cfg, seed=cfg.seed, angle=int(raw.get("angle", 180)))


def cmd_train(args, raw) -> Report:
    cfg = _model_config(args, raw)
    try:
        tc = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from None
    out = Path(args.out) if args.out else Path("run")
    report, _ = train(_require_input(args), cfg, tc, seed=cfg.seed, out_dir=out)
    args.out = str(out / "report.json")
    return report


def cmd_eval(args, raw) -> Report:
    if args.checkpoint is None:
        raise InputError("eval needs --checkpoint")
    cfg = _model_config(args, raw) if (raw or args.frame_mode or args.seed is not None) else None
    return evaluate_mae(_require_input(args), args.checkpoint, cfg, split=raw.get("split"))


def cmd_make_dataset(args, raw) -> Report:
    if args.out is None:
        raise InputError("make-dataset needs --out <directory>")
    n = int(raw.get("n_structures", 200))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    cfg = ModelConfig.from_dict(raw)
    out = generate_dataset(args.out, n, seed, cfg.cutoff, cfg.max_neighbors)
    report = Report("make-dataset", {"n_structures": n, "seed": seed})
    report.metrics["directory"] = str(out)
    report.check("written", (out / "manifest.json").exists())
    args.out = str(out / "report.json")
    return report


COMMANDS = {
    "build-graph": cmd_build_graph,
    "frames": cmd_frames,
    "verify": cmd_verify,
    "demo-symmetry": cmd_demo,
    "train": cmd_train,
    "eval": cmd_eval,
    "make-dataset": cmd_make_dataset,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spframe-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--input", help="structure JSON, or dataset directory for train/eval")
    p.add_argument("--config", help="JSON config with model and training fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report path (train, make-dataset: output directory)")
    p.add_argument("--frame-mode", choices=FRAME_MODES)
    p.add_argument("--trials", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--checkpoint", help="parameter checkpoint (eval, verify, frames)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        raw = _load_config(args.config)
        report = COMMANDS[args.command](args, raw)
    except (InputError, GraphConstructionError, InvalidLatticeError) as exc:
        print(f"spframe-lab: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, GenerationError) as exc:
        print(f"spframe-lab: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_report(report, args.out)
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
