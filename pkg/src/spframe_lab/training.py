"""L1 training with Adam and MAE evaluation on structure-file datasets."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import InputError, Report, load_record
from .network import ModelConfig, check_params, forward_batch, graph_for, init_params, make_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 3e-3
    batch_size: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not (0 <= self.lr < math.inf):
            raise ValueError("epochs >= 0, batch_size >= 1 and finite lr >= 0 are required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    names: list[str]
    graphs: list
    targets: np.ndarray
    split: np.ndarray  # "train" or "holdout"

    def subset(self, which: str) -> "Dataset":
        idx = np.flatnonzero(self.split == which)
        return Dataset([self.names[i] for i in idx], [self.graphs[i] for i in idx], self.targets[idx], self.split[idx])

    def __len__(self) -> int:
        return len(self.names)


def load_dataset(path, cfg: ModelConfig) -> Dataset:
    """Read manifest.json if present, otherwise every *.json file as training data."""
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"{root}: dataset directory not found")
    manifest = root / "manifest.json"
    if manifest.exists():
        try:
            entries = json.loads(manifest.read_text())["structures"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{manifest}: unreadable manifest ({exc})") from None
        files = [(e["file"], e.get("split", "train")) for e in entries]
    else:
        files = [(p.name, "train") for p in sorted(root.glob("*.json"))]
    if not files:
        raise InputError(f"{root}: empty dataset")
    names, graphs, targets, split = [], [], [], []
    for name, which in files:
        rec = load_record(root / name)
        if rec.property is None:
            raise InputError(f"{root / name}: no property value")
        names.append(name)
        graphs.append(graph_for(rec.structure, cfg))
        targets.append(rec.property)
        split.append(which)
    return Dataset(names, graphs, np.asarray(targets, dtype=np.float64), np.asarray(split))


def _predict(ds: Dataset, cfg: ModelConfig, params: dict, scale: tuple[float, float], batch_size: int) -> np.ndarray:
    mu, sd = scale
    out = []
    for start in range(0, len(ds), batch_size):
        batch = make_batch(ds.graphs[start:start + batch_size], cfg)
        out.append(forward_batch(batch, cfg, params).value * sd + mu)
    return np.concatenate(out) if out else np.zeros(0)


class Adam:
    def __init__(self, params: dict, tc: TrainConfig):
        self.tc = tc
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        tc = self.tc
        self.t += 1
        c1 = 1.0 - tc.beta1 ** self.t
        c2 = 1.0 - tc.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = tc.beta1 * self.m[k] + (1.0 - tc.beta1) * g
            self.v[k] = tc.beta2 * self.v[k] + (1.0 - tc.beta2) * g * g
            params[k] = params[k] - tc.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + tc.eps)


def train(
    dataset_dir,
    cfg: ModelConfig,
    tc: TrainConfig | None = None,
    seed: int = 0,
    out_dir=None,
) -> tuple[Report, dict]:
    """Fit the model with L1 loss on standardised targets.

    Row 0 of the loss curve is the training MAE before any update; row k is
    the mean minibatch loss during epoch k. ``final_train_loss`` is a full
    pass after the last update. Writes loss.csv and checkpoint.json to
    ``out_dir`` when given.
    """
    tc = tc or TrainConfig()
    data = load_dataset(dataset_dir, cfg)
    tr, ho = data.subset("train"), data.subset("holdout")
    if len(tr) == 0:
        raise InputError(f"{dataset_dir}: no training structures")
    mu = float(np.mean(tr.targets))
    sd = float(np.std(tr.targets)) or 1.0
    scale = (mu, sd)
    params = init_params(cfg, seed)
    opt = Adam(params, tc)
    rng = np.random.default_rng([seed, 11])

    def holdout_mae() -> float:
        return float(np.mean(np.abs(_predict(ho, cfg, params, scale, tc.batch_size) - ho.targets))) if len(ho) else math.nan

    initial = float(np.mean(np.abs(_predict(tr, cfg, params, scale, tc.batch_size) - tr.targets)))
    curve = [(0, initial, holdout_mae())]
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(tr))
        total = 0.0
        for start in range(0, len(tr), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch = make_batch([tr.graphs[i] for i in idx], cfg)
            target = (tr.targets[idx] - mu) / sd
            with ad.Tape() as tape:
                p = tape.watch(params)
                pred = forward_batch(batch, cfg, p).prediction
                loss = ad.mean_all(ad.absolute(ad.sub(pred, ad.Tensor(target))))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = ad.backward(tape, loss)
            tape.clear()
            opt.step(params, grads)
            total += loss.item() * sd * len(idx)
        curve.append((epoch, total / len(tr), holdout_mae() if epoch == tc.epochs else math.nan))
        log.info("epoch %d train %.5f", epoch, curve[-1][1])

    final_pred = _predict(tr, cfg, params, scale, tc.batch_size)
    final = float(np.mean(np.abs(final_pred - tr.targets)))
    if not np.isfinite(final):
        raise TrainingError("non-finite training loss after the last update")
    ho_mae = curve[-1][2]
    baseline = float(np.mean(np.abs(ho.targets - mu))) if len(ho) else math.nan

    report = Report("train", {**cfg.to_dict(), **tc.to_dict(), "seed": seed, "dataset": str(dataset_dir)})
    report.metrics.update({
        "n_train": len(tr),
        "n_holdout": len(ho),
        "initial_train_loss": initial,
        "final_train_loss": final,
        "loss_ratio": final / initial if initial > 0 else math.nan,
        "holdout_mae": ho_mae,
        "baseline_holdout_mae": baseline,
        "loss_curve": [[e, l] for e, l, _ in curve],
    })
    report.check("finite_loss", all(np.isfinite(l) for _, l, _ in curve))
    meta = {"config": cfg.to_dict(), "train": tc.to_dict(), "seed": seed, "target_mean": mu, "target_std": sd}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "holdout_mae"])
            for e, l, h in curve:
                w.writerow([e, repr(l), "" if math.isnan(h) else repr(h)])
        ad.save_checkpoint(out / "checkpoint.json", params, meta)
        report.metrics["checkpoint"] = str(out / "checkpoint.json")
    return report, {"params": params, "meta": meta, "curve": curve}


def evaluate_mae(dataset_dir, checkpoint, cfg: ModelConfig | None = None, split: str | None = None) -> Report:
    """MAE of a checkpoint over a dataset, next to the mean-predictor baseline.

    The baseline predicts the training-target mean stored in the checkpoint.
    ``split`` restricts evaluation to "train" or "holdout" entries.
    """
    try:
        params, meta = ad.load_checkpoint(checkpoint)
    except (OSError, json.JSONDecodeError, ad.ContractError) as exc:
        raise InputError(f"{checkpoint}: {exc}") from None
    ck_cfg = ModelConfig.from_dict(meta.get("config", {}))
    cfg = cfg or ck_cfg
    # the seed only matters for initialisation
    diff = sorted(k for k, v in cfg.to_dict().items() if k != "seed" and ck_cfg.to_dict().get(k) != v)
    if diff:
        raise InputError(f"config does not match checkpoint (fields {diff})")
    check_params(cfg, params)
    data = load_dataset(dataset_dir, cfg)
    if split is not None:
        data = data.subset(split)
        if len(data) == 0:
            raise InputError(f"{dataset_dir}: no {split} structures")
    mu, sd = float(meta.get("target_mean", 0.0)), float(meta.get("target_std", 1.0))
    pred = _predict(data, cfg, params, (mu, sd), 32)
    mae = float(np.mean(np.abs(pred - data.targets)))
    baseline = float(np.mean(np.abs(data.targets - mu)))
    report = Report("eval", {**cfg.to_dict(), "checkpoint": str(checkpoint), "split": split})
    report.metrics.update({"n": len(data), "mae": mae, "baseline_mae": baseline})
    report.check("finite", bool(np.isfinite(mae)))
    return report
