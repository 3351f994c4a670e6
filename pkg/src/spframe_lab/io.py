"""Structure JSON files and JSON reports."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crystal import InvalidLatticeError, InvalidOpError, Lattice, Structure, SymmetryOp, wrap

log = logging.getLogger(__name__)

FRAC_SLACK = 1e-9


class InputError(ValueError):
    """Malformed or invalid input file."""


@dataclass
class StructureRecord:
    structure: Structure
    ops: list[SymmetryOp] = field(default_factory=list)
    property: float | None = None

    def to_dict(self) -> dict:
        s = self.structure
        out = {
            "lattice": s.lattice.vectors.tolist(),
            "species": list(s.species),
            "frac_coords": s.frac.tolist(),
        }
        if self.ops:
            out["symmetry_ops"] = [
                {"w_rot": op.w_rot.tolist(), "w_trans": op.w_trans.tolist()} for op in self.ops
            ]
        if self.property is not None:
            out["property"] = float(self.property)
        return out


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise InputError(f"{where}: missing required key {key!r}")
    return d[key]


def parse_structure(data: dict, where: str = "<input>") -> StructureRecord:
    if not isinstance(data, dict):
        raise InputError(f"{where}: top level must be a JSON object")
    try:
        rows = np.asarray(_require(data, "lattice", where), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{where}: lattice is not numeric: {exc}") from None
    if rows.shape != (3, 3):
        raise InputError(f"{where}: lattice must be 3x3 (one row per vector), got {rows.shape}")
    try:
        lattice = Lattice.from_rows(rows)
    except InvalidLatticeError as exc:
        raise InputError(f"{where}: {exc}") from None

    species = _require(data, "species", where)
    if not isinstance(species, list) or not all(isinstance(z, int) for z in species):
        raise InputError(f"{where}: species must be a list of integers")
    try:
        frac = np.asarray(_require(data, "frac_coords", where), dtype=np.float64).reshape(-1, 3)
    except ValueError:
        raise InputError(f"{where}: frac_coords must be a list of 3-vectors") from None
    if len(species) == 0 or len(species) != len(frac):
        raise InputError(f"{where}: need equal, non-zero numbers of species and frac_coords")
    for i, row in enumerate(frac):
        if np.any(row < -FRAC_SLACK) or np.any(row > 1.0 + FRAC_SLACK):
            raise InputError(f"{where}: frac_coords[{i}] = {row.tolist()} outside [0, 1]")
        if np.any(row >= 1.0 - 1e-12) or np.any(row < 0.0):
            log.warning("%s: frac_coords[%d] = %s wrapped into [0, 1)", where, i, row.tolist())
    structure = Structure(tuple(species), wrap(frac), lattice)

    ops = []
    for k, entry in enumerate(data.get("symmetry_ops") or []):
        try:
            op = SymmetryOp(_require(entry, "w_rot", f"{where}: symmetry_ops[{k}]"), _require(entry, "w_trans", f"{where}: symmetry_ops[{k}]"))
            op.validate(lattice)
        except (InvalidOpError, ValueError, TypeError) as exc:
            raise InputError(f"{where}: symmetry_ops[{k}]: {exc}") from None
        ops.append(op)
    prop = data.get("property")
    return StructureRecord(structure, ops, None if prop is None else float(prop))


def load_record(path) -> StructureRecord:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_structure(data, str(path))


def load_structure(path) -> Structure:
    return load_record(path).structure


def save_record(record: StructureRecord, path) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=2))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


@dataclass
class Report:
    command: str
    config: dict
    metrics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def check(self, name: str, ok: bool) -> bool:
        self.checks[name] = bool(ok)
        return bool(ok)

    def to_dict(self) -> dict:
        return _jsonable({
            "command": self.command,
            "config": self.config,
            "metrics": self.metrics,
            "checks": self.checks,
            "pass": self.passed,
            "diagnostics": self.diagnostics,
        })


def write_report(report: Report, path=None) -> None:
    text = json.dumps(report.to_dict(), indent=2)
    if path is None or str(path) == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")
