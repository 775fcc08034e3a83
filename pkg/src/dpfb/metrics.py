"""Prediction metrics and the source/target/overall evaluation report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import TimeSeriesDataset
from .training import Checkpoint, infer

SUBSETS = ("source", "target", "overall")
MFP_GROUPS = {"Pressure": tuple(range(0, 7)), "Flow Rate and Density": tuple(range(7, 13))}
_FIELDS = ("level", "name", "subset", "count", "mse", "nrmse", "r2")


class MetricError(ValueError):
    pass


def _select(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise MetricError(f"pred and truth must be 1-D of equal length, got {pred.shape} and {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != truth.shape:
            raise MetricError("mask must match the series length")
        pred, truth = pred[mask], truth[mask]
    if truth.size == 0:
        raise MetricError("empty selection")
    std = truth.std()
    if not std > 0:
        raise MetricError("truth has zero variance on the selection")
    return pred, truth, std


def nrmse(pred, truth, mask=None) -> float:
    """RMSE over the selected steps divided by the std of truth on the same steps."""
    pred, truth, std = _select(pred, truth, mask)
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / std)


def r_squared(pred, truth, mask=None) -> float:
    pred, truth, _ = _select(pred, truth, mask)
    ss_res = np.sum((pred - truth) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


@dataclass(frozen=True)
class Cell:
    count: int
    mse: float
    nrmse: float
    r2: float


def _cell(pred, truth) -> Cell:
    if truth.size == 0:
        return Cell(0, math.nan, math.nan, math.nan)
    mse = float(np.mean((pred - truth) ** 2))
    if not truth.std() > 0:
        return Cell(truth.size, mse, math.nan, math.nan)
    return Cell(truth.size, mse, nrmse(pred, truth), r_squared(pred, truth))


@dataclass
class EvalReport:
    """Per-variable and per-group metrics on source, target and all steps.

    Keys of ``cells`` are ``(level, name, subset)`` with level ``variable`` or
    ``group``.  A group's NRMSE is the root mean square of its members'
    NRMSEs and its R^2 the mean of theirs, so ``R^2 = 1 - NRMSE^2`` holds at
    both levels.  Group MSE and count pool all member cells.
    """

    variables: tuple[str, ...]
    groups: dict[str, tuple[int, ...]]
    cells: dict[tuple[str, str, str], Cell]
    meta: dict[str, str] = field(default_factory=dict)

    def get(self, level: str, name: str, subset: str) -> Cell:
        return self.cells[(level, name, subset)]

    # -- serialisation -----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.meta.items():
            buf.write(f"# {k}={v}\n")
        buf.write("# groups=" + json.dumps({g: list(ix) for g, ix in self.groups.items()}) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_FIELDS)
        for (level, name, subset), c in self.cells.items():
            writer.writerow([level, name, subset, c.count, repr(c.mse), repr(c.nrmse), repr(c.r2)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        meta, groups, rows = {}, {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                if key == "groups":
                    groups = {g: tuple(ix) for g, ix in json.loads(value).items()}
                else:
                    meta[key] = value
            elif line:
                rows.append(line)
        reader = csv.DictReader(rows)
        if tuple(reader.fieldnames or ()) != _FIELDS:
            raise MetricError(f"unexpected report header {reader.fieldnames}")
        cells, variables = {}, []
        for r in reader:
            cells[(r["level"], r["name"], r["subset"])] = Cell(
                int(r["count"]), float(r["mse"]), float(r["nrmse"]), float(r["r2"]))
            if r["level"] == "variable" and r["name"] not in variables:
                variables.append(r["name"])
        return cls(tuple(variables), groups, cells, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_csv(Path(path).read_text())

    def table(self) -> str:
        """Plain-text table: one row per group, NRMSE and R^2 by subset."""
        head = ["group"] + [f"NRMSE {s}" for s in SUBSETS] + [f"R2 {s}" for s in SUBSETS]
        rows = [head]
        for g in self.groups:
            cells = [self.get("group", g, s) for s in SUBSETS]
            rows.append([g] + [f"{c.nrmse:.3f}" for c in cells] + [f"{c.r2:.3f}" for c in cells])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def default_groups(n_y: int) -> dict[str, tuple[int, ...]]:
    if n_y == 13:
        return dict(MFP_GROUPS)
    return {"all": tuple(range(n_y))}


def build_report(pred, truth, domain, names: Sequence[str] | None = None,
                 groups: Mapping[str, Sequence[int]] | None = None,
                 meta: Mapping[str, str] | None = None) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    domain = np.asarray(domain, dtype=bool)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise MetricError(f"predictions {pred.shape} and labels {truth.shape} must be equal 2-D arrays")
    if domain.shape != (truth.shape[0],):
        raise MetricError("domain flag must cover every step")
    k = truth.shape[1]
    names = tuple(names) if names is not None else tuple(f"y{i + 1}" for i in range(k))
    groups = {g: tuple(ix) for g, ix in (groups or default_groups(k)).items()}
    for g, ix in groups.items():
        if not ix or min(ix) < 0 or max(ix) >= k:
            raise MetricError(f"group {g!r} has indices outside 0..{k - 1}")
    selections = {"source": domain, "target": ~domain, "overall": np.ones_like(domain)}

    cells = {}
    for i, name in enumerate(names):
        for s, sel in selections.items():
            cells[("variable", name, s)] = _cell(pred[sel, i], truth[sel, i])
    for g, ix in groups.items():
        for s in SUBSETS:
            members = [cells[("variable", names[i], s)] for i in ix]
            count = sum(c.count for c in members)
            mse = sum(c.mse * c.count for c in members) / count if count else math.nan
            nr = np.array([c.nrmse for c in members])
            cells[("group", g, s)] = Cell(count, float(mse), float(np.sqrt(np.mean(nr ** 2))),
                                          float(np.mean(1.0 - nr ** 2)))
    return EvalReport(names, groups, cells, dict(meta or {}))


def checkpoint_id(checkpoint: Checkpoint) -> str:
    return hashlib.sha256(json.dumps(checkpoint.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def config_hash(checkpoint: Checkpoint) -> str:
    d = checkpoint.to_dict()
    echo = {k: d[k] for k in ("generative", "potential", "flow", "train")}
    return hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Evaluation:
    report: EvalReport
    y_pred: np.ndarray


def evaluate(checkpoint: Checkpoint, dataset: TimeSeriesDataset,
             groups: Mapping[str, Sequence[int]] | None = None) -> Evaluation:
    """Run inference on ``dataset`` (original units) and score it against its labels."""
    if dataset.n_y == 0:
        raise MetricError("dataset has no label columns")
    if dataset.n_y != checkpoint.gen_spec.n_z:
        raise MetricError(f"dataset has {dataset.n_y} labels, model predicts {checkpoint.gen_spec.n_z}")
    result = infer(checkpoint, dataset.x)
    meta = {"seed": str(checkpoint.seed), "config_hash": config_hash(checkpoint),
            "checkpoint_id": checkpoint_id(checkpoint)}
    report = build_report(result.y_pred, dataset.y, dataset.domain, dataset.y_names, groups, meta)
    return Evaluation(report, result.y_pred)


def write_predictions(path: str | Path, y_true, y_pred, domain) -> None:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    k = y_true.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "domain"] + [f"y_true_{i + 1}" for i in range(k)]
                        + [f"y_pred_{i + 1}" for i in range(k)])
        for n in range(y_true.shape[0]):
            writer.writerow([n, "source" if domain[n] else "target"]
                            + [repr(float(v)) for v in y_true[n]] + [repr(float(v)) for v in y_pred[n]])
