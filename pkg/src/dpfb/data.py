"""Time-series datasets: CSV ingestion, normalisation, domain split, windowing,
and a synthetic setpoint-switching process used in place of plant data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MFP_DATA_COLUMNS = ("LI405", "FT104_density", "LI504", "VC501", "VC302", "VC101", "PO1")
MFP_LABEL_COLUMNS = ("PT312", "PT401", "PT408", "PT403", "PT501", "PT408_dp", "PT403_dp",
                     "FT305", "FT104", "FT407", "FT406", "FT407_density", "FT406_density")
AIR_SETPOINTS = (0.0208, 0.0278, 0.0347, 0.0417)
WATER_SETPOINTS = (0.5, 1.0, 2.0, 3.5, 6.0)
SOURCE_RANGE = (0.0278, 0.0347)

ROLES = ("data", "label", "aux")


class DataError(ValueError):
    """Malformed input data or schema."""


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class TimeSeriesDataset:
    """Aligned measurements ``x`` (L x n_x) and labels ``y`` (L x n_y).

    ``domain`` is True on source steps.  ``aux`` holds extra named columns
    that are neither model inputs nor labels (e.g. a setpoint used only to
    decide the domain).
    """

    x: np.ndarray
    y: np.ndarray
    x_names: tuple[str, ...]
    y_names: tuple[str, ...]
    domain: np.ndarray | None = None
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    x_stats: NormStats | None = None
    y_stats: NormStats | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x_names, self.y_names = tuple(self.x_names), tuple(self.y_names)
        if self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if self.x.shape[1] != len(self.x_names) or self.y.shape[1] != len(self.y_names):
            raise DataError("column names do not match array widths")
        if self.domain is None:
            self.domain = np.ones(len(self), dtype=bool)
        self.domain = np.asarray(self.domain, dtype=bool)
        if self.domain.shape != (len(self),):
            raise DataError("domain flag must cover every step")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    def column(self, name: str) -> np.ndarray:
        if name in self.y_names:
            return self.y[:, self.y_names.index(name)]
        if name in self.aux:
            return self.aux[name]
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        raise DataError(f"unknown column {name!r}")

    def source_fraction(self) -> float:
        return float(self.domain.mean())


# ---------------------------------------------------------------------------
# CSV + schema

def mfp_schema() -> dict[str, str]:
    schema = {name: "data" for name in MFP_DATA_COLUMNS}
    schema.update({name: "label" for name in MFP_LABEL_COLUMNS})
    return schema


def read_schema(path: str | Path) -> dict[str, str]:
    """Parse ``name = role`` lines; ``#`` starts a comment."""
    schema: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'name = role'")
        name, role = (part.strip() for part in line.split("=", 1))
        if role not in ROLES:
            raise DataError(f"{path}:{lineno}: role {role!r} not in {ROLES}")
        if name in schema:
            raise DataError(f"{path}:{lineno}: duplicate column {name!r}")
        schema[name] = role
    return schema


def write_schema(schema: Mapping[str, str], path: str | Path) -> None:
    lines = [f"{name} = {role}" for name, role in schema.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path: str | Path, schema: Mapping[str, str]) -> TimeSeriesDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [name for name in schema if name not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            values = []
            for col, cell in zip(header, row):
                if col not in schema:
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col!r} has non-numeric value {cell!r}") from None
                if not math.isfinite(values[-1]):
                    raise DataError(f"{path}:{lineno}: column {col!r} is not finite")
            rows.append(values)
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    idx = {name: header.index(name) for name in schema}
    x_names = [n for n, r in schema.items() if r == "data"]
    y_names = [n for n, r in schema.items() if r == "label"]
    aux = {n: table[:, idx[n]].copy() for n, r in schema.items() if r == "aux"}
    x = table[:, [idx[n] for n in x_names]]
    y = table[:, [idx[n] for n in y_names]]
    return TimeSeriesDataset(x, y, x_names, y_names, aux=aux)


def write_csv(dataset: TimeSeriesDataset, path: str | Path) -> dict[str, str]:
    """Write ``dataset`` as CSV and return the matching schema."""
    names = list(dataset.x_names) + list(dataset.y_names) + list(dataset.aux)
    cols = [dataset.x, dataset.y] + [v[:, None] for v in dataset.aux.values()]
    table = np.hstack(cols)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])
    schema = {n: "data" for n in dataset.x_names}
    schema.update({n: "label" for n in dataset.y_names})
    schema.update({n: "aux" for n in dataset.aux})
    return schema


# ---------------------------------------------------------------------------
# preprocessing

def fit_stats(values: np.ndarray, names: Sequence[str]) -> NormStats:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    for name, s in zip(names, std):
        if not s > 0:
            raise DataError(f"column {name!r} has zero variance on the fitting subset")
        if not np.isfinite(s):
            raise DataError(f"column {name!r} overflows when standardised")
    return NormStats(mean, std)


def normalize(dataset: TimeSeriesDataset, stats_from: TimeSeriesDataset | None = None,
              x_stats: NormStats | None = None, y_stats: NormStats | None = None) -> TimeSeriesDataset:
    """z-score ``x`` and ``y`` with statistics of the fitting subset.

    Stats come from ``x_stats``/``y_stats`` when given, else from
    ``stats_from`` (default: the dataset itself).  They are stored on the
    result for the inverse transform.
    """
    fit = stats_from if stats_from is not None else dataset
    x_stats = x_stats or fit_stats(fit.x, fit.x_names)
    y_stats = y_stats or fit_stats(fit.y, fit.y_names)
    return replace(dataset, x=x_stats.apply(dataset.x), y=y_stats.apply(dataset.y),
                   x_stats=x_stats, y_stats=y_stats)


def normalize_for_training(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    """Measurement stats from every step, label stats from source steps only.

    Target labels are never seen during training, so they must not leak into
    the label scaling either.
    """
    if not dataset.domain.any():
        raise DataError("training data has no source-domain steps")
    x_stats = fit_stats(dataset.x, dataset.x_names)
    y_stats = fit_stats(dataset.y[dataset.domain], dataset.y_names)
    return normalize(dataset, x_stats=x_stats, y_stats=y_stats)


def denormalize(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    if dataset.x_stats is None or dataset.y_stats is None:
        raise DataError("dataset carries no normalisation stats")
    return replace(dataset, x=dataset.x_stats.invert(dataset.x), y=dataset.y_stats.invert(dataset.y),
                   x_stats=None, y_stats=None)


def domain_split(dataset: TimeSeriesDataset, column: str, low: float, high: float) -> np.ndarray:
    """Source mask: value within ``[low, high]`` (both bounds inclusive)."""
    values = dataset.column(column)
    return (values >= low) & (values <= high)


def with_domain(dataset: TimeSeriesDataset, column: str, low: float, high: float) -> TimeSeriesDataset:
    return replace(dataset, domain=domain_split(dataset, column, low, high))


@dataclass(frozen=True)
class Window:
    index: int
    start: int
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray


def window(dataset: TimeSeriesDataset, length: int = 100) -> list[Window]:
    """Non-overlapping windows in order; the trailing remainder is dropped."""
    if length < 1 or length > len(dataset):
        raise DataError(f"window length {length} invalid for {len(dataset)} steps")
    out = []
    for i in range(len(dataset) // length):
        s = i * length
        out.append(Window(i, s, dataset.x[s:s + length], dataset.y[s:s + length],
                          dataset.domain[s:s + length]))
    return out


# ---------------------------------------------------------------------------
# synthetic process

@dataclass(frozen=True)
class SynthConfig:
    """Setpoint-switching nonlinear state-space process.

    Driver 1 plays the role of the air flow rate and decides the domain.
    Dwell times are drawn per segment; driver-1 segments are assigned to the
    source or target setpoints so that the running source fraction tracks
    ``source_fraction``.
    """

    n_x: int = 7
    n_y: int = 13
    length: int = 13200
    driver1_setpoints: tuple[float, ...] = AIR_SETPOINTS
    driver2_setpoints: tuple[float, ...] = WATER_SETPOINTS
    dwell_min: int = 150
    dwell_max: int = 450
    source_low: float = SOURCE_RANGE[0]
    source_high: float = SOURCE_RANGE[1]
    source_fraction: float = 0.45
    state_gain: float = 0.8
    driver_gain: float = 1.5
    obs_gain: float = 1.0
    process_noise: float = 0.01
    label_noise: float = 0.01
    obs_noise: float = 0.05
    matrix_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        if len(self.driver1_setpoints) < 2 or len(self.driver2_setpoints) < 2:
            raise ValueError("each driver needs at least two setpoints")
        if min(self.process_noise, self.label_noise, self.obs_noise) <= 0:
            raise ValueError("noise scales must be positive")
        if not 1 <= self.dwell_min <= self.dwell_max:
            raise ValueError("dwell range must satisfy 1 <= min <= max")
        src = [s for s in self.driver1_setpoints if self.source_low <= s <= self.source_high]
        if not src or len(src) == len(self.driver1_setpoints):
            raise ValueError("driver-1 setpoints must include both source and target values")


SMALL_SYNTH = SynthConfig(n_x=3, n_y=2, length=20000, dwell_min=100, dwell_max=400)


@dataclass(frozen=True)
class ProcessMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def process_matrices(config: SynthConfig) -> ProcessMatrices:
    """Fixed system matrices, drawn from ``matrix_seed`` (independent of ``seed``)."""
    rng = np.random.default_rng(config.matrix_seed)
    n_s, n_x = config.n_y, config.n_x
    A = rng.normal(size=(n_s, n_s))
    A *= config.state_gain / np.linalg.norm(A, 2)
    B = config.driver_gain * rng.normal(size=(n_s, 2)) / np.sqrt(2)
    B[:, 0] *= 2.0  # driver 1 dominates so the domains differ in distribution
    C = config.obs_gain * rng.normal(size=(n_x, n_s)) / np.sqrt(n_s)
    D = rng.normal(size=(n_s, n_s)) / np.sqrt(n_s) + np.eye(n_s)
    return ProcessMatrices(A, B, C, D)


def _scaled(setpoints: Sequence[float]) -> dict[float, float]:
    arr = np.asarray(setpoints, dtype=np.float64)
    mid, span = arr.mean(), arr.std()
    return {float(s): float((s - mid) / span) for s in setpoints}


def driver_schedule(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant setpoint sequences for both drivers."""
    L = config.length
    src = [s for s in config.driver1_setpoints if config.source_low <= s <= config.source_high]
    tgt = [s for s in config.driver1_setpoints if s not in src]
    d1 = np.empty(L)
    pos, source_steps = 0, 0
    prev = None
    while pos < L:
        dwell = int(rng.integers(config.dwell_min, config.dwell_max + 1))
        dwell = min(dwell, L - pos)
        # pick the domain that keeps the running source fraction on target
        want_source = source_steps < config.source_fraction * (pos + dwell)
        pool = [s for s in (src if want_source else tgt) if s != prev] or (src if want_source else tgt)
        value = pool[int(rng.integers(len(pool)))]
        d1[pos:pos + dwell] = value
        if want_source:
            source_steps += dwell
        prev = value
        pos += dwell
    d2 = np.empty(L)
    pos, prev = 0, None
    while pos < L:
        dwell = min(int(rng.integers(config.dwell_min, config.dwell_max + 1)), L - pos)
        pool = [s for s in config.driver2_setpoints if s != prev]
        value = pool[int(rng.integers(len(pool)))]
        d2[pos:pos + dwell] = value
        prev = value
        pos += dwell
    return d1, d2


def simulate(config: SynthConfig, d1: np.ndarray, d2: np.ndarray, rng: np.random.Generator | None,
             noise: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the state recursion; returns ``(states, labels, measurements)``."""
    mats = process_matrices(config)
    s1, s2 = _scaled(config.driver1_setpoints), _scaled(config.driver2_setpoints)
    drive = np.column_stack([[s1[float(v)] for v in d1], [s2[float(v)] for v in d2]])
    L, n_s = len(d1), config.n_y
    states = np.empty((L, n_s))
    s = np.tanh(mats.B @ drive[0])
    for n in range(L):
        states[n] = s
        s = np.tanh(mats.A @ s + mats.B @ drive[n])
        if noise:
            s = s + config.process_noise * rng.normal(size=n_s)
    clean_x = np.tanh(states @ mats.D.T) @ mats.C.T
    if not noise:
        return states, states.copy(), clean_x
    labels = states + config.label_noise * rng.normal(size=states.shape)
    meas = clean_x + config.obs_noise * rng.normal(size=clean_x.shape)
    return states, labels, meas


def synth_generate(config: SynthConfig = SynthConfig()) -> TimeSeriesDataset:
    rng = np.random.default_rng(config.seed)
    d1, d2 = driver_schedule(config, rng)
    _, labels, meas = simulate(config, d1, d2, rng)
    x_names = [f"x{i + 1}" for i in range(config.n_x)]
    y_names = [f"y{i + 1}" for i in range(config.n_y)]
    domain = (d1 >= config.source_low) & (d1 <= config.source_high)
    return TimeSeriesDataset(meas, labels, x_names, y_names, domain=domain,
                             aux={"air_flow_setpoint": d1, "water_flow_setpoint": d2})
