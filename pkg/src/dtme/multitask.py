"""
Task specifications, the weighted multi-task objective, the synthetic
conflicting-task generator, per-task metrics and the delta-m aggregate.

Synthetic tasks
---------------
Every sample is an ``grid x grid`` token map. Each token carries ``latent``
Gaussian factors (spatially smoothed over a 3x3 neighbourhood); the model sees
a fixed linear mixing of them plus noise. Task ``i`` reads its own set of
``features`` latent directions, passes them through ``tanh`` and maps them to
its outputs (class logits -> argmax label, or a regression vector).

The conflict knob ``kappa`` interpolates every task's read-out directions
between one common set (``kappa=0``: all tasks want the same features) and
mutually orthogonal, sign-alternating sets (``kappa=1``: the tasks compete for
the token width).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError, ValidationError
from .model import HeadSpec

LOSS_KINDS = ("cross-entropy", "l1", "mse")
METRIC_KINDS = ("accuracy", "l1", "rmse")
LOWER_IS_BETTER = {"accuracy": False, "l1": True, "rmse": True}


@dataclass(frozen=True)
class TaskSpec:
    id: int
    loss: str
    out_dim: int
    weight: float = 1.0
    metric: str = ""

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"task {self.id}: unknown loss {self.loss!r}")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ValidationError(f"task {self.id}: weight must be finite and positive")
        if self.out_dim < 1 or (self.loss == "cross-entropy" and self.out_dim < 2):
            raise ValidationError(f"task {self.id}: bad output dimension {self.out_dim}")
        if not self.metric:
            object.__setattr__(self, "metric", "accuracy" if self.loss == "cross-entropy" else "l1")
        if self.metric not in METRIC_KINDS:
            raise ValidationError(f"task {self.id}: unknown metric {self.metric!r}")

    @property
    def lower_is_better(self) -> bool:
        return LOWER_IS_BETTER[self.metric]

    @property
    def head(self) -> HeadSpec:
        kind = "class-logits" if self.loss == "cross-entropy" else "regression-vector"
        return HeadSpec(kind, self.out_dim)


def validate_tasks(specs: Sequence[TaskSpec]) -> None:
    ids = [s.id for s in specs]
    if ids != list(range(1, len(specs) + 1)):
        raise ValidationError(f"task ids must be 1..K in order, got {ids}")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    seed: int = 0
    n: int = 256
    n_test: int = 256
    grid: int = 8
    in_dim: int = 24
    latent: int = 24
    features: int = 8
    kappa: float = 1.0
    noise: float = 0.05
    smooth: bool = True
    tasks: Tuple[TaskSpec, ...] = field(default_factory=lambda: (
        TaskSpec(1, "cross-entropy", 4), TaskSpec(2, "l1", 4), TaskSpec(3, "l1", 4)))

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.n <= 0:
            raise ValidationError("n must be positive")
        if self.n_test < 0:
            raise ValidationError("n_test must be non-negative")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValidationError(f"kappa must lie in [0, 1], got {self.kappa}")
        if min(self.grid, self.in_dim, self.latent, self.features) < 1:
            raise ValidationError("grid, in_dim, latent and features must be positive")
        if self.features > self.latent:
            raise ValidationError("features cannot exceed latent")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")
        validate_tasks(self.tasks)

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = [dataclasses.asdict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        d["tasks"] = tuple(TaskSpec(**t) for t in d["tasks"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    X: np.ndarray
    Y: List[np.ndarray]
    X_test: np.ndarray
    Y_test: List[np.ndarray]

    @property
    def tasks(self) -> Tuple[TaskSpec, ...]:
        return self.spec.tasks

    def __len__(self) -> int:
        return self.X.shape[0]


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _smooth(z: np.ndarray, grid: int) -> np.ndarray:
    """3x3 box average over the token grid (edge-replicated), per channel."""
    n, _, c = z.shape
    g = z.reshape(n, grid, grid, c)
    pad = np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    out = sum(pad[:, i:i + grid, j:j + grid] for i in range(3) for j in range(3)) / 9.0
    out = out / out.std()
    return out.reshape(n, grid * grid, c)


def task_readouts(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> List[np.ndarray]:
    """Per-task latent read-out matrices (latent x features) for the given kappa."""
    K, q, h = len(spec.tasks), spec.latent, spec.features
    common = _orthonormal(rng, q, h)
    basis = _orthonormal(rng, q, q)
    out = []
    for i in range(K):
        # mutually orthogonal blocks while the latent width allows, then reuse cyclically
        cols = [(i * h + k) % q for k in range(h)]
        own = basis[:, cols] * (-1.0 if i % 2 else 1.0)
        mix = (1.0 - spec.kappa) * common + spec.kappa * own
        out.append(np.linalg.qr(mix)[0] if spec.kappa not in (0.0, 1.0) else mix)
    return out


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Deterministic dataset for `spec` (train and test splits)."""
    if spec.n <= 0:
        raise ValidationError("n must be positive")
    rng = np.random.default_rng(spec.seed)
    mixing = rng.standard_normal((spec.latent, spec.in_dim)) / np.sqrt(spec.latent)
    readouts = task_readouts(spec, rng)
    width = max(t.out_dim for t in spec.tasks)
    shared = rng.standard_normal((spec.features, width))
    heads = [((1.0 - spec.kappa) * shared[:, :t.out_dim] + spec.kappa * rng.standard_normal((spec.features, t.out_dim)))
             / np.sqrt(spec.features) for t in spec.tasks]
    total = spec.n + spec.n_test
    z = rng.standard_normal((total, spec.tokens, spec.latent))
    if spec.smooth:
        z = _smooth(z, spec.grid)
    X = z @ mixing + spec.noise * rng.standard_normal((total, spec.tokens, spec.in_dim))
    Y = []
    for task, R, H in zip(spec.tasks, readouts, heads):
        raw = np.tanh(1.5 * (z @ R)) @ H
        if task.loss == "cross-entropy":
            Y.append(np.argmax(raw, axis=-1).astype(np.float64))
        else:
            Y.append(raw / raw.std())
    return Dataset(spec, X[:spec.n], [y[:spec.n] for y in Y], X[spec.n:], [y[spec.n:] for y in Y])


# ---------------------------------------------------------------------------
# Objective and metrics
# ---------------------------------------------------------------------------

def task_loss(output: Tensor, label: np.ndarray, spec: TaskSpec) -> Tensor:
    if spec.loss == "cross-entropy":
        return ad.cross_entropy(output, label)
    if spec.loss == "l1":
        return ad.l1_loss(output, label)
    return ad.mse_loss(output, label)


def multitask_loss(outputs: Sequence[Tensor], labels: Sequence[np.ndarray],
                   specs: Sequence[TaskSpec], weights: Optional[Sequence[float]] = None
                   ) -> Tuple[Tensor, List[Tensor]]:
    """Return (sum_i w_i L_i, [L_1 .. L_K])."""
    if not (len(outputs) == len(labels) == len(specs)):
        raise ContractError(f"arity mismatch: {len(outputs)} outputs, {len(labels)} labels, "
                            f"{len(specs)} specs")
    w = [s.weight for s in specs] if weights is None else list(weights)
    if len(w) != len(specs):
        raise ContractError("one weight per task is required")
    losses = [task_loss(o, y, s) for o, y, s in zip(outputs, labels, specs)]
    total = None
    for wi, li in zip(w, losses):
        term = ad.scale(li, wi)
        total = term if total is None else total + term
    return total, losses


def task_metric(pred: np.ndarray, label: np.ndarray, spec: TaskSpec) -> float:
    if spec.metric == "accuracy":
        return float(np.mean(np.argmax(pred, axis=-1) == label.astype(np.int64)))
    if spec.metric == "l1":
        return float(np.mean(np.abs(pred - label)))
    return float(np.sqrt(np.mean((pred - label) ** 2)))


@dataclass
class MetricRow:
    task: int
    metric: str
    model: float
    baseline: float
    lower_is_better: bool


@dataclass
class MetricTable:
    rows: List[MetricRow]

    def __post_init__(self):
        tasks = [r.task for r in self.rows]
        if len(set(tasks)) != len(tasks):
            raise ValidationError("duplicate task rows in metric table")

    @classmethod
    def from_values(cls, model: Sequence[float], baseline: Sequence[float],
                    lower_is_better: Sequence[bool], metrics: Optional[Sequence[str]] = None):
        if not (len(model) == len(baseline) == len(lower_is_better)):
            raise ValidationError("model and baseline columns must cover the same tasks")
        metrics = metrics or [""] * len(model)
        return cls([MetricRow(i + 1, m, float(a), float(b), bool(l))
                    for i, (a, b, l, m) in enumerate(zip(model, baseline, lower_is_better, metrics))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "metric", "model", "baseline", "lower_is_better"])
        for r in self.rows:
            w.writerow([r.task, r.metric, repr(r.model), repr(r.baseline), int(r.lower_is_better)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricTable":
        body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
        reader = csv.DictReader(io.StringIO(body))
        if reader.fieldnames != ["task", "metric", "model", "baseline", "lower_is_better"]:
            raise ValidationError(f"unexpected metrics.csv header {reader.fieldnames}")
        return cls([MetricRow(int(r["task"]), r["metric"], float(r["model"]), float(r["baseline"]),
                              bool(int(r["lower_is_better"]))) for r in reader])


def delta_m(table: MetricTable, flags: Optional[Sequence[bool]] = None) -> float:
    """Average signed relative change vs. the baseline column, in percent.

    100 / K * sum_i (-1)^{l_i} (M_m,i - M_b,i) / M_b,i
    """
    rows = table.rows
    if not rows:
        raise ContractError("empty metric table")
    flags = [r.lower_is_better for r in rows] if flags is None else list(flags)
    if len(flags) != len(rows):
        raise ContractError("one lower-is-better flag per task is required")
    total = 0.0
    for r, low in zip(rows, flags):
        if r.baseline == 0:
            raise ZeroDivisionError(f"task {r.task}: baseline value is zero")
        sign = -1.0 if low else 1.0
        total += sign * (r.model - r.baseline) / r.baseline
    return 100.0 * total / len(rows)


# ---------------------------------------------------------------------------
# Binary container for datasets
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"DTMEDATA"
DATASET_VERSION = 1


def save_dataset(path, ds: Dataset) -> str:
    """Write the dataset container; returns the spec hash stored in its header."""
    from .io import write_container

    arrays = {"X": ds.X, "X_test": ds.X_test}
    for i, (y, yt) in enumerate(zip(ds.Y, ds.Y_test)):
        arrays[f"Y.{i + 1}"] = y
        arrays[f"Y_test.{i + 1}"] = yt
    header = {
        "version": DATASET_VERSION,
        "spec_hash": ds.spec.digest(),
        "spec": ds.spec.to_dict(),
        "dims": {"n": ds.spec.n, "n_test": ds.spec.n_test, "tokens": ds.spec.tokens,
                 "in_dim": ds.spec.in_dim, "tasks": len(ds.spec.tasks)},
    }
    write_container(path, DATASET_MAGIC, header, arrays)
    return header["spec_hash"]


def load_dataset(path) -> Dataset:
    from .io import read_container

    header, arrays = read_container(path, DATASET_MAGIC)
    if header.get("version") != DATASET_VERSION:
        raise ValidationError(f"unsupported dataset version {header.get('version')}")
    spec = SyntheticDatasetSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_hash"]:
        raise ValidationError("dataset spec hash does not match its header")
    K = len(spec.tasks)
    ds = Dataset(spec, arrays["X"], [arrays[f"Y.{i}"] for i in range(1, K + 1)],
                 arrays["X_test"], [arrays[f"Y_test.{i}"] for i in range(1, K + 1)])
    dims = header["dims"]
    if ds.X.shape != (dims["n"], dims["tokens"], dims["in_dim"]):
        raise ShapeError(f"dataset body {ds.X.shape} does not match header dims {dims}")
    return ds
