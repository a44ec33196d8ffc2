"""
Deterministic training loops: joint multi-task, single-task reference, DTME
with mid-run expansion, and PCGrad; plus conflict monitoring snapshots.

Randomness comes from named streams derived from the run seed, so turning
DTME on or off never shifts the initialisation or the minibatch order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .analyzer import (ConflictStats, SpectralBasis, aggregate_layer_conflicts, cosine_bins,
                       detect_conflicts, spectral_split, uncentered_covariance)
from .errors import ContractError, NumericError, ValidationError
from .expansion import (ExpansionPlan, apply_plan, build_plan, closed_form_overhead, param_overhead)
from .model import ModelConfig, MultiTaskTransformer
from .multitask import Dataset, MetricTable, TaskSpec, delta_m, multitask_loss, task_metric

RNG_STREAMS = {"init": 0, "data": 1, "pcgrad": 2, "plan": 3}
OPTIMIZERS = ("adam", "sgd")


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, RNG_STREAMS[name]])


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    poly_power: float = 0.9
    seed: int = 0
    timing: float = 0.05
    monitor_every: int = 0
    monitor_samples: int = 16
    measure_samples: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise ValidationError("learning rate must be finite and non-negative")
        if not 0.0 <= self.timing < 1.0:
            raise ValidationError("timing must lie in [0, 1)")
        if self.monitor_every < 0 or self.monitor_samples < 1 or self.measure_samples < 0:
            raise ValidationError("monitor/measure sizes must be non-negative")


@dataclass(frozen=True)
class DTMESettings:
    r: float = 100.0
    beta: float = 0.5
    tokens_per_task: int = 6
    strategy: str = "standard"
    mechanisms: Tuple[str, ...] = ("TM", "TE")

    def __post_init__(self):
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        if not self.r > 0:
            raise ValidationError("r must be positive")


@dataclass
class Snapshot:
    """Conflict state at one training step."""

    step: int
    layers: List[ConflictStats]
    param_histogram: np.ndarray

    def fractions(self) -> Tuple[float, float]:
        """Overall (range, null) conflict fraction across layers."""
        total = sum(s.examined * len(s.pairs) for s in self.layers)
        if total == 0:
            return 0.0, 0.0
        rng_c = sum(sum(s.range_counts.values()) for s in self.layers)
        null_c = sum(sum(s.null_counts.values()) for s in self.layers)
        return rng_c / total, null_c / total

    def to_dict(self) -> dict:
        rf, nf = self.fractions()
        return {"step": self.step, "range_fraction": rf, "null_fraction": nf,
                "param_histogram": [int(v) for v in self.param_histogram],
                "layers": [s.to_dict() for s in self.layers]}


@dataclass
class RunRecord:
    mode: str
    losses: np.ndarray
    snapshots: List[Snapshot] = field(default_factory=list)
    metrics: List[float] = field(default_factory=list)
    plan: Optional[ExpansionPlan] = None
    overhead: float = 0.0
    closed_form_overhead: float = 0.0
    severities: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    wall_clock: float = 0.0
    tasks: Tuple[int, ...] = ()

    def conflict_reduction(self) -> Tuple[float, float]:
        """Percent drop of the (range, null) conflict fraction, first vs last snapshot."""
        if len(self.snapshots) < 2:
            raise ContractError("need at least two snapshots")
        (r0, n0), (r1, n1) = self.snapshots[0].fractions(), self.snapshots[-1].fractions()
        return (100.0 * (r0 - r1) / r0 if r0 else 0.0, 100.0 * (n0 - n1) / n0 if n0 else 0.0)

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.losses).tobytes())
        h.update(np.asarray(self.metrics, dtype=np.float64).tobytes())
        if self.plan is not None:
            h.update(self.plan.to_text().encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

class Optimizer:
    """Adam (decoupled weight decay) or SGD with a polynomial learning-rate decay.

    State is keyed by parameter name, so parameters added mid-run simply start
    with fresh moments.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

    def lr_at(self, step: int) -> float:
        c = self.config
        return c.lr * (1.0 - step / c.steps) ** c.poly_power

    def step(self, params: Dict[str, ad.Tensor], step: int) -> None:
        c = self.config
        lr = self.lr_at(step)
        if lr == 0.0:
            return
        for name, t in params.items():
            g = t.grad
            if g is None:
                continue
            if c.optimizer == "sgd":
                t.data = t.data - lr * (g + c.weight_decay * t.data)
                continue
            m, v, k = self.state.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
            k += 1
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * v + (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** k)
            vhat = v / (1 - c.beta2 ** k)
            t.data = t.data - lr * (mhat / (np.sqrt(vhat) + c.adam_eps) + c.weight_decay * t.data)
            self.state[name] = (m, v, k)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def model_config_for(dataset: Dataset, depth: int = 6, hidden: int = 32, heads: int = 2,
                     tasks: Optional[Sequence[int]] = None, **kw) -> ModelConfig:
    specs = dataset.tasks if tasks is None else [dataset.tasks[i - 1] for i in tasks]
    return ModelConfig(depth=depth, hidden=hidden, heads=heads, tokens=dataset.spec.tokens,
                       in_dim=dataset.spec.in_dim, head_specs=tuple(s.head for s in specs), **kw)


def build_model(config: ModelConfig, seed: int) -> MultiTaskTransformer:
    return MultiTaskTransformer(config, stream_rng(seed, "init"))


class BatchStream:
    """Epoch-wise shuffled minibatch indices from the data RNG stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs = n, min(batch_size, n)
        self.rng = stream_rng(seed, "data")
        self.order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self.order.size < self.bs:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:self.bs], self.order[self.bs:]
        return idx


def _check_finite(values: Sequence[float], step: int) -> None:
    for i, v in enumerate(values):
        if not np.isfinite(v):
            raise NumericError(f"training diverged at step {step}: loss of task {i + 1} is {v}")


def evaluate(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
             specs: Sequence[TaskSpec], batch: int = 64) -> List[float]:
    preds: List[List[np.ndarray]] = [[] for _ in specs]
    for s in range(0, X.shape[0], batch):
        for i, out in enumerate(model.predict(X[s:s + batch])):
            preds[i].append(out)
    return [task_metric(np.concatenate(p), y, spec) for p, y, spec in zip(preds, Y, specs)]


def _task_token_gradients(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
                          specs: Sequence[TaskSpec]):
    """One forward pass, one backward per task.

    Returns the block-input tokens per layer (stream 0, shape (B, N, p)) and
    ``grads[d][i]``: task i's gradient at the layer-d tokens it actually uses.
    """
    outs, acts = model.forward(X, retain=True)
    _, losses = multitask_loss(outs, Y, specs)
    D = model.config.depth
    grads: List[List[np.ndarray]] = [[] for _ in range(D)]
    for li in losses:
        for t in acts.tokens:
            t.grad = None
        li.backward()
        for d in range(1, D + 1):
            grads[d - 1].append(acts.task_gradient(d, len(grads[d - 1])).copy())
    tokens = [acts.tokens[d].data[0].copy() for d in range(D)]
    model.zero_grad()
    return tokens, grads


@dataclass
class TokenGradients:
    """Block-input tokens ``tokens[d-1]`` (n, N, p) and per-task gradients ``grads[d-1][i]``."""

    tokens: List[np.ndarray]
    grads: List[List[np.ndarray]]

    def bases(self, r: float) -> Dict[int, SpectralBasis]:
        return {d + 1: spectral_split(uncentered_covariance(t, layer=d + 1), r)
                for d, t in enumerate(self.tokens)}

    def conflicts(self, bases: Dict[int, SpectralBasis]) -> List[ConflictStats]:
        return [detect_conflicts(g, bases[d + 1], layer=d + 1) for d, g in enumerate(self.grads)]


def collect_token_gradients(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
                            specs: Sequence[TaskSpec], batch: int = 32) -> TokenGradients:
    if X.shape[0] == 0:
        raise ValidationError("no samples to analyse")
    D, K = model.config.depth, len(specs)
    toks: List[List[np.ndarray]] = [[] for _ in range(D)]
    grads: List[List[List[np.ndarray]]] = [[[] for _ in range(K)] for _ in range(D)]
    for s in range(0, X.shape[0], batch):
        t, g = _task_token_gradients(model, X[s:s + batch], [y[s:s + batch] for y in Y], specs)
        for d in range(D):
            toks[d].append(t[d])
            for i in range(K):
                grads[d][i].append(g[d][i])
    return TokenGradients([np.concatenate(t) for t in toks],
                          [[np.concatenate(gi) for gi in gd] for gd in grads])


def measure_conflicts(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
                      specs: Sequence[TaskSpec], r: float, batch: int = 32,
                      bases: Optional[Dict[int, SpectralBasis]] = None
                      ) -> Tuple[Dict[int, SpectralBasis], List[ConflictStats]]:
    """Covariance + split per layer (unless `bases` is given), then conflict counts."""
    tg = collect_token_gradients(model, X, Y, specs, batch)
    bases = tg.bases(r) if bases is None else bases
    return bases, tg.conflicts(bases)


def _shared_names(model: MultiTaskTransformer) -> List[str]:
    return [n for n in model.params if n.startswith("blocks.")]


def parameter_cosines(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
                      specs: Sequence[TaskSpec]) -> np.ndarray:
    """Cosine between task gradients on each block's shared weights, for every pair."""
    outs, _ = model.forward(X)
    _, losses = multitask_loss(outs, Y, specs)
    per_task = []
    for li in losses:
        model.zero_grad()
        li.backward()
        per_task.append({n: model.params[n].grad.copy() for n in _shared_names(model)
                         if model.params[n].grad is not None})
    model.zero_grad()
    out = []
    for d in range(1, model.config.depth + 1):
        pre = f"blocks.{d}."
        vecs = [np.concatenate([g[n].ravel() for n in sorted(g) if n.startswith(pre)]) for g in per_task]
        for i, j in combinations(range(len(vecs)), 2):
            a, b = vecs[i], vecs[j]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            out.append(float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0)
    return np.asarray(out)


def monitor_conflicts(model: MultiTaskTransformer, X: np.ndarray, Y: Sequence[np.ndarray],
                      specs: Sequence[TaskSpec], bases: Dict[int, SpectralBasis], step: int) -> Snapshot:
    """Token-space range/null counts (with cached bases) and parameter-space cosines."""
    _, stats = measure_conflicts(model, X, Y, specs, r=1.0, bases=bases)
    return Snapshot(step, stats, cosine_bins(parameter_cosines(model, X, Y, specs)))


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

GradientHook = Callable[[MultiTaskTransformer, List[ad.Tensor], int], None]


class _Loop:
    """Shared step/monitor bookkeeping for every trainer variant."""

    def __init__(self, model, dataset: Dataset, config: TrainConfig, specs, labels, test_labels,
                 r_monitor: float = 100.0):
        if len(specs) != model.config.num_tasks:
            raise ContractError(f"model has {model.config.num_tasks} heads, {len(specs)} tasks given")
        self.model, self.ds, self.config = model, dataset, config
        self.specs, self.Y, self.Y_test = list(specs), list(labels), list(test_labels)
        self.opt = Optimizer(config)
        self.batches = BatchStream(len(dataset), config.batch_size, config.seed)
        self.losses = np.zeros((config.steps, len(self.specs)))
        self.snapshots: List[Snapshot] = []
        self.bases: Optional[Dict[int, SpectralBasis]] = None
        self.r_monitor = r_monitor
        m = min(config.monitor_samples, len(dataset))
        self.monitor_X = dataset.X[:m]
        self.monitor_Y = [y[:m] for y in self.Y]

    def maybe_monitor(self, step: int, force: bool = False) -> None:
        c = self.config
        if len(self.specs) < 2 or not (force or (c.monitor_every and step % c.monitor_every == 0)):
            return
        if self.snapshots and self.snapshots[-1].step == step:
            return
        if self.bases is None:
            self.bases, _ = measure_conflicts(self.model, self.monitor_X, self.monitor_Y, self.specs,
                                              self.r_monitor)
        self.snapshots.append(monitor_conflicts(self.model, self.monitor_X, self.monitor_Y,
                                                self.specs, self.bases, step))

    def run(self, start: int, stop: int, hook: Optional[GradientHook] = None) -> None:
        model = self.model
        for step in range(start, stop):
            if self.config.monitor_every:
                self.maybe_monitor(step, force=(step == 0))
            idx = self.batches.next()
            outs, _ = model.forward(self.ds.X[idx])
            labels = [y[idx] for y in self.Y]
            total, losses = multitask_loss(outs, labels, self.specs)
            vals = [l.item() for l in losses]
            _check_finite(vals, step)
            self.losses[step] = vals
            model.zero_grad()
            if hook is None:
                total.backward()
            else:
                hook(model, losses, step)
            self.opt.step(model.params, step)

    def finish(self, mode: str, started: float, tasks: Sequence[int]) -> RunRecord:
        if self.config.monitor_every:
            self.maybe_monitor(self.config.steps, force=True)
        metrics = evaluate(self.model, self.ds.X_test, self.Y_test, self.specs)
        for i, v in enumerate(metrics):
            if not np.isfinite(v):
                raise NumericError(f"test metric of task {tasks[i]} is not finite")
        return RunRecord(mode, self.losses, self.snapshots, metrics, wall_clock=time.perf_counter() - started,
                         tasks=tuple(tasks))


def train_joint(model: MultiTaskTransformer, dataset: Dataset, config: TrainConfig) -> RunRecord:
    """Minimise sum_i w_i L_i over all tasks with shared weights."""
    if model.is_expanded:
        raise ContractError("joint training expects an unexpanded model")
    t0 = time.perf_counter()
    loop = _Loop(model, dataset, config, dataset.tasks, dataset.Y, dataset.Y_test)
    loop.run(0, config.steps)
    return loop.finish("joint", t0, [s.id for s in dataset.tasks])


def train_single_task(model: MultiTaskTransformer, dataset: Dataset, task: int,
                      config: TrainConfig) -> RunRecord:
    """Train a one-head model on task `task` (1-based) alone."""
    if not 1 <= task <= len(dataset.tasks):
        raise ValidationError(f"task {task} outside 1..{len(dataset.tasks)}")
    if model.config.num_tasks != 1:
        raise ContractError("single-task training expects a one-head model")
    t0 = time.perf_counter()
    spec = dataset.tasks[task - 1]
    loop = _Loop(model, dataset, config, [spec], [dataset.Y[task - 1]], [dataset.Y_test[task - 1]])
    loop.run(0, config.steps)
    return loop.finish("st", t0, [task])


def train_dtme(model: MultiTaskTransformer, dataset: Dataset, config: TrainConfig,
               settings: DTMESettings = DTMESettings()) -> RunRecord:
    """Warm up jointly, measure token-space conflicts once, expand, keep training.

    The total step budget is ``config.steps`` including the warmup.
    """
    if model.is_expanded:
        raise ContractError("DTME training expects an unexpanded model")
    t0 = time.perf_counter()
    loop = _Loop(model, dataset, config, dataset.tasks, dataset.Y, dataset.Y_test, settings.r)
    warm = int(round(config.timing * config.steps))
    loop.run(0, warm)
    if config.monitor_every:
        loop.maybe_monitor(warm, force=(warm == 0))
    n = config.measure_samples or len(dataset)
    bases, stats = measure_conflicts(model, dataset.X[:n], [y[:n] for y in dataset.Y], dataset.tasks,
                                     settings.r)
    severities = aggregate_layer_conflicts(stats)
    plan = build_plan(severities, settings.beta, settings.strategy, settings.tokens_per_task,
                      seed=config.seed, step=warm, mechanisms=settings.mechanisms)
    before = model.num_parameters()
    apply_plan(model, plan)
    loop.run(warm, config.steps)
    rec = loop.finish("dtme", t0, [s.id for s in dataset.tasks])
    rec.plan = plan
    rec.severities = severities
    rec.overhead = param_overhead(before, model)
    rec.closed_form_overhead = closed_form_overhead(plan, model.config.num_tasks, model.config.hidden, before)
    return rec


def pcgrad_step(grads: Sequence[np.ndarray], rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Project each task gradient off the others it conflicts with, then sum.

    For task i, the other tasks are visited in a random order drawn from `rng`;
    whenever ``g_i . g_j < 0`` the component of g_i along the original g_j is
    removed. Zero-norm g_j are skipped.
    """
    if len(grads) < 2:
        raise ContractError("PCGrad needs at least two task gradients")
    gs = [np.asarray(g, dtype=np.float64) for g in grads]
    rng = np.random.default_rng(0) if rng is None else rng
    total = np.zeros_like(gs[0])
    for i, gi in enumerate(gs):
        g = gi.copy()
        others = [j for j in range(len(gs)) if j != i]
        for j in rng.permutation(others):
            gj = gs[int(j)]
            nn = float(gj @ gj)
            if nn == 0.0:
                continue
            dot = float(g @ gj)
            if dot < 0.0:
                g = g - (dot / nn) * gj
        total = total + g
    return total


def train_pcgrad(model: MultiTaskTransformer, dataset: Dataset, config: TrainConfig) -> RunRecord:
    """Joint training where shared-parameter gradients are combined by PCGrad."""
    if model.is_expanded:
        raise ContractError("PCGrad training expects an unexpanded model")
    t0 = time.perf_counter()
    rng = stream_rng(config.seed, "pcgrad")
    shared = [n for n in model.params if not n.startswith("heads.")]

    def hook(m: MultiTaskTransformer, losses: List[ad.Tensor], step: int) -> None:
        flat, own = [], {}
        for i, li in enumerate(losses):
            m.zero_grad()
            ad.backward(ad.scale(li, m_specs[i].weight))
            flat.append(np.concatenate([_grad_or_zero(m.params[n]).ravel() for n in shared]))
            pre = f"heads.{i}."
            own.update({n: t.grad.copy() for n, t in m.params.items() if n.startswith(pre) and t.grad is not None})
        combined = pcgrad_step(flat, rng)
        m.zero_grad()
        off = 0
        for n in shared:
            t = m.params[n]
            t.grad = combined[off:off + t.size].reshape(t.shape)
            off += t.size
        for n, g in own.items():
            m.params[n].grad = g

    m_specs = list(dataset.tasks)
    loop = _Loop(model, dataset, config, dataset.tasks, dataset.Y, dataset.Y_test)
    loop.run(0, config.steps, hook=hook)
    return loop.finish("pcgrad", t0, [s.id for s in dataset.tasks])


def _grad_or_zero(t: ad.Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros(t.shape)


def metric_table(record: RunRecord, baselines: Sequence[float], specs: Sequence[TaskSpec]) -> MetricTable:
    return MetricTable.from_values(record.metrics, baselines, [s.lower_is_better for s in specs],
                                   [s.metric for s in specs])


def run_delta_m(record: RunRecord, baselines: Sequence[float], specs: Sequence[TaskSpec]) -> float:
    return delta_m(metric_table(record, baselines, specs))
