"""
Dynamic token modulation and expansion: layer selection from conflict scores,
expansion plans, model rewriting, parameter overhead, and numerical checks of
the two mechanisms on constructed single-layer instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .analyzer import SpectralBasis, spectral_split, uncentered_covariance
from .autodiff import Tensor
from .errors import ContractError, ValidationError
from .model import MultiTaskTransformer, count_added_parameters

ACTIONS = ("none", "TM", "TE", "TM+TE")
STRATEGIES = ("standard", "random", "reverse", "swap")
PLAN_VERSION = 1
PLAN_RNG_STREAM = 3


@dataclass(frozen=True)
class Modulator:
    """Read-only view of one task's affine modulator at one layer."""

    task: int
    layer: int
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class TaskTokens:
    task: int
    layer: int
    tokens: np.ndarray


def modulators(model: MultiTaskTransformer) -> List[Modulator]:
    out = []
    for d in model.modulated:
        W, b = model.params[f"dtme.tm.{d}.weight"].data, model.params[f"dtme.tm.{d}.bias"].data
        out += [Modulator(i + 1, d, W[i], b[i]) for i in range(W.shape[0])]
    return out


def task_tokens(model: MultiTaskTransformer) -> List[TaskTokens]:
    out = []
    for d in model.expanded:
        T = model.params[f"dtme.te.{d}.tokens"].data
        out += [TaskTokens(i + 1, d, T[i]) for i in range(T.shape[0])]
    return out


def layer_budget(beta: float, depth: int) -> int:
    if not 0.0 < beta <= 1.0:
        raise ValidationError(f"budget fraction beta must lie in (0, 1], got {beta}")
    # round first so 0.3 * 10 does not become 4
    return max(1, math.ceil(round(beta * depth, 9)))


@dataclass
class ExpansionPlan:
    """Per-layer action (layers are 1-based) plus the settings that produced it."""

    actions: Dict[int, str]
    beta: float = 0.5
    tokens_per_task: int = 6
    strategy: str = "standard"
    step: int = 0
    seed: int = 0
    scores: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.actions = {int(d): a for d, a in sorted(self.actions.items())}
        if list(self.actions) != list(range(1, len(self.actions) + 1)):
            raise ValidationError("plan must list every layer 1..D exactly once")
        for d, a in self.actions.items():
            if a not in ACTIONS:
                raise ValidationError(f"layer {d}: unknown action {a!r}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown selection strategy {self.strategy!r}")
        if self.tokens_per_task < 1:
            raise ValidationError("tokens_per_task must be at least 1")
        k = layer_budget(self.beta, self.depth)
        if len(self.tm_layers) > k or len(self.te_layers) > k:
            raise ValidationError(f"plan exceeds the per-mechanism budget of {k} layers")

    @property
    def depth(self) -> int:
        return len(self.actions)

    @property
    def tm_layers(self) -> List[int]:
        return [d for d, a in self.actions.items() if a in ("TM", "TM+TE")]

    @property
    def te_layers(self) -> List[int]:
        return [d for d, a in self.actions.items() if a in ("TE", "TM+TE")]

    @property
    def is_empty(self) -> bool:
        return all(a == "none" for a in self.actions.values())

    @classmethod
    def empty(cls, depth: int, **kw) -> "ExpansionPlan":
        return cls({d: "none" for d in range(1, depth + 1)}, **kw)

    def to_text(self) -> str:
        lines = [
            f"version = {PLAN_VERSION}",
            f"strategy = {self.strategy}",
            f"beta = {self.beta!r}",
            f"tokens_per_task = {self.tokens_per_task}",
            f"step = {self.step}",
            f"seed = {self.seed}",
            "# layer  action  range_score  null_score",
        ]
        for d, a in self.actions.items():
            rs, ns = self.scores.get(d, (float("nan"), float("nan")))
            lines.append(f"layer {d} {a} {rs!r} {ns!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExpansionPlan":
        meta: Dict[str, str] = {}
        actions: Dict[int, str] = {}
        scores: Dict[int, Tuple[float, float]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            try:
                if body.startswith("layer "):
                    _, d, a, rs, ns = body.split()
                    actions[int(d)] = a
                    if rs != "nan":
                        scores[int(d)] = (float(rs), float(ns))
                else:
                    k, v = (s.strip() for s in body.split("=", 1))
                    meta[k] = v
            except ValueError:
                raise ValidationError(f"plan line {lineno}: cannot parse {line.strip()!r}") from None
        if meta.get("version") != str(PLAN_VERSION):
            raise ValidationError(f"unsupported plan version {meta.get('version')!r}")
        try:
            return cls(actions, beta=float(meta["beta"]), tokens_per_task=int(meta["tokens_per_task"]),
                       strategy=meta["strategy"], step=int(meta["step"]), seed=int(meta["seed"]),
                       scores=scores)
        except KeyError as exc:
            raise ValidationError(f"plan is missing field {exc.args[0]!r}") from None


def _rank(scores: Mapping[int, float], k: int, descending: bool) -> List[int]:
    sign = -1.0 if descending else 1.0
    return sorted(sorted(scores, key=lambda d: (sign * scores[d], d))[:k])


def build_plan(severities: Union[Mapping[int, Tuple[float, float]], Sequence[Tuple[float, float]]],
               beta: float = 0.5, strategy: str = "standard", tokens_per_task: int = 6,
               seed: int = 0, step: int = 0, mechanisms: Sequence[str] = ("TM", "TE")
               ) -> ExpansionPlan:
    """Choose TM and TE layers from per-layer (range_score, null_score).

    Each mechanism independently gets ``ceil(beta * D)`` layers. ``mechanisms``
    restricts the plan to TM only, TE only, or neither (ablations).
    """
    if not isinstance(severities, Mapping):
        severities = {d + 1: s for d, s in enumerate(severities)}
    severities = {int(d): (float(a), float(b)) for d, (a, b) in severities.items()}
    D = len(severities)
    if sorted(severities) != list(range(1, D + 1)) or D == 0:
        raise ValidationError("need one severity pair for every layer 1..D")
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown selection strategy {strategy!r}")
    bad = set(mechanisms) - {"TM", "TE"}
    if bad:
        raise ValidationError(f"unknown mechanisms {sorted(bad)}")
    k = layer_budget(beta, D)
    range_s = {d: s[0] for d, s in severities.items()}
    null_s = {d: s[1] for d, s in severities.items()}
    if strategy == "standard":
        tm, te = _rank(range_s, k, True), _rank(null_s, k, True)
    elif strategy == "reverse":
        tm, te = _rank(range_s, k, False), _rank(null_s, k, False)
    elif strategy == "swap":
        tm, te = _rank(null_s, k, True), _rank(range_s, k, True)
    else:
        rng = np.random.default_rng([seed, PLAN_RNG_STREAM])
        tm = sorted(int(d) + 1 for d in rng.choice(D, size=k, replace=False))
        te = sorted(int(d) + 1 for d in rng.choice(D, size=k, replace=False))
    tm = tm if "TM" in mechanisms else []
    te = te if "TE" in mechanisms else []
    actions = {}
    for d in range(1, D + 1):
        a = ("TM" if d in tm else "") + ("+" if d in tm and d in te else "") + ("TE" if d in te else "")
        actions[d] = a or "none"
    return ExpansionPlan(actions, beta=beta, tokens_per_task=tokens_per_task, strategy=strategy,
                         step=step, seed=seed, scores=severities)


def apply_plan(model: MultiTaskTransformer, plan: ExpansionPlan) -> MultiTaskTransformer:
    """Register modulators and task tokens on `model` in place and return it."""
    if model.is_expanded:
        raise ContractError("model has already been expanded")
    if plan.depth != model.config.depth:
        raise ContractError(f"plan covers {plan.depth} layers, model has {model.config.depth}")
    for d in range(1, plan.depth + 1):
        if d in plan.tm_layers:
            model.add_modulators(d)
        if d in plan.te_layers:
            model.add_task_tokens(d, plan.tokens_per_task)
    return model


def param_overhead(before: Union[int, MultiTaskTransformer], after: Union[int, MultiTaskTransformer]) -> float:
    """Percent parameter increase from `before` to `after`."""
    b = before.num_parameters() if isinstance(before, MultiTaskTransformer) else before
    a = after.num_parameters() if isinstance(after, MultiTaskTransformer) else after
    if b <= 0 or a <= 0:
        raise ValidationError("parameter counts must be positive")
    return 100.0 * (a - b) / b


def closed_form_overhead(plan: ExpansionPlan, num_tasks: int, hidden: int, baseline: int) -> float:
    added = count_added_parameters(plan.tm_layers, {d: plan.tokens_per_task for d in plan.te_layers},
                                   num_tasks, hidden)
    return 100.0 * added / baseline


# ---------------------------------------------------------------------------
# Constructed single-layer instances
# ---------------------------------------------------------------------------

def _fitted_basis(rng: np.random.Generator, p: int, m: int, r: float = 100.0) -> SpectralBasis:
    """Basis fitted to a token population whose energy sits in an m-dim subspace."""
    Q = np.linalg.qr(rng.standard_normal((p, p)))[0]
    strong = rng.standard_normal((64, m)) * np.linspace(3.0, 2.0, m)
    weak = 1e-3 * rng.standard_normal((64, p - m))
    pop = np.concatenate([strong, weak], axis=1) @ Q.T
    basis = spectral_split(uncentered_covariance(pop[None]), r)
    if basis.m != m:
        raise ContractError(f"fitted range dimension {basis.m} != constructed {m}")
    return basis


def _flat_norm_sq(grads: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(g * g) for g in grads))


@dataclass
class RangeInstance:
    """Shared layer ``gelu((T * W_i + b_i) S) H_i`` per task, squared loss.

    ``tokens`` lie in the fitted range space and ``shared`` reads only that
    space, so every task gradient at the tokens is a range-space vector.
    """

    tokens: np.ndarray
    shared: np.ndarray
    heads: List[np.ndarray]
    targets: List[np.ndarray]
    weights: np.ndarray
    biases: np.ndarray


def make_range_instance(seed: int, p: int = 8, m: int = 3, n_tokens: int = 6, num_tasks: int = 2,
                        width: int = 4, out_dim: int = 3) -> Tuple[RangeInstance, SpectralBasis]:
    rng = np.random.default_rng(seed)
    basis = _fitted_basis(rng, p, m)
    tokens = rng.standard_normal((n_tokens, m)) @ basis.U_R.T
    shared = basis.U_R @ rng.standard_normal((m, width)) / np.sqrt(m)
    head = rng.standard_normal((width, out_dim)) / np.sqrt(width)
    target = 3.0 * rng.standard_normal((n_tokens, out_dim))
    # tasks alternate between +target and -target through an identical head
    targets = [target * (1.0 if i % 2 == 0 else -1.0) for i in range(num_tasks)]
    return (RangeInstance(tokens, shared, [head.copy() for _ in range(num_tasks)], targets,
                          np.ones((num_tasks, p)), np.zeros((num_tasks, p))), basis)


def _range_losses(inst: RangeInstance, W: Tensor, b: Tensor, T: Tensor) -> List[Tensor]:
    out = []
    for i, (H, Y) in enumerate(zip(inst.heads, inst.targets)):
        z = ad.gelu(ad.matmul(T * W[i] + b[i], inst.shared))
        r = ad.matmul(z, H) - Y
        out.append(ad.scale(ad.sum_(r * r), 0.5 / inst.tokens.shape[0]))
    return out


@dataclass
class Proposition1Report:
    null_gradient_norm: float
    range_conflict_fraction: float
    loss_before: float
    loss_after: float
    eta: float
    gradient_norm_sq: float
    residual_ratio: float

    @property
    def decrease(self) -> float:
        return self.loss_after - self.loss_before

    @property
    def holds(self) -> bool:
        return self.null_gradient_norm <= 1e-8 and self.decrease < 0 and 3.5 <= self.residual_ratio <= 4.5


def _backtrack(loss_at: Callable[[float], float], l0: float, eta0: float, max_halvings: int = 60) -> float:
    eta = eta0
    for _ in range(max_halvings):
        if loss_at(eta) < l0:
            return eta
        eta *= 0.5
    return 0.0


def _residual_ratio(loss_at: Callable[[float], float], l0: float, g2: float, eta: float) -> float:
    def residual(e):
        return abs(loss_at(e) - l0 + e * g2)
    r1, r2 = residual(eta), residual(eta / 2)
    return r1 / r2 if r2 > 0 else float("nan")


def verify_proposition1(inst: RangeInstance, basis: SpectralBasis, eta0: float = 1.0,
                        taylor_eta: float = 1e-3) -> Proposition1Report:
    """Modulator-only descent on a range-space instance (shared weights frozen)."""
    if np.linalg.norm(inst.tokens @ basis.U_N) > 1e-8:
        raise ContractError("instance tokens do not lie in the range space of the basis")
    T = Tensor(inst.tokens, requires_grad=True)
    W = Tensor(inst.weights, requires_grad=True)
    b = Tensor(inst.biases, requires_grad=True)
    losses = _range_losses(inst, W, b, T)
    token_grads = []
    for li in losses:
        T.grad = None
        li.backward()
        token_grads.append(T.grad.copy())
    null_norm = max(float(np.linalg.norm(g @ basis.U_N)) for g in token_grads)
    g_r = [g @ basis.U_R for g in token_grads]
    K = len(g_r)
    conflicts = [np.einsum("np,np->n", g_r[i], g_r[j]) <= 0 for i in range(K) for j in range(i + 1, K)]
    conflict_frac = float(np.mean(conflicts))

    total = losses[0]
    for li in losses[1:]:
        total = total + li
    W.grad = b.grad = None
    total.backward()
    gW, gb = W.grad.copy(), b.grad.copy()
    g2 = _flat_norm_sq([gW, gb])
    l0 = total.item()

    def loss_at(eta: float) -> float:
        Wn, bn = Tensor(inst.weights - eta * gW), Tensor(inst.biases - eta * gb)
        return float(sum(li.item() for li in _range_losses(inst, Wn, bn, Tensor(inst.tokens))))

    eta = _backtrack(loss_at, l0, eta0) if g2 > 0 else 0.0
    l1 = loss_at(eta)
    ratio = _residual_ratio(loss_at, l0, g2, min(taylor_eta, eta0)) if g2 > 0 else float("nan")
    return Proposition1Report(null_norm, conflict_frac, l0, l1, eta, g2, ratio)


@dataclass
class NullInstance:
    """One attention layer with frozen shared weights and task tokens.

    Task i's stream is ``T + softmax(Q K^T) V + softmax(Q K_i^T) V_i`` where
    ``K_i, V_i`` come from task i's tokens; its prediction is a bias-free linear
    head. ``tokens`` lie in the null space of the fitted basis; the value map
    sends a further null-space block into the head's read-out block.
    """

    tokens: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: List[np.ndarray]
    targets: List[np.ndarray]
    task_tokens: np.ndarray


def make_null_instance(seed: int, p: int = 16, m: int = 4, n_tokens: int = 8, num_tasks: int = 2,
                       per_task: int = 2, out_dim: int = 3, block: int = 4) -> Tuple[NullInstance, SpectralBasis]:
    if m + 3 * block > p:
        raise ContractError("p too small for three disjoint null-space blocks")
    rng = np.random.default_rng(seed)
    basis = _fitted_basis(rng, p, m)
    UN = basis.U_N
    Na, Nb, Nc = UN[:, :block], UN[:, block:2 * block], UN[:, 2 * block:3 * block]
    tokens = rng.standard_normal((n_tokens, block)) @ Na.T
    wq = rng.standard_normal((p, p)) / np.sqrt(p)
    wk = rng.standard_normal((p, p)) / np.sqrt(p)
    wv = Nc @ rng.standard_normal((block, block)) @ Nb.T
    head = Nb @ rng.standard_normal((block, out_dim))
    # residual orthogonal to the stream's column space: heads sit at their optimum
    E = rng.standard_normal((n_tokens, out_dim))
    Qz = np.linalg.svd(tokens, full_matrices=False)[0][:, :block]
    E = E - Qz @ (Qz.T @ E)
    targets = [tokens @ head - (E if i % 2 == 0 else -E) for i in range(num_tasks)]
    return (NullInstance(tokens, wq, wk, wv, [head.copy() for _ in range(num_tasks)], targets,
                         np.zeros((num_tasks, per_task, p))), basis)


def _null_losses(inst: NullInstance, T: Tensor, tok: Tensor, heads: Sequence[Tensor],
                 with_tokens: bool = True) -> List[Tensor]:
    p = inst.tokens.shape[1]
    inv = 1.0 / np.sqrt(p)
    q = ad.matmul(T, inst.wq)
    a = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(ad.matmul(T, inst.wk))), inv), axis=-1)
    base = T + ad.matmul(a, ad.matmul(T, inst.wv))
    out = []
    for i, (H, Y) in enumerate(zip(heads, inst.targets)):
        z = base
        if with_tokens:
            ti = tok[i]
            at = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(ad.matmul(ti, inst.wk))), inv), axis=-1)
            z = z + ad.matmul(at, ad.matmul(ti, inst.wv))
        r = ad.matmul(z, H) - Y
        out.append(ad.scale(ad.sum_(r * r), 0.5 / inst.tokens.shape[0]))
    return out


@dataclass
class Proposition2Report:
    range_gradient_norm: float
    shared_gradient_sum_norm: float
    head_gradient_norm: float
    null_conflict_fraction: float
    loss_before: float
    loss_after: float
    eta: float
    predicted_decrease: float
    observed_decrease_small_eta: float

    @property
    def decrease(self) -> float:
        return self.loss_after - self.loss_before

    @property
    def stationary(self) -> bool:
        return self.shared_gradient_sum_norm <= 1e-8 and self.head_gradient_norm <= 1e-8

    @property
    def first_order_error(self) -> float:
        if self.predicted_decrease == 0:
            return 0.0 if self.observed_decrease_small_eta == 0 else float("inf")
        return abs(self.observed_decrease_small_eta - self.predicted_decrease) / abs(self.predicted_decrease)

    @property
    def holds(self) -> bool:
        return self.range_gradient_norm <= 1e-8 and self.stationary and self.decrease < 0


def verify_proposition2(inst: NullInstance, basis: SpectralBasis, eta0: float = 1.0,
                        taylor_eta: float = 1e-4) -> Proposition2Report:
    """Task-token-only descent on a null-space instance (shared tokens frozen)."""
    if np.linalg.norm(inst.tokens @ basis.U_R) > 1e-8:
        raise ContractError("instance tokens do not lie in the null space of the basis")
    T = Tensor(inst.tokens, requires_grad=True)
    tok = Tensor(inst.task_tokens, requires_grad=True)
    heads = [Tensor(h, requires_grad=True) for h in inst.heads]
    losses = _null_losses(inst, T, tok, heads)
    token_grads = []
    for li in losses:
        T.grad = None
        li.backward()
        token_grads.append(T.grad.copy())
    range_norm = max(float(np.linalg.norm(g @ basis.U_R)) for g in token_grads)
    g_n = [g @ basis.U_N for g in token_grads]
    K = len(g_n)
    conflicts = [np.einsum("np,np->n", g_n[i], g_n[j]) <= 0 for i in range(K) for j in range(i + 1, K)]

    # heads and shared tokens, without any task tokens
    T0 = Tensor(inst.tokens, requires_grad=True)
    heads0 = [Tensor(h, requires_grad=True) for h in inst.heads]
    plain = _null_losses(inst, T0, tok, heads0, with_tokens=False)
    total0 = plain[0]
    for li in plain[1:]:
        total0 = total0 + li
    total0.backward()
    shared_sum = float(np.linalg.norm(T0.grad))
    head_norm = float(np.sqrt(_flat_norm_sq([h.grad for h in heads0])))

    total = losses[0]
    for li in losses[1:]:
        total = total + li
    tok.grad = None
    total.backward()
    g = tok.grad.copy()
    g2 = _flat_norm_sq([g])
    l0 = total.item()

    def loss_at(eta: float) -> float:
        moved = Tensor(inst.task_tokens - eta * g)
        frozen = [Tensor(h) for h in inst.heads]
        return float(sum(li.item() for li in _null_losses(inst, Tensor(inst.tokens), moved, frozen)))

    eta = _backtrack(loss_at, l0, eta0) if g2 > 0 else 0.0
    l1 = loss_at(eta)
    small = loss_at(taylor_eta) - l0
    return Proposition2Report(range_norm, shared_sum, head_norm, float(np.mean(conflicts)), l0, l1, eta,
                              -taylor_eta * g2, small)
