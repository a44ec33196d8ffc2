"""
Toy transformer encoder with per-task heads and DTME hook points.

Token activations flow as a 4-D array ``(streams, batch, tokens, channels)``.
Before any token modulation there is a single shared stream. A modulated layer
maps the stream(s) to ``K`` per-task streams, which later layers process with
the same shared weights (the stream axis is just another batch axis). Task
heads read their own stream once the model has branched.

Task tokens are appended to the keys/values of a block's attention and dropped
again after the block, so the token count seen by the next layer never changes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError, ValidationError

HEAD_KINDS = ("class-logits", "regression-vector")
TE_ATTENTION_MODES = ("additive", "joint")
INIT_STD = 0.02


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    out_dim: int

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValidationError(f"unknown head kind {self.kind!r}")
        if self.out_dim < 1:
            raise ValidationError("head out_dim must be positive")


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the encoder.

    ``te_attention`` picks how shared queries see task tokens: ``"additive"``
    adds a second softmax over task tokens only (exactly output-neutral while
    task tokens are zero), ``"joint"`` uses one softmax over shared and task keys.
    """

    depth: int
    hidden: int
    heads: int
    tokens: int
    in_dim: int
    head_specs: Tuple[HeadSpec, ...]
    mlp_ratio: int = 4
    te_attention: str = "additive"

    def __post_init__(self):
        object.__setattr__(self, "head_specs", tuple(self.head_specs))
        if min(self.depth, self.tokens, self.in_dim, self.heads, self.mlp_ratio) < 1:
            raise ValidationError("all model extents must be positive")
        if self.hidden < 2:
            raise ValidationError("hidden width must be at least 2")
        if self.hidden % self.heads:
            raise ValidationError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not self.head_specs:
            raise ValidationError("at least one task head is required")
        if self.te_attention not in TE_ATTENTION_MODES:
            raise ValidationError(f"te_attention must be one of {TE_ATTENTION_MODES}")

    @property
    def num_tasks(self) -> int:
        return len(self.head_specs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_specs"] = [dataclasses.asdict(h) for h in self.head_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["head_specs"] = tuple(HeadSpec(**h) for h in d["head_specs"])
        return cls(**d)


@dataclass
class TokenBatch:
    """Shared tokens of one layer for one input sample (N x p)."""

    tokens: np.ndarray
    layer: int
    sample: int


@dataclass
class LayerActivations:
    """Block-input tokens for layers 1..D, captured before any modulation.

    ``tokens[d - 1]`` has shape (streams, batch, N, p).
    """

    tokens: List[Tensor] = field(default_factory=list)

    def batches(self, layer: int, stream: int = 0) -> List[TokenBatch]:
        arr = self.tokens[layer - 1].data[stream]
        return [TokenBatch(arr[b], layer, b) for b in range(arr.shape[0])]

    def task_gradient(self, layer: int, task: int) -> np.ndarray:
        """Gradient of the last backpropagated loss at layer `layer`, as task `task` sees it."""
        t = self.tokens[layer - 1]
        if t.grad is None:
            raise ContractError(f"no gradient retained at layer {layer}")
        s = task if t.shape[0] > 1 else 0
        return t.grad[s]


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class MultiTaskTransformer:
    """Pre-norm ViT-style encoder (MHSA -> residual -> GELU MLP -> residual).

    Parameters live in ``self.params`` under stable dotted names; insertion order
    is deterministic and is also the checkpoint order.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.modulated: List[int] = []
        self.expanded: Dict[int, int] = {}
        rng = np.random.default_rng(0) if rng is None else rng
        c = config
        p, hid = c.hidden, c.hidden * c.mlp_ratio
        self._add("embed.weight", trunc_normal(rng, (c.in_dim, p)))
        self._add("embed.bias", np.zeros(p))
        self._add("embed.pos", trunc_normal(rng, (c.tokens, p)))
        for d in range(1, c.depth + 1):
            pre = f"blocks.{d}."
            self._add(pre + "ln1.gain", np.ones(p))
            self._add(pre + "ln1.bias", np.zeros(p))
            for name in ("q", "k", "v", "o"):
                self._add(pre + f"attn.{name}.weight", trunc_normal(rng, (p, p)))
                self._add(pre + f"attn.{name}.bias", np.zeros(p))
            self._add(pre + "ln2.gain", np.ones(p))
            self._add(pre + "ln2.bias", np.zeros(p))
            self._add(pre + "mlp.fc1.weight", trunc_normal(rng, (p, hid)))
            self._add(pre + "mlp.fc1.bias", np.zeros(hid))
            self._add(pre + "mlp.fc2.weight", trunc_normal(rng, (hid, p)))
            self._add(pre + "mlp.fc2.bias", np.zeros(p))
        for i, spec in enumerate(c.head_specs):
            pre = f"heads.{i}."
            self._add(pre + "ln.gain", np.ones(p))
            self._add(pre + "ln.bias", np.zeros(p))
            self._add(pre + "weight", trunc_normal(rng, (p, spec.out_dim)))
            self._add(pre + "bias", np.zeros(spec.out_dim))

    # -- parameter bookkeeping ---------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name} already exists")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ValidationError("checkpoint parameter names do not match the model layout")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValidationError(f"parameter {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # -- DTME hooks ----------------------------------------------------------
    def add_modulators(self, layer: int) -> None:
        """Per-task channel-wise affine W * T + b in front of block `layer` (identity init)."""
        self._check_layer(layer)
        if layer in self.modulated:
            raise ContractError(f"layer {layer} is already modulated")
        K, p = self.config.num_tasks, self.config.hidden
        self._add(f"dtme.tm.{layer}.weight", np.ones((K, p)))
        self._add(f"dtme.tm.{layer}.bias", np.zeros((K, p)))
        self.modulated = sorted(self.modulated + [layer])

    def add_task_tokens(self, layer: int, per_task: int) -> None:
        """`per_task` zero-initialised learnable tokens per task at block `layer`."""
        self._check_layer(layer)
        if layer in self.expanded:
            raise ContractError(f"layer {layer} already has task tokens")
        if per_task < 1:
            raise ContractError("tokens per task must be at least 1")
        K, p = self.config.num_tasks, self.config.hidden
        self._add(f"dtme.te.{layer}.tokens", np.zeros((K, per_task, p)))
        self.expanded = dict(sorted({**self.expanded, layer: per_task}.items()))

    @property
    def is_expanded(self) -> bool:
        return bool(self.modulated or self.expanded)

    def _check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.config.depth:
            raise ContractError(f"layer {layer} outside 1..{self.config.depth}")

    # -- forward -------------------------------------------------------------
    def embed(self, x) -> Tensor:
        """Linear patch embedding plus learned positions: (B, N, in_dim) -> (1, B, N, p)."""
        x = np.asarray(x, dtype=np.float64)
        c = self.config
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (c.tokens, c.in_dim):
            raise ShapeError(f"sample shape {x.shape[1:]} != ({c.tokens}, {c.in_dim})")
        P = self.params
        h = ad.matmul(Tensor(x, _copy=False), P["embed.weight"]) + P["embed.bias"] + P["embed.pos"]
        return ad.reshape(h, (1,) + h.shape)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        return ad.layernorm(x) * P[prefix + ".gain"] + P[prefix + ".bias"]

    def _split_heads(self, x: Tensor) -> Tensor:
        S, B, N, p = x.shape
        H = self.config.heads
        return ad.transpose(ad.reshape(x, (S, B, N, H, p // H)), (0, 1, 3, 2, 4))

    def block_forward(self, x: Tensor, layer: int) -> Tensor:
        """Run block `layer` on (S, B, N, p) tokens, applying its DTME hooks."""
        c, P = self.config, self.params
        K = c.num_tasks
        S = x.shape[0]
        if S not in (1, K):
            raise ContractError(f"stream count {S} is neither 1 nor K={K}")
        pre = f"blocks.{layer}."
        if layer in self.modulated:
            W = ad.reshape(P[f"dtme.tm.{layer}.weight"], (K, 1, 1, c.hidden))
            b = ad.reshape(P[f"dtme.tm.{layer}.bias"], (K, 1, 1, c.hidden))
            x = x * W + b
            S = K
        S, B, N, p = x.shape
        H, dh = c.heads, p // c.heads

        h = self._ln(x, pre + "ln1")
        q = self._split_heads(ad.matmul(h, P[pre + "attn.q.weight"]) + P[pre + "attn.q.bias"])
        k = self._split_heads(ad.matmul(h, P[pre + "attn.k.weight"]) + P[pre + "attn.k.bias"])
        v = self._split_heads(ad.matmul(h, P[pre + "attn.v.weight"]) + P[pre + "attn.v.bias"])
        inv = 1.0 / np.sqrt(dh)
        logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), inv)

        if layer in self.expanded:
            t = self.expanded[layer]
            tok = P[f"dtme.te.{layer}.tokens"]
            # unbranched: every task's tokens join the one stream; branched: stream i gets task i's
            tok = ad.reshape(tok, (1, 1, K * t, p)) if S == 1 else ad.reshape(tok, (K, 1, t, p))
            kt = self._split_heads(ad.matmul(tok, P[pre + "attn.k.weight"]))
            vt = self._split_heads(ad.matmul(tok, P[pre + "attn.v.weight"]))
            logits_t = ad.scale(ad.matmul(q, ad.swapaxes(kt, -1, -2)), inv)
            if c.te_attention == "additive":
                attn = (ad.matmul(ad.softmax(logits, axis=-1), v)
                        + ad.matmul(ad.softmax(logits_t, axis=-1), vt))
            else:
                vt_b = ad.broadcast_to(vt, (S, B) + vt.shape[2:])
                w = ad.softmax(ad.concat([logits, logits_t], axis=-1), axis=-1)
                attn = ad.matmul(w, ad.concat([v, vt_b], axis=-2))
        else:
            attn = ad.matmul(ad.softmax(logits, axis=-1), v)

        attn = ad.reshape(ad.transpose(attn, (0, 1, 3, 2, 4)), (S, B, N, p))
        x = x + ad.matmul(attn, P[pre + "attn.o.weight"]) + P[pre + "attn.o.bias"]
        h = self._ln(x, pre + "ln2")
        h = ad.gelu(ad.matmul(h, P[pre + "mlp.fc1.weight"]) + P[pre + "mlp.fc1.bias"])
        return x + ad.matmul(h, P[pre + "mlp.fc2.weight"]) + P[pre + "mlp.fc2.bias"]

    def head_forward(self, x: Tensor, task: int) -> Tensor:
        P = self.params
        stream = x[task] if x.shape[0] > 1 else x[0]
        h = self._ln(stream, f"heads.{task}.ln")
        return ad.matmul(h, P[f"heads.{task}.weight"]) + P[f"heads.{task}.bias"]

    def forward(self, x, retain: bool = False) -> Tuple[List[Tensor], LayerActivations]:
        """All task outputs for a batch (B, N, in_dim) in one pass.

        With ``retain=True`` every block input keeps its gradient after
        ``backward`` so per-task token gradients can be read from the returned
        activations.
        """
        acts = LayerActivations()
        h = self.embed(x)
        for d in range(1, self.config.depth + 1):
            if retain:
                h.retain_grad()
            acts.tokens.append(h)
            h = self.block_forward(h, d)
        outs = [self.head_forward(h, i) for i in range(self.config.num_tasks)]
        return outs, acts

    __call__ = forward

    def predict(self, x) -> List[np.ndarray]:
        outs, _ = self.forward(x)
        return [o.data for o in outs]


def count_added_parameters(modulated: Sequence[int], expanded: Dict[int, int], num_tasks: int,
                           hidden: int) -> int:
    """Closed form |TM|*K*2p + sum over TE layers of K*t*p."""
    return len(modulated) * num_tasks * 2 * hidden + sum(num_tasks * t * hidden for t in expanded.values())
