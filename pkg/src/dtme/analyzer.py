"""
Token-space analysis: uncentered token covariance, its eigenbasis split into a
high-energy (range) part and a low-energy (null) part, projection of per-task
token gradients onto both parts, and pairwise conflict counting per part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ZERO_NORM = 1e-12
HIST_BINS = 18
PSD_TOL = 1e-8
REPORT_SCHEMA_VERSION = 1


@dataclass
class TokenCovariance:
    layer: int
    matrix: np.ndarray
    n: int


@dataclass
class SpectralBasis:
    """Eigenbasis of a token covariance, columns sorted by descending eigenvalue."""

    U: np.ndarray
    eigenvalues: np.ndarray
    m: int
    r: float
    layer: int = 0

    @property
    def U_R(self) -> np.ndarray:
        return self.U[:, :self.m]

    @property
    def U_N(self) -> np.ndarray:
        return self.U[:, self.m:]

    @property
    def range_projector(self) -> np.ndarray:
        return self.U_R @ self.U_R.T

    @property
    def null_projector(self) -> np.ndarray:
        return self.U_N @ self.U_N.T

    @property
    def range_mass(self) -> float:
        """Fraction of the eigenvalue sum held by the range space."""
        lam = np.clip(self.eigenvalues, 0.0, None)
        total = lam.sum()
        return float(lam[:self.m].sum() / total) if total > 0 else 1.0


@dataclass
class ConflictStats:
    """Conflict counts for one layer.

    ``range_counts[(i, j)]`` / ``null_counts[(i, j)]`` count the (sample, token)
    positions where tasks i and j conflict in that space; ``examined`` is the
    number of positions looked at per pair. ``histogram`` bins the cosine of the
    unprojected gradients of every (position, pair) into `HIST_BINS` bins on [-1, 1].
    """

    layer: int
    num_tasks: int
    examined: int = 0
    range_counts: Dict[Tuple[int, int], int] = field(default_factory=dict)
    null_counts: Dict[Tuple[int, int], int] = field(default_factory=dict)
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))

    def __post_init__(self):
        for pair in combinations(range(self.num_tasks), 2):
            self.range_counts.setdefault(pair, 0)
            self.null_counts.setdefault(pair, 0)

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return sorted(self.range_counts)

    def merge(self, other: "ConflictStats") -> "ConflictStats":
        if (other.layer, other.num_tasks) != (self.layer, self.num_tasks):
            raise ContractError("cannot merge stats of different layers or task counts")
        out = ConflictStats(self.layer, self.num_tasks, self.examined + other.examined)
        for pair in self.pairs:
            out.range_counts[pair] = self.range_counts[pair] + other.range_counts[pair]
            out.null_counts[pair] = self.null_counts[pair] + other.null_counts[pair]
        out.histogram = self.histogram + other.histogram
        return out

    def severity(self) -> Tuple[float, float]:
        """Mean conflict indicator over positions and pairs, per space."""
        denom = self.examined * len(self.pairs)
        if denom == 0:
            return 0.0, 0.0
        return (sum(self.range_counts.values()) / denom, sum(self.null_counts.values()) / denom)

    def to_dict(self) -> dict:
        rs, ns = self.severity()
        return {
            "layer": self.layer,
            "range_score": rs,
            "null_score": ns,
            "examined": self.examined,
            "pairs": [
                {"i": i, "j": j, "range": self.range_counts[(i, j)], "null": self.null_counts[(i, j)]}
                for i, j in self.pairs
            ],
            "histogram": [int(v) for v in self.histogram],
        }

    @classmethod
    def from_dict(cls, d: dict, num_tasks: int) -> "ConflictStats":
        out = cls(d["layer"], num_tasks, d["examined"])
        for rec in d["pairs"]:
            out.range_counts[(rec["i"], rec["j"])] = rec["range"]
            out.null_counts[(rec["i"], rec["j"])] = rec["null"]
        out.histogram = np.asarray(d["histogram"], dtype=np.int64)
        return out


# ---------------------------------------------------------------------------
# Covariance and eigendecomposition
# ---------------------------------------------------------------------------

def _as_token_stack(batches) -> Tuple[np.ndarray, int]:
    """Accept TokenBatch objects or arrays; return (n, N, p) and the layer index."""
    if isinstance(batches, np.ndarray):
        arr = batches[None] if batches.ndim == 2 else batches
        return arr, 0
    batches = list(batches)
    if not batches:
        raise ContractError("covariance of an empty token set")
    arrays, layers = [], set()
    for b in batches:
        tok = getattr(b, "tokens", b)
        layers.add(getattr(b, "layer", 0))
        arrays.append(np.asarray(tok, dtype=np.float64))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1 or arrays[0].ndim != 2:
        raise ShapeError(f"token batches must share one N x p shape, got {sorted(shapes)}")
    if len(layers) != 1:
        raise ContractError(f"token batches come from different layers {sorted(layers)}")
    return np.stack(arrays), layers.pop()


def uncentered_covariance(batches, layer: Optional[int] = None) -> TokenCovariance:
    """(1/n) sum_l T_l T_l^T with each T_l arranged p x N, so the result is p x p."""
    stack, found = _as_token_stack(batches)
    n = stack.shape[0]
    if n == 0:
        raise ContractError("covariance of an empty token set")
    flat = stack.reshape(-1, stack.shape[-1])
    cov = flat.T @ flat / n
    cov = 0.5 * (cov + cov.T)
    return TokenCovariance(layer if layer is not None else found, cov, n)


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps use round-robin ordering so each round rotates p/2 disjoint index
    pairs at once. Stops once the off-diagonal Frobenius norm is at most
    ``tol * trace`` (or ``tol * ||A||_F`` for indefinite input).

    Returns (eigenvalues, V) with ``A = V diag(w) V^T``; unsorted.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {A.shape}")
    if not np.isfinite(A).all():
        raise NumericError("matrix has non-finite entries")
    A = 0.5 * (A + A.T)
    p = A.shape[0]
    V = np.eye(p)
    if p == 1:
        return A.diagonal().copy(), V
    scale = max(abs(np.trace(A)), np.linalg.norm(A))
    thresh = tol * scale
    # round-robin tournament over an even number of players (a phantom when p is odd)
    players = list(range(p)) + ([-1] if p % 2 else [])
    q = len(players)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= thresh:
            break
        for _round in range(q - 1):
            pairs = [(players[k], players[q - 1 - k]) for k in range(q // 2)]
            pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
            I = np.array([a for a, _ in pairs])
            J = np.array([b for _, b in pairs])
            apq = A[I, J]
            active = np.abs(apq) > 0.0
            if active.any():
                I, J, apq = I[active], J[active], apq[active]
                app, aqq = A[I, I], A[J, J]
                theta = (aqq - app) / (2.0 * apq)
                big = np.abs(theta) > 1e150
                th = np.where(big, 0.0, theta)
                t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                             np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0)))
                t[theta == 0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                R = np.eye(p)
                R[I, I] = c
                R[J, J] = c
                R[I, J] = s
                R[J, I] = -s
                A = R.T @ A @ R
                A = 0.5 * (A + A.T)
                V = V @ R
            players = [players[0]] + [players[-1]] + players[1:-1]
    else:
        raise NumericError("Jacobi iteration did not converge")
    return A.diagonal().copy(), V


def select_split(eigenvalues: np.ndarray, r: float) -> int:
    """Smallest m with sum(lam[:m]) / sum(lam[m:]) >= r (m = p once the tail sum is zero)."""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    p = lam.size
    for m in range(1, p + 1):
        head, tail = lam[:m].sum(), lam[m:].sum()
        if tail <= 0.0 or head >= r * tail:
            return m
    return p


def spectral_split(cov: Union[TokenCovariance, np.ndarray], r: float) -> SpectralBasis:
    """Split the covariance eigenbasis into range (first m) and null (rest) columns."""
    if not r > 0:
        raise ContractError(f"ratio r must be positive, got {r}")
    mat = cov.matrix if isinstance(cov, TokenCovariance) else np.asarray(cov, dtype=np.float64)
    layer = cov.layer if isinstance(cov, TokenCovariance) else 0
    if np.abs(mat - mat.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(mat).max(initial=0.0)):
        raise NumericError("covariance is not symmetric")
    w, V = jacobi_eigh(mat)
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    if w.size and w[-1] < -PSD_TOL * max(1.0, w[0]):
        raise NumericError(f"covariance is not positive semi-definite (min eigenvalue {w[-1]:.3e})")
    # fix the sign of each eigenvector so bases are reproducible
    idx = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[idx, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    return SpectralBasis(V, w, select_split(w, r), float(r), layer)


def project(gradient: np.ndarray, basis: SpectralBasis) -> Tuple[np.ndarray, np.ndarray]:
    """Range and null components of a gradient (last axis has length p)."""
    g = np.asarray(gradient, dtype=np.float64)
    p = basis.U.shape[0]
    if g.shape[-1] != p:
        raise ShapeError(f"gradient length {g.shape[-1]} != p={p}")
    g_r = (g @ basis.U_R) @ basis.U_R.T
    g_n = (g @ basis.U_N) @ basis.U_N.T
    return g_r, g_n


# ---------------------------------------------------------------------------
# Conflict detection
# ---------------------------------------------------------------------------

def cosine_bins(cos: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    idx = np.floor((np.clip(cos, -1.0, 1.0) + 1.0) / 2.0 * bins).astype(np.int64)
    return np.bincount(np.minimum(idx, bins - 1).ravel(), minlength=bins)


def _pair_conflicts(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Conflict indicator a.b <= 0, ignoring pairs with a near-zero vector."""
    dots = np.einsum("...p,...p->...", a, b)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (dots <= 0.0) & (na >= ZERO_NORM) & (nb >= ZERO_NORM)


def detect_conflicts(gradients: Sequence[np.ndarray], basis: SpectralBasis,
                     layer: Optional[int] = None) -> ConflictStats:
    """Count range/null conflicts between every task pair at every token position.

    ``gradients[i]`` holds task i's token gradients, shape (..., p); all tasks
    share the leading shape, and each leading index is one token position.
    """
    K = len(gradients)
    if K < 2:
        raise ContractError("conflict detection needs at least two tasks")
    gs = [np.asarray(g, dtype=np.float64) for g in gradients]
    shape = gs[0].shape
    if any(g.shape != shape for g in gs):
        raise ShapeError("task gradients must share one shape")
    gs = [g.reshape(-1, shape[-1]) for g in gs]
    parts = [project(g, basis) for g in gs]
    stats = ConflictStats(basis.layer if layer is None else layer, K, examined=gs[0].shape[0])
    for i, j in combinations(range(K), 2):
        stats.range_counts[(i, j)] = int(_pair_conflicts(parts[i][0], parts[j][0]).sum())
        stats.null_counts[(i, j)] = int(_pair_conflicts(parts[i][1], parts[j][1]).sum())
        stats.histogram = stats.histogram + cosine_bins(cosine(gs[i], gs[j]))
    return stats


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; 0 where either row has (near) zero norm."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    out = np.zeros(na.shape)
    out[ok] = np.einsum("...p,...p->...", a, b)[ok] / (na[ok] * nb[ok])
    return out


def aggregate_layer_conflicts(stats: Iterable[ConflictStats]) -> Dict[int, Tuple[float, float]]:
    """Per-layer (range_score, null_score): the mean conflict indicator over
    samples, tokens and task pairs. Stats for the same layer are merged first."""
    merged: Dict[int, ConflictStats] = {}
    for s in stats:
        merged[s.layer] = merged[s.layer].merge(s) if s.layer in merged else s
    if not merged:
        raise ContractError("no conflict statistics to aggregate")
    return {d: merged[d].severity() for d in sorted(merged)}


# ---------------------------------------------------------------------------
# Conflict report (structured text, one JSON record per layer)
# ---------------------------------------------------------------------------

@dataclass
class ConflictReport:
    r: float
    num_tasks: int
    layers: List[ConflictStats]
    bases: Dict[int, SpectralBasis] = field(default_factory=dict)

    def records(self) -> List[dict]:
        out = []
        for st in sorted(self.layers, key=lambda s: s.layer):
            rec = {"schema_version": REPORT_SCHEMA_VERSION, "r": self.r, **st.to_dict()}
            basis = self.bases.get(st.layer)
            if basis is not None:
                rec["m"] = basis.m
                rec["p"] = int(basis.U.shape[0])
                rec["range_mass"] = basis.range_mass
                lam = np.clip(basis.eigenvalues, 0.0, None)
                rec["eigen_mass"] = [float(v) for v in lam / lam.sum()] if lam.sum() > 0 else []
            out.append(rec)
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records())

    def severities(self) -> Dict[int, Tuple[float, float]]:
        return aggregate_layer_conflicts(self.layers)

    @classmethod
    def loads(cls, text: str) -> "ConflictReport":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs:
            return cls(0.0, 0, [])
        for rec in recs:
            if rec.get("schema_version") != REPORT_SCHEMA_VERSION:
                raise ContractError(f"unsupported conflict report schema {rec.get('schema_version')}")
        K = 1 + max([p["j"] for rec in recs for p in rec["pairs"]], default=0)
        return cls(recs[0]["r"], K, [ConflictStats.from_dict(rec, K) for rec in recs])
