"""Mixture separability loss: between-class cross-entropy, within-class
pairwise-distance hinge, the adaptive threshold, and their analytic gradients.

All computations here are plain float64 numpy on logit matrices; hooking the
gradients into the autodiff graph is the network module's job.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError

ZERO_DISTANCE_GUARD = 1e-12


@dataclass(frozen=True)
class LogitBatch:
    """Post-FC logits q (N, c) with integer labels y (N,)."""

    q: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 2:
            raise ValueError(f"logits must be (N>=1, c>=2), got shape {q.shape}")
        if y.shape != (q.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match logits {q.shape}")
        if y.size and (y.min() < 0 or y.max() >= q.shape[1]):
            raise ValueError(f"labels must lie in [0, {q.shape[1]}), got range "
                             f"[{y.min()}, {y.max()}]")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def num_classes(self) -> int:
        return self.q.shape[1]


def pair_count(mu: int) -> int:
    """Number of unordered same-class pairs: mu choose 2, and 0 for mu < 2."""
    return mu * (mu - 1) // 2 if mu >= 2 else 0


@dataclass(frozen=True)
class ClassPartition:
    """Batch indices grouped by label, with per-class sizes and pair counts."""

    indices: tuple
    mu: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_labels(cls, y: np.ndarray, num_classes: int) -> "ClassPartition":
        y = np.asarray(y, dtype=np.int64)
        idx = tuple(np.flatnonzero(y == j) for j in range(num_classes))
        mu = np.array([len(i) for i in idx], dtype=np.int64)
        lam = np.array([pair_count(int(m)) for m in mu], dtype=np.int64)
        return cls(indices=idx, mu=mu, lam=lam)

    @property
    def num_classes(self) -> int:
        return len(self.indices)


@dataclass
class XiState:
    """Adaptive threshold below which within-class spread is not penalized.

    Decays by ``decay`` whenever the within-class loss plateaus: the last
    ``window`` values and the ``window`` before them differ by less than
    ``plateau_tol`` in relative terms. The history clears after each decay,
    and the threshold never drops below ``floor``.
    """

    initial_xi: float = 0.5
    decay: float = 0.9
    window: int = 100
    plateau_tol: float = 1e-3
    floor: float = 1e-4
    xi: float = field(init=False)
    history: deque = field(init=False, repr=False)

    def __post_init__(self):
        if self.initial_xi <= 0 or not (0 < self.decay < 1) or self.window < 1:
            raise ValueError("xi parameters out of range")
        self.xi = self.initial_xi
        self.history = deque(maxlen=2 * self.window)

    def update(self, within_loss: float) -> "XiState":
        self.history.append(float(within_loss))
        if len(self.history) == 2 * self.window:
            values = list(self.history)
            prev = sum(values[:self.window]) / self.window
            recent = sum(values[self.window:]) / self.window
            if abs(recent - prev) / max(prev, 1e-12) < self.plateau_tol:
                self.xi = max(self.floor, self.xi * self.decay)
                self.history.clear()
        return self


def xi_update(state: XiState, within_loss: float) -> XiState:
    """Push one within-class loss sample and decay the threshold on plateau."""
    return state.update(within_loss)


@dataclass(frozen=True)
class LossBreakdown:
    """between + within == total; per_class_distance maps j -> d_j (mu_j >= 2)."""

    between: float
    within: float
    total: float
    per_class_distance: dict

    def mean_distance(self) -> float:
        if not self.per_class_distance:
            return 0.0
        return float(np.mean(list(self.per_class_distance.values())))


def softmax_probs(q) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1, entries in (0, 1)."""
    if isinstance(q, LogitBatch):
        q = q.q
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise NonFiniteError("non-finite logits in softmax_probs")
    shifted = q - q.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def between_class_loss(batch: LogitBatch) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy over softmax probabilities.

    Returns the loss and its gradient w.r.t. the logits, (p - onehot(y)) / N.
    """
    q, y = batch.q, batch.y
    n = batch.n
    m = q.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(q - m).sum(axis=1))
    loss = float(np.mean(lse - q[np.arange(n), y]))
    grad = softmax_probs(q)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def _pairwise_distance(points: np.ndarray, mode: str):
    """Mean pairwise distance of rows and its gradient w.r.t. each row.

    ``mode`` selects the distance: "euclidean" uses the L2 norm over all
    logit components per pair; "componentwise" sums per-component absolute
    differences instead. Pairs closer than ZERO_DISTANCE_GUARD contribute
    zero gradient.
    """
    mu = points.shape[0]
    lam = pair_count(mu)
    diff = points[:, None, :] - points[None, :, :]
    if mode == "euclidean":
        dist = np.sqrt((diff * diff).sum(axis=-1))
        iu = np.triu_indices(mu, 1)
        d = float(dist[iu].sum() / lam)
        safe = np.where(dist < ZERO_DISTANCE_GUARD, 1.0, dist)
        unit = diff / safe[:, :, None]
        unit[dist < ZERO_DISTANCE_GUARD] = 0.0
        d_grad = unit.sum(axis=1) / lam
    elif mode == "componentwise":
        per_pair = np.abs(diff).sum(axis=-1)
        iu = np.triu_indices(mu, 1)
        d = float(per_pair[iu].sum() / lam)
        d_grad = np.sign(diff).sum(axis=1) / lam
    else:
        raise ValueError(f"unknown distance mode {mode!r}")
    return d, d_grad


def in_class_distance(batch: LogitBatch, partition: ClassPartition, j: int,
                      distance_mode: str = "euclidean") -> float:
    """Mean pairwise logit distance d_j for class j; needs mu_j >= 2."""
    idx = partition.indices[j]
    if len(idx) < 2:
        raise ValueError(f"class {j} has {len(idx)} samples; in-class distance "
                         f"needs at least 2")
    d, _ = _pairwise_distance(batch.q[idx], distance_mode)
    return d


def within_class_loss(batch: LogitBatch, xi: float,
                      distance_mode: str = "euclidean",
                      partition: ClassPartition | None = None,
                      ) -> tuple[float, np.ndarray, dict]:
    """Squared hinge on per-class mean pairwise distance exceeding xi.

    Sum over classes with at least two batch samples of max(0, d_j - xi)^2;
    classes with fewer samples contribute nothing. Returns the loss, its
    gradient w.r.t. the logits, and the map j -> d_j.
    """
    if xi <= 0:
        raise ValueError(f"xi must be positive, got {xi}")
    if not np.all(np.isfinite(batch.q)):
        raise NonFiniteError("non-finite logits in within_class_loss")
    if partition is None:
        partition = ClassPartition.from_labels(batch.y, batch.num_classes)
    grad = np.zeros_like(batch.q)
    loss = 0.0
    distances: dict[int, float] = {}
    for j, idx in enumerate(partition.indices):
        if len(idx) < 2:
            continue
        d, d_grad = _pairwise_distance(batch.q[idx], distance_mode)
        distances[j] = d
        excess = d - xi
        if excess > 0:
            loss += excess * excess
            grad[idx] += 2.0 * excess * d_grad
    return loss, grad, distances


def msl_total(batch: LogitBatch, xi: float, within_weight: float = 1.0,
              distance_mode: str = "euclidean",
              ) -> tuple[LossBreakdown, np.ndarray]:
    """Combined loss: between-class plus (optionally weighted) within-class.

    The weight defaults to 1 so the total is the plain sum of the two terms;
    weight 0 gives the pure cross-entropy baseline on the identical code path.
    """
    between, g_between = between_class_loss(batch)
    within_raw, g_within, distances = within_class_loss(
        batch, xi, distance_mode=distance_mode)
    within = within_weight * within_raw
    breakdown = LossBreakdown(
        between=between,
        within=within,
        total=between + within,
        per_class_distance=distances,
    )
    return breakdown, g_between + within_weight * g_within
