"""Self-check suites behind `msn verify`: gradient checks, brute-force oracle
comparisons, and formula invariants.

The oracles here are deliberately naive loop implementations kept separate
from the production code paths they validate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import (
    LogitBatch,
    XiState,
    between_class_loss,
    msl_total,
    softmax_probs,
    within_class_loss,
    xi_update,
)
from .network import NetworkSpec, attach_msn_loss, build_network, forward_heads, msn_loss
from .tensor import (
    Tensor,
    batch_norm,
    conv2d,
    global_average_pool,
    grad_check,
    linear,
    max_pool2,
    relu,
    residual_add,
    weighted_sum,
)
from .trainer import TrainConfig, lr_schedule

SUITES = ("gradcheck", "oracle", "invariants", "all")


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} worst_err={self.worst:.3e} threshold={self.threshold:.1e} {status}"


# ---------------------------------------------------------------------------
# naive oracles
# ---------------------------------------------------------------------------

def _conv_loops(x, k, b, stride, pad):
    n, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, ci))
    padded[:, pad:pad + h, pad:pad + w, :] = x
    out = np.zeros((n, oh, ow, co))
    for bi in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(co):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(ci):
                                acc += padded[bi, i * stride + di, j * stride + dj, c] \
                                    * k[di, dj, c, o]
                    out[bi, i, j, o] = acc
    return out


def _pool_loops(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for bi in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    out[bi, i, j, ch] = x[bi, 2 * i:2 * i + 2, 2 * j:2 * j + 2, ch].max()
    return out


def _within_loops(q, y, xi):
    total = 0.0
    for j in sorted(set(int(v) for v in y)):
        idx = [i for i in range(len(y)) if y[i] == j]
        mu = len(idx)
        if mu < 2:
            continue
        lam = mu * (mu - 1) // 2
        d = 0.0
        for a in range(mu):
            for b in range(a + 1, mu):
                d += math.sqrt(float(((q[idx[a]] - q[idx[b]]) ** 2).sum()))
        d /= lam
        total += max(0.0, d - xi) ** 2
    return total


def _rel(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).max()) / max(
        1.0, float(np.abs(a).max()), float(np.abs(b).max()))


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def gradcheck_suite(seed: int = 0) -> list:
    results = []
    rng = np.random.default_rng(seed)

    x = rng.standard_normal((2, 4, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 4, 4, 3))
    err = grad_check(lambda xt, kt, bt: weighted_sum(conv2d(xt, kt, bt, pad=1), proj),
                     [x, k, b])
    results.append(CheckResult("gradcheck/conv2d", err, 1e-4))

    x = rng.uniform(0.1, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    proj = rng.standard_normal((3, 4))
    err = grad_check(lambda t: weighted_sum(relu(t), proj), [x])
    results.append(CheckResult("gradcheck/relu", err, 1e-7))

    base = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1) * 0.5
    base = base + rng.uniform(-0.1, 0.1, base.shape)  # gaps stay >= 0.3
    proj = rng.standard_normal((1, 2, 2, 1))
    err = grad_check(lambda t: weighted_sum(max_pool2(t), proj), [base])
    results.append(CheckResult("gradcheck/max_pool2", err, 1e-4))

    x = rng.standard_normal((2, 3, 3, 2))
    proj = rng.standard_normal((2, 2))
    err = grad_check(lambda t: weighted_sum(global_average_pool(t), proj), [x])
    results.append(CheckResult("gradcheck/global_average_pool", err, 1e-7))

    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 3))
    bias = rng.standard_normal(3)
    proj = rng.standard_normal((3, 3))
    err = grad_check(lambda xt, wt, bt: weighted_sum(linear(xt, wt, bt), proj),
                     [x, w, bias])
    results.append(CheckResult("gradcheck/linear", err, 1e-7))

    for mode in ("train", "infer"):
        x = rng.standard_normal((6, 2, 2, 3))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)
        rm, rv = rng.standard_normal(3) * 0.1, rng.uniform(0.5, 1.5, 3)
        proj = rng.standard_normal((6, 2, 2, 3))
        err = grad_check(
            lambda xt, gt, bt: weighted_sum(
                batch_norm(xt, gt, bt, rm, rv, mode=mode, update_stats=False), proj),
            [x, gamma, beta])
        results.append(CheckResult(f"gradcheck/batch_norm_{mode}", err, 1e-4))

    a = rng.standard_normal((2, 3))
    c = rng.standard_normal((2, 3))
    proj = rng.standard_normal((2, 3))
    err = grad_check(lambda at, bt: weighted_sum(residual_add(at, bt), proj), [a, c])
    results.append(CheckResult("gradcheck/residual_add", err, 1e-7))

    labels = np.array([0, 0, 1, 1, 2, 2])
    q0 = rng.standard_normal((6, 3)) * 2
    xi = XiState(initial_xi=0.05)

    def loss_of_logits(t):
        out, _, _ = attach_msn_loss([t], labels, [xi], update_xi=False)
        return out

    err = grad_check(loss_of_logits, [q0])
    results.append(CheckResult("gradcheck/msl_vs_logits", err, 1e-6))

    results.append(full_network_gradcheck(seed))
    return results


def full_network_gradcheck(seed: int = 0, width: float = 0.25, depth_k: int = 1,
                           batch: int = 4) -> CheckResult:
    """Finite-difference check of the averaged loss w.r.t. every parameter of a
    four-head residual network (all blocks attached)."""
    rng = np.random.default_rng(seed + 17)
    spec = NetworkSpec(family="resnet", depth_k=depth_k, width_multiplier=width,
                       attachment=(1, 2, 3, 4), num_classes=2, input_shape=(8, 8, 3))
    state = build_network(spec, seed=seed, dtype=np.float64)
    images = rng.standard_normal((batch, 8, 8, 3))
    labels = np.array([0, 0, 1, 1])[:batch]
    xi_states = [XiState(initial_xi=0.05) for _ in state.heads]
    names = sorted(state.params)
    arrays = [state.params[n].data.copy() for n in names]

    def f(*tensors):
        for name, t in zip(names, tensors):
            state.params[name] = t
        logits = forward_heads(state, images, mode="train", update_stats=False)
        out, _, _ = attach_msn_loss(logits, labels, xi_states, update_xi=False)
        return out

    err = grad_check(f, arrays)
    return CheckResult("gradcheck/full_msn_config7", err, 1e-4)


# ---------------------------------------------------------------------------
# oracle suite
# ---------------------------------------------------------------------------

def oracle_suite(seed: int = 0) -> list:
    results = []
    rng = np.random.default_rng(seed)

    worst = 0.0
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        x = rng.standard_normal((2, 6, 6, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
        worst = max(worst, _rel(out.data, _conv_loops(x, k, b, stride, pad)))
    results.append(CheckResult("oracle/conv2d_vs_loops", worst, 1e-6))

    x = rng.standard_normal((2, 8, 8, 3))
    out = max_pool2(Tensor(x))
    results.append(CheckResult("oracle/max_pool2_vs_loops",
                               _rel(out.data, _pool_loops(x)), 1e-6))

    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    results.append(CheckResult("oracle/linear_vs_loops",
                               _rel(out.data, x @ w + b), 1e-6))

    x = rng.standard_normal((3, 4, 4, 5))
    out = global_average_pool(Tensor(x))
    manual = np.array([[x[i, :, :, c].sum() / 16 for c in range(5)] for i in range(3)])
    results.append(CheckResult("oracle/global_average_pool_vs_mean",
                               _rel(out.data, manual), 1e-12))

    q = rng.standard_normal((5, 7)) * 3
    direct = np.array([[math.exp(v) for v in row] for row in q])
    direct /= direct.sum(axis=1, keepdims=True)
    results.append(CheckResult("oracle/softmax_vs_direct",
                               _rel(softmax_probs(q), direct), 1e-12))

    n = 5
    q = rng.standard_normal((n, 4))
    y = rng.integers(0, 4, n)
    p = softmax_probs(q)
    direct_ce = -sum(math.log(p[i, y[i]]) for i in range(n)) / n
    loss, _ = between_class_loss(LogitBatch(q=q, y=y))
    results.append(CheckResult("oracle/between_class_vs_direct",
                               abs(loss - direct_ce), 1e-12))

    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 65))
        c = int(rng.integers(2, 11))
        q = rng.standard_normal((n, c)) * 3
        y = rng.integers(0, c, n)
        loss, _, _ = within_class_loss(LogitBatch(q=q, y=y), xi=0.5)
        brute = _within_loops(q, y, 0.5)
        worst = max(worst, abs(loss - brute) / max(1.0, abs(brute)))
    results.append(CheckResult("oracle/within_class_vs_all_pairs", worst, 1e-10))
    return results


# ---------------------------------------------------------------------------
# invariant suite
# ---------------------------------------------------------------------------

def invariant_suite(seed: int = 0) -> list:
    results = []
    rng = np.random.default_rng(seed)

    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        n = int(rng.integers(1, c + 1))
        q = rng.standard_normal((n, c)) * 2
        y = rng.permutation(c)[:n]  # distinct labels: every class has mu <= 1
        batch = LogitBatch(q=q, y=y)
        breakdown, _ = msl_total(batch, xi=0.5)
        ce, _ = between_class_loss(batch)
        worst = max(worst, abs(breakdown.total - ce))
    results.append(CheckResult("invariant/singleton_batch_reduces_to_ce", worst, 0.0))

    worst = 0.0
    for count in (1, 2, 3, 4):
        n, c = 12, 4
        y = rng.integers(0, c, n)
        heads = [(LogitBatch(q=rng.standard_normal((n, c)) * 2, y=y), XiState())
                 for _ in range(count)]
        aggregate, per_head, _ = msn_loss(heads, update_xi=False)
        mean_total = float(np.mean([bd.total for bd in per_head]))
        worst = max(worst, abs(aggregate.total - mean_total))
    results.append(CheckResult("invariant/head_averaging", worst, 1e-12))

    q = rng.standard_normal((10, 4)) * 2
    y = rng.integers(0, 4, 10)
    perm = rng.permutation(10)
    a, _ = msl_total(LogitBatch(q=q, y=y), xi=0.5)
    b, _ = msl_total(LogitBatch(q=q[perm], y=y[perm]), xi=0.5)
    results.append(CheckResult("invariant/permutation_invariance",
                               abs(a.total - b.total), 1e-9))

    q = rng.standard_normal((6, 3))
    y = np.array([0, 0, 0, 1, 1, 1])
    base, _, dist_a = within_class_loss(LogitBatch(q=q, y=y), xi=0.5)
    shifted = q.copy()
    shifted[:3] += rng.standard_normal(3)
    _, _, dist_b = within_class_loss(LogitBatch(q=shifted, y=y), xi=0.5)
    results.append(CheckResult("invariant/class_shift_distance",
                               abs(dist_a[0] - dist_b[0]), 1e-9))

    state = XiState()
    expected = [0.5]
    while expected[-1] > state.floor:
        expected.append(max(state.floor, expected[-1] * 0.9))
    observed = [state.xi]
    while state.xi > state.floor:
        for _ in range(2 * state.window):
            xi_update(state, 1.0)
        observed.append(state.xi)
    worst = max(abs(a - b) for a, b in zip(expected, observed)) \
        if len(expected) == len(observed) else float("inf")
    results.append(CheckResult("invariant/xi_forced_plateau_sequence", worst, 0.0))

    cfg = TrainConfig(iterations=1, lr_period=20)
    violations = 0.0
    prev = lr_schedule(cfg, 0)
    for i in range(1, 100):
        cur = lr_schedule(cfg, i)
        if cur > prev or (i % 20 and cur != prev):
            violations += 1
        prev = cur
    results.append(CheckResult("invariant/lr_schedule_shape", violations, 0.0))

    momentum, lr = 0.9, 0.01
    grads = rng.standard_normal(8)
    v = w = 0.0
    for g in grads:
        v = momentum * v - lr * g
        w += v
    w_closed = -lr * sum(g * (1 - momentum ** (len(grads) - i)) / (1 - momentum)
                         for i, g in enumerate(grads))
    results.append(CheckResult("invariant/momentum_unrolled_recurrence",
                               abs(w - w_closed), 1e-12))

    worst = 0.0
    for _ in range(50):
        n, c = int(rng.integers(1, 20)), int(rng.integers(2, 8))
        batch = LogitBatch(q=rng.standard_normal((n, c)) * 3, y=rng.integers(0, c, n))
        bd, _ = msl_total(batch, xi=0.3)
        worst = max(worst, -min(bd.between, bd.within, 0.0))
    results.append(CheckResult("invariant/non_negative_losses", worst, 0.0))
    return results


def run_suites(which: str, seed: int = 0) -> list:
    if which not in SUITES:
        raise ValueError(f"unknown suite {which!r}, expected one of {SUITES}")
    results = []
    if which in ("gradcheck", "all"):
        results.extend(gradcheck_suite(seed))
    if which in ("oracle", "all"):
        results.extend(oracle_suite(seed))
    if which in ("invariants", "all"):
        results.extend(invariant_suite(seed))
    return results
