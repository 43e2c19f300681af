"""SGD-with-momentum training loop, schedules, evaluation, checkpointing,
and metrics logging.

Everything is deterministic given the config seed: per-iteration randomness
(batch composition, flip masks) derives from (seed, purpose, iteration), so a
resumed run replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import LabeledDataset, class_aware_batch_indices, random_flip
from .losses import XiState
from .network import NetworkSpec, NetworkState, attach_msn_loss, build_network, forward_heads, predict
from .tensor import NonFiniteError

_TAG_EPOCH, _TAG_BATCH, _TAG_FLIP = 1, 2, 3

CSV_HEADER = ("iteration,lr,xi_head1,xi_head2,xi_head3,xi_head4,"
              "loss_total,loss_between,loss_within,train_error,test_error")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient; carries the offending iteration."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"training diverged at iteration {iteration}: {what}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 128
    momentum: float = 0.9
    lr: float = 0.01
    lr_decay: float = 0.9
    lr_period: int = 20_000
    eval_interval: int = 100
    batching: str = "shuffled"
    seed: int = 0
    within_weight: float = 1.0
    distance_mode: str = "euclidean"
    xi_initial: float = 0.5
    xi_decay: float = 0.9
    xi_window: int = 100
    xi_plateau_tol: float = 1e-3
    xi_floor: float = 1e-4
    flip_augment: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_period < 1 or self.eval_interval < 1:
            raise ValueError("lr_period and eval_interval must be at least 1")
        if self.batching not in ("shuffled", "class-aware"):
            raise ValueError(f"unknown batching mode {self.batching!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.within_weight < 0:
            raise ValueError("within_weight must be non-negative")

    def xi_factory(self) -> XiState:
        return XiState(initial_xi=self.xi_initial, decay=self.xi_decay,
                       window=self.xi_window, plateau_tol=self.xi_plateau_tol,
                       floor=self.xi_floor)


@dataclass
class OptimizerState:
    """Per-parameter velocity buffers mirroring parameter shapes."""

    velocity: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(velocity={name: np.zeros_like(t.data) for name, t in params.items()})


@dataclass
class IterationRecord:
    iteration: int
    lr: float
    xi: dict  # block index -> xi used this iteration
    loss_total: float
    loss_between: float
    loss_within: float
    train_error: float
    mean_distance: float
    test_error: float | None = None


def _csv_row(r: "IterationRecord") -> str:
    xi_cols = [repr(r.xi[b]) if b in r.xi else "" for b in (1, 2, 3, 4)]
    cells = [str(r.iteration), repr(r.lr), *xi_cols,
             repr(r.loss_total), repr(r.loss_between), repr(r.loss_within),
             repr(r.train_error),
             repr(r.test_error) if r.test_error is not None else ""]
    return ",".join(cells)


@dataclass
class TrainLog:
    head_blocks: tuple
    rows: list = field(default_factory=list)

    def csv_lines(self):
        yield CSV_HEADER
        for r in self.rows:
            yield _csv_row(r)

    def to_csv(self, path) -> None:
        Path(path).write_text("\n".join(self.csv_lines()) + "\n")


@dataclass
class TrainResult:
    state: NetworkState
    opt_state: OptimizerState
    log: TrainLog


def _rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, tag, index))


def lr_schedule(config: TrainConfig, iteration: int) -> float:
    """Piecewise-constant decay: lr * decay^(iteration // period)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return config.lr * config.lr_decay ** (iteration // config.lr_period)


def sgd_momentum_step(params: dict, opt_state: OptimizerState,
                      lr: float, momentum: float) -> None:
    """v <- momentum*v - lr*g; w <- w + v, in place per parameter tensor."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        v = opt_state.velocity[name]
        v[...] = momentum * v - lr * g
        p.data += v


def batch_indices_for_iteration(dataset: LabeledDataset, config: TrainConfig,
                                iteration: int) -> np.ndarray:
    """Deterministic batch selection addressable by iteration number alone."""
    n = len(dataset)
    if config.batching == "class-aware":
        return class_aware_batch_indices(
            dataset.labels, config.batch_size, _rng(config.seed, _TAG_BATCH, iteration))
    per_epoch = (n + config.batch_size - 1) // config.batch_size
    epoch, slot = divmod(iteration, per_epoch)
    perm = _rng(config.seed, _TAG_EPOCH, epoch).permutation(n)
    return perm[slot * config.batch_size:(slot + 1) * config.batch_size]


def evaluate(state: NetworkState, dataset: LabeledDataset,
             batch_size: int = 256) -> float:
    """Fraction of prediction mismatches over the dataset, in infer mode."""
    wrong = 0
    for start in range(0, len(dataset), batch_size):
        idx = slice(start, start + batch_size)
        preds = predict(state, dataset.images[idx])
        wrong += int((preds != dataset.labels[idx]).sum())
    return wrong / len(dataset) if len(dataset) else 0.0


def save_checkpoint(state: NetworkState, opt_state: OptimizerState,
                    xi_states, path, iteration: int = 0) -> None:
    """All parameters, buffers, velocities, xi states, and the iteration."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        tensors[name] = t.data
    for name, buf in state.buffers.items():
        tensors[name] = buf
    for name, v in opt_state.velocity.items():
        tensors[f"opt.velocity.{name}"] = v
    for head, xi in zip(state.heads, xi_states):
        history = list(xi.history)
        packed = np.array([xi.xi, float(len(history))] + history, dtype=np.float64)
        tensors[f"xi.head{head.attach_block}.state"] = packed
    tensors["meta.iteration"] = np.array([float(iteration)], dtype=np.float64)
    ckpt.write_tensors(path, tensors)


def load_checkpoint(path, spec: NetworkSpec, xi_factory=XiState,
                    dtype=np.float32) -> tuple:
    """Rebuild (NetworkState, OptimizerState, iteration) from a checkpoint."""
    tensors = ckpt.read_tensors(path)
    state = build_network(spec, seed=0, dtype=dtype, xi_factory=xi_factory)
    for name, t in state.params.items():
        if name not in tensors:
            raise ckpt.CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != t.data.shape:
            raise ckpt.CheckpointError(
                f"{name}: checkpoint shape {tensors[name].shape} vs "
                f"network {t.data.shape}")
        t.data = tensors[name].astype(t.data.dtype, copy=True)
    for name in state.buffers:
        if name not in tensors:
            raise ckpt.CheckpointError(f"checkpoint lacks buffer {name}")
        state.buffers[name] = tensors[name].astype(dtype, copy=True)
    opt_state = OptimizerState.zeros_like(state.params)
    for name in opt_state.velocity:
        key = f"opt.velocity.{name}"
        if key in tensors:
            opt_state.velocity[name] = tensors[key].astype(dtype, copy=True)
    for head in state.heads:
        key = f"xi.head{head.attach_block}.state"
        if key in tensors:
            packed = tensors[key]
            head.xi_state.xi = float(packed[0])
            head.xi_state.history.clear()
            head.xi_state.history.extend(packed[2:2 + int(packed[1])].tolist())
    iteration = int(tensors.get("meta.iteration", np.zeros(1))[0])
    return state, opt_state, iteration


def train(config: TrainConfig, spec: NetworkSpec, dataset: LabeledDataset,
          eval_dataset: LabeledDataset | None = None,
          resume_path=None, csv_path=None) -> TrainResult:
    """Run the full loop: batch, augment, forward, loss, backward, step, log.

    With ``resume_path`` the loop continues from the checkpointed iteration on
    the identical trajectory. With ``csv_path`` the metrics stream to disk,
    flushed at evaluation intervals.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if resume_path is not None:
        state, opt_state, start = load_checkpoint(
            resume_path, spec, xi_factory=config.xi_factory)
    else:
        state = build_network(spec, config.seed, xi_factory=config.xi_factory)
        opt_state = OptimizerState.zeros_like(state.params)
        start = 0

    log = TrainLog(head_blocks=tuple(h.attach_block for h in state.heads))
    csv_file = None
    if csv_path is not None:
        csv_file = open(csv_path, "w")
        csv_file.write(CSV_HEADER + "\n")

    try:
        for it in range(start, config.iterations):
            idx = batch_indices_for_iteration(dataset, config, it)
            images = dataset.images[idx]
            labels = dataset.labels[idx]
            if config.flip_augment:
                images = random_flip(images, _rng(config.seed, _TAG_FLIP, it))

            xi_used = {h.attach_block: h.xi_state.xi for h in state.heads}
            state.zero_grads()
            try:
                logits = forward_heads(state, images, mode="train")
                loss, aggregate, _ = attach_msn_loss(
                    logits, labels, [h.xi_state for h in state.heads],
                    within_weight=config.within_weight,
                    distance_mode=config.distance_mode, update_xi=True)
            except NonFiniteError as exc:
                raise TrainingDivergedError(it, str(exc)) from exc
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(it, "loss is not finite")
            loss.backward()
            lr = lr_schedule(config, it)
            try:
                sgd_momentum_step(state.params, opt_state, lr, config.momentum)
            except NonFiniteError as exc:
                raise TrainingDivergedError(it, str(exc)) from exc

            train_error = float(
                (logits[-1].data.argmax(axis=1) != labels).mean())
            test_error = None
            if eval_dataset is not None and (it + 1) % config.eval_interval == 0:
                test_error = evaluate(state, eval_dataset)

            row = IterationRecord(
                iteration=it, lr=lr, xi=xi_used,
                loss_total=float(aggregate.total),
                loss_between=float(aggregate.between),
                loss_within=float(aggregate.within),
                train_error=train_error,
                mean_distance=aggregate.mean_distance(),
                test_error=test_error)
            log.rows.append(row)
            if csv_file is not None:
                csv_file.write(_csv_row(row) + "\n")
                if (it + 1) % config.eval_interval == 0:
                    csv_file.flush()
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(state=state, opt_state=opt_state, log=log)
