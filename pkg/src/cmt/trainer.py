"""Data-parallel training with gradient averaging across simulated workers.

Each optimization step shards the global batch across N workers, computes
per-shard mean-loss gradients, averages them (sample-count weighted, so the
result equals the full-batch gradient up to float rounding), and applies one
optimizer update. The reduction accumulates in ascending node order, making
runs bit-reproducible.

Dropout noise is keyed by (seed, epoch, batch, position-in-global-batch) —
never by worker index — so an N-worker run and a 1-worker run see identical
noise per sample and follow the same trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import EvaluationError, InputError, ShapeError, TrainingDiverged
from .fusion import CmtModel
from .rng import make_rng
from .tensor import Tape, Tensor


@dataclass
class WorkerShard:
    node_index: int
    samples: list            # MultimodalSample list
    positions: list[int]     # global batch positions, parallel to samples


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1

    CSV_HEADER = "epoch,train_loss,val_loss,val_accuracy,seconds"

    def to_csv(self, include_seconds: bool = False) -> str:
        """CSV with one row per epoch.

        Wall times vary run to run, so the seconds column is left empty by
        default to keep equal-seed runs byte-identical; pass
        ``include_seconds=True`` for profiling output.
        """
        lines = [self.CSV_HEADER]
        for r in self.records:
            secs = f"{r.seconds:.3f}" if include_seconds else ""
            lines.append(
                f"{r.epoch},{r.train_loss:.12g},{r.val_loss:.12g},"
                f"{r.val_accuracy:.12g},{secs}"
            )
        return "\n".join(lines) + "\n"


def compute_shard_gradient(
    shard: WorkerShard,
    model: CmtModel,
    seed_ctx: tuple[int, ...],
    training: bool = True,
) -> tuple[dict[str, np.ndarray], float]:
    """Mean cross-entropy over the shard and its parameter gradients.

    ``seed_ctx`` is (seed, epoch, batch); each sample's dropout generator is
    keyed by that context plus the sample's global batch position.
    """
    if not shard.samples:
        raise InputError(f"worker {shard.node_index} received an empty shard")
    n = len(shard.samples)
    grads: dict[str, np.ndarray] = {}
    total_loss = 0.0
    use_dropout = training and model.cfg.dropout > 0.0
    for sample, pos in zip(shard.samples, shard.positions):
        rng = make_rng(*seed_ctx, pos) if use_dropout else None
        with Tape() as tape:
            dist = model.forward(sample.visual, sample.audio, sample.text,
                                 rng=rng, training=training)
            loss = T.cross_entropy_logits(dist.logits, sample.label)
            tape.backward(loss)
            total_loss += loss.item()
            for name, p in model.params.items():
                g = tape.grad(p)
                if name in grads:
                    grads[name] += g
                else:
                    grads[name] = g.copy()
    for name in grads:
        grads[name] /= n
    return grads, total_loss / n


def allreduce(grad_sets: list[dict[str, np.ndarray]],
              counts: list[int] | None = None) -> dict[str, np.ndarray]:
    """Mean of the gradient sets, accumulated in ascending node order.

    With ``counts`` the mean is sample-count weighted, which makes the
    average of unequal-shard gradients equal the full-batch gradient.
    """
    if not grad_sets:
        raise InputError("allreduce needs at least one gradient set")
    names = list(grad_sets[0])
    for i, gs in enumerate(grad_sets[1:], start=1):
        if set(gs) != set(names):
            missing = sorted(set(names) ^ set(gs))
            raise ShapeError(f"gradient set {i} differs on parameter {missing[0]!r}")
    if counts is not None and len(counts) != len(grad_sets):
        raise InputError("counts must parallel gradient sets")
    out: dict[str, np.ndarray] = {}
    total = sum(counts) if counts is not None else len(grad_sets)
    for name in names:
        shape = grad_sets[0][name].shape
        acc = np.zeros(shape)
        for i, gs in enumerate(grad_sets):
            if gs[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r}: set {i} has shape {gs[name].shape}, "
                    f"expected {shape}"
                )
            acc += gs[name] * counts[i] if counts is not None else gs[name]
        out[name] = acc / total
    return out


def _check_finite(grads: dict[str, np.ndarray], epoch: int | None, batch: int | None) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                f"non-finite gradient in parameter {name!r}", epoch=epoch, batch=batch
            )


def sgd_step(model: CmtModel, grads: dict[str, np.ndarray], lr: float,
             epoch: int | None = None, batch: int | None = None) -> None:
    """theta <- theta - lr * g, element-wise, every parameter."""
    _check_finite(grads, epoch, batch)
    for name, p in model.params.items():
        p.data -= lr * grads[name]


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(model: CmtModel, grads: dict[str, np.ndarray], state: AdamWState,
               cfg: TrainConfig, epoch: int | None = None, batch: int | None = None) -> None:
    """Decoupled-weight-decay adaptive update with bias-corrected moments."""
    _check_finite(grads, epoch, batch)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in model.params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p.data -= cfg.learning_rate * (
            mhat / (np.sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p.data
        )


def shard_batch(batch: list, positions: list[int], workers: int) -> list[WorkerShard]:
    """Contiguous shards in node order; the last worker takes the remainder.

    Workers that would receive nothing (batch smaller than worker count) are
    omitted rather than given empty shards.
    """
    n = len(batch)
    base = n // workers
    shards = []
    offset = 0
    for w in range(workers):
        size = base + (n - base * workers if w == workers - 1 else 0)
        if size == 0:
            continue
        shards.append(WorkerShard(
            node_index=w,
            samples=batch[offset:offset + size],
            positions=positions[offset:offset + size],
        ))
        offset += size
    return shards


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] *= factor


def train_step(model: CmtModel, batch: list, positions: list[int],
               cfg: TrainConfig, opt_state: AdamWState | None,
               seed_ctx: tuple[int, ...],
               epoch: int | None = None, batch_index: int | None = None) -> float:
    """One global step: shard, per-worker gradients, reduce, update."""
    shards = shard_batch(batch, positions, cfg.workers)
    grad_sets, losses, counts = [], [], []
    for shard in shards:
        try:
            grads, loss = compute_shard_gradient(shard, model, seed_ctx)
        except EvaluationError as e:
            raise TrainingDiverged(str(e), epoch=epoch, batch=batch_index) from e
        grad_sets.append(grads)
        losses.append(loss)
        counts.append(len(shard.samples))
    reduced = allreduce(grad_sets, counts)
    if cfg.grad_clip is not None:
        clip_gradients(reduced, cfg.grad_clip)
    if cfg.optimizer == "sgd":
        sgd_step(model, reduced, cfg.learning_rate, epoch, batch_index)
    else:
        adamw_step(model, reduced, opt_state, cfg, epoch, batch_index)
    total = sum(counts)
    return sum(l * c for l, c in zip(losses, counts)) / total


def default_evaluator(model: CmtModel, samples) -> tuple[float, float]:
    """(mean validation loss, validation accuracy) in inference mode."""
    from .metrics import evaluate
    report, _ = evaluate(model, samples)
    return report.mean_cross_entropy, report.accuracy


def train(
    model: CmtModel,
    train_samples: list,
    val_samples: list,
    cfg: TrainConfig,
    evaluator=default_evaluator,
    on_epoch=None,
) -> TrainingLog:
    """Optimize ``model`` in place; returns the per-epoch log.

    Early stopping: tracks the best validation loss; when it fails to improve
    by at least ``min_delta`` for ``patience`` consecutive epochs, training
    stops and the best epoch's parameters are restored. The model always ends
    at the best validation epoch seen, whether or not the stop triggered.
    """
    if not train_samples or not val_samples:
        raise InputError("train and validation splits must be nonempty")
    log = TrainingLog()
    opt_state = AdamWState() if cfg.optimizer == "adamw" else None
    best_loss = np.inf
    best_params: dict[str, np.ndarray] = {
        n: p.data.copy() for n, p in model.params.items()
    }
    bad_epochs = 0

    for epoch in range(cfg.max_epochs):
        start = time.monotonic()
        order = make_rng(cfg.seed, 0xE90C4, epoch).permutation(len(train_samples))
        epoch_loss = 0.0
        seen = 0
        for batch_index, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            positions = list(range(len(batch)))
            loss = train_step(model, batch, positions, cfg, opt_state,
                              (cfg.seed, epoch, batch_index),
                              epoch=epoch, batch_index=batch_index)
            if not np.isfinite(loss):
                raise TrainingDiverged("non-finite training loss",
                                       epoch=epoch, batch=batch_index)
            epoch_loss += loss * len(batch)
            seen += len(batch)
        val_loss, val_acc = evaluator(model, val_samples)
        if not np.isfinite(val_loss):
            raise TrainingDiverged("non-finite validation loss", epoch=epoch)
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / seen,
            val_loss=float(val_loss),
            val_accuracy=float(val_acc),
            seconds=time.monotonic() - start,
        )
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)

        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            log.best_epoch = epoch
            best_params = {n: p.data.copy() for n, p in model.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                log.stopped_early = True
                break

    for name, p in model.params.items():
        model.params[name] = Tensor(best_params[name])
    return log
