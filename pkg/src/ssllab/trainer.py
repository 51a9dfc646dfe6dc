"""Training loop: interleaved labeled/unlabeled batches, SGD with momentum
and weight decay, cosine learning-rate decay, EMA maintenance, periodic
evaluation.

There are no epochs, only iterations. The labeled and unlabeled iterators
cycle independently through reshuffled permutations; every example in a
pool is seen once before any example repeats within that cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ValidationError
from .data import DatasetSplits
from .methods import (
    DEFAULT_POLICIES,
    MethodConfig,
    RunningClassDistribution,
    compute_method_loss,
    ramp_scale,
)
from .model import EmaParams, EncoderConfig, ModelParams, build_encoder, ema_update, forward

HISTORY_COLUMNS = ("iteration", "sup_loss", "unsup_loss", "total_loss", "mask_rate", "lr", "eval_accuracy")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 4096
    labeled_batch: int = 32
    unlabeled_ratio: int = 7
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0005
    ema_m: float = 0.999
    eval_every: int = 512
    seed: int = 0
    keep_best: bool = False  # report best eval checkpoint instead of last

    def __post_init__(self):
        if self.total_iterations < 1 or self.labeled_batch < 1 or self.unlabeled_ratio < 1:
            raise ValidationError("total_iterations, labeled_batch and unlabeled_ratio must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if self.lr0 <= 0 or self.weight_decay < 0:
            raise ValidationError("lr0 must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ValidationError("ema_m must be in [0, 1]")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")

    def to_dict(self):
        return {
            "total_iterations": self.total_iterations,
            "labeled_batch": self.labeled_batch,
            "unlabeled_ratio": self.unlabeled_ratio,
            "lr0": self.lr0,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "ema_m": self.ema_m,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "keep_best": self.keep_best,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def cosine_lr(k: int, total: int, lr0: float) -> float:
    """lr0 * cos(7*pi*k / (16*total)): strictly decreasing, positive on [0, total]."""
    if k < 0 or k > total:
        raise ValidationError(f"iteration {k} outside [0, {total}]")
    return lr0 * math.cos(7.0 * math.pi * k / (16.0 * total))


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray]
    k: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.tensors.items()})


def sgd_step(params: ModelParams, state: OptimizerState, lr: float, momentum: float, weight_decay: float):
    """g <- grad + wd*theta; v <- momentum*v + g; theta <- theta - lr*v."""
    for name, t in params.tensors.items():
        if t.grad is None:
            g = weight_decay * t.data if weight_decay else np.zeros_like(t.data)
        else:
            if t.grad.shape != t.data.shape:
                raise ad.ShapeError(f"gradient shape {t.grad.shape} != parameter shape {t.data.shape} for {name}")
            g = t.grad + weight_decay * t.data if weight_decay else t.grad
        v = state.velocities[name]
        v *= np.float32(momentum)
        v += g.astype(v.dtype, copy=False)
        t.data -= np.float32(lr) * v
    state.k += 1
    return params, state


class _BatchCycler:
    """Yields index batches cycling through reshuffled permutations; a batch
    may span a permutation boundary, so every example is consumed exactly
    once per cycle regardless of batch size."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValidationError("cannot cycle over an empty pool")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        out = np.empty(self.batch_size, dtype=np.int64)
        filled = 0
        while filled < self.batch_size:
            take = min(self.batch_size - filled, self.n - self._pos)
            out[filled : filled + take] = self._perm[self._pos : self._pos + take]
            filled += take
            self._pos += take
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
        return out


@dataclass
class HistoryRecord:
    iteration: int
    sup_loss: float
    unsup_loss: float
    total_loss: float
    mask_rate: float
    lr: float
    eval_accuracy: float | None = None


class MetricsHistory:
    """Per-iteration loss records, written as a line-delimited TSV
    (header row, one row per iteration, empty eval_accuracy when absent)."""

    def __init__(self, records: list[HistoryRecord] | None = None):
        self.records = records if records is not None else []

    def append(self, rec: HistoryRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, MetricsHistory) or len(self) != len(other):
            return NotImplemented if not isinstance(other, MetricsHistory) else False
        return all(a == b for a, b in zip(self.records, other.records))

    def final_accuracy(self) -> float | None:
        for rec in reversed(self.records):
            if rec.eval_accuracy is not None:
                return rec.eval_accuracy
        return None

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\t".join(HISTORY_COLUMNS) + "\n")
            for r in self.records:
                ev = "" if r.eval_accuracy is None else repr(r.eval_accuracy)
                fh.write(
                    f"{r.iteration}\t{r.sup_loss!r}\t{r.unsup_loss!r}\t{r.total_loss!r}"
                    f"\t{r.mask_rate!r}\t{r.lr!r}\t{ev}\n"
                )

    @classmethod
    def load(cls, path) -> "MetricsHistory":
        records = []
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != HISTORY_COLUMNS:
                raise ValidationError(f"unexpected history header {header}")
            for line in fh:
                f = line.rstrip("\n").split("\t")
                records.append(
                    HistoryRecord(
                        iteration=int(f[0]),
                        sup_loss=float(f[1]),
                        unsup_loss=float(f[2]),
                        total_loss=float(f[3]),
                        mask_rate=float(f[4]),
                        lr=float(f[5]),
                        eval_accuracy=None if f[6] == "" else float(f[6]),
                    )
                )
        return cls(records)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C] int64; rows = true class, cols = predicted
    class_names: list[str] | None = None

    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def render(self) -> str:
        c = len(self.counts)
        names = self.class_names if self.class_names else [f"class-{i}" for i in range(c)]
        width = max(max(len(n) for n in names), 6)
        lines = [" " * (width + 1) + " ".join(f"{n:>{width}}" for n in names)]
        for i, row in enumerate(self.counts):
            lines.append(f"{names[i]:>{width}} " + " ".join(f"{v:>{width}d}" for v in row))
        return "\n".join(lines)


@dataclass
class TrainResult:
    params: ModelParams
    ema: EmaParams
    history: MetricsHistory
    accuracy: float
    confusion: ConfusionMatrix
    labeled_seen: int
    unlabeled_seen: int
    best_accuracy: float | None = None


def evaluate(params: ModelParams, validation, stats, batch_size: int = 256, class_names=None):
    """(accuracy, confusion matrix) of argmax predictions on a labeled split."""
    if len(validation) == 0:
        raise ValidationError("validation split is empty")
    num_classes = params.config.num_classes
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    images, labels = validation.images, validation.labels
    for start in range(0, len(images), batch_size):
        chunk = stats.standardize(images[start : start + batch_size])
        with ad.no_grad():
            logits = forward(params, chunk).data
        preds = logits.argmax(axis=1)
        for t, p in zip(labels[start : start + batch_size], preds):
            counts[t, p] += 1
    cm = ConfusionMatrix(counts, class_names)
    return cm.accuracy(), cm


def train(train_cfg: TrainConfig, method_cfg: MethodConfig, splits: DatasetSplits,
          encoder_cfg: EncoderConfig | None = None, policies=DEFAULT_POLICIES,
          on_step=None) -> TrainResult:
    """Run the full optimization loop and return the trained model plus the
    per-iteration metrics history.

    Deterministic: (configs, seed) fixes the model init, the batch order,
    every augmentation, and therefore the final parameters bit-for-bit.
    """
    if len(splits.labeled) == 0:
        raise ValidationError("labeled split is empty")
    needs_unlabeled = method_cfg.method != "supervised-only" and method_cfg.lambda_u > 0
    if needs_unlabeled and len(splits.unlabeled) == 0:
        raise ValidationError(f"method {method_cfg.method} needs a nonempty unlabeled split")

    if encoder_cfg is None:
        c_in, size = splits.labeled.images.shape[1], splits.labeled.images.shape[2]
        encoder_cfg = EncoderConfig(input_channels=c_in, input_size=size, num_classes=splits.num_classes)

    root = np.random.SeedSequence(train_cfg.seed)
    init_ss, lab_ss, unlab_ss = root.spawn(3)
    params = build_encoder(encoder_cfg, int(init_ss.generate_state(1)[0]))
    ema_m = method_cfg.ema_m if method_cfg.ema_m is not None else train_cfg.ema_m
    teacher = EmaParams.from_student(params, m=ema_m)
    state = OptimizerState.for_params(params)
    running = None
    if method_cfg.method == "remixmatch":
        running = RunningClassDistribution.from_labels(splits.labeled.labels, splits.num_classes)

    labeled_iter = _BatchCycler(len(splits.labeled), train_cfg.labeled_batch, np.random.default_rng(lab_ss))
    unlabeled_batch = train_cfg.labeled_batch * train_cfg.unlabeled_ratio
    unlabeled_iter = None
    if len(splits.unlabeled) > 0:
        unlabeled_iter = _BatchCycler(len(splits.unlabeled), unlabeled_batch, np.random.default_rng(unlab_ss))

    history = MetricsHistory()
    eval_params = lambda: teacher.as_model_params() if method_cfg.method == "mean-teacher" else params
    labeled_seen = 0
    unlabeled_seen = 0
    best_acc = None
    total = train_cfg.total_iterations

    for k in range(total):
        lr = cosine_lr(k, total, train_cfg.lr0)
        idx_l = labeled_iter.next_batch()
        labeled = (splits.labeled.images[idx_l], splits.labeled.labels[idx_l])
        labeled_seen += len(idx_l)
        unlabeled = None
        if unlabeled_iter is not None:
            idx_u = unlabeled_iter.next_batch()
            unlabeled = splits.unlabeled.images[idx_u]
            unlabeled_seen += len(idx_u)

        scale = ramp_scale(method_cfg.method, k, total)
        cfg_step = method_cfg if scale == 1.0 else replace(method_cfg, lambda_u=method_cfg.lambda_u * scale)
        step_seed = int(np.random.SeedSequence([train_cfg.seed, k]).generate_state(1)[0])

        params.zero_grads()
        breakdown = compute_method_loss(
            params, teacher, labeled, unlabeled, cfg_step,
            seed=step_seed, stats=splits.stats, policies=policies, running=running,
        )
        ad.backward(breakdown.total_tensor)
        sgd_step(params, state, lr, train_cfg.momentum, train_cfg.weight_decay)
        ema_update(teacher, params, ema_m)
        if running is not None and breakdown.unlabeled_pred_mean is not None:
            running.update(breakdown.unlabeled_pred_mean)
        if on_step is not None:
            on_step(k, params, teacher, breakdown)

        eval_acc = None
        if (k + 1) % train_cfg.eval_every == 0 or k == total - 1:
            eval_acc, _ = evaluate(eval_params(), splits.validation, splits.stats, class_names=splits.class_names)
            if best_acc is None or eval_acc > best_acc:
                best_acc = eval_acc
        history.append(
            HistoryRecord(k, breakdown.supervised, breakdown.unsupervised, breakdown.total,
                          breakdown.mask_rate, lr, eval_acc)
        )

    accuracy, confusion = evaluate(eval_params(), splits.validation, splits.stats, class_names=splits.class_names)
    if train_cfg.keep_best and best_acc is not None and best_acc > accuracy:
        accuracy = best_acc  # best-checkpoint reporting; params stay the last state
    return TrainResult(
        params=params,
        ema=teacher,
        history=history,
        accuracy=accuracy,
        confusion=confusion,
        labeled_seen=labeled_seen,
        unlabeled_seen=unlabeled_seen,
        best_accuracy=best_acc,
    )
