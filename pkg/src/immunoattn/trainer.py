"""AdamW training with token-budget batching and early stopping."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .checkpoint import Checkpoint
from .datasets import ProteinRecord, ceil_count
from .descriptors import sequence_descriptors
from .embedio import EmbeddingBundle
from .errors import DataError, NumericalError
from .metrics import MetricReport, ScoredLabel, aggregate, build_report
from .model import (
    ModelConfig,
    ModelParams,
    cross_entropy,
    init_params,
    make_dropout_mask,
    model_backward,
    model_forward,
    softmax,
)

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_tokens_per_batch: int = 4000
    grad_accum: int = 1
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.grad_accum < 1 or self.max_epochs < 1:
            raise ValueError("patience, grad_accum and max_epochs must all be >= 1")
        if self.max_tokens_per_batch < 1:
            raise ValueError("max_tokens_per_batch must be >= 1")


@dataclass
class OptimState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


@dataclass
class Example:
    """A record with everything the model consumes."""

    record: ProteinRecord
    bundle: EmbeddingBundle
    descriptors: np.ndarray

    @property
    def label(self) -> int:
        return self.record.label

    def __len__(self) -> int:
        return len(self.record.sequence)


def prepare_examples(
    records: Iterable[ProteinRecord], bundles: dict[str, EmbeddingBundle]
) -> list[Example]:
    out = []
    for r in records:
        b = bundles.get(r.id)
        if b is None:
            raise DataError(f"no embedding bundle for record {r.id!r}")
        if b.length != len(r.sequence):
            raise DataError(f"record {r.id!r}: bundle length {b.length} != sequence length {len(r.sequence)}")
        out.append(Example(r, b, sequence_descriptors(r.sequence)))
    return out


def batch_by_token_budget(
    items: Sequence[T], budget: int, length: Callable[[T], int] = len
) -> list[list[T]]:
    """Greedy in-order fill; an item longer than ``budget`` gets its own batch."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    batches: list[list[T]] = []
    current: list[T] = []
    used = 0
    for item in items:
        n = length(item)
        if current and used + n > budget:
            batches.append(current)
            current, used = [], 0
        current.append(item)
        used += n
    if current:
        batches.append(current)
    return batches


def adamw_step(
    params: ModelParams, grads: ModelParams, state: OptimState, config: TrainConfig
) -> tuple[ModelParams, OptimState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = getattr(grads, name)
        m = b1 * getattr(state.m, name) + (1 - b1) * g
        v = b2 * getattr(state.v, name) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = p - config.lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p)
        new_m[name], new_v[name] = m, v
    return ModelParams(**new_p), OptimState(ModelParams(**new_m), ModelParams(**new_v), t)


def _record_key(rid: str) -> list[int]:
    return list(struct.unpack("<2I", hashlib.sha256(rid.encode("utf-8")).digest()[:8]))


def _loss_grad_sum(
    batch: Sequence[Example], params: ModelParams, config: ModelConfig, dropout_seed: int
) -> tuple[float, ModelParams]:
    total = 0.0
    grads = params.zeros_like()
    for ex in batch:
        # mask depends on (seed, record id) only, so batch composition does not matter
        rng = np.random.default_rng([dropout_seed, *_record_key(ex.record.id)])
        trace = model_forward(
            ex.bundle, ex.descriptors, params, config, "train",
            dropout_mask=make_dropout_mask(config, rng),
        )
        total += cross_entropy(trace.logits, ex.label)
        g = model_backward(trace, ex.label, params, config)
        for name, acc in grads.items():
            acc += getattr(g, name)
    return total, grads


def loss_and_grad(
    batch: Sequence[Example], params: ModelParams, config: ModelConfig, dropout_seed: int = 0
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over the batch and the matching mean gradient."""
    if not batch:
        raise DataError("empty batch")
    total, grads = _loss_grad_sum(batch, params, config, dropout_seed)
    n = len(batch)
    return total / n, grads.map(lambda g: g / n)


def predict_proba(examples: Sequence[Example], params: ModelParams, config: ModelConfig) -> np.ndarray:
    probs = np.empty(len(examples))
    for i, ex in enumerate(examples):
        logits = model_forward(ex.bundle, ex.descriptors, params, config, "eval").logits
        probs[i] = softmax(np.asarray(logits, dtype=np.float64))[1]
    if not np.all(np.isfinite(probs)):
        raise NumericalError("non-finite predicted probability")
    return probs


def accuracy(examples: Sequence[Example], params: ModelParams, config: ModelConfig, threshold: float = 0.5) -> float:
    probs = predict_proba(examples, params, config)
    labels = np.array([ex.label for ex in examples])
    return float(np.mean((probs > threshold).astype(int) == labels))


class EarlyStopping:
    """Tracks the best score; a score counts as better only if strictly higher."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, score: float, epoch: int) -> bool:
        if self.best is None or score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_acc: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def history_to_csv(history: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "valid_acc"])
    for h in history:
        writer.writerow([h.epoch, repr(h.train_loss), repr(h.valid_acc)])
    return buf.getvalue()


def train(
    train_examples: Sequence[Example],
    valid_examples: Sequence[Example],
    model_config: ModelConfig,
    train_config: TrainConfig | None = None,
    params: ModelParams | None = None,
    validate: Callable[[ModelParams], float] | None = None,
) -> TrainResult:
    """Run epochs until ``max_epochs`` or ``patience`` epochs without a new best
    validation accuracy. Returns the best-scoring parameters.

    ``validate`` overrides the validation-accuracy computation.
    """
    cfg = train_config or TrainConfig()
    if not train_examples or not valid_examples:
        raise DataError("training and validation partitions must both be nonempty")
    if params is None:
        params = init_params(model_config, cfg.seed)
    if validate is None:
        def validate(p: ModelParams) -> float:
            return accuracy(valid_examples, p, model_config, cfg.threshold)

    state = OptimState.zeros(params)
    stopper = EarlyStopping(cfg.patience)
    best_params = params.copy()
    history: list[EpochStats] = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_examples))
        batches = batch_by_token_budget([train_examples[i] for i in order], cfg.max_tokens_per_batch)
        epoch_loss = 0.0
        for step, start in enumerate(range(0, len(batches), cfg.grad_accum)):
            group = batches[start : start + cfg.grad_accum]
            dropout_seed = int(rng.integers(2**31))
            total, grads = 0.0, params.zeros_like()
            count = 0
            for batch in group:
                loss_sum, g = _loss_grad_sum(batch, params, model_config, dropout_seed)
                total += loss_sum
                count += len(batch)
                for name, acc in grads.items():
                    acc += getattr(g, name)
            params, state = adamw_step(params, grads.map(lambda a: a / count), state, cfg)
            epoch_loss += total
        train_loss = epoch_loss / len(train_examples)
        if not np.isfinite(train_loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
        valid_acc = float(validate(params))
        history.append(EpochStats(epoch, train_loss, valid_acc))
        log.info("epoch %d train_loss=%.4f valid_acc=%.4f", epoch, train_loss, valid_acc)
        if stopper.update(valid_acc, epoch):
            best_params = params.copy()
        if stopper.should_stop:
            stopped = True
            break
    return TrainResult(
        Checkpoint(model_config, best_params), history, stopper.best_epoch or 0, stopped
    )


def score_examples(examples: Sequence[Example], checkpoint: Checkpoint) -> list[ScoredLabel]:
    probs = predict_proba(examples, checkpoint.params, checkpoint.config)
    return [
        ScoredLabel(ex.record.id, float(min(max(p, 0.0), 1.0)), ex.label)
        for ex, p in zip(examples, probs)
    ]


def evaluate_repeated(
    examples: Sequence[Example],
    checkpoint: Checkpoint,
    n_repeats: int = 10,
    fraction: float = 0.5,
    seed: int = 0,
    threshold: float = 0.5,
    k: int = 30,
) -> tuple[list[MetricReport], tuple[dict, dict]]:
    """Score once, then report on ``n_repeats`` seeded subsamples of
    ceil(fraction * N) records drawn without replacement."""
    if not examples:
        raise DataError("empty test set")
    if n_repeats < 1 or not 0.0 < fraction <= 1.0:
        raise DataError(f"need n_repeats >= 1 and fraction in (0, 1], got {n_repeats}, {fraction}")
    scored = score_examples(examples, checkpoint)
    return evaluate_scored(scored, n_repeats, fraction, seed, threshold, k)


def evaluate_scored(
    scored: Sequence[ScoredLabel],
    n_repeats: int = 10,
    fraction: float = 0.5,
    seed: int = 0,
    threshold: float = 0.5,
    k: int = 30,
) -> tuple[list[MetricReport], tuple[dict, dict]]:
    n = len(scored)
    size = ceil_count(fraction, n)
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_repeats):
        idx = np.sort(rng.choice(n, size=size, replace=False))
        reports.append(build_report([scored[i] for i in idx], threshold, k))
    return reports, aggregate(reports)
