"""
Training: softmax cross-entropy, SGD with momentum and the epoch loop.

Hyperparameters stay fixed across step factors so runs that differ only in
h are directly comparable. A non-finite loss (or non-finite parameters after
an epoch) ends the run: the remaining epochs repeat the last finite metrics
and the record is flagged as diverged.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from config import BATCH_SIZE, EPOCHS, LEARNING_RATE, LOG_EVERY, MOMENTUM
from errors import ConfigError, ShapeError
from nn.layers import EVAL, TRAIN
from tensor.core import Rng, all_finite, frobenius_norm

log = logging.getLogger(__name__)


# ── Loss ──────────────────────────────────────────────────────

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    if labels.shape != (m,):
        raise ShapeError("labels vs logits", labels.shape, logits.shape)
    lse = logsumexp(logits, axis=1)
    rows = np.arange(m)
    loss = float(np.mean(lse - logits[rows, labels]))
    probs = np.exp(logits - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / m


def predict(net, features):
    """Class index per sample; ties go to the smaller index."""
    logits = net.forward(features, EVAL)
    return np.argmax(logits, axis=1)


def evaluate(net, dataset):
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(net, dataset.features) == dataset.labels))


# ── Optimizer ────────────────────────────────────────────────

class SgdMomentum:
    """
    velocity <- momentum * velocity + lr * grad
    param    <- param - velocity
    """

    def __init__(self, net, learning_rate=LEARNING_RATE, momentum=MOMENTUM):
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {learning_rate}")
        self.net = net
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(value) for name, value, _ in net.named_parameters()}

    def step(self):
        for name, value, grad in self.net.named_parameters():
            v = self.velocity[name]
            v *= self.momentum
            v += self.learning_rate * grad
            value -= v

    def zero_grad(self):
        self.net.zero_grad()


# ── Plan & record ────────────────────────────────────────────

class TrainPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(EPOCHS, ge=1)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    seed: int = 0
    record_gradient_norms: bool = True
    record_trajectories: bool = False


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    max_block_grad_norm: float
    input_grad_norm: float


@dataclass
class RunRecord:
    rows: List[EpochRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    diverged: bool = False
    diverged_epoch: Optional[int] = None

    @property
    def final_test_acc(self):
        return self.rows[-1].test_acc if self.rows else 0.0

    @property
    def best_test_acc(self):
        return max((r.test_acc for r in self.rows), default=0.0)

    @property
    def losses(self):
        return [r.train_loss for r in self.rows]


# ── Loop ─────────────────────────────────────────────────────

def _check_compatible(net, train_set, test_set, plan):
    c = net.config
    for name, d in (("train", train_set), ("test", test_set)):
        if d.dim != c.input_dim:
            raise ShapeError(f"{name} features vs network input", d.features.shape, (len(d), c.input_dim))
        if len(d) and int(d.labels.max()) >= c.num_classes:
            raise ConfigError(f"{name} labels exceed num_classes={c.num_classes}")
    if c.use_bn and plan.batch_size < 2:
        raise ConfigError("batch norm needs batch_size >= 2")
    if len(train_set) < 2:
        raise ConfigError("training set needs at least 2 samples")


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        # a trailing batch of one cannot be batch-normalized
        if len(idx) >= 2 or batch_size == 1:
            yield idx


def _params_finite(net):
    return all(all_finite(v) for _, v, _ in net.named_parameters())


def _full_loss(net, dataset):
    logits = net.forward(dataset.features, EVAL)
    loss, _ = softmax_cross_entropy(logits, dataset.labels)
    return loss


def _run_epoch(net, train_set, test_set, opt, plan, rng, epoch):
    """One pass over the shuffled training set. Returns (row, diverged)."""
    order = rng.spawn(epoch).permutation(len(train_set))
    loss_sum, seen = 0.0, 0
    block_norm, input_norm = 0.0, 0.0

    for idx in _batches(order, plan.batch_size):
        opt.zero_grad()
        logits = net.forward(train_set.features[idx], TRAIN)
        loss, grad = softmax_cross_entropy(logits, train_set.labels[idx])
        if not math.isfinite(loss):
            return None, True
        net.backward(grad)
        if plan.record_gradient_norms:
            norms = [frobenius_norm(g) for g in net.boundary_grads]
            block_norm = max(block_norm, max(norms))
            input_norm = max(input_norm, norms[0])
        opt.step()
        loss_sum += loss * len(idx)
        seen += len(idx)

    if not _params_finite(net):
        return None, True

    nan = float("nan")
    row = EpochRow(
        epoch=epoch,
        train_loss=loss_sum / max(seen, 1),
        train_acc=evaluate(net, train_set),
        test_acc=evaluate(net, test_set),
        max_block_grad_norm=block_norm if plan.record_gradient_norms else nan,
        input_grad_norm=input_norm if plan.record_gradient_norms else nan,
    )
    return row, False


def train(net, train_set, test_set, opt, plan, metadata=None):
    """Train in place and return the per-epoch RunRecord."""
    _check_compatible(net, train_set, test_set, plan)
    rng = Rng(plan.seed)
    record = RunRecord(metadata=dict(metadata or {}))

    with np.errstate(over="ignore", invalid="ignore"):
        last = EpochRow(
            epoch=0,
            train_loss=_full_loss(net, train_set),
            train_acc=evaluate(net, train_set),
            test_acc=evaluate(net, test_set),
            max_block_grad_norm=float("nan"),
            input_grad_norm=float("nan"),
        )
    log.info(
        f"Training D={net.depth} h={net.h} bn={net.config.use_bn} for {plan.epochs} epochs "
        f"(initial test acc {last.test_acc:.3f})"
    )

    for epoch in range(1, plan.epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            row, diverged = _run_epoch(net, train_set, test_set, opt, plan, rng, epoch)

        if diverged:
            record.diverged = True
            record.diverged_epoch = epoch
            log.warning(f"Run diverged at epoch {epoch} (D={net.depth}, h={net.h}); freezing metrics")
            for e in range(epoch, plan.epochs + 1):
                record.rows.append(EpochRow(
                    epoch=e,
                    train_loss=last.train_loss,
                    train_acc=last.train_acc,
                    test_acc=last.test_acc,
                    max_block_grad_norm=last.max_block_grad_norm,
                    input_grad_norm=last.input_grad_norm,
                ))
            break

        last = row
        record.rows.append(row)
        if epoch % LOG_EVERY == 0 or epoch == plan.epochs:
            log.info(
                f"epoch {epoch}/{plan.epochs}  loss={row.train_loss:.4f}  "
                f"train={row.train_acc:.3f}  test={row.test_acc:.3f}"
            )

    return record
