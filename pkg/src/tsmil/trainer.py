"""Training recipe: one-vs-rest BCE, AdamW with Lookahead, window masking
augmentation, warm-up mixing, and macro-averaged evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .data import Bag
from .model import Model, forward_bag

# The run configuration carries every field of the training contract.
TrainConfig = RunConfig

MASK_WINDOWS = 10


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; message carries diagnostics."""


# ---------------------------------------------------------------------------
# objective and prediction


def ovr_bce_loss(logits: Tensor, label: int) -> Tensor:
    """Mean over classes of one-vs-rest binary cross entropy."""
    flat = ag.reshape(logits, (logits.data.size,))
    c = flat.shape[0]
    if c < 2:
        raise ag.UsageError(f"one-vs-rest needs >= 2 classes, got {c}")
    if not 0 <= label < c:
        raise ag.UsageError(f"label {label} outside [0, {c})")
    onehot = np.zeros(c, dtype=flat.dtype)
    onehot[label] = 1.0
    return ag.mean_all(ag.bce_with_logits(flat, onehot))


def predict(logits) -> int:
    """Argmax class; ties break to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(arr.reshape(-1)))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay (applied multiplicatively before the update)
    with bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], cfg: RunConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.wd = cfg.weight_decay
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.wd:
                p.data *= 1.0 - self.lr * self.wd
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Lookahead:
    """Keeps slow copies of the parameters; every k inner steps the slow
    weights move toward the fast ones and the fast weights reset to them."""

    def __init__(self, params: dict[str, Tensor], k: int, alpha: float):
        self.params = params
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = {n: p.data.copy() for n, p in params.items()}

    def after_step(self) -> None:
        self.counter += 1
        if self.counter % self.k == 0:
            for name, p in self.params.items():
                lookahead_sync(p, self.slow[name], self.alpha)


def lookahead_sync(fast: Tensor, slow: np.ndarray, alpha: float) -> None:
    slow += alpha * (fast.data - slow)
    fast.data[...] = slow


# ---------------------------------------------------------------------------
# augmentation


def window_mask_augment(values: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace a sample of 10 contiguous windows with standard normal noise.

    Windows have size T // 10 (the last absorbs the remainder); floor(10 p)
    of them are drawn without replacement. Training-time only.
    """
    t = values.shape[0]
    if t < MASK_WINDOWS:
        warnings.warn(f"sequence length {t} < {MASK_WINDOWS}; masking skipped", stacklevel=2)
        return values.copy()
    out = values.copy()
    n_masked = int(MASK_WINDOWS * p)
    if n_masked == 0:
        return out
    size = t // MASK_WINDOWS
    chosen = rng.choice(MASK_WINDOWS, size=n_masked, replace=False)
    for w in chosen:
        start = w * size
        stop = (w + 1) * size if w < MASK_WINDOWS - 1 else t
        out[start:stop] = rng.standard_normal(out[start:stop].shape)
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    auc_roc: float
    skipped_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "auc_roc": self.auc_roc,
            "skipped_classes": self.skipped_classes,
        }


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float | None:
    """Trapezoidal ROC area with tied scores grouped; None if one class is empty."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = positives[order]
    area = 0.0
    tp = fp = 0
    prev_tpr = prev_fpr = 0.0
    i = 0
    while i < len(s_sorted):
        j = i
        while j < len(s_sorted) and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j].sum())
        fp += (j - i) - int(y_sorted[i:j].sum())
        tpr, fpr = tp / n_pos, fp / n_neg
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_tpr, prev_fpr = tpr, fpr
        i = j
    return area


def compute_metrics(labels: np.ndarray, preds: np.ndarray, scores: np.ndarray) -> Metrics:
    """Macro-averaged metrics over the classes present in ``labels``.

    ``scores`` is (N, C) sigmoid probabilities; classes absent from the true
    labels are skipped and reported.
    """
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    n_classes = scores.shape[1]
    accuracy = float(np.mean(preds == labels)) if len(labels) else 0.0
    precisions, recalls, f1s, aucs, skipped = [], [], [], [], []
    for c in range(n_classes):
        support = int((labels == c).sum())
        if support == 0:
            skipped.append(c)
            continue
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = support - tp
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
        auc = binary_auc(scores[:, c], (labels == c).astype(int))
        if auc is not None:
            aucs.append(auc)
    return Metrics(
        accuracy=accuracy,
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
        macro_precision=float(np.mean(precisions)) if precisions else 0.0,
        macro_recall=float(np.mean(recalls)) if recalls else 0.0,
        auc_roc=float(np.mean(aucs)) if aucs else float("nan"),
        skipped_classes=skipped,
    )


def evaluate(model: Model, bags: list[Bag]) -> Metrics:
    """Inference-mode metrics: no augmentation, no warm-up mixing."""
    if not bags:
        raise ag.UsageError("evaluate needs a non-empty dataset")
    labels, preds, scores = [], [], []
    for bag in bags:
        result = forward_bag(model, bag.values, mask=bag.mask, in_warmup=False)
        logit_row = result.logits.data.reshape(-1)
        labels.append(bag.label)
        preds.append(predict(logit_row))
        scores.append(1.0 / (1.0 + np.exp(-logit_row.astype(np.float64))))
    return compute_metrics(np.array(labels), np.array(preds), np.vstack(scores))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochReport:
    epoch: int
    loss: float
    metrics: Metrics

    def csv_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "accuracy": self.metrics.accuracy,
            "macro_f1": self.metrics.macro_f1,
            "macro_precision": self.metrics.macro_precision,
            "macro_recall": self.metrics.macro_recall,
            "auc_roc": self.metrics.auc_roc,
        }


def _diagnostics(model: Model, batch_ids: list[str]) -> str:
    norms = {name: float(np.linalg.norm(p.data)) for name, p in model.parameters().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
    return f"batch bags {batch_ids}; largest parameter norms {worst}"


def train_epoch(
    model: Model,
    bags: list[Bag],
    optimizer: AdamW,
    lookahead: Lookahead,
    cfg: RunConfig,
    epoch_index: int,
    rng: np.random.Generator,
) -> EpochReport:
    """One pass over the data in a seeded random batch order."""
    if not bags:
        raise ag.UsageError("train_epoch needs a non-empty dataset")
    in_warmup = epoch_index < cfg.warmup.warmup_epochs
    order = rng.permutation(len(bags))
    total_loss = 0.0
    labels, preds, scores = [], [], []
    for start in range(0, len(order), cfg.batch_size):
        batch = [bags[i] for i in order[start : start + cfg.batch_size]]
        p = float(rng.choice(np.asarray(cfg.mask_p_choices, dtype=np.float64)))
        batch_loss = None
        for bag in batch:
            values = window_mask_augment(bag.values, p, rng) if p > 0 else bag.values
            result = forward_bag(model, values, mask=bag.mask, in_warmup=in_warmup)
            loss = ovr_bce_loss(result.logits, bag.label)
            batch_loss = loss if batch_loss is None else ag.add(batch_loss, loss)
            logit_row = result.logits.data.reshape(-1)
            labels.append(bag.label)
            preds.append(predict(logit_row))
            scores.append(1.0 / (1.0 + np.exp(-logit_row.astype(np.float64))))
        batch_loss = ag.scale(batch_loss, 1.0 / len(batch))
        loss_value = batch_loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss {loss_value} at epoch {epoch_index}; "
                + _diagnostics(model, [b.id for b in batch])
            )
        total_loss += loss_value * len(batch)
        model.zero_grads()
        ag.backward(batch_loss)
        optimizer.step()
        lookahead.after_step()
    metrics = compute_metrics(np.array(labels), np.array(preds), np.vstack(scores))
    return EpochReport(epoch=epoch_index, loss=total_loss / len(bags), metrics=metrics)


def train(
    model: Model,
    bags: list[Bag],
    cfg: RunConfig,
    log=None,
) -> list[EpochReport]:
    """Run the full recipe for cfg.epochs epochs; returns per-epoch reports."""
    params = model.parameters()
    optimizer = AdamW(params, cfg)
    lookahead = Lookahead(params, cfg.lookahead_k, cfg.lookahead_alpha)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for epoch in range(cfg.epochs):
        report = train_epoch(model, bags, optimizer, lookahead, cfg, epoch, rng)
        reports.append(report)
        if log is not None:
            log(
                f"epoch {epoch:3d}  loss {report.loss:.4f}  "
                f"train_acc {report.metrics.accuracy:.3f}"
            )
    return reports
