"""Loss, optimizer, learning-rate schedule, dataset splitting, metrics,
and the training loop."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graphs import ConfigurationError
from .model import MsaGcn


class LabelError(ValueError):
    """A class label is outside the supported label set."""


class EmptyEvaluationError(ValueError):
    """Metrics were requested for zero samples."""


class TrainingDivergedError(ArithmeticError):
    """The loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 400
    base_lr: float = 1e-3
    decay_epochs: tuple = (200, 300, 350)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        object.__setattr__(self, "split", tuple(self.split))
        if any(a >= b for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigurationError(f"decay epochs must increase: {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigurationError("decay epochs must lie before the last epoch")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must sum to 1, got {self.split}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")

    def to_dict(self):
        d = dict(self.__dict__)
        d["decay_epochs"] = list(self.decay_epochs)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: the base rate decays by ``decay_factor`` after each
    configured epoch boundary."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigurationError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    decays = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.decay_factor ** decays


def cross_entropy(pred: T.Tensor, labels, clamp: float = 1e-12) -> T.Tensor:
    """Mean negative log-probability of the true class.

    ``pred`` holds per-class probabilities (rows summing to 1); the
    probability is clamped at ``clamp`` before the log.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = pred.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"labels shape {labels.shape} vs predictions {pred.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelError(f"labels must be in 0..{k - 1}")
    rows = np.arange(n)
    p_true = pred.data[rows, labels]
    clamped = np.maximum(p_true, clamp)
    value = -np.log(clamped).mean()

    def backward(g):
        if pred.requires_grad:
            dp = np.zeros_like(pred.data)
            dp[rows, labels] = -g * (p_true >= clamp) / (n * clamped)
            pred.accumulate_grad(dp)

    return T._make(np.asarray(value), (pred,), backward)


class Adam(object):
    """Adam with classic (coupled) L2 weight decay and bias correction."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise T.NumericError(f"non-finite gradient for parameter {p.name!r}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def split_dataset(samples, seed: int, ratios=(0.8, 0.1, 0.1)):
    """Deterministic stratified split into (train, val, test).

    Global split sizes follow the ratios exactly (largest remainder);
    per-class counts stay within one sample of proportional.  Classes
    with fewer than 3 samples trigger a warning and an unstratified
    split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {ratios}")
    n = len(samples)
    rng = np.random.default_rng(seed)
    targets = _largest_remainder(n, ratios)

    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    if any(len(v) < 3 for v in by_class.values()):
        warnings.warn("a class has fewer than 3 samples; falling back to an "
                      "unstratified split", stacklevel=2)
        order = rng.permutation(n)
        cuts = np.cumsum(targets)[:-1]
        parts = np.split(order, cuts)
        return tuple([samples[i] for i in part] for part in parts)

    deficits = list(targets)
    assigned = [[] for _ in ratios]
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        quota = [int(len(idx) * r) for r in ratios]
        rema = [len(idx) * r - q for r, q in zip(ratios, quota)]
        leftover = len(idx) - sum(quota)
        for _ in range(leftover):
            # largest fractional remainder first; break ties in favor of
            # the globally most underfilled split
            j = max(range(len(ratios)),
                    key=lambda s: (rema[s], deficits[s] - quota[s]))
            quota[j] += 1
            rema[j] -= 1.0
        start = 0
        for j, q in enumerate(quota):
            assigned[j].extend(idx[start:start + q].tolist())
            deficits[j] -= q
            start += q
    return tuple([samples[i] for i in sorted(part)] for part in assigned)


def _largest_remainder(n, ratios):
    raw = [n * r for r in ratios]
    counts = [int(x) for x in raw]
    rema = [x - c for x, c in zip(raw, counts)]
    short = n - sum(counts)
    for j in sorted(range(len(ratios)), key=lambda j: -rema[j])[:short]:
        counts[j] += 1
    return counts


@dataclass
class MetricReport:
    """Confusion matrix plus the derived per-class and macro metrics."""

    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    accuracy: float
    mAP: float
    precision: float
    recall: float
    f1: float
    undefined_precision_classes: list = field(default_factory=list)
    undefined_recall_classes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "per_class_precision": self.per_class_precision.tolist(),
            "per_class_recall": self.per_class_recall.tolist(),
            "per_class_f1": self.per_class_f1.tolist(),
            "accuracy": self.accuracy,
            "mAP": self.mAP,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "undefined_precision_classes": self.undefined_precision_classes,
            "undefined_recall_classes": self.undefined_recall_classes,
        }


def compute_metrics(confusion) -> MetricReport:
    """One-vs-rest accuracy per class, macro precision/recall/F1, and the
    mean of the per-class accuracies (the 'mAP' of the evaluation
    protocol).  Rows are true classes, columns predictions."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise T.ShapeError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any() or not np.issubdtype(cm.dtype, np.number):
        raise ValueError("confusion matrix entries must be non-negative counts")
    total = cm.sum()
    if total == 0:
        raise EmptyEvaluationError("cannot compute metrics for zero samples")
    k = cm.shape[0]
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn

    per_acc = (tp + tn) / total
    prec = np.zeros(k)
    rec = np.zeros(k)
    f1 = np.zeros(k)
    undef_p, undef_r = [], []
    for i in range(k):
        if tp[i] + fp[i] > 0:
            prec[i] = tp[i] / (tp[i] + fp[i])
        else:
            undef_p.append(i)
        if tp[i] + fn[i] > 0:
            rec[i] = tp[i] / (tp[i] + fn[i])
        else:
            undef_r.append(i)
        if prec[i] + rec[i] > 0:
            f1[i] = 2.0 * prec[i] * rec[i] / (prec[i] + rec[i])
    return MetricReport(
        confusion=cm.copy(),
        per_class_accuracy=per_acc,
        per_class_precision=prec,
        per_class_recall=rec,
        per_class_f1=f1,
        accuracy=float(tp.sum() / total),
        mAP=float(per_acc.mean()),
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        f1=float(f1.mean()),
        undefined_precision_classes=undef_p,
        undefined_recall_classes=undef_r,
    )


# ---------------------------------------------------------------------------
# training loop


def predict_proba(model: MsaGcn, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for a [N, C, T, V] array, in eval mode."""
    out = []
    with T.no_grad():
        for start in range(0, x.shape[0], batch_size):
            batch = T.Tensor(x[start:start + batch_size])
            out.append(model.forward(batch, training=False).data)
    return np.concatenate(out, axis=0)


def evaluate(model: MsaGcn, x: np.ndarray, labels, batch_size: int = 64) -> MetricReport:
    proba = predict_proba(model, x, batch_size)
    pred = proba.argmax(axis=1)
    k = model.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.asarray(labels), pred):
        cm[t, p] += 1
    return compute_metrics(cm)


def train(model: MsaGcn, x_train, y_train, x_val, y_val, cfg: TrainConfig,
          log_path=None, progress=None):
    """Run the full optimization loop.

    ``x_*`` are [N, C, T, V] float arrays (root-centered, unscaled; the
    model applies its stored standardization), ``y_*`` integer labels.
    Returns (per-epoch log, best validation mAP); the model is left
    holding the parameters of the best-validation epoch (final epoch
    when there is no validation split).

    Raises TrainingDivergedError when the loss goes non-finite.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    n = x_train.shape[0]
    if n == 0:
        raise EmptyEvaluationError("training set is empty")

    mean = x_train.mean(axis=(0, 2, 3))
    std = x_train.std(axis=(0, 2, 3))
    model.set_input_stats(mean, std)

    opt = Adam(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    log = []
    best = {"mAP": -1.0, "state": None}
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(n)
            losses = []
            train_pred = np.empty(n, dtype=np.int64)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = T.Tensor(x_train[idx])
                proba = model.forward(batch, training=True)
                loss = cross_entropy(proba, y_train[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {epoch}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                losses.append(loss.item())
                train_pred[idx] = proba.data.argmax(axis=1)

            k = model.config.num_classes
            cm = np.zeros((k, k), dtype=np.int64)
            for t, p in zip(y_train, train_pred):
                cm[t, p] += 1
            train_map = compute_metrics(cm).mAP
            if len(y_val):
                val_map = evaluate(model, x_val, y_val).mAP
            else:
                val_map = float("nan")
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_mAP": train_map,
                "val_mAP": val_map,
            }
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
            score = val_map if len(y_val) else train_map
            if score >= best["mAP"] + 1e-12 or best["state"] is None:
                best["mAP"] = score
                best["state"] = [p.data.copy() for p in model.parameters()]
    finally:
        if log_fh:
            log_fh.close()

    for p, saved in zip(model.parameters(), best["state"]):
        p.data[...] = saved
    return log, best["mAP"]
