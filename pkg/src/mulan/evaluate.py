"""Representation-quality protocols: kNN classification and linear probing on
frozen, standardized backbone features.

Features are taken after global mean pooling, before the projector, in eval
mode with a deterministic transform (resize the shorter side by 256/224, then
center crop).  Evaluation never mutates model parameters or running
statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import normalize_channels, resize_bilinear
from .data import Dataset, DatasetStats
from .errors import ConfigError
from .model import SiameseModel
from .objective import normalize_rows
from .rng import DOMAIN_EVAL, stream

log = logging.getLogger(__name__)

EVAL_RESIZE_RATIO = 256.0 / 224.0


@dataclass
class FeatureBank:
    features: np.ndarray          # (N, D)
    labels: np.ndarray            # (N,)
    mean: np.ndarray = None       # standardization stats (train split only)
    std: np.ndarray = None

    @property
    def standardized(self) -> bool:
        return self.mean is not None


@dataclass
class EvalReport:
    protocol: str
    n_train: int
    n_val: int
    knn_top1: float = None
    linear_top1: float = None
    knn_per_class: dict = field(default_factory=dict)
    linear_per_class: dict = field(default_factory=dict)

    def to_text(self) -> str:
        """Flat key=value block."""
        lines = [f"protocol={self.protocol}", f"n_train={self.n_train}",
                 f"n_val={self.n_val}"]
        if self.knn_top1 is not None:
            lines.append(f"knn_top1={self.knn_top1:.6f}")
            lines += [f"knn_class_{c}={v:.6f}" for c, v in sorted(self.knn_per_class.items())]
        if self.linear_top1 is not None:
            lines.append(f"linear_top1={self.linear_top1:.6f}")
            lines += [f"linear_class_{c}={v:.6f}"
                      for c, v in sorted(self.linear_per_class.items())]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def eval_transform(img: np.ndarray, out_size: int, stats: DatasetStats) -> np.ndarray:
    """Deterministic eval view: upscale shorter side by 256/224, center crop."""
    c, h, w = img.shape
    scale = EVAL_RESIZE_RATIO * out_size / min(h, w)
    rh, rw = round(h * scale), round(w * scale)
    resized = resize_bilinear(img, rh, rw)
    top = (rh - out_size) // 2
    left = (rw - out_size) // 2
    return normalize_channels(resized[:, top:top + out_size, left:left + out_size],
                              stats)


def extract_features(model: SiameseModel, images: np.ndarray, stats: DatasetStats,
                     out_size: int = 32, batch_size: int = 256) -> np.ndarray:
    """Frozen backbone features (post-pool, pre-projector), eval mode."""
    views = np.stack([eval_transform(img, out_size, stats) for img in images])
    chunks = []
    for start in range(0, len(views), batch_size):
        x = views[start:start + batch_size]
        chunks.append(model.online.features(x if not hasattr(x, "data") else x,
                                            mode="eval", update_stats=False).data)
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# kNN protocol
# ---------------------------------------------------------------------------

def knn_classify(bank: FeatureBank, query: np.ndarray, k: int = 20) -> int:
    """Majority vote over the top-k cosine neighbors.

    Ties break by larger summed similarity among the tied classes, then by
    smaller class id, so predictions are deterministic.
    """
    n = len(bank.features)
    if n == 0:
        raise ConfigError("empty feature bank")
    if k > n:
        log.warning("k=%d exceeds bank size %d; using all neighbors", k, n)
        k = n
    sims = normalize_rows(bank.features) @ normalize_rows(query[None])[0]
    top = np.argpartition(-sims, k - 1)[:k]
    return _vote(bank.labels[top], sims[top])


def _vote(labels: np.ndarray, sims: np.ndarray) -> int:
    counts: dict[int, int] = {}
    sim_sums: dict[int, float] = {}
    for lab, sim in zip(labels, sims):
        lab = int(lab)
        counts[lab] = counts.get(lab, 0) + 1
        sim_sums[lab] = sim_sums.get(lab, 0.0) + float(sim)
    return max(counts, key=lambda c: (counts[c], sim_sums[c], -c))


def knn_predict_batch(bank: FeatureBank, queries: np.ndarray, k: int = 20
                      ) -> np.ndarray:
    """knn_classify over many queries with one similarity matrix."""
    n = len(bank.features)
    kk = min(k, n)
    if k > n:
        log.warning("k=%d exceeds bank size %d; using all neighbors", k, n)
    sims = normalize_rows(queries) @ normalize_rows(bank.features).T
    out = np.empty(len(queries), dtype=np.int64)
    for i, row in enumerate(sims):
        top = np.argpartition(-row, kk - 1)[:kk] if kk < n else np.arange(n)
        out[i] = _vote(bank.labels[top], row[top])
    return out


# ---------------------------------------------------------------------------
# standardization + linear probe
# ---------------------------------------------------------------------------

def standardize(bank: FeatureBank, eps: float = 1e-8) -> FeatureBank:
    """Per-dimension (x - mean) / max(std, eps); stats from this (train) bank."""
    if len(bank.features) < 2:
        raise ConfigError("standardization needs at least 2 rows")
    mean = bank.features.mean(axis=0)
    std = np.maximum(bank.features.std(axis=0), eps)
    return FeatureBank((bank.features - mean) / std, bank.labels, mean, std)


def apply_standardization(bank: FeatureBank, mean: np.ndarray, std: np.ndarray
                          ) -> FeatureBank:
    return FeatureBank((bank.features - mean) / std, bank.labels, mean, std)


def linear_probe(bank_train: FeatureBank, bank_val: FeatureBank, n_classes: int,
                 epochs: int = 20, lr: float = 0.005, batch_size: int = 256,
                 momentum: float = 0.9, seed: int = 0) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy on one linear layer over frozen features.

    Cosine learning-rate schedule, no weight decay.  Returns the best
    validation top-1 over the run and the predictions that achieved it.
    """
    present = np.unique(bank_train.labels)
    missing = set(range(n_classes)) - set(int(c) for c in present)
    if missing:
        raise ConfigError(f"classes missing from training labels: {sorted(missing)}")

    x_tr = bank_train.features.astype(np.float64)
    y_tr = bank_train.labels
    x_va = bank_val.features.astype(np.float64)
    n, d = x_tr.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.eye(n_classes)[y_tr]

    def predictions():
        return np.argmax(x_va @ w + b, axis=1)

    def accuracy(preds):
        return float(np.mean(preds == bank_val.labels))

    best_preds = predictions()
    best = accuracy(best_preds)  # epoch-0 head counts as a candidate
    rng = stream(seed, DOMAIN_EVAL, 0)
    batch_size = min(batch_size, n)
    steps_per_epoch = max(n // batch_size, 1)
    total = epochs * steps_per_epoch
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            step = epoch * steps_per_epoch + s
            step_lr = lr * (np.cos(np.pi * step / max(total, 1)) + 1.0) / 2.0
            idx = perm[s * batch_size:(s + 1) * batch_size]
            logits = x_tr[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            delta = (probs - onehot[idx]) / len(idx)
            gw = x_tr[idx].T @ delta
            gb = delta.sum(axis=0)
            vw = momentum * vw + gw
            vb = momentum * vb + gb
            w -= step_lr * vw
            b -= step_lr * vb
        preds = predictions()
        acc = accuracy(preds)
        if acc > best:
            best, best_preds = acc, preds
    return best, best_preds


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

def _per_class_accuracy(preds: np.ndarray, labels: np.ndarray, n_classes: int
                        ) -> dict[int, float]:
    out = {}
    for c in range(n_classes):
        mask = labels == c
        out[c] = float(np.mean(preds[mask] == c)) if mask.any() else 0.0
    return out


def evaluate(model: SiameseModel, dataset: Dataset, protocol: str = "both",
             knn_k: int = 20, probe_epochs: int = 20, probe_lr: float = 0.005,
             probe_batch: int = 256, eval_size: int = 32, seed: int = 0
             ) -> EvalReport:
    """Extract frozen features and run the requested protocols."""
    if protocol not in ("knn", "linear", "both"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    feats_train = extract_features(model, dataset.train_images, dataset.stats,
                                   eval_size)
    feats_val = extract_features(model, dataset.val_images, dataset.stats,
                                 eval_size)
    bank_train = FeatureBank(feats_train, dataset.train_labels)
    bank_val = FeatureBank(feats_val, dataset.val_labels)
    report = EvalReport(protocol=protocol, n_train=len(feats_train),
                        n_val=len(feats_val))

    if protocol in ("knn", "both"):
        preds = knn_predict_batch(bank_train, bank_val.features, knn_k)
        report.knn_top1 = float(np.mean(preds == bank_val.labels))
        report.knn_per_class = _per_class_accuracy(preds, bank_val.labels,
                                                   dataset.n_classes)
    if protocol in ("linear", "both"):
        tr = standardize(bank_train)
        va = apply_standardization(bank_val, tr.mean, tr.std)
        acc, preds = linear_probe(tr, va, dataset.n_classes, probe_epochs,
                                  probe_lr, probe_batch, seed=seed)
        report.linear_top1 = acc
        report.linear_per_class = _per_class_accuracy(preds, bank_val.labels,
                                                      dataset.n_classes)
    return report
