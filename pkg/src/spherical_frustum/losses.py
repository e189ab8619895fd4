"""Training objective, evaluated forward only: weighted cross-entropy plus
Lovasz-Softmax, summed over the four decoded extraction layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadLabel, ShapeMismatch


@dataclass(frozen=True)
class LossConfig:
    frequencies: tuple
    epsilon: float = 1e-3
    classes_present_only: bool = True

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-6:
            raise ValueError("class frequencies must be non-negative and sum to 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / (np.asarray(self.frequencies, dtype=np.float64) + self.epsilon)

    @classmethod
    def uniform(cls, n, **kw):
        return cls(tuple([1.0 / n] * n), **kw)


def read_class_frequencies(path, epsilon=1e-3) -> LossConfig:
    """Read ``class_id frequency`` lines; missing ids get frequency 0."""
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                cid, freq = line.split()
                pairs[int(cid)] = float(freq)
    n = max(pairs) + 1 if pairs else 0
    return LossConfig(tuple(pairs.get(c, 0.0) for c in range(n)), epsilon)


def _check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((labels < 0) | (labels >= n))
    if bad.size:
        raise BadLabel(f"label {labels[bad[0]]} at point {bad[0]} outside [0, {n})")
    return labels


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def weighted_cross_entropy(logits, labels, cfg: LossConfig) -> float:
    """Weighted average of per-point negative log-likelihoods."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[1]
    labels = _check_labels(labels, n)
    if labels.shape[0] != logits.shape[0] or labels.shape[0] == 0:
        raise ShapeMismatch("need one label per logit row and at least one point")
    w = cfg.weights
    if w.shape[0] < n:
        raise ShapeMismatch(f"{w.shape[0]} class weights for {n} classes")
    nll = -log_softmax(logits)[np.arange(labels.shape[0]), labels]
    wk = w[labels]
    # offset form: equal per-point losses come back bit-exact
    base = nll.min()
    return float(base + np.sum(wk * (nll - base)) / np.sum(wk))


def lovasz_grad(gt_sorted):
    """Gradient of the Jaccard extension along errors sorted descending."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, classes_present_only=True) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[1]
    labels = _check_labels(labels, n)
    if labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch("need one label per probability row")
    if labels.shape[0] == 0:
        return 0.0
    losses = []
    for c in range(n):
        fg = (labels == c).astype(np.float64)
        if classes_present_only and fg.sum() == 0:
            continue
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(np.dot(errors[order], lovasz_grad(fg[order]))))
    return float(np.mean(losses)) if losses else 0.0


def multi_layer_loss(layer_logits, labels, cfg: LossConfig) -> float:
    if len(layer_logits) != 4:
        raise ShapeMismatch(f"expected 4 layers of logits, got {len(layer_logits)}")
    labels = np.asarray(labels)
    total = 0.0
    for logits in layer_logits:
        if np.shape(logits)[0] != labels.shape[0]:
            raise ShapeMismatch("every layer needs one logit row per point")
        total += weighted_cross_entropy(logits, labels, cfg)
        total += lovasz_softmax(softmax(logits), labels, cfg.classes_present_only)
    return total
