"""mIoU evaluation and the one-point-per-cell projection baseline.

The baseline keeps only the closest point of every occupied cell, as a
conventional range image does, and labels the dropped points afterwards by
a K-nearest-neighbour vote among kept points in a window of cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, SphericalConfig, project_cloud


@dataclass
class ConfusionMatrix:
    """``counts[a, b]``: evaluated points with ground truth ``a`` predicted ``b``."""

    counts: np.ndarray
    ignore: tuple = (0,)

    @classmethod
    def empty(cls, n, ignore=(0,)):
        return cls(np.zeros((n, n), dtype=np.int64), tuple(ignore))

    @classmethod
    def from_labels(cls, labels, preds, n, ignore=(0,)):
        cm = cls.empty(n, ignore)
        cm.add(labels, preds)
        return cm

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def add(self, labels, preds):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        preds = np.asarray(preds, dtype=np.int64).reshape(-1)
        if labels.shape != preds.shape:
            raise ValueError("labels and predictions differ in length")
        if np.any((labels < 0) | (labels >= self.n) | (preds < 0) | (preds >= self.n)):
            raise ValueError(f"class ids must lie in [0, {self.n})")
        keep = ~np.isin(labels, self.ignore)
        flat = labels[keep] * self.n + preds[keep]
        self.counts += np.bincount(flat, minlength=self.n * self.n).reshape(self.n, self.n)
        return self


def miou(cm: ConfusionMatrix):
    """Per-class IoU (None where undefined or ignored) and their mean.

    Classes whose union is empty are left out of the mean.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    per_class = []
    for k in range(cm.n):
        if k in cm.ignore or union[k] == 0:
            per_class.append(None)
        else:
            per_class.append(float(tp[k] / union[k]))
    valid = [x for x in per_class if x is not None]
    mean = float(np.mean(valid)) if valid else float("nan")
    return per_class, mean


def conventional_projection_uv(u, v, r, W):
    """Keep the closest point per cell; ties go to the smaller scan index."""
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    n = u.shape[0]
    cells = v * W + u
    order = np.lexsort((np.arange(n), r, cells))
    first = np.r_[True, cells[order][1:] != cells[order][:-1]] if n else np.zeros(0, bool)
    kept = np.sort(order[first])
    mask = np.ones(n, dtype=bool)
    mask[kept] = False
    return kept, np.flatnonzero(mask)


def conventional_projection(cloud: PointCloud, config: SphericalConfig):
    u, v, r = project_cloud(cloud, config)
    return conventional_projection_uv(u, v, r, config.W)


def knn_restore(kept_ids, kept_pred, dropped_ids, u, v, r, K=5, window=5, H=None, W=None,
                wrap_azimuth=True):
    """Labels for every point: kept points keep theirs, dropped points take
    the majority label of their ``K`` kept neighbours closest in range within
    a ``window x window`` block of cells. A tied vote goes to the label whose
    closest voter is nearest.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    kept_ids = np.asarray(kept_ids, dtype=np.int64)
    kept_pred = np.asarray(kept_pred, dtype=np.int64)
    dropped_ids = np.asarray(dropped_ids, dtype=np.int64)
    if kept_pred.shape != kept_ids.shape:
        raise ValueError("need one prediction per kept point")
    H = int(v.max()) + 1 if H is None else H
    W = int(u.max()) + 1 if W is None else W
    out = np.full(u.shape[0], -1, dtype=np.int64)
    out[kept_ids] = kept_pred
    if dropped_ids.size == 0:
        return out

    kept_cells = v[kept_ids] * W + u[kept_ids]
    cell_order = np.argsort(kept_cells)
    sorted_cells = kept_cells[cell_order]

    h = window // 2
    dv, du = np.divmod(np.arange(window * window), window)
    dv, du = dv - h, du - h
    qu = u[dropped_ids][:, None] + du[None, :]
    qv = v[dropped_ids][:, None] + dv[None, :]
    if wrap_azimuth:
        qu = np.mod(qu, W)
    valid = (qv >= 0) & (qv < H) & (qu >= 0) & (qu < W)
    keys = np.where(valid, qv * W + qu, -1)
    pos = np.clip(np.searchsorted(sorted_cells, keys), 0, max(len(sorted_cells) - 1, 0))
    hit = valid & (sorted_cells[pos] == keys) if len(sorted_cells) else np.zeros_like(valid)
    d_idx, o_idx = np.nonzero(hit)
    cand = kept_ids[cell_order[pos[d_idx, o_idx]]]
    # a wrapped window narrower than W can revisit a cell; count it once
    pair = np.unique(d_idx * (u.shape[0] + 1) + cand)
    d_idx, cand = pair // (u.shape[0] + 1), pair % (u.shape[0] + 1)
    dist = np.abs(r[cand] - r[dropped_ids[d_idx]])

    order = np.lexsort((cand, dist, d_idx))
    d_idx, cand = d_idx[order], cand[order]
    starts = np.flatnonzero(np.r_[True, d_idx[1:] != d_idx[:-1]]) if d_idx.size else d_idx
    rank = np.arange(d_idx.shape[0]) - np.repeat(starts, np.diff(np.r_[starts, d_idx.shape[0]]))
    voters = rank < K
    d_idx, rank, lab = d_idx[voters], rank[voters], out[cand[voters]]

    restored = np.full(dropped_ids.shape[0], -1, dtype=np.int64)
    if d_idx.size:
        n_lab = int(lab.max()) + 1
        key = d_idx * n_lab + lab
        groups, inverse, votes = np.unique(key, return_inverse=True, return_counts=True)
        best_rank = np.full(groups.shape[0], np.iinfo(np.int64).max)
        np.minimum.at(best_rank, inverse, rank)
        g_d, g_lab = groups // n_lab, groups % n_lab
        pick = np.lexsort((best_rank, -votes, g_d))
        g_first = np.r_[True, g_d[pick][1:] != g_d[pick][:-1]]
        restored[g_d[pick][g_first]] = g_lab[pick][g_first]

    # no voter in the window: fall back to the kept point of the own cell
    missing = np.flatnonzero(restored < 0)
    for i in missing:
        d = dropped_ids[i]
        own = np.flatnonzero(kept_cells == v[d] * W + u[d])
        if own.size == 0:
            raise ValueError(f"dropped point {d} has no kept point to inherit from")
        restored[i] = kept_pred[own[0]]
    out[dropped_ids] = restored
    return out


def drop_stats(cloud: PointCloud, config: SphericalConfig, labels=None) -> dict:
    """Points surviving a one-point-per-cell projection, overall and by class."""
    n = len(cloud)
    if n == 0:
        return {"N": 0, "preserved": 0, "fraction": 1.0}
    kept, dropped = conventional_projection(cloud, config)
    stats = {"N": n, "preserved": int(kept.shape[0]), "fraction": kept.shape[0] / n}
    labels = cloud.labels if labels is None else np.asarray(labels)
    if labels is not None:
        totals = np.bincount(labels)
        lost = np.bincount(labels[dropped], minlength=totals.shape[0])
        stats["per_class_drop"] = {
            str(c): float(lost[c] / totals[c]) for c in range(totals.shape[0]) if totals[c]
        }
    return stats
