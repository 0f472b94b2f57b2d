"""Segmentation quality metrics: AUC, ARI, MI, Hausdorff family, Mahalanobis.

Distance metrics operate on full foreground voxel sets (not surfaces) and
default to voxel units; pass ``spacing`` for physical units.  The distance-
transform fast paths are checked against O(n^2) brute force in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


class MetricUndefinedError(ValueError):
    """The metric is undefined for these inputs (empty mask, singular covariance)."""


def _as_mask(a, name) -> np.ndarray:
    a = np.asarray(a)
    m = a > 0
    return m


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _directed_nearest(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance from every foreground voxel of `a` to the set `b` (exact EDT)."""
    dist_to_b = ndimage.distance_transform_edt(~b, sampling=spacing)
    return dist_to_b[a]


def average_hausdorff(
    a, b, spacing=None, directed_mean: bool = False
) -> float:
    """Average Hausdorff distance between two foreground voxel sets.

    max (default) or mean (``directed_mean=True``) of the two directed
    average nearest-point distances.
    """
    a, b = _as_mask(a, "a"), _as_mask(b, "b")
    _check_same_shape(a, b)
    if not a.any() or not b.any():
        raise MetricUndefinedError("average Hausdorff undefined for an empty mask")
    d_ab = float(_directed_nearest(a, b, spacing).mean())
    d_ba = float(_directed_nearest(b, a, spacing).mean())
    return (d_ab + d_ba) / 2.0 if directed_mean else max(d_ab, d_ba)


def hausdorff_quantile(a, b, q: float = 0.95, spacing=None) -> float:
    """q-quantile of the pooled directed nearest distances; q=1 is classic HD."""
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    a, b = _as_mask(a, "a"), _as_mask(b, "b")
    _check_same_shape(a, b)
    if not a.any() or not b.any():
        raise MetricUndefinedError("Hausdorff distance undefined for an empty mask")
    pooled = np.concatenate(
        [_directed_nearest(a, b, spacing), _directed_nearest(b, a, spacing)]
    )
    if q == 1.0:
        return float(pooled.max())
    return float(np.quantile(pooled, q))


def _pair_counts(n):
    return n * (n - 1) / 2.0


def adjusted_rand(a, b) -> float:
    """Adjusted Rand index of the two 2-class voxel partitions."""
    a, b = _as_mask(a, "a"), _as_mask(b, "b")
    _check_same_shape(a, b)
    n = a.size
    cont = np.array(
        [
            [np.sum(~a & ~b), np.sum(~a & b)],
            [np.sum(a & ~b), np.sum(a & b)],
        ],
        dtype=np.float64,
    )
    sum_ij = _pair_counts(cont).sum()
    sum_a = _pair_counts(cont.sum(axis=1)).sum()
    sum_b = _pair_counts(cont.sum(axis=0)).sum()
    total = _pair_counts(np.float64(n))
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0  # identical trivial partitions
    return float((sum_ij - expected) / (max_index - expected))


def mutual_information(a, b) -> float:
    """Shannon mutual information of the joint 2x2 label histogram, in bits."""
    a, b = _as_mask(a, "a"), _as_mask(b, "b")
    _check_same_shape(a, b)
    n = a.size
    joint = np.array(
        [
            [np.sum(~a & ~b), np.sum(~a & b)],
            [np.sum(a & ~b), np.sum(a & b)],
        ],
        dtype=np.float64,
    ) / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for i in (0, 1):
        for j in (0, 1):
            if joint[i, j] > 0:
                mi += joint[i, j] * np.log2(joint[i, j] / (pa[i] * pb[j]))
    return float(mi)


def auc(prob, truth) -> float:
    """Area under the ROC curve via the rank statistic; ties count half."""
    prob = np.asarray(prob, dtype=np.float64).ravel()
    t = _as_mask(truth, "truth").ravel()
    if prob.shape != t.shape:
        raise ValueError("probability map and truth mask must be aligned")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC undefined when truth has a single class")
    ranks = rankdata(prob)
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mahalanobis(a, b, spacing=None) -> float:
    """Mahalanobis distance between mask centroids under the pooled covariance.

    S = (n1*S1 + n2*S2) / (n1 + n2) with population per-mask covariances.
    """
    a, b = _as_mask(a, "a"), _as_mask(b, "b")
    _check_same_shape(a, b)
    pts = []
    for m, name in ((a, "first"), (b, "second")):
        c = np.argwhere(m).astype(np.float64)
        if len(c) < 2:
            raise MetricUndefinedError(f"{name} mask needs >= 2 voxels")
        if spacing is not None:
            c *= np.asarray(spacing, dtype=np.float64)
        pts.append(c)
    ca, cb = pts
    mu = ca.mean(axis=0) - cb.mean(axis=0)
    sa = np.cov(ca, rowvar=False, bias=True)
    sb = np.cov(cb, rowvar=False, bias=True)
    s = (len(ca) * sa + len(cb) * sb) / (len(ca) + len(cb))
    try:
        sol = np.linalg.solve(s, mu)
    except np.linalg.LinAlgError as e:
        raise MetricUndefinedError(f"singular pooled covariance: {e}") from e
    d2 = float(mu @ sol)
    if not np.isfinite(d2):
        raise MetricUndefinedError("singular pooled covariance")
    return float(np.sqrt(max(d2, 0.0)))


METRIC_NAMES = ("AUC", "ADJRIND", "MUTINF", "HDRFDST", "AVGDIST", "MAHLNBS")


@dataclass
class MetricsReport:
    """Per-stack metric values plus mean/SD summary (sample SD, ddof=1)."""

    stack_ids: list = field(default_factory=list)
    values: dict = field(default_factory=lambda: {m: [] for m in METRIC_NAMES})

    def add(self, stack_id, **metrics):
        self.stack_ids.append(stack_id)
        for m in METRIC_NAMES:
            self.values[m].append(float(metrics[m.lower()]))

    def mean(self, name) -> float:
        return float(np.mean(self.values[name]))

    def sd(self, name) -> float:
        v = self.values[name]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def rows(self):
        for i, sid in enumerate(self.stack_ids):
            yield sid, {m: self.values[m][i] for m in METRIC_NAMES}


def evaluate_stack(prob, mask, truth, spacing=None, strict: bool = True) -> dict:
    """The full six-metric battery for one stack.

    With ``strict=False`` metrics that are undefined for the given masks
    (e.g. distances against an empty prediction) come back as NaN instead
    of raising, so batch reports can proceed.
    """
    parts = {
        "auc": lambda: auc(prob, truth),
        "adjrind": lambda: adjusted_rand(mask, truth),
        "mutinf": lambda: mutual_information(mask, truth),
        "hdrfdst": lambda: hausdorff_quantile(mask, truth, 0.95, spacing),
        "avgdist": lambda: average_hausdorff(mask, truth, spacing),
        "mahlnbs": lambda: mahalanobis(mask, truth, spacing),
    }
    out = {}
    for name, fn in parts.items():
        try:
            out[name] = fn()
        except MetricUndefinedError:
            if strict:
                raise
            out[name] = float("nan")
    return out
