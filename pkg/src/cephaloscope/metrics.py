"""Error summaries per age group and gender-classification metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

BASE_GROUPS = ((4, 10), (11, 15), (16, 20), (21, 25), (26, 30), (31, 35), (36, 40))
AGGREGATE_GROUPS = ((4, 25), (26, 40))
GROUP_ORDER = [f"{a}-{b}" for a, b in BASE_GROUPS + AGGREGATE_GROUPS] + ["All"]


@dataclass(frozen=True)
class ErrorStats:
    e_med: float
    mean: float
    std: float
    ae_med: float
    iqr: float
    count: int


def quantile(sorted_values, q: float) -> float:
    """Linear-interpolation quantile (type 7) of pre-sorted data."""
    n = len(sorted_values)
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


def median(sorted_values) -> float:
    n = len(sorted_values)
    mid = n // 2
    if n % 2:
        return float(sorted_values[mid])
    return (sorted_values[mid - 1] + sorted_values[mid]) / 2.0


def error_stats(true_ages, pred_ages) -> ErrorStats:
    """E = true - pred; summaries of E and |E| (population std, type-7 IQR)."""
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    p = np.asarray(pred_ages, dtype=np.float64).ravel()
    if t.size != p.size:
        raise ValueError(f"length mismatch: {t.size} labels vs {p.size} predictions")
    if t.size == 0:
        raise ValueError("error_stats needs at least one sample")
    err = (t - p).tolist()
    ae = [abs(e) for e in err]
    n = len(ae)
    err_sorted = sorted(err)
    ae_sorted = sorted(ae)
    mu = math.fsum(ae) / n
    sigma = math.sqrt(math.fsum((a - mu) ** 2 for a in ae) / n)
    iqr = quantile(ae_sorted, 0.75) - quantile(ae_sorted, 0.25)
    return ErrorStats(
        e_med=float(median(err_sorted)),
        mean=mu,
        std=sigma,
        ae_med=float(median(ae_sorted)),
        iqr=float(iqr),
        count=n,
    )


def _group_of(age: float) -> str:
    a = math.floor(age)
    for lo, hi in BASE_GROUPS:
        if lo <= a <= hi:
            return f"{lo}-{hi}"
    raise ValueError(f"age {age} outside the 4-40 reporting range")


@dataclass
class GenderBlock:
    accuracy: float
    roc_auc: float | None
    count: int


@dataclass
class EvalReport:
    label: str
    rows: dict[str, ErrorStats | None]
    gender: GenderBlock | None = None

    def counts(self) -> dict[str, int]:
        return {k: (v.count if v is not None else 0) for k, v in self.rows.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": {k: (asdict(v) if v is not None else None) for k, v in self.rows.items()},
            "gender": asdict(self.gender) if self.gender is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        cols = GROUP_ORDER
        width = 13
        lines = [f"{self.label}"]
        lines.append("Metric".ljust(9) + "".join(c.rjust(width) for c in cols))

        def cell(k, fmt):
            v = self.rows.get(k)
            return (fmt(v) if v is not None else "-").rjust(width)

        lines.append("E.Med".ljust(9) + "".join(cell(k, lambda v: f"{v.e_med:.2f}") for k in cols))
        lines.append("mu+-sd".ljust(9) + "".join(cell(k, lambda v: f"{v.mean:.2f}+-{v.std:.2f}") for k in cols))
        lines.append("AE.Med".ljust(9) + "".join(cell(k, lambda v: f"{v.ae_med:.2f}") for k in cols))
        lines.append("IQR".ljust(9) + "".join(cell(k, lambda v: f"{v.iqr:.2f}") for k in cols))
        lines.append("N".ljust(9) + "".join(cell(k, lambda v: str(v.count)) for k in cols))
        if self.gender is not None:
            auc = "n/a" if self.gender.roc_auc is None else f"{self.gender.roc_auc:.4f}"
            lines.append(f"gender accuracy {self.gender.accuracy:.4f}  ROC-AUC {auc}")
        return "\n".join(lines)


def group_report(true_ages, pred_ages, label: str = "EFFI.", gender_probs=None, gender_labels=None) -> EvalReport:
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    p = np.asarray(pred_ages, dtype=np.float64).ravel()
    if t.size != p.size:
        raise ValueError("length mismatch between labels and predictions")
    groups = np.array([_group_of(a) for a in t]) if t.size else np.array([], dtype=str)
    rows: dict[str, ErrorStats | None] = {}
    for lo, hi in BASE_GROUPS:
        key = f"{lo}-{hi}"
        m = groups == key
        rows[key] = error_stats(t[m], p[m]) if m.any() else None
    for lo, hi in AGGREGATE_GROUPS:
        m = (np.floor(t) >= lo) & (np.floor(t) <= hi)
        rows[f"{lo}-{hi}"] = error_stats(t[m], p[m]) if m.any() else None
    rows["All"] = error_stats(t, p) if t.size else None
    gender = None
    if gender_probs is not None:
        probs = np.asarray(gender_probs, dtype=np.float64)
        labels = np.asarray(gender_labels, dtype=int)
        both = len(set(labels.tolist())) == 2
        gender = GenderBlock(
            accuracy=accuracy(probs, labels),
            roc_auc=roc_auc(probs, labels) if both else None,
            count=int(labels.size),
        )
    return EvalReport(label=label, rows=rows, gender=gender)


def accuracy(probabilities, labels, threshold: float = 0.5) -> float:
    """Share of samples whose thresholded class (p < threshold -> 0, else 1) equals the label."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if p.size != y.size or p.size == 0:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    pred = np.where(p < threshold, 0, 1)
    return float(np.mean(pred == y))


def _check_binary(p, y):
    if p.size != y.size:
        raise ValueError("length mismatch between scores and labels")
    classes = set(y.tolist())
    if not classes <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if classes != {0, 1}:
        raise ValueError("ROC-AUC is undefined unless both classes are present")


def roc_auc(probabilities, labels) -> float:
    """Mann-Whitney AUC via tie-averaged ranks: P(pos > neg) + P(tie) / 2."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=int).ravel()
    _check_binary(p, y)
    order = np.argsort(p, kind="mergesort")
    sp = p[order]
    ranks = np.empty(p.size, dtype=np.float64)
    i = 0
    n = p.size
    while i < n:
        j = i
        while j + 1 < n and sp[j + 1] == sp[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    n_pos = int(y.sum())
    n_neg = n - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(probabilities, labels) -> list[tuple[float, float]]:
    """(1 - specificity, sensitivity) points, one per distinct threshold, from (0,0) to (1,1)."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=int).ravel()
    _check_binary(p, y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    points = [(0.0, 0.0)]
    tp = fp = 0
    for thr in sorted(set(p.tolist()), reverse=True):
        hit = p == thr
        tp += int(y[hit].sum())
        fp += int(hit.sum() - y[hit].sum())
        points.append((fp / n_neg, tp / n_pos))
    return points


def curve_area(points) -> float:
    """Trapezoidal area under a (x, y) polyline."""
    return math.fsum((x1 - x0) * (y0 + y1) / 2.0 for (x0, y0), (x1, y1) in zip(points, points[1:]))
