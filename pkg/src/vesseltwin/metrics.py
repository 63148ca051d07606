"""OOD metrics, rank statistics, effect sizes and grouped reports."""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

A12_CUTOFFS = (0.147, 0.33, 0.474)
A12_LABELS = ("Negligible", "Small", "Medium", "Large")
TARGET_TPR = 0.95


class MetricError(ValueError):
    pass


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("both classes must be present")
    return pos, neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks; label 1 (OOD) is positive."""
    pos, neg = _split(scores, labels)
    ranks = rankdata(np.concatenate([pos, neg]))
    n1, n0 = len(pos), len(neg)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def tnr_at_tpr95(scores, labels) -> float:
    """TNR at the threshold whose TPR is closest to 0.95.

    Candidates are the distinct scores with the rule ``score >= alpha``
    flagging OOD. Ties in ``|TPR - 0.95|`` go to the larger TNR.
    """
    pos, neg = _split(scores, labels)
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    # counts strictly below each threshold
    tpr = 1.0 - np.searchsorted(pos_sorted, thresholds, side="left") / len(pos)
    tnr = np.searchsorted(neg_sorted, thresholds, side="left") / len(neg)
    gap = np.abs(tpr - TARGET_TPR)
    best = gap.min()
    # float noise in the gap must not split genuine ties
    candidates = np.flatnonzero(gap <= best + 1e-15)
    return float(tnr[candidates].max())


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y):
        raise MetricError("spearman needs equal-length inputs")
    if len(x) < 3:
        raise MetricError("spearman needs at least 3 observations")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if den == 0:
        raise MetricError("spearman is undefined for constant input")
    return float(np.clip(np.dot(rx, ry) / den, -1.0, 1.0))


@dataclass(frozen=True)
class EffectSizeResult:
    a12: float
    a12_scaled: float
    magnitude: str
    cohens_h: float | None = None
    spearman: float | None = None


def a12_magnitude(a12_scaled: float) -> str:
    return A12_LABELS[bisect.bisect_right(A12_CUTOFFS, abs(a12_scaled))]


def vargha_delaney(a, b) -> EffectSizeResult:
    """P(A > B) + 0.5 P(A = B) via midranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise MetricError("vargha_delaney needs two non-empty samples")
    ranks = rankdata(np.concatenate([a, b]))
    m, n = len(a), len(b)
    a12 = float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))
    scaled = (a12 - 0.5) * 2.0
    return EffectSizeResult(a12=a12, a12_scaled=scaled, magnitude=a12_magnitude(scaled))


def cohens_h(p1: float, p2: float) -> float:
    for p in (p1, p2):
        if not (0.0 <= p <= 1.0):
            raise MetricError(f"proportion {p} outside [0, 1]")
    return 2.0 * math.asin(math.sqrt(p1)) - 2.0 * math.asin(math.sqrt(p2))


# -- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    group: dict
    method: str
    auroc: float
    tnr_at_tpr95: float
    n_ind: int
    n_ood: int
    accuracy: float
    score_mean: float
    score_std: float
    path_aurocs: list[float]


def _group_key(group: Mapping) -> str:
    return "|".join(f"{k}={group[k]}" for k in sorted(group))


def build_report(records: Sequence[Mapping], group_fields: Sequence[str] = ("magnitude",),
                 magnitude_field: str = "magnitude") -> dict:
    """Aggregate per-anchor records into grouped metrics.

    Each record needs ``method``, ``path``, ``score``, ``label`` and
    ``decision`` plus the ``group_fields``. Returns a JSON-ready dict.
    """
    warnings: list[str] = []
    buckets: dict[tuple[str, str], list[Mapping]] = {}
    groups: dict[str, dict] = {}
    for rec in records:
        group = {f: rec[f] for f in group_fields}
        key = _group_key(group)
        groups[key] = group
        buckets.setdefault((key, rec["method"]), []).append(rec)

    methods = sorted({m for _, m in buckets})
    reports: list[MetricReport] = []
    for (key, method) in sorted(buckets):
        rows = buckets[(key, method)]
        scores = np.array([r["score"] for r in rows], dtype=float)
        labels = np.array([r["label"] for r in rows], dtype=int)
        decisions = np.array([r["decision"] for r in rows], dtype=int)
        if labels.min() == labels.max():
            warnings.append(f"group {key} method {method}: single class, skipped")
            continue
        path_aurocs = []
        for path in sorted({r["path"] for r in rows}):
            sel = np.array([r["path"] == path for r in rows])
            if labels[sel].min() != labels[sel].max():
                path_aurocs.append(auroc(scores[sel], labels[sel]))
        reports.append(MetricReport(
            group=groups[key], method=method, auroc=auroc(scores, labels),
            tnr_at_tpr95=tnr_at_tpr95(scores, labels),
            n_ind=int((labels == 0).sum()), n_ood=int((labels == 1).sum()),
            accuracy=float(np.mean(decisions == labels)),
            score_mean=float(scores.mean()), score_std=float(scores.std()),
            path_aurocs=path_aurocs))

    by_key = {(_group_key(r.group), r.method): r for r in reports}

    comparisons = []
    for key in sorted(groups):
        for m1, m2 in combinations(methods, 2):
            r1, r2 = by_key.get((key, m1)), by_key.get((key, m2))
            if r1 is None or r2 is None or not r1.path_aurocs or not r2.path_aurocs:
                continue
            eff = vargha_delaney(r1.path_aurocs, r2.path_aurocs)
            comparisons.append({"group": groups[key], "method_a": m1, "method_b": m2,
                                "a12": eff.a12, "a12_scaled": eff.a12_scaled,
                                "magnitude": eff.magnitude,
                                "cohens_h": cohens_h(r1.accuracy, r2.accuracy)})

    correlations = {}
    if magnitude_field in group_fields:
        for method in methods:
            xs, ys = [], []
            for r in reports:
                if r.method == method:
                    xs += [float(r.group[magnitude_field])] * len(r.path_aurocs)
                    ys += r.path_aurocs
            try:
                correlations[method] = spearman(xs, ys)
            except MetricError as exc:
                warnings.append(f"spearman for {method}: {exc}")
                correlations[method] = None

    for w in warnings:
        log.warning(w)
    return {"groups": [asdict(r) for r in reports], "comparisons": comparisons,
            "spearman": correlations, "warnings": warnings}


def report_csv(report: dict) -> str:
    """Flat CSV, one row per group and method."""
    buf = io.StringIO()
    group_fields = sorted({k for g in report["groups"] for k in g["group"]})
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(group_fields + ["method", "auroc", "tnr_at_tpr95", "n_ind", "n_ood",
                               "accuracy", "score_mean", "score_std", "n_paths"])
    for g in report["groups"]:
        w.writerow([g["group"].get(f, "") for f in group_fields] + [
            g["method"], repr(g["auroc"]), repr(g["tnr_at_tpr95"]), g["n_ind"], g["n_ood"],
            repr(g["accuracy"]), repr(g["score_mean"]), repr(g["score_std"]),
            len(g["path_aurocs"])])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
