"""Metrics and run aggregation: per-class F1, weighted cluster entropy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    per_class_f1: list[float]
    mean_f1: float | None
    weighted_entropy: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class_f1": self.per_class_f1,
                "mean_f1": self.mean_f1,
                "weighted_entropy": self.weighted_entropy,
                "metadata": self.metadata,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        return cls(
            per_class_f1=payload["per_class_f1"],
            mean_f1=payload["mean_f1"],
            weighted_entropy=payload.get("weighted_entropy"),
            metadata=payload.get("metadata", {}),
        )


def f1_scores(pred_masks, true_masks, num_classes: int):
    """Per-class and macro F1 over pixels pooled across all patches.

    A class absent from both prediction and truth scores 1 by convention, so
    tiny evaluation sets keep well-defined averages.
    """
    pred = np.asarray(pred_masks).ravel()
    true = np.asarray(true_masks).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: pred {np.asarray(pred_masks).shape} vs true {np.asarray(true_masks).shape}")
    per_class = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        if tp + fp + fn == 0:
            per_class.append(1.0)
        else:
            per_class.append(2.0 * tp / (2.0 * tp + fp + fn))
    return per_class, float(np.mean(per_class))


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def weighted_cluster_entropy(assignments, agg_labels, k: int, num_classes: int) -> float:
    """Cluster-size-weighted Shannon entropy (natural log) of the aggregated
    labels inside each cluster; 0 iff every nonempty cluster is label-pure."""
    assignments = np.asarray(assignments)
    agg_labels = np.asarray(agg_labels)
    if assignments.shape != agg_labels.shape:
        raise ValueError("assignments and agg_labels must align")
    n = len(assignments)
    if n == 0:
        return 0.0
    value = 0.0
    for j in range(k):
        members = agg_labels[assignments == j]
        if len(members) == 0:
            continue
        counts = np.bincount(members, minlength=num_classes)
        value += (len(members) / n) * _entropy(counts)
    return value


def compare_runs(reports: list[MetricsReport]):
    """Mean and sample std of mean_f1 per (method, n_labeled[, budget, arm]) group.

    All reports must come from the same configuration (matching config
    digests); only the seed may differ within a group.
    """
    if not reports:
        return []
    digests = {r.metadata.get("config_digest") for r in reports}
    if len(digests) > 1:
        raise ValueError(f"inconsistent configurations: digests {sorted(str(d) for d in digests)}")

    groups: dict[tuple, list[MetricsReport]] = {}
    for r in reports:
        key = (
            r.metadata.get("method", ""),
            r.metadata.get("n_labeled"),
            r.metadata.get("budget"),
            r.metadata.get("arm"),
        )
        groups.setdefault(key, []).append(r)

    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        values = [r.mean_f1 for r in members if r.mean_f1 is not None]
        entropies = [r.weighted_entropy for r in members if r.weighted_entropy is not None]
        mean = float(np.mean(values)) if values else math.nan
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        row = {
            "method": key[0],
            "n_labeled": key[1],
            "budget": key[2],
            "arm": key[3],
            "runs": len(members),
            "mean_f1": mean,
            "std_f1": std,
            "mean_weighted_entropy": float(np.mean(entropies)) if entropies else None,
        }
        rows.append(row)
    return rows
