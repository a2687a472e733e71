"""Confusion matrix, WAR/UAR, agreement tables and triage-vs-truth scores."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .synthdata import Kind
from .triage import AgreementRecord, Category, TriageAssignment


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence[int], labels: Sequence[int], K: int) -> ConfusionMatrix:
    preds, labels = np.asarray(preds, dtype=int), np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def war(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("WAR of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def per_class_recall(cm: ConfusionMatrix) -> list[float | None]:
    rows = cm.counts.sum(axis=1)
    return [float(cm.counts[k, k] / rows[k]) if rows[k] else None for k in range(cm.classes)]


def uar_with_exclusions(cm: ConfusionMatrix) -> tuple[float, list[int]]:
    """UAR over classes that have true samples, plus the excluded class ids."""
    if cm.total == 0:
        raise ValueError("UAR of an empty confusion matrix")
    recalls = per_class_recall(cm)
    present = [r for r in recalls if r is not None]
    return float(sum(present) / len(present)), [k for k, r in enumerate(recalls) if r is None]


def uar(cm: ConfusionMatrix) -> float:
    return uar_with_exclusions(cm)[0]


# --------------------------------------------------------------------------
# agreement tables

@dataclass
class AgreementTables:
    levels: list[float]
    classes: int
    distribution: list[list[float | None]]  # [level][class] share of class at level
    distribution_sum: list[float]  # share of all samples at level
    accuracy: list[list[float | None]]  # [level][class]
    accuracy_avg: list[float | None]
    class_counts: list[int]


def agreement_tables(records: Sequence[AgreementRecord], labels: Sequence[int],
                     preds: Sequence[int], m: int, K: int) -> AgreementTables:
    """Share and accuracy of samples per (agreement level, class)."""
    if not (len(records) == len(labels) == len(preds)):
        raise ValueError(f"misaligned inputs: {len(records)} records, {len(labels)} labels, "
                         f"{len(preds)} predictions")
    levels = [j / m for j in range(1, m + 1)]
    level_of = np.array([round(r.agreement * m) - 1 for r in records], dtype=int)
    labels, preds = np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)
    correct = labels == preds
    counts = [int((labels == k).sum()) for k in range(K)]
    n = len(records)
    dist, dist_sum, acc, acc_avg = [], [], [], []
    for j in range(m):
        at = level_of == j
        dist.append([float((at & (labels == k)).sum() / counts[k]) if counts[k] else None
                     for k in range(K)])
        dist_sum.append(float(at.sum() / n) if n else 0.0)
        row = []
        for k in range(K):
            sel = at & (labels == k)
            row.append(float(correct[sel].mean()) if sel.any() else None)
        acc.append(row)
        acc_avg.append(float(correct[at].mean()) if at.any() else None)
    return AgreementTables(levels, K, dist, dist_sum, acc, acc_avg, counts)


# --------------------------------------------------------------------------
# triage quality against injected ground truth

_TARGET = {Category.NOISY: Kind.INJECTED_NOISY, Category.HARD: Kind.INJECTED_HARD}


def triage_quality(assignments: Sequence[TriageAssignment],
                   kinds: Mapping[int, Kind] | None) -> dict[str, dict]:
    """Precision/recall of detected Noisy and Hard sets vs injected kinds."""
    if not kinds:
        raise ValueError("triage quality needs ground-truth kinds (synthetic data only)")
    out = {}
    for cat, kind in _TARGET.items():
        detected = {a.sample_id for a in assignments if a.category == cat}
        injected = {i for i, k in kinds.items() if Kind(k) == kind}
        hit = len(detected & injected)
        flags = []
        if not detected:
            flags.append("no_detections")
        if not injected:
            flags.append("none_injected")
        out[cat.value] = {
            "precision": hit / len(detected) if detected else 0.0,
            "recall": hit / len(injected) if injected else 0.0,
            "detected": len(detected),
            "injected": len(injected),
            "hits": hit,
            "flags": flags,
        }
    return out


# --------------------------------------------------------------------------
# report

@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    war: float
    uar: float
    per_class_recall: list[float | None]
    uar_excluded: list[int] = field(default_factory=list)
    agreement: AgreementTables | None = None
    triage_quality: dict | None = None
    n_samples: int = 0

    def to_dict(self) -> dict:
        d = {
            "n_samples": self.n_samples,
            "war": self.war,
            "uar": self.uar,
            "uar_excluded_classes": self.uar_excluded,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.counts.tolist(),
        }
        if self.agreement is not None:
            a = self.agreement
            d["agreement"] = {
                "levels": a.levels, "class_counts": a.class_counts,
                "distribution": a.distribution, "distribution_sum": a.distribution_sum,
                "accuracy": a.accuracy, "accuracy_avg": a.accuracy_avg,
            }
        if self.triage_quality is not None:
            d["triage_quality"] = self.triage_quality
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        cm = ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64))
        agr = None
        if "agreement" in d:
            a = d["agreement"]
            agr = AgreementTables(a["levels"], cm.classes, a["distribution"], a["distribution_sum"],
                                  a["accuracy"], a["accuracy_avg"], a["class_counts"])
        return cls(cm, d["war"], d["uar"], d["per_class_recall"], d["uar_excluded_classes"], agr,
                   d.get("triage_quality"), d.get("n_samples", cm.total))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_tables_csv(fh, self)


def build_report(preds: Sequence[int], labels: Sequence[int], K: int,
                 records: Sequence[AgreementRecord] | None = None, m: int | None = None,
                 quality: dict | None = None) -> MetricsReport:
    cm = confusion(preds, labels, K)
    u, excluded = uar_with_exclusions(cm)
    tables = agreement_tables(records, labels, preds, m, K) if records is not None else None
    return MetricsReport(cm, war(cm), u, per_class_recall(cm), excluded, tables, quality, cm.total)


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def write_tables_csv(fh, report: MetricsReport) -> None:
    """Sectioned CSV: summary, confusion, and the two agreement tables."""
    w = csv.writer(fh, lineterminator="\n")
    k = report.confusion.classes
    cls = [f"c{j}" for j in range(k)]
    w.writerow(["section", "metric", "value"])
    w.writerow(["summary", "WAR", _fmt(report.war)])
    w.writerow(["summary", "UAR", _fmt(report.uar)])
    w.writerow([])
    w.writerow(["confusion", "true\\pred"] + cls)
    for j in range(k):
        w.writerow(["confusion", cls[j]] + [int(v) for v in report.confusion.counts[j]])
    w.writerow(["recall", ""] + [_fmt(v) for v in report.per_class_recall])
    a = report.agreement
    if a is not None:
        w.writerow([])
        w.writerow(["agreement_distribution", "Agr."] + cls + ["Sum"])
        for lvl, row, tot in zip(a.levels, a.distribution, a.distribution_sum):
            w.writerow(["agreement_distribution", f"{lvl:.2f}"] + [_fmt(v) for v in row] + [_fmt(tot)])
        w.writerow(["agreement_distribution", "Num."] + a.class_counts + [sum(a.class_counts)])
        w.writerow([])
        w.writerow(["agreement_accuracy", "Agr."] + cls + ["Ave."])
        for lvl, row, avg in zip(a.levels, a.accuracy, a.accuracy_avg):
            w.writerow(["agreement_accuracy", f"{lvl:.2f}"] + [_fmt(v) for v in row] + [_fmt(avg)])
    if report.triage_quality:
        w.writerow([])
        w.writerow(["triage_quality", "category", "precision", "recall", "detected", "injected"])
        for cat, q in report.triage_quality.items():
            w.writerow(["triage_quality", cat, _fmt(q["precision"]), _fmt(q["recall"]),
                        q["detected"], q["injected"]])
