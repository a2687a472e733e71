"""Clip-agreement triage of training samples into hard, noisy and ordinary.

A sample whose clips the recogniser labels inconsistently is *hard*; one whose
clips agree unanimously yet still costs a large loss is taken to be
mislabelled (*noisy*). Each category scales its cross-entropy by its own
multiplier, with noisy samples dropped from the update by default.
"""
from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc


class Category(str, enum.Enum):
    HARD = "Hard"
    NOISY = "Noisy"
    ORDINARY = "Ordinary"


@dataclass(frozen=True)
class TriageConfig:
    m: int = 4
    t_hard: float = 0.20
    t_noisy: float = 0.10
    lambda_hard: float = 1.5
    lambda_noisy: float = 0.0
    lambda_ordinary: float = 1.0
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"need at least two clips, got m={self.m}")
        if not (0 <= self.t_hard <= 1 and 0 <= self.t_noisy <= 1 and self.t_hard + self.t_noisy <= 1):
            raise ValueError(f"bad thresholds t_hard={self.t_hard}, t_noisy={self.t_noisy}")
        if min(self.lambda_hard, self.lambda_noisy, self.lambda_ordinary) < 0:
            raise ValueError("loss multipliers must be non-negative")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def lam(self, category: Category) -> float:
        return {Category.HARD: self.lambda_hard, Category.NOISY: self.lambda_noisy,
                Category.ORDINARY: self.lambda_ordinary}[category]


@dataclass
class AgreementRecord:
    sample_id: int
    clip_predictions: list[int]
    agreement: float
    loss: float
    epoch: int = 0
    label: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class TriageAssignment:
    sample_id: int
    category: Category
    lam: float


def split_clips(T: int, m: int) -> list[range]:
    """``m`` contiguous ranges covering ``[0, T)``; earlier clips take the remainder."""
    if m < 1:
        raise ValueError(f"need m >= 1, got {m}")
    if T < m:
        raise ValueError(f"cannot split {T} frames into {m} clips")
    base, rem = divmod(T, m)
    out, start = [], 0
    for j in range(m):
        size = base + (1 if j < rem else 0)
        out.append(range(start, start + size))
        start += size
    return out


def agreement(clip_preds: Sequence) -> float:
    """Share of clips that voted for the modal class."""
    if len(clip_preds) == 0:
        raise ValueError("agreement of an empty prediction list")
    return max(Counter(clip_preds).values()) / len(clip_preds)


def make_record(sample_id: int, clip_preds: Sequence[int], loss: float, epoch: int = 0,
                label: int | None = None) -> AgreementRecord:
    preds = [int(p) for p in clip_preds]
    return AgreementRecord(sample_id, preds, agreement(preds), float(loss), epoch, label)


def assign_triage(records: Sequence[AgreementRecord], cfg: TriageConfig) -> list[TriageAssignment]:
    """Two-rank thresholding.

    Hard: the ``floor(t_hard*N)`` lowest-agreement samples, higher loss first
    on ties. Noisy: among the rest, samples sitting at the dataset's top
    agreement level, highest loss first, up to ``floor(t_noisy*N)``.
    Output order follows the input order.
    """
    if not records:
        raise ValueError("cannot triage an empty record set")
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in agreement records")
    n = len(records)
    n_hard = int(np.floor(cfg.t_hard * n + 1e-9))
    n_noisy = int(np.floor(cfg.t_noisy * n + 1e-9))

    by_hardness = sorted(records, key=lambda r: (r.agreement, -r.loss, r.sample_id))
    hard = {r.sample_id for r in by_hardness[:n_hard]}

    top = max(r.agreement for r in records)
    candidates = sorted((r for r in records if r.sample_id not in hard and r.agreement == top),
                        key=lambda r: (-r.loss, r.sample_id))
    noisy = {r.sample_id for r in candidates[:n_noisy]}

    out = []
    for r in records:
        cat = Category.HARD if r.sample_id in hard else (
            Category.NOISY if r.sample_id in noisy else Category.ORDINARY)
        out.append(TriageAssignment(r.sample_id, cat, cfg.lam(cat)))
    return out


def assign_big_loss(records: Sequence[AgreementRecord], fraction: float, lam: float,
                    lambda_ordinary: float = 1.0) -> list[TriageAssignment]:
    """Loss-only baseline: the top ``fraction`` by loss get ``lam``, ignoring agreement.

    Such samples are tagged Hard when up-weighted and Noisy when down-weighted.
    """
    if not records:
        raise ValueError("cannot triage an empty record set")
    k = int(np.floor(fraction * len(records) + 1e-9))
    top = {r.sample_id for r in sorted(records, key=lambda r: (-r.loss, r.sample_id))[:k]}
    cat = Category.HARD if lam >= lambda_ordinary else Category.NOISY
    return [TriageAssignment(r.sample_id, cat, lam) if r.sample_id in top
            else TriageAssignment(r.sample_id, Category.ORDINARY, lambda_ordinary)
            for r in records]


def all_ordinary(sample_ids: Iterable[int], cfg: TriageConfig) -> list[TriageAssignment]:
    return [TriageAssignment(int(i), Category.ORDINARY, cfg.lambda_ordinary) for i in sample_ids]


def reweighted_loss(ce: dc.DiffArray, assignment: TriageAssignment) -> dc.DiffArray:
    """``lambda * ce``; a zero multiplier sends exactly zero gradient upstream."""
    return dc.scale(ce, assignment.lam)


def category_counts(assignments: Iterable[TriageAssignment]) -> dict[Category, int]:
    counts = Counter(a.category for a in assignments)
    return {c: counts.get(c, 0) for c in Category}


REPORT_COLUMNS = ["id", "epoch", "agreement", "loss", "category", "lambda", "clip_predictions", "kind"]


def write_triage_csv(path, records: Sequence[AgreementRecord],
                     assignments: Sequence[TriageAssignment], kinds: dict[int, str] | None = None):
    by_id = {a.sample_id: a for a in assignments}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in sorted(records, key=lambda r: r.sample_id):
            a = by_id[r.sample_id]
            w.writerow([r.sample_id, r.epoch, repr(r.agreement), repr(r.loss), a.category.value,
                        repr(a.lam), ";".join(str(p) for p in r.clip_predictions),
                        "" if kinds is None else kinds.get(r.sample_id, "")])


def read_triage_csv(path) -> tuple[list[AgreementRecord], list[TriageAssignment], dict[int, str]]:
    records, assignments, kinds = [], [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["id"])
            preds = [int(p) for p in row["clip_predictions"].split(";")] if row["clip_predictions"] else []
            records.append(AgreementRecord(sid, preds, float(row["agreement"]), float(row["loss"]),
                                           int(row["epoch"])))
            assignments.append(TriageAssignment(sid, Category(row["category"]), float(row["lambda"])))
            if row["kind"]:
                kinds[sid] = row["kind"]
    return records, assignments, kinds
