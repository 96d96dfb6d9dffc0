"""Frame accuracy, segmental edit score and segmental overlap F1."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .tensor import ConfigError

THRESHOLDS = (0.10, 0.25, 0.50)
CSV_HEADER = ("video", "acc", "edit", "f1@10", "f1@25", "f1@50")


class MetricError(ValueError):
    pass


class Segment(NamedTuple):
    label: int
    start: int  # inclusive
    end: int  # exclusive


def extract_segments(labels: Sequence) -> list[Segment]:
    """Maximal runs of equal labels, in temporal order."""
    labels = list(labels)
    segs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append(Segment(labels[start], start, t))
            start = t
    return segs


def expand_segments(segments: Iterable[Segment]) -> list:
    out = []
    for s in segments:
        out.extend([s.label] * (s.end - s.start))
    return out


def framewise_accuracy(pred: Sequence, gt: Sequence) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction has {pred.size} frames, ground truth {gt.size}")
    if gt.size == 0:
        raise MetricError("empty sequences")
    return 100.0 * float((pred == gt).sum()) / gt.size


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_score(pred: Sequence, gt: Sequence) -> float:
    if len(gt) == 0:
        raise MetricError("ground truth is empty")
    p = [s.label for s in extract_segments(pred)]
    g = [s.label for s in extract_segments(gt)]
    if not p:
        return 0.0
    return max(0.0, 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g))))


class F1Result(NamedTuple):
    f1: float
    tp: int
    fp: int
    fn: int


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 200.0 * precision * recall / (precision + recall)


def f1_at_k(pred_segs: Sequence[Segment], gt_segs: Sequence[Segment], tau: float) -> F1Result:
    """Greedy matching in prediction order; each ground-truth segment matches once."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"overlap threshold must lie in (0, 1], got {tau}")
    matched = [False] * len(gt_segs)
    tp = fp = 0
    if gt_segs:
        g_lab = np.array([s.label for s in gt_segs])
        g_start = np.array([s.start for s in gt_segs])
        g_end = np.array([s.end for s in gt_segs])
    for seg in pred_segs:
        if not gt_segs:
            fp += 1
            continue
        inter = np.minimum(g_end, seg.end) - np.maximum(g_start, seg.start)
        union = np.maximum(g_end, seg.end) - np.minimum(g_start, seg.start)
        iou = np.where(g_lab == seg.label, np.clip(inter, 0, None) / union, 0.0)
        best = int(np.argmax(iou))  # lowest index wins ties
        if iou[best] >= tau and not matched[best]:
            tp += 1
            matched[best] = True
        else:
            fp += 1
    fn = len(gt_segs) - sum(matched)
    return F1Result(f1_from_counts(tp, fp, fn), tp, fp, fn)


@dataclass
class EvalReport:
    accuracy: float
    edit: float
    f1: dict[float, float]
    counts: dict[float, tuple[int, int, int]]
    frames: int = 0
    correct: int = 0

    def row(self, video: str) -> list:
        return [video, self.accuracy, self.edit] + [self.f1[t] for t in THRESHOLDS]

    def text(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"Acc:  {self.accuracy:.4f}")
        lines.append(f"Edit: {self.edit:.4f}")
        for tau in sorted(self.f1):
            tp, fp, fn = self.counts[tau]
            lines.append(f"F1@{round(tau * 100):02d}: {self.f1[tau]:.4f}  (tp={tp} fp={fp} fn={fn})")
        return "\n".join(lines)


def evaluate(pred: Sequence, gt: Sequence, thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise MetricError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    acc = framewise_accuracy(pred, gt)
    edit = edit_score(pred, gt)
    ps, gs = extract_segments(pred), extract_segments(gt)
    f1, counts = {}, {}
    for tau in thresholds:
        r = f1_at_k(ps, gs, tau)
        f1[tau] = r.f1
        counts[tau] = (r.tp, r.fp, r.fn)
    correct = sum(int(a == b) for a, b in zip(pred, gt))
    return EvalReport(acc, edit, f1, counts, len(gt), correct)


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Dataset-level report: pooled frames, mean edit, pooled F1 counts."""
    if not reports:
        raise MetricError("nothing to aggregate")
    frames = sum(r.frames for r in reports)
    correct = sum(r.correct for r in reports)
    edit = float(np.mean([r.edit for r in reports]))
    counts, f1 = {}, {}
    for tau in reports[0].counts:
        tp, fp, fn = (sum(r.counts[tau][i] for r in reports) for i in range(3))
        counts[tau] = (tp, fp, fn)
        f1[tau] = f1_from_counts(tp, fp, fn)
    return EvalReport(100.0 * correct / frames, edit, f1, counts, frames, correct)


def write_report_csv(path: str | Path, rows: Sequence[tuple[str, EvalReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for video, rep in rows:
            w.writerow([video] + [repr(float(v)) for v in rep.row(video)[1:]])


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise MetricError(f"{path}: unexpected header {reader.fieldnames}")
        return [{k: (v if k == "video" else float(v)) for k, v in r.items()} for r in reader]
