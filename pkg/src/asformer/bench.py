"""Attention-score accounting and attention-row export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .model import ASFormer, ModelConfig, ScoreCounter, window_schedule


def closed_form_scores(length: int, window: int) -> int:
    """In-window (query, key) pairs for one layer of length ``length``.

    Row t sees ``min(t+h, T-1) - max(t-h, 0) + 1`` keys with ``h = window // 2``;
    summed over t that is ``T(2h+1) - h(h+1)`` once h is capped at T-1.
    """
    h = min(window // 2, length - 1)
    return length * (2 * h + 1) - h * (h + 1)


@dataclass
class MemoryReport:
    length: int
    num_blocks: int
    windows: list[int]
    counted: list[int]
    closed_form: list[int]

    @property
    def total(self) -> int:
        return sum(self.counted)

    @property
    def full_total(self) -> int:
        return self.num_blocks * self.length * self.length

    @property
    def ratio(self) -> float:
        return self.full_total / self.total

    @property
    def bound(self) -> int:
        return 2 * 2**self.num_blocks * self.length

    @property
    def slack(self) -> float:
        """The measured epsilon in total = (2 - epsilon) * 2^J * T."""
        return 2.0 - self.total / (2**self.num_blocks * self.length)

    @property
    def consistent(self) -> bool:
        return self.counted == self.closed_form

    def text(self) -> str:
        lines = [f"T={self.length} J={self.num_blocks}", "block window counted closed_form"]
        for i, (w, c, f) in enumerate(zip(self.windows, self.counted, self.closed_form), 1):
            lines.append(f"{i:5d} {w:6d} {c:7d} {f:11d}")
        lines += [
            f"hierarchical total: {self.total}",
            f"2*2^J*T bound:      {self.bound}",
            f"full attention J*T^2: {self.full_total}",
            f"ratio: {self.ratio:.2f}",
            f"epsilon: {self.slack:.4f}",
            f"counter matches closed form: {self.consistent}",
        ]
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "window", "counted", "closed_form"])
            for i, row in enumerate(zip(self.windows, self.counted, self.closed_form), 1):
                w.writerow([i, *row])
            w.writerow(["total", "", self.total, sum(self.closed_form)])
            w.writerow(["full", "", self.full_total, self.full_total])


def measure_attention(length: int, num_blocks: int, seed: int = 0, dim: int = 4) -> MemoryReport:
    """Run one encoder forward pass with a score counter and compare to the closed form."""
    if length < 2 or num_blocks < 1:
        raise tn.ConfigError(f"need T >= 2 and J >= 1, got T={length}, J={num_blocks}")
    config = ModelConfig(
        num_classes=2, feature_dim=dim, num_blocks=num_blocks, num_decoders=0, model_dim=dim
    )
    model = ASFormer(config, seed)
    features = np.random.default_rng(seed).standard_normal((length, dim))
    counter = ScoreCounter()
    with tn.no_grad():
        model.forward(features, training=False, probe=counter)
    windows = [window_schedule(i) for i in range(1, num_blocks + 1)]
    counted = [counter.counts[("encoder", i)] for i in range(1, num_blocks + 1)]
    closed = [closed_form_scores(length, w) for w in windows]
    return MemoryReport(length, num_blocks, windows, counted, closed)


class AttentionRecorder:
    """Keeps the full band of attention weights for every encoder block."""

    def __init__(self, stage: str = "encoder"):
        self.stage = stage
        self.bands: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, stage, block, weights, mask):
        if stage == self.stage:
            self.bands[block] = (weights.copy(), mask.copy())


def min_max(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def anchor_rows(model: ASFormer, features: np.ndarray, frame: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per encoder block: (raw attention row over all T frames, min-max normalized row).

    Frames outside the anchor's window are 0 in both rows; normalization uses
    in-window entries only.
    """
    n = features.shape[0]
    if not 0 <= frame < n:
        raise IndexError(f"anchor frame {frame} outside [0, {n})")
    rec = AttentionRecorder()
    with tn.no_grad():
        model.forward(features, training=False, probe=rec)
    out = {}
    for block, (weights, mask) in sorted(rec.bands.items()):
        half = (weights.shape[1] - 1) // 2
        cols = frame + np.arange(-half, half + 1)
        valid = mask[frame]
        raw = np.zeros(n)
        raw[cols[valid]] = weights[frame, valid]
        if abs(raw.sum() - 1.0) > 1e-6:
            raise RuntimeError(f"block {block}: attention row sums to {raw.sum()}")
        norm = np.zeros(n)
        norm[cols[valid]] = min_max(weights[frame, valid])
        out[block] = (raw, norm)
    return out


def write_anchor_rows(out_dir: str | Path, rows: dict[int, tuple[np.ndarray, np.ndarray]]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for block, (raw, norm) in rows.items():
        path = out_dir / f"attention_block{block}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "weight", "normalized"])
            for j, (a, b) in enumerate(zip(raw, norm)):
                w.writerow([j, repr(float(a)), repr(float(b))])
        paths.append(path)
    return paths
