"""Segmentation metrics: per-sample IoU, oIoU, mIoU, P@X, and split evaluation.

oIoU is the cumulative (size-weighted) ratio of summed intersections to
summed unions across a split; mIoU is the unweighted mean of per-sample
IoUs. P@X counts samples with IoU >= X (non-strict threshold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .text import tokenize

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    if pred.shape != gt.shape:
        raise ConfigError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return inter, union


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter, union = _counts(pred, gt)
    return inter / union if union else 0.0


def oiou(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    if not pairs:
        raise ConfigError("oiou needs at least one mask pair")
    inter = 0
    union = 0
    for pred, gt in pairs:
        i, u = _counts(pred, gt)
        inter += i
        union += u
    return inter / union if union else 0.0


def miou(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    if not pairs:
        raise ConfigError("miou needs at least one mask pair")
    return float(np.mean([iou(p, g) for p, g in pairs]))


def precision_at(pairs: list[tuple[np.ndarray, np.ndarray]], threshold: float) -> float:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0,1), got {threshold}")
    if not pairs:
        raise ConfigError("precision_at needs at least one mask pair")
    hits = sum(1 for p, g in pairs if iou(p, g) >= threshold)
    return hits / len(pairs)


@dataclass
class MetricsReport:
    """All metrics for one split, in percent."""

    split: str
    n_samples: int
    oiou: float
    miou: float
    precision: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"split": self.split, "n_samples": self.n_samples}
        for x in PRECISION_THRESHOLDS:
            out[f"P@{x}"] = self.precision[x]
        out["oIoU"] = self.oiou
        out["mIoU"] = self.miou
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    def csv_header(self) -> str:
        cols = ["split", "n_samples"] + [f"P@{x}" for x in PRECISION_THRESHOLDS] + ["oIoU", "mIoU"]
        return ",".join(cols)

    def to_csv_row(self) -> str:
        vals = [self.split, str(self.n_samples)]
        vals += [f"{self.precision[x]:.4f}" for x in PRECISION_THRESHOLDS]
        vals += [f"{self.oiou:.4f}", f"{self.miou:.4f}"]
        return ",".join(vals)

    @staticmethod
    def table(rows: list[tuple[str, "MetricsReport"]]) -> str:
        """Aligned text table, columns P@0.5..P@0.9, oIoU, mIoU."""
        headers = ["Method"] + [f"P@{x}" for x in PRECISION_THRESHOLDS] + ["oIoU", "mIoU"]
        body = []
        for label, rep in rows:
            body.append([label] + [f"{rep.precision[x]:.2f}" for x in PRECISION_THRESHOLDS]
                        + [f"{rep.oiou:.2f}", f"{rep.miou:.2f}"])
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        for r in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


def report_from_pairs(pairs: list, split: str) -> MetricsReport:
    return MetricsReport(
        split=split,
        n_samples=len(pairs),
        oiou=100.0 * oiou(pairs),
        miou=100.0 * miou(pairs),
        precision={x: 100.0 * precision_at(pairs, x) for x in PRECISION_THRESHOLDS},
    )


def evaluate(model, encoder, samples: list, vocab, token_len: int, split: str = "val",
             threshold: float = 0.0, batch_size: int = 32) -> MetricsReport:
    """Forward every sample with its (accurate) expression and score the masks."""
    if not samples:
        raise ConfigError("evaluate needs at least one sample")
    pairs = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.stack([
                torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))
                for s in chunk
            ])
            xs, attns = [], []
            for s in chunk:
                ids, attn = tokenize(s.expression, vocab, token_len)
                xs.append(encoder.embed(ids, attn).x)
                attns.append(torch.from_numpy(np.ascontiguousarray(attn, dtype=np.int64)))
            refs = encoder.encode_batch(torch.stack(xs), torch.stack(attns))
            logits = model.forward_batch(images, refs).numpy()
            for s, sample_logits in zip(chunk, logits):
                pairs.append((sample_logits > threshold, s.mask.astype(bool)))
    return report_from_pairs(pairs, split)
