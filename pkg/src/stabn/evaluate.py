"""Accuracy metrics, the attention-inversion experiment, and localization scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InputError
from .explain import upsample_bilinear
from .model import AttentionOverride, StAbnModel
from .synth import VideoDataset, batch_iter
from .tensor import Tensor

CONDITIONS = ((False, False), (True, False), (False, True), (True, True))
INVERT_MODES = {
    "none": (False, False),
    "spatial": (True, False),
    "temporal": (False, True),
    "both": (True, True),
}


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean hit per sample; ties rank the lower class index first."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if not 1 <= k <= logits.shape[1]:
        raise InputError(f"k={k} must lie in [1, {logits.shape[1]}]")
    target = logits[np.arange(len(labels)), labels][:, None]
    classes = np.arange(logits.shape[1])[None, :]
    ahead = (logits > target) | ((logits == target) & (classes < labels[:, None]))
    return ahead.sum(axis=1) < k


def topk_accuracy(logits, labels, k: int) -> float:
    if isinstance(logits, Tensor):
        logits = logits.data
    hits = topk_hits(logits, labels, k)
    return float(hits.mean()) if hits.size else 0.0


def invert_attention(m):
    """``1 - m`` for attention values in [0, 1]."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise InputError(f"attention values must lie in [0, 1], got range [{data.min()}, {data.max()}]")
    return 1.0 - m if isinstance(m, Tensor) else 1.0 - data


def override_for(spatial_inverted: bool, temporal_inverted: bool) -> AttentionOverride:
    return AttentionOverride(
        "inverted" if spatial_inverted else "computed",
        "inverted" if temporal_inverted else "computed",
    )


@dataclass
class ConditionResult:
    spatial_inverted: bool
    temporal_inverted: bool
    top1: float
    top5: float
    correct1: int
    correct5: int


@dataclass
class InversionReport:
    rows: List[ConditionResult]
    count: int
    top5_k: int

    def row(self, spatial: bool, temporal: bool) -> ConditionResult:
        for r in self.rows:
            if (r.spatial_inverted, r.temporal_inverted) == (spatial, temporal):
                return r
        raise KeyError((spatial, temporal))

    def to_records(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(
                f"spatial_inverted={int(r.spatial_inverted)} temporal_inverted={int(r.temporal_inverted)} "
                f"top1={r.top1!r} top5={r.top5!r} samples={self.count}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'Spatial':>8} {'Temporal':>9} {'Top-1':>7} {'Top-' + str(self.top5_k):>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{'x' if r.spatial_inverted else '':>8} {'x' if r.temporal_inverted else '':>9} "
                f"{100 * r.top1:7.1f} {100 * r.top5:7.1f}"
            )
        return "\n".join(lines) + "\n"


def run_inversion_experiment(
    model: StAbnModel,
    dataset: VideoDataset,
    conditions=CONDITIONS,
    batch_size: int = 32,
) -> InversionReport:
    """Evaluate the perception branch with each requested attention inversion."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate an empty dataset")
    k5 = min(5, model.config.num_classes)
    correct = {c: [0, 0] for c in conditions}
    for batch in batch_iter(dataset, batch_size):
        for cond in conditions:
            out = model.infer(batch.videos, override_for(*cond))
            logits = out.per_logits.data
            correct[cond][0] += int(topk_hits(logits, batch.labels, 1).sum())
            correct[cond][1] += int(topk_hits(logits, batch.labels, k5).sum())
    n = len(dataset)
    rows = [ConditionResult(s, t, c1 / n, c5 / n, c1, c5) for (s, t), (c1, c5) in correct.items()]
    return InversionReport(rows, n, k5)


@dataclass
class LocalizationReport:
    temporal_contrast: float
    spatial_contrast: float
    temporal_samples: int
    spatial_samples: int
    evaluated: int

    def to_records(self) -> str:
        return (
            f"temporal_contrast={self.temporal_contrast!r} spatial_contrast={self.spatial_contrast!r} "
            f"temporal_samples={self.temporal_samples} spatial_samples={self.spatial_samples} "
            f"evaluated={self.evaluated}\n"
        )


def _bbox_mask(bboxes: np.ndarray, t: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((t, h, w), dtype=bool)
    for f, (x0, y0, x1, y1) in enumerate(bboxes):
        mask[f, y0:y1, x0:x1] = True
    return mask


def score_localization(model: StAbnModel, dataset: VideoDataset, batch_size: int = 32) -> LocalizationReport:
    """Attention inside minus outside the ground truth, over correctly classified samples.

    Temporal: mean frame weight inside the action window minus outside it.
    Spatial: the attention map is upsampled to the frame size and compared
    inside versus outside the square's bounding box, frame by frame.
    """
    if not dataset.has_metadata:
        raise InputError("localization scoring needs window and bbox metadata")
    t_sum = s_sum = 0.0
    t_n = s_n = 0
    t, h, w = dataset.videos.shape[2:]
    for batch in batch_iter(dataset, batch_size):
        out = model.infer(batch.videos)
        pred = out.per_logits.data.argmax(axis=1)
        temporal = out.attention.temporal.data
        spatial = out.attention.spatial.data[:, 0]
        for j, idx in enumerate(batch.indices):
            if pred[j] != batch.labels[j]:
                continue
            t0, length = (int(v) for v in dataset.windows[idx])
            inside = np.zeros(t, dtype=bool)
            inside[t0 : t0 + length] = True
            if inside.any() and not inside.all():
                t_sum += temporal[j][inside].mean() - temporal[j][~inside].mean()
                t_n += 1
            mask = _bbox_mask(dataset.bboxes[idx], t, h, w)
            if mask.any() and not mask.all():
                up = upsample_bilinear(spatial[j], (h, w))
                s_sum += up[mask].mean() - up[~mask].mean()
                s_n += 1
    return LocalizationReport(
        t_sum / t_n if t_n else 0.0,
        s_sum / s_n if s_n else 0.0,
        t_n,
        s_n,
        len(dataset),
    )
