"""Unsupervised checkpoint selection from area-ratio statistics.

Anchor: the mean number of pixels of each foreground class per slice in the
source ground truth. A candidate's target predictions are scored by how far
their per-slice class areas drift from that anchor (|ratio - 1| per class),
plus per-class dice losses on a held-out mapped-source split. The candidate
minimizing the sum is selected; ties go to the later training step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateStatsError, ValidationError
from .metrics import dice_coefficient
from .segmentation import predict_volume
from .volume_io import AXIAL


@dataclass(frozen=True)
class AreaStats:
    """Mean class-c pixels per slice over source ground truth (c >= 1)."""

    s_avg_pix: tuple
    slice_count: int
    classes: tuple

    def __post_init__(self):
        if self.slice_count < 1:
            raise ValidationError("area stats need at least one slice")
        if any(v < 0 for v in self.s_avg_pix):
            raise ValidationError("mean pixel counts cannot be negative")


@dataclass(frozen=True)
class CandidateScore:
    checkpoint_id: str
    step: int
    ratios: tuple
    source_dice_losses: tuple
    loss: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise ValidationError(f"candidate {self.checkpoint_id}: non-finite loss")
        if any(r < 0 for r in self.ratios):
            raise ValidationError(f"candidate {self.checkpoint_id}: negative ratio")


def _slices(mask_volumes, axis):
    for lab in mask_volumes:
        for k in range(lab.data.shape[axis]):
            yield np.take(lab.data, k, axis=axis)


def source_area_stats(mask_volumes, classes=(1, 2), axis: int = AXIAL) -> AreaStats:
    """Per-class mean pixels per slice; slices without the class count too."""
    totals = np.zeros(len(classes), dtype=np.float64)
    n_slices = 0
    for sl in _slices(mask_volumes, axis):
        n_slices += 1
        for i, c in enumerate(classes):
            totals[i] += int((sl == c).sum())
    if n_slices == 0:
        raise ValidationError("no mask slices provided")
    return AreaStats(tuple(totals / n_slices), n_slices, tuple(classes))


def area_ratio(predicted_volumes, stats: AreaStats, axis: int = AXIAL) -> tuple:
    """Mean predicted pixels per slice divided by the source anchor, per class."""
    totals = np.zeros(len(stats.classes), dtype=np.float64)
    n_slices = 0
    for sl in _slices(predicted_volumes, axis):
        n_slices += 1
        for i, c in enumerate(stats.classes):
            totals[i] += int((sl == c).sum())
    if n_slices == 0:
        raise ValidationError("no predicted slices provided")
    ratios = []
    for i, c in enumerate(stats.classes):
        if stats.s_avg_pix[i] == 0:
            raise DegenerateStatsError(
                f"class {c} absent from source ground truth; exclude it explicitly")
        ratios.append((totals[i] / n_slices) / stats.s_avg_pix[i])
    return tuple(ratios)


def validation_loss(ratios, source_dice_losses) -> float:
    """sum_c |r_c - 1| + sum_c sourceDiceLoss_c (foreground classes)."""
    r = np.asarray(ratios, dtype=np.float64)
    d = np.asarray(source_dice_losses, dtype=np.float64)
    if not (np.isfinite(r).all() and np.isfinite(d).all()):
        raise ValidationError("validation loss inputs must be finite")
    return float(np.abs(r - 1.0).sum() + d.sum())


def select_checkpoint(candidates) -> CandidateScore:
    """Argmin of the validation loss; ties resolve to the larger step."""
    candidates = list(candidates)
    if not candidates:
        raise ValidationError("no candidates to select from")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.loss < best.loss or (cand.loss == best.loss and cand.step > best.step):
            best = cand
    return best


def split_holdout(items, frac: float, seed: int):
    """Deterministic (train, holdout) split; holdout gets at least one item."""
    items = list(items)
    if len(items) < 2:
        return items, items  # too small to hold out: score on what exists
    order = np.random.default_rng(np.random.SeedSequence((seed, 30))).permutation(len(items))
    n_hold = max(1, int(round(frac * len(items))))
    hold_idx = set(int(i) for i in order[:n_hold])
    train = [it for i, it in enumerate(items) if i not in hold_idx]
    hold = [it for i, it in enumerate(items) if i in hold_idx]
    return train, hold


def source_dice_losses(unet, holdout_mapped, classes=(1, 2), axis: int = AXIAL) -> tuple:
    """Per-class (1 - dice) pooled over all held-out mapped-source volumes."""
    preds = []
    truths = []
    for _, vol, lab in holdout_mapped:
        pred, _ = predict_volume(unet, vol, axis=axis)
        preds.append(pred.data)
        truths.append(lab.data)
    pred_all = np.concatenate([p.ravel() for p in preds])
    truth_all = np.concatenate([t.ravel() for t in truths])
    losses = []
    for c in classes:
        losses.append(1.0 - dice_coefficient(pred_all == c, truth_all == c))
    return tuple(losses)


def score_candidate(unet, target_volumes, holdout_mapped, stats: AreaStats,
                    checkpoint_id: str, step: int, axis: int = AXIAL) -> CandidateScore:
    """Full score for one candidate segmenter."""
    preds = [predict_volume(unet, vol, axis=axis)[0] for _, vol in target_volumes]
    ratios = area_ratio(preds, stats, axis=axis)
    dls = source_dice_losses(unet, holdout_mapped, classes=stats.classes, axis=axis)
    return CandidateScore(checkpoint_id, step, ratios, dls,
                          validation_loss(ratios, dls))


def write_scores(path, candidates, classes=(1, 2)) -> None:
    """Audit table: one row per candidate."""
    cols = ["checkpoint_id", "step"] + [f"r_{c}" for c in classes] \
        + [f"diceLoss_{c}" for c in classes] + ["validation_loss"]
    lines = ["\t".join(cols)]
    for cand in candidates:
        row = [cand.checkpoint_id, str(cand.step)]
        row += [repr(float(r)) for r in cand.ratios]
        row += [repr(float(d)) for d in cand.source_dice_losses]
        row.append(repr(float(cand.loss)))
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path) -> list:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split("\t")
    n_cls = sum(1 for h in header if h.startswith("r_"))
    out = []
    for line in lines[1:]:
        parts = line.split("\t")
        cid, step = parts[0], int(parts[1])
        ratios = tuple(float(v) for v in parts[2:2 + n_cls])
        dls = tuple(float(v) for v in parts[2 + n_cls:2 + 2 * n_cls])
        loss = float(parts[-1])
        out.append(CandidateScore(cid, step, ratios, dls, loss))
    return out
