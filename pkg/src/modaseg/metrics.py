"""Evaluation metrics: per-class volumetric Dice and average symmetric
surface distance (mm), with report aggregation.

Surfaces are 6-connected: a foreground voxel with any face neighbor that is
background or outside the grid. Distances are between voxel centers in
physical coordinates. ASSD of an empty mask is undefined; it is recorded as
missing (never silently zero) and excluded from means with a count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import kernels
from .errors import EmptyMaskError, ShapeError, ValidationError


def dice_coefficient(pred, gt) -> float:
    """2|P n G| / (|P| + |G|); both masks empty counts as perfect (1.0)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / (p + g)


def extract_surface(mask) -> np.ndarray:
    """Coordinates (K,3) of foreground voxels with a 6-neighbor outside/background."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise ShapeError(f"extract_surface expects a 3D mask, got {mask.shape}")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    surface = mask & ~interior
    return np.argwhere(surface)


def assd(pred, gt, spacing) -> float:
    """Average symmetric surface distance in millimeters."""
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or (spacing <= 0).any():
        raise ValidationError(f"spacing must be 3 positive components, got {spacing}")
    sp = extract_surface(pred)
    sg = extract_surface(gt)
    if len(sp) == 0 or len(sg) == 0:
        raise EmptyMaskError("surface distance undefined for an empty mask")
    pa = np.ascontiguousarray(sp.astype(np.float64) * spacing)
    ga = np.ascontiguousarray(sg.astype(np.float64) * spacing)
    K = kernels()
    d_pg = np.sqrt(K.min_sq_dists(pa, ga))
    d_gp = np.sqrt(K.min_sq_dists(ga, pa))
    # fsum: exactly rounded, so the total is independent of summation order
    total = math.fsum(np.concatenate([d_pg, d_gp]))
    return total / (len(pa) + len(ga))


CLASS_NAMES = {1: "VS", 2: "Cochlea"}


@dataclass
class EvalReport:
    """Per-volume and aggregate metrics for one method."""

    method: str
    classes: tuple
    dice: dict = field(default_factory=dict)       # class -> list of per-volume dice
    surf: dict = field(default_factory=dict)       # class -> list of per-volume ASSD or None
    n_volumes: int = 0

    def mean_std(self, values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None, None, 0
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std()), len(values) - len(vals)

    def summary(self) -> dict:
        out = {"method": self.method, "n_volumes": self.n_volumes, "classes": {}}
        for c in self.classes:
            dm, ds, _ = self.mean_std(self.dice[c])
            am, asd, excl = self.mean_std(self.surf[c])
            out["classes"][str(c)] = {
                "dice_mean": dm, "dice_std": ds,
                "assd_mean": am, "assd_std": asd, "assd_excluded": excl,
            }
        fg = [v for c in self.classes for v in self.dice[c]]
        out["mean_foreground_dice"] = float(np.mean(fg)) if fg else None
        return out


def evaluate(pred_volumes, truth_volumes, method: str = "", classes=(1, 2)) -> EvalReport:
    """Score matched prediction/truth label volumes per foreground class.

    Population std (one volume -> std 0). Volumes where either surface is
    empty contribute no ASSD sample and are counted as excluded.
    """
    pred_volumes = list(pred_volumes)
    truth_volumes = list(truth_volumes)
    if len(pred_volumes) != len(truth_volumes):
        raise ValidationError(
            f"{len(pred_volumes)} predictions vs {len(truth_volumes)} truths")
    if not pred_volumes:
        raise ValidationError("nothing to evaluate")
    report = EvalReport(method=method, classes=tuple(classes),
                        dice={c: [] for c in classes}, surf={c: [] for c in classes},
                        n_volumes=len(pred_volumes))
    for pred, truth in zip(pred_volumes, truth_volumes):
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
        for c in classes:
            pm = pred.data == c
            tm = truth.data == c
            report.dice[c].append(dice_coefficient(pm, tm))
            try:
                report.surf[c].append(assd(pm, tm, truth.spacing))
            except EmptyMaskError:
                report.surf[c].append(None)
    return report


def _fmt(mean, std):
    if mean is None:
        return "undefined"
    return f"{mean:.3f}±{std:.3f}"


def format_report_table(reports) -> str:
    """Human-readable block: one row per method, mean +/- std per metric."""
    classes = reports[0].classes
    header = ["Method"]
    for c in classes:
        name = CLASS_NAMES.get(c, f"class{c}")
        header += [f"{name} Dice", f"{name} ASSD"]
    rows = [header]
    for rep in reports:
        s = rep.summary()["classes"]
        row = [rep.method]
        for c in classes:
            row += [_fmt(s[str(c)]["dice_mean"], s[str(c)]["dice_std"]),
                    _fmt(s[str(c)]["assd_mean"], s[str(c)]["assd_std"])]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    return "\n".join(lines) + "\n"


def write_report_tsv(path, reports) -> None:
    classes = reports[0].classes
    cols = ["method", "n_volumes"]
    for c in classes:
        cols += [f"dice{c}_mean", f"dice{c}_std", f"assd{c}_mean", f"assd{c}_std",
                 f"assd{c}_excluded"]
    cols.append("mean_foreground_dice")
    lines = ["\t".join(cols)]
    for rep in reports:
        s = rep.summary()
        row = [rep.method, str(rep.n_volumes)]
        for c in classes:
            cs = s["classes"][str(c)]
            row += [_num(cs["dice_mean"]), _num(cs["dice_std"]),
                    _num(cs["assd_mean"]), _num(cs["assd_std"]), str(cs["assd_excluded"])]
        row.append(_num(s["mean_foreground_dice"]))
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _num(v):
    if v is None:
        return "nan"
    return repr(float(v))


def brute_force_assd(pred, gt, spacing) -> float:
    """All-pairs reference path (no acceleration); same definition as assd."""
    sp = extract_surface(pred)
    sg = extract_surface(gt)
    if len(sp) == 0 or len(sg) == 0:
        raise EmptyMaskError("surface distance undefined for an empty mask")
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = sp.astype(np.float64) * spacing
    ga = sg.astype(np.float64) * spacing
    dists = []
    for p in pa:
        best = math.inf
        for g in ga:
            d = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2 + (p[2] - g[2]) ** 2
            best = min(best, d)
        dists.append(math.sqrt(best))
    for g in ga:
        best = math.inf
        for p in pa:
            d = (g[0] - p[0]) ** 2 + (g[1] - p[1]) ** 2 + (g[2] - p[2]) ** 2
            best = min(best, d)
        dists.append(math.sqrt(best))
    return math.fsum(dists) / (len(pa) + len(ga))
