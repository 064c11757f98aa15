"""File-based stage execution.

Every stage reads its predecessor's artifacts from the run directory, writes
its own into ``<root>/<variant>/<stage>/``, and finishes by writing a
``stage.json`` carrying the stage's chained config hash. Re-running a stage
with the same configuration and seed reproduces identical bytes. If a
sibling variant already ran an identical stage (same hash), its artifacts
are copied instead of recomputed.

A lock file per variant directory keeps concurrent writers out.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
from pathlib import Path

import numpy as np

from . import nn
from .adaptation import train_adaptation
from .config import REPORT_ORDER, RunConfig, stage_hashes, stage_plan
from .errors import ConfigError, MissingArtifactError, ModasegError, ValidationError
from .metrics import EvalReport, evaluate, format_report_table, write_report_tsv
from .nets import (PatchDiscriminator, ResNetGenerator, UNet2D, load_checkpoint,
                   restore_model, restore_optimizer, save_checkpoint)
from .segmentation import build_unet, predict_volume, train_supervised
from .selection import (score_candidate, select_checkpoint, source_area_stats,
                        split_holdout, write_scores)
from .translation import build_translation_nets, train_translation, translate_dataset
from .volume_io import (LabelVolume, Volume, clip_bounds, clip_intensities, conform_shape,
                        load_label_volume, load_volume, normalize, read_manifest, resample,
                        save_volume, write_manifest)

STAGE_FILE = "stage.json"


def variant_dir(root, variant: str) -> Path:
    return Path(root) / variant


def stage_dir(root, variant: str, stage: str) -> Path:
    return variant_dir(root, variant) / stage


class stage_lock:
    """Exclusive lock file; refuses to run when another writer holds it."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ModasegError(
                f"lock file {self.path} exists; another stage may be running "
                f"(delete it if that process is gone)")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_stage_meta(sdir: Path, stage: str, cfg: RunConfig, extra=None):
    hashes = stage_hashes(cfg)
    parents = {"preprocess": "synth", "translate": "preprocess",
               "train-seg": "translate" if "translate" in stage_plan(cfg.variant) else "preprocess",
               "adapt": "train-seg", "select": "adapt",
               "evaluate": "select" if "select" in stage_plan(cfg.variant) else "train-seg"}
    meta = {
        "stage": stage,
        "stage_hash": hashes[stage],
        "parent_hash": hashes.get(parents.get(stage, ""), None),
        "variant": cfg.variant,
        "seed": cfg.seed,
    }
    if extra:
        meta.update(extra)
    (sdir / STAGE_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_stage_meta(sdir: Path) -> dict:
    p = Path(sdir) / STAGE_FILE
    if not p.exists():
        raise MissingArtifactError(f"missing stage artifact: {p}")
    return json.loads(p.read_text())


def _require_parent(root, cfg: RunConfig, stage: str, allow_mismatch=False) -> Path:
    """Locate and verify the predecessor stage directory."""
    plan = stage_plan(cfg.variant)
    if stage not in plan:
        raise ConfigError(f"stage {stage!r} is not part of the {cfg.variant!r} plan {plan}")
    idx = plan.index(stage)
    if idx == 0:
        return None
    if stage == "preprocess" and cfg.dataset.kind == "manifest":
        return None  # external data: no synth stage to chain from
    parent_stage = plan[idx - 1]
    pdir = stage_dir(root, cfg.variant, parent_stage)
    meta = read_stage_meta(pdir)
    expect = stage_hashes(cfg)[parent_stage]
    if meta["stage_hash"] != expect and not allow_mismatch:
        raise ConfigError(
            f"{pdir}: stage hash {meta['stage_hash']} != expected {expect}; the artifact "
            f"was produced under a different configuration (--allow-hash-mismatch overrides)")
    return pdir


def _reuse_sibling(root, cfg: RunConfig, stage: str, sdir: Path) -> bool:
    """Copy an identical completed stage from another variant, if present."""
    my_hash = stage_hashes(cfg)[stage]
    root = Path(root)
    if not root.exists():
        return False
    for vdir in sorted(root.iterdir()):
        cand = vdir / stage
        if cand == sdir or not (cand / STAGE_FILE).exists():
            continue
        try:
            meta = read_stage_meta(cand)
        except (OSError, json.JSONDecodeError):
            continue
        if meta.get("stage") == stage and meta.get("stage_hash") == my_hash:
            if sdir.exists():
                shutil.rmtree(sdir)
            shutil.copytree(cand, sdir)
            return True
    return False


def _fresh_dir(sdir: Path) -> Path:
    if sdir.exists():
        shutil.rmtree(sdir)
    sdir.mkdir(parents=True)
    return sdir


# -- dataset plumbing ------------------------------------------------------------------


def _save_dataset(sdir: Path, source, target, truth, meta=None):
    voldir = sdir / "volumes"
    voldir.mkdir(parents=True, exist_ok=True)
    src_entries, tgt_entries, truth_entries = [], [], []
    for vid, vol, lab in source:
        ip, mp = f"volumes/{vid}.rawvol", f"volumes/{vid}_mask.rawvol"
        save_volume(sdir / ip, vol)
        save_volume(sdir / mp, lab)
        src_entries.append((ip, mp))
    for vid, vol in target:
        ip = f"volumes/{vid}.rawvol"
        save_volume(sdir / ip, vol)
        tgt_entries.append(ip)
    for vid, lab in truth:
        mp = f"volumes/{vid}_truth.rawvol"
        save_volume(sdir / mp, lab)
        truth_entries.append(mp)
    write_manifest(sdir / "manifest.json", src_entries, tgt_entries, truth_entries,
                   meta=meta or {})


def load_dataset(sdir: Path):
    """Read a stage's dataset manifest back into volume lists."""
    sdir = Path(sdir)
    doc = read_manifest(sdir / "manifest.json")
    source = []
    for entry in doc["source"]:
        vid = Path(entry["image"]).stem
        vol = load_volume(sdir / entry["image"])
        lab = load_label_volume(sdir / entry["mask"]) if entry.get("mask") else None
        source.append((vid, vol, lab))
    target = []
    for entry in doc["target"]:
        vid = Path(entry["image"]).stem
        target.append((vid, load_volume(sdir / entry["image"])))
    truth = []
    for entry in doc["target_truth"]:
        vid = Path(entry["mask"]).stem.removesuffix("_truth")
        truth.append((vid, load_label_volume(sdir / entry["mask"])))
    return source, target, truth


def write_history(path, rows):
    lines = [f"{step}\t{name}\t{repr(float(value))}" for step, name, value in rows]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_history(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        step, name, value = line.split("\t")
        rows.append((int(step), name, float(value)))
    return rows


# -- stages ------------------------------------------------------------------------------


def _stage_synth(cfg: RunConfig, root, sdir: Path):
    if cfg.dataset.kind != "phantom":
        raise ConfigError("synth applies only to phantom datasets; "
                          "manifest datasets start at preprocess")
    from .volume_io import make_phantom_dataset
    spec = dataclasses.replace(cfg.dataset.phantom, seed=cfg.dataset.phantom.seed + cfg.seed)
    source, target, truth = make_phantom_dataset(spec)
    n_src, n_tgt = len(source), len(target)
    src = [(f"src-{k:02d}", vol, lab) for k, (vol, lab) in enumerate(source)]
    tgt = [(f"tgt-{k:02d}", vol) for k, vol in enumerate(target)]
    tru = [(f"tgt-{k:02d}", lab) for k, lab in enumerate(truth)]
    _save_dataset(sdir, src, tgt, tru, meta={"n_source": n_src, "n_target": n_tgt})


def _preprocess_image(vol: Volume, pre) -> Volume:
    v = resample(vol, pre.target_spacing, "linear")
    lo, hi = clip_bounds(v)
    fill = float(min(max(v.data.min(), lo), hi))  # volume minimum after clipping
    v = conform_shape(v, pre.target_shape, fill=fill)
    if pre.clip:
        v = clip_intensities(v)
    return normalize(v)


def _preprocess_labels(lab: LabelVolume, pre) -> LabelVolume:
    out = resample(lab, pre.target_spacing, "nearest")
    return conform_shape(out, pre.target_shape, fill=0)


def _stage_preprocess(cfg: RunConfig, root, sdir: Path):
    if cfg.dataset.kind == "phantom":
        src_dir = stage_dir(root, cfg.variant, "synth")
        source, target, truth = load_dataset(src_dir)
    else:
        doc = read_manifest(cfg.dataset.manifest_path)
        base = Path(cfg.dataset.manifest_path).parent
        source = [(f"src-{k:02d}", load_volume(base / e["image"]),
                   load_label_volume(base / e["mask"]))
                  for k, e in enumerate(doc["source"])]
        target = [(f"tgt-{k:02d}", load_volume(base / e["image"]))
                  for k, e in enumerate(doc["target"])]
        truth = [(f"tgt-{k:02d}", load_label_volume(base / e["mask"]))
                 for k, e in enumerate(doc.get("target_truth", []))]
    pre = cfg.preprocess
    out_src = [(vid, _preprocess_image(vol, pre), _preprocess_labels(lab, pre))
               for vid, vol, lab in source]
    out_tgt = [(vid, _preprocess_image(vol, pre)) for vid, vol in target]
    out_tru = [(vid, _preprocess_labels(lab, pre)) for vid, lab in truth]
    for vid, vol, lab in out_src:
        if vol.shape != tuple(pre.target_shape):
            raise ValidationError(f"{vid}: conformed shape {vol.shape} != target")
    meta = {"target_spacing": list(pre.target_spacing),
            "target_shape": list(pre.target_shape), "clip": pre.clip}
    _save_dataset(sdir, out_src, out_tgt, out_tru, meta=meta)
    (sdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _stage_translate(cfg: RunConfig, root, sdir: Path):
    pdir = stage_dir(root, cfg.variant, "preprocess")
    source, target, _ = load_dataset(pdir)
    nets, optims, history, steps = train_translation(
        [(vid, vol, lab) for vid, vol, lab in source],
        [(vid, vol) for vid, vol in target], cfg.translation, cfg.seed)
    my_hash = stage_hashes(cfg)["translate"]
    save_checkpoint(sdir / "ckpt-final.blob", phase="translation", step=steps,
                    seed=cfg.seed, config_hash=my_hash, models=nets, optimizers=optims)
    write_history(sdir / "history.tsv", history)
    mapped = translate_dataset(nets["g_s2t"], source)
    _save_dataset(sdir, mapped, [], [], meta={"route": "mapped_source"})


def _load_seg_inputs(cfg: RunConfig, root):
    """Training volumes for the supervised stage, per the variant's route."""
    if "translate" in stage_plan(cfg.variant):
        ddir = stage_dir(root, cfg.variant, "translate")
    else:
        ddir = stage_dir(root, cfg.variant, "preprocess")
    source, _, _ = load_dataset(ddir)
    return source


def _stage_train_seg(cfg: RunConfig, root, sdir: Path):
    source = _load_seg_inputs(cfg, root)
    train_vols, _ = split_holdout(source, cfg.selection.holdout_fraction, cfg.seed)
    my_hash = stage_hashes(cfg)["train-seg"]
    snaps = []

    def snap(step, unet, opt):
        p = sdir / f"ckpt-{step:06d}.blob"
        save_checkpoint(p, phase="supervised", step=step, seed=cfg.seed,
                        config_hash=my_hash, models={"unet": unet},
                        optimizers={"unet": opt})
        snaps.append(p.name)

    unet, opt, history, steps = train_supervised(train_vols, cfg.supervised, cfg.seed,
                                                 snapshot_cb=snap)
    save_checkpoint(sdir / "ckpt-final.blob", phase="supervised", step=steps,
                    seed=cfg.seed, config_hash=my_hash, models={"unet": unet},
                    optimizers={"unet": opt},
                    extra={"n_train_volumes": len(train_vols)})
    write_history(sdir / "history.tsv", history)


def _restore_unet(cfg: RunConfig, path, expected_hash, allow_mismatch=False):
    meta, arrays = load_checkpoint(path, expected_hash, allow_mismatch)
    unet, opt = build_unet(cfg.supervised, cfg.seed)
    restore_model(unet, arrays, "unet")
    if meta["optimizers"].get("unet"):
        restore_optimizer(opt, meta, arrays, "unet")
    return unet, opt, meta


def _stage_adapt(cfg: RunConfig, root, sdir: Path):
    seg_dir = stage_dir(root, cfg.variant, "train-seg")
    unet, _, _ = _restore_unet(cfg, seg_dir / "ckpt-final.blob",
                               stage_hashes(cfg)["train-seg"])
    opt = nn.Adam(unet.named_parameters(), lr=cfg.adaptation.lr_gen,
                  betas=cfg.adaptation.betas)
    mapped = _load_seg_inputs(cfg, root)
    train_vols, _ = split_holdout(mapped, cfg.selection.holdout_fraction, cfg.seed)
    _, target, _ = load_dataset(stage_dir(root, cfg.variant, "preprocess"))
    canddir = sdir / "candidates"
    canddir.mkdir(parents=True, exist_ok=True)
    my_hash = stage_hashes(cfg)["adapt"]

    def snap(step, net, optimizer):
        save_checkpoint(canddir / f"cand-{step:06d}.blob", phase="adaptation", step=step,
                        seed=cfg.seed, config_hash=my_hash, models={"unet": net},
                        optimizers={"unet": optimizer})

    disc, history, steps = train_adaptation(unet, opt, train_vols, target,
                                            cfg.adaptation, cfg.seed, snapshot_cb=snap)
    write_history(sdir / "history.tsv", history)


def _stage_select(cfg: RunConfig, root, sdir: Path):
    adapt_dir = stage_dir(root, cfg.variant, "adapt")
    canddir = adapt_dir / "candidates"
    cand_files = sorted(canddir.glob("cand-*.blob"))
    if not cand_files:
        raise MissingArtifactError(f"no candidate checkpoints under {canddir}")
    pre_dir = stage_dir(root, cfg.variant, "preprocess")
    source, target, _ = load_dataset(pre_dir)
    stats = source_area_stats([lab for _, _, lab in source], classes=cfg.selection.classes)
    mapped = _load_seg_inputs(cfg, root)
    _, holdout = split_holdout(mapped, cfg.selection.holdout_fraction, cfg.seed)
    adapt_hash = stage_hashes(cfg)["adapt"]
    scores = []
    for path in cand_files:
        meta, arrays = load_checkpoint(path, adapt_hash)
        unet, _ = build_unet(cfg.supervised, cfg.seed)
        restore_model(unet, arrays, "unet")
        scores.append(score_candidate(unet, target, holdout, stats,
                                      checkpoint_id=path.name, step=meta["step"]))
    best = select_checkpoint(scores)
    write_scores(sdir / "scores.tsv", scores, classes=cfg.selection.classes)
    (sdir / "selected.json").write_text(json.dumps({
        "checkpoint": f"../adapt/candidates/{best.checkpoint_id}",
        "checkpoint_id": best.checkpoint_id,
        "step": best.step,
        "validation_loss": best.loss,
        "ratios": list(best.ratios),
        "source_dice_losses": list(best.source_dice_losses),
    }, indent=2, sort_keys=True) + "\n")


def _model_for_evaluation(cfg: RunConfig, root):
    plan = stage_plan(cfg.variant)
    hashes = stage_hashes(cfg)
    if "select" in plan:
        sel_dir = stage_dir(root, cfg.variant, "select")
        sel_meta_path = sel_dir / "selected.json"
        if not sel_meta_path.exists():
            raise MissingArtifactError(f"missing stage artifact: {sel_meta_path}")
        sel = json.loads(sel_meta_path.read_text())
        path = sel_dir / sel["checkpoint"]
        unet, _, meta = _restore_unet(cfg, path, hashes["adapt"])
        return unet, {"checkpoint": sel["checkpoint_id"], "step": meta["step"]}
    seg_path = stage_dir(root, cfg.variant, "train-seg") / "ckpt-final.blob"
    if not seg_path.exists():
        raise MissingArtifactError(f"missing stage artifact: {seg_path}")
    unet, _, meta = _restore_unet(cfg, seg_path, hashes["train-seg"])
    return unet, {"checkpoint": "ckpt-final.blob", "step": meta["step"]}


def _stage_evaluate(cfg: RunConfig, root, sdir: Path):
    unet, model_info = _model_for_evaluation(cfg, root)
    _, target, truth = load_dataset(stage_dir(root, cfg.variant, "preprocess"))
    if not truth:
        raise MissingArtifactError("no target truth volumes available for evaluation")
    preddir = sdir / "predictions"
    preddir.mkdir(parents=True, exist_ok=True)
    preds = []
    for vid, vol in target:
        pred, _ = predict_volume(unet, vol)
        save_volume(preddir / f"pred-{vid}.rawvol", pred)
        preds.append(pred)
    report = evaluate(preds, [lab for _, lab in truth], method=cfg.method_label(),
                      classes=cfg.selection.classes)
    write_report_tsv(sdir / "report.tsv", [report])
    (sdir / "report.txt").write_text(format_report_table([report]))
    summary = report.summary()
    doc = {
        "method": cfg.method_label(),
        "variant": cfg.variant,
        "model": model_info,
        "summary": summary,
        "per_volume": {
            "dice": {str(c): report.dice[c] for c in report.classes},
            "assd": {str(c): report.surf[c] for c in report.classes},
        },
        "data_hash": stage_hashes(cfg)["preprocess"],
    }
    (sdir / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_stage(stage: str, cfg: RunConfig, root, allow_mismatch: bool = False) -> Path:
    """Execute one pipeline stage into <root>/<variant>/<stage>."""
    if stage == "report":
        return run_report(root)
    impls = {
        "synth": _stage_synth,
        "preprocess": _stage_preprocess,
        "translate": _stage_translate,
        "train-seg": _stage_train_seg,
        "adapt": _stage_adapt,
        "select": _stage_select,
        "evaluate": _stage_evaluate,
    }
    if stage not in impls:
        raise ConfigError(f"unknown stage {stage!r}")
    _require_parent(root, cfg, stage, allow_mismatch)
    sdir = stage_dir(root, cfg.variant, stage)
    with stage_lock(variant_dir(root, cfg.variant)):
        if _reuse_sibling(root, cfg, stage, sdir):
            return sdir
        _fresh_dir(sdir)
        impls[stage](cfg, root, sdir)
        _write_stage_meta(sdir, stage, cfg)
    return sdir


def _report_sort_key(method: str):
    try:
        return (0, REPORT_ORDER.index(method))
    except ValueError:
        return (1, method)


def run_report(root) -> Path:
    """Collect per-variant evaluations into the ablation table."""
    root = Path(root)
    docs = []
    for vdir in sorted(root.iterdir()) if root.exists() else []:
        ejson = vdir / "evaluate" / "eval.json"
        if ejson.exists():
            docs.append(json.loads(ejson.read_text()))
    if not docs:
        raise MissingArtifactError(f"no evaluate/eval.json artifacts under {root}")
    hashes = {d["data_hash"] for d in docs}
    if len(hashes) > 1:
        raise ConfigError(
            f"refusing to mix evaluations from different dataset hashes: {sorted(hashes)}")
    docs.sort(key=lambda d: _report_sort_key(d["method"]))
    reports = []
    for d in docs:
        classes = tuple(int(c) for c in sorted(d["per_volume"]["dice"], key=int))
        rep = EvalReport(method=d["method"], classes=classes,
                         dice={c: d["per_volume"]["dice"][str(c)] for c in classes},
                         surf={c: d["per_volume"]["assd"][str(c)] for c in classes},
                         n_volumes=len(d["per_volume"]["dice"][str(classes[0])]))
        reports.append(rep)
    rdir = root / "report"
    with stage_lock(root):
        rdir.mkdir(parents=True, exist_ok=True)
        (rdir / "ablation.txt").write_text(format_report_table(reports))
        write_report_tsv(rdir / "ablation.tsv", reports)
        rows = [{"method": d["method"], "variant": d["variant"],
                 "mean_foreground_dice": d["summary"]["mean_foreground_dice"]}
                for d in docs]
        (rdir / "ablation.json").write_text(
            json.dumps({"rows": rows, "data_hash": docs[0]["data_hash"]},
                       indent=2, sort_keys=True) + "\n")
    return rdir
