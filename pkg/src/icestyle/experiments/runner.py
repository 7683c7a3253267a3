"""Supervised / none / conventional / advanced experiment arms on a shared target test split."""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..dataset import DatasetError, LabeledImage, load_manifest
from ..icehrnet import SegConfig, build_model, save_checkpoint
from ..metrics import check_report
from ..styletransfer import StyleBank, make_backend, stylize_samples, assign_classes
from ..training import TrainConfig, evaluate, state_bytes, train

log = logging.getLogger(__name__)

ARMS = ("supervised", "none", "conventional", "advanced")
ARM_TITLES = {"supervised": "Supervised", "none": "None Stylized",
              "conventional": "Conventional Stylized", "advanced": "Advanced Stylized"}

PALETTE = [(0, 0, 255), (255, 0, 0), (0, 200, 0), (255, 200, 0), (255, 0, 255), (0, 255, 255),
           (128, 64, 0), (255, 128, 128)]


class ZeroShotViolation(RuntimeError):
    """The training path of a zero-shot arm could read target-domain training labels."""


@dataclass
class ExperimentSpec:
    mode: str
    target_manifest: str
    source_manifest: Optional[str] = None
    style_bank: Optional[str] = None
    seg_config: SegConfig = field(default_factory=SegConfig.toy)
    train_config: TrainConfig = field(default_factory=TrainConfig.desk)
    backend: dict = field(default_factory=lambda: {"kind": "statistical"})
    seed: int = 0
    out_dir: Optional[str] = None
    overlays: int = 4

    def __post_init__(self):
        if self.mode not in ARMS:
            raise ValueError(f"unknown arm {self.mode!r}; expected one of {ARMS}")
        if self.mode != "supervised" and self.source_manifest is None:
            raise ValueError(f"arm {self.mode!r} needs a source manifest")
        if self.mode in ("conventional", "advanced") and self.style_bank is None:
            raise ValueError(f"arm {self.mode!r} needs a style bank")

    def echo(self) -> dict:
        return {
            "mode": self.mode, "source_manifest": self.source_manifest, "target_manifest": self.target_manifest,
            "style_bank": self.style_bank, "seg_config": self.seg_config.to_dict(),
            "train_config": self.train_config.to_dict(), "backend": dict(self.backend), "seed": self.seed,
        }


def emit_overlay(sample: LabeledImage, pred: np.ndarray, path, palette=PALETTE, alpha: float = 0.5) -> Path:
    """Blend class colors over the image: round((1 - alpha) * image + alpha * palette[pred])."""
    pred = np.asarray(pred)
    if pred.shape != sample.mask.shape:
        raise ValueError(f"prediction shape {pred.shape} != image shape {sample.mask.shape}")
    if pred.size and int(pred.max()) >= len(palette):
        raise ValueError(f"class {int(pred.max())} has no palette entry")
    colors = np.asarray(palette, np.float64)[pred]
    out = np.clip(np.rint((1 - alpha) * sample.image.astype(np.float64) + alpha * colors), 0, 255)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out.astype(np.uint8), mode="RGB").save(path, format="PNG")
    return path


def _guard_sources(spec: ExperimentSpec) -> None:
    """Hard abort when a zero-shot arm's training data resolves to target training masks."""
    if spec.mode == "supervised":
        return
    target_path = Path(spec.target_manifest).resolve()
    source_path = Path(spec.source_manifest).resolve()
    if target_path == source_path:
        raise ZeroShotViolation("source manifest is the target manifest")
    raw = json.loads(target_path.read_text())
    split = raw.get("split") or {}
    protected = {(target_path.parent / s["mask"]).resolve() for s in raw["samples"]
                 if split.get(str(s["id"])) != "test"}
    src = json.loads(source_path.read_text())
    used = {(source_path.parent / s["mask"]).resolve() for s in src["samples"]}
    overlap = protected & used
    if overlap:
        raise ZeroShotViolation(f"training data includes target training masks, e.g. {sorted(overlap)[0]}")


def training_data(spec: ExperimentSpec):
    """(train samples, val samples, num_classes) reachable by the arm's training path."""
    if spec.mode == "supervised":
        target = load_manifest(spec.target_manifest, splits=("train", "val"))
        return target.load("train"), target.load("val"), target.num_classes
    _guard_sources(spec)
    source = load_manifest(spec.source_manifest)
    if source.split is None:
        raise DatasetError("source manifest needs a train/val/test split")
    bank = StyleBank.load(spec.style_bank) if spec.style_bank else None
    backend = make_backend(**spec.backend) if spec.mode != "none" else None
    assignment = None
    if spec.mode == "advanced":
        assignment = assign_classes(source.num_classes, len(bank.styles))
    # source val is stylized the same way: target labels never drive model selection
    out = []
    for name, offset in (("train", 0), ("val", 1)):
        styled = stylize_samples(source.load(name), bank, spec.mode, backend,
                                 seed=spec.seed * 2 + offset, assignment=assignment)
        out.append([s.sample for s in styled])
    return out[0], out[1], source.num_classes


def run_experiment(spec: ExperimentSpec) -> dict:
    """Train one arm and evaluate on the target test split; returns the report dict."""
    t0 = time.time()
    train_set, val_set, num_classes = training_data(spec)
    target_test = load_manifest(spec.target_manifest, splits=("test",))
    if num_classes != target_test.num_classes:
        raise DatasetError(f"training data has {num_classes} classes, target has {target_test.num_classes}")
    seg = replace(spec.seg_config, num_classes=num_classes)
    tcfg = replace(spec.train_config, seed=spec.seed)
    model = build_model(seg, spec.seed)
    out_dir = Path(spec.out_dir) if spec.out_dir else None
    state = train(model, train_set, val_set, tcfg, out_dir=out_dir)
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    test_samples = target_test.load("test")
    report, matrix, preds = evaluate(model, test_samples, num_classes, target_test.class_names,
                                     return_predictions=True)
    overlays = []
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.pt", iteration=state.iteration,
                        extra={"train_config": tcfg.to_dict(), "mode": spec.mode})
        for s, p in list(zip(test_samples, preds))[:spec.overlays]:
            overlays.append(str(emit_overlay(s, p, out_dir / "overlays" / f"{s.id}.png")))
    result = {
        "arm": spec.mode,
        "metrics": report,
        "config": spec.echo(),
        "wall_clock_s": time.time() - t0,
        "overlays": overlays,
        "best_val_miou": state.best_miou,
        "best_iteration": state.best_iteration,
        "final_loss": state.history[-1]["loss"] if state.history else None,
        "training_digest": hashlib.sha256(state_bytes(state.model_state)).hexdigest(),
    }
    if not check_report(report):
        raise RuntimeError("report metrics disagree with the stored confusion matrix")
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(result, indent=2))
    return result


def verify_zero_shot(spec: ExperimentSpec) -> dict:
    """Run a zero-shot arm twice, the second time with target train/val masks deleted.

    Raises ZeroShotViolation when the trained weights differ or the training
    path needed a deleted file.
    """
    if spec.mode == "supervised":
        raise ValueError("the supervised arm trains on target labels by design")
    first = run_experiment(replace(spec, out_dir=None))
    target_path = Path(spec.target_manifest)
    with tempfile.TemporaryDirectory() as tmp:
        copy_dir = Path(tmp) / "target"
        shutil.copytree(target_path.parent, copy_dir)
        raw = json.loads(target_path.read_text())
        split = raw.get("split") or {}
        removed = 0
        for s in raw["samples"]:
            if split.get(str(s["id"])) != "test":
                (copy_dir / s["mask"]).unlink()
                removed += 1
        stripped = replace(spec, target_manifest=str(copy_dir / target_path.name), out_dir=None)
        try:
            second = run_experiment(stripped)
        except (DatasetError, FileNotFoundError) as exc:
            raise ZeroShotViolation(f"training path needed a deleted target mask: {exc}") from exc
    if first["training_digest"] != second["training_digest"]:
        raise ZeroShotViolation("trained weights changed after deleting target training masks")
    return {"arm": spec.mode, "masks_removed": removed, "digest": first["training_digest"],
            "miou": first["metrics"]["miou"]}


def run_matrix(specs) -> dict:
    """Run every arm; failures are recorded per arm without stopping the rest."""
    specs = sorted(specs, key=lambda s: ARMS.index(s.mode))
    rows = []
    for spec in specs:
        try:
            r = run_experiment(spec)
            rows.append({"arm": spec.mode, "miou": r["metrics"]["miou"], "acc": r["metrics"]["acc"],
                         "per_class_iou": r["metrics"]["per_class_iou"], "report": r, "error": None})
        except Exception as exc:  # noqa: BLE001 - reported per arm
            log.exception("arm %s failed", spec.mode)
            rows.append({"arm": spec.mode, "miou": None, "acc": None, "per_class_iou": None,
                         "report": None, "error": f"{type(exc).__name__}: {exc}"})
    return {"columns": [ARM_TITLES[r["arm"]] for r in rows], "rows": rows}


def render_table(table: dict, method: str = "IceHrNet") -> str:
    """Plain-text table with one column per arm and one line per metric."""
    cols = table["columns"]
    width = max([len(c) for c in cols] + [10])
    lines = ["Method".ljust(12) + "".join(c.rjust(width + 2) for c in cols)]
    for metric in ("miou", "acc"):
        cells = []
        for r in table["rows"]:
            v = r[metric]
            cells.append(("ERROR" if v is None else f"{v:.4f}").rjust(width + 2))
        lines.append(f"{method} {metric}".ljust(12) + "".join(cells))
    return "\n".join(lines)
