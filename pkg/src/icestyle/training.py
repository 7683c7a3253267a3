"""Training loop (AdamW, norm clipping, warmup + multi-step decay) and evaluation."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import IGNORE_INDEX, LabeledImage
from .icehrnet import IceHrNet, normalize, predict, save_checkpoint
from .metrics import ConfusionMatrix, accumulate, metric_report

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    warmup_iters: int = 1000
    warmup_start_lr: float = 1e-5
    milestones: tuple = (30000, 36000)
    decay_gamma: float = 0.1
    weight_decay: float = 0.005
    grad_clip_norm: float = 1.0
    total_iters: int = 40000
    batch_size: int = 8
    crop_size: tuple = (512, 512)
    val_every: int = 50
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if not self.milestones:
            raise ValueError("at least one milestone is required")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must be increasing, got {self.milestones}")
        if not self.warmup_iters < self.milestones[0] < self.total_iters:
            raise ValueError("need warmup_iters < first milestone < total_iters")
        for name in ("base_lr", "warmup_start_lr", "decay_gamma", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("weight_decay must be >= 0 and batch_size >= 1")

    @classmethod
    def desk(cls, total_iters: int = 400, **kw) -> "TrainConfig":
        """Full-scale schedule compressed proportionally to ``total_iters`` at 64x64 crops."""
        scale = total_iters / 40000
        base = dict(total_iters=total_iters, warmup_iters=max(1, round(1000 * scale)),
                    milestones=(round(30000 * scale), round(36000 * scale)), crop_size=(64, 64), batch_size=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warmup from warmup_start_lr to base_lr, then base_lr * gamma^(milestones passed)."""
    if not 0 <= iteration < config.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iters})")
    if iteration < config.warmup_iters:
        frac = iteration / config.warmup_iters
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    k = sum(1 for m in config.milestones if m <= iteration)
    return config.base_lr * config.decay_gamma ** k


def segmentation_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over pixels whose label is not 255."""
    gt = gt.long()
    if not (gt != IGNORE_INDEX).any():
        raise ValueError("every pixel is ignored; loss undefined")
    return F.cross_entropy(logits, gt, ignore_index=IGNORE_INDEX)


def clip_gradients(parameters, max_norm: float) -> tuple:
    """Scale gradients to global L2 norm <= max_norm; returns (norm before, norm after)."""
    params = [p for p in parameters if p.grad is not None]
    before = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
    after = float(torch.linalg.vector_norm(torch.stack([p.grad.detach().norm() for p in params])))
    return before, after


def sample_batch(samples: Sequence[LabeledImage], config: TrainConfig, iteration: int):
    """Batch for one iteration: a pure function of (samples, seed, iteration).

    Random crop to ``crop_size`` (255-padded when the image is smaller) and a
    horizontal flip with probability 0.5.
    """
    rng = np.random.default_rng([config.seed, iteration])
    n = len(samples)
    idx = rng.permutation(n)[:config.batch_size] if n >= config.batch_size else rng.integers(0, n, config.batch_size)
    ch, cw = config.crop_size
    images, masks = [], []
    for i in idx:
        img, msk = samples[int(i)].image, samples[int(i)].mask
        ph, pw = max(0, ch - msk.shape[0]), max(0, cw - msk.shape[1])
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw), (0, 0)))
            msk = np.pad(msk, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        y = int(rng.integers(0, msk.shape[0] - ch + 1))
        x = int(rng.integers(0, msk.shape[1] - cw + 1))
        img, msk = img[y:y + ch, x:x + cw], msk[y:y + ch, x:x + cw]
        if rng.random() < 0.5:
            img, msk = img[:, ::-1], msk[:, ::-1]
        images.append(img)
        masks.append(msk)
    return np.stack(images), torch.from_numpy(np.stack(masks).astype(np.int64))


@dataclass
class TrainState:
    iteration: int
    model_state: dict
    optimizer_state: dict
    history: list = field(default_factory=list)
    best_miou: float = -1.0
    best_iteration: int = -1
    best_state: Optional[dict] = None

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))


def _make_optimizer(model, config):
    return torch.optim.AdamW(model.parameters(), lr=lr_at(0, config), weight_decay=config.weight_decay)


def train(model: IceHrNet, train_set: Sequence[LabeledImage], val_set: Sequence[LabeledImage],
          config: TrainConfig, out_dir=None, resume: Optional[TrainState] = None,
          stop_at: Optional[int] = None) -> TrainState:
    """Train in place and return the final TrainState.

    ``stop_at`` ends the run early (for checkpoint/resume); ``resume`` continues
    from a saved state. With ``out_dir`` set, a line-per-iteration log
    (``train_log.jsonl``) and the best-validation checkpoint are written there.
    """
    if not train_set:
        raise ValueError("empty training set")
    num_classes = model.cfg.num_classes
    for s in train_set:
        top = s.mask[s.mask != IGNORE_INDEX]
        if top.size and int(top.max()) >= num_classes:
            raise ValueError(f"sample {s.id!r} has labels beyond the model's {num_classes} classes")
    opt = _make_optimizer(model, config)
    if resume is not None:
        model.load_state_dict(resume.model_state)
        opt.load_state_dict(resume.optimizer_state)
        state = TrainState(resume.iteration, {}, {}, list(resume.history), resume.best_miou,
                           resume.best_iteration, resume.best_state)
    else:
        state = TrainState(0, {}, {})
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a")
    model.train()
    try:
        for it in range(state.iteration, end):
            lr = lr_at(it, config)
            for group in opt.param_groups:
                group["lr"] = lr
            images, masks = sample_batch(train_set, config, it)
            logits = model(normalize(images, model.cfg))
            loss = segmentation_loss(logits, masks)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(it, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            before, after = clip_gradients(model.parameters(), config.grad_clip_norm)
            opt.step()
            record = {"iteration": it, "lr": lr, "loss": value, "grad_norm": before, "clipped_norm": after}
            if val_set and config.val_every and ((it + 1) % config.val_every == 0 or it + 1 == config.total_iters):
                report, _ = evaluate(model, val_set, num_classes)
                model.train()
                record["val_miou"] = report["miou"]
                if report["miou"] > state.best_miou:
                    state.best_miou = report["miou"]
                    state.best_iteration = it + 1
                    state.best_state = copy.deepcopy(model.state_dict())
                    if out_dir is not None:
                        save_checkpoint(model, out_dir / "best.pt", iteration=it + 1,
                                        extra={"val_miou": report["miou"], "train_config": config.to_dict()})
            state.history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    state.iteration = end
    state.model_state = copy.deepcopy(model.state_dict())
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    return state


def evaluate(model: IceHrNet, dataset: Sequence[LabeledImage], num_classes: int, class_names=None,
             return_predictions: bool = False):
    """Whole-image argmax evaluation. Returns (report, ConfusionMatrix[, predictions])."""
    if not dataset:
        raise ValueError("empty evaluation set")
    if model.cfg.num_classes != num_classes:
        raise ValueError(f"model predicts {model.cfg.num_classes} classes but dataset has {num_classes}")
    matrix = ConfusionMatrix(num_classes)
    preds = []
    for s in dataset:
        p = predict(model, s.image)
        matrix = accumulate(matrix, p, s.mask)
        if return_predictions:
            preds.append(p)
    report = metric_report(matrix, class_names)
    return (report, matrix, preds) if return_predictions else (report, matrix)


def state_bytes(state_dict: dict) -> bytes:
    """Canonical serialization of a state dict, for byte-level comparisons."""
    buf = io.BytesIO()
    for k in sorted(state_dict):
        buf.write(k.encode())
        buf.write(state_dict[k].detach().cpu().contiguous().numpy().tobytes())
    return buf.getvalue()
