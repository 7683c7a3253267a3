"""Labeled segmentation samples, manifests, splitting and augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

IGNORE_INDEX = 255
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for malformed manifests, files or samples."""


@dataclass
class LabeledImage:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 class indices, 255 = ignore

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"sample {self.id!r}: image must be HxWx3, got {self.image.shape}")
        if self.mask.ndim != 2:
            raise DatasetError(f"sample {self.id!r}: mask must be HxW, got {self.mask.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"sample {self.id!r}: image size {self.image.shape[:2]} != mask size {self.mask.shape}"
            )
        if self.image.dtype != np.uint8 or self.mask.dtype != np.uint8:
            raise DatasetError(f"sample {self.id!r}: image and mask must be uint8")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def validate(self, num_classes: int) -> None:
        bad = (self.mask >= num_classes) & (self.mask != IGNORE_INDEX)
        if bad.any():
            values = sorted(int(v) for v in np.unique(self.mask[bad]))
            raise DatasetError(f"sample {self.id!r}: mask values {values} not < num_classes={num_classes}")


@dataclass
class SampleRef:
    id: str
    image: str
    mask: str


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    class_names: list
    samples: list  # list[SampleRef]
    split: Optional[dict] = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise DatasetError(
                f"class_names has {len(self.class_names)} entries but num_classes={self.num_classes}"
            )
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate sample ids in manifest")

    def ids(self, split: Optional[str] = None) -> list:
        if split is None:
            return [s.id for s in self.samples]
        if self.split is None:
            raise DatasetError(f"manifest {self.name!r} has no split assignment")
        return [s.id for s in self.samples if self.split.get(s.id) == split]

    def ref(self, sample_id: str) -> SampleRef:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def image_path(self, ref: SampleRef) -> Path:
        return self.root / ref.image

    def mask_path(self, ref: SampleRef) -> Path:
        return self.root / ref.mask

    def load_sample(self, ref: SampleRef) -> LabeledImage:
        try:
            image = read_image(self.image_path(ref))
            mask = decode_mask(self.mask_path(ref))
            sample = LabeledImage(ref.id, image, mask)
        except (OSError, DatasetError) as exc:
            raise DatasetError(f"sample {ref.id!r}: {exc}") from exc
        sample.validate(self.num_classes)
        return sample

    def load(self, split: Optional[str] = None) -> list:
        wanted = set(self.ids(split))
        return [self.load_sample(s) for s in self.samples if s.id in wanted]

    def subset(self, splits: Sequence[str]) -> "DatasetManifest":
        if self.split is None:
            raise DatasetError(f"manifest {self.name!r} has no split assignment")
        keep = [s for s in self.samples if self.split.get(s.id) in splits]
        return replace(self, samples=keep, split={s.id: self.split[s.id] for s in keep})

    def to_json(self) -> dict:
        data = {
            "name": self.name,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "samples": [{"id": s.id, "image": s.image, "mask": s.mask} for s in self.samples],
        }
        if self.split is not None:
            data["split"] = dict(self.split)
        return data


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise DatasetError(f"{path}: unsupported image mode {im.mode}")
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"expected HxWx3 uint8 image, got {image.dtype} {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def encode_mask(path, mask: np.ndarray) -> None:
    """Write a class-index mask as a single-channel 8-bit PNG."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DatasetError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise DatasetError("mask values must fit in 8 bits")
    values = np.unique(mask)
    if ((values > 254) & (values != IGNORE_INDEX)).any():
        raise DatasetError("class indices must be <= 254")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def decode_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "LA", "PA", "CMYK", "YCbCr", "LAB", "HSV"):
            raise DatasetError(f"{path}: mask must be single-channel, got mode {im.mode}")
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: unsupported mask bit depth (mode {im.mode})")
        return np.array(im, dtype=np.uint8)


def load_manifest(path, splits: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Read and validate a JSON manifest.

    With ``splits`` given, only samples assigned to those splits are kept and
    validated; files belonging to other splits are never opened.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from exc
    try:
        samples = [SampleRef(str(s["id"]), s["image"], s["mask"]) for s in data["samples"]]
        manifest = DatasetManifest(
            name=data["name"],
            num_classes=int(data["num_classes"]),
            class_names=list(data["class_names"]),
            samples=samples,
            split=data.get("split"),
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc!r})") from exc
    if manifest.split is not None:
        unknown = {v for v in manifest.split.values() if v not in SPLITS}
        if unknown:
            raise DatasetError(f"{path}: unknown split names {sorted(unknown)}")
    if splits is not None:
        manifest = manifest.subset(splits)
    for ref in manifest.samples:
        manifest.load_sample(ref)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2))


def write_dataset(samples: Sequence[LabeledImage], out_dir, name: str, class_names,
                  split: Optional[dict] = None) -> DatasetManifest:
    """Write samples as PNG pairs under ``out_dir`` plus ``manifest.json``."""
    out_dir = Path(out_dir)
    refs = []
    for s in samples:
        s.validate(len(class_names))
        ref = SampleRef(s.id, f"images/{s.id}.png", f"masks/{s.id}.png")
        write_image(out_dir / ref.image, s.image)
        encode_mask(out_dir / ref.mask, s.mask)
        refs.append(ref)
    manifest = DatasetManifest(name, len(class_names), list(class_names), refs, split, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def split_dataset(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetManifest:
    """Shuffle under ``seed`` and assign floor(r*N) to train and val, the rest to test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DatasetError(f"ratios must be three non-negative fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(manifest.samples)
    if n < 3:
        raise DatasetError(f"need at least 3 samples to split, got {n}")
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    split = {manifest.samples[i].id: names[k] for k, i in enumerate(order)}
    return replace(manifest, split=split)


@dataclass(frozen=True)
class AugmentOp:
    """One augmentation step; ``params`` keys depend on ``kind``.

    random_scale: ``range`` (lo, hi) factor.  random_flip: ``p_horizontal``,
    ``p_vertical``.  random_crop: ``size`` (h, w).  random_rotate: ``degrees``
    (lo, hi).
    """

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = ("random_scale", "random_flip", "random_crop", "random_rotate")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DatasetError(f"unknown augmentation kind {self.kind!r}")


def default_ops(crop_size=(64, 64)) -> list:
    return [
        AugmentOp("random_scale", {"range": (0.75, 1.25)}),
        AugmentOp("random_flip", {"p_horizontal": 0.5, "p_vertical": 0.0}),
        AugmentOp("random_rotate", {"degrees": (-15.0, 15.0)}),
        AugmentOp("random_crop", {"size": tuple(crop_size)}),
    ]


def _pad_to(image, mask, h, w):
    ph, pw = max(0, h - image.shape[0]), max(0, w - image.shape[1])
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
    return image, mask


def apply_op(op: AugmentOp, image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    p = op.params
    if op.kind == "random_flip":
        if rng.random() < p.get("p_horizontal", 0.5):
            image, mask = image[:, ::-1], mask[:, ::-1]
        if rng.random() < p.get("p_vertical", 0.0):
            image, mask = image[::-1], mask[::-1]
        return np.ascontiguousarray(image), np.ascontiguousarray(mask)
    if op.kind == "random_scale":
        lo, hi = p.get("range", (0.75, 1.25))
        s = rng.uniform(lo, hi)
        h, w = mask.shape
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        image = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (nw, nh), interpolation=cv2.INTER_NEAREST)
        return image, mask
    if op.kind == "random_rotate":
        lo, hi = p.get("degrees", (-15.0, 15.0))
        angle = rng.uniform(lo, hi)
        h, w = mask.shape
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
        image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=(0, 0, 0))
        mask = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=IGNORE_INDEX)
        return image, mask
    if op.kind == "random_crop":
        ch, cw = p["size"]
        if not p.get("pad", True) and (ch > mask.shape[0] or cw > mask.shape[1]):
            raise DatasetError(f"crop size {(ch, cw)} larger than image {mask.shape}")
        image, mask = _pad_to(image, mask, ch, cw)
        y = int(rng.integers(0, mask.shape[0] - ch + 1))
        x = int(rng.integers(0, mask.shape[1] - cw + 1))
        return image[y:y + ch, x:x + cw].copy(), mask[y:y + ch, x:x + cw].copy()
    raise DatasetError(f"unknown augmentation kind {op.kind!r}")


def augment_sample(sample: LabeledImage, ops: Sequence[AugmentOp], rng: np.random.Generator,
                   new_id: Optional[str] = None) -> LabeledImage:
    image, mask = sample.image, sample.mask
    for op in ops:
        image, mask = apply_op(op, image, mask, rng)
    return LabeledImage(new_id or sample.id, image, mask)


def augment_expand(samples: Sequence[LabeledImage], ops: Sequence[AugmentOp], copies: int,
                   seed: int = 0) -> list:
    """Originals followed by ``copies`` augmented versions of each sample.

    Every copy applies the whole op list; copy k of sample i draws from an
    independent stream keyed on (seed, i, k). Crops must fit inside the source
    image (no padding), otherwise a DatasetError is raised.
    """
    if copies < 0:
        raise DatasetError(f"copies must be >= 0, got {copies}")
    for op in ops:
        if op.kind == "random_crop":
            ch, cw = op.params["size"]
            for s in samples:
                if ch > s.height or cw > s.width:
                    raise DatasetError(f"sample {s.id!r}: crop size {(ch, cw)} larger than image "
                                       f"{(s.height, s.width)}")
    out = list(samples)
    for i, s in enumerate(samples):
        for k in range(copies):
            rng = np.random.default_rng([seed, i, k])
            out.append(augment_sample(s, ops, rng, new_id=f"{s.id}_aug{k + 1}"))
    return out
