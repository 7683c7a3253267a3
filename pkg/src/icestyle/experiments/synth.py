"""Procedural source/target domains sharing mask geometry but not class textures."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from ..dataset import LabeledImage, write_dataset
from ..styletransfer import StyleBank


class SynthError(ValueError):
    pass


@dataclass
class Texture:
    """One class's appearance: ``family`` in {grain, stripes, blotch}."""

    family: str
    color: tuple
    amplitude: float = 15.0
    scale: float = 2.0

    FAMILIES = ("grain", "stripes", "blotch")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise SynthError(f"unknown texture family {self.family!r}")
        self.color = tuple(float(c) for c in self.color)
        if len(self.color) != 3:
            raise SynthError("texture color must be RGB")


# Source stands in for stained blood-cell smears, target for river ice over water.
SOURCE_TEXTURES = [
    Texture("grain", (222, 178, 190), amplitude=10, scale=1.0),   # plasma background
    Texture("blotch", (168, 84, 142), amplitude=22, scale=3.0),   # stained cells
    Texture("grain", (120, 60, 150), amplitude=14, scale=1.5),
    Texture("blotch", (240, 220, 200), amplitude=12, scale=4.0),
]
TARGET_TEXTURES = [
    Texture("stripes", (70, 98, 116), amplitude=20, scale=2.0),   # open water
    Texture("blotch", (168, 178, 188), amplitude=24, scale=5.0),  # ice floes
    Texture("grain", (110, 130, 120), amplitude=12, scale=1.0),
    Texture("stripes", (160, 170, 190), amplitude=10, scale=3.0),
]


@dataclass
class SyntheticDomainParams:
    image_size: int = 64
    num_classes: int = 2
    counts: tuple = (30, 10, 10)  # train, val, test per domain
    blob_sigma: float = 5.0
    illumination_jitter: float = 0.15
    source_textures: list = field(default_factory=lambda: list(SOURCE_TEXTURES))
    target_textures: list = field(default_factory=lambda: list(TARGET_TEXTURES))
    patch_size: int = 16
    patches_per_class: int = 4
    min_patch_purity: float = 0.99
    min_domain_distance: float = 40.0
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.source_textures = [t if isinstance(t, Texture) else Texture(**t) for t in self.source_textures]
        self.target_textures = [t if isinstance(t, Texture) else Texture(**t) for t in self.target_textures]
        if len(self.counts) != 3 or min(self.counts) < 3:
            raise SynthError(f"need at least 3 samples per split, got {self.counts}")
        if self.num_classes < 2:
            raise SynthError("num_classes must be >= 2")
        if self.image_size % 4 or self.image_size < self.patch_size:
            raise SynthError("image_size must be a multiple of 4 and at least patch_size")
        for name in ("source_textures", "target_textures"):
            if len(getattr(self, name)) < self.num_classes:
                raise SynthError(f"{name} has fewer entries than num_classes={self.num_classes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        return d


def _smooth_noise(rng, shape, sigma):
    field_ = rng.standard_normal(shape).astype(np.float32)
    if sigma > 0:
        field_ = cv2.GaussianBlur(field_, (0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
    field_ -= field_.mean()
    std = field_.std()
    return field_ / std if std > 0 else field_


def blob_mask(rng, size, num_classes, sigma):
    """Irregular blobs: a thresholded smooth field (2 classes) or argmax of biased fields."""
    if num_classes == 2:
        f = _smooth_noise(rng, (size, size), sigma)
        q = rng.uniform(0.3, 0.7)
        return (f > np.quantile(f, q)).astype(np.uint8)
    fields = np.stack([_smooth_noise(rng, (size, size), sigma) + rng.normal(0, 0.3)
                       for _ in range(num_classes)])
    return fields.argmax(0).astype(np.uint8)


def render_texture(rng, size, tex: Texture):
    h = w = size
    if tex.family == "grain":
        lum = _smooth_noise(rng, (h, w), tex.scale * 0.5)
    elif tex.family == "blotch":
        lum = 0.6 * _smooth_noise(rng, (h, w), tex.scale) + 0.4 * _smooth_noise(rng, (h, w), tex.scale * 2.5)
    else:
        theta = rng.uniform(-0.4, 0.4)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        period = 4.0 * tex.scale
        phase = rng.uniform(0, 2 * np.pi)
        lum = np.sin(2 * np.pi * (yy * np.cos(theta) + xx * np.sin(theta)) / period + phase)
        lum = 0.8 * lum + 0.6 * _smooth_noise(rng, (h, w), 0.7)
    chroma = 0.25 * np.stack([_smooth_noise(rng, (h, w), tex.scale) for _ in range(3)], -1)
    img = np.asarray(tex.color, np.float32) + tex.amplitude * (lum[..., None] + chroma)
    return img


def render_sample(rng, mask, textures, size, jitter=0.0):
    """Composite per-class textures by mask under one random global gain."""
    img = np.zeros((size, size, 3), np.float32)
    for c in np.unique(mask):
        layer = render_texture(rng, size, textures[int(c)])
        img[mask == c] = layer[mask == c]
    img *= 1.0 + rng.uniform(-jitter, jitter)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _domain(params: SyntheticDomainParams, textures, stream: int, prefix: str):
    samples, split = [], {}
    names = ("train", "val", "test")
    k = 0
    for name, n in zip(names, params.counts):
        for _ in range(n):
            rng = np.random.default_rng([params.seed, stream, k])
            mask = blob_mask(rng, params.image_size, params.num_classes, params.blob_sigma)
            image = render_sample(rng, mask, textures, params.image_size, params.illumination_jitter)
            sid = f"{prefix}{k:04d}"
            samples.append(LabeledImage(sid, image, mask))
            split[sid] = name
            k += 1
    return samples, split


def _pure_windows(mask, c, size, min_purity):
    """(purity, y, x) of every size x size window, best first."""
    ind = (mask == c).astype(np.float64)
    ii = np.pad(ind.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    h, w = mask.shape
    sums = ii[size:h + 1, size:w + 1] - ii[:h - size + 1, size:w + 1] - ii[size:h + 1, :w - size + 1] \
        + ii[:h - size + 1, :w - size + 1]
    purity = sums / (size * size)
    ys, xs = np.nonzero(purity >= min_purity)
    order = np.argsort(-purity[ys, xs], kind="stable")
    return [(purity[ys[i], xs[i]], int(ys[i]), int(xs[i])) for i in order]


def build_style_bank(samples, num_classes, params: SyntheticDomainParams) -> StyleBank:
    """Class-pure crops from target training images, plus one whole image for global styling."""
    styles = {c: [] for c in range(num_classes)}
    origins = {c: [] for c in range(num_classes)}
    for s in samples:
        for c in range(num_classes):
            if len(styles[c]) >= params.patches_per_class:
                continue
            wins = _pure_windows(s.mask, c, params.patch_size, params.min_patch_purity)
            if wins:
                _, y, x = wins[0]
                styles[c].append(s.image[y:y + params.patch_size, x:x + params.patch_size].copy())
                origins[c].append(f"{s.id}@{y},{x}")
    missing = [c for c, v in styles.items() if not v]
    if missing:
        raise SynthError(f"no class-pure {params.patch_size}px window found for classes {missing}")
    note = (f"synthetic target-domain crops, {params.patch_size}px, purity >= {params.min_patch_purity}, "
            f"seed {params.seed}")
    return StyleBank(styles, note, [samples[0].image.copy()], provenance=origins)


def class_color_distance(a_samples, b_samples, num_classes) -> float:
    """Mean over classes of the RGB distance between per-class mean colors of two domains."""
    dists = []
    for c in range(num_classes):
        ma = np.concatenate([s.image[s.mask == c] for s in a_samples]).mean(0)
        mb = np.concatenate([s.image[s.mask == c] for s in b_samples]).mean(0)
        dists.append(np.linalg.norm(ma - mb))
    return float(np.mean(dists))


def gen_synthetic_domains(params: SyntheticDomainParams, out_dir):
    """Write ``source/``, ``target/`` and ``bank/`` under ``out_dir``.

    Returns (source manifest, target manifest, style bank).
    """
    out_dir = Path(out_dir)
    n = params.num_classes
    src, src_split = _domain(params, params.source_textures, 0, "src")
    tgt, tgt_split = _domain(params, params.target_textures, 1, "tgt")
    dist = class_color_distance(src, tgt, n)
    if dist < params.min_domain_distance:
        raise SynthError(f"source and target domains too similar (class color distance {dist:.1f} "
                         f"< {params.min_domain_distance})")
    names = [f"class{c}" for c in range(n)]
    if n == 2:
        names = ["background", "foreground"]
    bank = build_style_bank([s for s in tgt if tgt_split[s.id] == "train"], n, params)
    source = write_dataset(src, out_dir / "source", "synthetic-source", names, src_split)
    target = write_dataset(tgt, out_dir / "target", "synthetic-target", names, tgt_split)
    (out_dir / "bank").mkdir(parents=True, exist_ok=True)
    bank.save(out_dir / "bank" / "bank.json")
    return source, target, bank
