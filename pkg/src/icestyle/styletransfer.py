"""AdaIN style transfer, global stylization and per-class (label-guided) stylization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import (IGNORE_INDEX, DatasetManifest, LabeledImage, read_image,
                      write_dataset, write_image)

MODES = ("none", "conventional", "advanced")


class StyleError(ValueError):
    pass


def adain(content: np.ndarray, style: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Renormalize each content channel to the style channel's mean and std.

    Both inputs are C x ... arrays; statistics are taken over all trailing
    (spatial) axes with the population standard deviation.
    """
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if eps <= 0:
        raise StyleError("eps must be positive")
    if content.shape[0] != style.shape[0]:
        raise StyleError(f"channel mismatch: content {content.shape[0]} vs style {style.shape[0]}")
    c = content.reshape(content.shape[0], -1)
    s = style.reshape(style.shape[0], -1)
    if c.shape[1] == 0 or s.shape[1] == 0:
        raise StyleError("empty spatial extent")
    c_mean, c_std = c.mean(axis=1, keepdims=True), c.std(axis=1, keepdims=True)
    s_mean, s_std = s.mean(axis=1, keepdims=True), s.std(axis=1, keepdims=True)
    out = s_std * (c - c_mean) / (c_std + eps) + s_mean
    return out.reshape(content.shape)


# RGB -> LMS cone response and the log-opponent rotation (Reinhard et al.).
_RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                     [0.1967, 0.7244, 0.0782],
                     [0.0241, 0.1288, 0.8444]])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64)
_LAB2LOG = np.linalg.inv(_LOG2LAB)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """uint8-range RGB (... x 3) to log-opponent l-alpha-beta (... x 3)."""
    x = (np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0
    return np.log10(x @ _RGB2LMS.T) @ _LOG2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ _LAB2LOG.T)
    return (lms @ _LMS2RGB.T) * 256.0 - 1.0


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


class StatisticalBackend:
    """Pixel-level AdaIN: per-channel moment matching in a decorrelated color space.

    Has no learned parameters and is fully deterministic. ``color_space`` is
    ``"lab"`` (log-opponent, the default) or ``"rgb"``.
    """

    kind = "statistical"

    def __init__(self, color_space: str = "lab", eps: float = 1e-8):
        if color_space not in ("lab", "rgb"):
            raise StyleError(f"unknown color space {color_space!r}")
        self.color_space = color_space
        self.eps = eps

    def _forward(self, rgb):
        return rgb_to_lab(rgb) if self.color_space == "lab" else np.asarray(rgb, dtype=np.float64)

    def _inverse(self, x):
        return lab_to_rgb(x) if self.color_space == "lab" else x

    def transfer(self, content: np.ndarray, style: np.ndarray) -> np.ndarray:
        if style.size == 0:
            raise StyleError("empty style patch")
        h, w, _ = content.shape
        c = self._forward(content).reshape(-1, 3).T
        s = self._forward(style).reshape(-1, 3).T
        out = adain(c, s, self.eps).T.reshape(h, w, 3)
        return _to_uint8(self._inverse(out))

    def config(self) -> dict:
        return {"kind": self.kind, "color_space": self.color_space, "eps": self.eps}


class NeuralBackend:
    """Encoder -> AdaIN on feature maps -> decoder, blended by ``alpha``.

    The encoder/decoder weights come from a parameter blob (a torch state dict).
    ``NeuralBackend.random(seed)`` builds untrained weights, useful only to
    exercise the plumbing.
    """

    kind = "neural"

    def __init__(self, params: Optional[dict] = None, alpha: float = 1.0, eps: float = 1e-5):
        if params is None:
            raise StyleError("neural backend requires encoder/decoder parameter blobs")
        if not 0.0 <= alpha <= 1.0:
            raise StyleError(f"alpha must be in [0, 1], got {alpha}")
        import torch

        self.alpha = alpha
        self.eps = eps
        self.net = _build_autoencoder()
        missing = {k for k in self.net.state_dict()} - set(params)
        if missing:
            raise StyleError(f"parameter blob is missing {sorted(missing)}")
        self.net.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})
        self.net.eval()

    @classmethod
    def random(cls, seed: int = 0, alpha: float = 1.0) -> "NeuralBackend":
        import torch

        gen = torch.Generator().manual_seed(seed)
        net = _build_autoencoder()
        params = {}
        for k, v in net.state_dict().items():
            if k.endswith("weight"):
                fan_in = v[0].numel()
                params[k] = torch.randn(v.shape, generator=gen, dtype=v.dtype) * np.sqrt(2.0 / fan_in)
            else:
                params[k] = torch.zeros_like(v)
        return cls(params, alpha=alpha)

    @classmethod
    def from_file(cls, path, alpha: float = 1.0) -> "NeuralBackend":
        import torch

        path = Path(path)
        if not path.is_file():
            raise StyleError(f"neural backend parameter blob not found: {path}")
        return cls(torch.load(path, map_location="cpu", weights_only=True), alpha=alpha)

    def save(self, path) -> None:
        import torch

        torch.save(self.net.state_dict(), path)

    def transfer(self, content: np.ndarray, style: np.ndarray) -> np.ndarray:
        import torch

        if style.size == 0:
            raise StyleError("empty style patch")
        with torch.no_grad():
            fc = self.net.encoder(_to_tensor(content))
            fs = self.net.encoder(_to_tensor(style))
            mixed = torch.from_numpy(adain(fc[0].double().numpy(), fs[0].double().numpy(), self.eps))
            mixed = mixed.to(fc.dtype)[None]
            mixed = self.alpha * mixed + (1 - self.alpha) * fc
            out = self.net.decoder(mixed)
        h, w, _ = content.shape
        out = out[0, :, :h, :w].permute(1, 2, 0).numpy() * 255.0
        return _to_uint8(out)

    def config(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "eps": self.eps}


def _build_autoencoder():
    import torch.nn as nn

    net = nn.Module()
    net.encoder = nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
    )
    net.decoder = nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(64, 32, 3, padding=1), nn.ReLU(),
        nn.Conv2d(32, 16, 3, padding=1), nn.ReLU(),
        nn.Conv2d(16, 3, 3, padding=1),
    )
    return net


def _to_tensor(image: np.ndarray):
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()[None] / 255.0
    h, w = t.shape[-2:]
    return F.pad(t, (0, w % 2, 0, h % 2), mode="replicate")


def make_backend(kind: str = "statistical", params_path=None, **kwargs):
    if kind == "statistical":
        return StatisticalBackend(**kwargs)
    if kind == "neural":
        if params_path is None:
            raise StyleError("neural backend requires a parameter blob path")
        return NeuralBackend.from_file(params_path, **kwargs)
    raise StyleError(f"unknown backend kind {kind!r}")


@dataclass
class StyleBank:
    """Target-domain style patches keyed by class index.

    ``global_patches`` hold whole-image styles for the conventional arm.
    """

    styles: dict  # int -> list[np.ndarray]
    source_note: str = ""
    global_patches: list = field(default_factory=list)
    names: dict = field(default_factory=dict)  # (key, index) -> identifier
    provenance: dict = field(default_factory=dict)  # class -> list of free-text origins

    def __post_init__(self):
        self.styles = {int(k): list(v) for k, v in self.styles.items()}
        for c, patches in self.styles.items():
            if not patches:
                raise StyleError(f"style bank entry for class {c} is empty")
            for p in patches:
                _check_patch(p, f"class {c}")
        for p in self.global_patches:
            _check_patch(p, "global")

    def patch_id(self, key, index: int) -> str:
        return self.names.get((key, index), f"{key}:{index}")

    @classmethod
    def load(cls, path) -> "StyleBank":
        path = Path(path)
        if not path.is_file():
            raise StyleError(f"style bank not found: {path}")
        try:
            data = json.loads(path.read_text())
            styles, names = {}, {}
            for k, files in data["styles"].items():
                styles[int(k)] = [read_image(path.parent / f) for f in files]
                names.update({(int(k), i): f for i, f in enumerate(files)})
            glob = [read_image(path.parent / f) for f in data.get("global", [])]
            names.update({("global", i): f for i, f in enumerate(data.get("global", []))})
        except (KeyError, ValueError, OSError) as exc:
            raise StyleError(f"{path}: malformed style bank ({exc})") from exc
        prov = {int(k): list(v) for k, v in data.get("provenance", {}).items()}
        return cls(styles, data.get("source_note", ""), glob, names, prov)

    def save(self, path) -> None:
        path = Path(path)
        out = {"source_note": self.source_note, "styles": {}, "global": [],
               "provenance": {str(k): list(v) for k, v in sorted(self.provenance.items())}}
        for c, patches in sorted(self.styles.items()):
            files = []
            for i, p in enumerate(patches):
                rel = f"patches/class{c}_{i}.png"
                write_image(path.parent / rel, p)
                files.append(rel)
            out["styles"][str(c)] = files
        for i, p in enumerate(self.global_patches):
            rel = f"patches/global_{i}.png"
            write_image(path.parent / rel, p)
            out["global"].append(rel)
        path.write_text(json.dumps(out, indent=2))


def _check_patch(p, where):
    if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
        raise StyleError(f"{where}: style patches must be HxWx3 uint8")
    if p.shape[0] < 16 or p.shape[1] < 16:
        raise StyleError(f"{where}: style patch {p.shape[:2]} smaller than 16x16")


@dataclass
class StylizedSample:
    sample: LabeledImage
    mode: str
    styles_used: dict = field(default_factory=dict)


def assign_classes(source_classes: int, target_classes: int, mapping: Optional[dict] = None) -> dict:
    """Map every source class to the target class whose style it receives.

    Default: identity on the first ``target_classes`` indices, surplus source
    classes round-robin (``c -> c % target_classes``).
    """
    if source_classes < target_classes:
        raise StyleError(
            f"source domain needs at least as many classes as the target ({source_classes} < {target_classes})"
        )
    if mapping is None:
        return {c: c % target_classes for c in range(source_classes)}
    mapping = {int(k): int(v) for k, v in mapping.items()}
    missing = set(range(source_classes)) - set(mapping)
    if missing:
        raise StyleError(f"explicit mapping misses source classes {sorted(missing)}")
    bad = {k: v for k, v in mapping.items() if not 0 <= v < target_classes}
    if bad:
        raise StyleError(f"mapping targets outside [0, {target_classes}): {bad}")
    return mapping


def stylize_global(content: LabeledImage, style_patch: np.ndarray, backend) -> StylizedSample:
    if style_patch is None or np.asarray(style_patch).size == 0:
        raise StyleError("empty style patch")
    out = backend.transfer(content.image, style_patch)
    return StylizedSample(LabeledImage(content.id, out, content.mask.copy()), "conventional")


def stylize_per_class(content: LabeledImage, bank: StyleBank, backend, seed=0,
                      assignment: Optional[dict] = None) -> StylizedSample:
    """Stylize the whole image once per present class, then keep each class's own pixels.

    Pixel p with mask value c is copied from the full-image stylization made
    with a patch of class ``assignment[c]``; ignore pixels keep the content.
    """
    mask = content.mask
    classes = [int(c) for c in np.unique(mask) if c != IGNORE_INDEX]
    if not classes:
        raise StyleError(f"sample {content.id!r}: mask has no labeled pixels")
    rng = np.random.default_rng(seed)
    out = content.image.copy()
    used = {}
    cache = {}
    for c in classes:
        target = c if assignment is None else assignment.get(c)
        if target is None or target not in bank.styles:
            raise StyleError(f"sample {content.id!r}: no style bank entry for class {c}")
        idx = int(rng.integers(len(bank.styles[target])))
        if (target, idx) not in cache:
            cache[target, idx] = backend.transfer(content.image, bank.styles[target][idx])
        sel = mask == c
        out[sel] = cache[target, idx][sel]
        used[c] = bank.patch_id(target, idx)
    return StylizedSample(LabeledImage(content.id, out, mask.copy()), "advanced", used)


def stylize_samples(samples: Sequence[LabeledImage], bank: Optional[StyleBank], mode: str, backend=None,
                    seed: int = 0, assignment: Optional[dict] = None) -> list:
    """Apply one stylization mode to every sample; returns StylizedSamples in order."""
    if mode not in MODES:
        raise StyleError(f"unknown stylization mode {mode!r}")
    out = []
    for i, s in enumerate(samples):
        try:
            if mode == "none":
                out.append(StylizedSample(LabeledImage(s.id, s.image.copy(), s.mask.copy()), "none"))
            elif mode == "conventional":
                if bank is None or not bank.global_patches:
                    raise StyleError("conventional mode needs a designated global style patch")
                idx = int(np.random.default_rng([seed, i]).integers(len(bank.global_patches)))
                st = stylize_global(s, bank.global_patches[idx], backend)
                st.styles_used = {"global": bank.patch_id("global", idx)}
                out.append(st)
            else:
                out.append(stylize_per_class(s, bank, backend, seed=[seed, i], assignment=assignment))
        except StyleError as exc:
            raise StyleError(f"sample {s.id!r}: {exc}") from exc
    return out


def stylize_dataset(manifest: DatasetManifest, bank: Optional[StyleBank], mode: str, backend=None,
                    seed: int = 0, out_dir=None, assignment: Optional[dict] = None) -> DatasetManifest:
    """Stylize every sample of ``manifest`` and write the result as a new dataset under ``out_dir``."""
    if out_dir is None:
        raise StyleError("stylize_dataset needs an output directory")
    if mode == "advanced" and assignment is None and bank is not None:
        assignment = assign_classes(manifest.num_classes, len(bank.styles))
    samples = [manifest.load_sample(ref) for ref in manifest.samples]
    styled = stylize_samples(samples, bank, mode, backend, seed, assignment)
    result = write_dataset([s.sample for s in styled], out_dir, f"{manifest.name}-{mode}",
                           manifest.class_names, manifest.split)
    provenance = {s.sample.id: {"mode": s.mode, "styles": {str(k): v for k, v in s.styles_used.items()}}
                  for s in styled}
    (Path(out_dir) / "provenance.json").write_text(json.dumps(provenance, indent=2))
    return result

