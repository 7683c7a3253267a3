"""IceHrNet: HRNet backbone + optional ASPP + DeepLabV3+-style decoder or FCN head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (123.675, 116.28, 103.53)
IMAGENET_STD = (58.395, 57.12, 57.375)


class ConfigError(ValueError):
    pass


@dataclass
class SegConfig:
    num_classes: int = 2
    branch_widths: tuple = (48, 96, 192, 384)
    stage_modules: tuple = (1, 1, 4, 3)
    stage_blocks: tuple = (4, 4, 4, 4)
    stem_channels: int = 64
    layer1_planes: int = 64
    head: str = "decoder"
    use_aspp: bool = True
    low_level: str = "conv1"
    aspp_out_channels: int = 256
    aspp_rates: tuple = (1, 6, 12, 18)
    low_level_proj: int = 48
    decoder_channels: int = 256
    norm_mean: tuple = IMAGENET_MEAN
    norm_std: tuple = IMAGENET_STD

    def __post_init__(self):
        for name in ("branch_widths", "stage_modules", "stage_blocks", "aspp_rates", "norm_mean", "norm_std"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("branch_widths", "stage_modules", "stage_blocks"):
            v = getattr(self, name)
            if len(v) != 4 or any(int(x) <= 0 for x in v):
                raise ConfigError(f"{name} must be 4 positive integers, got {v}")
        if min(self.stem_channels, self.layer1_planes, self.aspp_out_channels,
               self.low_level_proj, self.decoder_channels) <= 0:
            raise ConfigError("channel widths must be positive")
        if self.head not in ("decoder", "fcn"):
            raise ConfigError(f"head must be 'decoder' or 'fcn', got {self.head!r}")
        if self.low_level not in ("conv1", "conv2"):
            raise ConfigError(f"low_level must be 'conv1' or 'conv2', got {self.low_level!r}")
        if self.head == "fcn" and self.use_aspp:
            raise ConfigError("the FCN baseline head is wired without ASPP")
        if not self.aspp_rates or any(r <= 0 for r in self.aspp_rates):
            raise ConfigError("aspp_rates must be positive")

    @property
    def backbone_channels(self) -> int:
        return int(sum(self.branch_widths))

    @classmethod
    def w48(cls, num_classes: int = 4, **kw) -> "SegConfig":
        return cls(num_classes=num_classes, **kw)

    @classmethod
    def toy(cls, num_classes: int = 2, **kw) -> "SegConfig":
        base = dict(branch_widths=(8, 16, 32, 64), stage_modules=(1, 1, 1, 1), stage_blocks=(1, 1, 1, 1),
                    stem_channels=64, layer1_planes=8, aspp_out_channels=32, aspp_rates=(1, 2, 4, 6),
                    low_level_proj=16, decoder_channels=32)
        base.update(kw)
        return cls(num_classes=num_classes, **base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SegConfig fields {sorted(unknown)}")
        return cls(**d)


def ablation_variant(tag: str, base: SegConfig) -> SegConfig:
    """Ablation wiring: a=FCN, b=dec+conv2, c=dec+conv2+ASPP, d=dec+conv1, e=dec+conv1+ASPP."""
    table = {
        "a": dict(head="fcn", use_aspp=False, low_level="conv1"),
        "b": dict(head="decoder", use_aspp=False, low_level="conv2"),
        "c": dict(head="decoder", use_aspp=True, low_level="conv2"),
        "d": dict(head="decoder", use_aspp=False, low_level="conv1"),
        "e": dict(head="decoder", use_aspp=True, low_level="conv1"),
    }
    if tag not in table:
        raise ConfigError(f"unknown ablation tag {tag!r}; expected one of {sorted(table)}")
    return replace(base, **table[tag])


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1, relu=True):
    layers = [nn.Conv2d(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation, bias=False),
              nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = conv_bn_relu(cin, cout)
        self.conv2 = conv_bn_relu(cout, cout, relu=False)
        self.down = None if cin == cout else conv_bn_relu(cin, cout, k=1, relu=False)

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        return F.relu(self.conv2(self.conv1(x)) + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes):
        super().__init__()
        cout = planes * self.expansion
        self.body = nn.Sequential(
            conv_bn_relu(cin, planes, k=1),
            conv_bn_relu(planes, planes),
            conv_bn_relu(planes, cout, k=1, relu=False),
        )
        self.down = None if cin == cout else conv_bn_relu(cin, cout, k=1, relu=False)

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        return F.relu(self.body(x) + identity)


class HighResolutionModule(nn.Module):
    """Parallel branches of basic blocks followed by all-to-all multi-resolution fusion."""

    def __init__(self, widths, num_blocks):
        super().__init__()
        n = len(widths)
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(w, w) for _ in range(num_blocks)]) for w in widths
        )
        self.fuse = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j == i:
                    row.append(nn.Identity())
                elif j > i:
                    row.append(conv_bn_relu(widths[j], widths[i], k=1, relu=False))
                else:
                    steps = []
                    for k in range(i - j):
                        last = k == i - j - 1
                        steps.append(conv_bn_relu(widths[j], widths[i] if last else widths[j],
                                                  stride=2, relu=not last))
                    row.append(nn.Sequential(*steps))
            self.fuse.append(row)

    def forward(self, xs):
        xs = [b(x) for b, x in zip(self.branches, xs)]
        out = []
        for i, row in enumerate(self.fuse):
            size = xs[i].shape[-2:]
            acc = xs[i]
            for j, f in enumerate(row):
                if j == i:
                    continue
                y = f(xs[j])
                if j > i:
                    y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
                acc = acc + y
            out.append(F.relu(acc))
        return out


class Transition(nn.Module):
    def __init__(self, prev, new):
        super().__init__()
        self.layers = nn.ModuleList()
        for i, w in enumerate(new):
            if i < len(prev):
                self.layers.append(nn.Identity() if prev[i] == w else conv_bn_relu(prev[i], w))
            else:
                self.layers.append(conv_bn_relu(prev[-1], w, stride=2))
        self.num_prev = len(prev)

    def forward(self, xs):
        return [layer(xs[i] if i < self.num_prev else xs[-1]) for i, layer in enumerate(self.layers)]


class HRNetBackbone(nn.Module):
    """Layer1 (bottlenecks), three transitions, stages 2-4, concatenation at 1/4 scale."""

    def __init__(self, cfg: SegConfig):
        super().__init__()
        w = cfg.branch_widths
        self.layer1 = nn.Sequential(*[
            Bottleneck(cfg.stem_channels if k == 0 else cfg.layer1_planes * 4, cfg.layer1_planes)
            for k in range(cfg.stage_blocks[0])
        ])
        c1 = cfg.layer1_planes * Bottleneck.expansion
        self.transitions = nn.ModuleList([
            Transition([c1], w[:2]),
            Transition(list(w[:2]), w[:3]),
            Transition(list(w[:3]), w[:4]),
        ])
        self.stages = nn.ModuleList(
            nn.Sequential(*[HighResolutionModule(w[:n], cfg.stage_blocks[n - 1])
                            for _ in range(cfg.stage_modules[n - 1])])
            for n in (2, 3, 4)
        )

    def forward(self, x):
        xs = [self.layer1(x)]
        for transition, stage in zip(self.transitions, self.stages):
            xs = transition(xs)
            for module in stage:
                xs = module(xs)
        size = xs[0].shape[-2:]
        ups = [xs[0]] + [F.interpolate(y, size=size, mode="bilinear", align_corners=False) for y in xs[1:]]
        return torch.cat(ups, dim=1)


class ASPP(nn.Module):
    """Dilated 3x3 branches (1x1 at rate 1) plus image pooling, projected to ``out_channels``."""

    def __init__(self, cin, out_channels=256, rates=(1, 6, 12, 18)):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            conv_bn_relu(cin, out_channels, k=1) if r == 1 else conv_bn_relu(cin, out_channels, dilation=r)
            for r in self.rates
        )
        # no norm on the pooled branch: a 1x1 map has no spatial statistics
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, out_channels, 1), nn.ReLU())
        self.project = conv_bn_relu(out_channels * (len(self.rates) + 1), out_channels, k=1)

    def branch_outputs(self, x):
        h, w = x.shape[-2:]
        for r in self.rates:
            if r > 1 and r >= max(h, w):
                raise ValueError(f"ASPP rate {r} >= feature extent {(h, w)}: branch would only see padding")
        outs = [b(x) for b in self.branches]
        outs.append(F.interpolate(self.pool(x), size=(h, w), mode="bilinear", align_corners=False))
        return outs

    def forward(self, x):
        return self.project(torch.cat(self.branch_outputs(x), dim=1))


class DecoderHead(nn.Module):
    def __init__(self, deep_channels, low_channels, num_classes, proj=48, width=256):
        super().__init__()
        self.low_proj = conv_bn_relu(low_channels, proj, k=1)
        self.fuse = nn.Sequential(conv_bn_relu(deep_channels + proj, width), conv_bn_relu(width, width))
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, deep, low, out_size):
        deep = F.interpolate(deep, size=low.shape[-2:], mode="bilinear", align_corners=False)
        if deep.shape[-2:] != low.shape[-2:]:
            raise ValueError("decoder resolution mismatch")
        x = self.fuse(torch.cat([deep, self.low_proj(low)], dim=1))
        return F.interpolate(self.classifier(x), size=out_size, mode="bilinear", align_corners=False)


class FCNHead(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.conv = conv_bn_relu(channels, channels, k=1)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x, out_size):
        return F.interpolate(self.classifier(self.conv(x)), size=out_size, mode="bilinear", align_corners=False)


class IceHrNet(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.stem_channels
        self.conv1 = conv_bn_relu(3, s, stride=2)
        self.conv2 = conv_bn_relu(s, s, stride=2)
        self.backbone = HRNetBackbone(cfg)
        deep = cfg.backbone_channels
        self.aspp = None
        if cfg.use_aspp:
            self.aspp = ASPP(deep, cfg.aspp_out_channels, cfg.aspp_rates)
            deep = cfg.aspp_out_channels
        if cfg.head == "fcn":
            self.head = FCNHead(deep, cfg.num_classes)
        else:
            self.head = DecoderHead(deep, s, cfg.num_classes, cfg.low_level_proj, cfg.decoder_channels)

    @staticmethod
    def _check_input(x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"input height and width must be multiples of 4, got {tuple(x.shape[2:])}")

    def features(self, x) -> dict:
        """Intermediate maps: conv1 (1/2), conv2 (1/4), backbone (1/4), aspp (1/4, if enabled)."""
        self._check_input(x)
        c1 = self.conv1(x)
        c2 = self.conv2(c1)
        bb = self.backbone(c2)
        out = {"conv1": c1, "conv2": c2, "backbone": bb}
        if self.aspp is not None:
            out["aspp"] = self.aspp(bb)
        return out

    def forward(self, x):
        f = self.features(x)
        deep = f.get("aspp", f["backbone"])
        size = x.shape[-2:]
        if self.cfg.head == "fcn":
            return self.head(deep, size)
        return self.head(deep, f[self.cfg.low_level], size)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init: conv weights ~ N(0, 2/fan_out), conv biases 0, norm scale 1 / offset 0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_out))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def build_model(config: SegConfig, seed: int = 0) -> IceHrNet:
    model = IceHrNet(config)
    init_parameters(model, seed)
    model.seed = int(seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def normalize(images, cfg: SegConfig) -> torch.Tensor:
    """uint8 B x H x W x 3 (or H x W x 3) images -> normalized float B x 3 x H x W tensor."""
    x = torch.as_tensor(np.asarray(images))
    if x.ndim == 3:
        x = x[None]
    x = x.permute(0, 3, 1, 2).float()
    mean = torch.tensor(cfg.norm_mean).view(1, 3, 1, 1)
    std = torch.tensor(cfg.norm_std).view(1, 3, 1, 1)
    return (x - mean) / std


def predict(model: IceHrNet, image: np.ndarray) -> np.ndarray:
    """Whole-image argmax prediction for one uint8 H x W x 3 image."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(normalize(image, model.cfg))
    model.train(was_training)
    return logits[0].argmax(0).numpy().astype(np.uint8)


def save_checkpoint(model: IceHrNet, path, iteration: int = 0, extra: Optional[dict] = None) -> None:
    """Binary state dict at ``path`` plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {
        "seg_config": model.cfg.to_dict(),
        "seed": getattr(model, "seed", None),
        "normalization": {"mean": list(model.cfg.norm_mean), "std": list(model.cfg.norm_std)},
        "iteration": int(iteration),
        "parameter_count": parameter_count(model),
    }
    if extra:
        meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> tuple:
    """Return (model, sidecar metadata)."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = IceHrNet(SegConfig.from_dict(meta["seg_config"]))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.seed = meta.get("seed")
    model.eval()
    return model, meta


def finite_difference_check(model: nn.Module, x: torch.Tensor, n_params: int = 100, seed: int = 0,
                            step: float = 1e-6, floor: float = 1e-6) -> np.ndarray:
    """Relative errors between autograd and central differences of mean(logits).

    Samples ``n_params`` scalar parameters uniformly; runs in float64, eval mode.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    model = model.double().eval()
    x = x.double()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    model.zero_grad()
    model(x).mean().backward()
    errors = []
    with torch.no_grad():
        for k in flat:
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            p, j = params[i], int(k - offsets[i])
            analytic = p.grad.view(-1)[j].item()
            orig = p.view(-1)[j].item()
            p.view(-1)[j] = orig + step
            up = model(x).mean().item()
            p.view(-1)[j] = orig - step
            down = model(x).mean().item()
            p.view(-1)[j] = orig
            numeric = (up - down) / (2 * step)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return np.array(errors)
