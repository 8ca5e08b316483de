"""Desk-scale testbed: staged conv backbone, single-object box+class task, domain shifts.

Images are procedurally rendered shapes (square, disk, triangle, plus).  The
in-distribution (ID) rendering colours each class with a class-typical hue, a
shortcut that fine-tuning can latch onto; the "pre-training" distribution
uses random colours and random shifts so that a pre-trained backbone carries
shape features that transfer across domains.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_tensors
from .model_graph import ModelGraph, Role, StageMap
from .se_block import GateForm, SEBlock, SeInsertionPlan, insert_se

NUM_CLASSES = 4
CLASS_NAMES = ("square", "disk", "triangle", "plus")
# class-typical ID hues
_ID_PALETTE = np.array([[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.25, 0.35, 0.9], [0.9, 0.8, 0.15]])


def substream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def torch_gen(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(substream_seed(seed, name))


# ----------------------------------------------------------------------------
# domain shifts


class ShiftKind(str, Enum):
    COLOR_REMAP = "color_remap"
    NOISE = "additive_noise"
    BLUR = "blur"
    CONTRAST = "contrast"


@dataclass(frozen=True)
class DomainShiftSpec:
    kind: ShiftKind = ShiftKind.COLOR_REMAP
    severity: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if not 0 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def tag(self) -> str:
        return "id" if self.severity == 0 else f"{self.kind.value}@{self.severity}"


ID = DomainShiftSpec(ShiftKind.COLOR_REMAP, 0)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2.5 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(images: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    pad = np.pad(images, ((0, 0), (0, 0), (r, r), (0, 0)), mode="edge")
    out = sum(k[i] * pad[:, :, i:i + images.shape[2], :] for i in range(len(k)))
    pad = np.pad(out, ((0, 0), (0, 0), (0, 0), (r, r)), mode="edge")
    return sum(k[i] * pad[:, :, :, i:i + images.shape[3]] for i in range(len(k)))


def apply_shift(images: np.ndarray, shift: DomainShiftSpec) -> np.ndarray:
    """Apply a domain shift to (N, 3, H, W) images in [0, 1].  Severity 0 is the identity."""
    s = int(shift.severity)
    if s == 0:
        return images
    if shift.kind is ShiftKind.COLOR_REMAP:
        a = s / 5.0
        out = (1 - a) * images + a * images[:, [2, 0, 1]]
    elif shift.kind is ShiftKind.NOISE:
        noise = rng_for(shift.seed, f"noise/{s}").normal(0.0, 0.07 * s, size=images.shape)
        out = images + noise
    elif shift.kind is ShiftKind.BLUR:
        out = _blur(images, 0.6 * (s + 1))
    else:
        mean = images.mean(axis=(1, 2, 3), keepdims=True)
        out = mean + (images - mean) * (1.0 - 0.17 * s)
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------------------------
# dataset


@dataclass
class ToyDataset:
    images: torch.Tensor  # (N, 3, H, W) float64
    labels: torch.Tensor  # (N,) int64
    boxes: torch.Tensor  # (N, 4) float64, normalized (x_min, y_min, x_max, y_max)
    tag: str = "id"

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, idx) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.images[idx], (self.labels[idx], self.boxes[idx])

    def batches(self, batch_size: int) -> list:
        n = len(self)
        return [self.batch(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]

    def dump(self, directory) -> Path:
        """Write one binary PPM per sample plus ``targets.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "targets.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "class_id", "x_min", "y_min", "x_max", "y_max"])
            for i in range(len(self)):
                name = f"{i:06d}.ppm"
                img = (self.images[i].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
                h, wd = img.shape[:2]
                (directory / name).write_bytes(f"P6 {wd} {h} 255\n".encode() + img.tobytes())
                w.writerow([name, int(self.labels[i]), *(f"{v:.9g}" for v in self.boxes[i].tolist())])
        return directory

    @classmethod
    def load_dump(cls, directory, tag: str = "dump") -> "ToyDataset":
        directory = Path(directory)
        imgs, labels, boxes = [], [], []
        with open(directory / "targets.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                raw = (directory / row["file"]).read_bytes()
                header, data = raw.split(b"\n", 1)
                _, wd, h, _ = header.split()
                arr = np.frombuffer(data, dtype=np.uint8).reshape(int(h), int(wd), 3)
                imgs.append(arr.transpose(2, 0, 1) / 255.0)
                labels.append(int(row["class_id"]))
                boxes.append([float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")])
        return cls(torch.tensor(np.stack(imgs)), torch.tensor(labels), torch.tensor(boxes, dtype=torch.float64), tag)


def _shape_mask(cls_id: int, cx: float, cy: float, half: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if cls_id == 0:
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if cls_id == 1:
        return dx * dx + dy * dy <= half * half
    if cls_id == 2:
        # apex up; width grows linearly with depth
        t = (dy + half) / (2 * half)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= half * t)
    arm = half / 2.6
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))


def _render(labels, centers, halves, fg, bg, texture, size) -> tuple[np.ndarray, np.ndarray]:
    n = len(labels)
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, 3, size, size))
    boxes = np.empty((n, 4))
    for i in range(n):
        cx, cy = centers[i]
        m = _shape_mask(int(labels[i]), cx, cy, halves[i], yy, xx)
        img = bg[i][:, None, None] * (1 - m) + fg[i][:, None, None] * m
        images[i] = np.clip(img + texture[i], 0.0, 1.0)
        ys, xs = np.nonzero(m)
        boxes[i] = [xs.min() / size, ys.min() / size, (xs.max() + 1) / size, (ys.max() + 1) / size]
    return images, boxes


def make_dataset(n: int, shift: DomainShiftSpec = ID, seed: int = 0, *, image_size: int = 16,
                 domain: str = "id", class_color_prob: float = 0.9) -> ToyDataset:
    """Deterministic dataset.  Targets depend only on ``seed``; shifts only change pixels.

    ``domain="id"`` uses class-typical colours (with probability
    ``class_color_prob``); ``domain="source"`` draws colours at random and
    additionally applies a random shift per sample (the pre-training mix).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_for(seed, f"targets/{domain}")
    labels = rng.integers(0, NUM_CLASSES, size=n)
    halves = rng.uniform(0.22, 0.34, size=n) * image_size
    centers = np.stack([rng.uniform(h + 0.5, image_size - h - 0.5, size=2) for h in halves])
    rrng = rng_for(seed, f"render/{domain}")
    if domain == "id":
        typical = rrng.random(n) < class_color_prob
        other = rrng.integers(0, NUM_CLASSES, size=n)
        fg = _ID_PALETTE[np.where(typical, labels, other)] + rrng.normal(0, 0.05, size=(n, 3))
        bg = np.repeat(rrng.uniform(0.35, 0.55, size=(n, 1)), 3, axis=1) + rrng.normal(0, 0.03, size=(n, 3))
    elif domain == "source":
        fg = rrng.uniform(0.0, 1.0, size=(n, 3))
        bg = rrng.uniform(0.0, 1.0, size=(n, 3))
        # keep the object visible against its background
        close = np.abs(fg - bg).sum(1) < 0.6
        fg[close] = 1.0 - bg[close]
    else:
        raise ValueError(f"unknown domain {domain!r}")
    texture = rrng.normal(0, 0.03, size=(n, 3, image_size, image_size))
    images, boxes = _render(labels, centers, halves, np.clip(fg, 0, 1), np.clip(bg, 0, 1), texture, image_size)
    if domain == "source":
        kinds = list(ShiftKind)
        kind_idx = rrng.integers(0, len(kinds), size=n)
        sev = rrng.integers(0, 6, size=n)
        for i in range(n):
            sh = DomainShiftSpec(kinds[kind_idx[i]], int(sev[i]), seed=substream_seed(seed, f"src-shift/{i}"))
            images[i:i + 1] = apply_shift(images[i:i + 1], sh)
    images = apply_shift(images, shift)
    return ToyDataset(torch.tensor(images), torch.tensor(labels, dtype=torch.long),
                      torch.tensor(boxes), shift.tag if domain == "id" else domain)


# ----------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ToyBackboneSpec:
    widths: tuple[int, ...] = (8, 16, 24, 32)
    blocks_per_stage: int = 1
    builtin_se: bool = False
    se_reduction: int = 4
    image_size: int = 16
    decoder_width: int = 16
    decoder_mult: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "ToyBackboneSpec":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(int(w) for w in d["widths"])
        return cls(**d)


class AffineNorm(nn.Module):
    """Per-sample group standardization followed by a per-channel affine map.

    Uses no batch statistics, so frozen and trainable modes behave the same.
    """

    param_kind = "norm"

    def __init__(self, channels: int, groups: int = 4):
        super().__init__()
        self.groups = math.gcd(channels, groups)
        self.weight = nn.Parameter(torch.ones(channels, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    def forward(self, x):
        return F.group_norm(x, self.groups, self.weight, self.bias, eps=1e-5)


def _conv(cin, cout, k=3, stride=1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False, dtype=torch.float64)


class ResidualUnit(nn.Module):
    """conv-norm-relu-conv-norm branch with projection shortcut; optional built-in SE (residual form)."""

    def __init__(self, cin, cout, stride, builtin_se=False, se_reduction=4):
        super().__init__()
        self.conv1 = _conv(cin, cout, 3, stride)
        self.norm1 = AffineNorm(cout)
        self.conv2 = _conv(cout, cout, 3, 1)
        self.norm2 = AffineNorm(cout)
        self.proj = _conv(cin, cout, 1, stride) if (cin != cout or stride != 1) else None
        self.se = SEBlock(cout, se_reduction, GateForm.RESIDUAL, near_identity=False) if builtin_se else None

    def branch(self, x):
        return self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))

    def forward(self, x):
        sc = x if self.proj is None else self.proj(x)
        r = self.branch(x)
        out = self.se(sc, r) if self.se is not None else sc + r
        return F.relu(out)


class Stem(nn.Module):
    def __init__(self, cout):
        super().__init__()
        self.conv = _conv(3, cout, 3, 1)
        self.norm = AffineNorm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ToyBackbone(nn.Module):
    def __init__(self, spec: ToyBackboneSpec):
        super().__init__()
        w = spec.widths
        stages = {"stage1": Stem(w[0])}
        for s in range(1, len(w)):
            blocks = [ResidualUnit(w[s - 1] if b == 0 else w[s], w[s], 2 if b == 0 else 1,
                                   spec.builtin_se, spec.se_reduction) for b in range(spec.blocks_per_stage)]
            stages[f"stage{s + 1}"] = nn.Sequential(*blocks)
        self.stages = nn.ModuleDict(stages)


class ToyDecoder(nn.Module):
    """Two-level pyramid on the last two stages, then class and box heads."""

    def __init__(self, spec: ToyBackboneSpec):
        super().__init__()
        d = spec.decoder_width
        hidden = max(4, int(round(4 * d * spec.decoder_mult)))
        self.lateral_hi = nn.Conv2d(spec.widths[-1], d, 1, dtype=torch.float64)
        self.lateral_lo = nn.Conv2d(spec.widths[-2], d, 1, dtype=torch.float64)
        self.smooth = nn.Conv2d(d, d, 3, padding=1, dtype=torch.float64)
        side = spec.image_size // 2 ** (len(spec.widths) - 2)
        self.fc = nn.Linear(d * side * side, hidden, dtype=torch.float64)
        self.cls = nn.Linear(hidden, NUM_CLASSES, dtype=torch.float64)
        self.box = nn.Linear(hidden, 4, dtype=torch.float64)

    def forward(self, lo, hi):
        top = self.lateral_hi(hi)
        merged = self.lateral_lo(lo) + F.interpolate(top, size=lo.shape[-2:], mode="nearest")
        h = F.relu(self.smooth(merged)).flatten(1)
        h = F.relu(self.fc(h))
        return self.cls(h), torch.sigmoid(self.box(h))


class ToyDetector(nn.Module):
    def __init__(self, spec: ToyBackboneSpec):
        super().__init__()
        self.spec = spec
        self.backbone = ToyBackbone(spec)
        self.decoder = ToyDecoder(spec)
        self.se = nn.ModuleDict()

    def stage_channels(self) -> dict[int, int]:
        return {i + 1: w for i, w in enumerate(self.spec.widths)}

    def has_gate(self, stage_id: int) -> bool:
        return f"stage{stage_id}" in self.se

    def attach_gate(self, stage_id: int, block: nn.Module) -> None:
        self.se[f"stage{stage_id}"] = block

    def features(self, x) -> list[torch.Tensor]:
        feats = []
        for name, stage in self.backbone.stages.items():
            x = stage(x)
            if name in self.se:
                x = self.se[name](x)
            feats.append(x)
        return feats

    def forward(self, x):
        feats = self.features(x)
        return self.decoder(feats[-2], feats[-1])


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    """He-normal conv/linear weights, unit norms (half-scale on residual branch ends), zero biases."""
    with torch.no_grad():
        for mod_name, mod in module.named_modules():
            if isinstance(mod, SEBlock):
                continue
            if isinstance(mod, AffineNorm):
                mod.weight.fill_(0.5 if mod_name.endswith("norm2") else 1.0)
                mod.bias.zero_()
            elif isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen, dtype=mod.weight.dtype)
                                 * math.sqrt(2.0 / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()


def stage_map_for(spec: ToyBackboneSpec) -> StageMap:
    stages = tuple((i + 1, f"backbone.stages.stage{i + 1}.") for i in range(len(spec.widths)))
    # stem conv + (conv1, conv2, projection) per residual unit; projections only on the first block
    n_layers = 1 + (len(spec.widths) - 1) * (2 * spec.blocks_per_stage + 1)
    return StageMap(stages, n_layers)


ROLE_PREFIXES = {"backbone.": Role.BACKBONE, "decoder.": Role.DECODER, "se.": Role.SE_BLOCK}


def wrap(module: ToyDetector) -> ModelGraph:
    return ModelGraph(module, ROLE_PREFIXES, stage_map_for(module.spec))


def init_decoder(graph: ModelGraph, seed: int) -> None:
    """Fresh decoder weights from the ``init`` substream of ``seed``."""
    module: ToyDetector = graph.module
    module.decoder = ToyDecoder(module.spec)
    gen = torch_gen(seed, "init/decoder")
    with torch.no_grad():
        for name, p in module.decoder.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * math.sqrt(1.0 / fan_in))
    graph.refresh()


# ----------------------------------------------------------------------------
# loss and metrics


def toy_task_loss(predictions, targets) -> torch.Tensor:
    """Mean cross-entropy plus mean per-sample L1 box error."""
    logits, boxes = predictions
    labels, true_boxes = targets
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"class id out of range [0, {logits.shape[1]})")
    if logits.shape[0] != labels.shape[0] or boxes.shape != true_boxes.shape:
        raise ValueError("prediction/target batch shapes disagree")
    ce = F.cross_entropy(logits, labels)
    l1 = (boxes - true_boxes).abs().sum(dim=1).mean()
    return ce + l1


def zero_loss(predictions, targets) -> torch.Tensor:
    logits, boxes = predictions
    return 0.0 * (logits.sum() + boxes.sum())


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of (N, 4) xyxy boxes; degenerate boxes have zero area."""
    ax0, ax1 = torch.minimum(a[:, 0], a[:, 2]), torch.maximum(a[:, 0], a[:, 2])
    ay0, ay1 = torch.minimum(a[:, 1], a[:, 3]), torch.maximum(a[:, 1], a[:, 3])
    iw = (torch.minimum(ax1, b[:, 2]) - torch.maximum(ax0, b[:, 0])).clamp(min=0)
    ih = (torch.minimum(ay1, b[:, 3]) - torch.maximum(ay0, b[:, 1])).clamp(min=0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-300), torch.zeros_like(inter))


@dataclass(frozen=True)
class DomainMetric:
    accuracy: float
    mean_iou: float
    ap_proxy: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean_iou": self.mean_iou, "ap_proxy": self.ap_proxy}


def score_predictions(logits: torch.Tensor, boxes: torch.Tensor, labels: torch.Tensor,
                      true_boxes: torch.Tensor, iou_threshold: float = 0.5) -> DomainMetric:
    correct = logits.argmax(dim=1) == labels
    iou = box_iou(boxes, true_boxes)
    hit = correct & (iou >= iou_threshold)
    return DomainMetric(float(correct.double().mean()), float(iou.mean()), float(hit.double().mean()))


def predict(model, dataset: ToyDataset, batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    logits, boxes = [], []
    with torch.no_grad():
        for x, _ in dataset.batches(batch_size):
            lg, bx = model(x)
            logits.append(lg)
            boxes.append(bx)
    return torch.cat(logits), torch.cat(boxes)


def evaluate(model, dataset: ToyDataset, batch_size: int = 256) -> DomainMetric:
    """Class accuracy, mean box IoU and AP-proxy (correct class and IoU >= 0.5)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    logits, boxes = predict(model, dataset, batch_size)
    return score_predictions(logits, boxes, dataset.labels, dataset.boxes)


# ----------------------------------------------------------------------------
# pre-training and model factory

_PRETRAIN_CACHE: dict = {}


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1200
    n_samples: int = 2048
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4


def pretrained_backbone(spec: ToyBackboneSpec, seed: int, cfg: PretrainConfig = PretrainConfig()) -> dict[str, np.ndarray]:
    """Backbone weights trained on the broad ``source`` mix (cached per process)."""
    key = (spec, int(seed), cfg)
    if key not in _PRETRAIN_CACHE:
        module = ToyDetector(spec)
        _init_module(module, torch_gen(seed, "init/pretrain"))
        data = make_dataset(cfg.n_samples, ID, substream_seed(seed, "pretrain-data"),
                            image_size=spec.image_size, domain="source")
        opt = torch.optim.SGD(module.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        order_rng = rng_for(seed, "pretrain-order")
        perm = np.array([], dtype=np.int64)
        for step in range(cfg.steps):
            if len(perm) < cfg.batch_size:
                perm = np.concatenate([perm, order_rng.permutation(len(data))])
            idx, perm = perm[:cfg.batch_size], perm[cfg.batch_size:]
            x, t = data.batch(idx)
            for g in opt.param_groups:
                g["lr"] = cfg.lr * (0.1 if step >= 0.75 * cfg.steps else 1.0)
            opt.zero_grad()
            toy_task_loss(module(x), t).backward()
            opt.step()
        _PRETRAIN_CACHE[key] = {n: p.detach().numpy().copy() for n, p in module.backbone.named_parameters()}
    return {k: v.copy() for k, v in _PRETRAIN_CACHE[key].items()}


def build_model(spec: ToyBackboneSpec = ToyBackboneSpec(), seed: int = 0, *, pretrained: bool = True,
                pretrain: PretrainConfig = PretrainConfig()) -> ModelGraph:
    """Toy detector with a (pre-trained) backbone and a fresh decoder drawn from ``seed``."""
    module = ToyDetector(spec)
    _init_module(module, torch_gen(seed, "init/backbone"))
    if pretrained:
        weights = pretrained_backbone(spec, spec.seed, pretrain)
        with torch.no_grad():
            for n, p in module.backbone.named_parameters():
                p.copy_(torch.from_numpy(weights[n]))
    graph = wrap(module)
    init_decoder(graph, seed)
    return graph


def default_ft_freeze_prefixes(graph: ModelGraph, shallow_stages: Sequence[int] = (1, 2)) -> tuple[str, ...]:
    return tuple(graph.stage_map.prefix(s) for s in shallow_stages)


@dataclass(frozen=True)
class BenchConfig:
    """Dataset sizes and shift grid for one synthetic-bench job."""

    n_train: int = 512
    n_eval: int = 1024
    image_size: int = 16
    class_color_prob: float = 0.9
    severity: int = 3
    shift_kinds: tuple[str, ...] = tuple(k.value for k in ShiftKind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift_kinds"] = list(self.shift_kinds)
        return d

    @classmethod
    def from_dict(cls, d) -> "BenchConfig":
        d = dict(d)
        if "shift_kinds" in d:
            d["shift_kinds"] = tuple(d["shift_kinds"])
        return cls(**d)


def make_bench(cfg: BenchConfig = BenchConfig(), seed: int = 0) -> tuple[ToyDataset, dict[str, ToyDataset]]:
    """Training set plus ``{"id": ..., "<kind>": ...}`` eval sets, all drawn from ``seed`` substreams."""
    kw = dict(image_size=cfg.image_size, class_color_prob=cfg.class_color_prob)
    train = make_dataset(cfg.n_train, ID, substream_seed(seed, "dataset/train"), **kw)
    eval_seed = substream_seed(seed, "dataset/eval")
    evals = {"id": make_dataset(cfg.n_eval, ID, eval_seed, **kw)}
    for kind in cfg.shift_kinds:
        shift = DomainShiftSpec(ShiftKind(kind), cfg.severity, substream_seed(seed, f"dataset/shift/{kind}"))
        evals[ShiftKind(kind).value] = make_dataset(cfg.n_eval, shift, eval_seed, **kw)
    return train, evals


def model_from_checkpoint(path, spec: ToyBackboneSpec | None = None, seed: int = 0) -> tuple[ModelGraph, dict]:
    """Rebuild a toy detector from a checkpoint written by this package.

    SE blocks listed in the checkpoint's ``se_plan`` are re-inserted before the
    values are loaded.  A backbone-only checkpoint gets a fresh decoder from ``seed``.
    """
    arrays, meta = load_tensors(path)
    if "backbone_spec" in meta:
        spec = ToyBackboneSpec.from_dict(meta["backbone_spec"])
    elif spec is None:
        raise ValueError(f"{path} carries no backbone_spec and none was given")
    graph = wrap(ToyDetector(spec))
    init_decoder(graph, seed)
    plan = meta.get("se_plan")
    if plan and plan.get("entries"):
        insert_se(graph, SeInsertionPlan.from_dict(plan))
    missing = [n for n in graph.params if n not in arrays]
    if any(graph[n].role is not Role.DECODER for n in missing):
        raise KeyError(f"checkpoint {path} lacks parameters: {[n for n in missing if graph[n].role is not Role.DECODER]}")
    graph.load_state_tensors(arrays, strict=not missing)
    return graph, meta
