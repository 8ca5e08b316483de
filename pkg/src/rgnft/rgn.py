"""Relative gradient norm (RGN) at filter, layer and model granularity."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch

from .model_graph import FilterLayout, ModelGraph, Role, filter_view


@dataclass
class FilterRgnMatrix:
    layer_name: str
    values: torch.Tensor  # (C_in, C_out)
    valid: torch.Tensor  # bool mask; False where weight sum is 0 but grad sum is not
    excluded: int = 0


@dataclass
class RgnProfile:
    entries: list[tuple[str, float, float]]  # (layer_name, depth_fraction, layer_rgn)
    model_rgn: float
    batches_used: int
    dataset_tag: str = ""
    excluded_filters: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)
    per_filter: dict[str, torch.Tensor] = field(default_factory=dict)

    def layer_values(self) -> dict[str, float]:
        return {name: v for name, _, v in self.entries}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_name", "depth_fraction", "layer_rgn"])
        for name, depth, value in self.entries:
            w.writerow([name, f"{depth:.6g}", f"{value:.17g}"])
        buf.write(f"# model_rgn={self.model_rgn:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dataset_tag: str = "") -> "RgnProfile":
        lines = text.splitlines()
        comment = [ln for ln in lines if ln.startswith("#")]
        rows = list(csv.reader([ln for ln in lines if ln and not ln.startswith("#")]))
        if not rows or rows[0] != ["layer_name", "depth_fraction", "layer_rgn"]:
            raise ValueError("RGN profile CSV lacks the expected header")
        entries = [(r[0], float(r[1]), float(r[2])) for r in rows[1:]]
        model = float(comment[-1].split("=", 1)[1]) if comment else _mean([e[2] for e in entries])
        return cls(entries, model, batches_used=0, dataset_tag=dataset_tag)


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def _filter_sums(weights, grads, layout: FilterLayout | None):
    if layout is None:
        raise ValueError("filter_rgn requires a filter layout")
    w = torch.as_tensor(weights, dtype=torch.float64)
    g = torch.as_tensor(grads, dtype=torch.float64)
    if w.shape != g.shape:
        raise ValueError(f"weight/grad shape mismatch: {tuple(w.shape)} vs {tuple(g.shape)}")
    if w.numel() != layout.numel:
        raise ValueError(f"{w.numel()} elements do not fit layout {layout}")
    w = w.reshape(layout.c_in, layout.c_out, layout.f)
    g = g.reshape(layout.c_in, layout.c_out, layout.f)
    return w.abs().sum(-1), g.abs().sum(-1)


def _ratio(gsum: torch.Tensor, wsum: torch.Tensor, name: str) -> FilterRgnMatrix:
    zero_w = wsum == 0
    valid = ~(zero_w & (gsum != 0))
    safe = torch.where(zero_w, torch.ones_like(wsum), wsum)
    vals = torch.where(zero_w, torch.zeros_like(gsum), gsum / safe)
    return FilterRgnMatrix(name, vals, valid, int((~valid).sum()))


def filter_rgn(weights, grads, layout: FilterLayout | None, layer_name: str = "") -> FilterRgnMatrix:
    """Per-filter ``sum|grad| / sum|weight|``.

    ``weights`` and ``grads`` are laid out as ``(C_in, C_out, F)`` (any shape
    with that many elements in that order).  Filters whose weights sum to
    zero get 0 when their gradient is also zero; otherwise they are flagged
    invalid and left out of :func:`layer_rgn`.
    """
    wsum, gsum = _filter_sums(weights, grads, layout)
    return _ratio(gsum, wsum, layer_name)


def layer_rgn(m: FilterRgnMatrix) -> float:
    if m.values.numel() == 0:
        raise ValueError("layer_rgn of an empty filter matrix")
    kept = m.values[m.valid]
    if kept.numel() == 0:
        return 0.0
    return float(kept.sum() / kept.numel())


def param_filter_rgn(weight: torch.Tensor, grad: torch.Tensor, layout: FilterLayout, name: str = "") -> FilterRgnMatrix:
    """filter_rgn for a torch-shaped parameter (e.g. ``(out, in, kh, kw)``)."""
    return filter_rgn(filter_view(weight, layout), filter_view(grad, layout),
                      FilterLayout(layout.c_in, layout.c_out, layout.f), name)


LossFn = Callable[[object, object], torch.Tensor]


def measure_rgn(model: ModelGraph, batches: Sequence, loss_fn: LossFn, num_batches: int, *,
                average: str = "ratio", include_1d: bool = False, dataset_tag: str = "") -> RgnProfile:
    """Batch-averaged RGN of the backbone, without updating the model.

    ``average="ratio"`` computes RGN per batch and averages the ratios;
    ``average="gradient"`` averages per-filter absolute gradient sums over
    batches first and then takes the ratio.
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if len(batches) < num_batches:
        raise ValueError(f"dataset has {len(batches)} batches, {num_batches} requested")
    if average not in ("ratio", "gradient"):
        raise ValueError(f"unknown averaging mode {average!r}")

    backbone = model.tensors({Role.BACKBONE})
    eligible = [p for p in backbone if p.rgn_eligible]
    measured = [p for p in backbone if p.rgn_eligible or include_1d or p.values.dim() > 1]
    depth = {p.name: (i + 1) / len(eligible) for i, p in enumerate(eligible)}

    layer_acc = {p.name: 0.0 for p in measured}
    filt_acc = {p.name: torch.zeros(p.filter_layout.c_in, p.filter_layout.c_out, dtype=torch.float64) for p in measured}
    gsum_acc = {p.name: torch.zeros_like(filt_acc[p.name]) for p in measured}
    excluded = 0

    with model.measurement_grads({Role.BACKBONE}):
        for b in range(num_batches):
            inputs, targets = batches[b]
            model.zero_grad()
            with torch.enable_grad():
                loss = loss_fn(model(inputs), targets)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at batch {b}")
                if loss.requires_grad:
                    loss.backward()
            for p in measured:
                grad = p.grad if p.grad is not None else torch.zeros_like(p.values)
                m = param_filter_rgn(p.values, grad, p.filter_layout, p.name)
                if average == "ratio":
                    layer_acc[p.name] += layer_rgn(m)
                    filt_acc[p.name] += m.values
                    if p.rgn_eligible:
                        excluded += m.excluded
                else:
                    gsum_acc[p.name] += filter_view(grad.detach(), p.filter_layout).abs().sum(-1)
        model.zero_grad()

    per_tensor: dict[str, float] = {}
    per_filter: dict[str, torch.Tensor] = {}
    for p in measured:
        if average == "ratio":
            per_tensor[p.name] = layer_acc[p.name] / num_batches
            per_filter[p.name] = filt_acc[p.name] / num_batches
        else:
            wsum = filter_view(p.values.detach(), p.filter_layout).abs().sum(-1)
            m = _ratio(gsum_acc[p.name] / num_batches, wsum, p.name)
            per_tensor[p.name] = layer_rgn(m)
            per_filter[p.name] = m.values
            if p.rgn_eligible:
                excluded += m.excluded

    entries = [(p.name, depth[p.name], per_tensor[p.name]) for p in eligible]
    return RgnProfile(entries, _mean([e[2] for e in entries]), num_batches, dataset_tag,
                      excluded, per_tensor, per_filter)


def rgn_weights(profile: RgnProfile, names: Sequence[str] | None = None) -> dict[str, float]:
    src: Mapping[str, float] = profile.per_tensor or profile.layer_values()
    if names is None:
        return dict(src)
    missing = [n for n in names if n not in src]
    if missing:
        raise KeyError(f"RGN profile lacks tensors: {missing}")
    return {n: src[n] for n in names}
