"""Squeeze-excitation gates: forward, gradient-path decomposition, insertion, diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .model_graph import ModelGraph, Role


class GateForm(str, Enum):
    RESIDUAL = "residual"
    PURE = "pure_gating"


def hidden_width(channels: int, reduction: int) -> int:
    if reduction < 1:
        raise ValueError("reduction ratio must be >= 1")
    return max(1, channels // reduction)


@dataclass
class SeBlockParams:
    reduce_weight: torch.Tensor  # (C, hidden)
    reduce_bias: torch.Tensor  # (hidden,)
    expand_weight: torch.Tensor  # (hidden, C)
    expand_bias: torch.Tensor  # (C,)
    reduction: int = 16

    @property
    def channels(self) -> int:
        return self.reduce_weight.shape[0]

    @classmethod
    def random(cls, channels: int, reduction: int = 16, *, generator=None, scale: float = 0.5,
               dtype=torch.float64, requires_grad: bool = False) -> "SeBlockParams":
        h = hidden_width(channels, reduction)

        def rnd(*shape):
            t = torch.randn(*shape, generator=generator, dtype=dtype) * scale
            return t.requires_grad_(requires_grad)

        return cls(rnd(channels, h), rnd(h), rnd(h, channels), rnd(channels), reduction)

    def tensors(self) -> list[torch.Tensor]:
        return [self.reduce_weight, self.reduce_bias, self.expand_weight, self.expand_bias]


def gate_preactivation(pooled_source: torch.Tensor, p: SeBlockParams) -> torch.Tensor:
    """``S(GAP(.))``: pooled (N, C) -> reduce -> ReLU -> expand, returns (N, C)."""
    pooled = pooled_source.mean(dim=(2, 3))
    hidden = torch.relu(pooled @ p.reduce_weight + p.reduce_bias)
    return hidden @ p.expand_weight + p.expand_bias


def se_forward(x: torch.Tensor, r_out: torch.Tensor | None, p: SeBlockParams,
               gate_form: GateForm | str = GateForm.RESIDUAL) -> torch.Tensor:
    """Residual form: ``x + sigmoid(S(r_out)) * r_out``.  Pure gating: ``sigmoid(S(x)) * x``."""
    gate_form = GateForm(gate_form)
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != p.channels:
        raise ValueError(f"feature map has {x.shape[1]} channels, SE params expect {p.channels}")
    if gate_form is GateForm.PURE:
        gate = torch.sigmoid(gate_preactivation(x, p))
        return gate[:, :, None, None] * x
    if r_out is None or r_out.shape != x.shape:
        raise ValueError("residual SE form needs a branch output with the same shape as x")
    gate = torch.sigmoid(gate_preactivation(r_out, p))
    return x + gate[:, :, None, None] * r_out


class GatePathGradient(NamedTuple):
    gate_term: torch.Tensor
    branch_term: torch.Tensor
    gate: torch.Tensor  # (N, C) sigmoid activations
    gate_factor: torch.Tensor  # sigmoid * (1 - sigmoid)


def se_gate_path_gradient(x: torch.Tensor, p: SeBlockParams, cotangent: torch.Tensor,
                          branch: Callable[[torch.Tensor], torch.Tensor] | None = None,
                          gate_form: GateForm | str = GateForm.RESIDUAL) -> GatePathGradient:
    """Split ``cotangent^T d(out)/dx`` into its gate-derivative and gated-branch parts.

    The identity part (residual form only) is ``cotangent`` itself and is not
    returned.  For the pure gating form the branch is the identity map.
    """
    gate_form = GateForm(gate_form)
    if gate_form is GateForm.RESIDUAL and branch is None:
        raise ValueError("residual SE form needs the branch function to differentiate through")
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        r = x if gate_form is GateForm.PURE else branch(x)
        pre = gate_preactivation(r, p)
        gate = torch.sigmoid(pre)
        g4 = gate[:, :, None, None]
        (gate_term,) = torch.autograd.grad((g4 * r.detach() * cotangent).sum(), x, retain_graph=True)
        (branch_term,) = torch.autograd.grad((g4.detach() * r * cotangent).sum(), x)
    gate = gate.detach()
    return GatePathGradient(gate_term, branch_term, gate, gate * (1 - gate))


class SEBlock(nn.Module):
    """Trainable SE gate.  Parameter names: reduce_weight, reduce_bias, expand_weight, expand_bias."""

    param_kind_recursive = "se"

    def __init__(self, channels: int, reduction: int = 16, gate_form: GateForm | str = GateForm.PURE,
                 *, generator: torch.Generator | None = None, near_identity: bool = True,
                 identity_bias: float = 3.0, dtype=torch.float64):
        super().__init__()
        h = hidden_width(channels, reduction)
        self.channels = channels
        self.reduction = reduction
        self.gate_form = GateForm(gate_form)
        bound = 1.0 / math.sqrt(channels)
        rw = (torch.rand(channels, h, generator=generator, dtype=dtype) * 2 - 1) * bound
        self.reduce_weight = nn.Parameter(rw)
        self.reduce_bias = nn.Parameter(torch.zeros(h, dtype=dtype))
        if near_identity:
            ew = torch.zeros(h, channels, dtype=dtype)
            eb = torch.full((channels,), float(identity_bias), dtype=dtype)
        else:
            hb = 1.0 / math.sqrt(h)
            ew = (torch.rand(h, channels, generator=generator, dtype=dtype) * 2 - 1) * hb
            eb = torch.zeros(channels, dtype=dtype)
        self.expand_weight = nn.Parameter(ew)
        self.expand_bias = nn.Parameter(eb)
        self.capture: list[torch.Tensor] | None = None
        self.record = False
        self.last_input: torch.Tensor | None = None
        self.last_branch_input: torch.Tensor | None = None

    def params(self) -> SeBlockParams:
        return SeBlockParams(self.reduce_weight, self.reduce_bias, self.expand_weight, self.expand_bias,
                             self.reduction)

    def forward(self, x: torch.Tensor, r_out: torch.Tensor | None = None) -> torch.Tensor:
        p = self.params()
        src = x if self.gate_form is GateForm.PURE else r_out
        if src is None:
            raise ValueError("residual SE block called without a branch output")
        if self.record:
            self.last_input = x.detach().clone()
        if self.capture is not None:
            with torch.no_grad():
                self.capture.append(torch.sigmoid(gate_preactivation(src, p)).detach().clone())
        return se_forward(x, r_out, p, self.gate_form)

    def gate_path_gradient(self, cotangent: torch.Tensor,
                           branch: Callable[[torch.Tensor], torch.Tensor] | None = None) -> GatePathGradient:
        if self.last_input is None:
            raise RuntimeError("no recorded forward pass; set block.record = True and run forward first")
        with torch.no_grad():
            p = SeBlockParams(*(t.detach() for t in self.params().tensors()), self.reduction)
        return se_gate_path_gradient(self.last_input, p, cotangent, branch, self.gate_form)


@dataclass(frozen=True)
class SeInsertionPlan:
    entries: tuple[tuple[int, int, int], ...]  # (stage_id, channel_count, reduction_ratio)
    gate_form: GateForm = GateForm.PURE

    def __post_init__(self):
        stages = [e[0] for e in self.entries]
        if len(set(stages)) != len(stages):
            raise ValueError("at most one SE block per stage boundary")

    @classmethod
    def for_stages(cls, stage_channels: dict[int, int], stages: Sequence[int] | None = None,
                   reduction: int = 16, gate_form: GateForm | str = GateForm.PURE) -> "SeInsertionPlan":
        stages = sorted(stage_channels) if stages is None else list(stages)
        return cls(tuple((s, stage_channels[s], reduction) for s in stages), GateForm(gate_form))

    def to_dict(self) -> dict:
        return {"entries": [list(e) for e in self.entries], "gate_form": self.gate_form.value}

    @classmethod
    def from_dict(cls, d) -> "SeInsertionPlan":
        return cls(tuple(tuple(int(v) for v in e) for e in d["entries"]), GateForm(d.get("gate_form", "pure_gating")))


def insert_se(model: ModelGraph, plan: SeInsertionPlan, *, seed: int = 0) -> list[str]:
    """Attach gates after the listed stages; returns the new parameter names.

    The wrapped module must expose ``attach_gate(stage_id, block)`` and
    ``has_gate(stage_id)``; gates are initialised near identity (gate = sigmoid(3)).
    """
    module = model.module
    if not hasattr(module, "attach_gate"):
        raise TypeError(f"{type(module).__name__} does not support SE insertion")
    known = {sid for sid, _ in model.stage_map.stages}
    for sid, ch, _ in plan.entries:
        if sid not in known:
            raise KeyError(f"stage {sid} not in the model's stage map")
        if module.has_gate(sid):
            raise ValueError(f"stage {sid} already has an SE block")
        expected = getattr(module, "stage_channels", lambda: {})().get(sid)
        if expected is not None and expected != ch:
            raise ValueError(f"stage {sid} has {expected} channels, plan says {ch}")
    before = set(model.params)
    dtype = next(module.parameters()).dtype
    for sid, ch, r in plan.entries:
        gen = torch.Generator().manual_seed((int(seed) * 1000 + sid) % (1 << 63))
        module.attach_gate(sid, SEBlock(ch, r, plan.gate_form, generator=gen, dtype=dtype))
    model.refresh()
    added = [n for n in model.params if n not in before]
    for n in added:
        if model[n].role is not Role.SE_BLOCK:
            raise ValueError(f"inserted parameter {n!r} did not resolve to role se_block")
    return added


@dataclass
class GateHistogram:
    block: str
    edges: np.ndarray
    counts: np.ndarray
    fraction_saturated: float
    total: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
        return buf.getvalue()


def se_blocks(module: nn.Module) -> list[tuple[str, SEBlock]]:
    return [(n, m) for n, m in module.named_modules() if isinstance(m, SEBlock)]


def gate_histogram(model: ModelGraph, batches: Sequence, num_batches: int, *, bins: int = 20,
                   low: float = 0.05, high: float = 0.95) -> list[GateHistogram]:
    blocks = se_blocks(model.module)
    if not blocks:
        raise ValueError("model contains no SE blocks")
    if len(batches) < num_batches:
        raise ValueError(f"dataset has {len(batches)} batches, {num_batches} requested")
    for _, b in blocks:
        b.capture = []
    try:
        with torch.no_grad():
            for i in range(num_batches):
                model(batches[i][0])
        gates = {name: torch.cat([g.reshape(-1) for g in b.capture]).numpy() for name, b in blocks}
    finally:
        for _, b in blocks:
            b.capture = None
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for name, g in gates.items():
        counts, _ = np.histogram(g, bins=edges)
        sat = float(np.mean((g < low) | (g > high))) if g.size else 0.0
        out.append(GateHistogram(name, edges, counts, sat, int(g.size)))
    return out
