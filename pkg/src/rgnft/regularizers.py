"""Weight-space anchoring penalties and the composed training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import torch

from .checkpoint import load_tensors, save_tensors
from .model_graph import ModelGraph, ModelSnapshot, ParamTensor, Role, parse_roles


class RegKind(str, Enum):
    L2 = "l2"
    RGN = "rgn_weighted"
    EWC = "ewc"


@dataclass
class FisherDiagonal:
    values: dict[str, torch.Tensor]
    batches_used: int

    def save(self, path) -> None:
        save_tensors(path, self.values, {"kind": "fisher_diagonal", "batches_used": self.batches_used})

    @classmethod
    def load(cls, path) -> "FisherDiagonal":
        arrays, meta = load_tensors(path)
        return cls({k: torch.from_numpy(v.copy()) for k, v in arrays.items()}, int(meta.get("batches_used", 0)))


@dataclass
class RegularizerSpec:
    kind: RegKind
    lam: float
    anchor: ModelSnapshot
    per_tensor_weight: dict[str, float] = field(default_factory=dict)
    per_element_weight: dict[str, torch.Tensor] = field(default_factory=dict)
    scope: frozenset[Role] = frozenset({Role.BACKBONE})

    def __post_init__(self):
        self.kind = RegKind(self.kind)
        self.scope = parse_roles(self.scope)
        if Role.SE_BLOCK in self.scope:
            raise ValueError("SE-block parameters cannot be regularized (they have no anchor)")
        if self.lam < 0:
            raise ValueError(f"regularization coefficient must be >= 0, got {self.lam}")

    def scoped(self, model: ModelGraph) -> list[ParamTensor]:
        """In-scope tensors; frozen ones are skipped since their drift is zero."""
        return [p for p in model.tensors(self.scope) if p.trainable]

    def validate(self, model: ModelGraph) -> None:
        params = self.scoped(model)
        for p in params:
            if p.name not in self.anchor:
                raise KeyError(f"anchor lacks parameter {p.name!r}")
        if self.kind is RegKind.RGN:
            _check_tensor_weights(params, self.per_tensor_weight, self.per_element_weight)
        if self.kind is RegKind.EWC:
            _check_element_weights(params, self.per_element_weight)

    def element_weights(self, model: ModelGraph) -> dict[str, torch.Tensor | float]:
        """Coefficient c in ``sum c * (w - w_pre)^2`` per tensor (scalar or elementwise)."""
        out: dict[str, torch.Tensor | float] = {}
        for p in self.scoped(model):
            if self.kind is RegKind.L2:
                out[p.name] = 1.0
            elif self.kind is RegKind.RGN:
                out[p.name] = self.per_element_weight.get(p.name, self.per_tensor_weight.get(p.name))
            else:
                out[p.name] = self.per_element_weight[p.name]
        return out


def _check_tensor_weights(params, per_tensor, per_element):
    for p in params:
        if p.name in per_element:
            w = per_element[p.name]
            if tuple(w.shape) != p.shape:
                raise ValueError(f"weight shape {tuple(w.shape)} does not match {p.name} {p.shape}")
            if (w < 0).any():
                raise ValueError(f"negative RGN weight for {p.name!r}")
            continue
        if p.name not in per_tensor:
            raise KeyError(f"missing RGN weight for {p.name!r}")
        if per_tensor[p.name] < 0:
            raise ValueError(f"negative RGN weight for {p.name!r}: {per_tensor[p.name]}")


def _check_element_weights(params, weights):
    for p in params:
        if p.name not in weights:
            raise KeyError(f"missing Fisher entry for {p.name!r}")
        if tuple(weights[p.name].shape) != p.shape:
            raise ValueError(f"Fisher shape {tuple(weights[p.name].shape)} does not match {p.name} {p.shape}")


def _scope_params(model: ModelGraph, scope, include_frozen: bool) -> list[ParamTensor]:
    params = model.tensors(scope)
    return params if include_frozen else [p for p in params if p.trainable]


def _sq(p: ParamTensor, anchor: ModelSnapshot) -> torch.Tensor:
    if p.name not in anchor:
        raise KeyError(f"anchor lacks parameter {p.name!r}")
    d = p.parameter - anchor[p.name]
    return d * d


def omega_l2(model: ModelGraph, anchor: ModelSnapshot, scope=(Role.BACKBONE,), *,
             include_frozen: bool = False) -> torch.Tensor:
    """``sum_i ||w_i - w_i_pre||^2`` as a differentiable scalar."""
    total = torch.zeros((), dtype=torch.float64)
    for p in _scope_params(model, scope, include_frozen):
        total = total + _sq(p, anchor).sum()
    return total


def omega_rgn_weighted(model: ModelGraph, anchor: ModelSnapshot, rgn_weights: Mapping[str, float | torch.Tensor],
                       scope=(Role.BACKBONE,), *, include_frozen: bool = False) -> torch.Tensor:
    """``sum_i RGN_i ||w_i - w_i_pre||^2``; a tensor-valued weight applies per element."""
    total = torch.zeros((), dtype=torch.float64)
    for p in _scope_params(model, scope, include_frozen):
        if p.name not in rgn_weights:
            raise KeyError(f"missing RGN weight for {p.name!r}")
        w = rgn_weights[p.name]
        if isinstance(w, torch.Tensor) and w.dim() > 0:
            if (w < 0).any():
                raise ValueError(f"negative RGN weight for {p.name!r}")
            total = total + (w * _sq(p, anchor)).sum()
        else:
            if float(w) < 0:
                raise ValueError(f"negative RGN weight for {p.name!r}: {float(w)}")
            total = total + float(w) * _sq(p, anchor).sum()
    return total


def omega_ewc(model: ModelGraph, anchor: ModelSnapshot, fisher: FisherDiagonal | Mapping[str, torch.Tensor],
              scope=(Role.BACKBONE,), *, include_frozen: bool = False) -> torch.Tensor:
    """``sum_i F_i (w_i - w_i_pre)^2`` with F applied element-wise."""
    values = fisher.values if isinstance(fisher, FisherDiagonal) else fisher
    total = torch.zeros((), dtype=torch.float64)
    for p in _scope_params(model, scope, include_frozen):
        if p.name not in values:
            raise KeyError(f"missing Fisher entry for {p.name!r}")
        f = values[p.name]
        if tuple(f.shape) != p.shape:
            raise ValueError(f"Fisher shape {tuple(f.shape)} does not match {p.name} {p.shape}")
        total = total + (f * _sq(p, anchor)).sum()
    return total


def omega(spec: RegularizerSpec, model: ModelGraph) -> torch.Tensor:
    if spec.kind is RegKind.L2:
        return omega_l2(model, spec.anchor, spec.scope)
    if spec.kind is RegKind.RGN:
        weights = {**spec.per_tensor_weight, **spec.per_element_weight}
        return omega_rgn_weighted(model, spec.anchor, weights, spec.scope)
    return omega_ewc(model, spec.anchor, spec.per_element_weight, spec.scope)


def composed_loss(task_loss: torch.Tensor, spec: RegularizerSpec | None, model: ModelGraph) -> torch.Tensor:
    """``task + lam * Omega(w)``.  With ``lam == 0`` (or no spec) the task loss is returned as is."""
    if spec is None:
        return task_loss
    if spec.lam < 0:
        raise ValueError(f"regularization coefficient must be >= 0, got {spec.lam}")
    if spec.lam == 0:
        return task_loss
    return task_loss + spec.lam * omega(spec, model)


def estimate_fisher_diag(model: ModelGraph, batches: Sequence, loss_fn, num_batches: int,
                         roles=(Role.BACKBONE,)) -> FisherDiagonal:
    """Empirical Fisher: mean over batches of squared task-loss gradients."""
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if len(batches) < num_batches:
        raise ValueError(f"dataset has {len(batches)} batches, {num_batches} requested")
    params = model.tensors(roles)
    acc = {p.name: torch.zeros_like(p.values) for p in params}
    with model.measurement_grads(roles):
        for b in range(num_batches):
            inputs, targets = batches[b]
            model.zero_grad()
            with torch.enable_grad():
                loss = loss_fn(model(inputs), targets)
                if loss.requires_grad:
                    loss.backward()
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad.detach()
                if not torch.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for {p.name!r} at batch {b}")
                acc[p.name] += g * g
        model.zero_grad()
    return FisherDiagonal({k: v / num_batches for k, v in acc.items()}, num_batches)
