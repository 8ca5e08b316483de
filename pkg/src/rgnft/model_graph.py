"""Backend view of a trainable torch model.

A :class:`ModelGraph` wraps an ``nn.Module`` and tags every parameter with a
role (backbone / decoder / se_block), a kind (conv, dense, norm, bias, se)
and, where it makes sense, a filter layout ``(C_in, C_out, F)``.  Training
code only ever touches parameters through this registry, which is what makes
freeze policies and anchored regularizers independent of the concrete model.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_tensors, save_tensors, tensor_digest

log = logging.getLogger(__name__)


class Role(str, Enum):
    BACKBONE = "backbone"
    DECODER = "decoder"
    SE_BLOCK = "se_block"


RGN_KINDS = frozenset({"conv", "dense"})


def parse_roles(roles: Iterable[Role | str] | None) -> frozenset[Role]:
    if roles is None:
        return frozenset(Role)
    if isinstance(roles, (str, Role)):
        roles = [roles]
    out = set()
    for r in roles:
        if isinstance(r, Role):
            out.add(r)
            continue
        try:
            out.add(Role(r))
        except ValueError:
            valid = ", ".join(x.value for x in Role)
            raise ValueError(f"unknown role {r!r}; valid roles: {valid}") from None
    return frozenset(out)


@dataclass(frozen=True)
class FilterLayout:
    c_in: int
    c_out: int
    f: int

    @property
    def numel(self) -> int:
        return self.c_in * self.c_out * self.f


def layout_for(kind: str, shape: Sequence[int]) -> FilterLayout | None:
    """Filter grouping for a torch-shaped tensor.

    Conv weights ``(out, in, kh, kw)`` group over the kernel; dense weights
    ``(out, in)`` are F=1 convolutions; 1-D tensors are ``out`` filters of size 1.
    """
    shape = tuple(shape)
    if len(shape) >= 3:
        return FilterLayout(shape[1], shape[0], int(np.prod(shape[2:])))
    if len(shape) == 2:
        return FilterLayout(shape[1], shape[0], 1)
    if len(shape) == 1:
        return FilterLayout(1, shape[0], 1)
    return None


def filter_view(tensor: torch.Tensor, layout: FilterLayout) -> torch.Tensor:
    """Rearrange a torch-shaped tensor into ``(C_in, C_out, F)``."""
    if tensor.numel() != layout.numel:
        raise ValueError(f"tensor with {tensor.numel()} elements does not match layout {layout}")
    return tensor.reshape(layout.c_out, layout.c_in, layout.f).permute(1, 0, 2)


class ParamTensor:
    """Registry entry for one named parameter."""

    def __init__(self, graph: "ModelGraph", name: str, parameter: nn.Parameter, role: Role, kind: str):
        self._graph = graph
        self.name = name
        self.parameter = parameter
        self.role = role
        self.kind = kind
        self.filter_layout = layout_for(kind, parameter.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.parameter.shape)

    @property
    def values(self) -> torch.Tensor:
        return self.parameter.data

    @property
    def grad(self) -> torch.Tensor | None:
        return self.parameter.grad

    @property
    def trainable(self) -> bool:
        return self._graph._trainable[self.name]

    @property
    def rgn_eligible(self) -> bool:
        return self.role is Role.BACKBONE and self.kind in RGN_KINDS

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, role={self.role.value}, kind={self.kind}, shape={self.shape})"


@dataclass(frozen=True)
class StageMap:
    stages: tuple[tuple[int, str], ...]
    total_layer_count: int

    def prefix(self, stage_id: int) -> str:
        for sid, prefix in self.stages:
            if sid == stage_id:
                return prefix
        raise KeyError(f"stage {stage_id} not in stage map (have {[s for s, _ in self.stages]})")

    def stage_of(self, name: str) -> int | None:
        for sid, prefix in self.stages:
            if name.startswith(prefix):
                return sid
        return None

    def validate(self, backbone_names: Iterable[str]) -> None:
        prefixes = [p for _, p in self.stages]
        for a in prefixes:
            for b in prefixes:
                if a != b and a.startswith(b):
                    raise ValueError(f"stage prefixes overlap: {a!r} / {b!r}")
        uncovered = [n for n in backbone_names if self.stage_of(n) is None]
        if uncovered:
            raise ValueError(f"backbone parameters outside every stage: {uncovered}")


@dataclass(frozen=True)
class FreezePolicy:
    frozen_roles: frozenset[Role] = frozenset()
    frozen_name_prefixes: tuple[str, ...] = ()
    frozen_norm_params: bool = False

    @classmethod
    def make(cls, roles=(), prefixes=(), norms=False) -> "FreezePolicy":
        return cls(parse_roles(roles) if roles else frozenset(), tuple(prefixes), bool(norms))

    def matches(self, p: ParamTensor) -> bool:
        if p.role in self.frozen_roles:
            return True
        if any(p.name.startswith(pre) for pre in self.frozen_name_prefixes):
            return True
        return self.frozen_norm_params and p.kind == "norm"

    def to_dict(self) -> dict:
        return {
            "frozen_roles": sorted(r.value for r in self.frozen_roles),
            "frozen_name_prefixes": list(self.frozen_name_prefixes),
            "frozen_norm_params": self.frozen_norm_params,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FreezePolicy":
        return cls.make(d.get("frozen_roles", ()), d.get("frozen_name_prefixes", ()), d.get("frozen_norm_params", False))


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen copy of parameter values (the anchor ``w_pre``)."""

    param_values: Mapping[str, torch.Tensor]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.param_values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.param_values

    def names(self) -> list[str]:
        return list(self.param_values)

    def digest(self) -> str:
        return tensor_digest(self.param_values)

    def save(self, path) -> None:
        save_tensors(path, self.param_values, {"kind": "snapshot", **self.meta})

    @classmethod
    def load(cls, path) -> "ModelSnapshot":
        arrays, meta = load_tensors(path)
        meta = {k: v for k, v in meta.items() if k != "kind"}
        return _make_snapshot({k: torch.from_numpy(v.copy()) for k, v in arrays.items()}, meta)


def _make_snapshot(values: Mapping[str, torch.Tensor], meta: Mapping) -> ModelSnapshot:
    frozen = {}
    for k, v in values.items():
        t = v.detach().clone()
        frozen[k] = t
    return ModelSnapshot(MappingProxyType(frozen), MappingProxyType(dict(meta)))


class ModelGraph:
    """Parameter registry over a torch module.

    ``role_prefixes`` maps name prefixes to roles (first match wins);
    ``kind_of`` optionally overrides the kind inferred from the owning module.
    """

    def __init__(self, module: nn.Module, role_prefixes: Mapping[str, Role | str], stage_map: StageMap,
                 kind_of: Mapping[str, str] | None = None):
        self.module = module
        self.role_prefixes = {k: Role(v) for k, v in role_prefixes.items()}
        self.stage_map = stage_map
        self._kind_override = dict(kind_of or {})
        self._trainable: dict[str, bool] = {}
        self.params: dict[str, ParamTensor] = {}
        self.refresh()
        self.stage_map.validate(p.name for p in self.tensors({Role.BACKBONE}))

    # registry ---------------------------------------------------------------
    def _role_for(self, name: str) -> Role:
        for prefix, role in self.role_prefixes.items():
            if name.startswith(prefix):
                return role
        raise ValueError(f"parameter {name!r} matches no role prefix")

    def _kinds(self) -> dict[str, str]:
        kinds: dict[str, str] = {}
        for mod_name, mod in self.module.named_modules():
            explicit = getattr(mod, "param_kind", None)
            for pname, p in mod.named_parameters(recurse=False):
                full = f"{mod_name}.{pname}" if mod_name else pname
                if explicit is not None:
                    kinds[full] = explicit
                elif isinstance(mod, nn.Conv2d) and p.dim() == 4:
                    kinds[full] = "conv"
                elif isinstance(mod, nn.Linear) and p.dim() == 2:
                    kinds[full] = "dense"
                else:
                    kinds[full] = "bias" if p.dim() == 1 else "dense"
        # parameters nested inside an SE module inherit its kind
        for mod_name, mod in self.module.named_modules():
            if getattr(mod, "param_kind_recursive", None):
                for pname, _ in mod.named_parameters():
                    kinds[f"{mod_name}.{pname}"] = mod.param_kind_recursive
        kinds.update(self._kind_override)
        return kinds

    def refresh(self) -> None:
        kinds = self._kinds()
        new: dict[str, ParamTensor] = {}
        for name, p in self.module.named_parameters():
            if name in new:
                raise ValueError(f"duplicate parameter name {name!r}")
            new[name] = ParamTensor(self, name, p, self._role_for(name), kinds[name])
            self._trainable.setdefault(name, True)
        self._trainable = {k: v for k, v in self._trainable.items() if k in new}
        self.params = new

    def __getitem__(self, name: str) -> ParamTensor:
        return self.params[name]

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self.params.values())

    def tensors(self, roles=None) -> list[ParamTensor]:
        roles = parse_roles(roles)
        return [p for p in self.params.values() if p.role in roles]

    def names(self, roles=None) -> list[str]:
        return [p.name for p in self.tensors(roles)]

    def rgn_layers(self) -> list[ParamTensor]:
        return [p for p in self.params.values() if p.rgn_eligible]

    # training flags ---------------------------------------------------------
    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        self.params[name].parameter.requires_grad_(bool(flag))

    def unfreeze_all(self) -> None:
        for name in self.params:
            self.set_trainable(name, True)

    def trainable_tensors(self) -> list[ParamTensor]:
        return [p for p in self.params.values() if self._trainable[p.name]]

    @contextlib.contextmanager
    def measurement_grads(self, roles=None):
        """Temporarily request gradients on ``roles`` without marking them trainable."""
        selected = {p.name for p in self.tensors(roles)}
        saved = {n: (p.parameter.requires_grad, p.parameter.grad) for n, p in self.params.items()}
        try:
            for n, p in self.params.items():
                p.parameter.requires_grad_(n in selected)
                p.parameter.grad = None
            yield
        finally:
            for n, (req, grad) in saved.items():
                self.params[n].parameter.requires_grad_(req)
                self.params[n].parameter.grad = grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.parameter.grad = None

    # values -----------------------------------------------------------------
    def forward(self, x):
        return self.module(x)

    __call__ = forward

    def state_tensors(self, roles=None) -> dict[str, torch.Tensor]:
        return {p.name: p.values for p in self.tensors(roles)}

    def load_state_tensors(self, tensors: Mapping[str, object], strict: bool = True) -> None:
        missing = [n for n in self.params if n not in tensors]
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing}")
        with torch.no_grad():
            for name, value in tensors.items():
                if name not in self.params:
                    if strict:
                        raise KeyError(f"unknown parameter in checkpoint: {name!r}")
                    continue
                t = torch.as_tensor(np.asarray(value), dtype=self.params[name].values.dtype)
                if tuple(t.shape) != self.params[name].shape:
                    raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {self.params[name].shape}")
                self.params[name].values.copy_(t)

    def digest(self, roles=None) -> str:
        return tensor_digest(self.state_tensors(roles))


def snapshot_params(model: ModelGraph, roles, *, tag: str = "", step: int = 0, seed: int | None = None) -> ModelSnapshot:
    roles = parse_roles(roles) if roles else frozenset()
    values = {}
    for p in model.tensors(roles) if roles else []:
        if not torch.isfinite(p.values).all():
            raise ValueError(f"parameter {p.name!r} has non-finite values")
        values[p.name] = p.values
    return _make_snapshot(values, {"tag": tag, "step": int(step), "seed": seed})


def apply_freeze_policy(model: ModelGraph, policy: FreezePolicy) -> int:
    count = 0
    for p in model:
        if policy.matches(p):
            model.set_trainable(p.name, False)
            count += 1
    for prefix in policy.frozen_name_prefixes:
        if not any(n.startswith(prefix) for n in model.params):
            log.warning("freeze prefix %r matched no parameters", prefix)
    return count


@dataclass(frozen=True)
class DeltaReport:
    per_tensor: Mapping[str, float]
    total: float


def param_delta(model: ModelGraph, snapshot: ModelSnapshot, roles=(Role.BACKBONE,)) -> DeltaReport:
    per = {}
    for p in model.tensors(roles):
        if p.name not in snapshot:
            raise KeyError(f"snapshot does not cover parameter {p.name!r}")
        d = p.values.detach() - snapshot[p.name]
        per[p.name] = float((d * d).sum())
    return DeltaReport(MappingProxyType(per), float(sum(per.values())))


def save_model(model: ModelGraph, path, meta: Mapping | None = None, roles=None):
    return save_tensors(path, model.state_tensors(roles), meta)


def load_model(model: ModelGraph, path, strict: bool = True) -> dict:
    arrays, meta = load_tensors(path)
    model.load_state_tensors(arrays, strict=strict)
    return meta
