"""Staged training recipes: DP, FT, DP-FT and DP-SE-FT, each optionally with weight regularization."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .analytics import EvalReport
from .checkpoint import canonical_json, load_tensors, save_tensors, tensor_digest
from .model_graph import (FreezePolicy, ModelGraph, ModelSnapshot, Role, StageMap, _make_snapshot,
                          apply_freeze_policy, param_delta, snapshot_params)
from .regularizers import (FisherDiagonal, RegKind, RegularizerSpec, composed_loss, estimate_fisher_diag, omega)
from .rgn import RgnProfile, measure_rgn, rgn_weights
from .se_block import GateForm, SeInsertionPlan, insert_se
from .synth import ToyDataset, evaluate, rng_for, substream_seed

log = logging.getLogger(__name__)


class RecipeKind(str, Enum):
    DP = "DP"
    FT = "FT"
    DP_FT = "DP_FT"
    DP_SE_FT = "DP_SE_FT"


class RecipeError(RuntimeError):
    pass


class DivergenceError(RecipeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    schedule: str = "step"
    milestones: tuple[float, ...] = (0.75,)
    gamma: float = 0.1
    se_lr_scale: float = 10.0  # multiplier for newly inserted SE gates

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 0:
            return self.lr
        if self.schedule != "step":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        drops = sum(1 for m in self.milestones if step >= m * total)
        return self.lr * self.gamma ** drops

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(float(m) for m in d["milestones"])
        return cls(**d)


@dataclass(frozen=True)
class RegularizerConfig:
    """Regularizer binding for a phase; the anchor is resolved at run time."""

    kind: RegKind = RegKind.RGN
    lam: float = 0.1
    scope: tuple[str, ...] = ("backbone",)
    measure_batches: int = 4
    rgn_granularity: str = "tensor"  # or "filter"
    update: str = "proximal"  # or "explicit"

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if "se_block" in self.scope:
            raise ValueError("SE-block parameters cannot be regularized")
        if self.update not in ("proximal", "explicit"):
            raise ValueError(f"unknown regularizer update mode {self.update!r}")
        if self.rgn_granularity not in ("tensor", "filter"):
            raise ValueError(f"unknown RGN granularity {self.rgn_granularity!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["scope"] = list(self.scope)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegularizerConfig":
        d = dict(d)
        if "scope" in d:
            d["scope"] = tuple(d["scope"])
        return cls(**d)


@dataclass(frozen=True)
class Phase:
    name: str
    freeze: FreezePolicy
    iterations: int
    regularizer: RegularizerConfig | None = None
    insert_se: SeInsertionPlan | None = None
    optim: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "freeze": self.freeze.to_dict(),
            "iterations": self.iterations,
            "regularizer": self.regularizer.to_dict() if self.regularizer else None,
            "insert_se": self.insert_se.to_dict() if self.insert_se else None,
            "optim": {**asdict(self.optim), "milestones": list(self.optim.milestones)},
        }


@dataclass(frozen=True)
class Recipe:
    kind: str
    phases: tuple[Phase, ...]
    seed: int = 0
    with_wr: bool = False

    @property
    def tag(self) -> str:
        return self.kind + ("+WR" if self.with_wr else "")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "with_wr": self.with_wr, "seed": self.seed,
                "phases": [p.to_dict() for p in self.phases]}


TOY_STAGE_PREFIXES = {s: f"backbone.stages.stage{s}." for s in (1, 2, 3, 4)}
TOY_STAGE_CHANNELS = {1: 8, 2: 16, 3: 24, 4: 32}


def build_recipe(kind: RecipeKind | str, with_wr: bool = False, reg_kind: RegKind | str = RegKind.RGN,
                 lam: float = 0.1, iterations: int | Sequence[int] = 600, *, seed: int = 0,
                 optim: OptimizerConfig = OptimizerConfig(), stage_map: StageMap | None = None,
                 stage_channels: Mapping[int, int] | None = None, shallow_stages: Sequence[int] = (1, 2),
                 se_reduction: int = 4, se_stages: Sequence[int] | None = None,
                 reg_options: Mapping | None = None) -> Recipe:
    """Assemble the phases for one of the four recipes.

    ``iterations`` is either one count used by every phase or one per phase.
    Fine-tuning phases freeze ``shallow_stages`` and all norm parameters;
    ``with_wr`` attaches the regularizer to fine-tuning phases only.
    """
    kind = RecipeKind(kind)
    if with_wr and kind is RecipeKind.DP:
        raise ValueError("weight regularization needs a fine-tuning phase; DP keeps the backbone frozen")
    if stage_map is not None:
        prefixes = {sid: pre for sid, pre in stage_map.stages}
    else:
        prefixes = TOY_STAGE_PREFIXES
    channels = dict(stage_channels or TOY_STAGE_CHANNELS)
    n_phases = 1 if kind in (RecipeKind.DP, RecipeKind.FT) else 2
    iters = [int(iterations)] * n_phases if isinstance(iterations, (int, np.integer)) else [int(i) for i in iterations]
    if len(iters) != n_phases or any(i < 0 for i in iters):
        raise ValueError(f"{kind.value} needs {n_phases} non-negative iteration counts, got {iterations}")

    dp_freeze = FreezePolicy.make(roles=[Role.BACKBONE])
    ft_freeze = FreezePolicy.make(prefixes=[prefixes[s] for s in shallow_stages], norms=True)
    reg = RegularizerConfig(RegKind(reg_kind), float(lam), **dict(reg_options or {})) if with_wr else None

    phases: list[Phase] = []
    if kind in (RecipeKind.DP, RecipeKind.DP_FT, RecipeKind.DP_SE_FT):
        plan = None
        if kind is RecipeKind.DP_SE_FT:
            plan = SeInsertionPlan.for_stages(channels, se_stages, se_reduction, GateForm.PURE)
        phases.append(Phase("dp", dp_freeze, iters[0], None, plan, optim))
    if kind is not RecipeKind.DP:
        phases.append(Phase("ft", ft_freeze, iters[-1], reg, None, optim))
    return Recipe(kind.value, tuple(phases), int(seed), bool(with_wr))


# ----------------------------------------------------------------------------
# run state


@dataclass
class TrainState:
    recipe: str
    seed: int
    phase_index: int = 0
    phase_step: int = 0
    global_step: int = 0
    task_loss_sum: dict[str, float] = field(default_factory=dict)
    omega_sum: dict[str, float] = field(default_factory=dict)
    last_task_loss: float | None = None
    last_omega: float | None = None
    checkpoints: list[str] = field(default_factory=list)
    se_inserted: list[int] = field(default_factory=list)
    anchor_digest: str | None = None
    initial_backbone_digest: str | None = None
    model_rgn: float | None = None
    regularizers: dict[str, dict] = field(default_factory=dict)
    finished: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainState":
        return cls(**d)


@dataclass
class RunResult:
    state: TrainState
    model: ModelGraph
    report: EvalReport | None
    profile: RgnProfile | None = None
    anchor: ModelSnapshot | None = None
    regularizer: RegularizerSpec | None = None


def batch_indices(seed: int, phase: str, step: int, n: int, batch_size: int) -> np.ndarray:
    """Stateless shuffling: epoch permutations drawn from a (seed, phase, epoch) substream."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, j = divmod(step, per_epoch)
    perm = rng_for(seed, f"shuffle/{phase}/{epoch}").permutation(n)
    return perm[j * bs:(j + 1) * bs]


def _phase_trains_backbone(model: ModelGraph) -> bool:
    return any(p.trainable for p in model.tensors({Role.BACKBONE}))


def _resolve_regularizer(cfg: RegularizerConfig, model: ModelGraph, anchor: ModelSnapshot,
                         probe_batches: Sequence, loss_fn, profile: RgnProfile | None) -> tuple[RegularizerSpec, RgnProfile | None]:
    scope = frozenset(Role(s) for s in cfg.scope)
    per_tensor: dict[str, float] = {}
    per_element: dict[str, torch.Tensor] = {}
    if cfg.kind is RegKind.RGN:
        if profile is None or not profile.per_tensor:
            profile = measure_rgn(model, probe_batches, loss_fn, cfg.measure_batches, include_1d=True)
        names = [p.name for p in model.tensors(scope) if p.trainable]
        if cfg.rgn_granularity == "tensor":
            per_tensor = rgn_weights(profile, names)
        else:
            for n in names:
                layout = model[n].filter_layout
                filt = profile.per_filter[n]  # (C_in, C_out)
                per_element[n] = (filt.T.reshape(layout.c_out, layout.c_in, 1)
                                  .expand(layout.c_out, layout.c_in, layout.f)
                                  .reshape(model[n].shape).clone())
    elif cfg.kind is RegKind.EWC:
        fisher = estimate_fisher_diag(model, probe_batches, loss_fn, cfg.measure_batches, scope)
        per_element = fisher.values
    spec = RegularizerSpec(cfg.kind, cfg.lam, anchor, per_tensor, per_element, scope)
    spec.validate(model)
    return spec, profile


def _coefficients(spec: RegularizerSpec, model: ModelGraph) -> dict[str, torch.Tensor | float]:
    return {n: (c if isinstance(c, torch.Tensor) else float(c)) for n, c in spec.element_weights(model).items()}


def _apply_se(model: ModelGraph, plan: SeInsertionPlan, state: TrainState, seed: int) -> None:
    insert_se(model, plan, seed=substream_seed(seed, "init/se"))
    state.se_inserted.extend(sid for sid, _, _ in plan.entries)


def model_meta(model: ModelGraph, recipe: Recipe, inserted: Sequence[int]) -> dict:
    """Structural description stored with checkpoints so they can be rebuilt."""
    entries, form = [], None
    for p in recipe.phases:
        if p.insert_se is not None:
            form = p.insert_se.gate_form.value
            entries += [list(e) for e in p.insert_se.entries if e[0] in inserted]
    meta = {"se_plan": {"entries": entries, "gate_form": form or GateForm.PURE.value}}
    spec = getattr(model.module, "spec", None)
    if spec is not None and hasattr(spec, "to_dict"):
        meta["backbone_spec"] = spec.to_dict()
    return meta


def _bundle_path(out_dir: Path, recipe: Recipe) -> Path:
    return out_dir / recipe.kind / "resume.ckpt"


def _save_bundle(path: Path, model: ModelGraph, momentum: Mapping[str, torch.Tensor], anchor: ModelSnapshot | None,
                 spec: RegularizerSpec | None, state: TrainState, profile: RgnProfile | None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_tensors().items()}
    tensors.update({f"momentum/{k}": v for k, v in momentum.items()})
    if anchor is not None:
        tensors.update({f"anchor/{k}": v for k, v in anchor.param_values.items()})
    if spec is not None:
        tensors.update({f"regel/{k}": v for k, v in spec.per_element_weight.items()})
    meta = {
        "kind": "resume_bundle",
        "state": state.to_dict(),
        "reg_per_tensor": dict(spec.per_tensor_weight) if spec else None,
        "profile_per_tensor": dict(profile.per_tensor) if profile else None,
        "profile_entries": [list(e) for e in profile.entries] if profile else None,
    }
    save_tensors(path, tensors, meta)


def run_recipe(model: ModelGraph, recipe: Recipe, dataset: ToyDataset, loss_fn: Callable, *,
               eval_sets: Mapping[str, ToyDataset] | None = None, out_dir=None, rgn_batches: int = 4,
               rgn_batch_size: int = 64, checkpoint_every: int = 0, stop_after: int | None = None,
               resume_from=None, rgn_profile: RgnProfile | None = None) -> RunResult:
    """Execute the phases of ``recipe`` in order.

    The backbone is snapshotted before the first phase that trains it; that
    snapshot is the anchor of every regularizer.  Randomness comes from the
    recipe seed only (shuffle order per phase name, SE init).  With
    ``stop_after`` the run halts after that many global steps and writes a
    resume bundle to ``out_dir``; ``resume_from`` continues from one.
    ``rgn_profile`` supplies the RGN weights of an rgn_weighted regularizer
    instead of measuring them on the model at the start of fine-tuning.
    """
    if len(dataset) == 0:
        raise RecipeError("training dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    seed = recipe.seed
    probe = dataset.batches(rgn_batch_size)
    rgn_batches = min(rgn_batches, len(probe))

    state = TrainState(recipe.tag, seed)
    state.initial_backbone_digest = model.digest({Role.BACKBONE})
    anchor: ModelSnapshot | None = None
    spec: RegularizerSpec | None = None
    profile: RgnProfile | None = None
    momentum: dict[str, torch.Tensor] = {}
    resumed = False

    if resume_from is not None:
        arrays, meta = load_tensors(resume_from)
        state = TrainState.from_dict(meta["state"])
        for sid in state.se_inserted:
            plan = next(p.insert_se for p in recipe.phases if p.insert_se and sid in [e[0] for e in p.insert_se.entries])
            sub = SeInsertionPlan(tuple(e for e in plan.entries if e[0] == sid), plan.gate_form)
            insert_se(model, sub, seed=substream_seed(seed, "init/se"))
        model.load_state_tensors({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        momentum = {k[9:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("momentum/")}
        anchor_vals = {k[7:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("anchor/")}
        if anchor_vals:
            anchor = _make_snapshot(anchor_vals, {"tag": "anchor"})
        if meta.get("profile_per_tensor") is not None:
            profile = RgnProfile([tuple(e) for e in meta["profile_entries"]], state.model_rgn or 0.0, rgn_batches,
                                 per_tensor=meta["profile_per_tensor"])
        phase = recipe.phases[state.phase_index]
        model.unfreeze_all()
        apply_freeze_policy(model, phase.freeze)
        if phase.regularizer is not None and anchor is not None:
            regel = {k[6:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("regel/")}
            spec = RegularizerSpec(phase.regularizer.kind, phase.regularizer.lam, anchor,
                                   meta.get("reg_per_tensor") or {}, regel,
                                   frozenset(Role(s) for s in phase.regularizer.scope))
        resumed = True

    def checkpoint(phase: Phase, step: int) -> None:
        if out is None:
            return
        path = out / recipe.kind / phase.name / f"{step}.ckpt"
        meta = {"recipe": recipe.tag, "phase": phase.name, "step": step, "seed": seed,
                **model_meta(model, recipe, state.se_inserted)}
        save_tensors(path, model.state_tensors(), meta)
        state.checkpoints.append(str(path.relative_to(out)))

    for pi in range(state.phase_index, len(recipe.phases)):
        phase = recipe.phases[pi]
        fresh = not (resumed and pi == state.phase_index)
        if fresh:
            state.phase_index, state.phase_step = pi, 0
            momentum = {}
            if phase.insert_se is not None:
                _apply_se(model, phase.insert_se, state, seed)
            model.unfreeze_all()
            apply_freeze_policy(model, phase.freeze)
            if _phase_trains_backbone(model) and anchor is None:
                anchor = snapshot_params(model, {Role.BACKBONE}, tag=f"pre-{phase.name}", step=state.global_step, seed=seed)
                state.anchor_digest = anchor.digest()
                profile = measure_rgn(model, probe, loss_fn, rgn_batches, include_1d=True, dataset_tag=dataset.tag)
                state.model_rgn = profile.model_rgn
            spec = None
            if phase.regularizer is not None:
                if anchor is None:
                    raise RecipeError(f"phase {phase.name!r} regularizes a frozen backbone")
                spec, used = _resolve_regularizer(phase.regularizer, model, anchor, probe, loss_fn,
                                                  rgn_profile if rgn_profile is not None else profile)
                if rgn_profile is None:
                    profile = used
                state.regularizers[phase.name] = {
                    "kind": spec.kind.value, "lambda": spec.lam,
                    "scope": sorted(r.value for r in spec.scope),
                    "anchor_digest": spec.anchor.digest(),
                    "tensors": sorted(p.name for p in spec.scoped(model)),
                }
        resumed = False

        trainable = model.trainable_tensors()
        coeffs = _coefficients(spec, model) if spec is not None and spec.lam > 0 else {}
        explicit = spec is not None and phase.regularizer.update == "explicit"
        opt = phase.optim
        for step in range(state.phase_step, phase.iterations):
            if stop_after is not None and state.global_step >= stop_after:
                if out is None:
                    raise RecipeError("stop_after needs an out_dir for the resume bundle")
                _save_bundle(_bundle_path(out, recipe), model, momentum, anchor, spec, state, profile)
                return RunResult(state, model, None, profile, anchor, spec)
            idx = batch_indices(seed, phase.name, step, len(dataset), opt.batch_size)
            x, t = dataset.batch(idx)
            model.zero_grad()
            task = loss_fn(model(x), t)
            if explicit and spec is not None and spec.lam > 0:
                total = composed_loss(task, spec, model)
                om = (total - task).detach() / spec.lam
            else:
                total = task
                om = None
            if not torch.isfinite(total):
                raise DivergenceError(f"non-finite loss in phase {phase.name!r} at step {step}")
            if total.requires_grad:
                total.backward()
            lr = opt.lr_at(step, phase.iterations)
            with torch.no_grad():
                for p in trainable:
                    g = p.grad if p.grad is not None else torch.zeros_like(p.values)
                    buf = momentum.get(p.name)
                    buf = g.clone() if buf is None else buf.mul_(opt.momentum).add_(g)
                    momentum[p.name] = buf
                    p.values.add_(buf, alpha=-lr * (opt.se_lr_scale if p.role is Role.SE_BLOCK else 1.0))
                    if coeffs and not explicit and p.name in coeffs:
                        # implicit step on lam * c * (w - w_pre)^2, stable for any lam
                        a = 2.0 * lr * spec.lam * coeffs[p.name]
                        w0 = spec.anchor[p.name]
                        p.values.copy_((p.values + a * w0) / (1.0 + a))
                if spec is not None and om is None:
                    om = omega(spec, model) if spec.lam > 0 else torch.zeros(())
            tl = float(task.detach())
            state.task_loss_sum[phase.name] = state.task_loss_sum.get(phase.name, 0.0) + tl
            state.last_task_loss = tl
            if om is not None:
                ov = float(om)
                state.omega_sum[phase.name] = state.omega_sum.get(phase.name, 0.0) + ov
                state.last_omega = ov
            state.phase_step = step + 1
            state.global_step += 1
            if checkpoint_every and state.phase_step % checkpoint_every == 0 and state.phase_step < phase.iterations:
                checkpoint(phase, state.phase_step)
        model.zero_grad()
        checkpoint(phase, phase.iterations)
        state.phase_step = phase.iterations

    if anchor is None:
        # recipe never trains the backbone: probe the final (decoder-probed) model
        profile = measure_rgn(model, probe, loss_fn, rgn_batches, include_1d=True, dataset_tag=dataset.tag)
        state.model_rgn = profile.model_rgn
    state.finished = True
    model.unfreeze_all()

    report = None
    initial = anchor
    if eval_sets is not None:
        domains = {name: evaluate(model, ds).to_dict() for name, ds in eval_sets.items()}
        distance = param_delta(model, initial).total if initial is not None else 0.0
        report = EvalReport(domains, recipe.tag, seed, state.model_rgn, distance, extra={
            "anchor_digest": state.anchor_digest,
            "initial_backbone_digest": state.initial_backbone_digest,
            "final_backbone_digest": model.digest({Role.BACKBONE}),
            "regularizers": state.regularizers,
            "phases": [p.to_dict() for p in recipe.phases],
            "steps": state.global_step,
        })
    if out is not None:
        (out / recipe.kind).mkdir(parents=True, exist_ok=True)
        (out / recipe.kind / "state.json").write_text(canonical_json(state.to_dict()) + "\n")
        if report is not None:
            (out / recipe.kind / "report.json").write_text(report.to_json())
    return RunResult(state, model, report, profile, anchor, spec)
