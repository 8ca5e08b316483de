"""Job configuration: defaults, dotted overrides, validation and echo."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping, Sequence

from .checkpoint import canonical_json

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "RGNFT_OUTPUT_ROOT"

RECIPE_KINDS = ("DP", "FT", "DP_FT", "DP_SE_FT")
REG_KINDS = ("l2", "rgn_weighted", "ewc")
GATE_FORMS = ("pure_gating", "residual")
SHIFT_KINDS = ("color_remap", "additive_noise", "blur", "contrast")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# None in this tree means "optional, no default"; the validator accepts null or
# any JSON scalar/list for those fields and checks them by field-specific rules.
DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "recipe": {
        "kind": "DP_FT",
        "with_wr": False,
        "iterations": 600,  # one count for every phase, or a per-phase list
        "shallow_stages": [1, 2],
        "optimizer": {"lr": 0.02, "momentum": 0.9, "batch_size": 32, "schedule": "step",
                      "milestones": [0.75], "gamma": 0.1, "se_lr_scale": 10.0},
        "checkpoint_every": 0,
    },
    "regularizer": {
        "kind": "rgn_weighted",
        "lam": 0.1,
        "measure_batches": 4,
        "rgn_granularity": "tensor",
        "update": "proximal",
        "rgn_source": None,
    },
    "se": {"stages": None, "reduction": 4, "gate_form": "pure_gating"},
    "backbone": {
        "spec": {"widths": [8, 16, 24, 32], "blocks_per_stage": 1, "builtin_se": False, "se_reduction": 4,
                 "image_size": 16, "decoder_width": 16, "decoder_mult": 1.0, "seed": 0},
        "pretrain": {"steps": 1200, "n_samples": 2048, "batch_size": 32, "lr": 0.02, "momentum": 0.9,
                     "weight_decay": 5e-4},
        "checkpoint": None,
    },
    "dataset": {
        "bench": {"n_train": 512, "n_eval": 1024, "image_size": 16, "class_color_prob": 0.9, "severity": 3,
                  "shift_kinds": list(SHIFT_KINDS)},
        "dump_path": None,
    },
    "probe": {"num_batches": 4, "batch_size": 64, "loss": "task", "average": "ratio", "dp_iterations": 0},
    "sweep": {"lambdas": [0.0, 0.1, 10.0], "dp_iters": [150, 300, 600], "ft_iterations": 600},
    "report": {"plots": False},
}

_CHOICES = {
    "recipe.kind": RECIPE_KINDS,
    "regularizer.kind": REG_KINDS,
    "regularizer.rgn_granularity": ("tensor", "filter"),
    "regularizer.update": ("proximal", "explicit"),
    "se.gate_form": GATE_FORMS,
    "recipe.optimizer.schedule": ("step", "constant"),
    "probe.loss": ("task", "zero"),
    "probe.average": ("ratio", "gradient"),
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(p, "unknown field")
        if isinstance(base[k], dict) and isinstance(v, Mapping):
            _merge(base[k], v, p)
        else:
            base[k] = copy.deepcopy(v)
    return base


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like dotted.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node.get(k), dict):
                raise ConfigError(".".join(keys[:i + 1]), "unknown section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(".".join(keys), "unknown field")
        node[keys[-1]] = value
    return cfg


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


_FREE_FORM = {"recipe.iterations"}


def _check_types(default, value, path: str) -> None:
    if default is None or path in _FREE_FORM:
        return
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        for k in value:
            if k not in default:
                raise ConfigError(f"{path}.{k}" if path else k, "unknown field")
        for k, d in default.items():
            _check_types(d, value.get(k), f"{path}.{k}" if path else k)
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if not _is_num(value):
            raise ConfigError(path, f"expected a number, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")


def _get(cfg: Mapping, path: str):
    node = cfg
    for k in path.split("."):
        node = node[k]
    return node


def validate(cfg: dict) -> dict:
    """Check every field; raises :class:`ConfigError` naming the offending path."""
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported schema version {cfg.get('schema_version')!r}")
    recipe = cfg.get("recipe")
    if isinstance(recipe, dict) and isinstance(recipe.get("iterations"), int) and not isinstance(recipe["iterations"], bool):
        recipe["iterations"] = [recipe["iterations"]] * (1 if recipe.get("kind") in ("DP", "FT") else 2)
    _check_types(DEFAULTS, cfg, "")
    for path, choices in _CHOICES.items():
        if _get(cfg, path) not in choices:
            raise ConfigError(path, f"must be one of {list(choices)}, got {_get(cfg, path)!r}")

    r = cfg["recipe"]
    n_phases = 1 if r["kind"] in ("DP", "FT") else 2
    iters = r["iterations"]
    if len(iters) != n_phases or not all(isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in iters):
        raise ConfigError("recipe.iterations", f"{r['kind']} needs {n_phases} non-negative integers")
    if r["with_wr"] and r["kind"] == "DP":
        raise ConfigError("recipe.with_wr", "DP keeps the backbone frozen; nothing to regularize")
    opt = r["optimizer"]
    if opt["lr"] <= 0:
        raise ConfigError("recipe.optimizer.lr", "must be > 0")
    if opt["batch_size"] < 1:
        raise ConfigError("recipe.optimizer.batch_size", "must be >= 1")
    if not 0 <= opt["momentum"] < 1:
        raise ConfigError("recipe.optimizer.momentum", "must be in [0, 1)")
    if opt["se_lr_scale"] <= 0:
        raise ConfigError("recipe.optimizer.se_lr_scale", "must be > 0")
    if not all(_is_num(m) for m in opt["milestones"]):
        raise ConfigError("recipe.optimizer.milestones", "must be numbers")
    if r["checkpoint_every"] < 0:
        raise ConfigError("recipe.checkpoint_every", "must be >= 0")
    if not all(s in (1, 2, 3, 4, 5, 6, 7, 8) for s in r["shallow_stages"]):
        raise ConfigError("recipe.shallow_stages", "must be stage ids")

    reg = cfg["regularizer"]
    if reg["lam"] < 0:
        raise ConfigError("regularizer.lam", "must be >= 0")
    if reg["measure_batches"] < 1:
        raise ConfigError("regularizer.measure_batches", "must be >= 1")
    if reg["rgn_source"] is not None and not isinstance(reg["rgn_source"], str):
        raise ConfigError("regularizer.rgn_source", "must be a checkpoint path or null")

    se = cfg["se"]
    if se["reduction"] < 1:
        raise ConfigError("se.reduction", "must be >= 1")
    n_stages = len(cfg["backbone"]["spec"]["widths"])
    if se["stages"] is not None:
        if not isinstance(se["stages"], list) or not se["stages"]:
            raise ConfigError("se.stages", "must be a non-empty list of stage ids or null")
        if len(set(se["stages"])) != len(se["stages"]):
            raise ConfigError("se.stages", "duplicate stage id")
        for s in se["stages"]:
            if not isinstance(s, int) or not 1 <= s <= n_stages:
                raise ConfigError("se.stages", f"stage {s!r} not in 1..{n_stages}")

    bb = cfg["backbone"]
    if not bb["spec"]["widths"] or any(not isinstance(w, int) or w < 1 for w in bb["spec"]["widths"]):
        raise ConfigError("backbone.spec.widths", "must be positive integers")
    if len(bb["spec"]["widths"]) < 2:
        raise ConfigError("backbone.spec.widths", "need at least 2 stages")
    if bb["spec"]["image_size"] % 2 ** (len(bb["spec"]["widths"]) - 1):
        raise ConfigError("backbone.spec.image_size", "must be divisible by the total stride")
    if bb["checkpoint"] is not None and not isinstance(bb["checkpoint"], str):
        raise ConfigError("backbone.checkpoint", "must be a path or null")

    ds = cfg["dataset"]
    bench = ds["bench"]
    for k in ("n_train", "n_eval"):
        if bench[k] < 1:
            raise ConfigError(f"dataset.bench.{k}", "must be >= 1")
    if not 0 <= bench["severity"] <= 5:
        raise ConfigError("dataset.bench.severity", "must be in 0..5")
    if not 0 <= bench["class_color_prob"] <= 1:
        raise ConfigError("dataset.bench.class_color_prob", "must be in [0, 1]")
    for k in bench["shift_kinds"]:
        if k not in SHIFT_KINDS:
            raise ConfigError("dataset.bench.shift_kinds", f"unknown shift {k!r}")
    if bench["image_size"] != bb["spec"]["image_size"]:
        raise ConfigError("dataset.bench.image_size", "must equal backbone.spec.image_size")
    if ds["dump_path"] is not None and not isinstance(ds["dump_path"], str):
        raise ConfigError("dataset.dump_path", "must be a path or null")

    pr = cfg["probe"]
    if pr["num_batches"] < 1 or pr["batch_size"] < 1 or pr["dp_iterations"] < 0:
        raise ConfigError("probe", "num_batches and batch_size must be >= 1, dp_iterations >= 0")

    sw = cfg["sweep"]
    if not all(_is_num(l) and l >= 0 for l in sw["lambdas"]):
        raise ConfigError("sweep.lambdas", "must be non-negative numbers")
    if not all(isinstance(n, int) and n >= 0 for n in sw["dp_iters"]):
        raise ConfigError("sweep.dp_iters", "must be non-negative integers")
    if sw["ft_iterations"] < 0:
        raise ConfigError("sweep.ft_iterations", "must be >= 0")
    return cfg


def load_config(path=None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, merged with the JSON file at ``path``, then dotted overrides; validated."""
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        _merge(cfg, data)
    apply_overrides(cfg, overrides)
    return validate(cfg)


def output_dir(cfg: Mapping) -> Path:
    out = Path(cfg["output_dir"])
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def echo(cfg: Mapping, directory) -> Path:
    """Write the fully resolved config next to a job's outputs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.json"
    path.write_text(json.dumps(json.loads(canonical_json(cfg)), sort_keys=True, indent=2) + "\n")
    return path
