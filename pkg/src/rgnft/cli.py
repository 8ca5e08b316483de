"""``rgnft`` command line: probe, train, sweep, insert-se, report.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

from . import __version__
from .analytics import EvalReport, SweepTable, emit_reports
from .checkpoint import save_tensors
from .config import ConfigError, echo, load_config, output_dir
from .model_graph import Role, save_model
from .recipes import OptimizerConfig, build_recipe, model_meta, run_recipe
from .rgn import RgnProfile, measure_rgn
from .se_block import GateForm, SeInsertionPlan, gate_histogram, insert_se, se_blocks
from .sweeps import dp_iteration_sweep, lambda_tradeoff_sweep, write_sweep
from .synth import (BenchConfig, PretrainConfig, ToyBackboneSpec, ToyDataset, build_model, make_bench,
                    model_from_checkpoint, toy_task_loss, zero_loss)

log = logging.getLogger("rgnft")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class JobError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# config -> objects


def backbone_spec(cfg) -> ToyBackboneSpec:
    return ToyBackboneSpec.from_dict(cfg["backbone"]["spec"])


def model_factory(cfg):
    """Zero-argument factory returning a fresh model for the job seed."""
    seed = cfg["seed"]
    ckpt = cfg["backbone"]["checkpoint"]
    if ckpt is not None:
        return lambda: model_from_checkpoint(ckpt, backbone_spec(cfg), seed)[0]
    spec, pre = backbone_spec(cfg), PretrainConfig(**cfg["backbone"]["pretrain"])
    return lambda: build_model(spec, seed, pretrain=pre)


def datasets(cfg) -> tuple[ToyDataset, dict[str, ToyDataset]]:
    dump = cfg["dataset"]["dump_path"]
    if dump is None:
        return make_bench(BenchConfig.from_dict(cfg["dataset"]["bench"]), cfg["seed"])
    root = Path(dump)
    if not (root / "train" / "targets.csv").exists():
        raise JobError(f"dataset dump {root} lacks train/targets.csv")
    train = ToyDataset.load_dump(root / "train", "id")
    evals = {}
    if (root / "eval").is_dir():
        for d in sorted(p for p in (root / "eval").iterdir() if (p / "targets.csv").exists()):
            evals[d.name] = ToyDataset.load_dump(d, d.name)
    if "id" not in evals:
        evals["id"] = train
    return train, evals


def optimizer(cfg) -> OptimizerConfig:
    return OptimizerConfig.from_dict(cfg["recipe"]["optimizer"])


def recipe_from(cfg):
    r, reg, se = cfg["recipe"], cfg["regularizer"], cfg["se"]
    reg_options = {k: reg[k] for k in ("measure_batches", "rgn_granularity", "update")}
    return build_recipe(r["kind"], r["with_wr"], reg["kind"], reg["lam"], r["iterations"], seed=cfg["seed"],
                        optim=optimizer(cfg), stage_channels=dict(enumerate(cfg["backbone"]["spec"]["widths"], 1)),
                        shallow_stages=r["shallow_stages"], se_reduction=se["reduction"], se_stages=se["stages"],
                        reg_options=reg_options)


def rgn_source_profile(cfg, train: ToyDataset) -> RgnProfile | None:
    src = cfg["regularizer"]["rgn_source"]
    if src is None:
        return None
    graph, _ = model_from_checkpoint(src, backbone_spec(cfg), cfg["seed"])
    pr = cfg["probe"]
    return measure_rgn(graph, train.batches(pr["batch_size"]), toy_task_loss, cfg["regularizer"]["measure_batches"],
                       include_1d=True, dataset_tag=train.tag)


# ----------------------------------------------------------------------------
# commands


def cmd_probe(cfg) -> int:
    out = output_dir(cfg)
    echo(cfg, out)
    pr = cfg["probe"]
    train, _ = datasets(cfg)
    graph = model_factory(cfg)()
    if pr["dp_iterations"] > 0:
        run_recipe(graph, build_recipe("DP", iterations=pr["dp_iterations"], seed=cfg["seed"], optim=optimizer(cfg)),
                   train, toy_task_loss)
    loss = zero_loss if pr["loss"] == "zero" else toy_task_loss
    profile = measure_rgn(graph, train.batches(pr["batch_size"]), loss, pr["num_batches"], average=pr["average"],
                          dataset_tag=train.tag)
    files = emit_reports([profile], out, plots=cfg["report"]["plots"])
    summary = {"model_rgn": profile.model_rgn, "layers": len(profile.entries), "batches_used": profile.batches_used,
               "excluded_filters": profile.excluded_filters, "profile_csv": files[0].name}
    (out / "probe_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"model_rgn={profile.model_rgn:.17g} layers={len(profile.entries)} csv={files[0]}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = output_dir(cfg)
    echo(cfg, out)
    train, evals = datasets(cfg)
    graph = model_factory(cfg)()
    recipe = recipe_from(cfg)
    save_model(graph, out / "initial_backbone.ckpt", {"kind": "backbone"}, roles={Role.BACKBONE})
    result = run_recipe(graph, recipe, train, toy_task_loss, eval_sets=evals, out_dir=out,
                        rgn_batches=cfg["regularizer"]["measure_batches"], rgn_batch_size=cfg["probe"]["batch_size"],
                        checkpoint_every=cfg["recipe"]["checkpoint_every"], rgn_profile=rgn_source_profile(cfg, train))
    save_model(graph, out / "final_backbone.ckpt", {"kind": "backbone"}, roles={Role.BACKBONE})
    save_tensors(out / "final.ckpt", graph.state_tensors(),
                 {"kind": "model", "recipe": recipe.tag, **model_meta(graph, recipe, result.state.se_inserted)})
    items: list = [result.report]
    if result.profile is not None:
        items.append(result.profile)
    if se_blocks(graph.module):
        items.extend(gate_histogram(graph, evals["id"].batches(cfg["probe"]["batch_size"]), 1))
    emit_reports(items, out, plots=cfg["report"]["plots"])
    rep = result.report
    print(f"recipe={recipe.tag} id={rep.id_metric:.6g} ood={rep.ood_metric if rep.ood_domains() else float('nan'):.6g} "
          f"model_rgn={rep.model_rgn:.6g} weight_distance={rep.weight_distance:.6g}")
    return EXIT_OK


def cmd_sweep(cfg, axis: str) -> int:
    sw = cfg["sweep"]
    values = sw["lambdas"] if axis == "lambda" else sw["dp_iters"]
    if len(values) < 2:
        raise ConfigError(f"sweep.{'lambdas' if axis == 'lambda' else 'dp_iters'}", "a sweep needs at least 2 values")
    out = output_dir(cfg)
    echo(cfg, out)
    train, evals = datasets(cfg)
    factory = model_factory(cfg)
    reg = cfg["regularizer"]
    progress: list = []
    try:
        if axis == "lambda":
            r = cfg["recipe"]
            kind = r["kind"] if r["kind"] != "DP" else "DP_FT"
            iters = r["iterations"]
            if kind != r["kind"] and not isinstance(iters, int):
                iters = [iters[0]] * 2
            table, reports = lambda_tradeoff_sweep(
                factory, values, train, evals, iterations=iters, seed=cfg["seed"], reg_kind=reg["kind"], kind=kind,
                optim=optimizer(cfg), out_dir=out / "runs", progress=progress,
                reg_options={k: reg[k] for k in ("measure_batches", "rgn_granularity", "update")})
        else:
            table = dp_iteration_sweep(factory, values, sw["ft_iterations"], train, evals, seed=cfg["seed"],
                                       lam=reg["lam"], reg_kind=reg["kind"], optim=optimizer(cfg),
                                       out_dir=out / "runs", progress=progress)
            reports = []
    except Exception:
        if progress:
            cols = sorted({k for r in progress for k in r})
            emit_reports([SweepTable(f"{axis}_partial", cols, progress)], out)
        raise
    write_sweep(table, reports, out, plots=cfg["report"]["plots"])
    print(f"sweep axis={axis} rows={len(table.rows)} -> {out}")
    return EXIT_OK


def cmd_insert_se(cfg, checkpoint: str | None, dest: str | None) -> int:
    src = checkpoint or cfg["backbone"]["checkpoint"]
    if src is None:
        raise ConfigError("backbone.checkpoint", "insert-se needs a checkpoint (--checkpoint or backbone.checkpoint)")
    graph, meta = model_from_checkpoint(src, backbone_spec(cfg), cfg["seed"])
    se = cfg["se"]
    plan = SeInsertionPlan.for_stages(graph.module.stage_channels(), se["stages"], se["reduction"],
                                      GateForm(se["gate_form"]))
    added = insert_se(graph, plan, seed=cfg["seed"])
    prev = (meta.get("se_plan") or {}).get("entries", [])
    new_meta = {k: v for k, v in meta.items() if k != "se_plan"}
    new_meta["se_plan"] = {"entries": [*prev, *[list(e) for e in plan.entries]], "gate_form": plan.gate_form.value}
    new_meta["backbone_spec"] = graph.module.spec.to_dict()
    out = Path(dest) if dest else output_dir(cfg) / "se_inserted.ckpt"
    if not dest:
        echo(cfg, out.parent)
    save_tensors(out, graph.state_tensors(), new_meta)
    print(f"inserted {len(plan.entries)} SE blocks ({len(added)} tensors) -> {out}")
    return EXIT_OK


def cmd_report(cfg, source: str | None, dest: str | None) -> int:
    """Re-render emissions (CSV/JSON, optional plots) from stored artifacts."""
    src = Path(source) if source else output_dir(cfg)
    if not src.is_dir():
        raise JobError(f"report source {src} is not a directory")
    items: list = []
    for p in sorted(src.glob("rgn_profile_*.csv")):
        items.append(RgnProfile.from_csv(p.read_text(), dataset_tag=p.stem[len("rgn_profile_"):]))
    for p in sorted(src.glob("report_*.json")):
        items.append(EvalReport.from_json(p.read_text()))
    for p in sorted(src.glob("sweep_*.json")):
        d = json.loads(p.read_text())
        items.append(SweepTable(d["axis"], d["columns"], d["rows"]))
    out = Path(dest) if dest else src / "rendered"
    files = emit_reports(items, out, plots=cfg["report"]["plots"])
    print(f"rendered {len(items)} items into {len(files)} files -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgnft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rgnft {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON job config (defaults are used for missing fields)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a field by dotted path, e.g. --set regularizer.lam=0.5")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("probe", parents=[common], help="measure RGN of a frozen model")
    sub.add_parser("train", parents=[common], help="run a training recipe")
    sp = sub.add_parser("sweep", parents=[common], help="lambda or DP-iteration sweep")
    sp.add_argument("--axis", choices=("lambda", "dp_iters"), required=True)
    ip = sub.add_parser("insert-se", parents=[common], help="add SE blocks to a checkpoint")
    ip.add_argument("--checkpoint")
    ip.add_argument("--out")
    rp = sub.add_parser("report", parents=[common], help="re-render stored reports")
    rp.add_argument("--from", dest="source")
    rp.add_argument("--to", dest="dest")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        log.info("effective config: %s", json.dumps(cfg, sort_keys=True))
        if args.command == "probe":
            return cmd_probe(cfg)
        if args.command == "train":
            return _guarded(cfg, cmd_train)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis)
        if args.command == "insert-se":
            return cmd_insert_se(cfg, args.checkpoint, args.out)
        return cmd_report(cfg, args.source, args.dest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        if args.verbose:
            traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _guarded(cfg, fn) -> int:
    """Run ``fn``; on failure leave a FAILED marker next to the partial outputs."""
    out = output_dir(cfg)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    try:
        return fn(cfg)
    except ConfigError:
        raise
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise


if __name__ == "__main__":
    sys.exit(main())
