"""Multi-run drivers: DP-iteration sweep, lambda trade-off sweep, corruption robustness."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .analytics import EvalReport, RobustnessReport, SweepTable, emit_reports
from .model_graph import ModelGraph
from .recipes import OptimizerConfig, RecipeKind, build_recipe, run_recipe
from .regularizers import RegKind
from .synth import DomainShiftSpec, ShiftKind, ToyDataset, evaluate, make_dataset, substream_seed, toy_task_loss

log = logging.getLogger(__name__)

ModelFactory = Callable[[], ModelGraph]


def _ood_columns(report: EvalReport, prefix: str = "ood_") -> dict[str, float]:
    return {f"{prefix}{d}": report.metric(d) for d in report.ood_domains()}


def _run_dir(out_dir, name: str) -> Path | None:
    return None if out_dir is None else Path(out_dir) / name


def dp_iteration_sweep(model_factory: ModelFactory, dp_iters_list: Sequence[int], ft_iterations: int,
                       dataset: ToyDataset, eval_sets: Mapping[str, ToyDataset], *, seed: int = 0,
                       lam: float = 0.1, reg_kind: RegKind | str = RegKind.RGN,
                       optim: OptimizerConfig = OptimizerConfig(), loss_fn=toy_task_loss,
                       out_dir=None, progress: list | None = None) -> SweepTable:
    """For each DP length run DP, DP-FT and DP-FT+WR from fresh models.

    ``model_rgn`` is measured on the DP checkpoint, i.e. right before fine-tuning.
    Rows come out in (dp_iters, variant) order, three per entry.  Completed
    rows are also appended to ``progress`` so a caller keeps them if a later
    run fails.
    """
    if len(dp_iters_list) < 2:
        raise ValueError("dp_iteration_sweep needs at least 2 iteration counts")
    rows = progress if progress is not None else []
    variants = (("DP", RecipeKind.DP, False), ("DP_FT", RecipeKind.DP_FT, False), ("DP_FT+WR", RecipeKind.DP_FT, True))
    for n in dp_iters_list:
        for label, kind, wr in variants:
            iters = n if kind is RecipeKind.DP else (n, ft_iterations)
            recipe = build_recipe(kind, wr, reg_kind, lam, iters, seed=seed, optim=optim)
            res = run_recipe(model_factory(), recipe, dataset, loss_fn, eval_sets=eval_sets,
                             out_dir=_run_dir(out_dir, f"dp{n}_{label}"))
            rep = res.report
            rows.append({"dp_iters": int(n), "variant": label, "model_rgn": rep.model_rgn,
                         "id_metric": rep.id_metric, "ood_metric": rep.ood_metric,
                         "weight_distance": rep.weight_distance, **_ood_columns(rep)})
            log.info("dp_iters=%d %s: rgn=%.4g id=%.4f ood=%.4f", n, label, rep.model_rgn, rep.id_metric,
                     rep.ood_metric)
    ood_cols = sorted({k for r in rows for k in r if k.startswith("ood_") and k != "ood_metric"})
    cols = ["dp_iters", "variant", "model_rgn", "id_metric", "ood_metric", "weight_distance", *ood_cols]
    return SweepTable("dp_iters", cols, rows)


def lambda_tradeoff_sweep(model_factory: ModelFactory, lambdas: Sequence[float], dataset: ToyDataset,
                          eval_sets: Mapping[str, ToyDataset], *, iterations=(600, 600), seed: int = 0,
                          reg_kind: RegKind | str = RegKind.RGN, kind: RecipeKind | str = RecipeKind.DP_FT,
                          optim: OptimizerConfig = OptimizerConfig(), reg_options: Mapping | None = None,
                          loss_fn=toy_task_loss, out_dir=None,
                          progress: list | None = None) -> tuple[SweepTable, list[EvalReport]]:
    """One regularized run per lambda with a shared seed; rows are sorted by lambda."""
    if len(lambdas) < 2:
        raise ValueError("lambda_tradeoff_sweep needs at least 2 lambda values")
    if any(l < 0 for l in lambdas):
        raise ValueError("lambda values must be >= 0")
    rows = progress if progress is not None else []
    reports = []
    for lam in sorted(lambdas):
        recipe = build_recipe(kind, True, reg_kind, lam, iterations, seed=seed, optim=optim, reg_options=reg_options)
        res = run_recipe(model_factory(), recipe, dataset, loss_fn, eval_sets=eval_sets,
                         out_dir=_run_dir(out_dir, f"lambda_{lam:g}"))
        rep = res.report
        reports.append(rep)
        rows.append({"lambda": float(lam), "id_metric": rep.id_metric, **_ood_columns(rep),
                     "weight_distance": rep.weight_distance})
    ood_cols = [f"ood_{d}" for d in reports[0].ood_domains()]
    return SweepTable("lambda", ["lambda", "id_metric", *ood_cols, "weight_distance"], rows), reports


def robustness_report(model: ModelGraph, clean: ToyDataset, *, kinds: Sequence[str] | None = None,
                      severities: Sequence[int] = (1, 2, 3, 4, 5), seed: int = 0, metric: str = "ap_proxy",
                      tag: str = "", n: int | None = None, image_size: int = 16,
                      class_color_prob: float = 0.9, data_seed: int | None = None) -> RobustnessReport:
    """Evaluate ``model`` on every (kind, severity) corruption of a regenerated clean set.

    The corrupted sets share targets with ``clean`` only when ``data_seed`` is
    the seed that produced it; otherwise targets come from ``seed``.
    """
    kinds = [ShiftKind(k).value for k in (kinds or [k.value for k in ShiftKind])]
    n = n or len(clean)
    dseed = substream_seed(seed, "dataset/robustness") if data_seed is None else data_seed
    kw = dict(image_size=image_size, class_color_prob=class_color_prob)
    clean_metric = getattr(evaluate(model, clean), metric)
    per_shift: dict[str, dict[int, float]] = {}
    for k in kinds:
        per_shift[k] = {}
        for s in severities:
            ds = make_dataset(n, DomainShiftSpec(k, s, substream_seed(seed, f"robustness/{k}/{s}")), dseed, **kw)
            per_shift[k][int(s)] = getattr(evaluate(model, ds), metric)
    return RobustnessReport(clean_metric, per_shift, tag)


def write_sweep(table: SweepTable, reports: Sequence[EvalReport], out_dir, plots: bool = False) -> list[Path]:
    """Table at ``out_dir``; each run's report under ``<axis>_<value>/`` since run tags repeat across rows."""
    out = Path(out_dir)
    files = emit_reports([table], out, plots=plots)
    for row, rep in zip(table.rows, reports):
        files += emit_reports([rep], out / f"{table.axis}_{row[table.axis]:g}")
    return files
