"""Derived metrics (improvement ratio, correlation, rPC) and deterministic report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)


class UndefinedRatioError(ZeroDivisionError):
    pass


def improvement_ratio(ood_ft: float, ood_dp: float, id_ft: float, id_dp: float, eps: float = 1e-9) -> float:
    """``(OOD_FT - OOD_DP) / (ID_FT - ID_DP)``; raises when the ID improvement is ~0."""
    vals = (ood_ft, ood_dp, id_ft, id_dp)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite input to improvement_ratio: {vals}")
    denom = id_ft - id_dp
    if abs(denom) < eps:
        raise UndefinedRatioError(f"ID improvement {denom!r} is below {eps}; ratio undefined")
    return (ood_ft - ood_dp) / denom


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise ValueError("x and y lengths differ")
    if len(xs) < 3:
        raise ValueError("need at least 3 points")
    n = len(xs)
    mx, my = math.fsum(xs) / n, math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance on one axis; correlation undefined")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def rgn_improvement_correlation(points: Sequence[tuple[float, float]]) -> float:
    """Pearson r between model RGN and improvement ratio over ``(rgn, ratio)`` points."""
    return pearson([p[0] for p in points], [p[1] for p in points])


def rpc(clean: float, corrupted: Sequence[float]) -> float:
    """Relative performance under corruption, in percent: ``100 * mean(corrupted) / clean``."""
    if clean <= 0:
        raise ValueError(f"clean metric must be > 0, got {clean}")
    if len(corrupted) == 0:
        raise ValueError("no corrupted metrics given")
    return 100.0 * (math.fsum(corrupted) / len(corrupted)) / clean


# ----------------------------------------------------------------------------
# reports


def round_sig(x: float, digits: int = 6) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


def _normalize(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return str(obj)
        return round_sig(obj)
    if isinstance(obj, Mapping):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if hasattr(obj, "item"):
        return _normalize(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(obj: Any) -> str:
    return json.dumps(_normalize(obj), sort_keys=True, indent=2) + "\n"


@dataclass
class EvalReport:
    domains: dict[str, dict[str, float]]
    recipe: str
    seed: int
    model_rgn: float | None = None
    weight_distance: float | None = None
    id_domain: str = "id"
    primary_metric: str = "ap_proxy"
    extra: dict[str, Any] = field(default_factory=dict)

    def metric(self, domain: str, name: str | None = None) -> float:
        return self.domains[domain][name or self.primary_metric]

    @property
    def id_metric(self) -> float:
        return self.metric(self.id_domain)

    def ood_domains(self) -> list[str]:
        return sorted(d for d in self.domains if d != self.id_domain)

    @property
    def ood_metric(self) -> float:
        doms = self.ood_domains()
        return math.fsum(self.metric(d) for d in doms) / len(doms)

    def to_dict(self) -> dict:
        out = {
            "domains": self.domains,
            "recipe": self.recipe,
            "seed": self.seed,
            "model_rgn": self.model_rgn,
            "weight_distance": self.weight_distance,
            "id_domain": self.id_domain,
            "primary_metric": self.primary_metric,
            "extra": self.extra,
        }
        if self.domains and self.id_domain in self.domains:
            out["summary"] = {"id": self.id_metric, "ood_mean": self.ood_metric if self.ood_domains() else None}
        return out

    def to_json(self) -> str:
        return dumps_report(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["domains"], d["recipe"], d["seed"], d.get("model_rgn"), d.get("weight_distance"),
                   d.get("id_domain", "id"), d.get("primary_metric", "ap_proxy"), d.get("extra", {}))


@dataclass
class RobustnessReport:
    clean: float
    per_shift: dict[str, dict[int, float]]  # kind -> severity -> metric
    tag: str = ""

    @property
    def corrupted(self) -> list[float]:
        return [v for kind in sorted(self.per_shift) for _, v in sorted(self.per_shift[kind].items())]

    @property
    def rpc(self) -> float:
        return rpc(self.clean, self.corrupted)

    def per_severity(self) -> dict[int, float]:
        sev: dict[int, list[float]] = {}
        for kind in self.per_shift.values():
            for s, v in kind.items():
                sev.setdefault(s, []).append(v)
        return {s: math.fsum(v) / len(v) for s, v in sorted(sev.items())}

    def per_kind(self) -> dict[str, float]:
        return {k: math.fsum(v.values()) / len(v) for k, v in sorted(self.per_shift.items())}

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "clean": self.clean,
            "per_shift": {k: {str(s): v for s, v in sorted(d.items())} for k, d in self.per_shift.items()},
            "per_severity": {str(k): v for k, v in self.per_severity().items()},
            "per_kind": self.per_kind(),
            "rpc": self.rpc,
        }

    def to_json(self) -> str:
        return dumps_report(self.to_dict())


@dataclass
class SweepTable:
    axis: str
    columns: list[str]
    rows: list[dict[str, Any]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        return dumps_report({"axis": self.axis, "columns": self.columns, "rows": self.rows})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def improvement_points(runs: Iterable[tuple[str, "EvalReport", "EvalReport"]], domain: str | None = None,
                       eps: float = 1e-9) -> list[tuple[str, float, float]]:
    """``(tag, model_rgn, ratio)`` per ``(tag, dp_report, ft_report)`` triple.

    RGN is taken from the DP report (decoder trained, backbone untouched).  OOD is
    ``domain`` or the mean over OOD domains.  Points whose ID improvement is ~0 are
    dropped with a warning instead of failing the whole table.
    """
    out = []
    for tag, dp, ft in runs:
        ood = (lambda r: r.metric(domain)) if domain else (lambda r: r.ood_metric)
        try:
            q = improvement_ratio(ood(ft), ood(dp), ft.id_metric, dp.id_metric, eps)
        except UndefinedRatioError as exc:
            log.warning("dropping %s: %s", tag, exc)
            continue
        if dp.model_rgn is None:
            raise ValueError(f"{tag}: DP report carries no model_rgn")
        out.append((tag, dp.model_rgn, q))
    return out


def correlation_table(points: Iterable[tuple[str, float, float]]) -> SweepTable:
    rows = [{"backbone_tag": t, "model_rgn": r, "ratio": q} for t, r, q in points]
    return SweepTable("correlation", ["backbone_tag", "model_rgn", "ratio"], rows)


# ----------------------------------------------------------------------------
# emission


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc
    return path


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def emit_reports(items: Sequence[Any], destination, *, plots: bool = False) -> list[Path]:
    """Write CSV/JSON artifacts for profiles, reports, histograms and sweep tables.

    Re-emitting identical inputs produces identical CSV/JSON bytes.  With
    ``plots=True`` PNG figures are added when matplotlib is importable.
    """
    from .rgn import RgnProfile
    from .se_block import GateHistogram

    dest = Path(destination)
    written: list[Path] = []
    for i, item in enumerate(items):
        if isinstance(item, RgnProfile):
            tag = _safe(item.dataset_tag or f"profile{i}")
            written.append(_write(dest / f"rgn_profile_{tag}.csv", item.to_csv()))
        elif isinstance(item, EvalReport):
            written.append(_write(dest / f"report_{_safe(item.recipe)}_seed{item.seed}.json", item.to_json()))
        elif isinstance(item, RobustnessReport):
            written.append(_write(dest / f"robustness_{_safe(item.tag or str(i))}.json", item.to_json()))
        elif isinstance(item, GateHistogram):
            written.append(_write(dest / f"gates_{_safe(item.block)}.csv", item.to_csv()))
        elif isinstance(item, SweepTable):
            written.append(_write(dest / f"sweep_{_safe(item.axis)}.csv", item.to_csv()))
            written.append(_write(dest / f"sweep_{_safe(item.axis)}.json", item.to_json()))
        else:
            raise TypeError(f"don't know how to emit {type(item).__name__}")
    if plots and items:
        written.extend(_plot(items, dest))
    return written


def _plot(items, dest: Path) -> list[Path]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; skipping plots")
        return []
    from .rgn import RgnProfile
    from .se_block import GateHistogram

    out = []
    profiles = [x for x in items if isinstance(x, RgnProfile)]
    if profiles:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for p in profiles:
            ax.plot([e[1] for e in p.entries], [e[2] for e in p.entries], marker="o",
                    label=f"{p.dataset_tag or 'model'} ({p.model_rgn:.3g})")
        ax.set_xlabel("normalized depth")
        ax.set_ylabel("RGN")
        ax.legend()
        fig.tight_layout()
        out.append(dest / "rgn_profiles.png")
        fig.savefig(out[-1], dpi=120)
        plt.close(fig)
    hists = [x for x in items if isinstance(x, GateHistogram)]
    if hists:
        fig, axes = plt.subplots(1, len(hists), figsize=(3 * len(hists), 2.5), squeeze=False)
        for ax, h in zip(axes[0], hists):
            ax.bar(h.edges[:-1], h.counts, width=h.edges[1] - h.edges[0], align="edge")
            ax.set_title(h.block, fontsize=8)
        fig.tight_layout()
        out.append(dest / "gate_histograms.png")
        fig.savefig(out[-1], dpi=120)
        plt.close(fig)
    for t in (x for x in items if isinstance(x, SweepTable) and x.axis in ("lambda", "dp_iters")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = t.column(t.columns[0])
        for c in t.columns[1:]:
            if c.startswith(("id_", "ood_")):
                ax.plot(xs, t.column(c), marker="o", label=c)
        if t.axis == "lambda":
            ax.set_xscale("symlog", linthresh=1e-2)
        ax.set_xlabel(t.columns[0])
        ax.legend(fontsize=7)
        fig.tight_layout()
        out.append(dest / f"sweep_{t.axis}.png")
        fig.savefig(out[-1], dpi=120)
        plt.close(fig)
    return out


def lambda_tradeoff_sweep(*args, **kwargs):
    """See :func:`rgnft.sweeps.lambda_tradeoff_sweep` (imported lazily to avoid a cycle)."""
    from .sweeps import lambda_tradeoff_sweep as _sweep

    return _sweep(*args, **kwargs)
