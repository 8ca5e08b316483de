import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rgnft.analytics import (EvalReport, RobustnessReport, SweepTable, UndefinedRatioError, correlation_table,
                             dumps_report, emit_reports, improvement_points, improvement_ratio, pearson,
                             rgn_improvement_correlation, rpc)
from rgnft.rgn import RgnProfile

finite = st.floats(-100, 100, allow_nan=False)


def two_pass_pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / (n - 1)
    vx = sum((x - mx) ** 2 for x in xs) / (n - 1)
    vy = sum((y - my) ** 2 for y in ys) / (n - 1)
    return cov / math.sqrt(vx * vy)


def test_improvement_ratio_examples():
    assert improvement_ratio(7.5, 15.7, 50.4, 44.6) == pytest.approx(-1.414, abs=1e-3)
    assert improvement_ratio(17.1, 12.6, 53.4, 40.2) == pytest.approx(0.341, abs=1e-3)
    assert improvement_ratio(3.0, 3.0, 2.0, 1.0) == 0.0
    with pytest.raises(UndefinedRatioError):
        improvement_ratio(1.0, 2.0, 5.0, 5.0)
    with pytest.raises(ValueError):
        improvement_ratio(float("nan"), 1.0, 2.0, 1.0)


@settings(max_examples=100)
@given(finite, finite, finite, finite, finite)
def test_ratio_shift_invariance(a, b, c, d, k):
    assume(abs(c - d) > 1e-3)
    r = improvement_ratio(a, b, c, d)
    r2 = improvement_ratio(a + k, b + k, c + k, d + k)
    assert r2 == pytest.approx(r, rel=1e-6, abs=1e-6)


def test_improvement_points_drop_and_log(caplog):
    def rep(idm, ood, rgn=None):
        return EvalReport({"id": {"ap_proxy": idm}, "blur": {"ap_proxy": ood}}, "X", 0, model_rgn=rgn)

    runs = [("a", rep(0.5, 0.3, 0.2), rep(0.7, 0.4)),
            ("flat", rep(0.6, 0.3, 0.1), rep(0.6, 0.5))]
    with caplog.at_level("WARNING"):
        pts = improvement_points(runs)
    assert [p[0] for p in pts] == ["a"]
    assert pts[0][1] == 0.2 and pts[0][2] == pytest.approx(0.5)
    assert "dropping flat" in caplog.text


def test_pearson_examples():
    assert rgn_improvement_correlation([(1.0, 3.0), (2.0, 1.0), (3.0, -1.0), (4.0, -3.0)]) == -1.0
    rng = np.random.default_rng(10)
    xs, ys = rng.normal(size=10).tolist(), rng.normal(size=10).tolist()
    assert abs(pearson(xs, ys) - two_pass_pearson(xs, ys)) < 1e-12
    with pytest.raises(ValueError, match="variance"):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [1.0, 2.0])


@settings(max_examples=60)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=12), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(points, scale, shift):
    xs, ys = [p[0] for p in points], [p[1] for p in points]
    assume(np.std(xs) > 1e-3 and np.std(ys) > 1e-3)
    r = pearson(xs, ys)
    assert pearson([scale * x + shift for x in xs], ys) == pytest.approx(r, abs=1e-9)
    assert pearson(xs, [-y for y in ys]) == pytest.approx(-r, abs=1e-12)
    assert -1.0 <= r <= 1.0


def test_rpc_basic():
    assert rpc(40.0, [40.0, 40.0]) == 100.0
    with pytest.raises(ValueError):
        rpc(0.0, [1.0])
    with pytest.raises(ValueError):
        rpc(1.0, [])


@settings(max_examples=100)
@given(st.floats(0.1, 100), st.lists(st.floats(0, 100), min_size=1, max_size=15), st.floats(0.01, 100))
def test_rpc_scale_invariance(clean, corrupted, c):
    assert rpc(c * clean, [c * v for v in corrupted]) == pytest.approx(rpc(clean, corrupted), rel=1e-9, abs=1e-9)


def test_robustness_report():
    rep = RobustnessReport(0.8, {"blur": {1: 0.6, 2: 0.4}, "additive_noise": {1: 0.7, 2: 0.3}}, "x")
    assert rep.rpc == pytest.approx(100 * 0.5 / 0.8)
    assert rep.per_severity() == {1: pytest.approx(0.65), 2: pytest.approx(0.35)}
    assert rep.per_kind() == {"additive_noise": pytest.approx(0.5), "blur": pytest.approx(0.5)}
    assert json.loads(rep.to_json())["rpc"] == 62.5


def report(seed=0):
    return EvalReport({"id": {"ap_proxy": 0.81234567891}, "blur": {"ap_proxy": 0.5}, "additive_noise": {"ap_proxy": 0.25}},
                      "DP_FT+WR", seed, 0.0123456789, 1.5)


def test_eval_report_serialization():
    rep = report()
    text = rep.to_json()
    d = json.loads(text)
    assert d["domains"]["id"]["ap_proxy"] == 0.812346
    assert list(d) == sorted(d)
    assert rep.ood_metric == 0.375 and rep.ood_domains() == ["additive_noise", "blur"]
    assert EvalReport.from_json(text).to_json() == text
    assert dumps_report({"a": float("inf")}) == '{\n  "a": "inf"\n}\n'


def test_emit_empty_and_deterministic(tmp_path):
    assert emit_reports([], tmp_path / "none") == []
    assert not (tmp_path / "none").exists()
    prof = RgnProfile([("backbone.a", 0.5, 0.1), ("backbone.b", 1.0, 0.3)], 0.2, 2, dataset_tag="id")
    table = SweepTable("lambda", ["lambda", "id_metric", "weight_distance"],
                       [{"lambda": 0.0, "id_metric": 0.5, "weight_distance": 2.0},
                        {"lambda": 0.1, "id_metric": 0.49, "weight_distance": 1.0}])
    items = [prof, report(), table, RobustnessReport(0.8, {"blur": {3: 0.6}}, "ft"),
             correlation_table([("r50", 0.1, -1.4), ("eff", 0.05, 0.3)])]
    a = emit_reports(items, tmp_path / "a")
    b = emit_reports(items, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    names = {p.name for p in a}
    assert {"rgn_profile_id.csv", "report_DP_FT_WR_seed0.json", "sweep_lambda.csv", "sweep_correlation.csv",
            "robustness_ft.json"} <= names
    rows = [ln.split(",") for ln in (tmp_path / "a" / "rgn_profile_id.csv").read_text().splitlines()
            if not ln.startswith("#")]
    assert len(rows) == 3 and all(len(r) == 3 for r in rows)
    assert (tmp_path / "a" / "sweep_correlation.csv").read_text().splitlines()[0] == "backbone_tag,model_rgn,ratio"


def test_emit_plots(tmp_path):
    pytest.importorskip("matplotlib")
    prof = RgnProfile([("backbone.a", 0.5, 0.1), ("backbone.b", 1.0, 0.3)], 0.2, 2, dataset_tag="id")
    out = emit_reports([prof], tmp_path, plots=True)
    assert (tmp_path / "rgn_profiles.png") in out


def test_emit_errors(tmp_path):
    with pytest.raises(TypeError):
        emit_reports([object()], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_reports([report()], blocker / "sub")
