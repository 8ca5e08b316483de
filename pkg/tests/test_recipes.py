import math

import pytest
import torch

from conftest import TINY
from rgnft.checkpoint import load_tensors
from rgnft.model_graph import Role, param_delta
from rgnft.recipes import (DivergenceError, OptimizerConfig, RecipeError, RecipeKind, batch_indices, build_recipe,
                           run_recipe)
from rgnft.regularizers import RegKind
from rgnft.synth import build_model, make_dataset, toy_task_loss

CH = dict(zip(range(1, 5), TINY.widths))


def tiny(kind, with_wr=False, lam=0.1, iterations=20, seed=0, **kw):
    return build_recipe(kind, with_wr, kw.pop("reg_kind", RegKind.RGN), lam, iterations, seed=seed,
                        stage_channels=CH, **kw)


@pytest.fixture(scope="module")
def data():
    return make_dataset(64, seed=21, image_size=16)


@pytest.fixture(scope="module")
def evals():
    return {"id": make_dataset(32, seed=22, image_size=16)}


def fresh(seed=0):
    return build_model(TINY, seed=seed, pretrained=False)


def run(kind, data, evals=None, model=None, **kw):
    run_kw = {k: kw.pop(k) for k in list(kw) if k in ("out_dir", "stop_after", "resume_from", "checkpoint_every")}
    model = model or fresh(kw.get("seed", 0))
    return run_recipe(model, tiny(kind, **kw), data, toy_task_loss, eval_sets=evals, rgn_batches=2,
                      rgn_batch_size=16, **run_kw)


def test_build_dp_ft_structure():
    r = tiny(RecipeKind.DP_FT)
    assert [p.name for p in r.phases] == ["dp", "ft"]
    assert r.phases[0].freeze.frozen_roles == frozenset({Role.BACKBONE})
    ft = r.phases[1].freeze
    assert ft.frozen_roles == frozenset() and ft.frozen_norm_params
    assert ft.frozen_name_prefixes == ("backbone.stages.stage1.", "backbone.stages.stage2.")
    assert r.phases[1].regularizer is None and r.tag == "DP_FT"
    assert len(tiny(RecipeKind.DP).phases) == 1 and len(tiny(RecipeKind.FT).phases) == 1


def test_build_errors_and_wr_placement():
    with pytest.raises(ValueError, match="regularization"):
        tiny(RecipeKind.DP, with_wr=True)
    with pytest.raises(ValueError):
        tiny(RecipeKind.DP_FT, iterations=(5,))
    with pytest.raises(ValueError):
        tiny(RecipeKind.FT, iterations=-1)
    r = tiny(RecipeKind.DP_SE_FT, with_wr=True)
    assert r.phases[0].regularizer is None and r.phases[0].insert_se is not None
    assert r.phases[1].regularizer.scope == ("backbone",) and r.tag == "DP_SE_FT+WR"


def test_dp_zero_iterations_is_noop(data):
    m = fresh()
    before = {k: v.clone() for k, v in m.state_tensors().items()}
    res = run(RecipeKind.DP, data, model=m, iterations=0)
    assert res.state.finished and res.state.global_step == 0
    assert all(torch.equal(v, before[k]) for k, v in m.state_tensors().items())


def test_dp_freezes_backbone_bytes(data, tmp_path):
    m = fresh()
    init = m.digest("backbone")
    res = run(RecipeKind.DP, data, model=m, iterations=30, out_dir=tmp_path)
    assert m.digest("backbone") == init
    arrays, meta = load_tensors(tmp_path / "DP" / "dp" / "30.ckpt")
    for p in m.tensors("backbone"):
        assert arrays[p.name].tobytes() == p.values.numpy().tobytes()
    assert meta["phase"] == "dp" and res.state.model_rgn is not None


def test_dp_se_changes_only_decoder_and_gates(data):
    m = fresh()
    before = {k: v.clone() for k, v in m.state_tensors().items()}
    res = run(RecipeKind.DP_SE_FT, data, model=m, iterations=(25, 0))
    changed = {k for k, v in m.state_tensors().items() if k not in before or not torch.equal(v, before[k])}
    roles = {m[k].role for k in changed}
    assert roles == {Role.DECODER, Role.SE_BLOCK}
    assert len([k for k in changed if m[k].role is Role.SE_BLOCK]) == 16
    assert res.state.se_inserted == [1, 2, 3, 4]


def test_anchor_equals_initial_backbone(data, evals):
    m = fresh()
    init = m.digest("backbone")
    res = run(RecipeKind.DP_SE_FT, data, evals, model=m, with_wr=True, iterations=(15, 15))
    info = res.state.regularizers["ft"]
    assert info["scope"] == ["backbone"]
    assert res.state.anchor_digest == info["anchor_digest"] == init
    assert res.report.extra["initial_backbone_digest"] == init
    assert all(m[n].role is Role.BACKBONE and m[n].trainable for n in info["tensors"])
    # the regularizer never sees SE, decoder, frozen-stage or norm tensors
    assert not any(".stage1." in n or ".stage2." in n or "norm" in n for n in info["tensors"])
    assert res.report.weight_distance == pytest.approx(param_delta(m, res.anchor).total)


@pytest.mark.parametrize("kind", [RecipeKind.FT, RecipeKind.DP_SE_FT])
def test_determinism(data, evals, tmp_path, kind):
    outs = []
    for i in range(2):
        run(kind, data, evals, with_wr=kind is RecipeKind.DP_SE_FT, iterations=12 if kind is RecipeKind.FT else (8, 8),
            out_dir=tmp_path / str(i))
        outs.append(tmp_path / str(i))
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_dp_ft_with_zero_dp_equals_ft(data, evals):
    ft = run(RecipeKind.FT, data, evals, iterations=15)
    dpft = run(RecipeKind.DP_FT, data, evals, iterations=(0, 15))
    assert ft.model.digest() == dpft.model.digest()
    assert ft.report.domains == dpft.report.domains


def test_resume_bit_exact(data, evals, tmp_path):
    full = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(10, 10))
    part = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(10, 10), out_dir=tmp_path, stop_after=14)
    assert part.report is None and not part.state.finished
    bundle = tmp_path / "DP_FT" / "resume.ckpt"
    done = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(10, 10), out_dir=tmp_path,
               resume_from=bundle)
    assert done.state.finished and done.model.digest() == full.model.digest()
    assert done.report.domains == full.report.domains
    assert done.state.omega_sum == full.state.omega_sum


def test_divergence_reports_phase_and_step(data):
    with pytest.raises(DivergenceError, match=r"'ft'.*step"):
        run(RecipeKind.FT, data, iterations=50, optim=OptimizerConfig(lr=1e6))


def test_large_lambda_pins_backbone(data, evals):
    free = run(RecipeKind.DP_FT, data, evals, with_wr=True, lam=0.0, iterations=(10, 20), reg_kind="l2")
    pinned = run(RecipeKind.DP_FT, data, evals, with_wr=True, lam=1e6, iterations=(10, 20), reg_kind="l2")
    assert pinned.report.weight_distance < 1e-4 * free.report.weight_distance


@pytest.mark.parametrize("reg_kind,opts", [("l2", {}), ("ewc", {}), ("rgn_weighted", {"rgn_granularity": "filter"}),
                                           ("rgn_weighted", {"update": "explicit"})])
def test_regularizer_variants_run(data, evals, reg_kind, opts):
    res = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(5, 5), reg_kind=reg_kind, reg_options=opts)
    assert res.state.regularizers["ft"]["kind"] == reg_kind
    assert math.isfinite(res.state.last_omega)


def test_proximal_and_explicit_agree_for_small_steps(data, evals):
    opt = OptimizerConfig(lr=1e-3)
    a = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(3, 5), optim=opt, reg_kind="l2", lam=0.5)
    b = run(RecipeKind.DP_FT, data, evals, with_wr=True, iterations=(3, 5), optim=opt, reg_kind="l2", lam=0.5,
            reg_options={"update": "explicit"})
    for k, v in a.model.state_tensors().items():
        torch.testing.assert_close(v, b.model.state_tensors()[k], rtol=1e-3, atol=1e-8)


def test_batch_indices_cover_epoch():
    idx = [batch_indices(3, "ft", s, 10, 4) for s in range(2)]
    assert len(set(int(i) for b in idx for i in b)) == 8
    assert (batch_indices(3, "ft", 5, 10, 4) == batch_indices(3, "ft", 5, 10, 4)).all()
    assert not (batch_indices(3, "ft", 0, 100, 8) == batch_indices(3, "dp", 0, 100, 8)).all()


def test_regularizing_frozen_backbone_rejected(data):
    from dataclasses import replace
    from rgnft.model_graph import FreezePolicy

    r = tiny(RecipeKind.DP_FT, with_wr=True, iterations=(2, 2))
    bad = replace(r, phases=(r.phases[0], replace(r.phases[1], freeze=FreezePolicy.make(roles=["backbone"]))))
    with pytest.raises(RecipeError, match="frozen"):
        run_recipe(fresh(), bad, data, toy_task_loss, rgn_batches=2, rgn_batch_size=16)
