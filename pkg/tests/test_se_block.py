import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import TINY
from rgnft.model_graph import Role
from rgnft.se_block import (GateForm, SEBlock, SeBlockParams, SeInsertionPlan, gate_histogram, hidden_width,
                            insert_se, se_forward, se_gate_path_gradient)
from rgnft.synth import build_model

D = torch.float64


def rel_err(a, b):
    return float((a - b).abs().max() / b.abs().max())


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def make_branch(c, seed=0):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(c, c, 3, 3, generator=gen, dtype=D) * 0.3
    return lambda x: torch.tanh(torch.nn.functional.conv2d(x, w, padding=1)), w


def forced(c, bias, seed=0, scale=0.05):
    """Params whose gate pre-activations sit near ``bias``."""
    gen = torch.Generator().manual_seed(seed)
    p = SeBlockParams.random(c, 1, generator=gen, scale=scale)
    p.expand_bias = torch.full((c,), float(bias), dtype=D)
    return p


def test_hidden_width():
    assert hidden_width(16, 16) == 1 and hidden_width(5, 16) == 1 and hidden_width(64, 4) == 16
    with pytest.raises(ValueError):
        hidden_width(4, 0)


def test_forward_matches_scalar_loop():
    x = torch.tensor([[[[0.1, -0.4, 0.7], [1.2, 0.0, -0.3], [0.5, 0.9, -1.1]],
                       [[-0.2, 0.3, 0.8], [0.4, -0.6, 0.2], [1.0, -0.9, 0.05]]]], dtype=D)
    r = torch.tanh(x * 1.3 - 0.2)
    p = SeBlockParams(torch.tensor([[0.5, -1.0], [0.25, 0.75]], dtype=D), torch.tensor([0.1, -0.05], dtype=D),
                      torch.tensor([[1.5, -0.5], [0.3, 2.0]], dtype=D), torch.tensor([-0.2, 0.4], dtype=D), 1)
    xs, rs = x[0].tolist(), r[0].tolist()
    pooled = [sum(sum(row) for row in rs[c]) / 9 for c in range(2)]
    hidden = [max(0.0, sum(pooled[c] * p.reduce_weight[c, h].item() for c in range(2)) + p.reduce_bias[h].item())
              for h in range(2)]
    gate = [sig(sum(hidden[h] * p.expand_weight[h, c].item() for h in range(2)) + p.expand_bias[c].item())
            for c in range(2)]
    ref = [[[xs[c][i][j] + gate[c] * rs[c][i][j] for j in range(3)] for i in range(3)] for c in range(2)]
    out = se_forward(x, r, p, GateForm.RESIDUAL)
    np.testing.assert_allclose(out[0].numpy(), np.array(ref), rtol=0, atol=1e-10)
    # pure gating pools the input itself
    xpool = [sum(sum(row) for row in xs[c]) / 9 for c in range(2)]
    hid = [max(0.0, sum(xpool[c] * p.reduce_weight[c, h].item() for c in range(2)) + p.reduce_bias[h].item())
           for h in range(2)]
    g2 = [sig(sum(hid[h] * p.expand_weight[h, c].item() for h in range(2)) + p.expand_bias[c].item()) for c in range(2)]
    ref2 = [[[g2[c] * xs[c][i][j] for j in range(3)] for i in range(3)] for c in range(2)]
    np.testing.assert_allclose(se_forward(x, None, p, "pure_gating")[0].numpy(), np.array(ref2), atol=1e-10)


def test_saturation_limits():
    x = torch.randn(2, 3, 4, 4, dtype=D)
    r = torch.randn(2, 3, 4, 4, dtype=D)
    up = SeBlockParams(torch.zeros(3, 3, dtype=D), torch.zeros(3, dtype=D), torch.zeros(3, 3, dtype=D),
                       torch.full((3,), 20.0, dtype=D), 1)
    assert (se_forward(x, r, up) - (x + r)).abs().max() < 1e-6
    down = SeBlockParams(*up.tensors()[:3], torch.full((3,), -20.0, dtype=D), 1)
    assert (se_forward(x, r, down) - x).abs().max() < 1e-6


def test_forward_errors():
    p = SeBlockParams.random(3, 1)
    x = torch.randn(1, 3, 4, 4, dtype=D)
    with pytest.raises(ValueError, match="same shape"):
        se_forward(x, torch.randn(1, 3, 5, 4, dtype=D), p)
    with pytest.raises(ValueError, match="channels"):
        se_forward(torch.randn(1, 4, 4, 4, dtype=D), None, p, GateForm.PURE)
    with pytest.raises(ValueError):
        se_forward(torch.randn(3, 4, 4, dtype=D), None, p, GateForm.PURE)


@pytest.mark.parametrize("form", [GateForm.RESIDUAL, GateForm.PURE])
def test_gradient_check_against_finite_differences(form):
    torch.manual_seed(0)
    c = 4
    branch, _ = make_branch(c)
    x = torch.randn(2, c, 5, 5, dtype=D)
    p = SeBlockParams.random(c, 2, generator=torch.Generator().manual_seed(1))
    prim = [x, *p.tensors()]
    dirs = [torch.randn_like(t) for t in prim]

    def f(x_, rw, rb, ew, eb):
        q = SeBlockParams(rw, rb, ew, eb, 2)
        return se_forward(x_, branch(x_) if form is GateForm.RESIDUAL else None, q, form)

    _, jvp = torch.autograd.functional.jvp(f, tuple(prim), tuple(dirs))
    h = 1e-6
    plus = f(*[t + h * d for t, d in zip(prim, dirs)])
    minus = f(*[t - h * d for t, d in zip(prim, dirs)])
    fd = (plus - minus) / (2 * h)
    assert rel_err(jvp, fd) < 1e-6


@pytest.mark.parametrize("form", [GateForm.RESIDUAL, GateForm.PURE])
def test_path_decomposition_sums_to_full_vjp(form):
    c = 3
    branch, _ = make_branch(c, seed=2)
    x = torch.randn(2, c, 4, 4, dtype=D)
    p = SeBlockParams.random(c, 1, generator=torch.Generator().manual_seed(3))
    cot = torch.randn(2, c, 4, 4, dtype=D)
    parts = se_gate_path_gradient(x, p, cot, branch, form)
    xr = x.clone().requires_grad_(True)
    out = se_forward(xr, branch(xr) if form is GateForm.RESIDUAL else None, p, form)
    (full,) = torch.autograd.grad((out * cot).sum(), xr)
    identity = cot if form is GateForm.RESIDUAL else torch.zeros_like(cot)
    torch.testing.assert_close(parts.gate_term + parts.branch_term + identity, full, rtol=1e-12, atol=1e-12)
    # full VJP vs central differences
    h = 1e-6
    d = torch.randn_like(x)

    def g(z):
        return (se_forward(z, branch(z) if form is GateForm.RESIDUAL else None, p, form) * cot).sum()

    fd = (g(x + h * d) - g(x - h * d)) / (2 * h)
    assert abs(float((full * d).sum()) - float(fd)) / abs(float(fd)) < 1e-6


def test_gate_factor_at_half():
    c = 3
    p = SeBlockParams(torch.randn(c, c, dtype=D), torch.zeros(c, dtype=D), torch.zeros(c, c, dtype=D),
                      torch.zeros(c, dtype=D), 1)
    res = se_gate_path_gradient(torch.randn(1, c, 3, 3, dtype=D), p, torch.ones(1, c, 3, 3, dtype=D),
                                gate_form=GateForm.PURE)
    assert torch.equal(res.gate_factor, torch.full((1, c), 0.25, dtype=D))


def test_saturated_gate_term_vanishes():
    c = 4
    x = torch.randn(2, c, 4, 4, dtype=D)
    cot = torch.randn_like(x)
    branch, _ = make_branch(c, seed=4)
    base = se_gate_path_gradient(x, forced(c, 0.0, scale=0.5), cot, branch).gate_term.norm()
    for b in (20.0, -20.0):
        sat = se_gate_path_gradient(x, forced(c, b, scale=0.5), cot, branch).gate_term.norm()
        assert sat < 1e-6 * base


def test_saturation_masking_monotone():
    c = 4
    x = torch.randn(2, c, 4, 4, dtype=D)
    cot = torch.randn_like(x)
    for sign in (1.0, -1.0):
        norms = [float(se_gate_path_gradient(x, forced(c, sign * b, scale=0.01), cot,
                                             gate_form=GateForm.PURE).gate_term.norm())
                 for b in np.arange(4.5, 30.0, 1.5)]
        assert all(b < a for a, b in zip(norms, norms[1:]))


def test_branch_masking():
    c = 3
    branch_w = torch.randn(c, c, 3, 3, dtype=D, requires_grad=True)
    x = torch.randn(2, c, 4, 4, dtype=D)
    cot = torch.randn_like(x)

    def grads(bias):
        xr = x.clone().requires_grad_(True)
        r = torch.tanh(torch.nn.functional.conv2d(xr, branch_w, padding=1))
        out = se_forward(xr, r, forced(c, bias, scale=0.1))
        gw, gx = torch.autograd.grad((out * cot).sum(), [branch_w, xr])
        return gw, gx

    gw_off, _ = grads(-20.0)
    gw_on, _ = grads(20.0)
    assert gw_off.norm() < 1e-6 * gw_on.norm()
    branch = lambda z: torch.tanh(torch.nn.functional.conv2d(z, branch_w.detach(), padding=1))
    for bias in (-20.0, 20.0):
        parts = se_gate_path_gradient(x, forced(c, bias, scale=0.1), cot, branch)
        _, gx = grads(bias)
        torch.testing.assert_close(gx - parts.gate_term - parts.branch_term, cot, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(-30, 30), st.integers(0, 2**31))
def test_gate_range_open_interval(c, r, bias, seed):
    p = forced(c, bias, seed=seed % 1000, scale=1.0)
    p = SeBlockParams(torch.randn(c, hidden_width(c, r), dtype=D), torch.zeros(hidden_width(c, r), dtype=D),
                      torch.randn(hidden_width(c, r), c, dtype=D), p.expand_bias, r)
    res = se_gate_path_gradient(torch.randn(2, c, 3, 3, dtype=D), p, torch.ones(2, c, 3, 3, dtype=D),
                                gate_form=GateForm.PURE)
    assert bool(((res.gate > 0) & (res.gate < 1)).all())


def test_module_record_and_errors():
    blk = SEBlock(4, 2, GateForm.PURE)
    cot = torch.randn(1, 4, 3, 3, dtype=D)
    with pytest.raises(RuntimeError, match="recorded"):
        blk.gate_path_gradient(cot)
    blk.record = True
    blk(torch.randn(1, 4, 3, 3, dtype=D))
    assert blk.gate_path_gradient(cot).gate_term.shape == cot.shape
    with pytest.raises(ValueError, match="branch"):
        SEBlock(4, 2, GateForm.RESIDUAL)(torch.randn(1, 4, 3, 3, dtype=D))
    with pytest.raises(ValueError, match="branch"):
        se_gate_path_gradient(torch.randn(1, 4, 3, 3, dtype=D), blk.params(), cot)


def _x(seed=0):
    return torch.rand(6, 3, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_insert_zero_stages_is_noop(tiny_model):
    x = _x()
    with torch.no_grad():
        before = tiny_model(x)
    assert insert_se(tiny_model, SeInsertionPlan(())) == []
    with torch.no_grad():
        after = tiny_model(x)
    assert all(torch.equal(a, b) for a, b in zip(_flat(before), _flat(after)))


def _flat(out):
    if isinstance(out, torch.Tensor):
        return [out]
    if isinstance(out, dict):
        return [v for k in sorted(out) for v in _flat(out[k])]
    return [v for o in out for v in _flat(o)]


def test_insert_all_stages_near_identity(tiny_model):
    channels = tiny_model.module.stage_channels()
    assert len(channels) == 4
    names = insert_se(tiny_model, SeInsertionPlan.for_stages(channels, reduction=4))
    assert len(names) == 16
    assert all(tiny_model[n].role is Role.SE_BLOCK for n in names)
    # each inserted gate changes the activations it sees by at most 1 - sigmoid(3)
    x = _x(1)
    with torch.no_grad():
        for name, stage in tiny_model.module.backbone.stages.items():
            y = stage(x)
            gated = tiny_model.module.se[name](y)
            mask = y.abs() > 0
            dev = float(((gated - y).abs()[mask] / y.abs()[mask]).max())
            assert dev <= 1 - sig(3.0) + 1e-12
            assert dev == pytest.approx(1 - sig(3.0), rel=1e-9)
            x = gated


def test_insert_errors(tiny_model):
    ch = tiny_model.module.stage_channels()
    insert_se(tiny_model, SeInsertionPlan.for_stages(ch, [2]))
    with pytest.raises(ValueError, match="already"):
        insert_se(tiny_model, SeInsertionPlan.for_stages(ch, [2]))
    with pytest.raises(KeyError):
        insert_se(tiny_model, SeInsertionPlan(((9, 8, 4),)))
    with pytest.raises(ValueError, match="channels"):
        insert_se(tiny_model, SeInsertionPlan(((3, ch[3] + 1, 4),)))
    with pytest.raises(ValueError, match="at most one"):
        SeInsertionPlan(((1, 4, 4), (1, 4, 4)))
    plan = SeInsertionPlan.for_stages(ch, [1, 3], reduction=2)
    assert SeInsertionPlan.from_dict(plan.to_dict()) == plan


def test_histograms(tiny_model, tiny_data):
    ch = tiny_model.module.stage_channels()
    insert_se(tiny_model, SeInsertionPlan.for_stages(ch, reduction=4))
    batches = tiny_data.batches(16)
    before = {k: v.clone() for k, v in tiny_model.state_tensors().items()}
    hists = gate_histogram(tiny_model, batches, 3)
    assert len(hists) == 4
    for h, (sid, c) in zip(hists, sorted(ch.items())):
        assert int(h.counts.sum()) == h.total == 3 * 16 * c
    assert all(torch.equal(v, before[k]) for k, v in tiny_model.state_tensors().items())
    # near-identity init: every gate is sigmoid(3) > 0.95
    assert all(h.fraction_saturated == 1.0 for h in hists)
    rows = hists[0].to_csv().splitlines()
    assert rows[0] == "bin_left,bin_right,count" and len(rows) == 21


def test_histogram_clamped_and_alternating(tiny_model, tiny_data):
    ch = tiny_model.module.stage_channels()
    insert_se(tiny_model, SeInsertionPlan.for_stages(ch, [4], reduction=4))
    from rgnft.se_block import se_blocks

    (_, blk), = se_blocks(tiny_model.module)
    with torch.no_grad():
        blk.expand_weight.zero_()
        blk.expand_bias.zero_()
    (h,) = gate_histogram(tiny_model, tiny_data.batches(16), 2)
    assert np.count_nonzero(h.counts) == 1 and h.fraction_saturated == 0.0
    with torch.no_grad():
        blk.expand_bias.copy_(torch.tensor([20.0 if i % 2 else -20.0 for i in range(blk.channels)]))
    (h,) = gate_histogram(tiny_model, tiny_data.batches(16), 2)
    assert h.fraction_saturated == 1.0


def test_histogram_errors(tiny_model, tiny_data):
    with pytest.raises(ValueError, match="no SE"):
        gate_histogram(tiny_model, tiny_data.batches(16), 1)
    insert_se(tiny_model, SeInsertionPlan.for_stages(tiny_model.module.stage_channels(), [1], reduction=4))
    with pytest.raises(ValueError, match="requested"):
        gate_histogram(tiny_model, tiny_data.batches(16), 99)
