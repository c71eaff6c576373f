import numpy as np
import pytest

from nddepth import tensor as T
from nddepth.refinement import (ContextEncoder, GruWeights, RefineConfig, RefinementInputs,
                                build_input, constant_update_weights, conv_gru_step, fuse,
                                gru_gates, init_hidden, refine)
from nddepth.tensor import Tensor, finite_diff_check

CFG = RefineConfig(proj_channels=3, context_channels=2, hidden_channels=4, t_max=3)


def inputs(rng, h=6, w=7, cfg=CFG):
    d1 = Tensor(rng.uniform(1, 3, size=(1, h, w)))
    d2 = Tensor(rng.uniform(1, 3, size=(1, h, w)))
    u1 = Tensor(rng.uniform(0, 1, size=(1, h, w)))
    u2 = Tensor(rng.uniform(0, 1, size=(1, h, w)))
    ctx = Tensor(rng.normal(size=(cfg.context_channels, h, w)))
    h0 = Tensor(np.tanh(rng.normal(size=(cfg.hidden_channels, h, w))))
    return d1, d2, u1, u2, ctx, h0


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(t_max=0)
    assert CFG.input_channels == 5 and CFG.gate_in_channels == 9


@pytest.mark.parametrize("bias,target", [(-60.0, "h"), (60.0, "cand")])
def test_gate_semantics(bias, target, rng):
    w = GruWeights.random(CFG, rng)
    w.w_z.bias.data[:] = bias
    h = Tensor(np.tanh(rng.normal(size=(4, 6, 6))))
    x = Tensor(rng.normal(size=(5, 6, 6)))
    z, _, cand = gru_gates(h, x, w)
    new = conv_gru_step(h, x, w).data
    ref = h.data if target == "h" else cand
    assert np.abs(new - ref).max() < 1e-6


def test_gru_step_matches_gate_formula(rng):
    w = GruWeights.random(CFG, rng)
    h = Tensor(np.tanh(rng.normal(size=(4, 5, 5))))
    x = Tensor(rng.normal(size=(5, 5, 5)))
    z, r, cand = gru_gates(h, x, w)
    np.testing.assert_allclose(conv_gru_step(h, x, w).data, (1 - z) * h.data + z * cand, atol=1e-15)
    assert (0 < r).all() and (r < 1).all()


def test_hidden_bounded_over_iterations(rng):
    # float64 tanh rounds to exactly 1 past ~19, so keep pre-activations moderate
    w = GruWeights.random(CFG, rng)
    h = Tensor(np.tanh(rng.normal(size=(4, 8, 8))))
    for _ in range(10):
        h = conv_gru_step(h, Tensor(rng.normal(size=(5, 8, 8))), w)
        assert np.abs(h.data).max() < 1.0


def test_gru_step_gradient(rng):
    w = GruWeights.random(CFG, rng)
    h = Tensor(np.tanh(rng.normal(size=(4, 5, 6))))
    x = Tensor(rng.normal(size=(5, 5, 6)))
    params = [h, x, *w.w_z.tensors(), *w.w_r.tensors(), *w.w_h.tensors()]
    assert finite_diff_check(lambda *a: T.sum_(conv_gru_step(h, x, w)), params) < 1e-5


def test_build_input_channels(rng):
    d1, d2, u1, u2, ctx, _ = inputs(rng)
    r = RefinementInputs(d1, d2, u1, u2, ctx)
    np.testing.assert_allclose(r.dif.data, np.abs(d1.data - d2.data))
    out = build_input(r, GruWeights.random(CFG, rng))
    assert out.shape == (5, 6, 7)
    np.testing.assert_array_equal(out.data[3:], ctx.data)


def test_refinement_inputs_shape_check(rng):
    d1, d2, u1, u2, ctx, _ = inputs(rng)
    with pytest.raises(T.ShapeError):
        RefinementInputs(d1, Tensor(np.ones((1, 3, 3))), u1, u2, ctx)


def test_zero_heads_are_identity(rng):
    d1, d2, u1, u2, ctx, h0 = inputs(rng)
    w = GruWeights.random(CFG, rng)
    for head in (w.head1, w.head2):
        for t in head.tensors():
            t.data[:] = 0.0
    res = refine(d1, d2, u1, u2, ctx, h0, w, t_max=4)
    assert (res.d1.data == d1.data).all() and (res.d2.data == d2.data).all()
    assert len(res.trace1) == len(res.trace2) == 4


def test_constant_update_trace_is_linear(rng):
    d1, d2, u1, u2, ctx, h0 = inputs(rng)
    w = constant_update_weights(CFG, 0.1, -0.05, rng)
    res = refine(d1, d2, u1, u2, ctx, h0, w, t_max=5)
    for t, (a, b) in enumerate(zip(res.trace1, res.trace2), start=1):
        np.testing.assert_allclose(a.data, d1.data + 0.1 * t, atol=1e-12)
        np.testing.assert_allclose(b.data, d2.data - 0.05 * t, atol=1e-12)


def test_depth_clamped_positive(rng):
    d1, d2, u1, u2, ctx, h0 = inputs(rng)
    w = constant_update_weights(CFG, -10.0, 0.0)
    res = refine(d1, d2, u1, u2, ctx, h0, w, t_max=2)
    np.testing.assert_array_equal(res.d1.data, CFG.min_depth)


def test_refine_checks(rng):
    d1, d2, u1, u2, ctx, h0 = inputs(rng)
    w = GruWeights.random(CFG, rng)
    with pytest.raises(ValueError):
        refine(d1, d2, u1, u2, ctx, h0, w, t_max=0)
    with pytest.raises(T.ShapeError):
        refine(d1, d2, u1, u2, ctx, Tensor(np.zeros((3, 6, 7))), w)


def test_init_hidden(rng):
    p1, p2 = Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(2, 4, 4)))
    np.testing.assert_allclose(init_hidden(p1, p2).data,
                               np.tanh(np.concatenate([p1.data, p2.data])))
    w = GruWeights.random(CFG, rng, head_channels=6)
    p3 = Tensor(rng.normal(size=(4, 4, 4)))
    h = init_hidden(p1, p3, w)
    assert h.shape == (4, 4, 4) and np.abs(h.data).max() < 1
    with pytest.raises(T.ShapeError):
        init_hidden(p1, p3, GruWeights.random(CFG, rng))
    with pytest.raises(T.ShapeError):
        init_hidden(p1, Tensor(np.zeros((2, 3, 3))))


def test_fuse():
    two = Tensor(np.full((1, 3, 4), 2.0))
    np.testing.assert_allclose(fuse(two, two, 12, 16).data, 2.0)


def test_fuse_symmetric(rng):
    a, b = Tensor(rng.uniform(1, 2, (1, 3, 4))), Tensor(rng.uniform(1, 2, (1, 3, 4)))
    np.testing.assert_array_equal(fuse(a, b, 12, 16).data, fuse(b, a, 12, 16).data)


def test_weights_array_roundtrip(rng):
    w = GruWeights.random(CFG, rng, head_channels=6)
    w2 = GruWeights.from_arrays(w.to_arrays())
    for (k, a), (k2, b) in zip(w.named_tensors().items(), w2.named_tensors().items()):
        assert k == k2 and (a.data == b.data).all()
    assert w2.context_channels == CFG.context_channels


def test_weights_missing_tensor(rng):
    arrays = GruWeights.random(CFG, rng).to_arrays()
    del arrays["w_r.bias"]
    with pytest.raises(ValueError):
        GruWeights.from_arrays(arrays)


def test_weights_inconsistent(rng):
    arrays = GruWeights.random(CFG, rng).to_arrays()
    arrays["head1.pointwise"] = np.zeros((2, 4))
    arrays["head1.bias"] = np.zeros(2)
    with pytest.raises(T.ShapeError):
        GruWeights.from_arrays(arrays)


def test_context_encoder(rng):
    enc = ContextEncoder.random(3, rng)
    out = enc(rng.uniform(0, 1, size=(16, 20, 3)), 4, 5)
    assert out.shape == (3, 4, 5) and not out.requires_grad
    assert np.abs(out.data).max() < 1


def test_step_is_convex_combination(rng):
    w = GruWeights.random(CFG, rng, scale=2.0)
    h = Tensor(np.tanh(rng.normal(size=(4, 7, 7))))
    x = Tensor(rng.normal(0, 2, size=(5, 7, 7)))
    _, _, cand = gru_gates(h, x, w)
    new = conv_gru_step(h, x, w).data
    lo, hi = np.minimum(h.data, cand), np.maximum(h.data, cand)
    assert (new >= lo - 1e-15).all() and (new <= hi + 1e-15).all()


def test_independent_graphs_on_threads(rng):
    from concurrent.futures import ThreadPoolExecutor

    w = GruWeights.random(CFG, rng)
    cases = [inputs(np.random.default_rng(s)) for s in range(4)]

    def run(case):
        d1, d2, u1, u2, ctx, h0 = case
        d1 = Tensor(d1.data, requires_grad=True)
        res = refine(d1, d2, u1, u2, ctx, h0, w.__class__.from_arrays(w.to_arrays()), t_max=2)
        T.sum_(res.d1).backward()
        return d1.grad.copy()

    serial = [run(c) for c in cases]
    with ThreadPoolExecutor(4) as pool:
        threaded = list(pool.map(run, cases))
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a, b)
