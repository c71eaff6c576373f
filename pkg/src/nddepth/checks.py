"""Finite-difference gradient checks for every differentiable component.

Each check builds small random inputs from a seed, picks a scalar function
of them, and returns the worst relative error between analytic and central
difference gradients over three input shapes (one small scene for the full
refinement composition).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import (LossWeights, distance_l1_loss, normal_cosine_loss, normalize_normals,
                     plane_consistency_loss, silog_loss, uncertainty_loss)
from .pipeline import HeadOutputs, SceneTargets, forward
from .refinement import (GruWeights, RefineConfig, RefinementInputs, build_input, conv_gru_step,
                         depth_update_head, init_hidden)
from .segmentation import PlaneMask
from .synthetic import generate, random_spec
from .geometry import Intrinsics
from .tensor import SepConvWeights, Tensor, finite_diff_check

SHAPES = ((2, 8, 8), (3, 5, 7), (1, 6, 4))
SMALL_CFG = RefineConfig(proj_channels=3, context_channels=2, hidden_channels=4, t_max=3)


def _away_from_zero(rng, shape, low=0.2, high=1.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _weighted_sum(rng, shape):
    """Random fixed projection so a check is not blind to sign-symmetric errors."""
    c = rng.normal(size=shape)
    return lambda t: T.sum_(T.mul(t, c))


def check_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, h, w in SHAPES:
        x = Tensor(rng.normal(size=(c, h, w)))
        sw = SepConvWeights.random(c, c + 1, rng)
        proj = _weighted_sum(rng, (c + 1, h, w))
        worst = max(worst, finite_diff_check(lambda *a: proj(T.conv2d_separable(x, sw)),
                                             [x, *sw.tensors()]))
    return worst


def _check_activation(kind: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in SHAPES:
        x = Tensor(rng.normal(0, 2, size=shape))
        proj = _weighted_sum(rng, shape)
        worst = max(worst, finite_diff_check(lambda t: proj(T.activation(t, kind)), x))
    return worst


def check_resize(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (c, h, w), (oh, ow) in zip(SHAPES, ((16, 16), (3, 11), (13, 2))):
        x = Tensor(rng.normal(size=(c, h, w)))
        proj = _weighted_sum(rng, (c, oh, ow))
        worst = max(worst, finite_diff_check(lambda t: proj(T.bilinear_resize(t, oh, ow)), x))
    return worst


def check_silog(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, h, w in SHAPES:
        gt = rng.uniform(0.5, 5.0, size=(h, w))
        pred = Tensor(rng.uniform(0.5, 5.0, size=(1, h, w)))
        valid = rng.random((h, w)) > 0.2
        worst = max(worst, finite_diff_check(lambda p: silog_loss(p, gt, valid), pred))
    return worst


def check_cosine(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, h, w in SHAPES:
        gt = rng.normal(size=(h, w, 3))
        gt /= np.linalg.norm(gt, axis=-1, keepdims=True)
        raw = Tensor(rng.normal(size=(3, h, w)))
        worst = max(worst, finite_diff_check(
            lambda r: normal_cosine_loss(normalize_normals(r), gt), raw))
    return worst


def check_l1(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, h, w in SHAPES:
        gt = rng.normal(size=(h, w))
        pred = Tensor(gt[None] + _away_from_zero(rng, (1, h, w)))
        worst = max(worst, finite_diff_check(lambda p: distance_l1_loss(p, gt), pred))
    return worst


def check_uncertainty(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, h, w in SHAPES:
        g1, g2 = rng.uniform(0.2, 0.8, size=(2, h, w))
        raw1 = Tensor(np.log(g1 / (1 - g1))[None] + _away_from_zero(rng, (1, h, w), 0.5, 2.0))
        raw2 = Tensor(np.log(g2 / (1 - g2))[None] + _away_from_zero(rng, (1, h, w), 0.5, 2.0))
        worst = max(worst, finite_diff_check(
            lambda a, b: uncertainty_loss(T.sigmoid(a), T.sigmoid(b), g1, g2), [raw1, raw2]))
    return worst


def check_plane(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, h, w in SHAPES:
        labels = (np.arange(w)[None, :] >= w // 2).astype(np.int64).repeat(h, axis=0)
        mask = PlaneMask(rng.random((h, w)) > 0.1, [0, 1], labels)
        n = Tensor(rng.normal(size=(3, h, w)))
        d = Tensor(rng.uniform(1, 3, size=(1, h, w)))
        worst = max(worst, finite_diff_check(
            lambda a, b: plane_consistency_loss(a, b, mask), [n, d]))
    return worst


def _refine_inputs(rng, h, w, cfg):
    d1 = Tensor(rng.uniform(1.0, 3.0, size=(1, h, w)))
    d2 = Tensor(d1.data + _away_from_zero(rng, (1, h, w), 0.1, 0.5))
    u1 = Tensor(rng.uniform(0, 1, size=(1, h, w)))
    u2 = Tensor(rng.uniform(0, 1, size=(1, h, w)))
    ctx = Tensor(rng.normal(size=(cfg.context_channels, h, w)))
    return d1, d2, u1, u2, ctx


def check_build_input(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = SMALL_CFG
    worst = 0.0
    for _, h, w in SHAPES:
        d1, d2, u1, u2, ctx = _refine_inputs(rng, h, w, cfg)
        wts = GruWeights.random(cfg, rng)
        proj = _weighted_sum(rng, (cfg.input_channels, h, w))
        params = [d1, d2, u1, u2, ctx, *wts.proj1.tensors(), *wts.proj2.tensors()]
        worst = max(worst, finite_diff_check(
            lambda *a: proj(build_input(RefinementInputs(d1, d2, u1, u2, ctx), wts)), params))
    return worst


def check_gru_step(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = SMALL_CFG
    worst = 0.0
    for _, h, w in SHAPES:
        hid = Tensor(np.tanh(rng.normal(size=(cfg.hidden_channels, h, w))))
        x = Tensor(rng.normal(size=(cfg.input_channels, h, w)))
        wts = GruWeights.random(cfg, rng)
        params = [hid, x, *wts.w_z.tensors(), *wts.w_r.tensors(), *wts.w_h.tensors()]
        worst = max(worst, finite_diff_check(lambda *a: T.sum_(conv_gru_step(hid, x, wts)), params))
    return worst


def check_update_head(seed: int) -> float:
    """Update head composed into the depth loss, as used in training."""
    rng = np.random.default_rng(seed)
    cfg = SMALL_CFG
    worst = 0.0
    for _, h, w in SHAPES:
        hid = Tensor(np.tanh(rng.normal(size=(cfg.hidden_channels, h, w))))
        wts = GruWeights.random(cfg, rng)
        d1 = rng.uniform(1.0, 3.0, size=(1, h, w))
        d2 = rng.uniform(1.0, 3.0, size=(1, h, w))
        gt = rng.uniform(1.0, 3.0, size=(h, w))

        def f(*_):
            delta1, delta2 = depth_update_head(hid, wts)
            return T.add(silog_loss(T.add(d1, delta1), gt), silog_loss(T.add(d2, delta2), gt))

        worst = max(worst, finite_diff_check(f, [hid, *wts.head1.tensors(), *wts.head2.tensors()]))
    return worst


def check_hidden_init(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, h, w in SHAPES:
        # c + 4 channels never equals the hidden width, so the 1x1 projection is exercised
        wts = GruWeights.random(SMALL_CFG, rng, head_channels=c + 4)
        pen1, pen2 = Tensor(rng.normal(size=(c, h, w))), Tensor(rng.normal(size=(4, h, w)))
        proj = _weighted_sum(rng, (SMALL_CFG.hidden_channels, h, w))
        worst = max(worst, finite_diff_check(lambda *a: proj(init_hidden(pen1, pen2, wts)),
                                             [pen1, pen2, wts.init_weight, wts.init_bias]))
    return worst


def check_refine_overall(seed: int, max_entries: int | None = None, sizes=(6,)) -> float:
    """Full refine -> overall loss, differentiated w.r.t. every refinement weight."""
    rng = np.random.default_rng(seed)
    cfg = SMALL_CFG
    loss_w = LossWeights(m_steps=cfg.t_max)
    worst = 0.0
    for size in sizes:
        k = Intrinsics(size * 0.7, size * 0.7, (size - 1) / 2, (size - 1) / 2)
        scene = generate(random_spec(2, seed, size, size, k))
        heads = HeadOutputs.from_scene(scene, rng, pen_channels=2)
        # random normals keep the plane-consistency term away from its kink
        heads.normal_raw.data += rng.normal(0, 0.3, size=heads.normal_raw.shape)
        wts = GruWeights.random(SMALL_CFG, rng, head_channels=4)
        ctx = Tensor(rng.normal(size=(cfg.context_channels, size, size)))
        targets = SceneTargets.from_scene(scene)
        labels = (np.arange(size)[None, :] >= size // 2).astype(np.int64).repeat(size, axis=0)
        mask = PlaneMask(np.ones((size, size), dtype=bool), [0, 1], labels)
        worst = max(worst, finite_diff_check(
            lambda *a: forward(heads, ctx, wts, targets, loss_w, cfg, mask).total,
            wts.tensors(), max_entries=max_entries, rng=rng))
    return worst


COMPONENTS: dict[str, Callable[[int], float]] = {
    "conv2d_separable": check_conv,
    "sigmoid": lambda s: _check_activation("sigmoid", s),
    "tanh": lambda s: _check_activation("tanh", s),
    "bilinear_resize": check_resize,
    "silog": check_silog,
    "cosine": check_cosine,
    "l1": check_l1,
    "uncertainty": check_uncertainty,
    "plane_consistency": check_plane,
    "init_hidden": check_hidden_init,
    "build_input": check_build_input,
    "conv_gru_step": check_gru_step,
    "depth_update_head": check_update_head,
    "refine_overall": check_refine_overall,
}


def run(components: list[str] | None = None, seed: int = 0) -> dict[str, float]:
    names = components or list(COMPONENTS)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown component(s): {', '.join(unknown)}")
    return {n: COMPONENTS[n](seed) for n in names}
