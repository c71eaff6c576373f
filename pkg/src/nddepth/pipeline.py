"""End-to-end loss on one scene with free per-pixel head outputs.

The two decoder heads are replaced by learnable maps (raw normals, plane
distance, a direct depth estimate, uncertainty logits and penultimate
features). Everything downstream of them is the real machinery: depth from
normal and distance, online plane detection, ConvGRU refinement and the
weighted loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, depth_from_normal_distance_t
from .losses import (LossTerms, LossWeights, distance_l1_loss, multiscale_depth_loss,
                     normal_cosine_loss, normalize_normals, overall_loss, plane_consistency_loss,
                     uncertainty_loss, uncertainty_target)
from .refinement import GruWeights, RefineConfig, RefineResult, init_hidden, refine
from .segmentation import DEFAULT_K, MIN_REGION_SIZE, PlaneMask, detect_planes
from .synthetic import PlanarScene, generate, perturb, random_spec
from .tensor import Tensor


@dataclass
class HeadOutputs:
    normal_raw: Tensor  # (3, H, W)
    distance: Tensor  # (1, H, W)
    depth2: Tensor  # (1, H, W)
    u1_raw: Tensor  # (1, H, W)
    u2_raw: Tensor  # (1, H, W)
    pen1: Tensor  # (C1, H, W)
    pen2: Tensor  # (C2, H, W)

    def tensors(self) -> list[Tensor]:
        return [self.normal_raw, self.distance, self.depth2, self.u1_raw, self.u2_raw,
                self.pen1, self.pen2]

    @classmethod
    def from_scene(cls, scene: PlanarScene, rng: np.random.Generator, pen_channels: int = 4,
                   normal_noise: float = 0.3, rel_noise: float = 0.15) -> "HeadOutputs":
        """Coarse initial estimates: GT corrupted by noise."""
        h, w = scene.shape
        _, noisy_n = perturb(scene, 0.0, normal_noise, seed=int(rng.integers(2**31)))
        dist = scene.distance * np.exp(rng.normal(0, rel_noise, size=(h, w)))
        depth2 = scene.depth * np.exp(rng.normal(0, rel_noise, size=(h, w)))
        return cls(
            Tensor(np.moveaxis(noisy_n, -1, 0), True),
            Tensor(dist[None], True),
            Tensor(depth2[None], True),
            Tensor(np.zeros((1, h, w)), True),
            Tensor(np.zeros((1, h, w)), True),
            Tensor(rng.normal(0, 0.5, size=(pen_channels, h, w)), True),
            Tensor(rng.normal(0, 0.5, size=(pen_channels, h, w)), True),
        )


@dataclass
class SceneTargets:
    depth: np.ndarray
    normals: np.ndarray  # (H, W, 3)
    distance: np.ndarray
    rays: np.ndarray  # (H, W, 3)
    valid: np.ndarray

    @classmethod
    def from_scene(cls, scene: PlanarScene) -> "SceneTargets":
        h, w = scene.shape
        return cls(scene.depth, scene.normals, scene.distance, scene.intrinsics.rays(h, w),
                   scene.depth > 0)


@dataclass
class ForwardResult:
    total: Tensor
    terms: LossTerms
    refined: RefineResult
    plane_mask: PlaneMask


def predicted_plane_mask(heads: HeadOutputs, k: float = DEFAULT_K,
                         min_region_size: int = MIN_REGION_SIZE) -> PlaneMask:
    """Online plane detection on the current (detached) predictions."""
    n = normalize_normals(heads.normal_raw.detach()).data
    return detect_planes(np.moveaxis(n, 0, -1), heads.distance.data[0], k, min_region_size)[1]


def forward(heads: HeadOutputs, context: Tensor, weights: GruWeights, targets: SceneTargets,
            loss_w: LossWeights, cfg: RefineConfig, plane_mask: PlaneMask) -> ForwardResult:
    normals = normalize_normals(heads.normal_raw)
    d1 = T.clamp_min(depth_from_normal_distance_t(normals, heads.distance, targets.rays), cfg.min_depth)
    d2 = T.clamp_min(heads.depth2, cfg.min_depth)
    u1, u2 = T.sigmoid(heads.u1_raw), T.sigmoid(heads.u2_raw)
    h0 = init_hidden(heads.pen1, heads.pen2, weights)
    res = refine(d1, d2, u1, u2, context, h0, weights, cfg.t_max, cfg.min_depth)

    valid = targets.valid
    b = loss_w.b_tolerance
    terms = LossTerms(
        depth=multiscale_depth_loss(res.trace1, res.trace2, targets.depth, valid,
                                    loss_w.gamma, loss_w.kappa, loss_w.eta),
        normal=normal_cosine_loss(normals, targets.normals, valid),
        distance=distance_l1_loss(heads.distance, targets.distance, valid),
        # targets come from the head depths the uncertainties describe
        uncertainty=uncertainty_loss(u1, u2, uncertainty_target(d1.data, targets.depth[None], b),
                                     uncertainty_target(d2.data, targets.depth[None], b), valid),
        plane=plane_consistency_loss(normals, heads.distance, plane_mask),
    )
    return ForwardResult(overall_loss(terms, loss_w), terms, res, plane_mask)


@dataclass
class OverfitReport:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ratio(self) -> float:
        return self.losses[-1] / self.losses[0]


def small_scene(size: int = 32, seed: int = 0, n_planes: int = 3) -> PlanarScene:
    k = Intrinsics(size * 0.625, size * 0.625, (size - 1) / 2, (size - 1) / 2)
    return generate(random_spec(n_planes, seed, size, size, k))


def overfit(scene: PlanarScene, steps: int = 300, lr: float = 0.01, map_lr: float = 2.0,
            seed: int = 0, cfg: RefineConfig | None = None, loss_w: LossWeights | None = None,
            k: float = DEFAULT_K, min_region_size: int = MIN_REGION_SIZE) -> OverfitReport:
    """Plain gradient descent on every weight and head map of one scene.

    Network weights step with ``lr``; the per-pixel head maps step with
    ``map_lr``, since mean-reduced losses give each pixel a gradient of
    order 1/(H*W). The plane mask is re-detected from the predictions at
    every step.
    """
    cfg = cfg or RefineConfig(proj_channels=8, context_channels=8, hidden_channels=16)
    loss_w = loss_w or LossWeights(m_steps=cfg.t_max)
    rng = np.random.default_rng(seed)
    h, w = scene.shape
    heads = HeadOutputs.from_scene(scene, rng)
    weights = GruWeights.random(cfg, rng, head_channels=heads.pen1.shape[0] * 2)
    context = Tensor(rng.normal(0, 1, size=(cfg.context_channels, h, w)))
    targets = SceneTargets.from_scene(scene)

    report = OverfitReport()
    start = time.perf_counter()
    groups = [(weights.tensors(), lr), (heads.tensors(), map_lr)]
    for step in range(steps + 1):
        mask = predicted_plane_mask(heads, k, min_region_size)
        out = forward(heads, context, weights, targets, loss_w, cfg, mask)
        report.losses.append(out.total.item())
        if step == steps:
            break
        for params, _ in groups:
            for p in params:
                p.zero_grad()
        out.total.backward()
        for params, rate in groups:
            for p in params:
                p.data -= rate * p.grad
    report.seconds = time.perf_counter() - start
    return report
