"""Training objectives over :class:`~nddepth.tensor.Tensor` maps.

Maps are (C, H, W) tensors; masks and targets are plain arrays. Pixel sums
are reduced with ``reduction="mean"`` by default (mean over the counted
pixels or pairs), which divides the summed form by a resolution-dependent
constant; pass ``reduction="sum"`` for the summed form.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .segmentation import PlaneMask


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 0.25
    lambda4: float = 1.0
    lambda5: float = 0.01
    kappa: float = 10.0
    eta: float = 0.85
    gamma: float = 0.85
    m_steps: int = 3
    b_tolerance: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.eta > 1 or self.gamma > 1:
            raise ValueError("eta and gamma must lie in (0, 1]")
        if int(self.m_steps) != self.m_steps:
            raise ValueError("m_steps must be an integer")
        self.m_steps = int(self.m_steps)

    @property
    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


def _reduce(total: T.Tensor, count: int, reduction: str) -> T.Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return T.mul(total, 1.0 / max(count, 1))
    raise ValueError(f"unknown reduction {reduction!r}")


def _valid(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape[-2:], dtype=bool)
    return np.asarray(valid, dtype=bool)


def silog_loss(pred: T.Tensor, gt: np.ndarray, valid: np.ndarray | None = None,
               kappa: float = 10.0, eta: float = 0.85) -> T.Tensor:
    """kappa * sqrt(mean(g^2) - eta * mean(g)^2) with g = log pred - log gt."""
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    m = _valid(valid, pred.shape).reshape(pred.shape[-2:])
    m = np.broadcast_to(m, pred.shape) & (gt > 0)
    n = int(m.sum())
    if n == 0:
        raise ValueError("silog_loss needs at least one valid pixel")
    if np.any(pred.data[m] <= 0):
        raise ValueError("predicted depth must be positive on valid pixels")
    safe_pred = T.add(T.mul(pred, m), ~m)  # log(1) = 0 off the mask
    g = T.mul(T.sub(T.log(safe_pred), np.log(np.where(m, gt, 1.0))), m)
    mean_g = T.mul(T.sum_(g), 1.0 / n)
    mean_g2 = T.mul(T.sum_(T.mul(g, g)), 1.0 / n)
    radicand = T.sub(mean_g2, T.mul(T.mul(mean_g, mean_g), eta))
    # rounding can push an exact-zero radicand slightly negative
    radicand = T.clamp_min(radicand, 0.0)
    if radicand.item() == 0.0:
        return T.mul(radicand, kappa)
    return T.mul(T.sqrt(radicand), kappa)


def multiscale_depth_loss(preds1: Sequence[T.Tensor], preds2: Sequence[T.Tensor], gt: np.ndarray,
                          valid: np.ndarray | None = None, gamma: float = 0.85,
                          kappa: float = 10.0, eta: float = 0.85) -> T.Tensor:
    """Sum over iterates s = 1..m of gamma^(m-s) * (silog(p1_s) + silog(p2_s))."""
    if len(preds1) != len(preds2):
        raise ValueError("both heads need the same number of iterates")
    if not preds1:
        raise ValueError("need at least one iterate")
    m = len(preds1)
    total = None
    for s, (p1, p2) in enumerate(zip(preds1, preds2), start=1):
        term = T.mul(T.add(silog_loss(p1, gt, valid, kappa, eta),
                           silog_loss(p2, gt, valid, kappa, eta)), gamma ** (m - s))
        total = term if total is None else T.add(total, term)
    return total


def normalize_normals(raw: T.Tensor, eps: float = 1e-12) -> T.Tensor:
    """Scale each pixel's 3-vector (axis 0) to unit length."""
    norm = T.sqrt(T.add(T.sum_(T.mul(raw, raw), axis=0, keepdims=True), eps))
    return T.div(raw, norm)


def normal_cosine_loss(pred_n: T.Tensor, gt_n: np.ndarray, valid: np.ndarray | None = None,
                       reduction: str = "mean") -> T.Tensor:
    """Sum or mean of 1 - <pred, gt>; ``gt_n`` may be (3, H, W) or (H, W, 3)."""
    gt_n = np.asarray(gt_n, dtype=np.float64)
    if gt_n.shape != pred_n.shape:
        gt_n = np.moveaxis(gt_n, -1, 0)
    m = _valid(valid, pred_n.shape)
    cos = T.sum_(T.mul(pred_n, gt_n), axis=0)
    return _reduce(T.masked_sum(T.sub(1.0, cos), m), int(m.sum()), reduction)


def distance_l1_loss(pred_d: T.Tensor, gt_d: np.ndarray, valid: np.ndarray | None = None,
                     reduction: str = "mean") -> T.Tensor:
    gt_d = np.asarray(gt_d, dtype=np.float64).reshape(pred_d.shape)
    m = _valid(valid, pred_d.shape)
    return _reduce(T.masked_sum(T.abs_(T.sub(pred_d, gt_d)), m), int(m.sum()), reduction)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def uncertainty_target(pred: np.ndarray, gt: np.ndarray, b: float = 0.2) -> np.ndarray:
    """1 - exp(-|pred - gt| / b); a constant target, never differentiated."""
    if not b > 0:
        raise ValueError("b must be positive")
    pred = pred.data if isinstance(pred, T.Tensor) else np.asarray(pred, dtype=np.float64)
    target = -np.expm1(-np.abs(pred - np.asarray(gt, dtype=np.float64)) / b)
    # past |e| ~ 37 b the value rounds to 1.0; keep the range half-open
    return np.minimum(target, _BELOW_ONE)


def uncertainty_loss(u1: T.Tensor, u2: T.Tensor, u1_gt: np.ndarray, u2_gt: np.ndarray,
                     valid: np.ndarray | None = None, reduction: str = "mean") -> T.Tensor:
    return T.add(distance_l1_loss(u1, u1_gt, valid, reduction),
                 distance_l1_loss(u2, u2_gt, valid, reduction))


def complementary_map(d1, d2):
    """|d1 - d2| per pixel; stays differentiable when given tensors."""
    if isinstance(d1, T.Tensor) or isinstance(d2, T.Tensor):
        d1, d2 = T.as_tensor(d1), T.as_tensor(d2)
        if d1.shape != d2.shape:
            raise ValueError(f"shape mismatch {d1.shape} vs {d2.shape}")
        return T.abs_(T.sub(d1, d2))
    d1, d2 = np.asarray(d1, dtype=np.float64), np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape:
        raise ValueError(f"shape mismatch {d1.shape} vs {d2.shape}")
    return np.abs(d1 - d2)


def consistency_pairs(plane_mask: PlaneMask) -> tuple[np.ndarray, np.ndarray]:
    """Masks of counted forward-difference pairs along x (H, W-1) and y (H-1, W).

    A pair counts only when both pixels are in the mask and share a segment id.
    """
    m, lab = plane_mask.mask, plane_mask.labels
    px = m[:, :-1] & m[:, 1:] & (lab[:, :-1] == lab[:, 1:])
    py = m[:-1, :] & m[1:, :] & (lab[:-1, :] == lab[1:, :])
    return px, py


def plane_consistency_loss(normals: T.Tensor, distance: T.Tensor, plane_mask: PlaneMask,
                           reduction: str = "mean") -> T.Tensor:
    """L1 norm of forward differences of normals and distance inside planar regions."""
    px, py = consistency_pairs(plane_mask)
    total = None
    for field_ in (normals, distance):
        dx = T.sub(field_[:, :, 1:], field_[:, :, :-1])
        dy = T.sub(field_[:, 1:, :], field_[:, :-1, :])
        part = T.add(T.masked_sum(T.abs_(dx), px), T.masked_sum(T.abs_(dy), py))
        total = part if total is None else T.add(total, part)
    return _reduce(total, int(px.sum() + py.sum()), reduction)


@dataclass
class LossTerms:
    depth: T.Tensor
    normal: T.Tensor
    distance: T.Tensor
    uncertainty: T.Tensor
    plane: T.Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("depth", "normal", "distance", "uncertainty", "plane")}


def overall_loss(terms: LossTerms, w: LossWeights | None = None) -> T.Tensor:
    w = w or LossWeights()
    parts = (terms.depth, terms.normal, terms.distance, terms.uncertainty, terms.plane)
    total = None
    for lam, part in zip(w.lambdas, parts):
        scaled = T.mul(T.as_tensor(part), lam)
        total = scaled if total is None else T.add(total, scaled)
    return total
