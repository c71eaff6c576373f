"""Pinhole camera model and depth <-> (normal, plane distance) conversions.

Pixel (u, v) is column u, row v, with integer coordinates at pixel centres.
Normals are stored H x W x 3 and oriented so that N . P > 0, which makes
every plane-to-origin distance positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

DENOM_EPS = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (half-pixel convention)."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5)

    def rays(self, height: int, width: int) -> np.ndarray:
        """K^-1 p~ for every pixel, shape (H, W, 3) with unit z component."""
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


def valid_depth(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def backproject(u: float, v: float, depth: float, k: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array([depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth])


def project(point, k: Intrinsics) -> tuple[float, float]:
    x, y, z = point
    if not z > 0:
        raise ValueError("point must lie in front of the camera")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy


def depth_from_normal_distance(normals: np.ndarray, distance: np.ndarray, k: Intrinsics,
                               denom_eps: float = DENOM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Depth D = dist / (N . K^-1 p~) per pixel.

    Returns ``(depth, valid)``; pixels with a near-zero denominator, a
    non-positive result or non-finite inputs are invalid and hold 0.
    """
    h, w = distance.shape
    if normals.shape != (h, w, 3):
        raise ValueError(f"normal map {normals.shape} does not match distance map {distance.shape}")
    denom = np.einsum("hwc,hwc->hw", normals, k.rays(h, w))
    ok = np.isfinite(denom) & np.isfinite(distance) & (np.abs(denom) >= denom_eps)
    depth = np.zeros((h, w))
    np.divide(distance, denom, out=depth, where=ok)
    ok &= depth > 0
    depth[~ok] = 0.0
    return depth, ok


def distance_from_depth_normal(depth: np.ndarray, normals: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Plane-to-origin distance N . (D K^-1 p~); 0 where depth is invalid."""
    h, w = depth.shape
    if normals.shape != (h, w, 3):
        raise ValueError(f"normal map {normals.shape} does not match depth map {depth.shape}")
    ok = valid_depth(depth)
    pts = np.where(ok[..., None], depth[..., None] * k.rays(h, w), 0.0)
    return np.einsum("hwc,hwc->hw", normals, pts)


def points_from_depth(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Back-projected points, shape (H, W, 3)."""
    h, w = depth.shape
    return depth[..., None] * k.rays(h, w)


def normal_from_depth(depth: np.ndarray, k: Intrinsics, window: int = 5,
                      rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel total-least-squares plane fit over a ``window`` x ``window`` patch.

    The normal is the eigenvector of the smallest eigenvalue of the centred
    covariance of the back-projected patch points, flipped so that N . P > 0
    at the centre pixel. Pixels whose window leaves the image, touches an
    invalid depth, or whose points are nearly collinear are invalid (zero
    normal).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    h, w = depth.shape
    r = window // 2
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < window or w < window:
        return normals, valid

    ok = valid_depth(depth)
    pts = np.where(ok[..., None], points_from_depth(np.where(ok, depth, 0.0), k), 0.0)
    # (h-2r, w-2r, 3, window, window)
    patches = np.lib.stride_tricks.sliding_window_view(pts, (window, window), axis=(0, 1))
    patches = patches.reshape(h - 2 * r, w - 2 * r, 3, window * window)
    full = np.lib.stride_tricks.sliding_window_view(ok, (window, window)).all(axis=(-1, -2))

    centred = patches - patches.mean(axis=-1, keepdims=True)
    cov = np.einsum("hwin,hwjn->hwij", centred, centred)
    evals, evecs = np.linalg.eigh(cov)
    n = evecs[..., :, 0]
    # rank <= 1 means the points do not span a plane
    planar = evals[..., 1] > rank_tol * np.maximum(evals[..., 2], np.finfo(float).tiny)
    centre = pts[r:h - r, r:w - r]
    side = np.einsum("hwc,hwc->hw", n, centre)
    n = np.where((side < 0)[..., None], -n, n)

    inner = full & planar
    normals[r:h - r, r:w - r] = np.where(inner[..., None], n, 0.0)
    valid[r:h - r, r:w - r] = inner
    return normals, valid


def pointcloud_from_depth(depth: np.ndarray, k: Intrinsics, color: np.ndarray | None = None,
                          mask: np.ndarray | None = None) -> PointCloud:
    ok = valid_depth(depth)
    if mask is not None:
        ok &= mask.astype(bool)
    pts = points_from_depth(np.where(ok, depth, 0.0), k)[ok]
    colors = None
    if color is not None:
        colors = np.asarray(color)[ok]
        if colors.dtype != np.uint8:
            colors = np.clip(np.rint(colors * 255.0 if colors.max(initial=0) <= 1.0 else colors), 0, 255)
    return PointCloud(pts, colors)


def depth_from_normal_distance_t(normals: T.Tensor, distance: T.Tensor, rays: np.ndarray) -> T.Tensor:
    """Differentiable counterpart of :func:`depth_from_normal_distance`.

    ``normals`` is (3, H, W), ``distance`` (1, H, W) and ``rays`` (H, W, 3).
    No degeneracy masking is done here; callers clamp the result.
    """
    denom = T.sum_(T.mul(normals, np.moveaxis(rays, -1, 0)), axis=0, keepdims=True)
    return T.div(distance, denom)
