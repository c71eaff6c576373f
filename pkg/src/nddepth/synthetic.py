"""Piecewise-planar scenes with analytic depth, normal, distance and labels.

Scene description files are plain text, one ``key = value`` per line::

    width = 160
    height = 120
    fx = 100
    fy = 100
    cx = 79.5
    cy = 59.5
    layout = tiles            # or: nearest
    plane = 0 1 0.3 1.2  0 80 160 120
    plane = 0.2 0 1 4    0 0 80 80

A plane line holds ``nx ny nz d`` and, for the ``tiles`` layout, the pixel
rectangle ``x0 y0 x1 y1`` (end-exclusive) it covers; later planes paint over
earlier ones. ``random = n`` instead of plane lines draws an n-plane tiled
scene from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics

MIN_RAY_DOT = 1e-3


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    distance: float
    rect: tuple[int, int, int, int] | None = None

    @classmethod
    def make(cls, nx, ny, nz, d, rect=None) -> "Plane":
        n = np.array([nx, ny, nz], dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0 or d == 0:
            raise SceneError("plane needs a non-zero normal and must not pass through the camera")
        n, d = n / norm, d / norm
        if d < 0:
            n, d = -n, -d
        return cls(tuple(n.tolist()), float(d), None if rect is None else tuple(int(r) for r in rect))


@dataclass
class SceneSpec:
    width: int = 160
    height: int = 120
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(100.0, 100.0, 79.5, 59.5))
    layout: str = "tiles"
    planes: list[Plane] = field(default_factory=list)
    random_planes: int = 0

    def to_text(self) -> str:
        k = self.intrinsics
        lines = [f"width = {self.width}", f"height = {self.height}",
                 f"fx = {k.fx!r}", f"fy = {k.fy!r}", f"cx = {k.cx!r}", f"cy = {k.cy!r}",
                 f"layout = {self.layout}"]
        if self.random_planes:
            lines.append(f"random = {self.random_planes}")
        for p in self.planes:
            vals = [*p.normal, p.distance]
            line = "plane = " + " ".join(repr(float(v)) for v in vals)
            if p.rect is not None:
                line += "  " + " ".join(str(r) for r in p.rect)
            lines.append(line)
        return "\n".join(lines) + "\n"


@dataclass
class PlanarScene:
    intrinsics: Intrinsics
    planes: list[Plane]
    labels: np.ndarray  # (H, W) plane index per pixel
    depth: np.ndarray  # (H, W)
    normals: np.ndarray  # (H, W, 3)
    distance: np.ndarray  # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def default_spec() -> SceneSpec:
    """160x120 scene with a floor, a wall and a tilted plane."""
    return SceneSpec(planes=[
        Plane.make(0.0, 1.0, 0.3, 1.2, (0, 80, 160, 120)),
        Plane.make(0.2, 0.0, 1.0, 4.0, (0, 0, 80, 80)),
        Plane.make(-0.5, -0.3, 1.0, 3.0, (80, 0, 160, 80)),
    ])


def parse_spec(text: str) -> SceneSpec:
    values: dict[str, str] = {}
    planes: list[Plane] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "plane":
            nums = value.split()
            if len(nums) not in (4, 8):
                raise SceneError(f"line {lineno}: plane needs 'nx ny nz d [x0 y0 x1 y1]'")
            try:
                n_d = [float(x) for x in nums[:4]]
                rect = [int(x) for x in nums[4:]] or None
            except ValueError:
                raise SceneError(f"line {lineno}: non-numeric plane entry") from None
            planes.append(Plane.make(*n_d, rect))
        else:
            values[key] = value
    unknown = set(values) - {"width", "height", "fx", "fy", "cx", "cy", "layout", "random"}
    if unknown:
        raise SceneError(f"unknown keys: {sorted(unknown)}")
    try:
        width = int(values.get("width", 160))
        height = int(values.get("height", 120))
        k = Intrinsics(float(values.get("fx", 100.0)), float(values.get("fy", 100.0)),
                       float(values.get("cx", (width - 1) / 2)), float(values.get("cy", (height - 1) / 2)))
        n_random = int(values.get("random", 0))
    except ValueError as exc:
        raise SceneError(str(exc)) from None
    layout = values.get("layout", "tiles")
    return SceneSpec(width, height, k, layout, planes, n_random)


def _guillotine(width: int, height: int, n: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    rects = [(0, 0, width, height)]
    while len(rects) < n:
        i = max(range(len(rects)), key=lambda j: (rects[j][2] - rects[j][0]) * (rects[j][3] - rects[j][1]))
        x0, y0, x1, y1 = rects.pop(i)
        frac = rng.uniform(0.35, 0.65)
        if x1 - x0 >= y1 - y0:
            cut = x0 + int(round(frac * (x1 - x0)))
            rects += [(x0, y0, cut, y1), (cut, y0, x1, y1)]
        else:
            cut = y0 + int(round(frac * (y1 - y0)))
            rects += [(x0, y0, x1, cut), (x0, cut, x1, y1)]
    return rects


def random_spec(n_planes: int, seed: int, width: int = 160, height: int = 120,
                intrinsics: Intrinsics | None = None, max_tilt_deg: float = 40.0) -> SceneSpec:
    """Tiled scene of ``n_planes`` camera-facing planes at 1-4 m."""
    rng = np.random.default_rng(seed)
    k = intrinsics or Intrinsics(100.0, 100.0, (width - 1) / 2, (height - 1) / 2)
    planes = []
    for rect in _guillotine(width, height, n_planes, rng):
        theta = np.deg2rad(rng.uniform(0.0, max_tilt_deg))
        phi = rng.uniform(0.0, 2 * np.pi)
        n = (np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta))
        planes.append(Plane.make(*n, rng.uniform(1.0, 4.0), rect))
    return SceneSpec(width, height, k, "tiles", planes)


def generate(spec: SceneSpec, seed: int = 0) -> PlanarScene:
    """Build the analytic maps; the seed only matters for ``random`` specs."""
    if spec.random_planes and not spec.planes:
        spec = random_spec(spec.random_planes, seed, spec.width, spec.height, spec.intrinsics)
    if not spec.planes:
        raise SceneError("scene has no planes")
    h, w, k = spec.height, spec.width, spec.intrinsics
    rays = k.rays(h, w)
    normals = np.array([p.normal for p in spec.planes])
    dists = np.array([p.distance for p in spec.planes])
    dots = np.einsum("hwc,pc->phw", rays, normals)

    if spec.layout == "tiles":
        labels = np.full((h, w), -1, dtype=np.int64)
        for i, p in enumerate(spec.planes):
            if p.rect is None:
                raise SceneError(f"plane {i} has no rectangle in tiles layout")
            x0, y0, x1, y1 = p.rect
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise SceneError(f"plane {i} rectangle {p.rect} is outside the {w}x{h} image")
            labels[y0:y1, x0:x1] = i
        if (labels < 0).any():
            raise SceneError("tiles do not cover the image")
        dot = np.take_along_axis(dots, labels[None], axis=0)[0]
        if np.any(dot <= MIN_RAY_DOT):
            bad = int(labels[dot <= MIN_RAY_DOT][0])
            raise SceneError(f"plane {bad} is degenerate or behind the camera over its region")
    elif spec.layout == "nearest":
        hit = dots > MIN_RAY_DOT
        t = np.where(hit, dists[:, None, None] / np.where(hit, dots, 1.0), np.inf)
        labels = np.argmin(t, axis=0)
        if not np.all(np.isfinite(t.min(axis=0))):
            raise SceneError("some pixels see no plane")
        dot = np.take_along_axis(dots, labels[None], axis=0)[0]
    else:
        raise SceneError(f"unknown layout {spec.layout!r}")

    depth = dists[labels] / dot
    return PlanarScene(k, list(spec.planes), labels, depth, normals[labels], dists[labels])


def perturb(scene: PlanarScene, sigma_depth: float = 0.0, sigma_normal: float = 0.0,
            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Noisy copies of the depth and normal maps.

    Depth gets additive Gaussian noise; each normal is rotated about a random
    axis perpendicular to it by a Gaussian angle, then renormalised.
    """
    if sigma_depth < 0 or sigma_normal < 0:
        raise ValueError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    depth = scene.depth.copy()
    normals = scene.normals.copy()
    if sigma_depth > 0:
        depth = depth + rng.normal(0.0, sigma_depth, size=depth.shape)
    if sigma_normal > 0:
        a = rng.normal(size=normals.shape)
        a -= np.einsum("hwc,hwc->hw", a, normals)[..., None] * normals
        a /= np.linalg.norm(a, axis=-1, keepdims=True)
        angle = rng.normal(0.0, sigma_normal, size=depth.shape)[..., None]
        # rotating n about an axis perpendicular to it
        normals = np.cos(angle) * normals + np.sin(angle) * np.cross(a, normals)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return depth, normals
