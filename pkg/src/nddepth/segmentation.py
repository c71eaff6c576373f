"""Planar region detection from normal and distance maps.

Edges join 4-connected neighbours. Each edge carries a dissimilarity; the
normal and distance terms are min-max normalised over the image and summed,
then a Felzenszwalb-Huttenlocher graph segmentation groups the pixels.
Regions above a size threshold form the plane mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_K = 0.3
MIN_REGION_SIZE = 200


@dataclass
class EdgeList:
    """Undirected edges between flat (row-major) pixel indices, a < b."""

    a: np.ndarray
    b: np.ndarray
    weight: np.ndarray
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.weight)

    def with_weights(self, weight: np.ndarray) -> "EdgeList":
        return EdgeList(self.a, self.b, np.asarray(weight, dtype=np.float64), self.shape)

    def max_incident(self) -> np.ndarray:
        """Largest weight touching each pixel, as an H x W map."""
        out = np.zeros(self.shape[0] * self.shape[1])
        np.maximum.at(out, self.a, self.weight)
        np.maximum.at(out, self.b, self.weight)
        return out.reshape(self.shape)


@dataclass
class SegmentLabels:
    labels: np.ndarray  # (H, W) int64, ids 0..n-1
    counts: np.ndarray  # (n,)

    @property
    def n_segments(self) -> int:
        return len(self.counts)


@dataclass
class PlaneMask:
    mask: np.ndarray  # (H, W) bool
    region_ids: list[int]
    labels: np.ndarray = field(repr=False)  # segment labels the mask was built from


def grid_edges(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """4-connectivity pairs, ordered by first endpoint then second."""
    idx = np.arange(height * width).reshape(height, width)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    order = np.lexsort((b, a))
    return a[order], b[order]


def normal_dissimilarity(normals: np.ndarray) -> EdgeList:
    h, w, _ = normals.shape
    a, b = grid_edges(h, w)
    flat = normals.reshape(-1, 3)
    return EdgeList(a, b, np.linalg.norm(flat[b] - flat[a], axis=1), (h, w))


def distance_dissimilarity(distance: np.ndarray) -> EdgeList:
    h, w = distance.shape
    a, b = grid_edges(h, w)
    flat = distance.ravel()
    return EdgeList(a, b, np.abs(flat[b] - flat[a]), (h, w))


def normalize_dissimilarity(edges: EdgeList) -> EdgeList:
    """Min-max rescale to [0, 1]; a constant list maps to all zeros."""
    w = edges.weight
    if len(w) == 0:
        return edges.with_weights(w)
    lo, hi = w.min(), w.max()
    if hi <= lo:
        return edges.with_weights(np.zeros_like(w))
    out = (w - lo) / (hi - lo)
    # pin the endpoints against rounding
    out[w == lo] = 0.0
    out[w == hi] = 1.0
    return edges.with_weights(out)


def geometric_dissimilarity(normals: np.ndarray, distance: np.ndarray) -> EdgeList:
    if normals.shape[:2] != distance.shape:
        raise ValueError(f"normal map {normals.shape} and distance map {distance.shape} differ")
    en = normalize_dissimilarity(normal_dissimilarity(normals))
    ed = normalize_dissimilarity(distance_dissimilarity(distance))
    return en.with_weights(en.weight + ed.weight)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def felzenszwalb_segment(edges: EdgeList, k: float = DEFAULT_K) -> SegmentLabels:
    """Graph-based segmentation (Felzenszwalb & Huttenlocher, 2004).

    Edges are visited in ascending weight, ties broken by (a, b). Two
    components merge when the edge weight does not exceed either side's
    ``max internal edge + k / size``.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    h, w = edges.shape
    n = h * w
    order = np.lexsort((edges.b, edges.a, edges.weight))
    ds = _DisjointSet(n)
    thresh = [k] * n  # internal difference 0 plus k/1
    for a, b, wt in zip(edges.a[order].tolist(), edges.b[order].tolist(),
                        edges.weight[order].tolist()):
        ra, rb = ds.find(a), ds.find(b)
        if ra == rb:
            continue
        if wt <= thresh[ra] and wt <= thresh[rb]:
            root = ds.union(ra, rb)
            thresh[root] = wt + k / ds.size[root]

    roots = np.fromiter((ds.find(i) for i in range(n)), dtype=np.int64, count=n)
    # relabel by first appearance in row-major order
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    labels = rank[inverse].reshape(h, w)
    return SegmentLabels(labels, np.bincount(labels.ravel(), minlength=len(first)))


def filter_planar_regions(segments: SegmentLabels, min_region_size: int = MIN_REGION_SIZE) -> PlaneMask:
    """Keep segments with strictly more than ``min_region_size`` pixels."""
    keep = np.flatnonzero(segments.counts > min_region_size)
    mask = np.isin(segments.labels, keep)
    return PlaneMask(mask, keep.tolist(), segments.labels)


def detect_planes(normals: np.ndarray, distance: np.ndarray, k: float = DEFAULT_K,
                  min_region_size: int = MIN_REGION_SIZE) -> tuple[SegmentLabels, PlaneMask, EdgeList]:
    edges = geometric_dissimilarity(normals, distance)
    segments = felzenszwalb_segment(edges, k)
    return segments, filter_planar_regions(segments, min_region_size), edges
