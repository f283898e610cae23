"""Instance-boundary-aware superpoint construction.

The k-NN graph is pruned with 2D instance masks before Felzenszwalb
segmentation, so points that belong to different 2D instances can never end
up in the same superpoint:

1. ``build_boundary_aware_graph`` keeps a k-NN edge only if both endpoints
   see the same instance id (in the same view, by default).
2. ``felzenszwalb_segment`` merges components along edges sorted by weight
   ``1 - n_i·n_j`` under adaptive per-component thresholds, then force-merges
   components smaller than ``sp_min`` along the same edges.

The union-find passes run as numba kernels when numba is importable and as
plain Python otherwise; both give identical partitions.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Any

import numpy as np

from ovseg3r_prep.config import BackgroundPolicy, CrossViewPolicy, SegmentConfig
from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.geometry import DEFAULT_K, KnnIndex, build_knn_index, estimate_normals
from ovseg3r_prep.model import (
    CorrespondenceTable,
    EdgeList,
    InstanceRaster,
    NormalField,
    PointCloud,
    SuperpointMask,
)
from ovseg3r_prep.parallel import chunked_map

logger = logging.getLogger(__name__)

try:
    from numba import njit  # type: ignore

    _HAVE_NUMBA = True
except Exception:
    njit = None  # type: ignore
    _HAVE_NUMBA = False


def _kernel(func: Callable[..., Any]) -> Callable[..., Any]:
    return njit(cache=True)(func) if _HAVE_NUMBA else func


@_kernel
def _find(parent: np.ndarray, x: int) -> int:
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@_kernel
def _link(parent: np.ndarray, size: np.ndarray, a: int, b: int) -> int:
    # a and b are distinct roots; the larger component keeps its root.
    if size[a] < size[b]:
        a, b = b, a
    parent[b] = a
    size[a] += size[b]
    return a


@_kernel
def _adaptive_pass(
    ei: np.ndarray,
    ej: np.ndarray,
    ew: np.ndarray,
    order: np.ndarray,
    parent: np.ndarray,
    size: np.ndarray,
    threshold: np.ndarray,
    sp_thresh: float,
) -> int:
    merges = 0
    for k in order:
        ri = _find(parent, ei[k])
        rj = _find(parent, ej[k])
        w = ew[k]
        if ri != rj and w <= threshold[ri] and w <= threshold[rj]:
            root = _link(parent, size, ri, rj)
            threshold[root] = w + sp_thresh / size[root]
            merges += 1
    return merges


@_kernel
def _force_merge_pass(
    ei: np.ndarray,
    ej: np.ndarray,
    order: np.ndarray,
    parent: np.ndarray,
    size: np.ndarray,
    sp_min: int,
) -> int:
    merges = 0
    for k in order:
        ri = _find(parent, ei[k])
        rj = _find(parent, ej[k])
        if ri != rj and (size[ri] < sp_min or size[rj] < sp_min):
            _link(parent, size, ri, rj)
            merges += 1
    return merges


@_kernel
def _all_roots(parent: np.ndarray) -> np.ndarray:
    roots = np.empty(parent.size, dtype=np.int64)
    for x in range(parent.size):
        roots[x] = _find(parent, x)
    return roots


def relabel_first_appearance(roots: np.ndarray) -> tuple[np.ndarray, int]:
    """Map component ids to 0..n-1 in order of first appearance by index."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse.ravel()], int(first.size)


class DisjointForest:
    """Union-find over N elements with per-root adaptive thresholds.

    Union by size, path compression. ``threshold`` is only meaningful at
    roots; a fresh root holds ``sp_thresh``.
    """

    def __init__(self, count: int, sp_thresh: float) -> None:
        if count < 1:
            raise ValidationError("a forest needs at least one element")
        self.parent = np.arange(count, dtype=np.int64)
        self.size = np.ones(count, dtype=np.int64)
        self.threshold = np.full(count, float(sp_thresh), dtype=np.float64)
        self.sp_thresh = float(sp_thresh)

    def __len__(self) -> int:
        return int(self.parent.size)

    def find(self, x: int) -> int:
        return int(_find(self.parent, x))

    def union(self, a: int, b: int) -> int:
        """Merge the components of ``a`` and ``b``; return the surviving root."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        return int(_link(self.parent, self.size, ra, rb))

    def component_size(self, x: int) -> int:
        return int(self.size[self.find(x)])

    def merge_adaptive(self, edges: EdgeList, order: np.ndarray) -> int:
        """Threshold-gated merge pass; returns the number of merges."""
        return int(
            _adaptive_pass(
                edges.i,
                edges.j,
                edges.w.astype(np.float64),
                order,
                self.parent,
                self.size,
                self.threshold,
                self.sp_thresh,
            )
        )

    def merge_small(self, edges: EdgeList, order: np.ndarray, sp_min: int) -> int:
        """Force-merge components below ``sp_min`` along edges; returns merges."""
        return int(
            _force_merge_pass(
                edges.i, edges.j, order, self.parent, self.size, int(sp_min)
            )
        )

    def labels(self) -> tuple[np.ndarray, int]:
        """Consecutive labels in order of first appearance, and their count."""
        return relabel_first_appearance(_all_roots(self.parent))


def sorted_edge_order(edges: EdgeList) -> np.ndarray:
    """Edge processing order: ascending weight, then ascending (i, j)."""
    return np.lexsort((edges.j, edges.i, edges.w)).astype(np.int64)


def compute_edge_weights(
    i: np.ndarray, j: np.ndarray, normals: NormalField
) -> np.ndarray:
    """``1 - n_i·n_j`` per edge, clipped to [0, 2], as float32."""
    n = normals.normals.astype(np.float64)
    a, b = n[i], n[j]
    dot = (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]) + a[:, 2] * b[:, 2]
    return np.clip(1.0 - dot, 0.0, 2.0).astype(np.float32)


def _edges_from_keys(keys: np.ndarray, n: int, normals: NormalField) -> EdgeList:
    keys = np.unique(keys)
    lo, hi = keys // n, keys % n
    return EdgeList(i=lo, j=hi, w=compute_edge_weights(lo, hi, normals))


def _check_graph_inputs(
    points: PointCloud, normals: NormalField, index: KnnIndex
) -> int:
    n = points.point_count
    if normals.point_count != n:
        raise ValidationError(f"{normals.point_count} normals for {n} points")
    if index.point_count != n:
        raise ValidationError(f"k-NN index covers {index.point_count} of {n} points")
    return n


def build_knn_graph(
    points: PointCloud, normals: NormalField, index: KnnIndex
) -> EdgeList:
    """Geometry-only graph: every k-NN pair, deduplicated, no instance test."""
    n = _check_graph_inputs(points, normals, index)
    i = np.repeat(np.arange(n, dtype=np.int64), index.k)
    j = index.neighbors.ravel()
    keys = np.minimum(i, j) * n + np.maximum(i, j)
    return _edges_from_keys(keys, n, normals)


def build_boundary_aware_graph(
    points: PointCloud,
    normals: NormalField,
    index: KnnIndex,
    corr: CorrespondenceTable,
    raster: InstanceRaster,
    cfg: SegmentConfig,
    threads: int = 1,
) -> EdgeList:
    """k-NN graph with edges across 2D instance boundaries removed.

    An edge (i, j) survives when the instance ids at both endpoints' nearest
    pixels are equal. Endpoints from different views are dropped under
    ``cross_view_policy=prune``; under ``keep`` their raw ids are compared.
    Under ``background_policy=prune`` a background endpoint drops the edge.

    Returns:
        Deduplicated edges sorted by (i, j).

    Raises:
        ValidationError: If inputs disagree on N or raster/view dimensions.
    """
    n = _check_graph_inputs(points, normals, index)
    if corr.point_count != n:
        raise ValidationError(f"correspondence covers {corr.point_count} of {n} points")
    ids = raster.ids_at_points(corr)
    views = corr.views
    cross_keep = cfg.cross_view_policy == CrossViewPolicy.KEEP
    prune_background = cfg.background_policy == BackgroundPolicy.PRUNE

    def _chunk(start: int, stop: int) -> np.ndarray:
        i = np.repeat(np.arange(start, stop, dtype=np.int64), index.k)
        j = index.neighbors[start:stop].ravel()
        keep = ids[i] == ids[j]
        if prune_background:
            keep &= ids[i] >= 0
        if not cross_keep:
            keep &= views[i] == views[j]
        i, j = i[keep], j[keep]
        return np.minimum(i, j) * n + np.maximum(i, j)

    keys = np.concatenate(chunked_map(_chunk, n, threads=threads))
    edges = _edges_from_keys(keys, n, normals)
    logger.debug(
        "boundary-aware graph: %d of %d k-NN pairs kept, %d unique edges",
        keys.size,
        n * index.k,
        edges.edge_count,
    )
    return edges


def felzenszwalb_segment(
    points: PointCloud, edges: EdgeList, cfg: SegmentConfig
) -> SuperpointMask:
    """Felzenszwalb segmentation with adaptive thresholds and small-segment merge.

    Raises:
        ValidationError: If an edge endpoint is not a point of the cloud.
    """
    n = points.point_count
    if edges.max_endpoint() >= n:
        raise ValidationError(
            f"edge endpoint {edges.max_endpoint()} out of range for {n} points"
        )
    order = sorted_edge_order(edges)
    forest = DisjointForest(n, cfg.sp_thresh)
    merged = forest.merge_adaptive(edges, order)
    forced = forest.merge_small(edges, order, cfg.sp_min)
    labels, count = forest.labels()
    logger.debug(
        "felzenszwalb: %d edges, %d merges, %d forced merges, %d superpoints",
        edges.edge_count,
        merged,
        forced,
        count,
    )
    return SuperpointMask(point_labels=labels, superpoint_count=count)


def segment_pipeline(
    points: PointCloud,
    corr: CorrespondenceTable,
    raster: InstanceRaster,
    cfg: SegmentConfig | None = None,
    k: int = DEFAULT_K,
    view_origins: np.ndarray | None = None,
    threads: int = 1,
) -> SuperpointMask:
    """Normals, boundary-aware graph and segmentation in one call."""
    cfg = cfg or SegmentConfig()
    index = build_knn_index(points, k, threads=threads)
    normals = estimate_normals(points, index, view_origins, threads=threads)
    edges = build_boundary_aware_graph(
        points, normals, index, corr, raster, cfg, threads=threads
    )
    return felzenszwalb_segment(points, edges, cfg)


def superpoint_purity(
    sp: SuperpointMask, corr: CorrespondenceTable, raster: InstanceRaster
) -> np.ndarray:
    """Superpoints whose points span more than one (view, instance id) pair."""
    ids = raster.ids_at_points(corr).astype(np.int64)
    namespaced = corr.views * (int(ids.max()) + 2) + (ids + 1)
    stride = int(namespaced.max()) + 1
    pairs = np.unique(sp.point_labels * stride + namespaced)
    per_superpoint = np.bincount(pairs // stride, minlength=sp.superpoint_count)
    return np.flatnonzero(per_superpoint > 1)
