"""Spatial kernel: exact k-nearest neighbours and PCA normal estimation.

Neighbour candidates come from ``scipy.spatial.cKDTree``; the final order is
decided here from squared distances computed in float64 with a fixed
expression, with ties broken by ascending point index. When a distance tie
could reach past the candidate window, the window is widened for the affected
rows until the k-th neighbour is unambiguous, so results equal an all-pairs
scan exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.model import (
    CorrespondenceTable,
    FeatureMatrix,
    NormalField,
    PointCloud,
)
from ovseg3r_prep.parallel import chunked_map

logger = logging.getLogger(__name__)

DEFAULT_K = 16
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])
# Largest covariance eigenvalue (m^2) at or below which a neighbourhood is
# treated as coincident points.
DEGENERATE_EIGENVALUE = 1e-20
_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class KnnIndex:
    """Exact k-NN over a point cloud.

    Attributes:
        k: Neighbour count per point.
        neighbors: N×k indices; row i lists i's neighbours by ascending
            distance, ties by ascending index, never containing i.
        tree: The underlying k-d tree.
    """

    k: int
    neighbors: np.ndarray
    tree: cKDTree = field(repr=False, compare=False)

    @property
    def point_count(self) -> int:
        return int(self.neighbors.shape[0])

    def query(self, i: int) -> np.ndarray:
        """Neighbours of point ``i``."""
        if not 0 <= i < self.point_count:
            raise ValidationError(f"point {i} out of range [0, {self.point_count})")
        return self.neighbors[i]


def squared_distances(
    positions: np.ndarray, rows: np.ndarray, candidates: np.ndarray
) -> np.ndarray:
    """Squared distances from each ``rows[a]`` to each ``candidates[a, b]``."""
    diff = positions[candidates] - positions[rows][:, None, :]
    return (diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]) + diff[
        ..., 2
    ] * diff[..., 2]


def _resolve_rows(
    tree: cKDTree, positions: np.ndarray, rows: np.ndarray, k: int
) -> np.ndarray:
    total = positions.shape[0]
    result = np.empty((rows.size, k), dtype=np.int64)
    pending = np.arange(rows.size)
    width = min(k + 2, total)
    while pending.size:
        query_rows = rows[pending]
        _, candidates = tree.query(positions[query_rows], k=width)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(
            query_rows.size, width
        )
        d2 = squared_distances(positions, query_rows, candidates)
        d2[candidates == query_rows[:, None]] = np.inf
        order = np.lexsort((candidates, d2), axis=-1)
        sorted_d2 = np.take_along_axis(d2, order, axis=1)
        sorted_idx = np.take_along_axis(candidates, order, axis=1)

        if width == total:
            done = np.ones(query_rows.size, dtype=bool)
        else:
            kth = sorted_d2[:, k - 1]
            farthest = np.where(np.isfinite(sorted_d2), sorted_d2, -np.inf).max(axis=1)
            done = farthest > kth * (1.0 + _TIE_TOLERANCE) + 1e-300
        result[pending[done]] = sorted_idx[done, :k]
        pending = pending[~done]
        if pending.size:
            width = min(width * 2, total)
    return result


def build_knn_index(
    points: PointCloud, k: int = DEFAULT_K, threads: int = 1
) -> KnnIndex:
    """Build an exact, deterministic k-NN index.

    Args:
        points: The cloud to index.
        k: Neighbours per point.
        threads: Worker threads for the per-point queries.

    Returns:
        The index with every point's neighbour list resolved.

    Raises:
        ValidationError: If ``k < 1``, the cloud has fewer than 2 points, or
            ``k >= N``.
    """
    n = points.point_count
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if n < 2:
        raise ValidationError("k-NN needs at least 2 points")
    if k >= n:
        raise ValidationError(f"k too large: k={k} but cloud has {n} points")

    positions = points.positions.astype(np.float64)
    tree = cKDTree(positions)
    chunks = chunked_map(
        lambda start, stop: _resolve_rows(tree, positions, np.arange(start, stop), k),
        n,
        threads=threads,
    )
    neighbors = np.concatenate(chunks, axis=0)
    neighbors.setflags(write=False)
    logger.debug("built k-NN index: N=%d k=%d", n, k)
    return KnnIndex(k=k, neighbors=neighbors, tree=tree)


def view_origins_for_points(
    corr: CorrespondenceTable, origins: FeatureMatrix
) -> np.ndarray:
    """Broadcast per-view origins (V×3) to every point via its view."""
    if origins.rows != corr.view_count or origins.cols != 3:
        raise ValidationError(
            f"view origins must be {corr.view_count}×3, "
            f"got {origins.rows}×{origins.cols}"
        )
    return origins.data.astype(np.float64)[corr.views]


def _orient(
    normals: np.ndarray, positions: np.ndarray, origins: np.ndarray | None
) -> np.ndarray:
    if origins is not None:
        facing = np.einsum("ij,ij->i", normals, origins - positions)
        flip = facing < 0.0
    else:
        dominant = np.argmax(np.abs(normals), axis=1)
        flip = normals[np.arange(normals.shape[0]), dominant] < 0.0
    normals[flip] *= -1.0
    return normals


def estimate_normals(
    points: PointCloud,
    index: KnnIndex,
    view_origins: np.ndarray | None = None,
    threads: int = 1,
) -> NormalField:
    """PCA normal of every point over itself and its k neighbours.

    The covariance is centred on the neighbourhood mean; the normal is the
    eigenvector of the smallest eigenvalue. Orientation: towards the point's
    view origin when ``view_origins`` (N×3) is given, otherwise so that the
    largest-magnitude component is positive. Coincident neighbourhoods get
    (0, 0, 1) and a ``degenerate`` flag.

    Raises:
        ValidationError: If the index does not match the cloud or ``k < 3``.
    """
    n = points.point_count
    if index.point_count != n:
        raise ValidationError(f"index covers {index.point_count} points, cloud has {n}")
    if index.k < 3:
        raise ValidationError(f"normal estimation needs k >= 3, got {index.k}")
    origins = None
    if view_origins is not None:
        origins = np.asarray(view_origins, dtype=np.float64)
        if origins.shape != (n, 3):
            raise ValidationError(f"view_origins must be {n}×3, got {origins.shape}")

    positions = points.positions.astype(np.float64)

    def _chunk(start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        rows = np.arange(start, stop)
        hood = np.concatenate([rows[:, None], index.neighbors[start:stop]], axis=1)
        pts = positions[hood]
        centred = pts - pts.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centred, centred) / hood.shape[1]
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        normals = eigenvectors[:, :, 0]
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        degenerate = eigenvalues[:, 2] <= DEGENERATE_EIGENVALUE
        sub_origins = origins[start:stop] if origins is not None else None
        normals = _orient(normals, positions[start:stop], sub_origins)
        normals[degenerate] = FALLBACK_NORMAL
        return normals, degenerate

    chunks = chunked_map(_chunk, n, threads=threads)
    normals = np.concatenate([c[0] for c in chunks], axis=0)
    degenerate = np.concatenate([c[1] for c in chunks], axis=0)
    if degenerate.any():
        logger.warning(
            "%d of %d neighbourhoods were degenerate; used fallback normal",
            int(degenerate.sum()),
            n,
        )
    return NormalField(normals=normals.astype(np.float32), degenerate=degenerate)
