"""Domain types shared across the toolkit.

All types are frozen dataclasses over numpy arrays. Arrays are converted to a
canonical dtype on construction and marked read-only, so a value can be
shared between threads once built. Every constructor validates the type's
invariants and raises :class:`~ovseg3r_prep.errors.ValidationError` on
violation; the only repair ever made is the documented re-labeling of
non-contiguous instance ids in :class:`InstanceRaster`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ovseg3r_prep.errors import ValidationError

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-5


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _as_array(value: object, dtype: np.dtype | type, name: str) -> np.ndarray:
    try:
        array = np.array(value, dtype=dtype, copy=True)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{name} cannot be converted to {dtype}: {e}") from e
    return array


def _require_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        bad = int(np.flatnonzero(~np.isfinite(array.ravel()))[0])
        raise ValidationError(f"{name} contains a non-finite value at flat index {bad}")


def contiguous_labels(labels: np.ndarray, count: int) -> bool:
    """Return True if ``labels`` uses exactly the ids ``0..count-1``."""
    if labels.size == 0:
        return count == 0
    if labels.min() < 0 or labels.max() >= count:
        return False
    return bool(np.bincount(labels, minlength=count).all())


@dataclass(frozen=True)
class PointCloud:
    """N×3 float32 point positions in meters."""

    positions: np.ndarray

    def __post_init__(self) -> None:
        positions = _as_array(self.positions, np.float32, "positions")
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValidationError(
                f"positions must have shape (N, 3), got {positions.shape}"
            )
        if positions.shape[0] < 1:
            raise ValidationError("a point cloud needs at least one point")
        _require_finite(positions, "positions")
        object.__setattr__(self, "positions", _frozen(positions))

    @property
    def point_count(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class CorrespondenceTable:
    """Forward map from point index to (view, normalized x, normalized y).

    Attributes:
        views: N view indices.
        xy: N×2 normalized pixel coordinates in [0, 1].
        view_dims: V×2 array of (H, W) per view.
    """

    views: np.ndarray
    xy: np.ndarray
    view_dims: np.ndarray

    def __post_init__(self) -> None:
        views = _as_array(self.views, np.int64, "views")
        xy = _as_array(self.xy, np.float32, "xy")
        dims = _as_array(self.view_dims, np.int64, "view_dims")

        if views.ndim != 1 or views.size < 1:
            raise ValidationError("views must be a non-empty 1-D array")
        if xy.shape != (views.size, 2):
            raise ValidationError(
                f"xy must have shape ({views.size}, 2), got {xy.shape}"
            )
        if dims.ndim != 2 or dims.shape[1] != 2 or dims.shape[0] < 1:
            raise ValidationError(f"view_dims must have shape (V, 2), got {dims.shape}")
        if np.any(dims < 1):
            raise ValidationError("every view needs H >= 1 and W >= 1")
        if views.min() < 0 or views.max() >= dims.shape[0]:
            raise ValidationError(
                f"view index out of range [0, {dims.shape[0]}) in correspondence"
            )
        _require_finite(xy, "xy")
        if xy.min() < 0.0 or xy.max() > 1.0:
            raise ValidationError("normalized coordinates must lie in [0, 1]")

        object.__setattr__(self, "views", _frozen(views))
        object.__setattr__(self, "xy", _frozen(xy))
        object.__setattr__(self, "view_dims", _frozen(dims))

    @property
    def point_count(self) -> int:
        return int(self.views.size)

    @property
    def view_count(self) -> int:
        return int(self.view_dims.shape[0])

    def points_in_view(self, view: int) -> np.ndarray:
        """Inverse map: ascending indices of points reconstructed from ``view``."""
        if not 0 <= view < self.view_count:
            raise ValidationError(f"view {view} out of range [0, {self.view_count})")
        return np.flatnonzero(self.views == view)

    def nearest_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Nearest raster pixel (row, col) of every point.

        Uses round-half-up of ``x·(W−1)`` and ``y·(H−1)`` in the point's view.
        """
        dims = self.view_dims[self.views]
        x = self.xy[:, 0].astype(np.float64)
        y = self.xy[:, 1].astype(np.float64)
        cols = np.floor(x * (dims[:, 1] - 1) + 0.5).astype(np.int64)
        rows = np.floor(y * (dims[:, 0] - 1) + 0.5).astype(np.int64)
        return rows, cols


@dataclass(frozen=True)
class InstanceRaster:
    """Per-view 2D instance ids, -1 for background.

    Ids inside each view are made contiguous from 0 on construction; when that
    required a change, ``relabeled`` is True and a warning is logged.
    """

    labels: np.ndarray
    relabeled: bool = False

    def __post_init__(self) -> None:
        labels = _as_array(self.labels, np.int32, "labels")
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValidationError(
                f"labels must have shape (V, H, W) with all dims >= 1, "
                f"got {labels.shape}"
            )
        if labels.min() < -1:
            raise ValidationError("instance ids must be >= -1")

        relabeled = self.relabeled
        for v in range(labels.shape[0]):
            view = labels[v]
            ids = np.unique(view[view >= 0])
            if ids.size and not (ids[0] == 0 and ids[-1] == ids.size - 1):
                remap = np.searchsorted(ids, view[view >= 0]).astype(np.int32)
                view[view >= 0] = remap
                relabeled = True
                logger.warning(
                    "view %d instance ids were not contiguous; relabeled %d ids",
                    v,
                    ids.size,
                )
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "relabeled", relabeled)

    @property
    def view_count(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> tuple[int, int]:
        return int(self.labels.shape[1]), int(self.labels.shape[2])

    def check_against(self, corr: CorrespondenceTable) -> None:
        """Raise if this raster cannot be indexed through ``corr``."""
        if self.view_count != corr.view_count:
            raise ValidationError(
                f"raster has {self.view_count} views, correspondence has "
                f"{corr.view_count}"
            )
        h, w = self.dims
        mismatched = np.flatnonzero(
            (corr.view_dims[:, 0] != h) | (corr.view_dims[:, 1] != w)
        )
        if mismatched.size:
            v = int(mismatched[0])
            raise ValidationError(
                f"view {v} is {tuple(corr.view_dims[v])} in the correspondence "
                f"but the raster is {(h, w)}"
            )

    def ids_at_points(self, corr: CorrespondenceTable) -> np.ndarray:
        """Instance id at each point's nearest pixel."""
        self.check_against(corr)
        rows, cols = corr.nearest_pixels()
        h, w = self.dims
        if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
            raise ValidationError("pixel lookup out of raster bounds")
        return self.labels[corr.views, rows, cols]


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense rows×cols float32 matrix (F^2D, F^3D, S^3D, Q, T...)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = _as_array(self.data, np.float32, "data")
        if data.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got {data.shape}")
        _require_finite(data, "feature matrix")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class ImageFeatureStack:
    """Per-view image feature maps, V×h×w×C float32."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = _as_array(self.data, np.float32, "data")
        if data.ndim != 4 or min(data.shape[:3]) < 1:
            raise ValidationError(
                f"feature stack must have shape (V, h, w, C), got {data.shape}"
            )
        _require_finite(data, "feature stack")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def view_count(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True)
class SuperpointMask:
    """Partition of N points into n superpoints, stored as per-point labels."""

    point_labels: np.ndarray
    superpoint_count: int

    def __post_init__(self) -> None:
        labels = _as_array(self.point_labels, np.int64, "point_labels")
        if labels.ndim != 1 or labels.size < 1:
            raise ValidationError("point_labels must be a non-empty 1-D array")
        count = int(self.superpoint_count)
        if not contiguous_labels(labels, count):
            raise ValidationError(
                f"labels not contiguous: expected every id in [0, {count}) "
                f"to be used and nothing else"
            )
        object.__setattr__(self, "point_labels", _frozen(labels))
        object.__setattr__(self, "superpoint_count", count)

    @property
    def point_count(self) -> int:
        return int(self.point_labels.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.point_labels, minlength=self.superpoint_count)

    def as_boolean_matrix(self) -> np.ndarray:
        """Dense n×N boolean M^sp; only for small inputs."""
        matrix = np.zeros((self.superpoint_count, self.point_count), dtype=bool)
        matrix[self.point_labels, np.arange(self.point_count)] = True
        return matrix


@dataclass(frozen=True)
class ScenePrediction:
    """Scene-level query predictions over superpoints."""

    masks: np.ndarray
    classes: np.ndarray
    init_superpoints: np.ndarray

    def __post_init__(self) -> None:
        masks = _as_array(self.masks, bool, "masks")
        classes = _as_array(self.classes, np.int32, "classes")
        init = _as_array(self.init_superpoints, np.int64, "init_superpoints")
        if masks.ndim != 2:
            raise ValidationError(f"masks must be q×n, got {masks.shape}")
        q, n = masks.shape
        if classes.shape != (q,) or init.shape != (q,):
            raise ValidationError(
                f"classes and init_superpoints need length {q}, got "
                f"{classes.shape} and {init.shape}"
            )
        if q and (init.min() < 0 or init.max() >= n):
            raise ValidationError(f"init_superpoints must lie in [0, {n})")
        if np.unique(init).size != q:
            raise ValidationError("init_superpoints must be pairwise distinct")
        if q and classes.min() < 0:
            raise ValidationError("class indices must be >= 0")
        object.__setattr__(self, "masks", _frozen(masks))
        object.__setattr__(self, "classes", _frozen(classes))
        object.__setattr__(self, "init_superpoints", _frozen(init))

    @property
    def query_count(self) -> int:
        return int(self.masks.shape[0])

    @property
    def superpoint_count(self) -> int:
        return int(self.masks.shape[1])


@dataclass(frozen=True)
class ViewAnnotation:
    """2D instance ids of one view lifted onto that view's 3D points."""

    view_index: int
    point_indices: np.ndarray
    instance_ids: np.ndarray

    def __post_init__(self) -> None:
        points = _as_array(self.point_indices, np.int64, "point_indices")
        ids = _as_array(self.instance_ids, np.int32, "instance_ids")
        if points.ndim != 1 or ids.shape != points.shape:
            raise ValidationError("point_indices and instance_ids must be equal 1-D")
        if points.size > 1 and np.any(np.diff(points) <= 0):
            raise ValidationError("point_indices must be strictly ascending")
        if ids.size and ids.min() < -1:
            raise ValidationError("instance ids must be >= -1")
        object.__setattr__(self, "view_index", int(self.view_index))
        object.__setattr__(self, "point_indices", _frozen(points))
        object.__setattr__(self, "instance_ids", _frozen(ids))


@dataclass(frozen=True)
class NormalField:
    """Unit normals per point plus the PCA degeneracy flag."""

    normals: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        normals = _as_array(self.normals, np.float32, "normals")
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ValidationError(f"normals must be N×3, got {normals.shape}")
        _require_finite(normals, "normals")
        norms = np.linalg.norm(normals.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
            bad = int(np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)[0])
            raise ValidationError(f"normal {bad} is not unit length ({norms[bad]})")
        degenerate = _as_array(self.degenerate, bool, "degenerate")
        if degenerate.size == 0:
            degenerate = np.zeros(normals.shape[0], dtype=bool)
        if degenerate.shape != (normals.shape[0],):
            raise ValidationError("degenerate flags must have one entry per normal")
        object.__setattr__(self, "normals", _frozen(normals))
        object.__setattr__(self, "degenerate", _frozen(degenerate))

    @property
    def point_count(self) -> int:
        return int(self.normals.shape[0])


@dataclass(frozen=True)
class EdgeList:
    """Undirected weighted edges with ``i < j``, no duplicates."""

    i: np.ndarray
    j: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        i = _as_array(self.i, np.int64, "i")
        j = _as_array(self.j, np.int64, "j")
        w = _as_array(self.w, np.float32, "w")
        if i.ndim != 1 or j.shape != i.shape or w.shape != i.shape:
            raise ValidationError("edge arrays must be 1-D and of equal length")
        if i.size:
            if i.min() < 0 or np.any(i >= j):
                raise ValidationError("every edge needs 0 <= i < j")
            _require_finite(w, "edge weights")
            if w.min() < 0.0 or w.max() > 2.0:
                raise ValidationError("edge weights must lie in [0, 2]")
            if np.unique(np.stack([i, j], axis=1), axis=0).shape[0] != i.size:
                raise ValidationError("duplicate (i, j) edge")
        object.__setattr__(self, "i", _frozen(i))
        object.__setattr__(self, "j", _frozen(j))
        object.__setattr__(self, "w", _frozen(w))

    @property
    def edge_count(self) -> int:
        return int(self.i.size)

    def max_endpoint(self) -> int:
        return int(self.j.max()) if self.j.size else -1
