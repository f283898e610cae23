"""View-wise instance partition of scene-level predictions.

A query belongs to view v iff the superpoint that initialised it has at least
one point reconstructed from v. Its scene-level mask is then truncated to the
superpoints visible in v, so a view's partial annotation never supervises
predictions that view cannot see.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.model import (
    CorrespondenceTable,
    FeatureMatrix,
    ScenePrediction,
    SuperpointMask,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisibilityMasks:
    """View-belonging masks of points, superpoints and queries.

    Point visibility is kept as the per-point view index; ``point_vis``
    materialises the dense V×N matrix on demand.
    """

    point_views: np.ndarray
    superpoint_vis: np.ndarray
    query_vis: np.ndarray

    @property
    def view_count(self) -> int:
        return int(self.superpoint_vis.shape[0])

    @property
    def point_vis(self) -> np.ndarray:
        dense = np.zeros((self.view_count, self.point_views.size), dtype=bool)
        dense[self.point_views, np.arange(self.point_views.size)] = True
        return dense


@dataclass(frozen=True)
class ViewPartition:
    """The part of a scene prediction that view ``view_index`` supervises."""

    view_index: int
    query_rows: np.ndarray
    superpoint_cols: np.ndarray
    masks: np.ndarray
    classes: np.ndarray
    init_superpoints: np.ndarray

    @property
    def query_count(self) -> int:
        return int(self.query_rows.size)

    def to_prediction(self) -> ScenePrediction:
        """The partition as a prediction over the view's own superpoint columns."""
        local_init = np.searchsorted(self.superpoint_cols, self.init_superpoints)
        return ScenePrediction(
            masks=self.masks, classes=self.classes, init_superpoints=local_init
        )

    def index_entry(self) -> dict[str, object]:
        return {
            "view": self.view_index,
            "query_rows": self.query_rows.tolist(),
            "superpoint_cols": self.superpoint_cols.tolist(),
        }


def _check_init(init_superpoints: np.ndarray, superpoint_count: int) -> np.ndarray:
    init = np.asarray(init_superpoints, dtype=np.int64).ravel()
    if init.size and (init.min() < 0 or init.max() >= superpoint_count):
        bad = int(init[(init < 0) | (init >= superpoint_count)][0])
        raise ValidationError(
            f"init superpoint {bad} out of range [0, {superpoint_count})"
        )
    return init


def compute_visibility(
    corr: CorrespondenceTable, sp: SuperpointMask, init_superpoints: np.ndarray
) -> VisibilityMasks:
    """Which superpoints and queries each view sees.

    ``superpoint_vis[v, k]`` is True iff some point of superpoint k comes from
    view v; ``query_vis`` slices it at the initialising superpoints.

    Raises:
        ValidationError: If point counts differ or an init index is >= n.
    """
    if corr.point_count != sp.point_count:
        raise ValidationError(
            f"correspondence covers {corr.point_count} points, "
            f"superpoints cover {sp.point_count}"
        )
    init = _check_init(init_superpoints, sp.superpoint_count)
    superpoint_vis = np.zeros((corr.view_count, sp.superpoint_count), dtype=bool)
    superpoint_vis[corr.views, sp.point_labels] = True
    return VisibilityMasks(
        point_views=corr.views,
        superpoint_vis=superpoint_vis,
        query_vis=superpoint_vis[:, init],
    )


def partition_predictions(
    pred: ScenePrediction, vis: VisibilityMasks
) -> list[ViewPartition]:
    """Slice the scene prediction per view; empty views yield empty partitions.

    Raises:
        ValidationError: If prediction and visibility sizes differ.
    """
    if vis.superpoint_vis.shape[1] != pred.superpoint_count:
        raise ValidationError(
            f"prediction has {pred.superpoint_count} superpoints, visibility has "
            f"{vis.superpoint_vis.shape[1]}"
        )
    if vis.query_vis.shape[1] != pred.query_count:
        raise ValidationError(
            f"prediction has {pred.query_count} queries, visibility has "
            f"{vis.query_vis.shape[1]}"
        )
    partitions = []
    for v in range(vis.view_count):
        rows = np.flatnonzero(vis.query_vis[v])
        cols = np.flatnonzero(vis.superpoint_vis[v])
        partitions.append(
            ViewPartition(
                view_index=v,
                query_rows=rows,
                superpoint_cols=cols,
                masks=pred.masks[np.ix_(rows, cols)],
                classes=pred.classes[rows],
                init_superpoints=pred.init_superpoints[rows],
            )
        )
    logger.debug(
        "partitioned %d queries over %d views (%s per view)",
        pred.query_count,
        vis.view_count,
        [p.query_count for p in partitions],
    )
    return partitions


def expand_partition_to_points(
    partition: ViewPartition, sp: SuperpointMask, corr: CorrespondenceTable
) -> tuple[np.ndarray, np.ndarray]:
    """A view partition at point level.

    Returns:
        The view's point indices (ascending) and a q_v×P_v boolean matrix in
        which each point takes its superpoint's column.
    """
    points = corr.points_in_view(partition.view_index)
    local = np.searchsorted(partition.superpoint_cols, sp.point_labels[points])
    return points, partition.masks[:, local]


def ordered_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` accumulated left to right over the shared axis in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for c in range(a.shape[1]):
        out += a[:, c, None] * b[None, :, c]
    return out


def decode_predictions(
    queries: FeatureMatrix,
    sp_features: FeatureMatrix,
    text: FeatureMatrix,
    tau: float,
    init_superpoints: np.ndarray,
) -> ScenePrediction:
    """Masks by thresholding query/superpoint similarity, classes by argmax.

    Ties in the class argmax go to the lowest class index.

    Raises:
        ValidationError: If feature widths or query counts disagree.
    """
    widths = {queries.cols, sp_features.cols, text.cols}
    if len(widths) != 1:
        raise ValidationError(
            f"feature widths differ: queries {queries.cols}, superpoints "
            f"{sp_features.cols}, text {text.cols}"
        )
    if text.rows < 1:
        raise ValidationError("text features need at least one class row")
    init = _check_init(init_superpoints, sp_features.rows)
    if init.size != queries.rows:
        raise ValidationError(
            f"{init.size} init superpoints for {queries.rows} queries"
        )
    masks = ordered_dot(queries.data, sp_features.data) > tau
    classes = np.argmax(ordered_dot(queries.data, text.data), axis=1)
    return ScenePrediction(masks=masks, classes=classes, init_superpoints=init)


def match_feasibility(gt_masks: np.ndarray, init_superpoints: np.ndarray) -> np.ndarray:
    """q×G: query a may match annotation g only if g covers a's init superpoint."""
    gt = np.asarray(gt_masks, dtype=bool)
    if gt.ndim != 2:
        raise ValidationError(f"gt masks must be G×n, got {gt.shape}")
    init = _check_init(init_superpoints, gt.shape[1])
    return gt[:, init].T.copy()


def select_query_superpoints(
    superpoint_count: int, query_count: int, seed: int
) -> np.ndarray:
    """Seeded choice of distinct superpoints that initialise object queries.

    At most ``superpoint_count`` are chosen; the result is ascending.
    """
    if superpoint_count < 1 or query_count < 1:
        raise ValidationError("superpoint_count and query_count must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(
        superpoint_count, size=min(query_count, superpoint_count), replace=False
    )
    return np.sort(chosen).astype(np.int64)


def gather_queries(
    sp_features: FeatureMatrix, init_superpoints: np.ndarray
) -> FeatureMatrix:
    """Initial query features: the rows of the initialising superpoints."""
    init = _check_init(init_superpoints, sp_features.rows)
    return FeatureMatrix(data=sp_features.data[init])


def mask_iou(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boolean mask rows (a×P against b×P)."""
    pred = np.asarray(pred_masks, dtype=bool)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.ndim != 2 or gt.ndim != 2 or pred.shape[1] != gt.shape[1]:
        raise ValidationError(
            f"mask shapes {pred.shape} and {gt.shape} are not comparable"
        )
    inter = pred.astype(np.float64) @ gt.astype(np.float64).T
    union = pred.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def feasible_iou(
    pred_masks: np.ndarray, gt_masks: np.ndarray, init_superpoints: np.ndarray
) -> np.ndarray:
    """IoU over superpoints with infeasible (query, annotation) pairs zeroed."""
    iou = mask_iou(pred_masks, gt_masks)
    return np.where(match_feasibility(gt_masks, init_superpoints), iou, 0.0)
