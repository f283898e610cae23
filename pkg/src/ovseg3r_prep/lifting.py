"""Lift 2D artifacts onto the 3D points through the correspondence table.

Covers per-point bilinear feature sampling, view-wise annotation lifting,
superpoint pooling and the text-prompt string handed to the 2D segmentor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.model import (
    CorrespondenceTable,
    FeatureMatrix,
    ImageFeatureStack,
    InstanceRaster,
    SuperpointMask,
    ViewAnnotation,
)
from ovseg3r_prep.parallel import chunked_map

logger = logging.getLogger(__name__)


def _bilinear(
    maps: np.ndarray, views: np.ndarray, gx: np.ndarray, gy: np.ndarray
) -> np.ndarray:
    h, w = maps.shape[1], maps.shape[2]
    x0 = np.clip(np.floor(gx), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(gy), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(gx - x0, 0.0, 1.0)[:, None]
    fy = np.clip(gy - y0, 0.0, 1.0)[:, None]
    f00 = maps[views, y0, x0].astype(np.float64)
    f01 = maps[views, y0, x1].astype(np.float64)
    f10 = maps[views, y1, x0].astype(np.float64)
    f11 = maps[views, y1, x1].astype(np.float64)
    top = (1.0 - fx) * f00 + fx * f01
    bottom = (1.0 - fx) * f10 + fx * f11
    return (1.0 - fy) * top + fy * bottom


def sample_point_features(
    stack: ImageFeatureStack, corr: CorrespondenceTable, threads: int = 1
) -> FeatureMatrix:
    """Bilinearly sample each point's feature from its own view's map.

    Normalized (x, y) maps to grid coordinates ``(x·(w−1), y·(h−1))``, so
    (0, 0) and (1, 1) hit the corner texels exactly.

    Raises:
        ValidationError: If view counts differ or a sample is not finite.
    """
    if corr.view_count != stack.view_count:
        raise ValidationError(
            f"correspondence has {corr.view_count} views, "
            f"feature stack has {stack.view_count}"
        )
    _, h, w, _ = stack.data.shape

    def _chunk(start: int, stop: int) -> np.ndarray:
        xy = corr.xy[start:stop].astype(np.float64)
        return _bilinear(
            stack.data, corr.views[start:stop], xy[:, 0] * (w - 1), xy[:, 1] * (h - 1)
        )

    sampled = np.concatenate(chunked_map(_chunk, corr.point_count, threads=threads))
    finite = np.isfinite(sampled).all(axis=1)
    if not finite.all():
        point = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"non-finite sampled feature for point {point}")
    return FeatureMatrix(data=sampled.astype(np.float32))


def lift_masks(
    raster: InstanceRaster, corr: CorrespondenceTable
) -> list[ViewAnnotation]:
    """Per-view lists of reconstructed points tagged with their 2D instance id."""
    ids = raster.ids_at_points(corr)
    order = np.argsort(corr.views, kind="stable")
    bounds = np.searchsorted(corr.views[order], np.arange(corr.view_count + 1))
    annotations = []
    for v in range(corr.view_count):
        points = order[bounds[v] : bounds[v + 1]]
        annotations.append(
            ViewAnnotation(view_index=v, point_indices=points, instance_ids=ids[points])
        )
    logger.debug(
        "lifted %d views, %d labelled points",
        corr.view_count,
        int((ids >= 0).sum()),
    )
    return annotations


def annotation_instance_masks(
    annotation: ViewAnnotation,
) -> tuple[np.ndarray, np.ndarray]:
    """Boolean G_v×P_v instance masks over a view's points.

    Returns:
        The instance ids (ascending, background excluded) and one mask row per
        id over ``annotation.point_indices``.
    """
    ids = annotation.instance_ids
    instances = np.unique(ids[ids >= 0])
    return instances, ids[None, :] == instances[:, None]


def pool_superpoint_features(
    point_features: FeatureMatrix, sp: SuperpointMask
) -> FeatureMatrix:
    """Mean feature of every superpoint's points (``M^sp F / Sum(M^sp, 1)``).

    Raises:
        ValidationError: If the row count differs from the point count.
    """
    if point_features.rows != sp.point_count:
        raise ValidationError(
            f"{point_features.rows} feature rows for {sp.point_count} points"
        )
    order = np.argsort(sp.point_labels, kind="stable")
    starts = np.searchsorted(
        sp.point_labels[order], np.arange(sp.superpoint_count), side="left"
    )
    features = point_features.data[order].astype(np.float64)
    if features.shape[1] == 0:
        return FeatureMatrix(data=np.zeros((sp.superpoint_count, 0), np.float32))
    sums = np.add.reduceat(features, starts, axis=0)
    means = sums / sp.sizes()[:, None]
    return FeatureMatrix(data=means.astype(np.float32))


def broadcast_superpoint_features(
    sp_features: FeatureMatrix, sp: SuperpointMask
) -> FeatureMatrix:
    """Give every point its superpoint's feature row."""
    if sp_features.rows != sp.superpoint_count:
        raise ValidationError(
            f"{sp_features.rows} rows for {sp.superpoint_count} superpoints"
        )
    return FeatureMatrix(data=sp_features.data[sp.point_labels])


@dataclass(frozen=True)
class PromptSpec:
    """Class names for one training sample, padded with sampled negatives."""

    positive_classes: tuple[str, ...]
    padded_classes: tuple[str, ...]
    prompt_string: str
    seed: int

    def to_dict(self) -> dict[str, object]:
        return {
            "positive_classes": list(self.positive_classes),
            "padded_classes": list(self.padded_classes),
            "prompt": self.prompt_string,
            "seed": self.seed,
        }


def build_prompt(
    positive: list[str], vocabulary: list[str], T: int, seed: int  # noqa: N803
) -> PromptSpec:
    """Pad the detected class names to ``T`` with seeded negatives.

    Negatives are drawn without replacement from ``vocabulary`` minus the
    positives, in sampled order, and the prompt is ``"a . b . c ."``.

    Raises:
        ValidationError: If there are more positives than ``T`` or the
            vocabulary cannot supply enough negatives.
    """
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    positive = [name.strip() for name in positive]
    if any(not name for name in positive):
        raise ValidationError("class names cannot be empty")
    if len(set(positive)) != len(positive):
        raise ValidationError("positive class names must be distinct")
    if len(positive) > T:
        raise ValidationError(f"{len(positive)} positive classes exceed T={T}")

    taken = set(positive)
    candidates: list[str] = []
    for name in (v.strip() for v in vocabulary):
        if name and name not in taken:
            candidates.append(name)
            taken.add(name)
    needed = T - len(positive)
    if len(candidates) < needed:
        raise ValidationError(
            f"insufficient vocabulary: need {needed} negatives, "
            f"only {len(candidates)} available"
        )

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=needed, replace=False) if needed else []
    padded = tuple(positive) + tuple(candidates[int(p)] for p in picks)
    return PromptSpec(
        positive_classes=tuple(positive),
        padded_classes=padded,
        prompt_string=" . ".join(padded) + " .",
        seed=seed,
    )
