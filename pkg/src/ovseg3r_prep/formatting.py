"""Formatting utilities for artifact output.

This module turns domain values into the JSON documents the CLI writes
(lifted annotations, partition indexes) and maps per-point labels to the
colors of an inspection PLY.
"""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np

from ovseg3r_prep.codecs import encode_ply
from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.model import PointCloud, ViewAnnotation
from ovseg3r_prep.vip import ViewPartition

BACKGROUND_COLOR = (128, 128, 128)


def label_color(label: int, seed: int = 0) -> tuple[int, int, int]:
    """Stable RGB color of one label; background (-1) is gray."""
    if label < 0:
        return BACKGROUND_COLOR
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=3).digest()
    return digest[0], digest[1], digest[2]


def label_colors(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    """N×3 uint8 colors for per-point integer labels.

    Args:
        labels: Per-point labels; -1 marks background.
        seed: Changes the palette without changing its determinism.

    Returns:
        One color per label, identical across runs for the same seed.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {labels.shape}")
    unique, inverse = np.unique(labels, return_inverse=True)
    palette = np.array([label_color(int(u), seed) for u in unique], dtype=np.uint8)
    return palette.reshape(-1, 3)[inverse.ravel()]


def export_ply(
    points: PointCloud, labels: np.ndarray, seed: int = 0, text: bool = False
) -> bytes:
    """Colored PLY of ``points`` painted by ``labels``.

    Raises:
        ValidationError: If there is not exactly one label per point.
    """
    labels = np.asarray(labels)
    if labels.shape != (points.point_count,):
        raise ValidationError(f"{labels.size} labels for {points.point_count} points")
    return encode_ply(points, colors=label_colors(labels, seed), text=text)


def annotations_to_json(annotations: list[ViewAnnotation]) -> list[dict[str, Any]]:
    """Lifted annotations as ``[{view, points, ids}, ...]``."""
    return [
        {
            "view": a.view_index,
            "points": a.point_indices.tolist(),
            "ids": a.instance_ids.tolist(),
        }
        for a in annotations
    ]


def annotations_from_json(document: Any) -> list[ViewAnnotation]:
    """Inverse of :func:`annotations_to_json`.

    Raises:
        ValidationError: If the document does not have the expected shape.
    """
    if not isinstance(document, list):
        raise ValidationError("annotation document must be a JSON array")
    annotations = []
    for entry in document:
        if not isinstance(entry, dict) or not {"view", "points", "ids"} <= entry.keys():
            raise ValidationError("annotation entries need 'view', 'points' and 'ids'")
        annotations.append(
            ViewAnnotation(
                view_index=entry["view"],
                point_indices=entry["points"],
                instance_ids=entry["ids"],
            )
        )
    return annotations


def annotation_point_labels(
    annotations: list[ViewAnnotation], point_count: int
) -> np.ndarray:
    """One label per point from view-local ids, kept distinct across views.

    Background and unannotated points get -1; each (view, id) pair gets its
    own label in order of first appearance over views then ids.
    """
    labels = np.full(point_count, -1, dtype=np.int64)
    next_label = 0
    for annotation in sorted(annotations, key=lambda a: a.view_index):
        indices = annotation.point_indices
        if indices.size and indices.max() >= point_count:
            raise ValidationError(
                f"annotation of view {annotation.view_index} references point "
                f"{int(indices.max())} of {point_count}"
            )
        ids = annotation.instance_ids
        for instance in np.unique(ids[ids >= 0]):
            labels[annotation.point_indices[ids == instance]] = next_label
            next_label += 1
    return labels


def partition_index(partitions: list[ViewPartition]) -> dict[str, Any]:
    """JSON index of a view-wise partition, one entry per view."""
    return {"views": [p.index_entry() for p in partitions]}
