"""Shared pytest fixtures for ovseg3r-prep tests."""

from __future__ import annotations

import logging
import tempfile
from collections.abc import Iterator
from pathlib import Path

import numpy as np
import pytest

from ovseg3r_prep.logging_utils import PACKAGE_LOGGER
from ovseg3r_prep.model import CorrespondenceTable, InstanceRaster, PointCloud
from ovseg3r_prep.synth import SceneBundle, SceneKind, SceneRecipe, generate


@pytest.fixture
def temp_dir() -> Iterator[Path]:
    """Create a temporary directory for file operations.

    Yields:
        Path to temporary directory.
    """
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture(autouse=True)
def reset_package_logger() -> Iterator[None]:
    """Undo handler and propagation changes made by CLI runs."""
    yield
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for randomized tests."""
    return np.random.default_rng(1234)


@pytest.fixture
def line_cloud() -> PointCloud:
    """Three collinear points at x = 0, 1, 3."""
    return PointCloud(positions=[[0, 0, 0], [1, 0, 0], [3, 0, 0]])


@pytest.fixture
def square_cloud() -> PointCloud:
    """Corners of the unit square in z = 0, counter-clockwise."""
    return PointCloud(positions=[[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])


@pytest.fixture
def grid_scene() -> tuple[PointCloud, CorrespondenceTable, InstanceRaster]:
    """A flat 10×10 grid seen by one 10×10 view, split in two instances.

    Point ``r * 10 + c`` sits at (c, r, 0) cm and projects onto pixel
    (r, c); columns 0-4 are instance 0 and columns 5-9 instance 1.
    """
    rows, cols = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    positions = np.stack(
        [cols.ravel() * 0.01, rows.ravel() * 0.01, np.zeros(100)], axis=1
    )
    corr = CorrespondenceTable(
        views=np.zeros(100, dtype=np.int64),
        xy=np.stack([cols.ravel() / 9.0, rows.ravel() / 9.0], axis=1),
        view_dims=[[10, 10]],
    )
    labels = np.where(cols >= 5, 1, 0)[None, :, :]
    return PointCloud(positions=positions), corr, InstanceRaster(labels=labels)


@pytest.fixture(scope="session")
def flush_bundle() -> SceneBundle:
    """Small two-view wall-with-painting scene at sigma = 0."""
    return generate(
        SceneRecipe(
            scene_kind=SceneKind.FLUSH_OBJECT,
            point_count=3000,
            view_count=2,
            raster_dims=(64, 64),
            smoothing_sigma=0.0,
            seed=3,
        )
    )


@pytest.fixture(scope="session")
def featured_bundle() -> SceneBundle:
    """Small flush-object scene that also carries image and text features."""
    return generate(
        SceneRecipe(
            scene_kind=SceneKind.FLUSH_OBJECT,
            point_count=3000,
            view_count=2,
            raster_dims=(64, 64),
            seed=5,
            feature_channels=8,
        )
    )
