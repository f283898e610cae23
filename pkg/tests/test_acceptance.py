"""Scene-scale checks of the superpoint and partition guarantees.

These run full synthetic scenes and are marked slow; ``pytest -m "not slow"``
skips them.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from ovseg3r_prep.config import PipelineConfig, SegmentConfig
from ovseg3r_prep.model import InstanceRaster, ScenePrediction
from ovseg3r_prep.pipeline import run_pipeline
from ovseg3r_prep.superpoint import segment_pipeline, superpoint_purity
from ovseg3r_prep.synth import SceneKind, SceneRecipe, generate, write_bundle
from ovseg3r_prep.vip import compute_visibility, partition_predictions

pytestmark = pytest.mark.slow

_SCENES = {
    SceneKind.FLUSH_OBJECT: (2, (160, 160)),
    SceneKind.BOX_ROOM: (4, (128, 128)),
}
_SIGMAS = (0.0, 0.01, 0.03)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", list(_SCENES))
def test_boundary_aware_superpoints_are_pure(kind: SceneKind, seed: int) -> None:
    """Test no superpoint spans two (view, instance id) pairs at scene scale."""
    views, dims = _SCENES[kind]
    sigma = _SIGMAS[seed % len(_SIGMAS)]
    bundle = generate(SceneRecipe(kind, 50_000, views, dims, sigma, seed=seed))
    sp = segment_pipeline(
        bundle.points,
        bundle.corr,
        bundle.raster,
        view_origins=bundle.point_origins(),
    )
    assert superpoint_purity(sp, bundle.corr, bundle.raster).size == 0


def test_flush_object_mechanism() -> None:
    """Test geometry alone mixes wall and painting while the raster separates them."""
    bundle = generate(
        SceneRecipe(SceneKind.FLUSH_OBJECT, 50_000, 2, (160, 160), 0.03, seed=21)
    )
    cfg = SegmentConfig()
    empty = InstanceRaster(labels=np.zeros_like(bundle.raster.labels))
    origins = bundle.point_origins()
    geometric = segment_pipeline(
        bundle.points, bundle.corr, empty, cfg, view_origins=origins
    )
    aware = segment_pipeline(
        bundle.points, bundle.corr, bundle.raster, cfg, view_origins=origins
    )

    def mixed(labels: np.ndarray) -> np.ndarray:
        kinds = np.zeros((labels.max() + 1, 2), dtype=bool)
        kinds[labels, bundle.gt_labels] = True
        return kinds.all(axis=1)

    assert mixed(geometric.point_labels).any()
    assert not mixed(aware.point_labels).any()
    painting_only = np.bincount(
        aware.point_labels[bundle.gt_labels == 1],
        minlength=aware.superpoint_count,
    ) == np.bincount(aware.point_labels, minlength=aware.superpoint_count)
    counts = np.bincount(aware.point_labels, minlength=aware.superpoint_count)
    assert np.any(painting_only & (counts > 0))


@pytest.mark.parametrize("seed", range(20))
def test_view_partition_guarantees(seed: int) -> None:
    """Test partitions only hold visible queries and copy scene cells exactly."""
    rng = np.random.default_rng(seed)
    bundle = generate(SceneRecipe(SceneKind.RANDOM_BLOBS, 4000, 3, (48, 48), seed=seed))
    sp = segment_pipeline(
        bundle.points, bundle.corr, bundle.raster, SegmentConfig(sp_min=10), k=8
    )
    q = min(16, sp.superpoint_count)
    init = np.sort(rng.choice(sp.superpoint_count, size=q, replace=False))
    pred = ScenePrediction(
        masks=rng.random((q, sp.superpoint_count)) < 0.3,
        classes=rng.integers(0, 5, size=q),
        init_superpoints=init,
    )
    vis = compute_visibility(bundle.corr, sp, init)
    partitions = partition_predictions(pred, vis)
    seen = np.zeros(q, dtype=bool)
    for part in partitions:
        assert vis.superpoint_vis[part.view_index, part.init_superpoints].all()
        np.testing.assert_array_equal(
            part.masks, pred.masks[np.ix_(part.query_rows, part.superpoint_cols)]
        )
        seen[part.query_rows] = True
    assert seen.all()


def test_pipeline_is_thread_count_independent(temp_dir: Path) -> None:
    """Test one and eight threads write byte-identical artifacts and manifests."""
    recipe = SceneRecipe(
        SceneKind.FLUSH_OBJECT,
        20_000,
        2,
        (128, 128),
        0.01,
        seed=42,
        feature_channels=16,
    )
    files = write_bundle(generate(recipe), temp_dir / "scene")
    for threads in (1, 8):
        run_pipeline(
            PipelineConfig(
                points=files["points"],
                corr=files["corr"],
                masks=files["masks"],
                features=files["features"],
                text=files["text"],
                origins=files["origins"],
                out_dir=temp_dir / f"t{threads}",
                threads=threads,
            )
        )
    one = sorted(p for p in (temp_dir / "t1").rglob("*") if p.is_file())
    for path in one:
        if path.name == "timings.json":
            continue
        twin = temp_dir / "t8" / path.relative_to(temp_dir / "t1")
        assert path.read_bytes() == twin.read_bytes(), path.name


def test_million_point_segmentation_envelope() -> None:
    """Test a 1M-point scene segments within 60 s and 8 GB peak memory."""
    pytest.importorskip("numba", reason="the envelope needs the compiled merge sweep")
    resource = pytest.importorskip("resource")
    bundle = generate(
        SceneRecipe(SceneKind.BOX_ROOM, 1_000_000, 4, (512, 512), 0.01, seed=5)
    )
    started = time.perf_counter()
    sp = segment_pipeline(
        bundle.points,
        bundle.corr,
        bundle.raster,
        k=16,
        view_origins=bundle.point_origins(),
        threads=os.cpu_count() or 1,
    )
    elapsed = time.perf_counter() - started
    # ru_maxrss is in kilobytes on Linux.
    peak_bytes = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    assert sp.point_count == 1_000_000
    assert elapsed <= 60.0
    assert peak_bytes <= 8 * 2**30
