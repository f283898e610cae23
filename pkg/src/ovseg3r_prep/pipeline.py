"""End-to-end orchestration of the preparation stages.

Stages run in a fixed order and communicate only through artifacts in
``out_dir``:

    normals -> graph -> segment -> lift -> sample-features -> pool
            -> decode -> partition

``sample-features`` and ``pool`` need ``features``; ``decode`` needs
``text`` as well; ``partition`` needs a decoded prediction. Each stage that
runs writes ``<stage>.manifest.json`` with input and output hashes and the
stage's configuration. A stage is skipped when its outputs and manifest
exist, are newer than its inputs, and the recorded inputs and configuration
still match, unless ``force`` is set. Wall-clock timings go to
``timings.json``, which is the only non-reproducible file written.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ovseg3r_prep import __version__, codecs
from ovseg3r_prep.config import PipelineConfig
from ovseg3r_prep.errors import StageError, ValidationError
from ovseg3r_prep.formatting import annotations_to_json, partition_index
from ovseg3r_prep.geometry import (
    build_knn_index,
    estimate_normals,
    view_origins_for_points,
)
from ovseg3r_prep.io_utils import (
    ensure_dir,
    read_indices,
    read_json,
    remove_quietly,
    sha256_file,
    write_indices,
    write_json,
)
from ovseg3r_prep.lifting import (
    lift_masks,
    pool_superpoint_features,
    sample_point_features,
)
from ovseg3r_prep.model import (
    CorrespondenceTable,
    EdgeList,
    FeatureMatrix,
    ImageFeatureStack,
    InstanceRaster,
    NormalField,
    PointCloud,
    ScenePrediction,
    SuperpointMask,
)
from ovseg3r_prep.parallel import resolve_threads
from ovseg3r_prep.superpoint import build_boundary_aware_graph, felzenszwalb_segment
from ovseg3r_prep.vip import (
    compute_visibility,
    decode_predictions,
    gather_queries,
    partition_predictions,
    select_query_superpoints,
)

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"
TIMINGS_FILE = "timings.json"


@dataclass(frozen=True)
class Stage:
    """One pipeline step: what it reads, what it writes, how to run it."""

    name: str
    inputs: dict[str, Path]
    outputs: dict[str, Path]
    config: dict[str, Any]
    run: Callable[[], None]

    def manifest_path(self, out_dir: Path) -> Path:
        return out_dir / f"{self.name}{MANIFEST_SUFFIX}"


@dataclass
class StageOutcome:
    name: str
    status: str
    seconds: float = 0.0
    outputs: list[Path] = field(default_factory=list)


@dataclass
class PipelineResult:
    out_dir: Path
    stages: list[StageOutcome] = field(default_factory=list)

    @property
    def ran(self) -> list[str]:
        return [s.name for s in self.stages if s.status == "ran"]

    @property
    def skipped(self) -> list[str]:
        return [s.name for s in self.stages if s.status == "skipped"]


def _output_files(outputs: dict[str, Path]) -> dict[str, Path]:
    """Expand directory outputs into their files, keyed ``role/file``."""
    files: dict[str, Path] = {}
    for role, path in outputs.items():
        if path.is_dir():
            for child in sorted(p for p in path.iterdir() if p.is_file()):
                files[f"{role}/{child.name}"] = child
        else:
            files[role] = path
    return files


def _digest(paths: dict[str, Path]) -> dict[str, dict[str, str]]:
    return {
        role: {"file": path.name, "sha256": sha256_file(path)}
        for role, path in sorted(paths.items())
    }


def build_manifest(stage: Stage) -> dict[str, Any]:
    """Manifest document for a stage whose outputs exist."""
    return {
        "stage": stage.name,
        "version": __version__,
        "inputs": _digest(stage.inputs),
        "outputs": _digest(_output_files(stage.outputs)),
        "config": stage.config,
    }


def verify_manifest(manifest_path: Path, out_dir: Path | None = None) -> list[str]:
    """Recompute output hashes of a manifest; return the roles that differ.

    Output files are looked up next to the manifest (or in ``out_dir``).
    """
    manifest = read_json(manifest_path)
    base = out_dir or manifest_path.parent
    problems = []
    for role, entry in manifest["outputs"].items():
        folder = role.split("/", 1)[0] if "/" in role else None
        path = base / folder / entry["file"] if folder else base / entry["file"]
        if not path.exists() or sha256_file(path) != entry["sha256"]:
            problems.append(role)
    return problems


def _is_fresh(stage: Stage, out_dir: Path) -> bool:
    manifest_path = stage.manifest_path(out_dir)
    if not manifest_path.exists():
        return False
    if not all(path.exists() for path in stage.outputs.values()):
        return False
    try:
        recorded = read_json(manifest_path)
    except ValueError:
        return False
    if recorded.get("config") != stage.config or recorded.get("version") != __version__:
        return False
    if recorded.get("inputs") != _digest(stage.inputs):
        return False
    outputs = _output_files(stage.outputs)
    if recorded.get("outputs") != _digest(outputs):
        return False
    newest_input = max((p.stat().st_mtime for p in stage.inputs.values()), default=0.0)
    oldest_output = min(p.stat().st_mtime for p in outputs.values())
    return oldest_output >= newest_input


def _run_stage(stage: Stage, out_dir: Path, force: bool) -> StageOutcome:
    missing = [role for role, path in stage.inputs.items() if not path.exists()]
    if missing:
        raise StageError(stage.name, f"missing inputs {missing}")
    if not force and _is_fresh(stage, out_dir):
        logger.info(
            "stage %s is up to date, skipping",
            stage.name,
            extra={"event": "skip", "stage": stage.name},
        )
        return StageOutcome(stage.name, "skipped")

    started = time.perf_counter()
    manifest_path = stage.manifest_path(out_dir)
    remove_quietly([manifest_path, *stage.outputs.values()])
    try:
        stage.run()
        write_json(manifest_path, build_manifest(stage))
    except Exception as e:
        remove_quietly([manifest_path, *stage.outputs.values()])
        raise StageError(stage.name, str(e)) from e
    seconds = time.perf_counter() - started
    logger.info(
        "stage %s finished in %.3f s",
        stage.name,
        seconds,
        extra={"event": "stage", "stage": stage.name, "seconds": seconds},
    )
    return StageOutcome(
        stage.name, "ran", seconds, list(_output_files(stage.outputs).values())
    )


def plan_stages(config: PipelineConfig, threads: int) -> list[Stage]:
    """The stages ``config`` enables, in execution order."""
    out = config.out_dir
    paths = {
        "normals": out / "normals.ovfm",
        "edges": out / "edges.oveg",
        "superpoints": out / "superpoints.ovsp",
        "annotations": out / "annotations.json",
        "point_features": out / "point_features.ovfm",
        "sp_features": out / "sp_features.ovfm",
        "prediction": out / "prediction.ovpr",
        "init": out / "init_superpoints.txt",
        "partitions": out / "partitions",
    }

    def load_common() -> tuple[PointCloud, CorrespondenceTable]:
        return (
            codecs.load(config.points, PointCloud),
            codecs.load(config.corr, CorrespondenceTable),
        )

    def run_normals() -> None:
        points, corr = load_common()
        origins = None
        if config.origins is not None:
            origins = view_origins_for_points(
                corr, codecs.load(config.origins, FeatureMatrix)
            )
        index = build_knn_index(points, config.k, threads=threads)
        normals = estimate_normals(points, index, origins, threads=threads)
        codecs.save(paths["normals"], FeatureMatrix(data=normals.normals))

    def run_graph() -> None:
        points, corr = load_common()
        raster = codecs.load(config.masks, InstanceRaster)
        normals = NormalField(normals=codecs.load(paths["normals"], FeatureMatrix).data)
        index = build_knn_index(points, config.k, threads=threads)
        edges = build_boundary_aware_graph(
            points, normals, index, corr, raster, config.segment_config(), threads
        )
        codecs.save(paths["edges"], edges)

    def run_segment() -> None:
        points = codecs.load(config.points, PointCloud)
        edges = codecs.load(paths["edges"], EdgeList)
        sp = felzenszwalb_segment(points, edges, config.segment_config())
        codecs.save(paths["superpoints"], sp)

    def run_lift() -> None:
        corr = codecs.load(config.corr, CorrespondenceTable)
        raster = codecs.load(config.masks, InstanceRaster)
        write_json(paths["annotations"], annotations_to_json(lift_masks(raster, corr)))

    def run_sample() -> None:
        corr = codecs.load(config.corr, CorrespondenceTable)
        stack = codecs.load(config.features, ImageFeatureStack)  # type: ignore
        point_features = sample_point_features(stack, corr, threads)
        codecs.save(paths["point_features"], point_features)

    def run_pool() -> None:
        features = codecs.load(paths["point_features"], FeatureMatrix)
        sp = codecs.load(paths["superpoints"], SuperpointMask)
        codecs.save(paths["sp_features"], pool_superpoint_features(features, sp))

    def run_decode() -> None:
        sp_features = codecs.load(paths["sp_features"], FeatureMatrix)
        text = codecs.load(config.text, FeatureMatrix)  # type: ignore[arg-type]
        queries = (
            codecs.load(config.queries, FeatureMatrix) if config.queries else None
        )
        if config.init is not None:
            init = np.array(read_indices(config.init), dtype=np.int64)
        else:
            wanted = queries.rows if queries is not None else config.query_count
            init = select_query_superpoints(sp_features.rows, wanted, config.seed)
            if queries is not None and init.size != queries.rows:
                raise ValidationError(
                    f"{queries.rows} queries but only {sp_features.rows} superpoints"
                )
        if queries is None:
            queries = gather_queries(sp_features, init)
        pred = decode_predictions(queries, sp_features, text, config.tau, init)
        codecs.save(paths["prediction"], pred)
        write_indices(paths["init"], pred.init_superpoints.tolist())

    def run_partition() -> None:
        pred = codecs.load(paths["prediction"], ScenePrediction)
        sp = codecs.load(paths["superpoints"], SuperpointMask)
        corr = codecs.load(config.corr, CorrespondenceTable)
        partitions = write_partitions(paths["partitions"], pred, sp, corr)
        logger.debug("wrote %d view partitions", len(partitions))

    k_cfg = {"k": config.k, "origins": config.origins is not None}
    normals_inputs = {"points": config.points, "corr": config.corr}
    if config.origins:
        normals_inputs["origins"] = config.origins
    seg = config.segment_config().model_dump(mode="json")
    stages = [
        Stage(
            "normals",
            normals_inputs,
            {"normals": paths["normals"]},
            k_cfg,
            run_normals,
        ),
        Stage(
            "graph",
            {
                "points": config.points,
                "normals": paths["normals"],
                "corr": config.corr,
                "masks": config.masks,
            },
            {"edges": paths["edges"]},
            {
                "k": config.k,
                "cross_view_policy": seg["cross_view_policy"],
                "background_policy": seg["background_policy"],
            },
            run_graph,
        ),
        Stage(
            "segment",
            {"points": config.points, "edges": paths["edges"]},
            {"superpoints": paths["superpoints"]},
            {"sp_thresh": seg["sp_thresh"], "sp_min": seg["sp_min"]},
            run_segment,
        ),
        Stage(
            "lift",
            {"corr": config.corr, "masks": config.masks},
            {"annotations": paths["annotations"]},
            {},
            run_lift,
        ),
    ]
    if config.features is None:
        return stages
    stages += [
        Stage(
            "sample-features",
            {"features": config.features, "corr": config.corr},
            {"point_features": paths["point_features"]},
            {},
            run_sample,
        ),
        Stage(
            "pool",
            {
                "point_features": paths["point_features"],
                "superpoints": paths["superpoints"],
            },
            {"sp_features": paths["sp_features"]},
            {},
            run_pool,
        ),
    ]
    if config.text is None:
        return stages
    decode_inputs = {"sp_features": paths["sp_features"], "text": config.text}
    if config.queries is not None:
        decode_inputs["queries"] = config.queries
    if config.init is not None:
        decode_inputs["init"] = config.init
    stages += [
        Stage(
            "decode",
            decode_inputs,
            {"prediction": paths["prediction"], "init": paths["init"]},
            {"tau": config.tau, "seed": config.seed, "query_count": config.query_count},
            run_decode,
        ),
        Stage(
            "partition",
            {
                "prediction": paths["prediction"],
                "superpoints": paths["superpoints"],
                "corr": config.corr,
            },
            {"partitions": paths["partitions"]},
            {},
            run_partition,
        ),
    ]
    return stages


def write_partitions(
    out_dir: Path,
    pred: ScenePrediction,
    sp: SuperpointMask,
    corr: CorrespondenceTable,
) -> list[Path]:
    """Partition ``pred`` by view and write one OVPR per view plus ``index.json``."""
    vis = compute_visibility(corr, sp, pred.init_superpoints)
    partitions = partition_predictions(pred, vis)
    ensure_dir(out_dir)
    written = []
    for part in partitions:
        path = out_dir / f"view_{part.view_index:04d}.ovpr"
        codecs.save(path, part.to_prediction())
        written.append(path)
    index_path = out_dir / "index.json"
    write_json(index_path, partition_index(partitions))
    written.append(index_path)
    return written


def run_pipeline(config: PipelineConfig, force: bool = False) -> PipelineResult:
    """Run every enabled stage in order.

    Args:
        config: Validated pipeline configuration.
        force: Re-run stages even when they are up to date.

    Returns:
        Which stages ran and which were skipped.

    Raises:
        StageError: On the first failing stage; its partial outputs are
            removed and the cause is chained.
    """
    threads = resolve_threads(config.threads)
    ensure_dir(config.out_dir)
    result = PipelineResult(out_dir=config.out_dir)
    for stage in plan_stages(config, threads):
        result.stages.append(_run_stage(stage, config.out_dir, force))
    write_json(
        config.out_dir / TIMINGS_FILE,
        {
            s.name: {"status": s.status, "seconds": round(s.seconds, 6)}
            for s in result.stages
        },
    )
    logger.info(
        "pipeline done: %d ran, %d skipped",
        len(result.ran),
        len(result.skipped),
        extra={"event": "pipeline", "ran": result.ran, "skipped": result.skipped},
    )
    return result
