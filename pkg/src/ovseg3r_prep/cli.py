"""Command-line interface for ovseg3r-prep.

This module provides the CLI entry point and argument parsing. Every
algorithm is exposed as a subcommand that reads and writes artifact files;
``pipeline`` chains them with manifests and caching.

Exit codes: 0 success, 2 invalid input, 3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.markup import escape

from ovseg3r_prep import __version__, codecs
from ovseg3r_prep.config import (
    BackgroundPolicy,
    CrossViewPolicy,
    SegmentConfig,
    load_pipeline_config,
    validated,
)
from ovseg3r_prep.errors import FormatError, InvariantError, StageError, ValidationError
from ovseg3r_prep.formatting import (
    annotation_point_labels,
    annotations_from_json,
    annotations_to_json,
    export_ply,
)
from ovseg3r_prep.geometry import (
    DEFAULT_K,
    build_knn_index,
    estimate_normals,
    view_origins_for_points,
)
from ovseg3r_prep.io_utils import (
    read_indices,
    read_json,
    write_bytes_atomic,
    write_indices,
    write_json,
)
from ovseg3r_prep.lifting import (
    build_prompt,
    lift_masks,
    pool_superpoint_features,
    sample_point_features,
)
from ovseg3r_prep.logging_utils import configure_logging
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
from ovseg3r_prep.oracles import ORACLE_KINDS, run_oracle_trials
from ovseg3r_prep.parallel import resolve_threads
from ovseg3r_prep.pipeline import run_pipeline, write_partitions
from ovseg3r_prep.superpoint import build_boundary_aware_graph, felzenszwalb_segment
from ovseg3r_prep.synth import SceneKind, SceneRecipe, generate, write_bundle
from ovseg3r_prep.vip import (
    decode_predictions,
    gather_queries,
    select_query_superpoints,
)

console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger("ovseg3r_prep.cli")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INTERNAL = 3


def _wrote(args: argparse.Namespace, path: Path) -> None:
    if args.json:
        logger.info("wrote %s", path, extra={"event": "wrote", "path": str(path)})
    else:
        console.print(f"[green]Wrote:[/green] {path}")


def _threads(args: argparse.Namespace) -> int:
    return resolve_threads(args.threads)


# --- subcommand handlers -----------------------------------------------------


def _cmd_normals(args: argparse.Namespace) -> int:
    points = codecs.load(args.points, PointCloud)
    origins = None
    if args.origins is not None:
        if args.corr is None:
            raise ValidationError("--origins needs --corr to map views to points")
        corr = codecs.load(args.corr, CorrespondenceTable)
        view_origins = codecs.load(args.origins, FeatureMatrix)
        origins = view_origins_for_points(corr, view_origins)
    threads = _threads(args)
    index = build_knn_index(points, args.k, threads=threads)
    normals = estimate_normals(points, index, origins, threads=threads)
    codecs.save(args.out, FeatureMatrix(data=normals.normals))
    _wrote(args, args.out)
    return EXIT_OK


def _segment_config(args: argparse.Namespace) -> SegmentConfig:
    values: dict[str, Any] = {}
    for key, attr in (
        ("sp_thresh", "thresh"),
        ("sp_min", "min_size"),
        ("cross_view_policy", "cross_view"),
        ("background_policy", "background"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return validated(SegmentConfig, values)


def _cmd_graph(args: argparse.Namespace) -> int:
    points = codecs.load(args.points, PointCloud)
    normals = NormalField(normals=codecs.load(args.normals, FeatureMatrix).data)
    corr = codecs.load(args.corr, CorrespondenceTable)
    raster = codecs.load(args.masks, InstanceRaster)
    threads = _threads(args)
    index = build_knn_index(points, args.k, threads=threads)
    edges = build_boundary_aware_graph(
        points, normals, index, corr, raster, _segment_config(args), threads=threads
    )
    codecs.save(args.out, edges)
    _wrote(args, args.out)
    return EXIT_OK


def _cmd_segment(args: argparse.Namespace) -> int:
    points = codecs.load(args.points, PointCloud)
    edges = codecs.load(args.edges, EdgeList)
    sp = felzenszwalb_segment(points, edges, _segment_config(args))
    codecs.save(args.out, sp)
    _wrote(args, args.out)
    if not args.json:
        console.print(f"[bold]Superpoints:[/bold] {sp.superpoint_count}")
    return EXIT_OK


def _cmd_lift(args: argparse.Namespace) -> int:
    raster = codecs.load(args.masks, InstanceRaster)
    corr = codecs.load(args.corr, CorrespondenceTable)
    write_json(args.out, annotations_to_json(lift_masks(raster, corr)))
    _wrote(args, args.out)
    return EXIT_OK


def _cmd_sample_features(args: argparse.Namespace) -> int:
    stack = codecs.load(args.features, ImageFeatureStack)
    corr = codecs.load(args.corr, CorrespondenceTable)
    codecs.save(args.out, sample_point_features(stack, corr, threads=_threads(args)))
    _wrote(args, args.out)
    return EXIT_OK


def _cmd_pool(args: argparse.Namespace) -> int:
    features = codecs.load(args.point_features, FeatureMatrix)
    sp = codecs.load(args.superpoints, SuperpointMask)
    codecs.save(args.out, pool_superpoint_features(features, sp))
    _wrote(args, args.out)
    return EXIT_OK


def _cmd_prompt(args: argparse.Namespace) -> int:
    if not args.vocab.exists():
        raise FileNotFoundError(f"Vocabulary file not found: {args.vocab}")
    vocabulary = args.vocab.read_text(encoding="utf-8").splitlines()
    positive = [name for name in args.positive.split(",") if name.strip()]
    spec = build_prompt(positive, vocabulary, args.T, args.seed)
    if args.out is not None:
        write_json(args.out, spec.to_dict())
        _wrote(args, args.out)
    if args.json:
        print(json.dumps(spec.to_dict(), sort_keys=True))
    else:
        console.print(spec.prompt_string, markup=False, highlight=False)
    return EXIT_OK


def _cmd_decode(args: argparse.Namespace) -> int:
    sp_features = codecs.load(args.sp_features, FeatureMatrix)
    text = codecs.load(args.text, FeatureMatrix)
    queries = codecs.load(args.queries, FeatureMatrix) if args.queries else None
    if args.init is not None:
        init = np.array(read_indices(args.init), dtype=np.int64)
    else:
        wanted = queries.rows if queries is not None else args.query_count
        init = select_query_superpoints(sp_features.rows, wanted, args.seed)
    if queries is None:
        queries = gather_queries(sp_features, init)
    pred = decode_predictions(queries, sp_features, text, args.tau, init)
    codecs.save(args.out, pred)
    _wrote(args, args.out)
    if args.init is None:
        init_path = args.out.with_suffix(".init.txt")
        write_indices(init_path, pred.init_superpoints.tolist())
        _wrote(args, init_path)
    return EXIT_OK


def _cmd_partition(args: argparse.Namespace) -> int:
    pred = codecs.load(args.pred, ScenePrediction)
    sp = codecs.load(args.superpoints, SuperpointMask)
    corr = codecs.load(args.corr, CorrespondenceTable)
    for path in write_partitions(args.out, pred, sp, corr):
        _wrote(args, path)
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    recipe = SceneRecipe(
        scene_kind=SceneKind.parse(args.scene),
        point_count=args.n,
        view_count=args.views,
        raster_dims=(args.height, args.width),
        smoothing_sigma=args.sigma,
        seed=args.seed,
        feature_channels=args.feature_channels,
    )
    for path in write_bundle(generate(recipe), args.out).values():
        _wrote(args, path)
    return EXIT_OK


def _cmd_oracle(args: argparse.Namespace) -> int:
    report = run_oracle_trials(args.kind, args.trials, args.seed, args.dump_dir)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    elif report.passed:
        console.print(
            f"[green]{report.kind}:[/green] "
            f"{report.trials}/{report.trials} trials agree"
        )
    else:
        for failure in report.failures:
            console.print(f"[red]trial {failure.trial}:[/red] {failure.message}")
        for path in report.dumped:
            _wrote(args, path)
    if not report.passed:
        raise InvariantError(
            f"{len(report.failures)} of {report.trials} {report.kind} trials disagree"
        )
    return EXIT_OK


def _cmd_export_ply(args: argparse.Namespace) -> int:
    points = codecs.load(args.points, PointCloud)
    if args.labels is not None:
        labels = codecs.load(args.labels, SuperpointMask).point_labels
    else:
        annotations = annotations_from_json(read_json(args.ids))
        labels = annotation_point_labels(annotations, points.point_count)
    write_bytes_atomic(args.out, export_ply(points, labels, args.seed, args.ascii))
    _wrote(args, args.out)
    return EXIT_OK


_PIPELINE_OVERRIDES = (
    "points",
    "corr",
    "masks",
    "features",
    "text",
    "queries",
    "init",
    "origins",
    "out_dir",
    "k",
    "sp_thresh",
    "sp_min",
    "cross_view_policy",
    "background_policy",
    "tau",
    "seed",
    "query_count",
    "threads",
)


def _cmd_pipeline(args: argparse.Namespace) -> int:
    overrides = {key: getattr(args, key) for key in _PIPELINE_OVERRIDES}
    config = load_pipeline_config(args.config, overrides)
    result = run_pipeline(config, force=args.force)
    for outcome in result.stages:
        if outcome.status == "skipped":
            if not args.json:
                console.print(f"[dim]Skipped:[/dim] {outcome.name} (up to date)")
            continue
        for path in outcome.outputs:
            _wrote(args, path)
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _common_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        "--json", action="store_true", help="JSON-lines logs and errors."
    )
    parent.add_argument("--verbose", action="store_true", help="Log debug details.")
    parent.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (0 = all CPUs; default: $OVSEG3R_THREADS or 0).",
    )
    return parent


def _add_segment_flags(parser: argparse.ArgumentParser, graph: bool) -> None:
    if graph:
        parser.add_argument(
            "--cross-view", choices=[p.value for p in CrossViewPolicy], default=None
        )
        parser.add_argument(
            "--background", choices=[p.value for p in BackgroundPolicy], default=None
        )
    else:
        parser.add_argument("--thresh", type=float, default=None, help="sp_thresh.")
        parser.add_argument("--min-size", type=int, default=None, help="sp_min.")


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with every subcommand."""
    parent = _common_parent()
    parser = argparse.ArgumentParser(
        prog="ovseg3r-prep",
        description=(
            "Superpoints, 2D-to-3D lifting and view-wise instance partition "
            "for multi-view reconstructions."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command")

    def add(
        name: str, handler: Callable[[argparse.Namespace], int], help_text: str
    ) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[parent], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("normals", _cmd_normals, "PCA normals of a point cloud.")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--corr", type=Path, default=None)
    p.add_argument("--origins", type=Path, default=None, help="V×3 view origins.")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--out", type=Path, required=True)

    p = add("graph", _cmd_graph, "Instance-boundary-aware k-NN graph.")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--normals", type=Path, required=True)
    p.add_argument("--corr", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    _add_segment_flags(p, graph=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("segment", _cmd_segment, "Felzenszwalb superpoints from an edge list.")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--edges", type=Path, required=True)
    _add_segment_flags(p, graph=False)
    p.add_argument("--out", type=Path, required=True)

    p = add("lift", _cmd_lift, "Lift 2D instance masks to per-view 3D annotations.")
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--corr", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("sample-features", _cmd_sample_features, "Bilinear per-point features.")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--corr", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("pool", _cmd_pool, "Mean-pool point features into superpoints.")
    p.add_argument("--point-features", type=Path, required=True)
    p.add_argument("--superpoints", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("prompt", _cmd_prompt, "Assemble a padded text prompt.")
    p.add_argument("--positive", type=str, default="", help="Comma-separated names.")
    p.add_argument("--vocab", type=Path, required=True, help="One class per line.")
    p.add_argument("--T", type=int, default=8, dest="T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)

    p = add("decode", _cmd_decode, "Decode masks and classes from feature matrices.")
    p.add_argument("--queries", type=Path, default=None)
    p.add_argument("--sp-features", type=Path, required=True)
    p.add_argument("--text", type=Path, required=True)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--init", type=Path, default=None, help="One index per line.")
    p.add_argument("--query-count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("partition", _cmd_partition, "View-wise instance partition.")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--superpoints", type=Path, required=True)
    p.add_argument("--corr", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Output directory.")

    p = add("synth", _cmd_synth, "Generate a synthetic multi-view scene.")
    p.add_argument(
        "--scene",
        type=str,
        required=True,
        help="flush-object, box-room, two-view-seam or random-blobs.",
    )
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-channels", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="Output directory.")

    p = add("oracle", _cmd_oracle, "Compare optimized kernels with references.")
    p.add_argument("kind", choices=ORACLE_KINDS)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-dir", type=Path, default=None)

    p = add("export-ply", _cmd_export_ply, "Colored PLY for visual inspection.")
    p.add_argument("--points", type=Path, required=True)
    labels = p.add_mutually_exclusive_group(required=True)
    labels.add_argument("--labels", type=Path, help="Superpoints (.ovsp).")
    labels.add_argument("--ids", type=Path, help="Lifted annotations (.json).")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = add("pipeline", _cmd_pipeline, "Run every stage with manifests and caching.")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--force", action="store_true")
    path_flags = ("points", "corr", "masks", "features", "text", "queries", "init")
    for flag in (*path_flags, "origins", "out-dir"):
        p.add_argument(f"--{flag}", type=Path, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--sp-thresh", type=float, default=None)
    p.add_argument("--sp-min", type=int, default=None)
    p.add_argument(
        "--cross-view",
        dest="cross_view_policy",
        default=None,
        choices=[c.value for c in CrossViewPolicy],
    )
    p.add_argument(
        "--background",
        dest="background_policy",
        default=None,
        choices=[c.value for c in BackgroundPolicy],
    )
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--query-count", type=int, default=None)
    return parser


# --- errors -----------------------------------------------------------------


def exit_code_for(error: BaseException) -> int:
    """Exit code of an exception: 2 for invalid input, 3 for anything else."""
    if isinstance(error, StageError) and error.__cause__ is not None:
        return exit_code_for(error.__cause__)
    if isinstance(error, (ValueError, FileNotFoundError)):
        return EXIT_INVALID
    return EXIT_INTERNAL


def _error_payload(error: BaseException, code: int) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "error": type(error).__name__,
        "message": str(error),
        "exit_code": code,
    }
    cause = error.__cause__ if isinstance(error, StageError) else error
    if isinstance(error, StageError):
        payload["stage"] = error.stage
    if isinstance(cause, FormatError):
        payload["offset"] = cause.offset
        payload["format"] = cause.fmt
    return payload


def _report_error(error: BaseException, code: int, json_mode: bool) -> None:
    if json_mode:
        sys.stderr.write(json.dumps(_error_payload(error, code), sort_keys=True) + "\n")
    else:
        err_console.print(f"[red]Error:[/red] {escape(str(error))}", highlight=False)
    logger.debug("failure details", exc_info=error)


def main(argv: list[str] | None = None) -> int:
    """Entry point for the ovseg3r-prep CLI.

    Args:
        argv: Arguments without the program name; defaults to ``sys.argv``.

    Returns:
        The process exit code.
    """
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID

    configure_logging(json_mode=args.json, verbose=args.verbose)
    try:
        return args.handler(args)
    except Exception as e:
        code = exit_code_for(e)
        _report_error(e, code, args.json)
        return code


if __name__ == "__main__":
    sys.exit(main())
