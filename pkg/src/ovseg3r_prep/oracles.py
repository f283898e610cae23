"""Scalar-loop reference implementations and a randomized comparison harness.

Each ``oracle_*`` function has the contract of its optimized counterpart but
is written as the plainest possible loop, with no shared helpers beyond the
domain types. ``run_oracle_trials`` draws seeded random instances, runs both
versions and records every disagreement; failures can be dumped to disk as
JSON reproductions.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ovseg3r_prep.config import SegmentConfig
from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.geometry import build_knn_index
from ovseg3r_prep.io_utils import write_json
from ovseg3r_prep.lifting import pool_superpoint_features, sample_point_features
from ovseg3r_prep.model import (
    CorrespondenceTable,
    EdgeList,
    FeatureMatrix,
    ImageFeatureStack,
    PointCloud,
    ScenePrediction,
    SuperpointMask,
)
from ovseg3r_prep.superpoint import felzenszwalb_segment
from ovseg3r_prep.vip import (
    VisibilityMasks,
    compute_visibility,
    decode_predictions,
    partition_predictions,
)

logger = logging.getLogger(__name__)

ORACLE_KINDS = ("felz", "pool", "bilinear", "vip", "decode", "knn")
REAL_TOLERANCE = 1e-6


# --- references ---------------------------------------------------------------


def oracle_felzenszwalb(
    points: PointCloud, edges: EdgeList, cfg: SegmentConfig
) -> SuperpointMask:
    """Felzenszwalb segmentation over a plain component-id array.

    Every merge rewrites the component id of all affected points by a full
    scan; no forest, no path compression.
    """
    n = points.point_count
    comp = list(range(n))
    size = [1] * n
    threshold = [float(cfg.sp_thresh)] * n
    order = sorted(
        range(edges.edge_count),
        key=lambda e: (float(edges.w[e]), int(edges.i[e]), int(edges.j[e])),
    )

    def merge(a: int, b: int) -> int:
        keep, gone = (a, b) if size[a] >= size[b] else (b, a)
        for p in range(n):
            if comp[p] == gone:
                comp[p] = keep
        size[keep] += size[gone]
        return keep

    for e in order:
        a, b = comp[int(edges.i[e])], comp[int(edges.j[e])]
        w = float(edges.w[e])
        if a != b and w <= threshold[a] and w <= threshold[b]:
            keep = merge(a, b)
            threshold[keep] = w + float(cfg.sp_thresh) / size[keep]
    for e in order:
        a, b = comp[int(edges.i[e])], comp[int(edges.j[e])]
        if a != b and (size[a] < cfg.sp_min or size[b] < cfg.sp_min):
            merge(a, b)

    relabel: dict[int, int] = {}
    labels = []
    for p in range(n):
        labels.append(relabel.setdefault(comp[p], len(relabel)))
    return SuperpointMask(point_labels=np.array(labels), superpoint_count=len(relabel))


def oracle_pool(point_features: FeatureMatrix, sp: SuperpointMask) -> FeatureMatrix:
    sums = [[0.0] * point_features.cols for _ in range(sp.superpoint_count)]
    counts = [0] * sp.superpoint_count
    for p in range(sp.point_count):
        label = int(sp.point_labels[p])
        counts[label] += 1
        for c in range(point_features.cols):
            sums[label][c] += float(point_features.data[p, c])
    means = [[s / counts[k] for s in sums[k]] for k in range(sp.superpoint_count)]
    return FeatureMatrix(data=np.array(means, dtype=np.float64).reshape(
        sp.superpoint_count, point_features.cols
    ))


def oracle_bilinear(
    stack: ImageFeatureStack, corr: CorrespondenceTable
) -> FeatureMatrix:
    _, h, w, channels = stack.data.shape
    rows = []
    for p in range(corr.point_count):
        v = int(corr.views[p])
        gx = float(corr.xy[p, 0]) * (w - 1)
        gy = float(corr.xy[p, 1]) * (h - 1)
        x0 = min(max(int(np.floor(gx)), 0), w - 1)
        y0 = min(max(int(np.floor(gy)), 0), h - 1)
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx = min(max(gx - x0, 0.0), 1.0)
        fy = min(max(gy - y0, 0.0), 1.0)
        row = []
        for c in range(channels):
            f00 = float(stack.data[v, y0, x0, c])
            f01 = float(stack.data[v, y0, x1, c])
            f10 = float(stack.data[v, y1, x0, c])
            f11 = float(stack.data[v, y1, x1, c])
            top = (1.0 - fx) * f00 + fx * f01
            bottom = (1.0 - fx) * f10 + fx * f11
            row.append((1.0 - fy) * top + fy * bottom)
        rows.append(row)
    return FeatureMatrix(data=np.array(rows, dtype=np.float64).reshape(-1, channels))


def oracle_visibility(
    corr: CorrespondenceTable, sp: SuperpointMask, init_superpoints: np.ndarray
) -> VisibilityMasks:
    """Dense ``V^p · M^spᵀ > 0``."""
    point_vis = np.zeros((corr.view_count, corr.point_count), dtype=np.int64)
    for p in range(corr.point_count):
        point_vis[int(corr.views[p]), p] = 1
    membership = sp.as_boolean_matrix().astype(np.int64)
    superpoint_vis = (point_vis @ membership.T) > 0
    init = np.asarray(init_superpoints, dtype=np.int64)
    if init.size and init.max() >= sp.superpoint_count:
        raise ValidationError("init superpoint out of range")
    return VisibilityMasks(
        point_views=corr.views,
        superpoint_vis=superpoint_vis,
        query_vis=superpoint_vis[:, init],
    )


def oracle_partition(
    pred: ScenePrediction, vis: VisibilityMasks
) -> list[dict[str, list[Any]]]:
    """Per view: query rows, superpoint columns, mask cells and classes."""
    views = []
    for v in range(vis.view_count):
        rows = [a for a in range(pred.query_count) if vis.query_vis[v, a]]
        cols = [k for k in range(pred.superpoint_count) if vis.superpoint_vis[v, k]]
        views.append(
            {
                "rows": rows,
                "cols": cols,
                "masks": [[bool(pred.masks[a, k]) for k in cols] for a in rows],
                "classes": [int(pred.classes[a]) for a in rows],
            }
        )
    return views


def oracle_decode(
    queries: FeatureMatrix,
    sp_features: FeatureMatrix,
    text: FeatureMatrix,
    tau: float,
    init_superpoints: np.ndarray,
) -> ScenePrediction:
    def dot(a: np.ndarray, b: np.ndarray) -> float:
        total = 0.0
        for c in range(a.size):
            total += float(a[c]) * float(b[c])
        return total

    masks = [
        [
            dot(queries.data[a], sp_features.data[k]) > tau
            for k in range(sp_features.rows)
        ]
        for a in range(queries.rows)
    ]
    classes = []
    for a in range(queries.rows):
        best, best_score = 0, dot(queries.data[a], text.data[0])
        for t in range(1, text.rows):
            score = dot(queries.data[a], text.data[t])
            if score > best_score:
                best, best_score = t, score
        classes.append(best)
    return ScenePrediction(
        masks=np.array(masks, dtype=bool).reshape(queries.rows, sp_features.rows),
        classes=np.array(classes, dtype=np.int64),
        init_superpoints=init_superpoints,
    )


def oracle_knn(points: PointCloud, k: int) -> np.ndarray:
    """All-pairs scan: neighbours by squared distance, then index."""
    pos = points.positions.astype(np.float64)
    n = points.point_count
    rows = []
    for i in range(n):
        scored = []
        for j in range(n):
            if j == i:
                continue
            dx, dy, dz = pos[j] - pos[i]
            scored.append(((dx * dx + dy * dy) + dz * dz, j))
        scored.sort()
        rows.append([j for _, j in scored[:k]])
    return np.array(rows, dtype=np.int64).reshape(n, k)


# --- random instances -----------------------------------------------------------


def _random_superpoints(
    rng: np.random.Generator, point_count: int, superpoint_count: int
) -> SuperpointMask:
    labels = np.concatenate(
        [
            np.arange(superpoint_count),
            rng.integers(0, superpoint_count, point_count - superpoint_count),
        ]
    )
    rng.shuffle(labels)
    return SuperpointMask(point_labels=labels, superpoint_count=superpoint_count)


def _random_corr(
    rng: np.random.Generator, point_count: int, view_count: int, dims: tuple[int, int]
) -> CorrespondenceTable:
    xy = rng.uniform(0.0, 1.0, (point_count, 2))
    # Exercise exact grid corners and borders.
    edge_rows = rng.random(point_count) < 0.1
    xy[edge_rows] = rng.integers(0, 2, (int(edge_rows.sum()), 2))
    return CorrespondenceTable(
        views=rng.integers(0, view_count, point_count),
        xy=xy,
        view_dims=np.tile(dims, (view_count, 1)),
    )


def random_edge_list(
    rng: np.random.Generator, point_count: int, max_edges: int
) -> EdgeList:
    """Random simple graph with heavily tied, quantized weights."""
    if point_count < 2:
        return EdgeList(i=[], j=[], w=[])
    possible = point_count * (point_count - 1) // 2
    wanted = int(rng.integers(0, min(max_edges, possible) + 1))
    a = rng.integers(0, point_count, 2 * wanted + 1)
    b = rng.integers(0, point_count, 2 * wanted + 1)
    keep = a != b
    lo, hi = np.minimum(a, b)[keep], np.maximum(a, b)[keep]
    keys = np.unique(lo * point_count + hi)
    keys = rng.permutation(keys)[:wanted]
    i, j = keys // point_count, keys % point_count
    w = rng.integers(0, 20, keys.size) / 10.0
    return EdgeList(i=i, j=j, w=w)


# --- harness ----------------------------------------------------------------------


@dataclass
class OracleFailure:
    trial: int
    message: str
    case: dict[str, Any] = field(repr=False)


@dataclass
class OracleReport:
    """Outcome of ``trials`` randomized comparisons of one kind."""

    kind: str
    trials: int
    seed: int
    failures: list[OracleFailure] = field(default_factory=list)
    dumped: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict[str, object]:
        return {
            "kind": self.kind,
            "trials": self.trials,
            "seed": self.seed,
            "failures": [
                {"trial": f.trial, "message": f.message} for f in self.failures
            ],
            "dumped": [str(p) for p in self.dumped],
        }


def _felz_case(rng: np.random.Generator) -> dict[str, Any]:
    n = int(rng.integers(1, 201))
    edges = random_edge_list(rng, n, 2000)
    return {
        "n": n,
        "i": edges.i.tolist(),
        "j": edges.j.tolist(),
        "w": edges.w.tolist(),
        "sp_thresh": float(rng.choice([0.05, 0.1, 0.5])),
        "sp_min": int(rng.choice([1, 3, 10])),
    }


def _felz_mismatch(case: dict[str, Any]) -> str | None:
    points = PointCloud(positions=np.zeros((case["n"], 3)))
    edges = EdgeList(i=case["i"], j=case["j"], w=case["w"])
    cfg = SegmentConfig(sp_thresh=case["sp_thresh"], sp_min=case["sp_min"])
    fast = felzenszwalb_segment(points, edges, cfg)
    slow = oracle_felzenszwalb(points, edges, cfg)
    if not np.array_equal(fast.point_labels, slow.point_labels):
        return f"partitions differ: {fast.superpoint_count} vs {slow.superpoint_count}"
    return None


def minimize_felz_case(case: dict[str, Any]) -> dict[str, Any]:
    """Greedily drop edges while the mismatch persists."""
    current = dict(case)
    e = 0
    while e < len(current["i"]):
        trial = dict(current)
        for key in ("i", "j", "w"):
            trial[key] = current[key][:e] + current[key][e + 1 :]
        if _felz_mismatch(trial) is not None:
            current = trial
        else:
            e += 1
    return current


def _pool_case(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    n_points = int(rng.integers(1, 301))
    sp = _random_superpoints(rng, n_points, int(rng.integers(1, n_points + 1)))
    channels = int(rng.integers(1, 17))
    features = FeatureMatrix(data=rng.standard_normal((n_points, channels)))
    fast = pool_superpoint_features(features, sp).data
    slow = oracle_pool(features, sp).data
    err = float(np.max(np.abs(fast - slow)))
    case = {"labels": sp.point_labels.tolist(), "features": features.data.tolist()}
    return (f"max abs error {err:.3g}" if err > REAL_TOLERANCE else None), case


def _bilinear_case(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    views = int(rng.integers(1, 4))
    h, w = (int(d) for d in rng.integers(1, 7, 2))
    channels = int(rng.integers(1, 5))
    stack = ImageFeatureStack(data=rng.standard_normal((views, h, w, channels)))
    corr = _random_corr(rng, int(rng.integers(1, 101)), views, (h, w))
    fast = sample_point_features(stack, corr).data
    slow = oracle_bilinear(stack, corr).data
    err = float(np.max(np.abs(fast - slow)))
    case = {
        "stack": stack.data.tolist(),
        "views": corr.views.tolist(),
        "xy": corr.xy.tolist(),
    }
    return (f"max abs error {err:.3g}" if err > REAL_TOLERANCE else None), case


def _vip_case(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    n_points = int(rng.integers(1, 201))
    views = int(rng.integers(1, 5))
    corr = _random_corr(rng, n_points, views, (4, 4))
    sp = _random_superpoints(rng, n_points, int(rng.integers(1, n_points + 1)))
    q = int(rng.integers(0, min(sp.superpoint_count, 16) + 1))
    init = rng.choice(sp.superpoint_count, size=q, replace=False)
    pred = ScenePrediction(
        masks=rng.random((q, sp.superpoint_count)) < 0.5,
        classes=rng.integers(0, 5, q),
        init_superpoints=init,
    )
    case = {
        "views": corr.views.tolist(),
        "labels": sp.point_labels.tolist(),
        "init": init.tolist(),
        "masks": pred.masks.astype(int).tolist(),
        "classes": pred.classes.tolist(),
    }
    fast_vis = compute_visibility(corr, sp, init)
    slow_vis = oracle_visibility(corr, sp, init)
    if not np.array_equal(fast_vis.superpoint_vis, slow_vis.superpoint_vis):
        return "superpoint visibility differs", case
    if not np.array_equal(fast_vis.query_vis, slow_vis.query_vis):
        return "query visibility differs", case
    if not np.array_equal(fast_vis.point_vis, slow_vis.point_vis):
        return "point visibility differs", case
    fast_parts = partition_predictions(pred, fast_vis)
    for part, ref in zip(fast_parts, oracle_partition(pred, slow_vis)):
        got = {
            "rows": part.query_rows.tolist(),
            "cols": part.superpoint_cols.tolist(),
            "masks": part.masks.tolist(),
            "classes": part.classes.tolist(),
        }
        if got != ref:
            return f"partition of view {part.view_index} differs", case
    return None, case


def _decode_case(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    n = int(rng.integers(1, 21))
    q = int(rng.integers(1, min(n, 8) + 1))
    channels = int(rng.integers(1, 9))
    queries = FeatureMatrix(data=rng.standard_normal((q, channels)))
    sp_features = FeatureMatrix(data=rng.standard_normal((n, channels)))
    text = FeatureMatrix(data=rng.standard_normal((int(rng.integers(1, 7)), channels)))
    tau = float(rng.normal())
    init = rng.choice(n, size=q, replace=False)
    fast = decode_predictions(queries, sp_features, text, tau, init)
    slow = oracle_decode(queries, sp_features, text, tau, init)
    case = {
        "queries": queries.data.tolist(),
        "sp_features": sp_features.data.tolist(),
        "text": text.data.tolist(),
        "tau": tau,
        "init": init.tolist(),
    }
    if not np.array_equal(fast.masks, slow.masks):
        return "masks differ", case
    if not np.array_equal(fast.classes, slow.classes):
        return "classes differ", case
    return None, case


def _knn_case(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    n = int(rng.integers(2, 201))
    k = int(rng.integers(1, min(16, n - 1) + 1))
    # Integer lattice coordinates force many exact distance ties.
    positions = rng.integers(0, 5, (n, 3)).astype(np.float64)
    if rng.random() < 0.5:
        positions += rng.normal(scale=0.01, size=positions.shape)
    points = PointCloud(positions=positions)
    fast = build_knn_index(points, k).neighbors
    slow = oracle_knn(points, k)
    case = {"positions": points.positions.tolist(), "k": k}
    if not np.array_equal(fast, slow):
        row = int(np.flatnonzero((fast != slow).any(axis=1))[0])
        return f"neighbours of point {row} differ", case
    return None, case


def _felz_trial(rng: np.random.Generator) -> tuple[str | None, dict[str, Any]]:
    case = _felz_case(rng)
    return _felz_mismatch(case), case


_Trial = Callable[[np.random.Generator], tuple[str | None, dict[str, Any]]]

_TRIALS: dict[str, _Trial] = {
    "felz": _felz_trial,
    "pool": _pool_case,
    "bilinear": _bilinear_case,
    "vip": _vip_case,
    "decode": _decode_case,
    "knn": _knn_case,
}


def run_oracle_trials(
    kind: str, trials: int = 50, seed: int = 0, dump_dir: Path | None = None
) -> OracleReport:
    """Compare an optimized operation against its reference on random inputs.

    Trial ``t`` draws its instance from ``default_rng([seed, t])``, so any
    single failing trial can be replayed on its own.

    Args:
        kind: One of ``ORACLE_KINDS``.
        trials: Number of random instances.
        seed: Base seed.
        dump_dir: Where to write ``<kind>-trial<t>.json`` reproductions.

    Returns:
        The report; ``report.passed`` is False on any mismatch.

    Raises:
        ValidationError: If ``kind`` is unknown or ``trials < 1``.
    """
    if kind not in _TRIALS:
        raise ValidationError(
            f"unknown oracle {kind!r}; expected one of {ORACLE_KINDS}"
        )
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    report = OracleReport(kind=kind, trials=trials, seed=seed)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        message, case = _TRIALS[kind](rng)
        if message is None:
            continue
        if kind == "felz":
            case = minimize_felz_case(case)
        report.failures.append(OracleFailure(trial=t, message=message, case=case))
        logger.error("%s oracle mismatch in trial %d: %s", kind, t, message)
        if dump_dir is not None:
            path = dump_dir / f"{kind}-trial{t}.json"
            dump = {"kind": kind, "seed": seed, "trial": t, "message": message}
            write_json(path, {**dump, "case": case})
            report.dumped.append(path)
    logger.info(
        "%s oracle: %d/%d trials agree", kind, trials - len(report.failures), trials
    )
    return report
