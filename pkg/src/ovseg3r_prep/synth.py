"""Synthetic multi-view scenes with known instance labels.

A scene is a set of planar charts (floor, walls, box faces...). Each chart
carries a displacement field along its normal, built from rectangular
relief patches and Gaussian bumps, and an instance labelling over its
(u, v) parameter domain. Views are orthographic strips of one chart: pixel
(row, col) of a view maps to one (u, v) location, so every point sits at a
pixel centre of the view it was reconstructed from.

Over-smoothing is simulated by blurring the displacement field with a
Gaussian of ``smoothing_sigma`` meters before sampling it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from ovseg3r_prep import codecs
from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.geometry import (
    DEFAULT_K,
    build_knn_index,
    estimate_normals,
    view_origins_for_points,
)
from ovseg3r_prep.io_utils import ensure_dir, write_json
from ovseg3r_prep.model import (
    CorrespondenceTable,
    FeatureMatrix,
    ImageFeatureStack,
    InstanceRaster,
    PointCloud,
    SuperpointMask,
)
from ovseg3r_prep.superpoint import build_knn_graph

logger = logging.getLogger(__name__)

# Grid spacing (m) of the displacement field when it has to be blurred.
DISPLACEMENT_GRID_STEP = 0.005
VIEW_DISTANCE = 2.0
FLUSH_RELIEF = 0.008


class SceneKind(str, Enum):
    FLUSH_OBJECT = "flush_object"
    BOX_ROOM = "box_room"
    TWO_VIEW_SEAM = "two_view_seam"
    RANDOM_BLOBS = "random_blobs"

    @classmethod
    def parse(cls, value: str | SceneKind) -> SceneKind:
        """Accept ``flush-object`` as well as ``flush_object``."""
        if isinstance(value, SceneKind):
            return value
        try:
            return cls(value.strip().lower().replace("-", "_"))
        except ValueError as e:
            choices = ", ".join(kind.value for kind in cls)
            raise ValidationError(
                f"unknown scene kind {value!r}; expected one of {choices}"
            ) from e


@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of one synthetic scene.

    Attributes:
        scene_kind: Which scene layout to build.
        point_count: Number of points N.
        view_count: Number of views V.
        raster_dims: (H, W) of every view.
        smoothing_sigma: Blur of the displacement field in meters.
        seed: Seed for every random choice.
        feature_channels: When > 0, also emit per-view image features and
            one text feature row per instance.
    """

    scene_kind: SceneKind
    point_count: int
    view_count: int
    raster_dims: tuple[int, int] = (256, 256)
    smoothing_sigma: float = 0.0
    seed: int = 0
    feature_channels: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scene_kind", SceneKind.parse(self.scene_kind))
        h, w = (int(d) for d in self.raster_dims)
        object.__setattr__(self, "raster_dims", (h, w))
        if self.point_count < 1:
            raise ValidationError("point_count must be >= 1")
        if self.view_count < 1:
            raise ValidationError("view_count must be >= 1")
        if h < 2 or w < 2:
            raise ValidationError(f"raster_dims must be at least 2×2, got {(h, w)}")
        if not np.isfinite(self.smoothing_sigma) or self.smoothing_sigma < 0:
            raise ValidationError("smoothing_sigma must be finite and >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if self.feature_channels < 0:
            raise ValidationError("feature_channels must be >= 0")

    def to_dict(self) -> dict[str, object]:
        return {
            "scene_kind": self.scene_kind.value,
            "point_count": self.point_count,
            "view_count": self.view_count,
            "raster_dims": list(self.raster_dims),
            "smoothing_sigma": self.smoothing_sigma,
            "seed": self.seed,
            "feature_channels": self.feature_channels,
        }


@dataclass(frozen=True)
class ReliefPatch:
    instance: int
    u_range: tuple[float, float]
    v_range: tuple[float, float]
    relief: float


@dataclass(frozen=True)
class Bump:
    instance: int
    center: tuple[float, float]
    height: float
    width: float


@dataclass(frozen=True)
class Chart:
    """A planar rectangle ``origin + u·u_axis + v·v_axis``, 0 <= u,v <= extent."""

    name: str
    origin: tuple[float, float, float]
    u_axis: tuple[float, float, float]
    v_axis: tuple[float, float, float]
    extent: tuple[float, float]
    instance: int
    patches: tuple[ReliefPatch, ...] = ()
    bumps: tuple[Bump, ...] = ()

    @property
    def normal(self) -> np.ndarray:
        return np.cross(np.asarray(self.u_axis), np.asarray(self.v_axis))

    def instances_at(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        ids = np.full(u.shape, self.instance, dtype=np.int64)
        for patch in self.patches:
            inside = (
                (u >= patch.u_range[0])
                & (u <= patch.u_range[1])
                & (v >= patch.v_range[0])
                & (v <= patch.v_range[1])
            )
            ids[inside] = patch.instance
        for bump in self.bumps:
            r2 = (u - bump.center[0]) ** 2 + (v - bump.center[1]) ** 2
            ids[r2 <= (2.0 * bump.width) ** 2] = bump.instance
        return ids

    def displacement_at(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        d = np.zeros(u.shape, dtype=np.float64)
        for patch in self.patches:
            inside = (
                (u >= patch.u_range[0])
                & (u <= patch.u_range[1])
                & (v >= patch.v_range[0])
                & (v <= patch.v_range[1])
            )
            d[inside] += patch.relief
        for bump in self.bumps:
            r2 = (u - bump.center[0]) ** 2 + (v - bump.center[1]) ** 2
            d += bump.height * np.exp(-0.5 * r2 / bump.width**2)
        return d

    def smoothed_displacement_at(
        self, u: np.ndarray, v: np.ndarray, sigma: float
    ) -> np.ndarray:
        """Displacement after a Gaussian blur of ``sigma`` meters."""
        if sigma <= 0.0:
            return self.displacement_at(u, v)
        step = DISPLACEMENT_GRID_STEP
        gu = np.arange(int(np.floor(self.extent[0] / step)) + 1) * step
        gv = np.arange(int(np.floor(self.extent[1] / step)) + 1) * step
        uu, vv = np.meshgrid(gu, gv, indexing="ij")
        grid = gaussian_filter(
            self.displacement_at(uu, vv), sigma / step, mode="nearest"
        )
        return map_coordinates(grid, [u / step, v / step], order=1, mode="nearest")

    def embed(self, u: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
        origin = np.asarray(self.origin, dtype=np.float64)
        return (
            origin
            + u[:, None] * np.asarray(self.u_axis, dtype=np.float64)
            + v[:, None] * np.asarray(self.v_axis, dtype=np.float64)
            + d[:, None] * self.normal
        )


@dataclass(frozen=True)
class ViewStrip:
    """View ``index`` images ``u_range`` × [0, extent_v] of chart ``chart``."""

    index: int
    chart: int
    u_range: tuple[float, float]


@dataclass(frozen=True)
class SceneBundle:
    """Everything ``generate`` produces for one recipe.

    Attributes:
        gt_labels: Global instance id of every point (0..G-1, all used).
        view_origins: V×3 camera positions, used to orient normals.
        local_to_global: Per view, the global instance id of each local
            raster id.
    """

    recipe: SceneRecipe
    points: PointCloud
    corr: CorrespondenceTable
    raster: InstanceRaster
    gt_labels: np.ndarray
    view_origins: FeatureMatrix
    local_to_global: tuple[np.ndarray, ...]
    instance_names: tuple[str, ...]
    features: ImageFeatureStack | None = None
    text: FeatureMatrix | None = field(default=None)

    @property
    def instance_count(self) -> int:
        return len(self.instance_names)

    def ground_truth_superpoints(self) -> SuperpointMask:
        """The ground-truth instance labelling as a superpoint partition."""
        return SuperpointMask(
            point_labels=self.gt_labels, superpoint_count=self.instance_count
        )

    def point_origins(self) -> np.ndarray:
        return view_origins_for_points(self.corr, self.view_origins)


# --- scene layouts -----------------------------------------------------------


def _flush_object_charts(rng: np.random.Generator) -> tuple[list[Chart], list[str]]:
    painting = ReliefPatch(
        instance=1, u_range=(0.7, 1.3), v_range=(0.6, 1.4), relief=FLUSH_RELIEF
    )
    wall = Chart(
        "wall",
        (0.0, 0.0, 0.0),
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (2.0, 2.0),
        0,
        patches=(painting,),
    )
    return [wall], ["wall", "painting"]


def _box_room_charts(rng: np.random.Generator) -> tuple[list[Chart], list[str]]:
    rug = ReliefPatch(4, (1.0, 2.4), (0.8, 1.8), 0.005)
    # wall_a is parameterised by (height, x), so the door spans u = height.
    door = ReliefPatch(5, (0.0, 2.0), (0.4, 1.3), 0.01)
    # Wall normals point into the room.
    charts = [
        Chart("floor", (0.0, 0.0, 0.0), (1, 0, 0), (0, 1, 0), (4.0, 3.0), 0, (rug,)),
        Chart("wall_a", (0.0, 0.0, 0.0), (0, 0, 1), (1, 0, 0), (2.5, 4.0), 1, (door,)),
        Chart("wall_b", (0.0, 0.0, 0.0), (0, 1, 0), (0, 0, 1), (3.0, 2.5), 2),
        Chart("box_top", (2.8, 1.8, 0.5), (1, 0, 0), (0, 1, 0), (0.8, 0.6), 3),
    ]
    return charts, ["floor", "wall_a", "wall_b", "box", "rug", "door"]


def _two_view_seam_charts(rng: np.random.Generator) -> tuple[list[Chart], list[str]]:
    plane = Chart("plane", (0.0, 0.0, 0.0), (1, 0, 0), (0, 1, 0), (2.0, 1.0), 0)
    return [plane], ["plane"]


def _random_blobs_charts(rng: np.random.Generator) -> tuple[list[Chart], list[str]]:
    bumps = []
    for cell, (cu, cv) in enumerate([(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]):
        jitter = rng.uniform(-0.1, 0.1, size=2)
        bumps.append(
            Bump(
                instance=cell + 1,
                center=(cu + float(jitter[0]), cv + float(jitter[1])),
                height=float(rng.uniform(0.05, 0.15)),
                width=float(rng.uniform(0.06, 0.1)),
            )
        )
    ground = Chart(
        "ground",
        (0.0, 0.0, 0.0),
        (1, 0, 0),
        (0, 1, 0),
        (2.0, 2.0),
        0,
        bumps=tuple(bumps),
    )
    return [ground], ["ground"] + [f"blob_{b}" for b in range(len(bumps))]


_LAYOUTS = {
    SceneKind.FLUSH_OBJECT: (_flush_object_charts, 1),
    SceneKind.BOX_ROOM: (_box_room_charts, 4),
    SceneKind.TWO_VIEW_SEAM: (_two_view_seam_charts, 2),
    SceneKind.RANDOM_BLOBS: (_random_blobs_charts, 1),
}


def _assign_views(charts: list[Chart], view_count: int) -> list[ViewStrip]:
    per_chart: list[list[int]] = [[] for _ in charts]
    for v in range(view_count):
        per_chart[v % len(charts)].append(v)
    strips: list[ViewStrip] = []
    for c, views in enumerate(per_chart):
        width = charts[c].extent[0] / len(views)
        for s, v in enumerate(views):
            strips.append(ViewStrip(v, c, (s * width, (s + 1) * width)))
    return sorted(strips, key=lambda strip: strip.index)


def _pixel_uv(
    strip: ViewStrip, chart: Chart, rows: np.ndarray, cols: np.ndarray, h: int, w: int
) -> tuple[np.ndarray, np.ndarray]:
    u0, u1 = strip.u_range
    u = u0 + (cols + 0.5) / w * (u1 - u0)
    v = (rows + 0.5) / h * chart.extent[1]
    return u, v


def generate(recipe: SceneRecipe) -> SceneBundle:
    """Build the scene described by ``recipe``.

    Output is a pure function of the recipe.

    Raises:
        ValidationError: If the recipe has too few views for its layout, more
            points than pixels, or too few points to cover every view and
            every instance.
    """
    layout, min_views = _LAYOUTS[recipe.scene_kind]
    rng = np.random.default_rng(recipe.seed)
    charts, names = layout(rng)
    if recipe.view_count < min_views:
        raise ValidationError(
            f"{recipe.scene_kind.value} needs at least {min_views} views, "
            f"got {recipe.view_count}"
        )
    h, w = recipe.raster_dims
    pixels = recipe.view_count * h * w
    if recipe.point_count > pixels:
        raise ValidationError(
            f"point_count {recipe.point_count} exceeds the {pixels} available pixels"
        )
    strips = _assign_views(charts, recipe.view_count)

    # Full per-view instance rasters in global ids.
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    global_rasters = np.empty((recipe.view_count, h, w), dtype=np.int64)
    origins = np.empty((recipe.view_count, 3), dtype=np.float64)
    for strip in strips:
        chart = charts[strip.chart]
        u, v = _pixel_uv(strip, chart, rows, cols, h, w)
        global_rasters[strip.index] = chart.instances_at(u, v)
        centre_u = np.array([0.5 * (strip.u_range[0] + strip.u_range[1])])
        centre_v = np.array([0.5 * chart.extent[1]])
        origins[strip.index] = chart.embed(centre_u, centre_v, np.zeros(1))[0] + (
            VIEW_DISTANCE * chart.normal
        )

    chosen = rng.choice(pixels, size=recipe.point_count, replace=False)
    views, flat = np.divmod(chosen, h * w)
    prow, pcol = np.divmod(flat, w)

    positions = np.empty((recipe.point_count, 3), dtype=np.float64)
    for strip in strips:
        sel = np.flatnonzero(views == strip.index)
        if sel.size == 0:
            continue
        chart = charts[strip.chart]
        u, v = _pixel_uv(strip, chart, prow[sel], pcol[sel], h, w)
        d = chart.smoothed_displacement_at(u, v, recipe.smoothing_sigma)
        positions[sel] = chart.embed(u, v, d)

    gt = global_rasters[views, prow, pcol]
    empty_views = np.setdiff1d(np.arange(recipe.view_count), views)
    missing = np.setdiff1d(np.arange(len(names)), gt)
    if empty_views.size or missing.size:
        raise ValidationError(
            f"N too small: {recipe.point_count} points leave views "
            f"{empty_views.tolist()} empty and instances {missing.tolist()} uncovered"
        )

    local_to_global = []
    local = np.empty_like(global_rasters, dtype=np.int32)
    for v in range(recipe.view_count):
        ids = np.unique(global_rasters[v])
        local[v] = np.searchsorted(ids, global_rasters[v])
        local_to_global.append(ids)

    xy = np.stack([pcol / (w - 1), prow / (h - 1)], axis=1)
    corr = CorrespondenceTable(
        views=views,
        xy=xy,
        view_dims=np.tile([h, w], (recipe.view_count, 1)),
    )
    features = text = None
    if recipe.feature_channels:
        features, text = _synthetic_features(
            rng, global_rasters, len(names), recipe.feature_channels
        )

    bundle = SceneBundle(
        recipe=recipe,
        points=PointCloud(positions=positions),
        corr=corr,
        raster=InstanceRaster(labels=local),
        gt_labels=gt.astype(np.int64),
        view_origins=FeatureMatrix(data=origins),
        local_to_global=tuple(local_to_global),
        instance_names=tuple(names),
        features=features,
        text=text,
    )
    logger.debug(
        "generated %s: N=%d V=%d instances=%d sigma=%.4f",
        recipe.scene_kind.value,
        recipe.point_count,
        recipe.view_count,
        len(names),
        recipe.smoothing_sigma,
    )
    return bundle


def _synthetic_features(
    rng: np.random.Generator, global_rasters: np.ndarray, instances: int, channels: int
) -> tuple[ImageFeatureStack, FeatureMatrix]:
    """Per-instance unit embeddings plus noise at quarter raster resolution.

    The text rows are the clean embeddings, so the class of a query decoded
    from a pure superpoint is the superpoint's instance.
    """
    embeddings = rng.standard_normal((instances, channels))
    embeddings /= np.linalg.norm(embeddings, axis=1, keepdims=True)
    v, h, w = global_rasters.shape
    fh, fw = max(2, h // 4), max(2, w // 4)
    rr = np.floor(np.arange(fh) / (fh - 1) * (h - 1) + 0.5).astype(np.int64)
    cc = np.floor(np.arange(fw) / (fw - 1) * (w - 1) + 0.5).astype(np.int64)
    ids = global_rasters[:, rr[:, None], cc[None, :]]
    maps = embeddings[ids] + 0.05 * rng.standard_normal((v, fh, fw, channels))
    return ImageFeatureStack(data=maps), FeatureMatrix(data=embeddings)


def write_bundle(bundle: SceneBundle, out_dir: Path) -> dict[str, Path]:
    """Write a bundle's artifacts into ``out_dir``.

    Returns:
        Artifact role to written path.
    """
    ensure_dir(out_dir)
    outputs: dict[str, tuple[Path, object]] = {
        "points": (out_dir / "points.ply", bundle.points),
        "corr": (out_dir / "corr.ov3c", bundle.corr),
        "masks": (out_dir / "masks.ov2m", bundle.raster),
        "gt": (out_dir / "gt.ovsp", bundle.ground_truth_superpoints()),
        "origins": (out_dir / "origins.ovfm", bundle.view_origins),
    }
    if bundle.features is not None and bundle.text is not None:
        outputs["features"] = (out_dir / "features.ovif", bundle.features)
        outputs["text"] = (out_dir / "text.ovfm", bundle.text)
    written: dict[str, Path] = {}
    for role, (path, value) in outputs.items():
        codecs.save(path, value)
        written[role] = path
    recipe_path = out_dir / "recipe.json"
    write_json(
        recipe_path,
        {**bundle.recipe.to_dict(), "instance_names": list(bundle.instance_names)},
    )
    written["recipe"] = recipe_path
    return written


def normal_weight_gap(bundle: SceneBundle, k: int = DEFAULT_K) -> float:
    """Mean k-NN weight across instances minus mean weight within instances.

    The larger the gap, the easier instances are to separate from geometry
    alone.

    Raises:
        ValidationError: If the scene has no inter-instance or no
            intra-instance k-NN edge.
    """
    index = build_knn_index(bundle.points, k)
    normals = estimate_normals(bundle.points, index, bundle.point_origins())
    edges = build_knn_graph(bundle.points, normals, index)
    inter = bundle.gt_labels[edges.i] != bundle.gt_labels[edges.j]
    if not inter.any() or inter.all():
        raise ValidationError("scene needs both inter- and intra-instance edges")
    w = edges.w.astype(np.float64)
    return float(w[inter].mean() - w[~inter].mean())
