"""Tests for superpoint module."""

from __future__ import annotations

import numpy as np
import pytest

from ovseg3r_prep.config import BackgroundPolicy, CrossViewPolicy, SegmentConfig
from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.geometry import build_knn_index, estimate_normals
from ovseg3r_prep.model import (
    CorrespondenceTable,
    EdgeList,
    InstanceRaster,
    NormalField,
    PointCloud,
)
from ovseg3r_prep.oracles import oracle_felzenszwalb, random_edge_list
from ovseg3r_prep.superpoint import (
    DisjointForest,
    build_boundary_aware_graph,
    build_knn_graph,
    compute_edge_weights,
    felzenszwalb_segment,
    relabel_first_appearance,
    segment_pipeline,
    sorted_edge_order,
    superpoint_purity,
)
from ovseg3r_prep.synth import SceneBundle


@pytest.fixture
def chain() -> tuple[PointCloud, EdgeList]:
    """Four points joined by (0,1,0.01), (1,2,0.01), (2,3,1.5)."""
    points = PointCloud(positions=np.zeros((4, 3)))
    edges = EdgeList(i=[0, 1, 2], j=[1, 2, 3], w=[0.01, 0.01, 1.5])
    return points, edges


def _pair_scene(
    ids: tuple[int, int], normals: list[list[float]], views: tuple[int, int] = (0, 0)
) -> tuple[PointCloud, NormalField, CorrespondenceTable, InstanceRaster]:
    points = PointCloud(positions=[[0, 0, 0], [0.01, 0, 0]])
    corr = CorrespondenceTable(
        views=list(views), xy=[[0.0, 0.0], [1.0, 0.0]], view_dims=[[1, 2], [1, 2]]
    )
    raster = InstanceRaster(labels=[[[ids[0], ids[1]]], [[ids[0], ids[1]]]])
    return points, NormalField(normals=normals), corr, raster


class TestDisjointForest:
    """Test cases for DisjointForest."""

    def test_fresh_forest(self) -> None:
        """Test every element starts as its own root with threshold sp_thresh."""
        forest = DisjointForest(3, sp_thresh=0.2)
        assert len(forest) == 3
        assert [forest.find(x) for x in range(3)] == [0, 1, 2]
        np.testing.assert_array_equal(forest.threshold, [0.2, 0.2, 0.2])

    def test_union_tracks_size(self) -> None:
        """Test size at the root equals the component cardinality."""
        forest = DisjointForest(4, sp_thresh=0.1)
        forest.union(0, 1)
        root = forest.union(2, 1)
        assert forest.component_size(2) == 3
        assert forest.find(0) == forest.find(2) == root
        assert forest.component_size(3) == 1

    def test_union_of_same_component_is_noop(self) -> None:
        """Test merging an element with itself leaves sizes alone."""
        forest = DisjointForest(2, sp_thresh=0.1)
        forest.union(0, 1)
        forest.union(1, 0)
        assert forest.component_size(0) == 2

    def test_empty_forest_rejected(self) -> None:
        """Test a forest needs at least one element."""
        with pytest.raises(ValidationError):
            DisjointForest(0, sp_thresh=0.1)


class TestRelabelFirstAppearance:
    """Test cases for relabel_first_appearance."""

    def test_order_of_first_appearance(self) -> None:
        """Test roots [7, 7, 2, 9, 2] become [0, 0, 1, 2, 1]."""
        labels, count = relabel_first_appearance(np.array([7, 7, 2, 9, 2]))
        np.testing.assert_array_equal(labels, [0, 0, 1, 2, 1])
        assert count == 3


class TestSortedEdgeOrder:
    """Test cases for sorted_edge_order."""

    def test_weight_then_endpoints(self) -> None:
        """Test equal weights are ordered by (i, j)."""
        edges = EdgeList(i=[2, 0, 0, 1], j=[3, 2, 1, 2], w=[0.5, 0.5, 0.5, 0.1])
        np.testing.assert_array_equal(sorted_edge_order(edges), [3, 2, 1, 0])


class TestComputeEdgeWeights:
    """Test cases for compute_edge_weights."""

    def test_parallel_perpendicular_opposite(self) -> None:
        """Test weights 0, 1 and 2 for parallel, perpendicular and opposite normals."""
        normals = NormalField(normals=[[0, 0, 1], [0, 0, 1], [1, 0, 0], [0, 0, -1]])
        w = compute_edge_weights(np.array([0, 0, 0]), np.array([1, 2, 3]), normals)
        np.testing.assert_allclose(w, [0.0, 1.0, 2.0])
        assert w.dtype == np.float32


class TestBuildBoundaryAwareGraph:
    """Test cases for build_boundary_aware_graph."""

    def _graph(self, scene, cfg: SegmentConfig | None = None) -> EdgeList:
        points, normals, corr, raster = scene
        index = build_knn_index(points, k=1)
        return build_boundary_aware_graph(
            points, normals, index, corr, raster, cfg or SegmentConfig()
        )

    def test_same_instance_coplanar(self) -> None:
        """Test same id and identical normals give one edge of weight 0."""
        edges = self._graph(_pair_scene((0, 0), [[0, 0, 1], [0, 0, 1]]))
        assert edges.edge_count == 1
        assert (edges.i[0], edges.j[0], edges.w[0]) == (0, 1, 0.0)

    def test_different_instances_disconnect(self) -> None:
        """Test ids 3 and 7 drop the edge."""
        edges = self._graph(_pair_scene((3, 7), [[0, 0, 1], [0, 0, 1]]))
        assert edges.edge_count == 0

    def test_perpendicular_normals(self) -> None:
        """Test normals at 90° give weight 1."""
        edges = self._graph(_pair_scene((0, 0), [[0, 0, 1], [1, 0, 0]]))
        np.testing.assert_allclose(edges.w, [1.0])

    def test_cross_view_prune_and_keep(self) -> None:
        """Test endpoints in different views connect only under keep."""
        scene = _pair_scene((0, 0), [[0, 0, 1], [0, 0, 1]], views=(0, 1))
        assert self._graph(scene).edge_count == 0
        keep = SegmentConfig(cross_view_policy=CrossViewPolicy.KEEP)
        assert self._graph(scene, keep).edge_count == 1

    def test_background_label_and_prune(self) -> None:
        """Test two background points connect under label but not under prune."""
        scene = _pair_scene((-1, -1), [[0, 0, 1], [0, 0, 1]])
        assert self._graph(scene).edge_count == 1
        prune = SegmentConfig(background_policy=BackgroundPolicy.PRUNE)
        assert self._graph(scene, prune).edge_count == 0

    def test_edges_deduplicated_and_sorted(self, grid_scene) -> None:
        """Test mutual neighbours yield one edge and records are sorted by (i, j)."""
        points, corr, raster = grid_scene
        index = build_knn_index(points, k=4)
        normals = estimate_normals(points, index)
        edges = build_boundary_aware_graph(
            points, normals, index, corr, raster, SegmentConfig()
        )
        keys = edges.i * points.point_count + edges.j
        assert np.all(np.diff(keys) > 0)

    def test_grid_has_no_edge_across_instance_boundary(self, grid_scene) -> None:
        """Test no surviving edge joins column 4 to column 5."""
        points, corr, raster = grid_scene
        index = build_knn_index(points, k=8)
        normals = estimate_normals(points, index)
        edges = build_boundary_aware_graph(
            points, normals, index, corr, raster, SegmentConfig()
        )
        cols_i, cols_j = edges.i % 10, edges.j % 10
        assert not np.any((cols_i < 5) != (cols_j < 5))
        assert edges.edge_count < build_knn_graph(points, normals, index).edge_count

    def test_two_view_scene_prune_keeps_edges_in_view(
        self, flush_bundle: SceneBundle
    ) -> None:
        """Test every emitted edge has both endpoints in the same view."""
        index = build_knn_index(flush_bundle.points, k=16)
        normals = estimate_normals(
            flush_bundle.points, index, flush_bundle.point_origins()
        )
        edges = build_boundary_aware_graph(
            flush_bundle.points,
            normals,
            index,
            flush_bundle.corr,
            flush_bundle.raster,
            SegmentConfig(),
        )
        views = flush_bundle.corr.views
        assert edges.edge_count > 0
        assert np.all(views[edges.i] == views[edges.j])

    def test_point_count_mismatch(self, grid_scene) -> None:
        """Test normals for another cloud are rejected."""
        points, corr, raster = grid_scene
        index = build_knn_index(points, k=4)
        normals = NormalField(normals=np.tile([0, 0, 1], (5, 1)))
        with pytest.raises(ValidationError, match="normals for"):
            build_boundary_aware_graph(
                points, normals, index, corr, raster, SegmentConfig()
            )


class TestFelzenszwalbSegment:
    """Test cases for felzenszwalb_segment."""

    def test_chain_without_force_merge(self, chain) -> None:
        """Test the 1.5 edge is blocked, leaving {0,1,2} and {3}."""
        points, edges = chain
        sp = felzenszwalb_segment(points, edges, SegmentConfig(sp_thresh=0.1, sp_min=1))
        np.testing.assert_array_equal(sp.point_labels, [0, 0, 0, 1])
        assert sp.superpoint_count == 2

    def test_chain_with_force_merge(self, chain) -> None:
        """Test sp_min = 2 force-merges {3} through edge (2, 3)."""
        points, edges = chain
        sp = felzenszwalb_segment(points, edges, SegmentConfig(sp_thresh=0.1, sp_min=2))
        np.testing.assert_array_equal(sp.point_labels, [0, 0, 0, 0])
        assert sp.superpoint_count == 1

    def test_adaptive_threshold_blocks_later_merge(self) -> None:
        """Test a merged component's tighter threshold rejects a 0.07 edge."""
        points = PointCloud(positions=np.zeros((3, 3)))
        # After {0,1} merges the threshold is 0.0 + 0.1/2 = 0.05 < 0.07.
        edges = EdgeList(i=[0, 1], j=[1, 2], w=[0.0, 0.07])
        sp = felzenszwalb_segment(points, edges, SegmentConfig(sp_thresh=0.1, sp_min=1))
        np.testing.assert_array_equal(sp.point_labels, [0, 0, 1])

    def test_zero_edges_give_singletons(self) -> None:
        """Test five isolated points become superpoints 0..4 in order."""
        points = PointCloud(positions=np.zeros((5, 3)))
        sp = felzenszwalb_segment(
            points, EdgeList(i=[], j=[], w=[]), SegmentConfig(sp_min=25)
        )
        np.testing.assert_array_equal(sp.point_labels, [0, 1, 2, 3, 4])

    def test_endpoint_out_of_range(self) -> None:
        """Test edges referencing missing points are rejected."""
        points = PointCloud(positions=np.zeros((2, 3)))
        edges = EdgeList(i=[0], j=[5], w=[0.0])
        with pytest.raises(ValidationError, match="out of range"):
            felzenszwalb_segment(points, edges, SegmentConfig())

    def test_matches_reference_on_random_graphs(self) -> None:
        """Test random tied graphs partition exactly like the reference."""
        for seed in range(30):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 120))
            edges = random_edge_list(rng, n, 600)
            cfg = SegmentConfig(
                sp_thresh=float(rng.choice([0.05, 0.1, 0.5])),
                sp_min=int(rng.choice([1, 3, 10])),
            )
            points = PointCloud(positions=np.zeros((n, 3)))
            fast = felzenszwalb_segment(points, edges, cfg)
            slow = oracle_felzenszwalb(points, edges, cfg)
            np.testing.assert_array_equal(fast.point_labels, slow.point_labels)

    def test_raising_threshold_never_adds_superpoints(self) -> None:
        """Test a larger sp_thresh gives no more superpoints without force merging."""
        for seed in range(10):
            rng = np.random.default_rng(seed)
            points = PointCloud(positions=np.zeros((80, 3)))
            edges = random_edge_list(rng, 80, 400)
            counts = [
                felzenszwalb_segment(
                    points, edges, SegmentConfig(sp_thresh=t, sp_min=1)
                ).superpoint_count
                for t in (0.05, 0.1, 0.5)
            ]
            assert counts == sorted(counts, reverse=True)

    def test_deterministic(self, chain) -> None:
        """Test repeated runs give identical labels."""
        points, edges = chain
        cfg = SegmentConfig(sp_thresh=0.1, sp_min=1)
        first = felzenszwalb_segment(points, edges, cfg)
        second = felzenszwalb_segment(points, edges, cfg)
        np.testing.assert_array_equal(first.point_labels, second.point_labels)


class TestSegmentPipeline:
    """Test cases for segment_pipeline and superpoint_purity."""

    def test_grid_split_at_instance_boundary(self, grid_scene) -> None:
        """Test the flat grid splits into exactly the two instance halves."""
        points, corr, raster = grid_scene
        sp = segment_pipeline(
            points, corr, raster, SegmentConfig(sp_thresh=0.1, sp_min=5), k=8
        )
        labels = sp.point_labels.reshape(10, 10)
        assert sp.superpoint_count == 2
        assert np.all(labels[:, :5] == labels[0, 0])
        assert np.all(labels[:, 5:] == labels[0, 5])
        assert superpoint_purity(sp, corr, raster).size == 0

    def test_flush_object_needs_boundary_pruning(
        self, flush_bundle: SceneBundle
    ) -> None:
        """Test pruning keeps wall and painting apart; geometry alone mixes them."""
        bundle = flush_bundle
        cfg = SegmentConfig()
        origins = bundle.point_origins()
        aware = segment_pipeline(
            bundle.points, bundle.corr, bundle.raster, cfg, view_origins=origins
        )
        assert superpoint_purity(aware, bundle.corr, bundle.raster).size == 0

        index = build_knn_index(bundle.points, 16)
        normals = estimate_normals(bundle.points, index, origins)
        plain = felzenszwalb_segment(
            bundle.points, build_knn_graph(bundle.points, normals, index), cfg
        )
        assert superpoint_purity(plain, bundle.corr, bundle.raster).size > 0

    def test_empty_raster_matches_geometry_only(self, grid_scene) -> None:
        """Test an all-background raster under label behaves like no raster."""
        points, corr, _ = grid_scene
        background = InstanceRaster(labels=np.full((1, 10, 10), -1))
        cfg = SegmentConfig(sp_thresh=0.1, sp_min=5)
        aware = segment_pipeline(points, corr, background, cfg, k=8)
        index = build_knn_index(points, 8)
        normals = estimate_normals(points, index)
        plain = felzenszwalb_segment(
            points, build_knn_graph(points, normals, index), cfg
        )
        np.testing.assert_array_equal(aware.point_labels, plain.point_labels)

    def test_output_is_a_valid_partition(self, flush_bundle: SceneBundle) -> None:
        """Test every point gets one label and all labels are used."""
        sp = segment_pipeline(
            flush_bundle.points, flush_bundle.corr, flush_bundle.raster
        )
        assert sp.point_count == flush_bundle.points.point_count
        assert np.all(sp.sizes() > 0)
