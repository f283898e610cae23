"""Tests for model module."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from ovseg3r_prep.errors import ValidationError
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
    ViewAnnotation,
    contiguous_labels,
)


class TestPointCloud:
    """Test cases for PointCloud."""

    def test_converts_to_float32(self) -> None:
        """Test positions are stored as float32."""
        cloud = PointCloud(positions=[[0, 1, 2]])
        assert cloud.positions.dtype == np.float32
        assert cloud.point_count == 1

    def test_is_read_only(self) -> None:
        """Test positions cannot be modified after construction."""
        cloud = PointCloud(positions=[[0, 1, 2]])
        with pytest.raises(ValueError):
            cloud.positions[0, 0] = 5.0

    def test_copies_input(self) -> None:
        """Test the caller's array stays writable and independent."""
        source = np.zeros((2, 3))
        cloud = PointCloud(positions=source)
        source[0, 0] = 9.0
        assert cloud.positions[0, 0] == 0.0

    def test_empty_raises(self) -> None:
        """Test an empty cloud is rejected."""
        with pytest.raises(ValidationError, match="at least one point"):
            PointCloud(positions=np.zeros((0, 3)))

    def test_wrong_shape_raises(self) -> None:
        """Test a non N×3 array is rejected."""
        with pytest.raises(ValidationError, match="shape"):
            PointCloud(positions=np.zeros((4, 2)))

    def test_non_finite_raises(self) -> None:
        """Test NaN coordinates are rejected."""
        with pytest.raises(ValidationError, match="non-finite"):
            PointCloud(positions=[[0, 0, np.nan]])


class TestCorrespondenceTable:
    """Test cases for CorrespondenceTable."""

    def test_direct_construction(self) -> None:
        """Test the two-record example keeps its entries."""
        corr = CorrespondenceTable(
            views=[0, 0], xy=[[0.5, 0.5], [0.25, 0.75]], view_dims=[[4, 4]]
        )
        assert corr.point_count == 2
        assert corr.view_count == 1
        np.testing.assert_array_equal(corr.xy, [[0.5, 0.5], [0.25, 0.75]])

    def test_points_in_view_is_inverse_map(self) -> None:
        """Test grouping by view recovers ascending point indices."""
        corr = CorrespondenceTable(
            views=[1, 0, 1, 2], xy=np.zeros((4, 2)), view_dims=[[2, 2]] * 3
        )
        np.testing.assert_array_equal(corr.points_in_view(1), [0, 2])
        np.testing.assert_array_equal(corr.points_in_view(0), [1])

    def test_points_in_unknown_view_raises(self) -> None:
        """Test asking for a view outside [0, V) fails."""
        corr = CorrespondenceTable(views=[0], xy=[[0, 0]], view_dims=[[2, 2]])
        with pytest.raises(ValidationError, match="out of range"):
            corr.points_in_view(1)

    def test_view_index_out_of_range_raises(self) -> None:
        """Test a record pointing past the last view is rejected."""
        with pytest.raises(ValidationError, match="view index out of range"):
            CorrespondenceTable(views=[0, 1], xy=np.zeros((2, 2)), view_dims=[[2, 2]])

    def test_coordinates_outside_unit_square_raise(self) -> None:
        """Test x or y outside [0, 1] is rejected."""
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            CorrespondenceTable(views=[0], xy=[[1.5, 0.0]], view_dims=[[2, 2]])

    def test_zero_sized_view_raises(self) -> None:
        """Test views need H, W >= 1."""
        with pytest.raises(ValidationError, match="H >= 1"):
            CorrespondenceTable(views=[0], xy=[[0, 0]], view_dims=[[0, 2]])

    def test_nearest_pixels_round_half_up(self) -> None:
        """Test nearest pixel lookup uses round-half-up on x·(W−1)."""
        corr = CorrespondenceTable(
            views=[0, 0, 0], xy=[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]], view_dims=[[3, 4]]
        )
        rows, cols = corr.nearest_pixels()
        # x·(W−1) = 1.5 rounds up to 2; y·(H−1) = 1.0 stays 1.
        np.testing.assert_array_equal(cols, [0, 2, 3])
        np.testing.assert_array_equal(rows, [0, 1, 2])


class TestInstanceRaster:
    """Test cases for InstanceRaster."""

    def test_contiguous_ids_are_kept(self) -> None:
        """Test a raster with ids 0..k-1 is stored unchanged."""
        raster = InstanceRaster(labels=[[[0, 1], [-1, 1]]])
        assert raster.relabeled is False
        np.testing.assert_array_equal(raster.labels, [[[0, 1], [-1, 1]]])

    def test_non_contiguous_ids_are_relabeled_with_warning(
        self, caplog: pytest.LogCaptureFixture
    ) -> None:
        """Test ids {3, 7} become {0, 1} and the result is flagged."""
        with caplog.at_level(logging.WARNING):
            raster = InstanceRaster(labels=[[[3, 7], [-1, 7]]])
        assert raster.relabeled is True
        np.testing.assert_array_equal(raster.labels, [[[0, 1], [-1, 1]]])
        assert "not contiguous" in caplog.text

    def test_ids_below_minus_one_raise(self) -> None:
        """Test ids smaller than background are rejected."""
        with pytest.raises(ValidationError, match=">= -1"):
            InstanceRaster(labels=[[[-2]]])

    def test_check_against_dimension_mismatch(self) -> None:
        """Test raster and correspondence must agree on view dims."""
        raster = InstanceRaster(labels=np.zeros((1, 2, 2)))
        corr = CorrespondenceTable(views=[0], xy=[[0, 0]], view_dims=[[3, 2]])
        with pytest.raises(ValidationError, match="view 0"):
            raster.check_against(corr)

    def test_check_against_view_count_mismatch(self) -> None:
        """Test raster and correspondence must agree on V."""
        raster = InstanceRaster(labels=np.zeros((2, 2, 2)))
        corr = CorrespondenceTable(views=[0], xy=[[0, 0]], view_dims=[[2, 2]])
        with pytest.raises(ValidationError, match="2 views"):
            raster.check_against(corr)

    def test_ids_at_points(self) -> None:
        """Test lookup returns the id at each point's nearest pixel."""
        raster = InstanceRaster(labels=[[[0, 1], [-1, 1]]])
        corr = CorrespondenceTable(
            views=[0, 0, 0], xy=[[0, 0], [1, 0], [0, 1]], view_dims=[[2, 2]]
        )
        np.testing.assert_array_equal(raster.ids_at_points(corr), [0, 1, -1])


class TestSuperpointMask:
    """Test cases for SuperpointMask."""

    def test_valid_partition(self) -> None:
        """Test sizes and the boolean matrix of a valid partition."""
        sp = SuperpointMask(point_labels=[0, 1, 0, 2], superpoint_count=3)
        np.testing.assert_array_equal(sp.sizes(), [2, 1, 1])
        matrix = sp.as_boolean_matrix()
        assert matrix.shape == (3, 4)
        np.testing.assert_array_equal(matrix.sum(axis=0), [1, 1, 1, 1])

    def test_unused_label_raises(self) -> None:
        """Test [0, 0, 2, 1] with n = 2 is rejected as non-contiguous."""
        with pytest.raises(ValidationError, match="labels not contiguous"):
            SuperpointMask(point_labels=[0, 0, 2, 1], superpoint_count=2)

    def test_gap_in_labels_raises(self) -> None:
        """Test a label in [0, n) that no point uses is rejected."""
        with pytest.raises(ValidationError, match="labels not contiguous"):
            SuperpointMask(point_labels=[0, 2], superpoint_count=3)

    def test_contiguous_labels_helper(self) -> None:
        """Test the contiguity predicate on edge cases."""
        assert contiguous_labels(np.array([1, 0]), 2)
        assert not contiguous_labels(np.array([-1, 0]), 1)
        assert contiguous_labels(np.array([], dtype=np.int64), 0)


class TestScenePrediction:
    """Test cases for ScenePrediction."""

    def test_valid_prediction(self) -> None:
        """Test counts of a valid prediction."""
        pred = ScenePrediction(
            masks=[[1, 0, 1], [0, 1, 0]], classes=[2, 0], init_superpoints=[0, 1]
        )
        assert pred.query_count == 2
        assert pred.superpoint_count == 3
        assert pred.masks.dtype == bool

    def test_repeated_init_raises(self) -> None:
        """Test init superpoints must be pairwise distinct."""
        with pytest.raises(ValidationError, match="distinct"):
            ScenePrediction(
                masks=np.zeros((2, 3)), classes=[0, 0], init_superpoints=[1, 1]
            )

    def test_init_out_of_range_raises(self) -> None:
        """Test init superpoints must index a superpoint column."""
        with pytest.raises(ValidationError, match=r"\[0, 3\)"):
            ScenePrediction(masks=np.zeros((1, 3)), classes=[0], init_superpoints=[3])

    def test_negative_class_raises(self) -> None:
        """Test class indices must be non-negative."""
        with pytest.raises(ValidationError, match="class"):
            ScenePrediction(masks=np.zeros((1, 3)), classes=[-1], init_superpoints=[0])

    def test_empty_prediction(self) -> None:
        """Test zero queries are allowed."""
        pred = ScenePrediction(
            masks=np.zeros((0, 4)), classes=np.zeros(0), init_superpoints=np.zeros(0)
        )
        assert pred.query_count == 0


class TestViewAnnotation:
    """Test cases for ViewAnnotation."""

    def test_unsorted_points_raise(self) -> None:
        """Test point indices must be strictly ascending."""
        with pytest.raises(ValidationError, match="ascending"):
            ViewAnnotation(view_index=0, point_indices=[2, 1], instance_ids=[0, 0])

    def test_length_mismatch_raises(self) -> None:
        """Test point and id lists must have equal length."""
        with pytest.raises(ValidationError, match="equal"):
            ViewAnnotation(view_index=0, point_indices=[0, 1], instance_ids=[0])


class TestNormalField:
    """Test cases for NormalField."""

    def test_unit_normals_accepted(self) -> None:
        """Test unit rows pass and degeneracy flags default to False."""
        field = NormalField(normals=[[0, 0, 1], [1, 0, 0]])
        assert field.point_count == 2
        assert not field.degenerate.any()

    def test_non_unit_normal_raises(self) -> None:
        """Test rows off the unit sphere by more than 1e-5 are rejected."""
        with pytest.raises(ValidationError, match="not unit length"):
            NormalField(normals=[[0, 0, 1.001]])


class TestEdgeList:
    """Test cases for EdgeList."""

    def test_valid_edges(self) -> None:
        """Test a valid edge list reports its size and max endpoint."""
        edges = EdgeList(i=[0, 1], j=[1, 3], w=[0.0, 2.0])
        assert edges.edge_count == 2
        assert edges.max_endpoint() == 3

    def test_empty_edges(self) -> None:
        """Test an empty edge list is valid."""
        edges = EdgeList(i=[], j=[], w=[])
        assert edges.edge_count == 0
        assert edges.max_endpoint() == -1

    def test_i_not_less_than_j_raises(self) -> None:
        """Test records need i < j."""
        with pytest.raises(ValidationError, match="i < j"):
            EdgeList(i=[1], j=[1], w=[0.0])

    def test_duplicate_edge_raises(self) -> None:
        """Test the same (i, j) twice is rejected."""
        with pytest.raises(ValidationError, match="duplicate"):
            EdgeList(i=[0, 0], j=[1, 1], w=[0.0, 0.5])

    def test_endpoints_near_u32_max(self) -> None:
        """Test dedupe still works when endpoints approach 2**32."""
        top = 2**32 - 1
        edges = EdgeList(
            i=[top - 3, top - 2, top - 3], j=[top - 1, top, top], w=[0.1, 0.2, 0.3]
        )
        assert edges.edge_count == 3
        with pytest.raises(ValidationError, match="duplicate"):
            EdgeList(i=[top - 2, 0, top - 2], j=[top, 1, top], w=[0.0, 0.0, 1.0])

    def test_weight_out_of_range_raises(self) -> None:
        """Test weights outside [0, 2] are rejected."""
        with pytest.raises(ValidationError, match=r"\[0, 2\]"):
            EdgeList(i=[0], j=[1], w=[2.5])


class TestFeatureTypes:
    """Test cases for FeatureMatrix and ImageFeatureStack."""

    def test_feature_matrix_shape(self) -> None:
        """Test rows and cols of a feature matrix."""
        matrix = FeatureMatrix(data=np.ones((3, 2)))
        assert (matrix.rows, matrix.cols) == (3, 2)

    def test_feature_matrix_rejects_inf(self) -> None:
        """Test non-finite entries are rejected."""
        with pytest.raises(ValidationError, match="non-finite"):
            FeatureMatrix(data=[[np.inf]])

    def test_stack_needs_four_dims(self) -> None:
        """Test the image stack must be V×h×w×C."""
        with pytest.raises(ValidationError, match=r"\(V, h, w, C\)"):
            ImageFeatureStack(data=np.zeros((2, 3, 4)))
        assert ImageFeatureStack(data=np.zeros((2, 3, 4, 1))).view_count == 2
