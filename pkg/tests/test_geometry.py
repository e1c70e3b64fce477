"""Cameras, depth bins, grid indexing, lift-splat pooling, planar helpers."""

import numpy as np
import pytest

from bevkd.diffcore import ShapeError, finite_diff_grad, grad_report
from bevkd.geometry import (
    BevGrid,
    Camera,
    GridSpec,
    LssGeometry,
    lift_splat,
    lift_splat_backward,
    make_depth_bins,
    make_rig,
    pixel_to_ego,
    points_in_rect,
    polyline_distance,
    project_pixel,
    rect_corners,
    rects_intersect,
)
from bevkd.selftest import brute_force_lift_splat


def identity_camera(width=64, height=64, fx=50.0):
    return Camera(
        fx=fx, fy=fx, cx=width / 2, cy=height / 2,
        rotation=np.eye(3), translation=np.zeros(3), width=width, height=height,
    )


class TestDepthBins:
    def test_uniform_centers(self):
        bins = make_depth_bins(1.0, 61.0, 60)
        np.testing.assert_allclose(bins.centers, 1.5 + np.arange(60), atol=1e-12)

    def test_single_bin_midpoint(self):
        bins = make_depth_bins(1.0, 3.0, 1)
        np.testing.assert_allclose(bins.centers, [2.0])

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            make_depth_bins(5.0, 4.0, 3)
        with pytest.raises(ValueError):
            make_depth_bins(0.0, 4.0, 3)
        with pytest.raises(ValueError):
            make_depth_bins(1.0, 4.0, 0)


class TestCameraValidation:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            identity_camera(fx=-1.0)

    def test_rejects_non_orthonormal_rotation(self):
        rot = np.eye(3)
        rot[0, 0] = 1.0 + 1e-6
        with pytest.raises(ValueError):
            Camera(fx=50, fy=50, cx=32, cy=32, rotation=rot, translation=np.zeros(3), width=64, height=64)

    def test_rig_needs_cameras(self):
        from bevkd.geometry import CameraRig

        with pytest.raises(ValueError):
            CameraRig(cameras=())


class TestProjection:
    def test_principal_point_lands_on_axis(self):
        cam = identity_camera()
        p = pixel_to_ego(cam, cam.cx, cam.cy, 10.0)
        np.testing.assert_allclose(p, [0.0, 0.0, 10.0], atol=1e-12)

    def test_cell_indexing_at_origin(self):
        grid = GridSpec(extent=100.0, resolution=200)
        assert grid.cell_of(0.0, 0.0) == (100, 100)

    def test_outside_extent_gives_none(self):
        # forward-looking camera, point 80 m ahead, extent only +-50 m
        rig = make_rig(n_cameras=1, image_width=64, image_height=64)
        grid = GridSpec(extent=100.0, resolution=100)
        cam = rig.cameras[0]
        assert project_pixel(cam, cam.cx, cam.cy, 80.0, grid) is None

    def test_depth_must_be_positive(self):
        cam = identity_camera()
        with pytest.raises(ValueError):
            pixel_to_ego(cam, 1.0, 1.0, 0.0)

    def test_grid_requires_min_resolution(self):
        with pytest.raises(ValueError):
            GridSpec(extent=10.0, resolution=4)


class TestBevGrid:
    def test_validates_square_and_finite(self):
        spec = GridSpec(extent=16.0, resolution=8)
        BevGrid(np.zeros((3, 8, 8)), spec)
        with pytest.raises(ShapeError):
            BevGrid(np.zeros((3, 8, 4)), spec)
        bad = np.zeros((1, 8, 8))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            BevGrid(bad, spec)


def small_geom(n_cams=1, res=12, d=4, extent=None):
    rig = make_rig(n_cameras=n_cams, image_width=16, image_height=16, hfov_deg=75.0)
    grid = GridSpec(extent=float(extent if extent is not None else 2 * res), resolution=res)
    bins = make_depth_bins(1.0, res + 3.0, d)
    return rig, grid, bins, LssGeometry(rig, grid, bins, (16, 16), (4, 4))


class TestLiftSplat:
    def test_one_hot_depth_hits_one_cell(self):
        rig, grid, bins, geom = small_geom()
        feats = np.zeros((1, 3, 4, 4))
        feats[0, :, 2, 1] = (1.0, 2.0, 3.0)
        weights = np.zeros((1, 4, 4, 4))
        weights[0, :, :, :] = 1.0 / 4  # normalize everything
        weights[0, :, 2, 1] = 0.0
        weights[0, 1, 2, 1] = 1.0  # one-hot bin for the only nonzero feature
        out = lift_splat(feats, weights, geom).data
        expected = brute_force_lift_splat(feats, weights, rig, grid, bins, (16, 16))
        np.testing.assert_allclose(out, expected, atol=1e-12)
        cell = geom.cell_index[0, 2, 1, 1]
        assert cell >= 0
        nonzero_cells = np.argwhere(np.any(out != 0, axis=0))
        assert len(nonzero_cells) == 1
        assert nonzero_cells[0].tolist() == [cell // grid.resolution, cell % grid.resolution]

    def test_uniform_depth_splits_feature_evenly(self):
        rig, grid, bins, geom = small_geom(res=16, d=4)
        # straight-ahead pixel: the 4 bins land in 4 distinct cells
        cells = geom.cell_index[0, 2, 2, :]
        assert len(set(cells.tolist())) == 4 and np.all(cells >= 0)
        feats = np.zeros((1, 2, 4, 4))
        feats[0, :, 2, 2] = (4.0, -8.0)
        weights = np.full((1, 4, 4, 4), 0.25)
        out = lift_splat(feats, weights, geom).data
        for cell in cells:
            r, c = divmod(int(cell), grid.resolution)
            np.testing.assert_allclose(out[:, r, c], [1.0, -2.0], atol=1e-12)

    def test_all_outside_gives_zero_grid(self):
        rig = make_rig(n_cameras=1, image_width=16, image_height=16)
        grid = GridSpec(extent=16.0, resolution=8)
        bins = make_depth_bins(50.0, 80.0, 3)  # far beyond the extent
        geom = LssGeometry(rig, grid, bins, (16, 16), (4, 4))
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(1, 2, 4, 4))
        weights = np.full((1, 3, 4, 4), 1.0 / 3)
        out = lift_splat(feats, weights, geom).data
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_rejects_unnormalized_rows(self):
        _, _, _, geom = small_geom()
        feats = np.zeros((1, 2, 4, 4))
        weights = np.full((1, 4, 4, 4), 0.3)
        with pytest.raises(ValueError):
            lift_splat(feats, weights, geom)

    def test_rejects_negative_weights(self):
        _, _, _, geom = small_geom()
        feats = np.zeros((1, 2, 4, 4))
        weights = np.full((1, 4, 4, 4), 0.25)
        weights[0, 0, 0, 0] = -0.25
        weights[0, 1, 0, 0] = 0.75
        with pytest.raises(ValueError):
            lift_splat(feats, weights, geom)

    def test_rejects_shape_mismatch(self):
        _, _, _, geom = small_geom()
        with pytest.raises(ShapeError):
            lift_splat(np.zeros((2, 2, 4, 4)), np.full((1, 4, 4, 4), 0.25), geom)
        with pytest.raises(ShapeError):
            lift_splat(np.zeros((1, 2, 4, 4)), np.full((1, 5, 4, 4), 0.2), geom)

    def test_linearity_in_features(self):
        rng = np.random.default_rng(3)
        rig, grid, bins, geom = small_geom(n_cams=2, res=10, d=3)
        f = rng.normal(size=(2, 3, 4, 4))
        g = rng.normal(size=(2, 3, 4, 4))
        logits = rng.normal(size=(2, 3, 4, 4))
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        a, b = 2.25, -0.75
        combined = lift_splat(a * f + b * g, w, geom).data
        separate = a * lift_splat(f, w, geom).data + b * lift_splat(g, w, geom).data
        np.testing.assert_allclose(combined, separate, atol=1e-9)

    def test_mass_conservation_per_pixel(self):
        rng = np.random.default_rng(4)
        rig, grid, bins, geom = small_geom(n_cams=2, res=10, d=5)
        logits = rng.normal(size=(2, 5, 4, 4))
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        for ci in range(2):
            for i in range(4):
                for j in range(4):
                    feats = np.zeros((2, 1, 4, 4))
                    feats[ci, 0, i, j] = 1.0
                    pooled = float(np.sum(lift_splat(feats, w, geom).data))
                    in_grid = float(np.sum(w[ci, :, i, j][geom.cell_index[ci, i, j] >= 0]))
                    assert in_grid <= 1.0 + 1e-12
                    assert abs(pooled - in_grid) <= 1e-6

    def test_gradients_match_oracle(self):
        rng = np.random.default_rng(5)
        rig, grid, bins, geom = small_geom(n_cams=2, res=10, d=3)
        feats = rng.normal(size=(2, 3, 4, 4))
        logits = rng.normal(size=(2, 3, 4, 4))
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        probe = rng.normal(size=(3, 10, 10))  # random scalar reduction

        def loss_wrt_feats(f):
            return float(np.sum(probe * lift_splat(f, w, geom, check_normalized=False).data))

        def loss_wrt_weights(v):
            return float(np.sum(probe * lift_splat(feats, v, geom, check_normalized=False).data))

        d_feats, d_weights = lift_splat_backward(probe, feats, w, geom)
        rep_f = grad_report("feats", d_feats, finite_diff_grad(loss_wrt_feats, feats, 1e-4))
        rep_w = grad_report("weights", d_weights, finite_diff_grad(loss_wrt_weights, w, 1e-4))
        assert rep_f.max_rel_err <= 1e-4
        assert rep_w.max_rel_err <= 1e-4

    def test_repeat_calls_bit_identical(self):
        rng = np.random.default_rng(6)
        _, _, _, geom = small_geom(n_cams=2, res=10, d=3)
        feats = rng.normal(size=(2, 3, 4, 4))
        logits = rng.normal(size=(2, 3, 4, 4))
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out1 = lift_splat(feats, w, geom).data
        out2 = lift_splat(feats, w, geom).data
        np.testing.assert_array_equal(out1, out2)


class TestPlanarHelpers:
    def test_rect_corners_axis_aligned(self):
        corners = rect_corners(1.0, 2.0, 2.0, 4.0, 0.0)
        assert corners.shape == (4, 2)
        np.testing.assert_allclose(sorted(corners[:, 0]), [-1.0, -1.0, 3.0, 3.0])
        np.testing.assert_allclose(sorted(corners[:, 1]), [1.0, 1.0, 3.0, 3.0])

    def test_rects_intersect_cases(self):
        a = rect_corners(0, 0, 2, 4, 0.0)
        b = rect_corners(10, 0, 2, 4, 1.0)
        assert not rects_intersect(a, b)
        c = rect_corners(1.0, 0.5, 2, 4, 0.7)
        assert rects_intersect(a, c)
        # rotated rectangle separated only along a diagonal axis
        d = rect_corners(3.1, 1.6, 2, 4, np.pi / 4)
        assert rects_intersect(a, d) == rects_intersect(d, a)

    def test_points_in_rect_respects_yaw(self):
        pts = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 0.9]])
        inside = points_in_rect(pts, 0.0, 0.0, 2.0, 6.0, np.pi / 2)  # long axis along +y
        np.testing.assert_array_equal(inside, [False, True, True])

    def test_polyline_distance(self):
        line = np.array([[0.0, 0.0], [10.0, 0.0]])
        pts = np.array([[5.0, 3.0], [-4.0, 0.0], [12.0, 0.0]])
        np.testing.assert_allclose(polyline_distance(pts, line), [3.0, 4.0, 2.0], atol=1e-12)
        with pytest.raises(ValueError):
            polyline_distance(pts, np.zeros((1, 2)))
