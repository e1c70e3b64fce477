"""Pinhole cameras, depth bins, BEV grid indexing, and lift-splat pooling.

Frame conventions, stated once and used everywhere: the ego frame has x
forward, y left, z up, origin at the ego center.  BEV row index grows with
-y, column index with +x, so cell (row, col) covers
``x in [col*cell - extent/2, ...)`` and ``y in (extent/2 - (row+1)*cell, ...]``.
Camera frames are x right, y down, z forward (optical axis); extrinsics map
camera coordinates to ego coordinates.

Also home to the small planar-geometry helpers (oriented rectangles,
separating-axis intersection, polyline distance) shared by the scene
generator, the region masks, and the collision metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError


@dataclass(frozen=True)
class Camera:
    """One pinhole camera: intrinsics in pixels, camera-to-ego extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) camera-to-ego
    translation: np.ndarray  # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Camera axes expressed in the ego frame for a forward-looking camera:
# cam x (right) -> -y, cam y (down) -> -z, cam z (optical) -> +x.
_CAM_TO_EGO_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def make_rig(
    n_cameras: int = 6,
    image_width: int = 64,
    image_height: int = 64,
    hfov_deg: float = 70.0,
    height: float = 1.6,
) -> CameraRig:
    """Evenly yaw-spaced surround rig; camera 0 looks along +x (forward)."""
    if n_cameras < 1:
        raise ValueError("need at least one camera")
    fx = image_width / (2.0 * math.tan(math.radians(hfov_deg) / 2.0))
    cams = []
    for c in range(n_cameras):
        yaw = 2.0 * math.pi * c / n_cameras
        cams.append(
            Camera(
                fx=fx,
                fy=fx,
                cx=image_width / 2.0,
                cy=image_height / 2.0,
                rotation=yaw_rotation(yaw) @ _CAM_TO_EGO_BASE,
                translation=np.array([0.0, 0.0, height]),
                width=image_width,
                height=image_height,
            )
        )
    return CameraRig(cameras=tuple(cams))


@dataclass(frozen=True)
class DepthBins:
    near: float
    far: float
    centers: np.ndarray  # (D,) meters, strictly increasing

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if centers.ndim != 1 or centers.size < 1 or np.any(np.diff(centers) <= 0):
            raise ValueError("bin centers must be a strictly increasing vector")
        object.__setattr__(self, "centers", centers)

    @property
    def count(self) -> int:
        return int(self.centers.size)


def make_depth_bins(near: float, far: float, count: int) -> DepthBins:
    """Uniform bins over [near, far): center_i = near + (i + 0.5) * width."""
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if count < 1:
        raise ValueError(f"need at least one bin, got {count}")
    width = (far - near) / count
    centers = near + (np.arange(count, dtype=np.float64) + 0.5) * width
    return DepthBins(near=near, far=far, centers=centers)


@dataclass(frozen=True)
class GridSpec:
    """Ego-centered square BEV grid: ``extent`` meters per side, ``resolution`` cells."""

    extent: float
    resolution: int

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")

    @property
    def cell_size(self) -> float:
        return self.extent / self.resolution

    def grid_coords(self, x, y):
        """Continuous (row, col) grid coordinates of ego-frame point(s)."""
        half = self.extent / 2.0
        col = (np.asarray(x, dtype=np.float64) + half) / self.cell_size
        row = (half - np.asarray(y, dtype=np.float64)) / self.cell_size
        return row, col

    def cell_of(self, x: float, y: float):
        """Integer (row, col) containing the point, or None if outside."""
        row_f, col_f = self.grid_coords(x, y)
        row, col = int(np.floor(row_f)), int(np.floor(col_f))
        if 0 <= row < self.resolution and 0 <= col < self.resolution:
            return row, col
        return None

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        half = self.extent / 2.0
        x = (col + 0.5) * self.cell_size - half
        y = half - (row + 0.5) * self.cell_size
        return x, y

    def cell_centers(self) -> np.ndarray:
        """(resolution, resolution, 2) array of (x, y) cell centers."""
        half = self.extent / 2.0
        cols = (np.arange(self.resolution) + 0.5) * self.cell_size - half
        rows = half - (np.arange(self.resolution) + 0.5) * self.cell_size
        xs, ys = np.meshgrid(cols, rows)
        return np.stack([xs, ys], axis=-1)


@dataclass
class BevGrid:
    """Planar feature map over a GridSpec: data is (channels, rows, cols)."""

    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError("BevGrid", f"expected 3 dims, got shape {self.data.shape}")
        if self.data.shape[1] != self.spec.resolution or self.data.shape[2] != self.spec.resolution:
            raise ShapeError(
                "BevGrid",
                f"spatial dims {self.data.shape[1:]} do not match resolution {self.spec.resolution}",
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("BevGrid entries must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]


def pixel_to_ego(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """Unproject a pixel at a given optical-axis depth into the ego frame."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    p_cam = np.array(
        [(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth]
    )
    return camera.rotation @ p_cam + camera.translation


def project_pixel(camera: Camera, u: float, v: float, depth: float, grid: GridSpec):
    """BEV cell hit by a lifted pixel, or None when it lands outside the grid."""
    p = pixel_to_ego(camera, u, v, depth)
    return grid.cell_of(float(p[0]), float(p[1]))


class LssGeometry:
    """Precomputed (camera, feature pixel, depth bin) -> BEV cell table.

    The table depends only on the rig, grid, bins, and feature resolution,
    so it is built once and shared by every forward/backward pass.  Feature
    pixels are lifted from the center of their receptive patch in the image.
    """

    def __init__(
        self,
        rig: CameraRig,
        grid: GridSpec,
        bins: DepthBins,
        image_hw: tuple[int, int],
        feature_hw: tuple[int, int],
    ):
        self.rig = rig
        self.grid = grid
        self.bins = bins
        self.image_hw = (int(image_hw[0]), int(image_hw[1]))
        self.feature_hw = (int(feature_hw[0]), int(feature_hw[1]))

        img_h, img_w = self.image_hw
        h, w = self.feature_hw
        d = bins.count
        res = grid.resolution
        su, sv = img_w / w, img_h / h

        tables = []
        for cam in rig.cameras:
            us = (np.arange(w) + 0.5) * su
            vs = (np.arange(h) + 0.5) * sv
            uu, vv = np.meshgrid(us, vs)
            base = np.stack(
                [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1
            )  # (h, w, 3): camera-frame direction per unit depth
            pts = base[:, :, None, :] * bins.centers[None, None, :, None]  # (h, w, D, 3)
            ego = pts @ cam.rotation.T + cam.translation
            row_f, col_f = grid.grid_coords(ego[..., 0], ego[..., 1])
            row = np.floor(row_f).astype(np.int64)
            col = np.floor(col_f).astype(np.int64)
            inside = (row >= 0) & (row < res) & (col >= 0) & (col < res)
            cell = np.where(inside, row * res + col, -1)
            tables.append(cell)

        self.cell_index = np.stack(tables, axis=0)  # (C, h, w, D)
        flat = self.cell_index.reshape(-1)
        self._valid = flat >= 0
        self._valid_cell = flat[self._valid]
        n_pix = len(rig.cameras) * h * w
        self._valid_pixel = np.repeat(np.arange(n_pix), d)[self._valid]

    @property
    def n_cameras(self) -> int:
        return len(self.rig.cameras)


def lift_splat(
    features: np.ndarray,
    depth_weights: np.ndarray,
    geom: LssGeometry,
    *,
    check_normalized: bool = True,
) -> BevGrid:
    """Pool per-camera features into BEV pillars along predicted depth bins.

    ``features`` is (C, channels, h, w); ``depth_weights`` is (C, D, h, w)
    with each pixel's weights nonnegative and summing to 1 within 1e-6.
    Each feature pixel contributes weight(bin) * feature to the cell its
    (pixel, bin center) ray point falls in; out-of-grid contributions are
    dropped.  Accumulation order is camera-major, then pixel row-major, then
    bin, so results are bit-reproducible.  Pass ``check_normalized=False``
    only when probing gradients with perturbed (denormalized) weights.
    """
    features = np.asarray(features, dtype=np.float64)
    depth_weights = np.asarray(depth_weights, dtype=np.float64)
    c, h, w = geom.n_cameras, *geom.feature_hw
    d = geom.bins.count
    if features.ndim != 4 or features.shape[0] != c or features.shape[2:] != (h, w):
        raise ShapeError("lift_splat", f"features shape {features.shape} != ({c}, *, {h}, {w})")
    if depth_weights.shape != (c, d, h, w):
        raise ShapeError(
            "lift_splat", f"depth weights shape {depth_weights.shape} != {(c, d, h, w)}"
        )
    if check_normalized:
        if np.any(depth_weights < 0):
            raise ValueError("depth weights must be nonnegative")
        sums = depth_weights.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError("each pixel's depth weights must sum to 1 within 1e-6")

    ch = features.shape[1]
    res = geom.grid.resolution
    f2 = features.transpose(0, 2, 3, 1).reshape(c * h * w, ch)
    w2 = depth_weights.transpose(0, 2, 3, 1).reshape(c * h * w * d)
    wv = w2[geom._valid]
    contrib = wv[:, None] * f2[geom._valid_pixel]
    cells = np.zeros((res * res, ch))
    np.add.at(cells, geom._valid_cell, contrib)
    return BevGrid(data=cells.T.reshape(ch, res, res), spec=geom.grid)


def lift_splat_backward(
    d_bev: np.ndarray,
    features: np.ndarray,
    depth_weights: np.ndarray,
    geom: LssGeometry,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar through lift_splat w.r.t. features and weights."""
    c, h, w = geom.n_cameras, *geom.feature_hw
    d = geom.bins.count
    ch = features.shape[1]
    res = geom.grid.resolution
    f2 = np.asarray(features, dtype=np.float64).transpose(0, 2, 3, 1).reshape(c * h * w, ch)
    w2 = np.asarray(depth_weights, dtype=np.float64).transpose(0, 2, 3, 1).reshape(-1)
    g2 = np.asarray(d_bev, dtype=np.float64).reshape(ch, res * res).T  # (cells, ch)

    gathered = g2[geom._valid_cell]  # (K, ch)
    d_wflat = np.zeros(c * h * w * d)
    d_wflat[geom._valid] = np.einsum("kc,kc->k", gathered, f2[geom._valid_pixel])
    d_weights = d_wflat.reshape(c, h, w, d).transpose(0, 3, 1, 2)

    d_f2 = np.zeros_like(f2)
    np.add.at(d_f2, geom._valid_pixel, w2[geom._valid][:, None] * gathered)
    d_features = d_f2.reshape(c, h, w, ch).transpose(0, 3, 1, 2)
    return d_features, d_weights


# ---------------------------------------------------------------------------
# Planar helpers: oriented rectangles and polylines.
# ---------------------------------------------------------------------------


def rect_corners(x: float, y: float, width: float, length: float, yaw: float) -> np.ndarray:
    """Corners (4, 2) of an oriented rectangle; length runs along the yaw heading."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rects_intersect(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis overlap test for two convex quads (touching counts)."""
    for quad in (corners_a, corners_b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            norm = math.hypot(axis[0], axis[1])
            if norm < 1e-12:
                continue
            axis = axis / norm
            proj_a = corners_a @ axis
            proj_b = corners_b @ axis
            if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
                return False
    return True


def points_in_rect(points: np.ndarray, x, y, width, length, yaw) -> np.ndarray:
    """Boolean mask of points (..., 2) inside an oriented rectangle."""
    pts = np.asarray(points, dtype=np.float64)
    dx = pts[..., 0] - x
    dy = pts[..., 1] - y
    c, s = math.cos(yaw), math.sin(yaw)
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (np.abs(along) <= length / 2.0) & (np.abs(across) <= width / 2.0)


def polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Distance from each point (..., 2) to a polyline (M, 2), M >= 2."""
    pts = np.asarray(points, dtype=np.float64)
    line = np.asarray(polyline, dtype=np.float64)
    if line.ndim != 2 or line.shape[0] < 2 or line.shape[1] != 2:
        raise ValueError(f"polyline must be (M>=2, 2), got {line.shape}")
    best = np.full(pts.shape[:-1], np.inf)
    for a, b in zip(line[:-1], line[1:]):
        ab = b - a
        denom = float(ab @ ab)
        rel = pts - a
        if denom < 1e-18:
            d2 = np.sum(rel * rel, axis=-1)
        else:
            t = np.clip((rel @ ab) / denom, 0.0, 1.0)
            closest = a + t[..., None] * ab
            diff = pts - closest
            d2 = np.sum(diff * diff, axis=-1)
        best = np.minimum(best, d2)
    return np.sqrt(best)
