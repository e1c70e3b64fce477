"""Student and teacher networks: conv backbone, depth lifting, task heads.

Both networks share one architecture family - a small strided conv tower per
camera, a 1x1 lift head emitting feature planes plus per-pixel depth logits,
lift-splat pooling onto the BEV grid, and three heads (detection conv, motion
perceptron, plan perceptron).  The teacher is wider and deeper and projects
its BEV down to the student's channel count with a 1x1 map that is trained
with the rest of the teacher (its heads consume the projected BEV), so both
roles expose identical output interfaces.

Every layer carries a handwritten backward pass.  A network instance caches
exactly one forward pass at a time; run backward for one call before issuing
the next call to the same sub-network (single-threaded use).

Forecasts are (A, horizon, 2) arrays of cumulative ego-frame displacements
anchored at each agent's position; plans are (horizon, 2) ego waypoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._binio import ByteReader, ByteWriter, FormatError
from .diffcore import Parameter, ShapeError
from .geometry import (
    BevGrid,
    CameraRig,
    DepthBins,
    GridSpec,
    LssGeometry,
    lift_splat,
    lift_splat_backward,
)

REGRESSION_CHANNELS = 8  # dx, dy (cells); width, length (m); sin, cos yaw; vx, vy (m/s)
STATE_DIM = 8
# Metric-valued head outputs are raw layer outputs times this gain, so
# meter-scale targets stay reachable within the small-step training budget.
HEAD_OUTPUT_GAIN = 10.0


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, gy: np.ndarray, axis: int = 1) -> np.ndarray:
    return y * (gy - (gy * y).sum(axis=axis, keepdims=True))


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_uniform(rng: np.random.Generator, size: int, fan_in: int) -> np.ndarray:
    # nonzero bias keeps preactivations off the exact ReLU corner even over
    # all-zero inputs (empty BEV cells, clamped receptive fields)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


# Output layers start near (not exactly at) zero so gained metric outputs
# begin as small corrections rather than large random guesses.
OUTPUT_INIT_SCALE = 0.01


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (n, c, h, w, ho, wo)


def _col2im(gcols: np.ndarray, info, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w, ho, wo = info
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    g6 = gcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += g6[
                :, :, di, dj
            ]
    return gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp


class Conv2d:
    """2D convolution (zero padding) with cached im2col for the backward pass."""

    def __init__(self, name, in_ch, out_ch, ksize, stride, pad, rng, init_scale=1.0):
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.pad = ksize, stride, pad
        fan_in = in_ch * ksize * ksize
        self.weight = Parameter(
            f"{name}.weight",
            init_scale * _kaiming_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in),
        )
        self.bias = Parameter(f"{name}.bias", init_scale * _bias_uniform(rng, out_ch, fan_in))
        self._cols = None
        self._info = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(self.name, f"expected (N, {self.in_ch}, H, W), got {x.shape}")
        cols, info = _im2col(x, self.ksize, self.stride, self.pad)
        self._cols, self._info = cols, info
        wm = self.weight.value.reshape(self.out_ch, -1)
        y = cols @ wm.T + self.bias.value
        n, _, _, _, ho, wo = info
        return y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        n, _, _, _, ho, wo = self._info
        gy2 = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        self.weight.grad += (gy2.T @ self._cols).reshape(self.weight.value.shape)
        self.bias.grad += gy2.sum(axis=0)
        gcols = gy2 @ self.weight.value.reshape(self.out_ch, -1)
        return _col2im(gcols, self._info, self.ksize, self.stride, self.pad)


class Linear:
    def __init__(self, name, in_dim, out_dim, rng, init_scale=1.0):
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(
            f"{name}.weight", init_scale * _kaiming_uniform(rng, (out_dim, in_dim), in_dim)
        )
        self.bias = Parameter(f"{name}.bias", init_scale * _bias_uniform(rng, out_dim, in_dim))
        self._x = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(self.name, f"expected (N, {self.in_dim}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, gy: np.ndarray) -> np.ndarray:
        self.weight.grad += gy.T @ self._x
        self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.value


class Backbone:
    """Shared-weight conv tower over each camera image plus the lift head.

    Stage strides are 2 for the first three stages and 1 afterwards, so any
    tower with at least three stages emits features at 1/8 input resolution;
    the 1x1 lift head then splits its output into ``bev_channels`` feature
    planes and one softmaxed depth logit per depth bin.
    """

    def __init__(self, name, in_ch, stage_widths, bev_channels, n_depth_bins, rng):
        self.name = name
        self.bev_channels = bev_channels
        self.n_depth_bins = n_depth_bins
        self.stage_strides = tuple(2 if i < 3 else 1 for i in range(len(stage_widths)))
        self.stages = []
        prev = in_ch
        for i, (width, stride) in enumerate(zip(stage_widths, self.stage_strides)):
            self.stages.append(Conv2d(f"{name}.stage{i}", prev, width, 3, stride, 1, rng))
            prev = width
        self.lift = Conv2d(f"{name}.lift", prev, bev_channels + n_depth_bins, 1, 1, 0, rng)
        self._relu_masks = None
        self._depth = None
        self.last_relu_margin = np.inf  # distance of the closest preactivation to its kink

    @property
    def downsample(self) -> int:
        return int(np.prod(self.stage_strides))

    def parameters(self) -> list[Parameter]:
        out = []
        for s in self.stages:
            out.extend(s.parameters())
        out.extend(self.lift.parameters())
        return out

    def forward(self, images: np.ndarray):
        """images (C, in_ch, H, W) -> features (C, bev, h, w), depth (C, D, h, w)."""
        if images.ndim != 4 or images.shape[0] < 1:
            raise ShapeError(self.name, f"expected a nonempty (C, ch, H, W) stack, got {images.shape}")
        x = images
        self._relu_masks = []
        self.last_relu_margin = np.inf
        for stage in self.stages:
            x = stage.forward(x)
            self.last_relu_margin = min(self.last_relu_margin, float(np.min(np.abs(x))))
            mask = x > 0
            self._relu_masks.append(mask)
            x = x * mask
        out = self.lift.forward(x)
        features = out[:, : self.bev_channels]
        self._depth = softmax(out[:, self.bev_channels :], axis=1)
        return features, self._depth

    def backward(self, gfeatures: np.ndarray, gdepth: np.ndarray) -> np.ndarray:
        glogits = softmax_backward(self._depth, gdepth, axis=1)
        gout = np.concatenate([gfeatures, glogits], axis=1)
        gx = self.lift.backward(gout)
        for stage, mask in zip(reversed(self.stages), reversed(self._relu_masks)):
            gx = stage.backward(gx * mask)
        return gx


@dataclass
class DetectionMaps:
    """Center heatmap plus per-cell box regression planes."""

    heatmap: np.ndarray  # (1, R, R), entries in [0, 1]
    regression: np.ndarray  # (8, R, R)

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        self.regression = np.asarray(self.regression, dtype=np.float64)
        if self.heatmap.ndim != 3 or self.heatmap.shape[0] != 1:
            raise ShapeError("DetectionMaps", f"heatmap shape {self.heatmap.shape}")
        if self.regression.shape != (REGRESSION_CHANNELS,) + self.heatmap.shape[1:]:
            raise ShapeError(
                "DetectionMaps",
                f"regression shape {self.regression.shape} does not match heatmap {self.heatmap.shape}",
            )
        if np.any(self.heatmap < 0) or np.any(self.heatmap > 1):
            raise ValueError("heatmap entries must lie in [0, 1]")


class DetectHead:
    """One 3x3 conv over the BEV; sigmoid on the heatmap channel only."""

    def __init__(self, name, bev_channels, rng):
        self.name = name
        self.conv = Conv2d(
            f"{name}.conv", bev_channels, 1 + REGRESSION_CHANNELS, 3, 1, 1, rng,
            init_scale=OUTPUT_INIT_SCALE,
        )
        self._heat = None
        self._logits = None

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters()

    def forward(self, bev_data: np.ndarray) -> DetectionMaps:
        out = self.conv.forward(bev_data[None])[0]
        self._logits = out[:1]
        self._heat = sigmoid(self._logits)
        return DetectionMaps(heatmap=self._heat, regression=HEAD_OUTPUT_GAIN * out[1:])

    @property
    def heatmap(self) -> np.ndarray:
        return self._heat

    @property
    def heat_logits(self) -> np.ndarray:
        return self._logits

    def backward(self, gheat: np.ndarray, greg: np.ndarray, gheat_logits=None) -> np.ndarray:
        """Backprop grads w.r.t. the heatmap (post-sigmoid), the regression
        planes, and optionally the raw heatmap logits; returns the BEV grad."""
        gz = gheat * self._heat * (1.0 - self._heat)
        if gheat_logits is not None:
            gz = gz + gheat_logits
        gout = np.concatenate([gz, HEAD_OUTPUT_GAIN * greg], axis=0)
        return self.conv.backward(gout[None])[0]


def _bilinear_setup(grid: GridSpec, xy: np.ndarray):
    """Sample positions, corner weights, and interpolation factors for BEV
    lookups at agent centers.

    BEV values are treated as samples at cell centers.  Agents whose center
    falls outside the grid extent get all-zero weights (zero sample, zero
    gradient); sample points clamped against the border cell centers lose
    their position derivative along the clamped axis.
    """
    res = grid.resolution
    row_f, col_f = grid.grid_coords(xy[:, 0], xy[:, 1])
    inside = (row_f >= 0) & (row_f < res) & (col_f >= 0) & (col_f < res)
    pr_raw = row_f - 0.5
    pc_raw = col_f - 0.5
    pr = np.clip(pr_raw, 0.0, res - 1.0)
    pc = np.clip(pc_raw, 0.0, res - 1.0)
    free_r = inside & (pr_raw > 0.0) & (pr_raw < res - 1.0)
    free_c = inside & (pc_raw > 0.0) & (pc_raw < res - 1.0)
    i0 = np.minimum(np.floor(pr), res - 2).astype(np.int64)
    j0 = np.minimum(np.floor(pc), res - 2).astype(np.int64)
    tr = pr - i0
    tc = pc - j0
    w = np.stack(
        [(1 - tr) * (1 - tc), (1 - tr) * tc, tr * (1 - tc), tr * tc], axis=1
    ) * inside[:, None]
    rows = np.stack([i0, i0, i0 + 1, i0 + 1], axis=1)
    cols = np.stack([j0, j0 + 1, j0, j0 + 1], axis=1)
    return rows, cols, w, tr, tc, free_r, free_c


_STATE_SCALE = np.array([0.05, 0.05, 1.0, 1.0, 0.15, 0.15, 0.5, 0.2])
# positions (+-20 m), heading cos/sin, velocities (+-7 m/s), width, length


class MotionHead:
    """Per-agent two-layer perceptron over [agent state, sampled BEV feature]."""

    def __init__(self, name, bev_channels, hidden, horizon, rng):
        self.name = name
        self.horizon = horizon
        self.bev_channels = bev_channels
        self.fc1 = Linear(f"{name}.fc1", STATE_DIM + bev_channels, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, 2 * horizon, rng, init_scale=OUTPUT_INIT_SCALE)
        self._cache = None
        self.last_relu_margin = np.inf

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, agent_states: np.ndarray, bev: BevGrid) -> np.ndarray:
        states = np.asarray(agent_states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ShapeError(self.name, f"expected (A, {STATE_DIM}) states, got {states.shape}")
        n = states.shape[0]
        self.last_relu_margin = np.inf
        if n == 0:
            self._cache = None
            return np.zeros((0, self.horizon, 2))
        rows, cols, w, tr, tc, free_r, free_c = _bilinear_setup(bev.spec, states[:, :2])
        corners = bev.data[:, rows, cols]  # (ch, A, 4)
        samples = np.einsum("ak,cak->ac", w, corners)
        h = self.fc1.forward(np.concatenate([states * _STATE_SCALE, samples], axis=1))
        self.last_relu_margin = float(np.min(np.abs(h)))
        mask = h > 0
        out = HEAD_OUTPUT_GAIN * self.fc2.forward(h * mask)
        self._cache = (rows, cols, w, tr, tc, free_r, free_c, corners, mask, bev.data.shape, bev.spec.cell_size)
        return out.reshape(n, self.horizon, 2)

    def backward(self, gout: np.ndarray):
        """Returns (grad wrt agent states, grad wrt BEV data).

        The state gradient covers both the perceptron input path and the
        movement of the bilinear sample point with the agent position.
        """
        if self._cache is None:
            raise ShapeError(self.name, "backward without a cached nonempty forward")
        rows, cols, w, tr, tc, free_r, free_c, corners, mask, bev_shape, cell = self._cache
        n = gout.shape[0]
        gh = self.fc2.backward(HEAD_OUTPUT_GAIN * gout.reshape(n, 2 * self.horizon)) * mask
        gx = self.fc1.backward(gh)
        gstates = gx[:, :STATE_DIM] * _STATE_SCALE
        gsamp = gx[:, STATE_DIM:]
        gbev_t = np.zeros((bev_shape[1], bev_shape[2], bev_shape[0]))
        np.add.at(
            gbev_t,
            (rows.ravel(), cols.ravel()),
            (w[:, :, None] * gsamp[:, None, :]).reshape(-1, bev_shape[0]),
        )
        # d(sample)/d(position): derivative of the corner weights w.r.t. the
        # fractional offsets, chained through grid coordinates (col ~ +x,
        # row ~ -y, both scaled by the cell size).
        dw_dtr = np.stack([-(1 - tc), -tc, 1 - tc, tc], axis=1)
        dw_dtc = np.stack([-(1 - tr), 1 - tr, -tr, tr], axis=1)
        g_tr = np.einsum("ac,ak,cak->a", gsamp, dw_dtr, corners) * free_r
        g_tc = np.einsum("ac,ak,cak->a", gsamp, dw_dtc, corners) * free_c
        gstates[:, 0] += g_tc / cell
        gstates[:, 1] -= g_tr / cell
        return gstates, gbev_t.transpose(2, 0, 1)


class PlanHead:
    """Two-layer perceptron over the flattened central BEV patch."""

    def __init__(self, name, bev_channels, patch, hidden, horizon, rng):
        self.name = name
        self.patch = patch
        self.horizon = horizon
        self.bev_channels = bev_channels
        self.fc1 = Linear(f"{name}.fc1", bev_channels * patch * patch, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, 2 * horizon, rng, init_scale=OUTPUT_INIT_SCALE)
        self._cache = None
        self.last_relu_margin = np.inf

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, bev: BevGrid) -> np.ndarray:
        res = bev.rows
        if res < self.patch:
            raise ShapeError(self.name, f"resolution {res} smaller than patch {self.patch}")
        r0 = (res - self.patch) // 2
        x = bev.data[:, r0 : r0 + self.patch, r0 : r0 + self.patch].reshape(1, -1)
        h = self.fc1.forward(x)
        self.last_relu_margin = float(np.min(np.abs(h)))
        mask = h > 0
        out = HEAD_OUTPUT_GAIN * self.fc2.forward(h * mask)
        self._cache = (r0, mask, bev.data.shape)
        return out.reshape(self.horizon, 2)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        r0, mask, bev_shape = self._cache
        gh = self.fc2.backward(HEAD_OUTPUT_GAIN * gout.reshape(1, 2 * self.horizon)) * mask
        gx = self.fc1.backward(gh)
        gbev = np.zeros(bev_shape)
        gbev[:, r0 : r0 + self.patch, r0 : r0 + self.patch] = gx.reshape(
            bev_shape[0], self.patch, self.patch
        )
        return gbev


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture summary: stage widths, channel counts, head sizes, role."""

    role: str
    stage_widths: tuple[int, ...]
    bev_channels: int
    out_bev_channels: int
    head_hidden: int

    def __post_init__(self):
        if self.role not in ("student", "teacher"):
            raise ValueError(f"role must be student or teacher, got {self.role!r}")
        if len(self.stage_widths) < 1 or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"bad stage widths {self.stage_widths}")
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths)


DEFAULT_STUDENT_SPEC = NetworkSpec(
    role="student", stage_widths=(16, 32, 64, 64), bev_channels=32, out_bev_channels=32, head_hidden=64
)
DEFAULT_TEACHER_SPEC = NetworkSpec(
    role="teacher",
    stage_widths=(32, 64, 128, 128, 256, 256),
    bev_channels=64,
    out_bev_channels=32,
    head_hidden=128,
)


class PerceptionNet:
    """A full camera-to-BEV network with detection, motion, and plan heads.

    Heads operate on the post-projection BEV (``spec.out_bev_channels``), so
    a teacher's outputs are directly comparable with a student's.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        rig: CameraRig,
        grid: GridSpec,
        bins: DepthBins,
        image_hw: tuple[int, int],
        horizon: int = 6,
        seed=0,
        plan_patch: int | None = None,
    ):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.grid = grid
        self.horizon = horizon
        self.backbone = Backbone(spec.role, 1, spec.stage_widths, spec.bev_channels, bins.count, rng)
        down = self.backbone.downsample
        if image_hw[0] % down or image_hw[1] % down:
            raise ValueError(f"image size {image_hw} not divisible by downsample {down}")
        self.geom = LssGeometry(rig, grid, bins, image_hw, (image_hw[0] // down, image_hw[1] // down))
        self.bev_proj = None
        if spec.out_bev_channels != spec.bev_channels:
            self.bev_proj = Conv2d(
                f"{spec.role}.bev_proj", spec.bev_channels, spec.out_bev_channels, 1, 1, 0, rng
            )
        out_ch = spec.out_bev_channels
        patch = plan_patch if plan_patch is not None else max(1, grid.resolution // 4)
        self.det_head = DetectHead(f"{spec.role}.det", out_ch, rng)
        self.motion_head = MotionHead(f"{spec.role}.motion", out_ch, spec.head_hidden, horizon, rng)
        self.plan_head = PlanHead(f"{spec.role}.plan", out_ch, patch, spec.head_hidden, horizon, rng)
        self._fwd = None

    def parameters(self) -> list[Parameter]:
        out = self.backbone.parameters()
        if self.bev_proj is not None:
            out.extend(self.bev_proj.parameters())
        out.extend(self.det_head.parameters())
        out.extend(self.motion_head.parameters())
        out.extend(self.plan_head.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward_bev(self, images: np.ndarray) -> BevGrid:
        """images (C, 1, H, W) -> shared BEV grid; caches for backward_bev."""
        feats, depth = self.backbone.forward(np.asarray(images, dtype=np.float64))
        bev_pre = lift_splat(feats, depth, self.geom)
        if self.bev_proj is not None:
            bev = BevGrid(self.bev_proj.forward(bev_pre.data[None])[0], self.grid)
        else:
            bev = bev_pre
        self._fwd = (feats, depth, bev_pre, bev)
        return bev

    def backward_bev(self, d_bev: np.ndarray) -> None:
        """Backprop a gradient w.r.t. the (projected) BEV into all backbone params."""
        feats, depth, bev_pre, _ = self._fwd
        if self.bev_proj is not None:
            d_bev = self.bev_proj.backward(d_bev[None])[0]
        d_feats, d_weights = lift_splat_backward(d_bev, feats, depth, self.geom)
        self.backbone.backward(d_feats, d_weights)

    def intermediates(self):
        """(name, array) pairs of the cached forward, in forward order."""
        if self._fwd is None:
            return
        feats, depth, bev_pre, bev = self._fwd
        yield f"{self.spec.role}.features", feats
        yield f"{self.spec.role}.depth", depth
        yield f"{self.spec.role}.bev", bev.data

    # Head pass-throughs, so callers drive one sub-network at a time.
    def detect(self, bev: BevGrid) -> DetectionMaps:
        return self.det_head.forward(bev.data)

    def forecast(self, agent_states: np.ndarray, bev: BevGrid) -> np.ndarray:
        return self.motion_head.forward(agent_states, bev)

    def plan(self, bev: BevGrid) -> np.ndarray:
        return self.plan_head.forward(bev)


def count_params(obj) -> int:
    """Exact trainable scalar count of anything exposing parameters()."""
    return int(sum(p.value.size for p in obj.parameters()))


def capacity_ratio(student: PerceptionNet, teacher: PerceptionNet) -> float:
    return count_params(student) / count_params(teacher)


def agent_state(x, y, yaw, vx, vy, width, length) -> np.ndarray:
    """Canonical 8-dim agent state consumed by the motion head."""
    return np.array([x, y, math.cos(yaw), math.sin(yaw), vx, vy, width, length])


@dataclass(frozen=True)
class AgentBox:
    """A decoded (or ground-truth) agent box in the ego frame."""

    x: float
    y: float
    width: float
    length: float
    yaw: float
    vx: float
    vy: float
    score: float

    def state(self) -> np.ndarray:
        return agent_state(self.x, self.y, self.yaw, self.vx, self.vy, self.width, self.length)


def decode_detections(
    maps: DetectionMaps,
    grid: GridSpec,
    score_threshold: float = 0.25,
    max_detections: int = 10,
) -> list[AgentBox]:
    """Peak-decode boxes: 3x3 local maxima above threshold, best-first.

    Ties in score break on (row, col) order, so decoding is deterministic.
    """
    if not (0.0 < score_threshold < 1.0):
        raise ValueError(f"score threshold must be in (0, 1), got {score_threshold}")
    heat = maps.heatmap[0]
    padded = np.pad(heat, 1, constant_values=-np.inf)
    is_max = np.ones_like(heat, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            r = heat.shape[0]
            is_max &= heat >= padded[1 + di : 1 + di + r, 1 + dj : 1 + dj + r]
    peaks = np.argwhere(is_max & (heat > score_threshold))
    ranked = sorted(((float(heat[r, c]), int(r), int(c)) for r, c in peaks), key=lambda t: (-t[0], t[1], t[2]))
    half = grid.extent / 2.0
    cell = grid.cell_size
    boxes = []
    for score, r, c in ranked[:max_detections]:
        dx, dy, bw, bl, sy, cy, vx, vy = (float(maps.regression[k, r, c]) for k in range(REGRESSION_CHANNELS))
        x = (c + 0.5 + dx) * cell - half
        y = half - (r + 0.5 + dy) * cell
        boxes.append(
            AgentBox(x=x, y=y, width=bw, length=bl, yaw=math.atan2(sy, cy), vx=vx, vy=vy, score=score)
        )
    return boxes


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, count, then per parameter the name,
# shape, and raw little-endian float32 payload.  Round-trips bit-exactly.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TBEVCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, parameters) -> None:
    params = list(parameters.parameters() if hasattr(parameters, "parameters") else parameters)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    w = ByteWriter()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    w.u32(len(params))
    for p in params:
        encoded = p.name.encode("utf-8")
        w.u32(len(encoded))
        w.raw(encoded)
        w.u32(p.value.ndim)
        for dim in p.value.shape:
            w.u32(dim)
        w.f32_array(p.value)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        r = ByteReader(f.read())
    r.expect_magic(CHECKPOINT_MAGIC)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(r.offset - 4, f"unsupported version {version}")
    count = r.u32("parameter count")
    state: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"name length of parameter {i}")
        name = r.read(name_len, f"name of parameter {i}").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"dim {d} of {name}") for d in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        state[name] = r.f32_array(n, f"values of {name}").reshape(shape)
    r.expect_eof()
    return state


def load_into(net: PerceptionNet, state: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in net.parameters()}
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, arr in state.items():
        p = params[name]
        if arr.shape != p.value.shape:
            raise ShapeError(name, f"checkpoint shape {arr.shape} != parameter {p.value.shape}")
        p.value[...] = arr.astype(np.float64)
