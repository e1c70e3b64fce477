"""Procedural scenes, multi-camera rendering, labels, and the teacher cache.

A scene is a handful of agents on and around a lane band, each following a
constant-velocity or constant-turn motion model sampled at 2 Hz, plus a
scripted ego that tracks the lane centerline.  Cameras render single-channel
ground-plane views by ray casting: agent footprints light up with intensity
inversely proportional to distance, the lane band at a low constant level,
background at zero.  Everything is a pure function of the scene seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import distill
from ._binio import ByteReader, ByteWriter, FormatError
from .geometry import (
    CameraRig,
    GridSpec,
    points_in_rect,
    polyline_distance,
    rect_corners,
    rects_intersect,
)
from .nets import agent_state

HORIZON = 6  # 3 s at 2 Hz
DT = 0.5
EGO_SIZE = (1.8, 4.5)  # width, length in meters


@dataclass(frozen=True)
class ConstantVelocity:
    vx: float
    vy: float


@dataclass(frozen=True)
class ConstantTurn:
    speed: float
    yaw_rate: float


@dataclass(frozen=True)
class Agent:
    x: float
    y: float
    width: float
    length: float
    yaw: float
    motion: ConstantVelocity | ConstantTurn

    def velocity(self) -> tuple[float, float]:
        if isinstance(self.motion, ConstantVelocity):
            return self.motion.vx, self.motion.vy
        return self.motion.speed * math.cos(self.yaw), self.motion.speed * math.sin(self.yaw)


@dataclass(frozen=True)
class LaneBand:
    centerline: np.ndarray  # (M, 2); empty allowed
    half_width: float


@dataclass(frozen=True)
class Scene:
    seed: int
    agents: tuple[Agent, ...]
    lane: LaneBand
    ego_plan: np.ndarray  # (HORIZON, 2) future ego waypoints


@dataclass(frozen=True)
class SceneParams:
    """Sampling ranges for procedural scenes."""

    extent: float = 40.0
    n_agents: tuple[int, int] = (1, 5)
    speed: tuple[float, float] = (1.0, 7.0)
    ego_speed: tuple[float, float] = (3.0, 7.0)
    yaw_rate_max: float = 0.3
    lane_half_width: tuple[float, float] = (2.5, 3.5)
    curvature_max: float = 0.015
    agent_width: tuple[float, float] = (1.7, 2.1)
    agent_length: tuple[float, float] = (4.0, 5.0)
    turn_fraction: float = 0.5
    edge_margin: float = 2.5


def agent_trajectory(agent: Agent, steps: int = HORIZON, dt: float = DT):
    """Discrete rollout: (steps+1, 2) positions and (steps+1,) yaws from t=0.

    Constant-turn agents advance by speed*dt along the heading at the start
    of each interval, then rotate, so every step displacement has magnitude
    exactly speed*dt.
    """
    positions = np.zeros((steps + 1, 2))
    yaws = np.zeros(steps + 1)
    positions[0] = (agent.x, agent.y)
    yaws[0] = agent.yaw
    if isinstance(agent.motion, ConstantVelocity):
        vel = np.array([agent.motion.vx, agent.motion.vy])
        for k in range(steps):
            positions[k + 1] = positions[k] + dt * vel
            yaws[k + 1] = agent.yaw
    else:
        for k in range(steps):
            heading = agent.yaw + agent.motion.yaw_rate * k * dt
            positions[k + 1] = positions[k] + dt * agent.motion.speed * np.array(
                [math.cos(heading), math.sin(heading)]
            )
            yaws[k + 1] = agent.yaw + agent.motion.yaw_rate * (k + 1) * dt
    return positions, yaws


def _arc_points(heading: float, curvature: float, arclens: np.ndarray) -> np.ndarray:
    """Points along a constant-curvature arc through the origin."""
    s = np.asarray(arclens, dtype=np.float64)
    if abs(curvature) < 1e-9:
        return np.stack([s * math.cos(heading), s * math.sin(heading)], axis=-1)
    theta = heading + curvature * s
    x = (np.sin(theta) - math.sin(heading)) / curvature
    y = (math.cos(heading) - np.cos(theta)) / curvature
    return np.stack([x, y], axis=-1)


def _ego_path_rects(ego_plan: np.ndarray):
    """Oriented ego footprints along the plan, yaw from consecutive waypoints."""
    rects = []
    prev = np.zeros(2)
    prev_yaw = 0.0
    for wp in ego_plan:
        seg = wp - prev
        yaw = math.atan2(seg[1], seg[0]) if float(seg @ seg) > 1e-18 else prev_yaw
        rects.append(rect_corners(wp[0], wp[1], EGO_SIZE[0], EGO_SIZE[1], yaw))
        prev, prev_yaw = wp, yaw
    return rects


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Deterministic scene from a seed: lane, scripted ego plan, agents.

    Agents are rejection-sampled (at most 100 attempts each) so that at t=0
    they sit inside the extent and do not overlap each other or the ego, and
    so that their rollout keeps clear of the scripted ego path - scenes have
    a collision-free plan by construction, which keeps the collision metric's
    floor at zero.
    """
    rng = np.random.default_rng(seed)
    half = params.extent / 2.0

    heading = rng.uniform(0.0, 2.0 * math.pi)
    curvature = rng.uniform(-params.curvature_max, params.curvature_max)
    lane_hw = rng.uniform(*params.lane_half_width)
    span = 1.5 * params.extent
    centerline = _arc_points(heading, curvature, np.arange(-span, span + 1e-9, 2.0))
    lane = LaneBand(centerline=centerline, half_width=lane_hw)

    ego_speed = rng.uniform(*params.ego_speed)
    ego_plan = _arc_points(heading, curvature, ego_speed * DT * np.arange(1, HORIZON + 1))
    if abs(ego_plan[0, 0]) >= half or abs(ego_plan[0, 1]) >= half:
        raise ValueError("first ego waypoint fell outside the grid extent")
    ego_rects = _ego_path_rects(ego_plan)
    ego_now = rect_corners(0.0, 0.0, EGO_SIZE[0], EGO_SIZE[1], heading)

    n_agents = int(rng.integers(params.n_agents[0], params.n_agents[1], endpoint=True))
    agents: list[Agent] = []
    placed_rects: list[np.ndarray] = []
    for i in range(n_agents):
        for _attempt in range(100):
            x = rng.uniform(-half + params.edge_margin, half - params.edge_margin)
            y = rng.uniform(-half + params.edge_margin, half - params.edge_margin)
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            width = rng.uniform(*params.agent_width)
            length = rng.uniform(*params.agent_length)
            speed = rng.uniform(*params.speed)
            if rng.uniform() < params.turn_fraction:
                motion = ConstantTurn(speed=speed, yaw_rate=rng.uniform(-params.yaw_rate_max, params.yaw_rate_max))
            else:
                motion = ConstantVelocity(vx=speed * math.cos(yaw), vy=speed * math.sin(yaw))
            candidate = Agent(x=x, y=y, width=width, length=length, yaw=yaw, motion=motion)
            rect_now = rect_corners(x, y, width, length, yaw)
            if rects_intersect(rect_now, ego_now):
                continue
            if any(rects_intersect(rect_now, other) for other in placed_rects):
                continue
            positions, yaws = agent_trajectory(candidate)
            clear = True
            for t in range(1, HORIZON + 1):
                rect_t = rect_corners(positions[t, 0], positions[t, 1], width, length, yaws[t])
                if rects_intersect(rect_t, ego_rects[t - 1]):
                    clear = False
                    break
            if not clear:
                continue
            agents.append(candidate)
            placed_rects.append(rect_now)
            break
        else:
            raise RuntimeError(f"could not place agent {i} after 100 attempts (seed {seed})")

    return Scene(seed=int(seed), agents=tuple(agents), lane=lane, ego_plan=ego_plan)


def rasterize_views(
    scene: Scene,
    rig: CameraRig,
    image_hw: tuple[int, int],
    *,
    agent_gain: float = 6.0,
    lane_intensity: float = 0.15,
) -> np.ndarray:
    """Render (C, H, W) single-channel views by casting pixel rays to the ground.

    Each pixel takes the intensity min(1, agent_gain / distance) of the agent
    footprint its ground point falls in (footprints are disjoint, so nearest
    wins trivially), else the lane level if it falls in the lane band, else 0.
    """
    h, w = image_hw
    images = np.zeros((len(rig.cameras), h, w))
    lane = scene.lane
    has_lane = lane.centerline.size >= 4 and lane.half_width > 0
    for ci, cam in enumerate(rig.cameras):
        us = (np.arange(w) + 0.5 - cam.cx) / cam.fx
        vs = (np.arange(h) + 0.5 - cam.cy) / cam.fy
        uu, vv = np.meshgrid(us, vs)
        dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ cam.rotation.T
        dz = dirs[..., 2]
        hits = dz < -1e-9
        t = np.where(hits, -cam.translation[2] / np.where(hits, dz, -1.0), 0.0)
        ground = cam.translation[None, None, :2] + t[..., None] * dirs[..., :2]
        dist = t * np.linalg.norm(dirs, axis=-1)
        img = np.zeros((h, w))
        if has_lane:
            near_lane = np.zeros((h, w), dtype=bool)
            near_lane[hits] = polyline_distance(ground[hits], lane.centerline) <= lane.half_width
            img[near_lane] = lane_intensity
        for agent in scene.agents:
            inside = hits & points_in_rect(ground, agent.x, agent.y, agent.width, agent.length, agent.yaw)
            intensity = np.minimum(1.0, agent_gain / np.maximum(dist, 1e-6))
            img = np.where(inside, np.maximum(img, intensity), img)
        images[ci] = img
    return images


@dataclass
class Targets:
    """Ground-truth supervision for one scene on one grid."""

    heatmap: np.ndarray  # (1, R, R) center-splat target
    regression: np.ndarray  # (8, R, R), valid at reg_mask cells
    reg_mask: np.ndarray  # (R, R) bool cells carrying regression targets
    agent_states: np.ndarray  # (A, 8) motion-head inputs
    forecast: np.ndarray  # (A, HORIZON, 2) cumulative displacements
    plan: np.ndarray  # (HORIZON, 2)
    region_mask: np.ndarray  # (R, R) bool salient pillars


def make_targets(scene: Scene, grid: GridSpec, horizon: int = HORIZON) -> Targets:
    """Labels: Gaussian center heatmap (sigma = 1 cell), per-center-cell box
    regression, analytic motion rollouts, the scripted plan, and the region
    mask."""
    res = grid.resolution
    heat = np.zeros((1, res, res))
    reg = np.zeros((8, res, res))
    reg_mask = np.zeros((res, res), dtype=bool)
    states = np.zeros((len(scene.agents), 8))
    forecast = np.zeros((len(scene.agents), horizon, 2))

    window = 3  # +-3 sigma with sigma = 1 cell
    for ai, agent in enumerate(scene.agents):
        row_f, col_f = grid.grid_coords(agent.x, agent.y)
        r0, c0 = int(np.floor(row_f)), int(np.floor(col_f))
        if 0 <= r0 < res and 0 <= c0 < res:
            rlo, rhi = max(0, r0 - window), min(res, r0 + window + 1)
            clo, chi = max(0, c0 - window), min(res, c0 + window + 1)
            rr, cc = np.meshgrid(np.arange(rlo, rhi), np.arange(clo, chi), indexing="ij")
            g = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / 2.0)
            heat[0, rlo:rhi, clo:chi] = np.maximum(heat[0, rlo:rhi, clo:chi], g)
            if not reg_mask[r0, c0]:  # earlier agents keep contested center cells
                vx, vy = agent.velocity()
                reg[:, r0, c0] = (
                    col_f - (c0 + 0.5),
                    row_f - (r0 + 0.5),
                    agent.width,
                    agent.length,
                    math.sin(agent.yaw),
                    math.cos(agent.yaw),
                    vx,
                    vy,
                )
                reg_mask[r0, c0] = True
        vx, vy = agent.velocity()
        states[ai] = agent_state(agent.x, agent.y, agent.yaw, vx, vy, agent.width, agent.length)
        positions, _ = agent_trajectory(agent, steps=horizon)
        forecast[ai] = positions[1:] - positions[0]

    region = distill.build_region_mask(
        [(a.x, a.y, a.width, a.length, a.yaw) for a in scene.agents],
        scene.lane.centerline,
        scene.lane.half_width,
        grid,
    )
    return Targets(
        heatmap=heat,
        regression=reg,
        reg_mask=reg_mask,
        agent_states=states,
        forecast=forecast,
        plan=scene.ego_plan.copy(),
        region_mask=region,
    )


@dataclass
class RenderedSample:
    images: np.ndarray  # (C, H, W) in [0, 1]
    targets: Targets


@dataclass
class Dataset:
    scenes: list[Scene]
    samples: list[RenderedSample]
    manifest: list[tuple[int, int]]  # (seed, n_agents) per scene


def scene_seeds(master_seed, count: int) -> np.ndarray:
    """Per-scene integer seeds derived deterministically from one master seed
    (an int or a SeedSequence)."""
    if not isinstance(master_seed, np.random.SeedSequence):
        master_seed = np.random.SeedSequence(master_seed)
    rng = np.random.default_rng(master_seed)
    return rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)


def build_dataset(
    seeds,
    params: SceneParams,
    rig: CameraRig,
    grid: GridSpec,
    image_hw: tuple[int, int],
) -> Dataset:
    scenes, samples, manifest = [], [], []
    for seed in seeds:
        scene = gen_scene(int(seed), params)
        images = rasterize_views(scene, rig, image_hw)
        samples.append(RenderedSample(images=images, targets=make_targets(scene, grid)))
        scenes.append(scene)
        manifest.append((int(seed), len(scene.agents)))
    return Dataset(scenes=scenes, samples=samples, manifest=manifest)


def write_manifest(path, manifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seed, n_agents in manifest:
            f.write(f"{seed},{n_agents}\n")


def read_manifest(path) -> list[tuple[int, int]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                seed_s, n_s = line.split(",")
                out.append((int(seed_s), int(n_s)))
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: bad manifest line {line!r}") from exc
    return out


# ---------------------------------------------------------------------------
# Teacher cache: fixed header, then per-sample float32 records in declared
# order (BEV, heatmap, regression, forecasts with an agent-count prefix,
# plan).  Bit-exact round-trips; malformed files fail with a byte offset.
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"TBEVCACH"
CACHE_VERSION = 1


@dataclass
class CacheEntry:
    bev: np.ndarray  # (ch, R, R) float32
    heatmap: np.ndarray  # (1, R, R) float32
    regression: np.ndarray  # (8, R, R) float32
    forecast: np.ndarray  # (A, horizon, 2) float32
    plan: np.ndarray  # (horizon, 2) float32


@dataclass
class TeacherCache:
    entries: list[CacheEntry]

    def __post_init__(self):
        if not self.entries:
            return
        head = self.entries[0]
        for i, e in enumerate(self.entries):
            if e.bev.shape != head.bev.shape or e.plan.shape != head.plan.shape:
                raise ValueError(f"cache entry {i} dims differ from entry 0")

    @property
    def bev_channels(self) -> int:
        return self.entries[0].bev.shape[0]

    @property
    def resolution(self) -> int:
        return self.entries[0].bev.shape[1]

    @property
    def horizon(self) -> int:
        return self.entries[0].plan.shape[0]


def write_cache(path, cache: TeacherCache) -> None:
    if not cache.entries:
        raise ValueError("refusing to write an empty cache")
    ch, res, horizon = cache.bev_channels, cache.resolution, cache.horizon
    w = ByteWriter()
    w.raw(CACHE_MAGIC)
    w.u32(CACHE_VERSION)
    w.u32(len(cache.entries))
    w.u32(ch)
    w.u32(res)
    w.u32(horizon)
    for i, e in enumerate(cache.entries):
        if e.bev.shape != (ch, res, res) or e.heatmap.shape != (1, res, res):
            raise ValueError(f"cache entry {i} does not match declared dims")
        if e.regression.shape != (8, res, res) or e.plan.shape != (horizon, 2):
            raise ValueError(f"cache entry {i} does not match declared dims")
        if e.forecast.ndim != 3 or e.forecast.shape[1:] != (horizon, 2):
            raise ValueError(f"cache entry {i} forecast shape {e.forecast.shape} is invalid")
        w.f32_array(e.bev)
        w.f32_array(e.heatmap)
        w.f32_array(e.regression)
        w.u32(e.forecast.shape[0])
        w.f32_array(e.forecast)
        w.f32_array(e.plan)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def read_cache(path) -> TeacherCache:
    with open(path, "rb") as f:
        r = ByteReader(f.read())
    r.expect_magic(CACHE_MAGIC)
    version = r.u32("version")
    if version != CACHE_VERSION:
        raise FormatError(r.offset - 4, f"unsupported version {version}")
    count = r.u32("sample count")
    ch = r.u32("bev channels")
    res = r.u32("resolution")
    horizon = r.u32("horizon")
    if count < 1 or ch < 1 or res < 1 or horizon < 1:
        raise FormatError(r.offset, f"bad header dims count={count} ch={ch} res={res} horizon={horizon}")
    entries = []
    for i in range(count):
        bev = r.f32_array(ch * res * res, f"sample {i} bev").reshape(ch, res, res)
        heat = r.f32_array(res * res, f"sample {i} heatmap").reshape(1, res, res)
        reg = r.f32_array(8 * res * res, f"sample {i} regression").reshape(8, res, res)
        n_agents = r.u32(f"sample {i} agent count")
        if n_agents > 10_000:
            raise FormatError(r.offset - 4, f"implausible agent count {n_agents} in sample {i}")
        forecast = r.f32_array(n_agents * horizon * 2, f"sample {i} forecast").reshape(
            n_agents, horizon, 2
        )
        plan = r.f32_array(horizon * 2, f"sample {i} plan").reshape(horizon, 2)
        entries.append(CacheEntry(bev=bev, heatmap=heat, regression=reg, forecast=forecast, plan=plan))
    r.expect_eof()
    return TeacherCache(entries=entries)
