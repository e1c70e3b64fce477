"""Ground-truth loss, AdamW, the cosine schedule, and end-to-end variant runs.

The optimization loop is single-threaded and deterministic: samples are
consumed in a seeded per-epoch permutation, per-sample gradients accumulate
in a fixed order, and two runs with the same configuration and seed produce
bit-identical parameters.  Teacher supervision comes exclusively from a
precomputed cache; teacher parameters are never loaded during student runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import distill, metrics
from .diffcore import NonFiniteError, ShapeError
from .distill import LossBreakdown, LossWeights, masked_weights, total_loss
from .geometry import BevGrid, CameraRig, DepthBins, GridSpec
from .nets import (
    AgentBox,
    DetectionMaps,
    NetworkSpec,
    PerceptionNet,
    decode_detections,
)
from .synthworld import CacheEntry, Dataset, TeacherCache


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_optim(parameters) -> OptimState:
    params = list(parameters)
    return OptimState(
        m={p.name: np.zeros_like(p.value) for p in params},
        v={p.name: np.zeros_like(p.value) for p in params},
    )


def adamw_step(
    parameters,
    state: OptimState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> None:
    """One decoupled-weight-decay Adam update with bias-corrected moments."""
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p in parameters:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {p.name}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value -= lr * update + lr * weight_decay * p.value


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need 0 <= warmup < total, got warmup={self.warmup_steps}, total={self.total_steps}"
            )


def lr_at(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup to the base rate, then cosine decay to the floor."""
    if step < 0 or step > spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    if step < spec.warmup_steps:
        return spec.base_lr * step / spec.warmup_steps
    progress = (step - spec.warmup_steps) / (spec.total_steps - spec.warmup_steps)
    return spec.floor_lr + 0.5 * (spec.base_lr - spec.floor_lr) * (1.0 + math.cos(math.pi * progress))


def make_schedule(base_lr: float, epochs: int, steps_per_epoch: int, floor_lr: float = 0.0) -> ScheduleSpec:
    """One-epoch linear warmup, cosine to the floor over the remaining steps."""
    total = epochs * steps_per_epoch
    warmup = steps_per_epoch if steps_per_epoch < total else max(0, total - 1)
    return ScheduleSpec(base_lr=base_lr, warmup_steps=warmup, total_steps=total, floor_lr=floor_lr)


# ---------------------------------------------------------------------------
# Ground-truth supervision
# ---------------------------------------------------------------------------


@dataclass
class HeadOutputs:
    """Student head outputs packaged for the supervised loss."""

    heat_logits: np.ndarray  # (1, R, R)
    heatmap: np.ndarray  # (1, R, R)
    regression: np.ndarray  # (8, R, R)
    forecast: np.ndarray  # (A, T, 2) over the ground-truth agent set
    plan: np.ndarray  # (T, 2)


def gt_loss_terms(outputs: HeadOutputs, targets) -> dict[str, float]:
    """Supervision terms: heatmap BCE, center-cell L1, forecast and plan MSE.

    Agent-dependent terms are vacuous (0) when the scene has no agents.
    """
    z = np.asarray(outputs.heat_logits, dtype=np.float64)
    y = np.asarray(targets.heatmap, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError("gt_loss", f"heatmap logits {z.shape} vs target {y.shape}")
    bce = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))

    reg = np.asarray(outputs.regression, dtype=np.float64)
    if reg.shape != targets.regression.shape:
        raise ShapeError("gt_loss", f"regression {reg.shape} vs target {targets.regression.shape}")
    n_fg = int(targets.reg_mask.sum())
    l1 = float(np.sum(np.abs(reg - targets.regression)[:, targets.reg_mask]) / n_fg) if n_fg else 0.0

    f = np.asarray(outputs.forecast, dtype=np.float64)
    if f.shape != targets.forecast.shape:
        raise ShapeError("gt_loss", f"forecast {f.shape} vs target {targets.forecast.shape}")
    mse_f = float(np.mean((f - targets.forecast) ** 2)) if f.size else 0.0

    p = np.asarray(outputs.plan, dtype=np.float64)
    if p.shape != targets.plan.shape:
        raise ShapeError("gt_loss", f"plan {p.shape} vs target {targets.plan.shape}")
    mse_p = float(np.mean((p - targets.plan) ** 2))
    return {"heatmap_bce": bce, "regression_l1": l1, "forecast_mse": mse_f, "plan_mse": mse_p}


def gt_loss(outputs: HeadOutputs, targets) -> float:
    """Unit-weight sum of the supervision terms."""
    return float(sum(gt_loss_terms(outputs, targets).values()))


# ---------------------------------------------------------------------------
# Experiment plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSetup:
    """Geometry and architecture shared by teacher and student runs."""

    rig: CameraRig
    grid: GridSpec
    bins: DepthBins
    image_hw: tuple[int, int]
    student_spec: NetworkSpec
    teacher_spec: NetworkSpec
    horizon: int = 6
    decode_threshold: float = 0.25
    decode_max: int = 10


@dataclass(frozen=True)
class VariantConfig:
    """One trainable unit: a variant name plus its optimization recipe."""

    variant: str
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 20
    batch_size: int = 4
    seed: int = 7
    base_lr: float = 2e-4
    weight_decay: float = 1e-2
    floor_lr: float = 0.0
    schedule: ScheduleSpec | None = None
    manifest_path: str = ""
    cache_path: str | None = None

    def __post_init__(self):
        if self.variant not in distill.VARIANTS:
            raise ValueError(f"variant must be one of {distill.VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")


@dataclass
class StepRecord:
    step: int
    lr: float
    losses: LossBreakdown


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_evals: list[metrics.EvalResult] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,lr,l_gt,l_feat,l_det,l_bbox,l_mot,l_plan,l_adapt,total"]
        for rec in self.steps:
            b = rec.losses
            lines.append(
                ",".join(
                    [str(rec.step), repr(rec.lr)]
                    + [repr(v) for v in (b.gt, b.feat, b.det, b.bbox, b.mot, b.plan, b.adapt, b.total)]
                )
            )
        return "\n".join(lines) + "\n"


def _child_seed(seed: int, key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(key,))


@dataclass
class _TeacherSample:
    """One cache entry unpacked for training: arrays in float64 plus the
    decoded agent set the motion and box alignment terms run over."""

    bev: np.ndarray
    heatmap: np.ndarray
    regression: np.ndarray
    forecast: np.ndarray
    plan: np.ndarray
    states: np.ndarray  # (A, 8) decoded agent states
    fg_mask: np.ndarray  # (R, R) decoded center cells


def _prepare_teacher(cache: TeacherCache, grid: GridSpec, threshold: float, max_det: int):
    prepared = []
    for entry in cache.entries:
        maps = DetectionMaps(
            heatmap=np.clip(entry.heatmap.astype(np.float64), 0.0, 1.0),
            regression=entry.regression.astype(np.float64),
        )
        boxes = decode_detections(maps, grid, threshold, max_det)
        fg = np.zeros((grid.resolution, grid.resolution), dtype=bool)
        for box in boxes:
            cell = grid.cell_of(box.x, box.y)
            if cell is not None:
                fg[cell] = True
        states = (
            np.stack([box.state() for box in boxes]) if boxes else np.zeros((0, 8))
        )
        forecast = entry.forecast.astype(np.float64)
        if forecast.shape[0] != states.shape[0]:
            raise ValueError(
                f"cache forecast covers {forecast.shape[0]} agents but decoding found {states.shape[0]};"
                " cache was built with different decode settings"
            )
        prepared.append(
            _TeacherSample(
                bev=entry.bev.astype(np.float64),
                heatmap=maps.heatmap,
                regression=maps.regression,
                forecast=forecast,
                plan=entry.plan.astype(np.float64),
                states=states,
                fg_mask=fg,
            )
        )
    return prepared


def validate_cache(cache: TeacherCache, dataset: Dataset, setup: ExperimentSetup, out_channels: int) -> None:
    if len(cache.entries) != len(dataset.samples):
        raise ValueError(
            f"cache holds {len(cache.entries)} samples but dataset has {len(dataset.samples)}"
        )
    if cache.resolution != setup.grid.resolution:
        raise ValueError(f"cache resolution {cache.resolution} != grid {setup.grid.resolution}")
    if cache.bev_channels != out_channels:
        raise ValueError(f"cache BEV channels {cache.bev_channels} != student {out_channels}")
    if cache.horizon != setup.horizon:
        raise ValueError(f"cache horizon {cache.horizon} != configured {setup.horizon}")


_COMPONENTS = ("gt", "feat", "det", "bbox", "mot", "plan", "adapt")


class DistillGraph:
    """One sample's combined objective as a diffcore-compatible network.

    ``loss_forward(sample, selector)`` runs the student end to end against
    its targets (and the teacher cache entry when one is bound) and returns
    either one raw component ("gt", "feat", "det", "bbox", "mot", "plan",
    "adapt") or the variant-masked weighted "total".  ``loss_backward()``
    then accumulates parameter gradients scaled by ``grad_scale`` (the batch
    averaging factor).  The motion head runs over two agent sets per pass,
    so its forwards are recomputed during backward to refresh layer caches.
    """

    def __init__(
        self,
        net: PerceptionNet,
        teacher: _TeacherSample | None = None,
        weights: LossWeights | None = None,
        variant: str = "s3",
        grad_scale: float = 1.0,
    ):
        self.net = net
        self.teacher = teacher
        self.weights = weights if weights is not None else LossWeights()
        self.variant = variant
        self.masked = masked_weights(self.weights, variant)
        self.grad_scale = grad_scale
        self._state = None

    def parameters(self):
        return self.net.parameters()

    def intermediates(self):
        yield from self.net.intermediates()

    def _active(self, selector: str) -> dict[str, float]:
        """Backward weight per component under a selector."""
        mw = self.masked
        if selector == "total":
            weights = {
                "gt": 1.0, "feat": mw.feat, "det": mw.det, "bbox": mw.det,
                "mot": mw.mot, "plan": mw.plan, "adapt": mw.adapt,
            }
        elif selector in _COMPONENTS:
            weights = {k: (1.0 if k == selector else 0.0) for k in _COMPONENTS}
        else:
            raise ValueError(f"unknown loss selector {selector!r}")
        if self.teacher is None:
            for k in ("feat", "det", "bbox", "mot", "plan", "adapt"):
                weights[k] = 0.0
        return weights

    def loss_forward(self, sample, selector: str = "total") -> float:
        coeff = self._active(selector)
        net, teacher = self.net, self.teacher
        t = sample.targets
        bev = net.forward_bev(sample.images[:, None])
        maps = net.detect(bev)
        forecast_gt = net.forecast(t.agent_states, bev)
        plan = net.plan(bev)

        comps = dict.fromkeys(_COMPONENTS, 0.0)
        outputs = HeadOutputs(
            heat_logits=net.det_head.heat_logits, heatmap=maps.heatmap,
            regression=maps.regression, forecast=forecast_gt, plan=plan,
        )
        comps["gt"] = gt_loss(outputs, t)
        forecast_kd = None
        if teacher is not None:
            if coeff["det"] or coeff["bbox"]:
                comps["det"] = distill.det_kd(maps.heatmap, teacher.heatmap)
                comps["bbox"] = distill.bbox_kd(maps.regression, teacher.regression, teacher.fg_mask)
            if coeff["mot"] and teacher.states.shape[0] > 0:
                forecast_kd = net.forecast(teacher.states, bev)
                comps["mot"] = distill.mot_kd(forecast_kd, teacher.forecast)
            if coeff["plan"]:
                comps["plan"] = distill.plan_kd(plan, teacher.plan)
            if coeff["feat"]:
                comps["feat"] = distill.feat_kd(bev.data, teacher.bev)
            if coeff["adapt"]:
                comps["adapt"] = distill.adaptive_kd(bev.data, teacher.bev, t.region_mask)
        self._state = (sample, coeff, bev, maps, forecast_gt, forecast_kd is not None, plan, comps)
        if selector == "total":
            return self.breakdown().total
        return comps[selector]

    def components(self) -> dict[str, float]:
        return dict(self._state[7])

    def breakdown(self) -> LossBreakdown:
        comps = self.components()
        return total_loss(
            comps.pop("gt"), **comps, weights=self.weights, variant=self.variant
        )

    def loss_backward(self) -> None:
        sample, coeff, bev, maps, forecast_gt, had_kd_forecast, plan, _ = self._state
        net, teacher = self.net, self.teacher
        t = sample.targets
        scale = self.grad_scale
        gbev = np.zeros_like(bev.data)

        # Detection head: supervised BCE/L1 plus teacher alignment, one backward.
        z = net.det_head.heat_logits
        gz = coeff["gt"] * (maps.heatmap - t.heatmap) / z.size * scale
        greg = np.zeros_like(maps.regression)
        n_fg = int(t.reg_mask.sum())
        if coeff["gt"] and n_fg:
            greg[:, t.reg_mask] = (
                coeff["gt"] * np.sign(maps.regression - t.regression)[:, t.reg_mask] / n_fg * scale
            )
        gheat = np.zeros_like(maps.heatmap)
        if teacher is not None and coeff["det"]:
            gheat = distill.det_kd_grad(maps.heatmap, teacher.heatmap) * (coeff["det"] * scale)
        if teacher is not None and coeff["bbox"]:
            greg += distill.bbox_kd_grad(maps.regression, teacher.regression, teacher.fg_mask) * (
                coeff["bbox"] * scale
            )
        gbev += net.det_head.backward(gheat, greg, gheat_logits=gz)

        # Motion head, recomputed per agent set so each backward sees its cache.
        if coeff["gt"] and forecast_gt.size:
            net.forecast(t.agent_states, bev)
            gf = coeff["gt"] * 2.0 * (forecast_gt - t.forecast) / forecast_gt.size * scale
            _, gb = net.motion_head.backward(gf)
            gbev += gb
        if teacher is not None and coeff["mot"] and had_kd_forecast:
            forecast_kd = net.forecast(teacher.states, bev)
            _, gb = net.motion_head.backward(
                distill.mot_kd_grad(forecast_kd, teacher.forecast) * (coeff["mot"] * scale)
            )
            gbev += gb

        # Plan head: supervised MSE plus teacher alignment, one backward.
        gp = coeff["gt"] * 2.0 * (plan - t.plan) / plan.size * scale
        if teacher is not None and coeff["plan"]:
            gp += distill.plan_kd_grad(plan, teacher.plan) * (coeff["plan"] * scale)
        gbev += net.plan_head.backward(gp)

        # Feature-level alignment straight on the BEV.
        if teacher is not None and coeff["feat"]:
            gbev += distill.feat_kd_grad(bev.data, teacher.bev) * (coeff["feat"] * scale)
        if teacher is not None and coeff["adapt"]:
            gbev += distill.adaptive_kd_grad(bev.data, teacher.bev, t.region_mask) * (
                coeff["adapt"] * scale
            )

        net.backward_bev(gbev)


def evaluate(net: PerceptionNet, dataset: Dataset, *, decode_threshold: float = 0.25, decode_max: int = 10) -> metrics.EvalResult:
    """Run the net over a dataset and score all four metrics.

    Forecasts are evaluated on ground-truth agent states (the standard
    forecasting protocol), detection on decoded boxes, planning on the plan
    head output against the scripted ego trajectory and agent rollouts.
    """
    preds, gts, ades, l2s, plans = [], [], [], [], []
    for scene, sample in zip(dataset.scenes, dataset.samples):
        bev = net.forward_bev(sample.images[:, None])
        maps = net.detect(bev)
        preds.append(decode_detections(maps, net.grid, decode_threshold, decode_max))
        gt_boxes = []
        for a in scene.agents:
            vx, vy = a.velocity()
            gt_boxes.append(
                AgentBox(x=a.x, y=a.y, width=a.width, length=a.length, yaw=a.yaw, vx=vx, vy=vy, score=1.0)
            )
        gts.append(gt_boxes)
        t = sample.targets
        if t.agent_states.shape[0] > 0:
            forecast = net.forecast(t.agent_states, bev)
            for ai in range(forecast.shape[0]):
                ades.append(metrics.min_ade(forecast[ai], t.forecast[ai]))
        plan = net.plan(bev)
        plans.append(plan)
        l2s.append(metrics.l2_at_horizon(plan, t.plan))
    return metrics.EvalResult(
        map=metrics.map_score(preds, gts),
        min_ade=float(np.mean(ades)) if ades else 0.0,
        l2_at_3s=float(np.mean(l2s)),
        collision_rate=metrics.collision_rate(plans, dataset.scenes),
        n_scenes=len(dataset.scenes),
    )


def _run_training(
    net: PerceptionNet,
    variant: str,
    cfg: VariantConfig,
    dataset: Dataset,
    teacher_data,
    eval_dataset: Dataset | None,
    setup: ExperimentSetup,
) -> TrainHistory:
    n = len(dataset.samples)
    if n == 0:
        raise ValueError("dataset is empty")
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    schedule = cfg.schedule or make_schedule(cfg.base_lr, cfg.epochs, steps_per_epoch, cfg.floor_lr)
    state = init_optim(net.parameters())
    rng = np.random.default_rng(_child_seed(cfg.seed, 1))
    history = TrainHistory()
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            step += 1
            lr = lr_at(step, schedule)
            net.zero_grad()
            sums = dict.fromkeys(_COMPONENTS, 0.0)
            for idx in batch:
                graph = DistillGraph(
                    net,
                    teacher=teacher_data[idx] if teacher_data is not None else None,
                    weights=cfg.weights,
                    variant=variant,
                    grad_scale=1.0 / len(batch),
                )
                graph.loss_forward(dataset.samples[idx], "total")
                graph.loss_backward()
                for k, val in graph.components().items():
                    sums[k] += val
            means = {k: val / len(batch) for k, val in sums.items()}
            breakdown = total_loss(means.pop("gt"), **means, weights=cfg.weights, variant=variant)
            if not math.isfinite(breakdown.total):
                where = "loss"
                for name, arr in net.intermediates():
                    if not np.all(np.isfinite(arr)):
                        where = name
                        break
                raise NonFiniteError(f"step {step}: {where}")
            try:
                adamw_step(net.parameters(), state, lr, weight_decay=cfg.weight_decay)
            except NonFiniteError as exc:
                raise NonFiniteError(f"step {step}: {exc.where}") from exc
            history.steps.append(StepRecord(step=step, lr=lr, losses=breakdown))
        if eval_dataset is not None:
            history.epoch_evals.append(
                evaluate(net, eval_dataset, decode_threshold=setup.decode_threshold, decode_max=setup.decode_max)
            )
    return history


def train_variant(
    cfg: VariantConfig,
    setup: ExperimentSetup,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    cache: TeacherCache | None = None,
) -> tuple[PerceptionNet, TrainHistory]:
    """Train one student variant; s1-s3 require a dimensionally consistent cache."""
    teacher_data = None
    if cfg.variant != "s0":
        if cache is None:
            raise ValueError(f"variant {cfg.variant} requires a teacher cache")
        validate_cache(cache, dataset, setup, setup.student_spec.out_bev_channels)
        teacher_data = _prepare_teacher(cache, setup.grid, setup.decode_threshold, setup.decode_max)
    net = PerceptionNet(
        setup.student_spec,
        setup.rig,
        setup.grid,
        setup.bins,
        setup.image_hw,
        horizon=setup.horizon,
        seed=_child_seed(cfg.seed, 0),
    )
    history = _run_training(net, cfg.variant, cfg, dataset, teacher_data, eval_dataset, setup)
    return net, history


def train_teacher(
    setup: ExperimentSetup,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    *,
    epochs: int = 20,
    seed: int = 7,
    batch_size: int = 4,
    base_lr: float = 2e-4,
    weight_decay: float = 1e-2,
) -> tuple[PerceptionNet, TrainHistory]:
    """Train the teacher on ground truth alone (no distillation source above it)."""
    cfg = VariantConfig(
        variant="s0",
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        base_lr=base_lr,
        weight_decay=weight_decay,
    )
    net = PerceptionNet(
        setup.teacher_spec,
        setup.rig,
        setup.grid,
        setup.bins,
        setup.image_hw,
        horizon=setup.horizon,
        seed=_child_seed(seed, 2),
    )
    history = _run_training(net, "s0", cfg, dataset, None, eval_dataset, setup)
    return net, history


def build_teacher_cache(net: PerceptionNet, dataset: Dataset, setup: ExperimentSetup) -> TeacherCache:
    """Freeze the teacher's outputs over a dataset into cache entries.

    Detection maps are rounded to float32 first and agents are decoded from
    the rounded maps, so a training run decoding the cache recovers exactly
    the agent set the cached forecasts were computed on.
    """
    entries = []
    for sample in dataset.samples:
        bev = net.forward_bev(sample.images[:, None])
        maps = net.detect(bev)
        heat32 = np.clip(maps.heatmap, 0.0, 1.0).astype(np.float32)
        reg32 = maps.regression.astype(np.float32)
        rounded = DetectionMaps(
            heatmap=np.clip(heat32.astype(np.float64), 0.0, 1.0),
            regression=reg32.astype(np.float64),
        )
        boxes = decode_detections(rounded, setup.grid, setup.decode_threshold, setup.decode_max)
        states = np.stack([b.state() for b in boxes]) if boxes else np.zeros((0, 8))
        forecast = net.forecast(states, bev)
        plan = net.plan(bev)
        entries.append(
            CacheEntry(
                bev=bev.data.astype(np.float32),
                heatmap=heat32,
                regression=reg32,
                forecast=forecast.astype(np.float32),
                plan=plan.astype(np.float32),
            )
        )
    return TeacherCache(entries=entries)
