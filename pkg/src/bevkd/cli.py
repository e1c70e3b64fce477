"""Experiment runner: data generation, training, evaluation, reporting.

Every subcommand is deterministic given its config and seed; artifacts land
in the output directory under fixed names so later stages can find them.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics, selftest, synthworld, trainer
from .nets import PerceptionNet, count_params, load_checkpoint, load_into, save_checkpoint

TRAIN_MANIFEST = "train_manifest.txt"
EVAL_MANIFEST = "eval_manifest.txt"
TEACHER_CKPT = "teacher.ckpt"
TEACHER_CACHE = "teacher_cache.bin"
ABLATION_CSV = "ablation.csv"
VARIANTS = ("s0", "s1", "s2", "s3")


class CliError(Exception):
    pass


def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing required artifact: {path}")
    return path


def _load_config(args) -> cfgmod.RunConfig:
    data = {}
    if args.config:
        with open(_require(Path(args.config)), encoding="utf-8") as f:
            import yaml

            data = yaml.safe_load(f) or {}
    data = cfgmod.apply_overrides(data, args.override or [])
    cfg = cfgmod.config_from_dict(data)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _dataset_seeds(cfg: cfgmod.RunConfig, split: str) -> np.ndarray:
    key, count = {"train": (10, cfg.data.train_scenes), "eval": (11, cfg.data.eval_scenes)}[split]
    return synthworld.scene_seeds(np.random.SeedSequence(cfg.seed, spawn_key=(key,)), count)


def _build_split(cfg: cfgmod.RunConfig, seeds) -> synthworld.Dataset:
    setup = cfgmod.experiment_setup(cfg)
    return synthworld.build_dataset(
        seeds, cfgmod.scene_params(cfg), setup.rig, setup.grid, setup.image_hw
    )


def _load_split(cfg: cfgmod.RunConfig, out: Path, manifest_name: str) -> synthworld.Dataset:
    manifest = synthworld.read_manifest(_require(out / manifest_name))
    dataset = _build_split(cfg, [seed for seed, _ in manifest])
    for i, ((seed, n_agents), built) in enumerate(zip(manifest, dataset.manifest)):
        if built != (seed, n_agents):
            raise CliError(
                f"{manifest_name} line {i + 1} ({seed},{n_agents}) does not match regenerated "
                f"scene {built}; config drifted since gen-data"
            )
    return dataset


def _net_from_checkpoint(cfg: cfgmod.RunConfig, role: str, path: Path) -> PerceptionNet:
    setup = cfgmod.experiment_setup(cfg)
    spec = setup.student_spec if role == "student" else setup.teacher_spec
    net = PerceptionNet(spec, setup.rig, setup.grid, setup.bins, setup.image_hw, horizon=setup.horizon)
    load_into(net, load_checkpoint(_require(path)))
    return net


def cmd_gen_data(cfg, args, out: Path) -> int:
    for split, name in (("train", TRAIN_MANIFEST), ("eval", EVAL_MANIFEST)):
        dataset = _build_split(cfg, _dataset_seeds(cfg, split))
        synthworld.write_manifest(out / name, dataset.manifest)
        print(f"wrote {out / name} ({len(dataset.manifest)} scenes)")
    return 0


def cmd_teacher_train(cfg, args, out: Path) -> int:
    setup = cfgmod.experiment_setup(cfg)
    train_ds = _load_split(cfg, out, TRAIN_MANIFEST)
    eval_ds = _load_split(cfg, out, EVAL_MANIFEST)
    net, history = trainer.train_teacher(
        setup,
        train_ds,
        eval_ds,
        epochs=cfg.train.teacher_epochs,
        seed=cfg.seed,
        batch_size=cfg.train.batch_size,
        base_lr=cfg.train.base_lr,
        weight_decay=cfg.train.weight_decay,
    )
    save_checkpoint(out / TEACHER_CKPT, net)
    (out / "teacher_history.csv").write_text(history.to_csv(), encoding="utf-8")
    cache = trainer.build_teacher_cache(net, train_ds, setup)
    synthworld.write_cache(out / TEACHER_CACHE, cache)
    final = history.epoch_evals[-1]
    print(f"wrote {out / TEACHER_CKPT} ({count_params(net)} params)")
    print(f"wrote {out / TEACHER_CACHE} ({len(cache.entries)} samples)")
    print(f"teacher eval: map={final.map:.4f} min_ade={final.min_ade:.3f} "
          f"l2@3s={final.l2_at_3s:.3f} collision={final.collision_rate:.3f}")
    return 0


def cmd_cache(cfg, args, out: Path) -> int:
    setup = cfgmod.experiment_setup(cfg)
    train_ds = _load_split(cfg, out, TRAIN_MANIFEST)
    net = _net_from_checkpoint(cfg, "teacher", out / TEACHER_CKPT)
    cache = trainer.build_teacher_cache(net, train_ds, setup)
    synthworld.write_cache(out / TEACHER_CACHE, cache)
    print(f"wrote {out / TEACHER_CACHE} ({len(cache.entries)} samples)")
    return 0


def _variant_config(cfg: cfgmod.RunConfig, variant: str, epochs: int | None) -> trainer.VariantConfig:
    return trainer.VariantConfig(
        variant=variant,
        weights=cfgmod.loss_weights(cfg),
        epochs=epochs if epochs is not None else cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        seed=cfg.seed,
        base_lr=cfg.train.base_lr,
        weight_decay=cfg.train.weight_decay,
        floor_lr=cfg.train.floor_lr,
    )


def _train_one(cfg, out: Path, variant: str, epochs, train_ds, eval_ds):
    setup = cfgmod.experiment_setup(cfg)
    cache = None
    if variant != "s0":
        cache = synthworld.read_cache(_require(out / TEACHER_CACHE))
    vcfg = _variant_config(cfg, variant, epochs)
    net, history = trainer.train_variant(vcfg, setup, train_ds, eval_ds, cache)
    save_checkpoint(out / f"{variant}.ckpt", net)
    (out / f"{variant}_history.csv").write_text(history.to_csv(), encoding="utf-8")
    return net, history


def cmd_train(cfg, args, out: Path) -> int:
    train_ds = _load_split(cfg, out, TRAIN_MANIFEST)
    eval_ds = _load_split(cfg, out, EVAL_MANIFEST)
    net, history = _train_one(cfg, out, args.variant, args.epochs, train_ds, eval_ds)
    final = history.epoch_evals[-1]
    print(f"wrote {out / (args.variant + '.ckpt')}")
    print(f"{args.variant} eval: map={final.map:.4f} min_ade={final.min_ade:.3f} "
          f"l2@3s={final.l2_at_3s:.3f} collision={final.collision_rate:.3f}")
    return 0


def cmd_eval(cfg, args, out: Path) -> int:
    setup = cfgmod.experiment_setup(cfg)
    eval_ds = _load_split(cfg, out, EVAL_MANIFEST)
    net = _net_from_checkpoint(cfg, "student", out / f"{args.variant}.ckpt")
    result = trainer.evaluate(
        net, eval_ds, decode_threshold=setup.decode_threshold, decode_max=setup.decode_max
    )
    path = out / f"{args.variant}_eval.csv"
    path.write_text(metrics.results_to_csv([(args.variant, result)]), encoding="utf-8")
    print(f"wrote {path}")
    print(f"{args.variant}: map={result.map:.4f} min_ade={result.min_ade:.3f} "
          f"l2@3s={result.l2_at_3s:.3f} collision={result.collision_rate:.3f}")
    return 0


def cmd_ablate(cfg, args, out: Path) -> int:
    setup = cfgmod.experiment_setup(cfg)
    train_ds = _load_split(cfg, out, TRAIN_MANIFEST)
    eval_ds = _load_split(cfg, out, EVAL_MANIFEST)
    if not (out / TEACHER_CACHE).exists():
        raise CliError(f"missing required artifact: {out / TEACHER_CACHE}")
    results = []
    for variant in VARIANTS:
        net, history = _train_one(cfg, out, variant, args.epochs, train_ds, eval_ds)
        result = trainer.evaluate(
            net, eval_ds, decode_threshold=setup.decode_threshold, decode_max=setup.decode_max
        )
        (out / f"{variant}_eval.csv").write_text(
            metrics.results_to_csv([(variant, result)]), encoding="utf-8"
        )
        results.append((variant, result))
        print(f"{variant}: map={result.map:.4f} min_ade={result.min_ade:.3f} "
              f"l2@3s={result.l2_at_3s:.3f} collision={result.collision_rate:.3f}")
    report = metrics.build_report(results)
    (out / ABLATION_CSV).write_text(metrics.report_to_csv(report), encoding="utf-8")
    print(f"wrote {out / ABLATION_CSV}")
    return 0


def cmd_report(cfg, args, out: Path) -> int:
    text = _require(Path(args.results)).read_text(encoding="utf-8")
    report = metrics.build_report(metrics.results_from_csv(text))
    path = out / "report.csv"
    path.write_text(metrics.report_to_csv(report), encoding="utf-8")
    for row in report.rows:
        print(
            f"{row.variant}: map {row.rel_map:+.1f}% min_ade {row.rel_min_ade:+.1f}% "
            f"l2@3s {row.rel_l2:+.1f}% collision {row.rel_collision:+.1f}%"
        )
    print(f"wrote {path}")
    return 0


def cmd_selftest(cfg, args, out: Path) -> int:
    results = selftest.run_selftest(quick=args.quick)
    failed = 0
    for res in results:
        mark = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        print(f"{mark}  {res.name} ({res.seconds:.1f}s): {res.detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(cfg, args, out: Path) -> int:
    setup = cfgmod.experiment_setup(cfg)
    sample_ds = _build_split(cfg, synthworld.scene_seeds(cfg.seed, 1))
    images = sample_ds.samples[0].images[:, None]
    rows = []
    nets = {}
    for role, spec in (("student", setup.student_spec), ("teacher", setup.teacher_spec)):
        net = PerceptionNet(spec, setup.rig, setup.grid, setup.bins, setup.image_hw, seed=cfg.seed)
        nets[role] = net
        for _ in range(3):  # warm the BLAS paths before timing
            net.forward_bev(images)
        t0 = time.perf_counter()
        for _ in range(args.runs):
            bev = net.forward_bev(images)
            net.detect(bev)
            net.plan(bev)
        mean_ms = (time.perf_counter() - t0) / args.runs * 1e3
        rows.append((role, count_params(net), mean_ms))
        print(f"{role}: {count_params(net)} params, {mean_ms:.2f} ms/forward over {args.runs} runs")
    ratio = rows[0][1] / rows[1][1]
    print(f"student/teacher parameter ratio: {ratio:.4f}")
    path = out / "bench.csv"
    lines = ["role,params,mean_forward_ms"] + [f"{r},{p},{m!r}" for r, p, m in rows]
    lines.append(f"ratio,{ratio!r},")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevkd", description="Camera-to-BEV distillation experiments at desk scale."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default="runs", help="artifact directory")
        p.add_argument(
            "--override", action="append", metavar="KEY=VALUE", help="dotted config override"
        )

    for name, fn, extra in (
        ("gen-data", cmd_gen_data, None),
        ("teacher-train", cmd_teacher_train, None),
        ("cache", cmd_cache, None),
        ("train", cmd_train, "variant"),
        ("eval", cmd_eval, "variant_only"),
        ("ablate", cmd_ablate, "epochs_only"),
        ("report", cmd_report, "results"),
        ("selftest", cmd_selftest, "quick"),
        ("bench", cmd_bench, "runs"),
    ):
        p = sub.add_parser(name)
        common(p)
        if extra == "variant":
            p.add_argument("--variant", choices=VARIANTS, required=True)
            p.add_argument("--epochs", type=int, default=None)
        elif extra == "variant_only":
            p.add_argument("--variant", choices=VARIANTS, required=True)
        elif extra == "epochs_only":
            p.add_argument("--epochs", type=int, default=None)
        elif extra == "results":
            p.add_argument("--results", required=True, help="CSV with raw metric rows")
        elif extra == "quick":
            p.add_argument("--quick", action="store_true", help="fewer oracle seeds")
        elif extra == "runs":
            p.add_argument("--runs", type=int, default=100)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return args.fn(cfg, args, out)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
