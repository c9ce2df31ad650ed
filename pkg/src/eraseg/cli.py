"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness flows
from the --seed of the invoked command (or the seed inside the config file).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cst as cst_mod
from . import io as eio
from . import net, phantom, pipeline, proto
from .era import EraConfig, apply_era
from .grid import ClassMask, Image2D, evaluate
from .seeding import stream_rng


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _load_run_config(path: str) -> pipeline.RunConfig:
    return pipeline.RunConfig.from_dict(eio.read_json(path))


def cmd_phantom(args: argparse.Namespace) -> int:
    cfg = phantom.PhantomConfig(
        height=args.size, width=args.size, contrast_mode=args.contrast
    )
    manifest = phantom.generate_dataset(
        cfg,
        count=args.count,
        labeled_fraction=args.labeled_fraction,
        seed=args.seed,
        out_dir=args.out,
        test_count=args.test_count,
    )
    labeled = sum(1 for e in manifest.entries if e.labeled)
    print(f"wrote {len(manifest.entries)} slices ({labeled} labeled) to {args.out}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    image_arr = eio.read_tensor(args.image)
    mask_arr = eio.read_tensor(args.mask)
    classes = {int(c) for c in args.classes.split(",") if c.strip()}
    num_classes = args.num_classes or int(mask_arr.max()) + 1
    image = Image2D(image_arr.astype(np.float32))
    mask = ClassMask(mask_arr, num_classes)
    rng = stream_rng(args.seed, "augment-cli")
    out_img, out_mask, plan = apply_era(image, mask, classes, EraConfig(), rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eio.write_tensor(out / "image.tns", out_img.data)
    eio.write_tensor(out / "mask.tns", out_mask.data)
    sidecar = {"seed": args.seed, "noop": plan is None}
    if plan is not None:
        sidecar["plan"] = plan.to_dict()
    eio.write_json(out / "plan.json", sidecar)
    print("no-op (inputs passed through)" if plan is None else f"augmented -> {out}")
    return 0


def _stage_dir(cfg: pipeline.RunConfig, stage: str) -> Path:
    if cfg.out_dir is None:
        raise ValueError("config needs out_dir for staged training")
    return Path(cfg.out_dir) / stage


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    data = pipeline.load_items(cfg)
    train_cfg = cfg.train_cfg()
    mc = cfg.model
    stage = args.stage
    out = _stage_dir(cfg, stage)
    out.mkdir(parents=True, exist_ok=True)

    if stage == "u1":
        model = net.train_mean_teacher(
            data.labeled,
            data.unlabeled,
            (cfg.seed, "u1"),
            train_cfg,
            mc.num_classes,
            use_era=cfg.era.enabled_u1,
            use_proto=cfg.proto.enabled,
            checkpoint_count=cfg.cst.checkpoint_count,
            hidden_channels=mc.hidden_channels,
            feature_depth=mc.feature_depth,
        )
        for j, (params, epoch) in enumerate(zip(model.checkpoints, model.checkpoint_epochs), 1):
            net.save_checkpoint(
                out / f"ckpt_{j:02d}",
                params,
                {"stage": "u1", "epoch": epoch, "seed": cfg.seed, "config_hash": cfg.hash()},
            )
        trained = model
    else:
        u1_dir = _stage_dir(cfg, "u1")
        ckpt_dirs = sorted(u1_dir.glob("ckpt_*"))
        if len(ckpt_dirs) < 2:
            raise RuntimeError(f"stage {stage} needs u1 checkpoints under {u1_dir}")
        checkpoints = [net.load_checkpoint(d)[0] for d in ckpt_dirs]
        records = cst_mod.score_unlabeled(checkpoints, data.unlabeled, cfg.cst.threshold)
        reliable_ids, unreliable_ids = cst_mod.partition(records, cfg.cst.threshold)
        by_id = {i.item_id: i for i in data.unlabeled}
        stage1_extra = cst_mod.pseudo_items(
            checkpoints[-1], [by_id[i] for i in reliable_ids], "u1_final"
        )
        eio.write_json(
            Path(cfg.out_dir) / "reliability.json", [r.to_dict() for r in records]
        )
        if stage == "u3":
            trained = net.train_supervised_model(
                data.labeled + stage1_extra,
                (cfg.seed, "u3"),
                train_cfg,
                mc.num_classes,
                use_era=cfg.era.enabled_u3,
                hidden_channels=mc.hidden_channels,
                feature_depth=mc.feature_depth,
                allowed_sources=frozenset({"ground_truth", "u1_final"}),
            )
        else:  # u4
            u3_params = net.load_checkpoint(_stage_dir(cfg, "u3") / "model")[0]
            stage2_extra = cst_mod.pseudo_items(
                u3_params, [by_id[i] for i in unreliable_ids], "u3"
            )
            trained = net.train_supervised_model(
                data.labeled + stage1_extra + stage2_extra,
                (cfg.seed, "u4"),
                train_cfg,
                mc.num_classes,
                use_era=False,
                hidden_channels=mc.hidden_channels,
                feature_depth=mc.feature_depth,
            )

    net.save_checkpoint(
        out / "model", trained.params, {"stage": stage, "seed": cfg.seed, "config_hash": cfg.hash()}
    )
    metrics = pipeline.evaluate_model(trained.params, data.test, cfg.spacing) if data.test else {}
    eio.write_json(
        out / "report.json",
        {
            "stage": stage,
            "loss_curve": [bd.to_dict() for bd in trained.loss_curve],
            "metrics": metrics,
            "era": {"applied": trained.era_stats.applied, "noops": trained.era_stats.noops},
        },
    )
    if metrics:
        print(f"{stage}: mean foreground DSC {metrics['mean_dsc']:.4f}")
    else:
        print(f"{stage}: trained ({len(trained.loss_curve)} epochs)")
    return 0


def cmd_reliability(args: argparse.Namespace) -> int:
    ckpt_dirs = sorted(Path(args.checkpoints_dir).glob("ckpt_*"))
    if len(ckpt_dirs) < 2:
        raise RuntimeError(f"need at least 2 checkpoints under {args.checkpoints_dir}")
    checkpoints = [net.load_checkpoint(d)[0] for d in ckpt_dirs]
    items = []
    for path in sorted(Path(args.unlabeled_dir).glob("*.tns")):
        items.append(
            net.TrainItem(item_id=path.stem, image=Image2D(eio.read_tensor(path)))
        )
    if not items:
        raise RuntimeError(f"no .tns images under {args.unlabeled_dir}")
    records = cst_mod.score_unlabeled(checkpoints, items, args.threshold, keep_masks=False)
    table = [r.to_dict() for r in records]
    if args.out:
        eio.write_json(args.out, table)
    print(json.dumps(table, indent=2))
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    if args.out:
        from dataclasses import replace

        cfg = replace(cfg, out_dir=args.out)
    report = pipeline.run_pipeline(cfg)
    for stage in report["stage_order"]:
        m = report["stages"][stage]["metrics"]
        if m:
            print(f"{stage}: mean foreground DSC {m['mean_dsc']:.4f}")
    if cfg.out_dir:
        print(f"report: {Path(cfg.out_dir) / 'report.json'}")
    return 0


def _parse_axis_value(token: str):
    low = token.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    axes: dict[str, list] = {}
    for spec in args.axis:
        if "=" not in spec:
            raise UsageError(f"--axis expects name=v1,v2,..., got {spec!r}")
        name, _, values = spec.partition("=")
        axes[name.strip()] = [_parse_axis_value(v) for v in values.split(",") if v.strip()]
    if not axes:
        raise UsageError("at least one --axis is required")
    out_dir = args.out or (Path(cfg.out_dir) / "ablation" if cfg.out_dir else None)
    runs = pipeline.run_ablation(cfg, axes, out_dir)
    failures = sum(1 for r in runs if "error" in r)
    print(f"{len(runs)} runs, {failures} failures" + (f" -> {out_dir}" if out_dir else ""))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_files = {p.stem: p for p in sorted(pred_dir.glob("*.tns"))}
    gt_files = {p.stem: p for p in sorted(gt_dir.glob("*.tns"))}
    shared = sorted(set(pred_files) & set(gt_files))
    if not shared:
        raise RuntimeError("no matching .tns mask pairs between the two directories")
    preds = {s: eio.read_tensor(pred_files[s]) for s in shared}
    gts = {s: eio.read_tensor(gt_files[s]) for s in shared}
    c = args.num_classes or int(max(max(a.max() for a in preds.values()), max(a.max() for a in gts.values()))) + 1
    c = max(c, 2)
    per_image = {}
    for s in shared:
        rep = evaluate(ClassMask(preds[s], c), ClassMask(gts[s], c), args.spacing)
        per_image[s] = rep.to_dict()
    mean_dsc = float(np.mean([per_image[s]["mean_dsc"] for s in shared]))
    mean_assd = float(np.mean([per_image[s]["mean_assd"] for s in shared]))
    report = {
        "num_classes": c,
        "spacing": args.spacing,
        "per_image": per_image,
        "mean_dsc": mean_dsc,
        "mean_assd": mean_assd,
    }
    if args.report:
        eio.write_json(args.report, report)
    print(f"{len(shared)} images: mean foreground DSC {mean_dsc:.4f}, ASSD {mean_assd:.4f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = net.grad_check(args.seed)
    for name, err in sorted(report.per_term.items()):
        print(f"{name}: max relative error {err:.3e}")
    print(f"composed: max relative error {report.composed:.3e}")
    print(f"max relative error: {report.max_relative_error:.3e}")
    if not report.passed():
        raise RuntimeError("gradient check failed tolerance")
    return 0


def cmd_export_pgm(args: argparse.Namespace) -> int:
    eio.export_pgm(args.out, eio.read_tensor(args.tensor))
    print(f"wrote {args.out}")
    return 0


def cmd_proto_debug(args: argparse.Namespace) -> int:
    params = net.load_checkpoint(args.checkpoint)[0]
    image = Image2D(eio.read_tensor(args.image))
    fp = net.forward(params, image)
    bundle = proto.compute_bundle(fp.feature_map, fp.probs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eio.write_tensor(out / "similarity.tns", bundle.similarity.astype(np.float32))
    eio.write_tensor(out / "prototypical.tns", bundle.prototypical.astype(np.float32))
    eio.write_tensor(out / "prototypes.tns", bundle.prototypes.astype(np.float32))
    print(f"wrote similarity/prototypical maps to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="eraseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True, help="number of training slices")
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast", choices=["bright", "dark"], default="bright")
    p.add_argument("--out", required=True)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("augment", help="apply edge replacement to one image/mask pair")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default="1,2", help="comma-separated meniscus class ids")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train one stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=["u1", "u3", "u4"], required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reliability", help="score unlabeled images across checkpoints")
    p.add_argument("--checkpoints-dir", required=True)
    p.add_argument("--unlabeled-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("pipeline", help="run the full cascade end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", action="append", default=[], help="name=v1,v2,...")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--report", default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-pgm", help="dump a 2D tensor file as 8-bit PGM")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_pgm)

    p = sub.add_parser("proto-debug", help="dump similarity/prototypical maps for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_proto_debug)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required (see --help)")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
