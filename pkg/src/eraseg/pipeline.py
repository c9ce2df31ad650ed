"""Experiment orchestration: the four-stage cascade, evaluation, and ablations.

A run trains, in order: a supervised baseline on the labeled subset alone,
the mean-teacher student (with edge replacement / prototype consistency per
flags, saving equidistant checkpoints), and — when conditional self-training
is enabled — the two self-training stages. Every stage is evaluated on the
held-out test split and everything lands in one JSON report that reproduces
byte-for-byte given the same seed, config, and dataset (wall-clock fields
aside).
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cst as cst_mod
from . import io as eio
from . import net
from ._kernels import backend_name
from .era import EraConfig
from .grid import ClassMask, Image2D, evaluate


@dataclass(frozen=True)
class ModelConfig:
    hidden_channels: int = 8
    feature_depth: int = 16
    num_classes: int = 4


@dataclass(frozen=True)
class EraFlags:
    enabled_u1: bool = True
    enabled_u3: bool = True
    edge_fraction: float = 0.3
    box_margin: int = 5
    min_component_px: int = 5
    meniscus_classes: tuple[int, ...] = (1, 2)

    def geometry(self) -> EraConfig:
        return EraConfig(
            edge_fraction=self.edge_fraction,
            box_margin=self.box_margin,
            min_component_px=self.min_component_px,
        )


@dataclass(frozen=True)
class ProtoFlags:
    enabled: bool = True


@dataclass(frozen=True)
class CstFlags:
    enabled: bool = True
    threshold: float = 0.8
    checkpoint_count: int = 5


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; serializes to/from plain JSON."""

    dataset: str
    out_dir: str | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: net.TrainConfig = field(default_factory=net.TrainConfig)
    era: EraFlags = field(default_factory=EraFlags)
    proto: ProtoFlags = field(default_factory=ProtoFlags)
    cst: CstFlags = field(default_factory=CstFlags)
    labeled_fraction: float | None = None  # override of the manifest's labeled flags
    spacing: float = 1.0
    dump_predictions: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["era"] = asdict(self.train.era)
        d["train"]["meniscus_classes"] = list(self.train.meniscus_classes)
        d["era"]["meniscus_classes"] = list(self.era.meniscus_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        train = dict(d.get("train", {}))
        train.pop("era", None)  # geometry lives under the era section
        if "meniscus_classes" in train:
            train["meniscus_classes"] = tuple(train["meniscus_classes"])
        era = dict(d.get("era", {}))
        if "meniscus_classes" in era:
            era["meniscus_classes"] = tuple(era["meniscus_classes"])
        return cls(
            dataset=d["dataset"],
            out_dir=d.get("out_dir"),
            seed=int(d.get("seed", 0)),
            model=ModelConfig(**d.get("model", {})),
            train=net.TrainConfig(**train),
            era=EraFlags(**era),
            proto=ProtoFlags(**d.get("proto", {})),
            cst=CstFlags(**d.get("cst", {})),
            labeled_fraction=d.get("labeled_fraction"),
            spacing=float(d.get("spacing", 1.0)),
            dump_predictions=bool(d.get("dump_predictions", False)),
        )

    def hash(self) -> str:
        return eio.config_hash(self.to_dict())

    def train_cfg(self) -> net.TrainConfig:
        return replace(
            self.train,
            era=self.era.geometry(),
            meniscus_classes=self.era.meniscus_classes,
        )


@dataclass
class DatasetItems:
    labeled: list[net.TrainItem]
    unlabeled: list[net.TrainItem]
    test: list[net.TrainItem]


def load_items(cfg: RunConfig) -> DatasetItems:
    """Materialize the manifest into labeled/unlabeled/test item lists.

    ``cfg.labeled_fraction`` re-marks the labeled subset as the first
    ceil(n * fraction) train entries in manifest order (the manifest already
    stores a seeded shuffle order for its own labeled flags).
    """
    manifest_path = Path(cfg.dataset)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    base = manifest_path.parent
    manifest = eio.Manifest.load(manifest_path)
    c = cfg.model.num_classes

    def to_item(entry: eio.ManifestEntry, with_mask: bool) -> net.TrainItem:
        image = Image2D(eio.read_tensor(base / entry.image))
        mask = None
        if with_mask and entry.label is not None:
            mask = ClassMask(eio.read_tensor(base / entry.label), c)
        return net.TrainItem(item_id=entry.item_id, image=image, mask=mask)

    train_entries = manifest.select(split="train")
    if cfg.labeled_fraction is not None:
        n_lab = math.ceil(len(train_entries) * cfg.labeled_fraction)
        labeled_ids = {e.item_id for e in train_entries[:n_lab]}
    else:
        labeled_ids = {e.item_id for e in train_entries if e.labeled}
    labeled = [to_item(e, True) for e in train_entries if e.item_id in labeled_ids]
    unlabeled = [to_item(e, False) for e in train_entries if e.item_id not in labeled_ids]
    test = [to_item(e, True) for e in manifest.select(split="test")]
    return DatasetItems(labeled=labeled, unlabeled=unlabeled, test=test)


def evaluate_model(
    params: net.ModelParams, items: list[net.TrainItem], spacing: float = 1.0
) -> dict:
    """Average per-image metric reports over ``items`` (which carry gt masks)."""
    if not items:
        return {}
    reports = []
    for item in items:
        if item.mask is None:
            raise ValueError(f"{item.item_id}: evaluation item without ground truth")
        reports.append(evaluate(net.predict_mask(params, item.image), item.mask, spacing))
    c = len(reports[0].per_class_dsc)
    per_dsc = [float(np.mean([r.per_class_dsc[j] for r in reports])) for j in range(c)]
    per_assd = [float(np.mean([r.per_class_assd[j] for r in reports])) for j in range(c)]
    return {
        "per_class_dsc": per_dsc,
        "per_class_assd": per_assd,
        "mean_dsc": float(np.mean([r.mean_dsc for r in reports])),
        "mean_assd": float(np.mean([r.mean_assd for r in reports])),
        "num_images": len(items),
    }


def _provenance_summary(items: list[net.TrainItem]) -> dict:
    counts: dict[str, int] = {}
    for item in items:
        counts[item.label_source] = counts.get(item.label_source, 0) + 1
    return counts


def _reliability_histogram(scores: list[float], bins: int = 10) -> list[int]:
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _ = np.histogram(scores, bins=edges)
    return [int(v) for v in hist]


def run_pipeline(cfg: RunConfig, write_outputs: bool = True) -> dict:
    """Execute a full run and return (and optionally write) its report."""
    t_start = time.perf_counter()
    data = load_items(cfg)
    if not data.labeled:
        raise ValueError("dataset has no labeled training items")
    train_cfg = cfg.train_cfg()
    mc = cfg.model
    stages: dict[str, dict] = {}
    timing: dict[str, float] = {}

    def stage_report(name: str, model: net.TrainedModel, items: list[net.TrainItem]) -> dict:
        return {
            "loss_curve": [bd.to_dict() for bd in model.loss_curve],
            "final_loss": model.loss_curve[-1].to_dict() if model.loss_curve else None,
            "metrics": evaluate_model(model.params, data.test, cfg.spacing),
            "era": {"applied": model.era_stats.applied, "noops": model.era_stats.noops},
            "provenance": _provenance_summary(items),
            "num_train_items": len(items),
        }

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timing[name] = time.perf_counter() - t0
        return out

    baseline = timed(
        "baseline",
        lambda: net.train_supervised_model(
            data.labeled,
            (cfg.seed, "baseline"),
            train_cfg,
            mc.num_classes,
            use_era=False,
            hidden_channels=mc.hidden_channels,
            feature_depth=mc.feature_depth,
            allowed_sources=frozenset({"ground_truth"}),
        ),
    )
    stages["baseline"] = stage_report("baseline", baseline, data.labeled)

    run_u1 = bool(data.unlabeled) or cfg.era.enabled_u1 or cfg.proto.enabled or cfg.cst.enabled
    u1 = None
    if run_u1:
        u1 = timed(
            "u1",
            lambda: net.train_mean_teacher(
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
            ),
        )
        stages["u1"] = stage_report("u1", u1, data.labeled)
        stages["u1"]["checkpoint_epochs"] = u1.checkpoint_epochs

    reliability: dict = {}
    if cfg.cst.enabled and u1 is not None:
        cst_cfg = cst_mod.CstConfig(
            threshold=cfg.cst.threshold, checkpoint_count=cfg.cst.checkpoint_count
        )
        result = timed(
            "cst",
            lambda: cst_mod.run_cst(
                u1.checkpoints,
                data.labeled,
                data.unlabeled,
                cst_cfg,
                train_cfg,
                (cfg.seed,),
                use_era_stage1=cfg.era.enabled_u3,
                hidden_channels=mc.hidden_channels,
                feature_depth=mc.feature_depth,
            ),
        )
        stages["u3"] = stage_report("u3", result.u3, result.u3_items)
        stages["u4"] = stage_report("u4", result.u4, result.u4_items)
        scores = [r.score for r in result.records]
        reliability = {
            "threshold": cfg.cst.threshold,
            "records": [r.to_dict() for r in result.records],
            "histogram": _reliability_histogram(scores),
            "num_reliable": len(result.reliable_ids),
            "num_unreliable": len(result.unreliable_ids),
        }

    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "backend": backend_name(),
        "dataset": {
            "labeled": len(data.labeled),
            "unlabeled": len(data.unlabeled),
            "test": len(data.test),
        },
        "stage_order": list(stages.keys()),
        "stages": stages,
        "reliability": reliability,
        "wall_clock": {**timing, "total": time.perf_counter() - t_start},
    }

    if write_outputs and cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        eio.write_json(out / "report.json", report)
        final = None
        for name in ("u4", "u3", "u1", "baseline"):
            if name in stages:
                final = name
                break
        models = {"baseline": baseline}
        if u1 is not None:
            models["u1"] = u1
        if cfg.cst.enabled and u1 is not None:
            models["u3"] = result.u3
            models["u4"] = result.u4
        for name, model in models.items():
            net.save_checkpoint(
                out / f"model_{name}",
                model.params,
                {"stage": name, "seed": cfg.seed, "config_hash": cfg.hash()},
            )
        if cfg.dump_predictions and data.test:
            pred_dir = out / "predictions" / str(final)
            pred_dir.mkdir(parents=True, exist_ok=True)
            for item in data.test:
                pred = net.predict_mask(models[final].params, item.image)
                eio.write_tensor(pred_dir / f"{item.item_id}.tns", pred.data)
                eio.export_pgm(pred_dir / f"{item.item_id}.pgm", pred.data.astype(np.float32))
    return report


def strip_wall_clock(report: dict) -> dict:
    """Copy of a report with volatile timing fields removed (for comparisons)."""
    out = {k: v for k, v in report.items() if k != "wall_clock"}
    return out


# ---------------------------------------------------------------------------
# ablation grids

_AXIS_SETTERS = {
    "era": lambda cfg, v: replace(
        cfg, era=replace(cfg.era, enabled_u1=bool(v), enabled_u3=bool(v))
    ),
    "proto": lambda cfg, v: replace(cfg, proto=replace(cfg.proto, enabled=bool(v))),
    "cst": lambda cfg, v: replace(cfg, cst=replace(cfg.cst, enabled=bool(v))),
    "cst_threshold": lambda cfg, v: replace(cfg, cst=replace(cfg.cst, threshold=float(v))),
    "labeled_fraction": lambda cfg, v: replace(cfg, labeled_fraction=float(v)),
    "seed": lambda cfg, v: replace(cfg, seed=int(v)),
}


def ablation_axes() -> list[str]:
    return sorted(_AXIS_SETTERS)


def run_ablation(
    base_cfg: RunConfig, axes: dict[str, list], out_dir: str | Path | None = None
) -> list[dict]:
    """Cartesian product of runs over ``axes``; all runs share the base seed
    unless a "seed" axis overrides it.

    Returns one record per run: the axis assignment, the report, and a flat
    summary row per stage. Failures are recorded and do not stop the grid.
    Writes summary.csv plus per-run reports when ``out_dir`` is given.
    """
    for name in axes:
        if name not in _AXIS_SETTERS:
            raise ValueError(f"unknown ablation axis {name!r} (known: {ablation_axes()})")
    names = sorted(axes)
    runs = []
    for values in itertools.product(*(axes[n] for n in names)):
        assignment = dict(zip(names, values))
        cfg = base_cfg
        for n, v in assignment.items():
            cfg = _AXIS_SETTERS[n](cfg, v)
        cfg = replace(cfg, out_dir=None)
        record: dict = {"axes": assignment, "config_hash": cfg.hash()}
        try:
            record["report"] = run_pipeline(cfg, write_outputs=False)
        except Exception as exc:  # failure marker; the grid continues
            record["error"] = f"{type(exc).__name__}: {exc}"
        runs.append(record)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = summary_rows(runs)
        if rows:
            fieldnames: list[str] = []
            for row in rows:
                for key in row:
                    if key not in fieldnames:
                        fieldnames.append(key)
            with open(out / "summary.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
                writer.writeheader()
                writer.writerows(rows)
        eio.write_json(out / "ablation.json", {"axes": axes, "runs": runs})
    return runs


def summary_rows(runs: list[dict]) -> list[dict]:
    """Flattened per-(run, stage) rows for the CSV summary."""
    rows = []
    for idx, record in enumerate(runs):
        base = {"run": idx, "config_hash": record["config_hash"]}
        for n, v in record["axes"].items():
            base[n] = v
        if "error" in record:
            rows.append({**base, "stage": "error", "error": record["error"]})
            continue
        report = record["report"]
        for stage in report["stage_order"]:
            metrics = report["stages"][stage]["metrics"]
            row = {**base, "stage": stage, "error": ""}
            for j, v in enumerate(metrics.get("per_class_dsc", [])):
                if j > 0:
                    row[f"dsc_class{j}"] = v
            for j, v in enumerate(metrics.get("per_class_assd", [])):
                if j > 0:
                    row[f"assd_class{j}"] = v
            row["mean_dsc"] = metrics.get("mean_dsc")
            row["mean_assd"] = metrics.get("mean_assd")
            rows.append(row)
    return rows
