"""Conditional self-training: reliability scoring and the two staged retrains.

The reliability of an unlabeled image is the mean multi-class Dice agreement
between the pseudo-labels predicted by intermediate checkpoints of the
mean-teacher student and the final checkpoint's pseudo-label. Images at or
above the threshold join the labeled pool (stage 1, trained with edge
replacement); the remainder are relabeled by the stage-1 model and everything
trains the final model (stage 2, no augmentation).
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np

from . import net
from .grid import ClassMask, mean_foreground_dsc


@dataclass(frozen=True)
class CstConfig:
    threshold: float = 0.8
    checkpoint_count: int = 5

    def __post_init__(self) -> None:
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")
        if self.checkpoint_count < 2:
            raise ValueError("need at least 2 checkpoints")


@dataclass
class ReliabilityRecord:
    """Per-image checkpoint pseudo-labels, agreement score, and assignment."""

    item_id: str
    score: float
    reliable: bool
    pseudo_labels: list[ClassMask] | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.item_id,
            "score": self.score,
            "assignment": "reliable" if self.reliable else "unreliable",
        }


def reliability_score(pseudo_labels: list[ClassMask]) -> float:
    """Mean multi-class Dice between each earlier pseudo-label and the final one.

    Multi-class Dice is the mean one-vs-rest Dice over foreground classes,
    with the degenerate conventions of :func:`eraseg.grid.dsc`.
    """
    k = len(pseudo_labels)
    if k < 2:
        raise ValueError("reliability needs at least 2 checkpoints")
    final = pseudo_labels[-1]
    scores = [mean_foreground_dsc(pseudo_labels[j], final) for j in range(k - 1)]
    return float(np.mean(scores))


def partition(records: list[ReliabilityRecord], threshold: float) -> tuple[list[str], list[str]]:
    """Split ids into (reliable, unreliable) by score >= threshold."""
    reliable = [r.item_id for r in records if r.score >= threshold]
    unreliable = [r.item_id for r in records if r.score < threshold]
    return reliable, unreliable


def score_unlabeled(
    checkpoints: list[net.ModelParams],
    unlabeled: list[net.TrainItem],
    threshold: float,
    keep_masks: bool = True,
) -> list[ReliabilityRecord]:
    """Predict with every checkpoint and score each unlabeled image."""
    if len(checkpoints) < 2:
        raise ValueError("reliability needs at least 2 checkpoints")
    records = []
    for item in unlabeled:
        pseudo = [net.predict_mask(p, item.image) for p in checkpoints]
        score = reliability_score(pseudo)
        records.append(
            ReliabilityRecord(
                item_id=item.item_id,
                score=score,
                reliable=score >= threshold,
                pseudo_labels=pseudo if keep_masks else None,
            )
        )
    return records


def pseudo_items(
    params: net.ModelParams, items: list[net.TrainItem], source: str
) -> list[net.TrainItem]:
    """Copies of ``items`` labeled by ``params`` and tagged with ``source``."""
    return [
        net.TrainItem(
            item_id=item.item_id,
            image=item.image,
            mask=net.predict_mask(params, item.image),
            label_source=source,
        )
        for item in items
    ]


@dataclass
class CstResult:
    u3: net.TrainedModel
    u4: net.TrainedModel
    records: list[ReliabilityRecord]
    reliable_ids: list[str]
    unreliable_ids: list[str]
    u3_items: list[net.TrainItem] = field(default_factory=list)
    u4_items: list[net.TrainItem] = field(default_factory=list)


def run_cst(
    checkpoints: list[net.ModelParams],
    labeled: list[net.TrainItem],
    unlabeled: list[net.TrainItem],
    cfg: CstConfig,
    train_cfg: net.TrainConfig,
    seed_key: tuple,
    use_era_stage1: bool = True,
    hidden_channels: int = 8,
    feature_depth: int = 16,
) -> CstResult:
    """Both self-training stages; label provenance is tagged and enforced.

    Stage 1 trains on ground truth plus final-checkpoint pseudo-labels of the
    reliable images (edge replacement on). Stage 2 relabels the unreliable
    images with the stage-1 model and trains on everything (no augmentation).
    An empty reliable set degrades stage 1 to supervised training on the
    labeled pool alone.

    Both stages keep the epoch length of the full labeled+unlabeled pool, so
    a small reliable set shrinks the stage-1 training set but not its
    optimization budget.
    """
    if not checkpoints:
        raise ValueError("run_cst needs the mean-teacher checkpoints")
    num_classes = checkpoints[-1].num_classes
    records = score_unlabeled(checkpoints, unlabeled, cfg.threshold)
    reliable_ids, unreliable_ids = partition(records, cfg.threshold)
    final = checkpoints[-1]
    by_id = {item.item_id: item for item in unlabeled}
    pool_steps = max(1, math.ceil((len(labeled) + len(unlabeled)) / train_cfg.batch_size))

    stage1_extra = pseudo_items(final, [by_id[i] for i in reliable_ids], "u1_final")
    u3_items = list(labeled) + stage1_extra
    u3 = net.train_supervised_model(
        u3_items,
        (*seed_key, "u3"),
        train_cfg,
        num_classes,
        use_era=use_era_stage1,
        hidden_channels=hidden_channels,
        feature_depth=feature_depth,
        allowed_sources=frozenset({"ground_truth", "u1_final"}),
        steps_per_epoch=pool_steps,
    )

    stage2_extra = pseudo_items(u3.params, [by_id[i] for i in unreliable_ids], "u3")
    u4_items = list(labeled) + stage1_extra + stage2_extra
    u4 = net.train_supervised_model(
        u4_items,
        (*seed_key, "u4"),
        train_cfg,
        num_classes,
        use_era=False,
        hidden_channels=hidden_channels,
        feature_depth=feature_depth,
        allowed_sources=frozenset({"ground_truth", "u1_final", "u3"}),
        steps_per_epoch=pool_steps,
    )
    return CstResult(
        u3=u3,
        u4=u4,
        records=records,
        reliable_ids=reliable_ids,
        unreliable_ids=unreliable_ids,
        u3_items=u3_items,
        u4_items=u4_items,
    )
