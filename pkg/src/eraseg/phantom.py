"""Synthetic 2D knee-slice phantoms with ground-truth masks.

Each slice stacks, bottom to top: a dark bone region, a brighter cartilage
band (its own class), and a meniscus resting on the band — either a single
crescent-like dome (type A) or two wedge-shaped horns (type B). Intensities
are fixed levels (background 0.4, bone 0.2, cartilage 0.6, meniscus 0.7
bright / 0.15 dark) plus clipped Gaussian noise; geometry is jittered per
slice from seeded streams, so generation is reproducible and parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as eio
from .era import EraConfig, TopologyKind, classify_topology
from .grid import ClassMask, Image2D
from .seeding import stream_rng

BASE_LEVEL = 0.4
BONE_LEVEL = BASE_LEVEL - 0.2
CARTILAGE_LEVEL = BASE_LEVEL + 0.2
MENISCUS_BRIGHT = BASE_LEVEL + 0.3
MENISCUS_DARK = BASE_LEVEL - 0.25

CLASS_BACKGROUND = 0
CLASS_LATERAL = 1
CLASS_MEDIAL = 2
CLASS_CARTILAGE = 3


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and appearance ranges; fractions are of image height/width."""

    height: int = 64
    width: int = 64
    num_classes: int = 4
    type_b_probability: float = 0.5
    contrast_mode: str = "bright"  # "bright" | "dark"
    noise_std: float = 0.05
    margin: int = 2
    cart_top_range: tuple[float, float] = (0.60, 0.65)
    cart_height_range: tuple[float, float] = (0.11, 0.15)
    cart_inset_range: tuple[float, float] = (0.07, 0.11)
    wedge_width_range: tuple[float, float] = (0.22, 0.28)
    wedge_height_range: tuple[float, float] = (0.05, 0.08)
    horn_inset_range: tuple[float, float] = (0.01, 0.03)
    dome_inset_range: tuple[float, float] = (0.03, 0.07)
    min_gap_fraction: float = 0.08
    # Both meniscus pieces are thin bands, so every meniscus pixel sees its
    # vertical context within a small window: resting on the cartilage means
    # lateral, floating above it (background gap) means medial.
    medial_float_range: tuple[int, int] = (2, 3)
    medial_thickness_range: tuple[int, int] = (3, 4)
    medial_width_range: tuple[float, float] = (0.28, 0.34)

    def __post_init__(self) -> None:
        if self.contrast_mode not in ("bright", "dark"):
            raise ValueError(f"unknown contrast mode {self.contrast_mode!r}")
        if not (0.0 <= self.type_b_probability <= 1.0):
            raise ValueError("type_b_probability must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.height < 16 or self.width < 16:
            raise ValueError("phantom slices must be at least 16x16")

    @property
    def meniscus_level(self) -> float:
        return MENISCUS_BRIGHT if self.contrast_mode == "bright" else MENISCUS_DARK


@dataclass
class SliceRecord:
    """One generated slice: image, ground truth, and the geometry that made it."""

    item_id: str
    image: Image2D
    mask: ClassMask
    meta: dict = field(default_factory=dict)


def _int_range(rng: np.random.Generator, extent: int, frac_range: tuple[float, float]) -> int:
    lo = int(round(frac_range[0] * extent))
    hi = int(round(frac_range[1] * extent))
    return int(rng.integers(lo, hi + 1))


def _draw_geometry(cfg: PhantomConfig, rng: np.random.Generator, kind: str | None = None) -> dict:
    h, w, m = cfg.height, cfg.width, cfg.margin
    if kind is None:
        kind = "type_b" if rng.uniform() < cfg.type_b_probability else "type_a"
    g: dict = {"kind": kind}
    g["cart_top"] = _int_range(rng, h, cfg.cart_top_range)
    g["cart_h"] = min(max(2, _int_range(rng, h, cfg.cart_height_range)), h - 1 - g["cart_top"])
    g["cart_x0"] = max(m, _int_range(rng, w, cfg.cart_inset_range))
    g["cart_x1"] = min(w - 1 - m, w - 1 - _int_range(rng, w, cfg.cart_inset_range))
    max_height = g["cart_top"] - 1 - m  # meniscus must stay below the top margin

    def wedge_height() -> int:
        return min(max(3, _int_range(rng, h, cfg.wedge_height_range)), max_height)

    if g["kind"] == "type_b":
        g["left_inset"] = _int_range(rng, w, cfg.horn_inset_range)
        g["left_width"] = max(4, _int_range(rng, w, cfg.wedge_width_range))
        g["left_height"] = wedge_height()
        g["right_inset"] = _int_range(rng, w, cfg.horn_inset_range)
        g["right_width"] = max(4, _int_range(rng, w, cfg.medial_width_range))
        g["right_float"] = int(rng.integers(cfg.medial_float_range[0], cfg.medial_float_range[1] + 1))
        g["right_height"] = min(
            int(rng.integers(cfg.medial_thickness_range[0], cfg.medial_thickness_range[1] + 1)),
            max(1, max_height - g["right_float"]),
        )
    else:
        g["dome_x0"] = g["cart_x0"] + _int_range(rng, w, cfg.dome_inset_range)
        g["dome_x1"] = g["cart_x1"] - _int_range(rng, w, cfg.dome_inset_range)
        g["dome_height"] = wedge_height()
    return g


def _geometry_valid(cfg: PhantomConfig, g: dict) -> bool:
    h, w, m = cfg.height, cfg.width, cfg.margin
    max_h = (
        max(g["left_height"], g["right_height"] + g["right_float"])
        if g["kind"] == "type_b"
        else g["dome_height"]
    )
    if g["cart_top"] - 1 - max_h < m:
        return False
    if g["cart_top"] + g["cart_h"] > h - 1:
        return False
    if g["cart_x0"] < m or g["cart_x1"] > w - 1 - m:
        return False
    if g["kind"] == "type_b":
        left_end = g["cart_x0"] + g["left_inset"] + g["left_width"] - 1
        right_start = g["cart_x1"] - g["right_inset"] - g["right_width"] + 1
        if right_start - left_end < max(2, int(round(cfg.min_gap_fraction * w))):
            return False
    else:
        if g["dome_x1"] - g["dome_x0"] < int(round(0.35 * w)):
            return False
    return True


def _rasterize(cfg: PhantomConfig, g: dict) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    mask = np.zeros((h, w), dtype=np.uint8)
    img = np.full((h, w), BASE_LEVEL, dtype=np.float64)

    bone_top = g["cart_top"] + g["cart_h"]
    img[bone_top:, :] = BONE_LEVEL
    mask[g["cart_top"] : bone_top, g["cart_x0"] : g["cart_x1"] + 1] = CLASS_CARTILAGE
    img[g["cart_top"] : bone_top, g["cart_x0"] : g["cart_x1"] + 1] = CARTILAGE_LEVEL

    bottom = g["cart_top"] - 1

    def paint_column(x: int, colh: int, class_id: int, base: int = 0) -> None:
        lo = bottom - base
        mask[lo - colh + 1 : lo + 1, x] = class_id
        img[lo - colh + 1 : lo + 1, x] = cfg.meniscus_level

    if g["kind"] == "type_b":
        x0 = g["cart_x0"] + g["left_inset"]
        for i in range(g["left_width"]):
            frac = i / max(1, g["left_width"] - 1)
            paint_column(x0 + i, max(1, round(g["left_height"] * (1.0 - frac))), CLASS_LATERAL)
        x1 = g["cart_x1"] - g["right_inset"]
        for i in range(g["right_width"]):
            paint_column(x1 - i, g["right_height"], CLASS_MEDIAL, base=g["right_float"])
    else:
        x0, x1 = g["dome_x0"], g["dome_x1"]
        span = x1 - x0
        for x in range(x0, x1 + 1):
            u = 2.0 * (x - x0) / span - 1.0
            colh = max(1, round(g["dome_height"] * math.sqrt(max(0.0, 1.0 - u * u))))
            paint_column(x, colh, CLASS_LATERAL)
    return img, mask


def generate_slice(
    cfg: PhantomConfig,
    item_id: str,
    rng: np.random.Generator,
    kind: str | None = None,
) -> SliceRecord:
    """Generate one slice; re-jitters invalid geometry up to 10 times.

    ``kind`` forces the topology ("type_a"/"type_b"); by default it is drawn
    from ``cfg.type_b_probability``.
    """
    expected = None
    for attempt in range(10):
        g = _draw_geometry(cfg, rng, kind)
        if not _geometry_valid(cfg, g):
            continue
        img, mask = _rasterize(cfg, g)
        meniscus = (mask == CLASS_LATERAL) | (mask == CLASS_MEDIAL)
        topo = classify_topology(meniscus, EraConfig())
        expected = TopologyKind.TYPE_B if g["kind"] == "type_b" else TopologyKind.TYPE_A
        if topo.kind is not expected:
            continue
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        meta = {
            "kind": g["kind"],
            "contrast_mode": cfg.contrast_mode,
            "geometry": g,
            "attempt": attempt,
        }
        return SliceRecord(
            item_id=item_id,
            image=Image2D(img.astype(np.float32)),
            mask=ClassMask(mask, cfg.num_classes),
            meta=meta,
        )
    raise RuntimeError(f"{item_id}: no valid geometry after 10 attempts")


def generate_dataset(
    cfg: PhantomConfig,
    count: int,
    labeled_fraction: float,
    seed: int,
    out_dir: str | Path,
    test_count: int = 0,
    name: str = "phantom",
) -> eio.Manifest:
    """Write a train(+test) dataset: images/, labels/, manifest.json.

    The first ceil(count * labeled_fraction) train ids after a seeded shuffle
    are flagged labeled; every other item keeps its ground-truth label file
    for evaluation only.

    Topologies are assigned by stratified alternation along the (shuffled)
    labeled-selection order, so the realized type-B fraction matches
    ``cfg.type_b_probability`` exactly and even small labeled subsets see
    both topologies (as every scan does in volumetric datasets).
    """
    if count < 2:
        raise ValueError("need at least 2 training slices")
    if not (0.0 < labeled_fraction <= 1.0):
        raise ValueError("labeled_fraction must lie in (0, 1]")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    train_ids = [f"tr{i:04d}" for i in range(count)]
    test_ids = [f"te{i:04d}" for i in range(test_count)]
    shuffled = list(stream_rng(seed, "labeled-split").permutation(len(train_ids)))
    n_labeled = math.ceil(count * labeled_fraction)
    labeled_ids = {train_ids[int(i)] for i in shuffled[:n_labeled]}

    def stratified_kinds(ordered_ids: list[str]) -> dict[str, str]:
        kinds = {}
        acc = 0.0
        for item_id in ordered_ids:
            acc += cfg.type_b_probability
            if acc >= 1.0 - 1e-9:
                kinds[item_id] = "type_b"
                acc -= 1.0
            else:
                kinds[item_id] = "type_a"
        return kinds

    kind_of = stratified_kinds([train_ids[int(i)] for i in shuffled])
    kind_of.update(stratified_kinds(test_ids))

    entries = []
    for item_id in train_ids + test_ids:
        rec = generate_slice(cfg, item_id, stream_rng(seed, "slice", item_id), kind=kind_of[item_id])
        image_path = f"images/{item_id}.tns"
        label_path = f"labels/{item_id}.tns"
        eio.write_tensor(out_dir / image_path, rec.image.data)
        eio.write_tensor(out_dir / label_path, rec.mask.data)
        is_train = item_id.startswith("tr")
        labeled = item_id in labeled_ids
        entries.append(
            eio.ManifestEntry(
                item_id=item_id,
                image=image_path,
                label=label_path,
                split="train" if is_train else "test",
                labeled=labeled,
                eval_only_label=not labeled,
            )
        )
    manifest = eio.Manifest(name=name, seed=seed, entries=entries)
    manifest.save(out_dir / "manifest.json")
    return manifest
