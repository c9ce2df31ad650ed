"""Edge replacement augmentation.

The meniscus edges of a slice are truncated and filled with noise drawn from
the background intensity range next to them, producing plausible shape
variants of the same anatomy. Steps:

1. binarize the meniscus classes and classify the topology (one piece =
   type A, two pieces = type B);
2. locate six extreme points (far/upper/bottom, left and right);
3. draw replacement abscissas x_RL, x_RR inside the outer 30% of the
   horizontal span on each side;
4. build a bounding box around each marginal region and measure the
   background intensity range inside it;
5. replace box pixels beyond the abscissas with uniform noise from the
   measured range, and zero all meniscus mask pixels beyond them.

Any degenerate geometry (no usable component, a span too small to pick an
abscissa, a box with no background pixels) turns the whole application into
a no-op that returns the inputs untouched.

Randomness contract of :func:`apply_era` (fixed so runs reproduce bitwise):
one integer draw for x_RL, one for x_RR, then one uniform batch per side
covering the replaced pixels of its box in row-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .grid import ClassMask, Image2D

Coord = tuple[int, int]  # (x, y)


class TopologyKind(Enum):
    TYPE_A = "type_a"
    TYPE_B = "type_b"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class EraConfig:
    """Geometry knobs; defaults follow the interval fraction 0.3 and box margin 5."""

    edge_fraction: float = 0.3
    box_margin: int = 5
    min_component_px: int = 5

    def __post_init__(self) -> None:
        if not (0.0 < self.edge_fraction < 0.5):
            raise ValueError("edge_fraction must lie in (0, 0.5)")
        if self.box_margin < 0:
            raise ValueError("box_margin must be nonnegative")


@dataclass
class MeniscusTopology:
    """Topology classification plus its usable pieces, left to right."""

    kind: TopologyKind
    pieces: list[np.ndarray]  # boolean piece masks ordered by centroid x

    def __post_init__(self) -> None:
        expect = {TopologyKind.TYPE_A: 1, TopologyKind.TYPE_B: 2, TopologyKind.DEGENERATE: 0}
        if len(self.pieces) != expect[self.kind]:
            raise ValueError(f"{self.kind} must carry {expect[self.kind]} pieces")


@dataclass(frozen=True)
class ExtremePoints:
    """Six outer-curve landmarks as (x, y) pixel coordinates."""

    fl: Coord
    ul: Coord
    bl: Coord
    fr: Coord
    ur: Coord
    br: Coord

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("fl", "ul", "bl", "fr", "ur", "br")}


@dataclass(frozen=True)
class Rect:
    """Inclusive pixel rectangle."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"empty rect {self}")

    def to_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class EraPlan:
    """Geometric record of one augmentation: landmarks, spans, boxes, ranges."""

    kind: TopologyKind
    extremes: ExtremePoints
    d: int
    d_left: int
    d_right: int
    x_rl: int
    x_rr: int
    bbox_l: Rect
    bbox_r: Rect
    range_l: tuple[float, float]
    range_r: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "extremes": self.extremes.to_dict(),
            "d": self.d,
            "d_left": self.d_left,
            "d_right": self.d_right,
            "x_rl": self.x_rl,
            "x_rr": self.x_rr,
            "bbox_l": self.bbox_l.to_list(),
            "bbox_r": self.bbox_r.to_list(),
            "range_l": list(self.range_l),
            "range_r": list(self.range_r),
        }


def classify_topology(meniscus_mask: np.ndarray, cfg: EraConfig = EraConfig()) -> MeniscusTopology:
    """Count 4-connected components of usable size; 1 -> type A, >=2 -> type B.

    Components below ``cfg.min_component_px`` pixels are treated as specks
    and ignored. With three or more usable components the two largest are
    kept. Pieces come out ordered by centroid x.
    """
    mask = np.asarray(meniscus_mask).astype(bool)
    labels, n = ndimage.label(mask)  # default structure = 4-connectivity
    if n == 0:
        return MeniscusTopology(TopologyKind.DEGENERATE, [])
    sizes = np.bincount(labels.ravel())[1:]  # skip background
    usable = [i + 1 for i in range(n) if sizes[i] >= cfg.min_component_px]
    if not usable:
        return MeniscusTopology(TopologyKind.DEGENERATE, [])
    if len(usable) == 1:
        return MeniscusTopology(TopologyKind.TYPE_A, [labels == usable[0]])
    top_two = sorted(usable, key=lambda lab: (-int(sizes[lab - 1]), lab))[:2]
    pieces = [labels == lab for lab in top_two]
    centroid_x = [float(np.argwhere(p)[:, 1].mean()) for p in pieces]
    if centroid_x[1] < centroid_x[0]:
        pieces.reverse()
    return MeniscusTopology(TopologyKind.TYPE_B, pieces)


def _min_x_point(piece: np.ndarray) -> Coord:
    ys, xs = np.nonzero(piece)
    x = int(xs.min())
    return (x, int(ys[xs == x].min()))


def _max_x_point(piece: np.ndarray) -> Coord:
    ys, xs = np.nonzero(piece)
    x = int(xs.max())
    return (x, int(ys[xs == x].min()))


def _y_extreme(piece: np.ndarray, top: bool, tie_min_x: bool) -> Coord:
    ys, xs = np.nonzero(piece)
    y = int(ys.min() if top else ys.max())
    cand = xs[ys == y]
    return (int(cand.min() if tie_min_x else cand.max()), y)


def extreme_points(topology: MeniscusTopology) -> ExtremePoints:
    """Locate the six landmarks.

    FL/FR are the min-x/max-x pixels (ties broken to min y). For type B the
    upper/bottom points come from each piece (left ties to min x, right to
    max x). A type A piece is split at the horizontal midpoint between FL
    and FR and each half scanned, ties to min x.
    """
    if topology.kind is TopologyKind.DEGENERATE:
        raise ValueError("degenerate topology has no extreme points")
    left = topology.pieces[0]
    right = topology.pieces[-1]
    fl = _min_x_point(left)
    fr = _max_x_point(right)
    if topology.kind is TopologyKind.TYPE_B:
        ul = _y_extreme(left, top=True, tie_min_x=True)
        bl = _y_extreme(left, top=False, tie_min_x=True)
        ur = _y_extreme(right, top=True, tie_min_x=False)
        br = _y_extreme(right, top=False, tie_min_x=False)
    else:
        piece = left
        x_mid = (fl[0] + fr[0]) // 2
        xs = np.arange(piece.shape[1])[None, :]
        left_half = piece & (xs <= x_mid)
        right_half = piece & (xs > x_mid)
        if not right_half.any():  # single-column piece
            right_half = piece
        ul = _y_extreme(left_half, top=True, tie_min_x=True)
        bl = _y_extreme(left_half, top=False, tie_min_x=True)
        ur = _y_extreme(right_half, top=True, tie_min_x=True)
        br = _y_extreme(right_half, top=False, tie_min_x=True)
    return ExtremePoints(fl=fl, ul=ul, bl=bl, fr=fr, ur=ur, br=br)


def _horizontal_extent(piece: np.ndarray) -> int:
    xs = np.nonzero(piece)[1]
    return int(xs.max() - xs.min())


def _open_interval_ints(lo: float, hi: float) -> list[int]:
    """Integers n with lo < n < hi, ascending."""
    first = math.floor(lo) + 1
    return [n for n in range(first, math.ceil(hi) + 1) if lo < n < hi]


def replacement_spans(ep: ExtremePoints, topology: MeniscusTopology) -> tuple[int, int, int]:
    """Horizontal spans (d, d_left, d_right) governing the abscissa intervals.

    Type A uses the full FL-FR span on both sides; type B uses each piece's
    own extent.
    """
    d = ep.fr[0] - ep.fl[0]
    if topology.kind is TopologyKind.TYPE_B:
        return d, _horizontal_extent(topology.pieces[0]), _horizontal_extent(topology.pieces[1])
    return d, d, d


def select_replacement_points(
    ep: ExtremePoints,
    topology: MeniscusTopology,
    cfg: EraConfig,
    rng: np.random.Generator,
) -> tuple[int, int] | None:
    """Draw integer abscissas x_RL in (x_FL, x_FL + f*d_left) and x_RR in
    (x_FR - f*d_right, x_FR), guaranteeing x_RL < x_RR.

    Returns None when either open interval contains no usable integer.
    """
    d, d_left, d_right = replacement_spans(ep, topology)
    left_cands = _open_interval_ints(ep.fl[0], ep.fl[0] + cfg.edge_fraction * d_left)
    if not left_cands:
        return None
    x_rl = int(left_cands[int(rng.integers(len(left_cands)))])
    right_cands = _open_interval_ints(ep.fr[0] - cfg.edge_fraction * d_right, ep.fr[0])
    right_cands = [x for x in right_cands if x > x_rl]
    if not right_cands:
        return None
    x_rr = int(right_cands[int(rng.integers(len(right_cands)))])
    return x_rl, x_rr


def build_bounding_boxes(
    ep: ExtremePoints, cfg: EraConfig, image_dims: tuple[int, int]
) -> tuple[Rect, Rect]:
    """Boxes around the marginal regions, clamped to the image.

    Left box: x in [x_FL - margin, max(x_UL, x_BL)], y spanning UL..BL.
    Right box: x in [min(x_UR, x_BR), x_FR + margin], y spanning UR..BR.
    """
    h, w = image_dims

    def clamp_rect(xa: int, xb: int, ya: int, yb: int) -> Rect:
        x0, x1 = sorted((xa, xb))
        y0, y1 = sorted((ya, yb))
        return Rect(
            x0=max(0, min(x0, w - 1)),
            y0=max(0, min(y0, h - 1)),
            x1=max(0, min(x1, w - 1)),
            y1=max(0, min(y1, h - 1)),
        )

    bbox_l = clamp_rect(ep.fl[0] - cfg.box_margin, max(ep.ul[0], ep.bl[0]), ep.ul[1], ep.bl[1])
    bbox_r = clamp_rect(min(ep.ur[0], ep.br[0]), ep.fr[0] + cfg.box_margin, ep.ur[1], ep.br[1])
    return bbox_l, bbox_r


def background_range(
    image: Image2D, meniscus_mask: np.ndarray, bbox: Rect
) -> tuple[float, float] | None:
    """(min, max) intensity over non-meniscus pixels inside the box.

    Returns None when the box holds meniscus pixels only.
    """
    crop = image.data[bbox.y0 : bbox.y1 + 1, bbox.x0 : bbox.x1 + 1]
    keep = ~np.asarray(meniscus_mask, dtype=bool)[bbox.y0 : bbox.y1 + 1, bbox.x0 : bbox.x1 + 1]
    if not keep.any():
        return None
    vals = crop[keep]
    return float(vals.min()), float(vals.max())


def apply_era(
    image: Image2D,
    mask: ClassMask,
    meniscus_classes: frozenset[int] | set[int],
    cfg: EraConfig,
    rng: np.random.Generator,
) -> tuple[Image2D, ClassMask, EraPlan | None]:
    """Run the full edge replacement on one slice.

    Image pixels inside the left box with x < x_RL (and inside the right box
    with x > x_RR) get independent uniform draws from the measured background
    range of their box. Mask pixels of any meniscus class with x < x_RL or
    x > x_RR are zeroed anywhere in the slice. Other classes and out-of-box
    image pixels are untouched.

    A plan of None marks a no-op: the inputs are returned as-is.
    """
    if image.data.shape != mask.data.shape:
        raise ValueError("image/mask shape mismatch")
    meniscus = np.isin(mask.data, sorted(meniscus_classes))
    topology = classify_topology(meniscus, cfg)
    if topology.kind is TopologyKind.DEGENERATE:
        return image, mask, None
    ep = extreme_points(topology)
    picked = select_replacement_points(ep, topology, cfg, rng)
    if picked is None:
        return image, mask, None
    x_rl, x_rr = picked
    bbox_l, bbox_r = build_bounding_boxes(ep, cfg, image.data.shape)
    range_l = background_range(image, meniscus, bbox_l)
    range_r = background_range(image, meniscus, bbox_r)
    if range_l is None or range_r is None:
        return image, mask, None

    out_img = image.data.copy()
    xs = np.arange(image.width)[None, :]
    for bbox, rng_bounds, cond in (
        (bbox_l, range_l, xs < x_rl),
        (bbox_r, range_r, xs > x_rr),
    ):
        in_box = np.zeros(image.data.shape, dtype=bool)
        in_box[bbox.y0 : bbox.y1 + 1, bbox.x0 : bbox.x1 + 1] = True
        region = in_box & np.broadcast_to(cond, image.data.shape)
        count = int(region.sum())
        draws = rng.uniform(rng_bounds[0], rng_bounds[1], size=count).astype(np.float32)
        out_img[region] = draws  # row-major fill

    out_mask = mask.data.copy()
    trim = meniscus & ((xs < x_rl) | (xs > x_rr))
    out_mask[trim] = 0

    d, d_left, d_right = replacement_spans(ep, topology)
    plan = EraPlan(
        kind=topology.kind,
        extremes=ep,
        d=d,
        d_left=d_left,
        d_right=d_right,
        x_rl=x_rl,
        x_rr=x_rr,
        bbox_l=bbox_l,
        bbox_r=bbox_r,
        range_l=range_l,
        range_r=range_r,
    )
    return Image2D(out_img), ClassMask(out_mask, mask.num_classes), plan
