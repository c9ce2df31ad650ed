"""Small differentiable segmenter with hand-derived backprop, its losses,
optimizer, schedules, EMA teacher, and the training steps built from them.

Architecture (spatial dims preserved throughout):

    input (H, W)
      -> 3x3 conv, 1 -> k channels, zero pad 1 -> ReLU
      -> 3x3 conv, k -> D channels, zero pad 1 -> ReLU   (feature map F)
      -> 1x1 conv, D -> C channels                        (logits)
      -> per-pixel class softmax                          (probabilities)

Training runs in float32; gradient verification (``grad_check``) rebuilds
everything in float64, where analytic gradients match central finite
differences to ~1e-7.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import proto
from ._kernels import conv3x3_backward, conv3x3_forward
from .era import EraConfig, apply_era
from .grid import ClassMask, Image2D
from .seeding import stream_rng

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")

_LOG_FLOOR = 1e-12
_DICE_EPS = 1e-6


@dataclass
class ModelParams:
    """Named weight arrays of the segmenter; also used as a gradient container."""

    conv1_w: np.ndarray  # (k, 1, 3, 3)
    conv1_b: np.ndarray  # (k,)
    conv2_w: np.ndarray  # (D, k, 3, 3)
    conv2_b: np.ndarray  # (D,)
    head_w: np.ndarray  # (C, D)
    head_b: np.ndarray  # (C,)

    @property
    def hidden_channels(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def feature_depth(self) -> int:
        return self.conv2_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.conv1_w.dtype

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.arrays()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{name: np.zeros_like(arr) for name, arr in self.arrays()})

    def astype(self, dtype: np.dtype) -> "ModelParams":
        return ModelParams(**{name: arr.astype(dtype) for name, arr in self.arrays()})

    def add_scaled(self, other: "ModelParams", scale: float) -> None:
        for name, arr in self.arrays():
            arr += scale * getattr(other, name)

    def allclose(self, other: "ModelParams", rtol: float = 0.0, atol: float = 0.0) -> bool:
        return all(
            np.allclose(arr, getattr(other, name), rtol=rtol, atol=atol)
            for name, arr in self.arrays()
        )


def init_params(
    k: int, depth: int, num_classes: int, rng: np.random.Generator, dtype=np.float32
) -> ModelParams:
    """Kaiming-normal kernels (std = sqrt(2 / fan_in)), zero biases."""
    if min(k, depth, num_classes) < 1:
        raise ValueError("k, depth and num_classes must be >= 1")

    def kaiming(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)

    return ModelParams(
        conv1_w=kaiming((k, 1, 3, 3), 9),
        conv1_b=np.zeros(k, dtype=dtype),
        conv2_w=kaiming((depth, k, 3, 3), k * 9),
        conv2_b=np.zeros(depth, dtype=dtype),
        head_w=kaiming((num_classes, depth), depth),
        head_b=np.zeros(num_classes, dtype=dtype),
    )


@dataclass
class ForwardPass:
    """Activations of one forward evaluation (plus caches for backprop)."""

    feature_map: np.ndarray  # (D, H, W), post-ReLU
    logits: np.ndarray  # (C, H, W)
    probs: np.ndarray  # (C, H, W)
    input_image: np.ndarray  # (1, H, W)
    hidden: np.ndarray  # (k, H, W), post-ReLU


def forward(params: ModelParams, image: Image2D | np.ndarray) -> ForwardPass:
    """Full forward pass; raises on non-finite activations (training bug signal).

    Intensities in [0, 1] are recentered to [-1, 1] before the first
    convolution; zero-bias random kernels on offset-dominated inputs would
    otherwise produce near-constant activations at initialization.
    """
    x = np.asarray(getattr(image, "data", image), dtype=params.dtype)
    if x.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {x.shape}")
    x = (x[None] - 0.5) * 2.0
    hidden = np.maximum(conv3x3_forward(x, params.conv1_w, params.conv1_b), 0)
    feats = np.maximum(conv3x3_forward(hidden, params.conv2_w, params.conv2_b), 0)
    c, d = params.head_w.shape
    logits = (params.head_w @ feats.reshape(d, -1) + params.head_b[:, None]).reshape(
        c, *x.shape[1:]
    )
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite activations in forward pass")
    probs = proto.class_softmax(logits)
    return ForwardPass(
        feature_map=feats, logits=logits, probs=probs, input_image=x, hidden=hidden
    )


def backward(params: ModelParams, fp: ForwardPass, g_logits: np.ndarray) -> ModelParams:
    """Parameter gradients for a given gradient w.r.t. the logits."""
    c, d = params.head_w.shape
    g_mat = g_logits.reshape(c, -1)
    f_mat = fp.feature_map.reshape(d, -1)
    g_head_w = g_mat @ f_mat.T
    g_head_b = g_mat.sum(axis=1)
    g_feats = (params.head_w.T @ g_mat).reshape(fp.feature_map.shape)
    g_a2 = g_feats * (fp.feature_map > 0)
    g_hidden, g_conv2_w, g_conv2_b = conv3x3_backward(fp.hidden, params.conv2_w, g_a2)
    g_a1 = g_hidden * (fp.hidden > 0)
    _, g_conv1_w, g_conv1_b = conv3x3_backward(fp.input_image, params.conv1_w, g_a1)
    return ModelParams(
        conv1_w=g_conv1_w,
        conv1_b=g_conv1_b,
        conv2_w=g_conv2_w,
        conv2_b=g_conv2_b,
        head_w=g_head_w,
        head_b=g_head_b,
    )


def predict_mask(params: ModelParams, image: Image2D | np.ndarray) -> ClassMask:
    """Argmax segmentation (ties resolve to the lowest class index)."""
    fp = forward(params, image)
    return ClassMask(fp.probs.argmax(axis=0).astype(np.uint8), params.num_classes)


# ---------------------------------------------------------------------------
# losses: each returns (value, gradient w.r.t. logits)

def _softmax_vjp(probs: np.ndarray, g_sigma: np.ndarray) -> np.ndarray:
    return probs * (g_sigma - (g_sigma * probs).sum(axis=0, keepdims=True))


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy against a hard label mask."""
    c = probs.shape[0]
    n = target.size
    onehot = np.zeros_like(probs)
    yy, xx = np.indices(target.shape)
    onehot[target.astype(np.intp), yy, xx] = 1
    value = float(-(onehot * np.log(np.maximum(probs, _LOG_FLOOR))).sum() / n)
    grad = (probs - onehot) / n
    return value, grad


def soft_cross_entropy(probs: np.ndarray, target_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy against a soft (probability) target."""
    n = probs.shape[1] * probs.shape[2]
    value = float(-(target_probs * np.log(np.maximum(probs, _LOG_FLOOR))).sum() / n)
    grad = (probs - target_probs) / n
    return value, grad


def soft_dice_loss(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean soft Dice loss over foreground classes, 1 - (2*overlap+eps)/(sums+eps)."""
    c = probs.shape[0]
    if c < 2:
        return 0.0, np.zeros_like(probs)
    g_sigma = np.zeros_like(probs)
    n_fg = c - 1
    total = 0.0
    for j in range(1, c):
        gj = (target == j).astype(probs.dtype)
        sj = probs[j]
        a = 2.0 * float((sj * gj).sum()) + _DICE_EPS
        b = float(sj.sum()) + float(gj.sum()) + _DICE_EPS
        total += 1.0 - a / b
        g_sigma[j] = -(2.0 * gj * b - a) / (b * b) / n_fg
    return total / n_fg, _softmax_vjp(probs, g_sigma)


def supervised_loss(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * cross-entropy + 0.5 * soft Dice against ground truth labels."""
    ce_val, ce_grad = cross_entropy(probs, target)
    dice_val, dice_grad = soft_dice_loss(probs, target)
    return 0.5 * ce_val + 0.5 * dice_val, 0.5 * ce_grad + 0.5 * dice_grad


def unsupervised_loss(
    student_probs: np.ndarray, teacher_probs: np.ndarray, soft: bool = False
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the student against the teacher's prediction.

    Hard mode (default) targets the teacher argmax (ties to the lowest class
    index); soft mode targets the full teacher distribution. No gradient goes
    to the teacher either way.
    """
    if soft:
        return soft_cross_entropy(student_probs, teacher_probs)
    return cross_entropy(student_probs, teacher_probs.argmax(axis=0))


# ---------------------------------------------------------------------------
# schedules and EMA

def lambda_at(epoch: float, max_epoch: float, peak: float = 0.1) -> float:
    """Gaussian ramp of the consistency weight: peak * exp(-10 (1 - E/E_max)^2)."""
    if max_epoch < 1 or not (0 <= epoch <= max_epoch):
        raise ValueError("need 0 <= epoch <= max_epoch and max_epoch >= 1")
    return peak * math.exp(-10.0 * (1.0 - epoch / max_epoch) ** 2)


def lr_at(epoch: float, total_epoch: float, base_lr: float) -> float:
    """Polynomial decay: base_lr * (1 - epoch/total_epoch)^0.9."""
    if not (0 <= epoch <= total_epoch):
        raise ValueError("need 0 <= epoch <= total_epoch")
    return base_lr * (1.0 - epoch / total_epoch) ** 0.9


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float = 0.99) -> ModelParams:
    """In-place exponential moving average: teacher <- a*teacher + (1-a)*student."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    for name, t_arr in teacher.arrays():
        s_arr = getattr(student, name)
        if t_arr.shape != s_arr.shape:
            raise ValueError(f"shape mismatch for {name}")
        t_arr *= alpha
        t_arr += (1.0 - alpha) * s_arr
    return teacher


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    base_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, base_lr: float = 0.01) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.arrays()},
            v={name: np.zeros_like(arr) for name, arr in params.arrays()},
            base_lr=base_lr,
        )


def adam_step(params: ModelParams, grads: ModelParams, opt: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, arr in params.arrays():
        g = getattr(grads, name)
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# ---------------------------------------------------------------------------
# training state, items, steps

@dataclass
class ModelState:
    """A model under training: weights, optimizer, optional EMA teacher."""

    params: ModelParams
    opt: AdamState
    teacher: ModelParams | None = None


@dataclass
class TrainItem:
    """One training example with its label provenance."""

    item_id: str
    image: Image2D
    mask: ClassMask | None = None
    label_source: str = "ground_truth"  # "ground_truth" | "u1_final" | "u3"


@dataclass
class LossBreakdown:
    l_sup: float = 0.0
    l_consis: float = 0.0
    l_unsup: float = 0.0
    lambda_t: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "l_sup": self.l_sup,
            "l_consis": self.l_consis,
            "l_unsup": self.l_unsup,
            "lambda_t": self.lambda_t,
            "total": self.total,
        }


@dataclass
class EraStats:
    applied: int = 0
    noops: int = 0


@dataclass
class TrainConfig:
    """Optimization settings shared by all stages.

    Defaults are the desk-scale ones; the reference setup from the training
    recipe (200 epochs, batch 8, lr 0.01) is preserved by setting
    ``epochs=200`` explicitly.
    """

    epochs: int = 40
    batch_size: int = 8
    labeled_per_batch: int = 4
    base_lr: float = 0.01
    ema_alpha: float = 0.99
    lambda_peak: float = 0.1
    unsup_soft_targets: bool = False
    era: EraConfig = field(default_factory=EraConfig)
    meniscus_classes: tuple[int, ...] = (1, 2)

    def __post_init__(self) -> None:
        if self.labeled_per_batch > self.batch_size:
            raise ValueError("labeled_per_batch must not exceed batch_size")


def _maybe_era(
    item: TrainItem,
    mask: ClassMask,
    use_era: bool,
    cfg: TrainConfig,
    epoch: int,
    era_key: tuple,
    stats: EraStats | None,
) -> tuple[Image2D, ClassMask]:
    if not use_era:
        return item.image, mask
    rng = stream_rng(*era_key, epoch, item.item_id)
    img, msk, plan = apply_era(item.image, mask, set(cfg.meniscus_classes), cfg.era, rng)
    if stats is not None:
        if plan is None:
            stats.noops += 1
        else:
            stats.applied += 1
    return img, msk


def _accumulate_supervised(
    state: ModelState,
    items: list[TrainItem],
    epoch: int,
    cfg: TrainConfig,
    use_era: bool,
    era_key: tuple,
    grads: ModelParams,
    stats: EraStats | None,
) -> float:
    """Add mean supervised gradients over ``items`` to ``grads``; return the loss."""
    scale = 1.0 / len(items)
    total = 0.0
    for item in items:
        if item.mask is None:
            raise ValueError(f"{item.item_id}: supervised item without a mask")
        img, msk = _maybe_era(item, item.mask, use_era, cfg, epoch, era_key, stats)
        fp = forward(state.params, img)
        value, g_logits = supervised_loss(fp.probs, msk.data)
        total += scale * value
        grads.add_scaled(backward(state.params, fp, g_logits * scale), 1.0)
    return total


def train_step_supervised(
    state: ModelState,
    batch: list[TrainItem],
    epoch: int,
    cfg: TrainConfig,
    use_era: bool,
    era_key: tuple,
    stats: EraStats | None = None,
) -> tuple[ModelState, LossBreakdown]:
    """One Adam step on the supervised loss only (U3/U4-style training)."""
    grads = state.params.zeros_like()
    l_sup = _accumulate_supervised(state, batch, epoch, cfg, use_era, era_key, grads, stats)
    if not math.isfinite(l_sup):
        raise FloatingPointError("non-finite supervised loss")
    adam_step(state.params, grads, state.opt, lr_at(epoch, cfg.epochs, cfg.base_lr))
    bd = LossBreakdown(l_sup=l_sup, total=l_sup)
    return state, bd


def train_step_u1(
    state: ModelState,
    labeled: list[TrainItem],
    unlabeled: list[TrainItem],
    epoch: int,
    cfg: TrainConfig,
    use_era: bool,
    use_proto: bool,
    era_key: tuple,
    stats: EraStats | None = None,
) -> tuple[ModelState, LossBreakdown]:
    """One mean-teacher step: supervised + consistency + unsupervised terms.

    Labeled items are edge-replaced with their ground truth. For each
    unlabeled item the teacher predicts on the raw image, edge replacement
    runs on (image, teacher argmax), and the student consumes the replaced
    image while the unsupervised cross-entropy targets the replaced pseudo
    mask. The prototype consistency target comes from the student's own
    forward pass and is frozen. Finishes with one Adam step and the EMA
    teacher update.
    """
    if state.teacher is None:
        raise ValueError("mean-teacher training needs a teacher in the state")
    grads = state.params.zeros_like()
    bd = LossBreakdown()
    if labeled:
        bd.l_sup = _accumulate_supervised(
            state, labeled, epoch, cfg, use_era, era_key, grads, stats
        )
    if use_proto:
        bd.lambda_t = lambda_at(epoch, cfg.epochs, cfg.lambda_peak)
    if unlabeled:
        scale = 1.0 / len(unlabeled)
        for item in unlabeled:
            teacher_fp = forward(state.teacher, item.image)
            pseudo = ClassMask(
                teacher_fp.probs.argmax(axis=0).astype(np.uint8), state.params.num_classes
            )
            img_s, pseudo_s = _maybe_era(item, pseudo, use_era, cfg, epoch, era_key, stats)
            fp = forward(state.params, img_s)
            if cfg.unsup_soft_targets and not use_era:
                lu, gu = soft_cross_entropy(fp.probs, teacher_fp.probs)
            else:
                lu, gu = cross_entropy(fp.probs, pseudo_s.data)
            g_logits = gu * scale
            bd.l_unsup += scale * lu
            if use_proto:
                bundle = proto.compute_bundle(fp.feature_map, fp.probs)
                lc, gc = proto.consistency_loss(bundle.prototypical, fp.probs)
                bd.l_consis += scale * lc
                g_logits = g_logits + bd.lambda_t * scale * gc
            grads.add_scaled(backward(state.params, fp, g_logits), 1.0)
    bd.total = bd.l_sup + bd.lambda_t * bd.l_consis + bd.l_unsup
    if not math.isfinite(bd.total):
        raise FloatingPointError("non-finite loss in mean-teacher step")
    adam_step(state.params, grads, state.opt, lr_at(epoch, cfg.epochs, cfg.base_lr))
    ema_update(state.teacher, state.params, cfg.ema_alpha)
    return state, bd


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainedModel:
    params: ModelParams
    loss_curve: list[LossBreakdown]
    era_stats: EraStats
    teacher: ModelParams | None = None
    checkpoints: list[ModelParams] = field(default_factory=list)
    checkpoint_epochs: list[int] = field(default_factory=list)


def _epoch_mean(per_step: list[LossBreakdown]) -> LossBreakdown:
    n = len(per_step)
    return LossBreakdown(
        l_sup=sum(b.l_sup for b in per_step) / n,
        l_consis=sum(b.l_consis for b in per_step) / n,
        l_unsup=sum(b.l_unsup for b in per_step) / n,
        lambda_t=per_step[-1].lambda_t,
        total=sum(b.total for b in per_step) / n,
    )


def _wrap_batch(items: list[TrainItem], perm: np.ndarray, start: int, size: int) -> list[TrainItem]:
    n = len(items)
    return [items[int(perm[(start + i) % n])] for i in range(size)]


def checkpoint_epochs(epochs: int, count: int) -> list[int]:
    """1-based epoch stamps at fractions 1/count .. count/count (deduplicated)."""
    stamps = sorted({max(1, math.ceil(epochs * j / count)) for j in range(1, count + 1)})
    return stamps


def train_supervised_model(
    items: list[TrainItem],
    model_rng_key: tuple,
    cfg: TrainConfig,
    num_classes: int,
    use_era: bool,
    hidden_channels: int = 8,
    feature_depth: int = 16,
    allowed_sources: frozenset[str] = frozenset({"ground_truth", "u1_final", "u3"}),
    steps_per_epoch: int | None = None,
) -> TrainedModel:
    """Train a fresh supervised model on ``items`` for ``cfg.epochs`` epochs.

    By default an epoch visits every item once; ``steps_per_epoch`` overrides
    that for stages whose nominal training set is larger than the items
    actually available (self-training stages keep the full dataset's epoch
    length even when the reliable pool is small).
    """
    if not items:
        raise ValueError("cannot train on an empty item list")
    bad = {i.label_source for i in items} - allowed_sources
    if bad:
        raise ValueError(f"disallowed label sources in training set: {sorted(bad)}")
    params = init_params(
        hidden_channels, feature_depth, num_classes, stream_rng(*model_rng_key, "init")
    )
    state = ModelState(params=params, opt=AdamState.fresh(params, cfg.base_lr))
    order_rng = stream_rng(*model_rng_key, "order")
    era_key = (*model_rng_key, "era")
    stats = EraStats()
    curve: list[LossBreakdown] = []
    steps = steps_per_epoch or max(1, math.ceil(len(items) / cfg.batch_size))
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(items))
        per_step = []
        for s in range(steps):
            batch = _wrap_batch(items, perm, s * cfg.batch_size, cfg.batch_size)
            _, bd = train_step_supervised(state, batch, epoch, cfg, use_era, era_key, stats)
            per_step.append(bd)
        curve.append(_epoch_mean(per_step))
    return TrainedModel(params=state.params, loss_curve=curve, era_stats=stats)


def train_mean_teacher(
    labeled: list[TrainItem],
    unlabeled: list[TrainItem],
    model_rng_key: tuple,
    cfg: TrainConfig,
    num_classes: int,
    use_era: bool,
    use_proto: bool,
    checkpoint_count: int = 5,
    hidden_channels: int = 8,
    feature_depth: int = 16,
) -> TrainedModel:
    """Train the student/teacher pair, saving checkpoints at epoch fractions.

    The final checkpoint is always the fully trained student.
    """
    if not labeled:
        raise ValueError("mean-teacher training needs labeled items")
    params = init_params(
        hidden_channels, feature_depth, num_classes, stream_rng(*model_rng_key, "init")
    )
    state = ModelState(
        params=params, opt=AdamState.fresh(params, cfg.base_lr), teacher=params.copy()
    )
    lab_rng = stream_rng(*model_rng_key, "order", "labeled")
    unl_rng = stream_rng(*model_rng_key, "order", "unlabeled")
    era_key = (*model_rng_key, "era")
    stats = EraStats()
    curve: list[LossBreakdown] = []
    stamps = checkpoint_epochs(cfg.epochs, checkpoint_count)
    checkpoints: list[ModelParams] = []
    n_lab, n_unl = len(labeled), len(unlabeled)
    lpb = cfg.labeled_per_batch if n_unl else cfg.batch_size
    upb = cfg.batch_size - lpb if n_unl else 0
    # an epoch sweeps the larger pool once (labeled items recycle as needed)
    steps = max(1, math.ceil(n_lab / lpb), math.ceil(n_unl / upb) if upb else 0)
    for epoch in range(cfg.epochs):
        lab_perm = lab_rng.permutation(n_lab)
        unl_perm = unl_rng.permutation(n_unl) if n_unl else np.empty(0, dtype=np.intp)
        per_step = []
        for s in range(steps):
            lab_batch = _wrap_batch(labeled, lab_perm, s * lpb, lpb)
            unl_batch = _wrap_batch(unlabeled, unl_perm, s * upb, upb) if n_unl else []
            _, bd = train_step_u1(
                state, lab_batch, unl_batch, epoch, cfg, use_era, use_proto, era_key, stats
            )
            per_step.append(bd)
        curve.append(_epoch_mean(per_step))
        if (epoch + 1) in stamps:
            checkpoints.append(state.params.copy())
    return TrainedModel(
        params=state.params,
        loss_curve=curve,
        era_stats=stats,
        teacher=state.teacher,
        checkpoints=checkpoints,
        checkpoint_epochs=stamps,
    )


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    per_term: dict[str, float]
    max_single: float
    composed: float

    @property
    def max_relative_error(self) -> float:
        return max(self.max_single, self.composed)

    def passed(self, single_tol: float = 1e-4, composed_tol: float = 1e-3) -> bool:
        return self.max_single < single_tol and self.composed < composed_tol


def _flat_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in params.arrays()])


def _unflatten_into(params: ModelParams, flat: np.ndarray) -> None:
    pos = 0
    for _, arr in params.arrays():
        arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size


def _max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float((np.abs(analytic - fd) / denom).max())


def _fd_gradient(loss_fn, params: ModelParams, h: float = 1e-5) -> np.ndarray:
    base = _flat_params(params)
    work = params.copy()
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            flat = base.copy()
            flat[i] += sign * h
            _unflatten_into(work, flat)
            grad[i] += sign * loss_fn(work)
    _unflatten_into(work, base)
    return grad / (2.0 * h)


def grad_check(seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of every loss term with central differences.

    Runs a 6x6, 3-class instance in float64. Targets that training treats as
    constants (teacher prediction, frozen prototypical target) are held fixed
    while differentiating.
    """
    rng = stream_rng(seed, "gradcheck")
    k, depth, c, h, w = 4, 5, 3, 6, 6
    params = init_params(k, depth, c, rng, dtype=np.float64)
    teacher = init_params(k, depth, c, rng, dtype=np.float64)
    img_l = rng.uniform(0, 1, (h, w))
    gt = rng.integers(0, c, (h, w)).astype(np.uint8)
    img_u = rng.uniform(0, 1, (h, w))

    teacher_probs = forward(teacher, img_u).probs
    fp0 = forward(params, img_u)
    ss0 = proto.compute_bundle(fp0.feature_map, fp0.probs).prototypical.copy()
    lam = lambda_at(1, 2)

    def analytic(img, loss_of_fp) -> np.ndarray:
        fp = forward(params, img)
        _, g_logits = loss_of_fp(fp)
        return _flat_params(backward(params, fp, g_logits))

    checks = {
        "l_sup": (
            img_l,
            lambda fp: supervised_loss(fp.probs, gt),
            lambda p: supervised_loss(forward(p, img_l).probs, gt)[0],
        ),
        "l_unsup": (
            img_u,
            lambda fp: unsupervised_loss(fp.probs, teacher_probs),
            lambda p: unsupervised_loss(forward(p, img_u).probs, teacher_probs)[0],
        ),
        "l_consis": (
            img_u,
            lambda fp: proto.consistency_loss(ss0, fp.probs),
            lambda p: proto.consistency_loss(ss0, forward(p, img_u).probs)[0],
        ),
    }
    per_term: dict[str, float] = {}
    for name, (img, loss_of_fp, loss_of_params) in checks.items():
        per_term[name] = _max_rel_err(
            analytic(img, loss_of_fp), _fd_gradient(loss_of_params, params)
        )

    def composed_value(p: ModelParams) -> float:
        ls = supervised_loss(forward(p, img_l).probs, gt)[0]
        fp = forward(p, img_u)
        lu = unsupervised_loss(fp.probs, teacher_probs)[0]
        lc = proto.consistency_loss(ss0, fp.probs)[0]
        return ls + lam * lc + lu

    fp_l = forward(params, img_l)
    _, g_sup = supervised_loss(fp_l.probs, gt)
    g_total = _flat_params(backward(params, fp_l, g_sup))
    fp_u = forward(params, img_u)
    _, g_unsup = unsupervised_loss(fp_u.probs, teacher_probs)
    _, g_consis = proto.consistency_loss(ss0, fp_u.probs)
    g_total += _flat_params(backward(params, fp_u, g_unsup + lam * g_consis))
    composed = _max_rel_err(g_total, _fd_gradient(composed_value, params))

    return GradCheckReport(
        per_term=per_term, max_single=max(per_term.values()), composed=composed
    )


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(
    directory, params: ModelParams, meta: dict, opt: AdamState | None = None
) -> None:
    """Write params (and optionally optimizer moments) as tensor files + manifest."""
    from pathlib import Path

    from . import io as eio

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in params.arrays():
        eio.write_tensor(directory / f"{name}.tns", arr)
    manifest = dict(meta)
    manifest["arrays"] = list(PARAM_NAMES)
    manifest["has_optimizer"] = opt is not None
    if opt is not None:
        for name in PARAM_NAMES:
            eio.write_tensor(directory / f"adam_m_{name}.tns", opt.m[name])
            eio.write_tensor(directory / f"adam_v_{name}.tns", opt.v[name])
        manifest["adam"] = {
            "step": opt.step,
            "base_lr": opt.base_lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
        }
    eio.write_json(directory / "checkpoint.json", manifest)


def load_checkpoint(directory) -> tuple[ModelParams, dict, AdamState | None]:
    from pathlib import Path

    from . import io as eio

    directory = Path(directory)
    meta = eio.read_json(directory / "checkpoint.json")
    params = ModelParams(
        **{name: eio.read_tensor(directory / f"{name}.tns") for name in PARAM_NAMES}
    )
    opt = None
    if meta.get("has_optimizer"):
        a = meta["adam"]
        opt = AdamState(
            m={name: eio.read_tensor(directory / f"adam_m_{name}.tns") for name in PARAM_NAMES},
            v={name: eio.read_tensor(directory / f"adam_v_{name}.tns") for name in PARAM_NAMES},
            step=int(a["step"]),
            base_lr=float(a["base_lr"]),
            beta1=float(a["beta1"]),
            beta2=float(a["beta2"]),
            eps=float(a["eps"]),
        )
    return params, meta, opt
