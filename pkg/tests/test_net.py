import math

import numpy as np
import pytest

from eraseg import net
from eraseg.era import EraConfig
from eraseg.grid import ClassMask, Image2D
from eraseg.seeding import stream_rng
from oracles import conv3x3_oracle


def small_params(seed=0, k=3, depth=4, c=3, dtype=np.float64):
    return net.init_params(k, depth, c, stream_rng(seed, "test-params"), dtype=dtype)


class TestInit:
    def test_deterministic(self):
        a = net.init_params(4, 6, 3, np.random.default_rng(5))
        b = net.init_params(4, 6, 3, np.random.default_rng(5))
        for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_biases_zero(self):
        p = net.init_params(4, 6, 3, np.random.default_rng(0))
        assert not p.conv1_b.any()
        assert not p.conv2_b.any()
        assert not p.head_b.any()

    def test_kaiming_std(self):
        # conv1 fan_in = 9 -> std = sqrt(2/9) ~ 0.4714, estimated over >= 1e4 draws
        draws = []
        for seed in range(312):  # 312 * 36 > 1e4
            p = net.init_params(4, 1, 1, np.random.default_rng(seed), dtype=np.float64)
            draws.append(p.conv1_w.ravel())
        sample_std = float(np.std(np.concatenate(draws)))
        want = math.sqrt(2.0 / 9.0)
        assert abs(sample_std - want) / want < 0.05

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            net.init_params(0, 4, 3, np.random.default_rng(0))


class TestForward:
    def test_zero_weights_uniform(self):
        p = small_params()
        for _, arr in p.arrays():
            arr[...] = 0.0
        fp = net.forward(p, np.random.default_rng(0).uniform(0, 1, (6, 6)))
        np.testing.assert_allclose(fp.probs, 1.0 / 3.0, atol=1e-12)

    def test_softmax_normalization(self):
        p = small_params(1)
        fp = net.forward(p, np.random.default_rng(1).uniform(0, 1, (7, 5)))
        np.testing.assert_allclose(fp.probs.sum(axis=0), 1.0, atol=1e-6)
        assert fp.feature_map.min() >= 0.0

    def test_matches_conv_oracle(self):
        # hand-set single-channel kernels on a 5x5 input
        rng = np.random.default_rng(3)
        p = net.init_params(2, 2, 2, rng, dtype=np.float64)
        x = rng.uniform(0, 1, (5, 5))
        fp = net.forward(p, x)
        h1 = np.maximum(conv3x3_oracle((x[None] - 0.5) * 2.0, p.conv1_w, p.conv1_b), 0)
        h2 = np.maximum(conv3x3_oracle(h1, p.conv2_w, p.conv2_b), 0)
        logits = np.einsum("cd,dhw->chw", p.head_w, h2) + p.head_b[:, None, None]
        np.testing.assert_allclose(fp.logits, logits, rtol=1e-10, atol=1e-12)

    def test_nonfinite_raises(self):
        p = small_params()
        p.head_w[...] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            net.forward(p, np.ones((6, 6)))

    def test_spatial_dims_preserved(self):
        p = small_params()
        fp = net.forward(p, np.zeros((9, 13)))
        assert fp.logits.shape == (3, 9, 13)
        assert fp.feature_map.shape == (4, 9, 13)


def fd_logits_grad(loss_fn, logits, h=1e-6):
    from eraseg.proto import class_softmax

    grad = np.zeros_like(logits)
    flat = logits.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(class_softmax(logits))
        flat[i] = orig - h
        down = loss_fn(class_softmax(logits))
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


class TestLosses:
    def test_perfect_prediction_near_zero(self):
        gt = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        probs = np.zeros((2, 2, 2))
        for y in range(2):
            for x in range(2):
                probs[gt[y, x], y, x] = 1.0
        val, _ = net.supervised_loss(probs, gt)
        assert val < 1e-5

    def test_uniform_ce_is_ln2(self):
        gt = np.array([[0, 1], [1, 0]], dtype=np.uint8)  # balanced, C=2
        probs = np.full((2, 2, 2), 0.5)
        val, _ = net.cross_entropy(probs, gt)
        assert val == pytest.approx(math.log(2), abs=1e-12)

    def test_supervised_gradient_fd(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4, 4))
        gt = rng.integers(0, 2, (4, 4)).astype(np.uint8)
        from eraseg.proto import class_softmax

        probs = class_softmax(logits)
        _, grad = net.supervised_loss(probs, gt)
        fd = fd_logits_grad(lambda p: net.supervised_loss(p, gt)[0], logits)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
        assert (np.abs(grad - fd) / denom).max() < 1e-4

    def test_unsup_uniform_is_ln4(self):
        student = np.full((4, 3, 3), 0.25)
        teacher = np.random.default_rng(1).dirichlet(np.ones(4), size=(3, 3)).transpose(2, 0, 1)
        val, _ = net.unsupervised_loss(student, teacher)
        assert val == pytest.approx(math.log(4), abs=1e-12)

    def test_unsup_hard_labels_ignore_teacher_magnitudes(self):
        rng = np.random.default_rng(2)
        student = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
        teacher = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
        val1, g1 = net.unsupervised_loss(student, teacher)
        # sharpen the teacher without moving any argmax
        sharp = teacher**3
        sharp /= sharp.sum(axis=0, keepdims=True)
        assert np.array_equal(teacher.argmax(axis=0), sharp.argmax(axis=0))
        val2, g2 = net.unsupervised_loss(student, sharp)
        assert val1 == val2
        assert np.array_equal(g1, g2)

    def test_unsup_perfect_student(self):
        teacher = np.random.default_rng(3).dirichlet(np.ones(3), size=(3, 3)).transpose(2, 0, 1)
        hard = teacher.argmax(axis=0)
        student = np.full((3, 3, 3), 1e-9)
        for y in range(3):
            for x in range(3):
                student[hard[y, x], y, x] = 1.0
        student /= student.sum(axis=0, keepdims=True)
        val, _ = net.unsupervised_loss(student, teacher)
        assert val < 1e-6

    def test_unsup_soft_mode(self):
        rng = np.random.default_rng(4)
        student = rng.dirichlet(np.ones(3), size=(2, 2)).transpose(2, 0, 1)
        teacher = rng.dirichlet(np.ones(3), size=(2, 2)).transpose(2, 0, 1)
        val, _ = net.unsupervised_loss(student, teacher, soft=True)
        want = float(-(teacher * np.log(student)).sum() / 4)
        assert val == pytest.approx(want, rel=1e-9)

    def test_dice_prefers_overlap(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        good = np.zeros((2, 4, 4))
        good[1] = (gt == 1) * 0.9 + 0.05
        good[0] = 1 - good[1]
        bad = np.zeros((2, 4, 4))
        bad[1] = (gt == 0) * 0.9 + 0.05
        bad[0] = 1 - bad[1]
        assert net.soft_dice_loss(good, gt)[0] < net.soft_dice_loss(bad, gt)[0]


class TestSchedules:
    def test_lambda_values(self):
        assert net.lambda_at(200, 200) == pytest.approx(0.1, abs=0)
        assert net.lambda_at(0, 200) == pytest.approx(0.1 * math.exp(-10), rel=1e-12)
        assert net.lambda_at(100, 200) == pytest.approx(0.1 * math.exp(-2.5), rel=1e-12)

    def test_lambda_monotone_bounded(self):
        vals = [net.lambda_at(e, 50) for e in range(51)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert max(vals) <= 0.1

    def test_lambda_domain(self):
        with pytest.raises(ValueError):
            net.lambda_at(5, 4)

    def test_lr_values(self):
        assert net.lr_at(0, 200, 0.01) == pytest.approx(0.01, abs=0)
        assert net.lr_at(200, 200, 0.01) == 0.0
        assert net.lr_at(100, 200, 0.01) == pytest.approx(0.01 * 0.5**0.9, rel=1e-12)

    def test_lr_monotone(self):
        vals = [net.lr_at(e, 40, 0.01) for e in range(41)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestEma:
    def test_alpha_one_keeps_teacher(self):
        t = small_params(0)
        s = small_params(1)
        before = t.copy()
        net.ema_update(t, s, alpha=1.0)
        assert t.allclose(before)

    def test_alpha_zero_copies_student(self):
        t = small_params(0)
        s = small_params(1)
        net.ema_update(t, s, alpha=0.0)
        assert t.allclose(s)

    def test_scalar_value(self):
        t = small_params(0)
        s = small_params(1)
        for _, arr in t.arrays():
            arr[...] = 0.0
        for _, arr in s.arrays():
            arr[...] = 1.0
        net.ema_update(t, s, alpha=0.99)
        np.testing.assert_allclose(t.conv1_w, 0.01, rtol=1e-12)

    def test_linearity_composition(self):
        # with student fixed at 0: two updates with alpha == one update with alpha^2
        alpha = 0.9
        t1 = small_params(0)
        t2 = t1.copy()
        s = t1.zeros_like()
        net.ema_update(t1, s, alpha)
        net.ema_update(t1, s, alpha)
        net.ema_update(t2, s, alpha * alpha)
        for (_, a), (_, b) in zip(t1.arrays(), t2.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_shape_mismatch(self):
        t = small_params(0)
        s = net.init_params(5, 4, 3, np.random.default_rng(0), dtype=np.float64)
        with pytest.raises(ValueError):
            net.ema_update(t, s)

    def test_alpha_domain(self):
        t = small_params(0)
        with pytest.raises(ValueError):
            net.ema_update(t, t, alpha=1.5)


def phantom_items(n, seed=0, size=16, c=4):
    from eraseg import phantom

    cfg = phantom.PhantomConfig(height=size, width=size, noise_std=0.03)
    items = []
    for i in range(n):
        rec = phantom.generate_slice(cfg, f"it{i}", stream_rng(seed, "items", i))
        items.append(net.TrainItem(item_id=rec.item_id, image=rec.image, mask=rec.mask))
    return items


def fresh_state(seed, c=4, with_teacher=False, base_lr=0.01):
    params = net.init_params(4, 6, c, stream_rng(seed, "init"))
    state = net.ModelState(params=params, opt=net.AdamState.fresh(params, base_lr))
    if with_teacher:
        state.teacher = params.copy()
    return state


class TestTrainSteps:
    def test_u1_without_unlabeled_equals_supervised_bitwise(self):
        cfg = net.TrainConfig(epochs=10, batch_size=4, labeled_per_batch=4)
        items = phantom_items(4)
        s1 = fresh_state(7, with_teacher=True)
        s2 = fresh_state(7)
        _, bd1 = net.train_step_u1(
            s1, items, [], epoch=2, cfg=cfg, use_era=True, use_proto=False, era_key=("e",)
        )
        _, bd2 = net.train_step_supervised(
            s2, items, epoch=2, cfg=cfg, use_era=True, era_key=("e",)
        )
        for (_, a), (_, b) in zip(s1.params.arrays(), s2.params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert bd1.l_sup == bd2.l_sup
        assert bd1.lambda_t == 0.0 and bd1.l_consis == 0.0 and bd1.l_unsup == 0.0

    def test_breakdown_identity(self):
        cfg = net.TrainConfig(epochs=10, batch_size=4, labeled_per_batch=2)
        items = phantom_items(4)
        state = fresh_state(3, with_teacher=True)
        _, bd = net.train_step_u1(
            state,
            items[:2],
            items[2:],
            epoch=5,
            cfg=cfg,
            use_era=True,
            use_proto=True,
            era_key=("e",),
        )
        assert bd.total == pytest.approx(bd.l_sup + bd.lambda_t * bd.l_consis + bd.l_unsup, rel=1e-12)
        assert bd.lambda_t == pytest.approx(net.lambda_at(5, 10))
        assert bd.l_consis > 0.0

    def test_supervised_breakdown_structural_zeros(self):
        cfg = net.TrainConfig(epochs=4, batch_size=4)
        state = fresh_state(1)
        _, bd = net.train_step_supervised(
            state, phantom_items(2), epoch=0, cfg=cfg, use_era=False, era_key=("e",)
        )
        assert bd.lambda_t == 0.0
        assert bd.l_consis == 0.0
        assert bd.l_unsup == 0.0
        assert bd.total == bd.l_sup

    def test_loss_decreases_over_50_steps(self):
        cfg = net.TrainConfig(epochs=60, batch_size=4)
        items = phantom_items(4, seed=2)
        state = fresh_state(11)
        first = None
        last = None
        for step in range(50):
            _, bd = net.train_step_supervised(
                state, items, epoch=min(step, 59), cfg=cfg, use_era=False, era_key=("e",)
            )
            if first is None:
                first = bd.total
            last = bd.total
        assert last < first

    def test_mean_teacher_training_deterministic(self):
        cfg = net.TrainConfig(epochs=3, batch_size=4, labeled_per_batch=2)
        items = phantom_items(6, seed=5)
        runs = []
        for _ in range(2):
            model = net.train_mean_teacher(
                items[:2],
                items[2:],
                ("seed", 0),
                cfg,
                num_classes=4,
                use_era=True,
                use_proto=True,
                checkpoint_count=3,
                hidden_channels=4,
                feature_depth=6,
            )
            runs.append(model)
        for (_, a), (_, b) in zip(runs[0].params.arrays(), runs[1].params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert runs[0].checkpoint_epochs == [1, 2, 3]
        assert len(runs[0].checkpoints) == 3
        # final checkpoint is the fully trained student
        for (_, a), (_, b) in zip(runs[0].checkpoints[-1].arrays(), runs[0].params.arrays()):
            assert a.tobytes() == b.tobytes()

    def test_provenance_enforced(self):
        cfg = net.TrainConfig(epochs=1, batch_size=2, labeled_per_batch=2)
        items = phantom_items(2)
        items[0].label_source = "u3"
        with pytest.raises(ValueError, match="label sources"):
            net.train_supervised_model(
                items,
                ("k",),
                cfg,
                num_classes=4,
                use_era=False,
                allowed_sources=frozenset({"ground_truth", "u1_final"}),
            )

    def test_checkpoint_epochs_fractions(self):
        assert net.checkpoint_epochs(40, 5) == [8, 16, 24, 32, 40]
        assert net.checkpoint_epochs(3, 5) == [1, 2, 3]
        assert net.checkpoint_epochs(10, 2) == [5, 10]


class TestGradCheck:
    def test_all_terms_within_tolerance(self):
        report = net.grad_check(seed=1)
        assert report.max_single < 1e-4
        assert report.composed < 1e-3
        assert report.passed()
        assert set(report.per_term) == {"l_sup", "l_unsup", "l_consis"}


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path):
        params = small_params(4, dtype=np.float32)
        opt = net.AdamState.fresh(params, base_lr=0.02)
        opt.step = 7
        opt.m["conv1_w"] += 0.5
        net.save_checkpoint(tmp_path / "ck", params, {"epoch": 3, "seed": 1}, opt=opt)
        back, meta, opt2 = net.load_checkpoint(tmp_path / "ck")
        assert meta["epoch"] == 3
        for (_, a), (_, b) in zip(params.arrays(), back.arrays()):
            assert a.tobytes() == b.tobytes()
        assert opt2 is not None
        assert opt2.step == 7
        assert opt2.base_lr == 0.02
        assert opt2.m["conv1_w"].tobytes() == opt.m["conv1_w"].tobytes()

    def test_params_only(self, tmp_path):
        params = small_params(5, dtype=np.float32)
        net.save_checkpoint(tmp_path / "ck", params, {"epoch": 1})
        _, meta, opt = net.load_checkpoint(tmp_path / "ck")
        assert opt is None
        assert meta["has_optimizer"] is False
