import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostnetv3.ghostnet import Sequential, build_model, mini_spec
from ghostnetv3.nn import Linear, ReLU, one_hot
from ghostnetv3.training import (
    AugmentConfig,
    EMAState,
    ImageSet,
    KDConfig,
    Moments,
    OptimizerConfig,
    Recipe,
    ScheduleConfig,
    TrainingDiverged,
    cross_entropy,
    cutmix,
    ema_update,
    kd_loss,
    kd_loss_grad,
    kd_loss_literal,
    lamb_trust_ratio,
    lr_at,
    mix_batch,
    mixup,
    optimizer_step,
    rand_transforms,
    random_erasing,
    total_loss,
    train_loop,
)
from ghostnetv3.training.loop import init_state, iter_batches, train_step
from ghostnetv3.training.losses import cross_entropy_grad

from conftest import directional_check

# ---------------------------------------------------------------------------
# losses


@pytest.mark.parametrize("c", [2, 10, 1000])
def test_cross_entropy_uniform_is_log_c(c):
    assert cross_entropy(np.zeros((3, c)), np.zeros(3, int)) == pytest.approx(math.log(c), rel=1e-12)


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.array([[60.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0]) < 1e-20


def test_cross_entropy_random_case_vs_float64_reference(rng):
    logits = rng.standard_normal((6, 5)) * 3
    labels = rng.integers(0, 5, 6)
    ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[l] for row, l in zip(logits, labels)])
    assert cross_entropy(logits, labels) == pytest.approx(ref, rel=1e-12)


def test_kd_zero_on_equal_logits(rng):
    z = rng.standard_normal((8, 10)) * 4
    for tau in (0.5, 1.0, 4.0):
        assert abs(kd_loss(z, z, tau)) <= 1e-9


def test_kd_analytic_value():
    # p_t(0) / p_s(0) = e and p_t(1) / p_s(1) = 1/e, so KL = p_t(0) - p_t(1)
    expected = math.tanh(0.5)
    assert expected == pytest.approx(0.46212, abs=1e-5)
    assert kd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0) == pytest.approx(0.46212, abs=1e-4)


def test_kd_rejects_bad_tau_and_shapes():
    with pytest.raises(ValueError):
        kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)
    with pytest.raises(ValueError):
        kd_loss(np.zeros((1, 2)), np.zeros((1, 3)), 1.0)
    with pytest.raises(ValueError):
        KDConfig(alpha=1.5)
    with pytest.raises(ValueError):
        KDConfig(temperature=-1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.25, 8.0))
def test_kd_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    assert kd_loss(rng.standard_normal((4, 6)) * 5, rng.standard_normal((4, 6)) * 5, tau) >= 0.0


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("tau", [1.0, 4.0])
def test_kd_gradient_matches_finite_differences(seed, tau):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((4, 5)) * 2
    t = rng.standard_normal((4, 5)) * 2
    a, n = directional_check(lambda: kd_loss(s, t, tau), [s], [kd_loss_grad(s, t, tau)], rng, eps=1e-4)
    assert abs(a - n) <= 1e-4 * max(abs(n), 1e-4)


def test_kd_gradient_magnitude_comparable_across_tau(rng):
    s = rng.standard_normal((16, 10)) * 2
    t = rng.standard_normal((16, 10)) * 2
    ratio = np.linalg.norm(kd_loss_grad(s, t, 1.0)) / np.linalg.norm(kd_loss_grad(s, t, 4.0))
    assert 0.2 <= ratio <= 5


def test_kd_literal_variant_differs():
    s, t = np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])
    assert kd_loss_literal(s, t, 1.0) == pytest.approx(kd_loss(t, s, 1.0), rel=1e-9)
    assert kd_loss_literal(s, t, 2.0) != pytest.approx(kd_loss(s, t, 2.0))


def test_total_loss_blend():
    assert total_loss(2.0, 5.0, 0.0) == 2.0
    assert total_loss(2.0, 5.0, 1.0) == 5.0
    assert total_loss(2.0, 5.0, 0.5) == 3.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


# ---------------------------------------------------------------------------
# EMA


def test_ema_closed_form():
    st_ = EMAState({"w": np.zeros(3, np.float32)}, decay=0.9)
    for _ in range(2):
        ema_update(st_, {"w": np.ones(3, np.float32)})
    assert np.all(np.abs(st_.shadow["w"] - 0.19) <= 1e-7)
    assert st_.step == 2


def test_ema_extreme_decays(rng):
    w = {"a": rng.standard_normal(4).astype(np.float32)}
    s0 = EMAState({"a": np.zeros(4, np.float32)}, 0.0)
    assert np.array_equal(ema_update(s0, w).shadow["a"], w["a"])
    s1 = EMAState({"a": np.full(4, 3.0, np.float32)}, 1.0)
    assert np.array_equal(ema_update(s1, w).shadow["a"], np.full(4, 3.0))


def test_ema_default_decay_and_mismatch():
    s = EMAState.from_weights({"a": np.zeros(2)})
    assert s.decay == 0.9999
    with pytest.raises(KeyError):
        ema_update(s, {"b": np.zeros(2)})
    with pytest.raises(ValueError):
        ema_update(s, {"a": np.zeros(3)})


@settings(max_examples=50, deadline=None)
@given(beta=st.floats(0.0, 1.0), start=st.floats(-100, 100), target=st.floats(-100, 100))
def test_ema_is_contraction(beta, start, target):
    s = EMAState({"w": np.array([start])}, beta)
    prev = abs(start - target)
    for _ in range(5):
        ema_update(s, {"w": np.array([target])})
        cur = abs(float(s.shadow["w"][0]) - target)
        assert cur <= prev + 1e-9 * max(1.0, abs(target))
        prev = cur


# ---------------------------------------------------------------------------
# schedules


def test_cosine_endpoints_and_midpoint():
    cfg = ScheduleConfig("cosine", lr_max=0.005, lr_min=1e-5, total_steps=100)
    assert lr_at(cfg, 0) == 0.005
    assert lr_at(cfg, 100) == 1e-5
    assert lr_at(cfg, 50) == pytest.approx((0.005 + 1e-5) / 2, rel=1e-12)


def test_default_initial_lr():
    assert lr_at(ScheduleConfig(total_steps=10), 0) == 0.005


def test_step_schedule():
    cfg = ScheduleConfig("step", lr_max=1.0, total_steps=100, milestones=(30, 60), factor=0.1)
    assert [lr_at(cfg, t) for t in (0, 29, 30, 59, 60, 99)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


def test_warmup_ramp():
    cfg = ScheduleConfig("cosine", lr_max=1.0, total_steps=100, warmup_steps=4)
    assert [lr_at(cfg, t) for t in range(4)] == [0.25, 0.5, 0.75, 1.0]


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(lr_min=1.0, lr_max=0.1)
    with pytest.raises(ValueError):
        ScheduleConfig(total_steps=0)
    with pytest.raises(ValueError):
        ScheduleConfig(kind="linear")


@settings(max_examples=50, deadline=None)
@given(kind=st.sampled_from(["step", "cosine"]), total=st.integers(1, 500),
       lo=st.floats(0, 1e-3), hi=st.floats(1e-3, 1.0),
       ms=st.lists(st.integers(0, 500), max_size=4))
def test_lr_monotone_non_increasing(kind, total, lo, hi, ms):
    cfg = ScheduleConfig(kind, lr_max=hi, lr_min=lo, total_steps=total, milestones=tuple(ms))
    lrs = [lr_at(cfg, t) for t in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------------------
# optimisers


def test_zero_grad_zero_decay_is_noop(rng):
    for kind in ("sgd_momentum", "lamb"):
        w = rng.standard_normal((3, 3)).astype(np.float32)
        before = w.copy()
        optimizer_step(OptimizerConfig(kind, weight_decay=0.0), {"w": w}, {"w": np.zeros_like(w)}, 0.1, Moments())
        assert np.array_equal(w, before)


def test_sgd_first_step(rng):
    w = rng.standard_normal(4).astype(np.float32)
    g = rng.standard_normal(4).astype(np.float32)
    expected = w - np.float32(0.1) * g
    optimizer_step(OptimizerConfig("sgd_momentum", weight_decay=0.0), {"w": w}, {"w": g}, 0.1, Moments())
    assert np.allclose(w, expected, atol=1e-7)


def test_sgd_momentum_accumulates():
    w = np.zeros(1, np.float32)
    m = Moments()
    cfg = OptimizerConfig("sgd_momentum", weight_decay=0.0, momentum=0.9)
    for _ in range(2):
        optimizer_step(cfg, {"w": w}, {"w": np.ones(1, np.float32)}, 1.0, m)
    assert w[0] == pytest.approx(-(1 + 1.9), rel=1e-6)


def test_lamb_first_step_on_two_vector():
    """Hand recomputation in float64 of one LAMB step with decoupled decay."""
    w0 = np.array([[3.0, 4.0]])
    g = np.array([[0.5, -1.0]])
    lr, wd, b1, b2, eps = 0.1, 0.05, 0.9, 0.999, 1e-6
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    u = m_hat / (np.sqrt(v_hat) + eps) + wd * w0
    ratio = 5.0 / math.sqrt(float(np.sum(u * u)))
    expected = w0 - lr * ratio * u
    w = w0.astype(np.float32)
    optimizer_step(OptimizerConfig("lamb", wd, b1, b2, eps), {"w": w}, {"w": g.astype(np.float32)}, lr, Moments())
    assert np.allclose(w, expected, rtol=1e-6)
    assert lamb_trust_ratio(w0, u) == pytest.approx(ratio, rel=1e-12)


def test_lamb_trust_ratio_clipping():
    assert lamb_trust_ratio(np.array([100.0]), np.array([1.0])) == 10.0
    assert lamb_trust_ratio(np.zeros(2), np.ones(2)) == 1.0
    assert lamb_trust_ratio(np.ones(2), np.zeros(2)) == 1.0


def test_weight_decay_skips_vectors():
    b = np.ones(3, np.float32)
    optimizer_step(OptimizerConfig("sgd_momentum", weight_decay=0.5), {"b": b}, {"b": np.zeros(3, np.float32)},
                   1.0, Moments())
    assert np.array_equal(b, np.ones(3))
    with pytest.raises(ValueError):
        OptimizerConfig("adam")


# ---------------------------------------------------------------------------
# augmentation


def _pair(rng, shape=(3, 8, 8)):
    return (rng.random(shape).astype(np.float32), rng.random(shape).astype(np.float32),
            one_hot(np.array([1]), 4)[0], one_hot(np.array([3]), 4)[0])


def test_mixup_cases(rng):
    xi, xj, yi, yj = _pair(rng)
    r = mixup(xi, xj, yi, yj, 1.0)
    assert np.array_equal(r.x, xi) and np.array_equal(r.y, yi)
    r = mixup(xi, xj, yi, yj, 0.5)
    assert np.allclose(r.x, (xi + xj) / 2, atol=1e-7)
    r = mixup(xi, xj, yi, yj, 0.3)
    assert r.x.mean() == pytest.approx(0.3 * xi.mean() + 0.7 * xj.mean(), rel=1e-5)
    with pytest.raises(ValueError):
        mixup(xi, xj, yi, yj, 1.2)


def test_cutmix_cases(rng):
    xi, xj, yi, yj = _pair(rng)
    r = cutmix(xi, xj, yi, yj, (2, 2, 0, 0))
    assert np.array_equal(r.x, xi) and r.weights == (1.0, 0.0)
    r = cutmix(xi, xj, yi, yj, (0, 0, 8, 8))
    assert np.array_equal(r.x, xj) and r.weights == (0.0, 1.0)
    r = cutmix(xi, xj, yi, yj, (1, 2, 3, 5))
    assert r.weights[0] == 1 - 15 / 64
    assert np.array_equal(r.x[:, 1:4, 2:7], xj[:, 1:4, 2:7])
    # regions hanging off the image are clipped before weighing
    r = cutmix(xi, xj, yi, yj, (-2, 6, 4, 4))
    assert r.weights[1] == 4 / 64


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(0.0, 1.0), top=st.integers(-8, 16), left=st.integers(-8, 16),
       h=st.integers(0, 16), w=st.integers(0, 16))
def test_mix_label_weights_sum_to_one(lam, top, left, h, w):
    rng = np.random.default_rng(0)
    xi, xj, yi, yj = _pair(rng)
    for r in (mixup(xi, xj, yi, yj, lam), cutmix(xi, xj, yi, yj, (top, left, h, w))):
        assert r.weights[0] + r.weights[1] == 1.0
        assert r.y.sum() == pytest.approx(1.0, abs=1e-12)


def test_random_erasing_identity_when_p_zero(rng):
    x = rng.random((4, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(random_erasing(x, rng, AugmentConfig(erasing_prob=0.0)), x)


@pytest.mark.parametrize("seed", range(10))
def test_random_erasing_touches_one_rectangle(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 16, 16)).astype(np.float32) + 2.0  # erased values are < 1
    out = random_erasing(x, rng, AugmentConfig(erasing_prob=1.0))
    changed = np.any(out != x, axis=0)
    assert changed.any()
    rows, cols = np.where(changed)
    box = np.zeros_like(changed)
    box[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
    assert np.array_equal(changed, box)                 # a single axis-aligned rectangle
    assert np.array_equal(out[:, ~changed], x[:, ~changed])
    area = changed.sum() / changed.size
    assert 0.0 < area <= 1 / 3 + 0.05


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(erasing_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(erasing_area=(0.0, 0.5))
    with pytest.raises(ValueError):
        AugmentConfig(mixup_alpha=0)


def test_rand_transforms_keep_shape_and_range(rng):
    x = rng.random((3, 16, 16)).astype(np.float32)
    for _ in range(20):
        y = rand_transforms(x, rng)
        assert y.shape == x.shape and y.dtype == np.float32
        assert y.min() >= 0.0 and y.max() <= 1.0


def test_mix_batch_soft_targets(rng):
    x = rng.random((6, 3, 8, 8)).astype(np.float32)
    y = np.arange(6) % 3
    for cfg in (AugmentConfig(mixup=True), AugmentConfig(cutmix=True), AugmentConfig(mixup=True, cutmix=True)):
        xm, soft, w, used = mix_batch(x, y, rng, cfg, 3)
        assert xm.shape == x.shape and soft.shape == (6, 3)
        assert np.allclose(soft.sum(axis=1), 1.0) and w[0] + w[1] == 1.0
        assert used in ("mixup", "cutmix")
    xm, soft, _, used = mix_batch(x, y, rng, AugmentConfig(), 3)
    assert used == "none" and xm is x


# ---------------------------------------------------------------------------
# loop


class _Net(Sequential):
    def forward(self, x, train=False):
        return super().forward(x, train).reshape(x.shape[0], -1)


def test_two_layer_net_separates_toy_set():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 2)).astype(np.float32)
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x += np.where(y == 1, 0.3, -0.3)[:, None].astype(np.float32)    # margin
    net = _Net([Linear.init(2, 16, rng), ReLU(), Linear.init(16, 2, rng)])
    for layer in net.layers[::2]:
        layer.weight[...] = rng.normal(0, 0.5, layer.weight.shape)
    recipe = Recipe(optimizer=OptimizerConfig("sgd_momentum", weight_decay=0.0), ema_decay=0.0)
    state = init_state(net, recipe)
    soft = one_hot(y, 2)
    xin = x[:, :, None, None]
    for step in range(200):
        train_step(state, xin, soft, 0.1, recipe)
        if np.all(np.argmax(net.forward(xin), axis=1) == y):
            break
    assert np.all(np.argmax(net.forward(xin), axis=1) == y)
    assert step < 200


def _tiny_data(n=64, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    x = rng.random((n, 3, 16, 16)).astype(np.float32) * 0.3
    for c in range(classes):
        x[y == c, c % 3, (c // 3) * 8:(c // 3) * 8 + 8] += 0.6
    return ImageSet(np.clip(x, 0, 1), y, classes)


def _recipe(**kw):
    base = dict(schedule=ScheduleConfig(lr_max=0.03), augment=AugmentConfig(), ema_decay=0.9, epochs=2,
                batch_size=16, seed=3)
    base.update(kw)
    return Recipe(**base)


def _model(seed=0):
    return build_model(mini_spec(width=0.5, num_classes=4), seed=seed)


def test_train_loop_metrics_and_determinism():
    data = _tiny_data()
    a = train_loop(_model(), data, data, _recipe())
    b = train_loop(_model(), data, data, _recipe())
    assert [list(r) for r in a.metrics] == [["epoch", "lr", "train_loss", "val_top1_raw", "val_top1_ema"]] * 2
    assert a.metrics == b.metrics
    assert a.step == 2 * (64 // 16)


def test_alpha_zero_matches_plain_ce_bitwise():
    data = _tiny_data()
    teacher = build_model(mini_spec(width=1.0, num_classes=4), seed=9, folded=True)
    plain = train_loop(_model(), data, None, _recipe())
    kd0 = train_loop(_model(), data, None, _recipe(kd=KDConfig(alpha=0.0, teacher="model")), teacher=teacher)
    assert [r["train_loss"] for r in plain.metrics] == [r["train_loss"] for r in kd0.metrics]
    for (k, v), (_, w) in zip(plain.model.named_parameters(), kd0.model.named_parameters()):
        assert np.array_equal(v, w), k


def test_kd_with_logit_file_teacher():
    data = _tiny_data()
    logits = np.random.default_rng(0).standard_normal((len(data), 4)).astype(np.float32)
    st_ = train_loop(_model(), data, None, _recipe(epochs=1, kd=KDConfig(alpha=0.5, teacher="file")), logits)
    assert np.isfinite(st_.metrics[0]["train_loss"])
    with pytest.raises(ValueError):
        train_loop(_model(), data, None, _recipe(kd=KDConfig(alpha=0.5)))
    with pytest.raises(ValueError):
        train_loop(_model(), data, None, _recipe(kd=KDConfig(alpha=0.5)), logits[:3])


def test_worker_threads_give_identical_batches():
    data = _tiny_data()
    r = _recipe(augment=AugmentConfig(mixup=True, cutmix=True))
    inline = list(iter_batches(data, r, 1, workers=0))
    threaded = list(iter_batches(data, r, 1, workers=3))
    assert len(inline) == len(threaded)
    for (x1, y1, i1), (x2, y2, i2) in zip(inline, threaded):
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2) and np.array_equal(i1, i2)


def test_divergence_is_reported():
    data = _tiny_data()
    recipe = _recipe(schedule=ScheduleConfig(lr_max=1e30), optimizer=OptimizerConfig("sgd_momentum"))
    with np.errstate(all="ignore"), pytest.raises((TrainingDiverged, FloatingPointError)):
        train_loop(_model(), data, None, recipe)


def test_cross_entropy_grad_shape(rng):
    g = cross_entropy_grad(rng.standard_normal((3, 4)), [0, 1, 2])
    assert g.shape == (3, 4) and np.allclose(g.sum(axis=1), 0, atol=1e-7)
