import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import central_difference, conv_loops, pixel_shuffle_loops, rel_error
from pncc_sr.errors import EmptyInputError, StateError
from pncc_sr.geometry import DepthMap
from pncc_sr.pncc import decode_depth
from pncc_sr.srnet import (
    AdamState,
    SrModel,
    TrainConfig,
    adam_step,
    backward_batch,
    bicubic_baseline,
    charbonnier_loss,
    conv2d_backward,
    conv2d_forward,
    forward,
    forward_batch,
    init_model,
    param_count,
    pixel_shuffle,
    pixel_unshuffle,
    super_resolve,
    train,
)
from pncc_sr.synthdata import build_dataset


@pytest.fixture(scope="module")
def tiny_data():
    return build_dataset(4, 4, seed=11, width=32, height=32)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 5, 4))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0, 0, 0] = w[1, 1, 0, 0] = 1.0
    assert np.array_equal(conv2d_forward(x, w, np.zeros(2)), x)


def test_conv_zero_input_gives_bias():
    w = np.random.default_rng(1).random((3, 2, 3, 3))
    out = conv2d_forward(np.zeros((2, 4, 5)), w, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 4, 5)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.abs(conv2d_forward(x, w, b) - conv_loops(x, w, b)).max() < 1e-10


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        conv2d_backward(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 4)))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    gx, gw, gb = conv2d_backward(rng.random((2, 5, 5)), rng.random((3, 2, 3, 3)), np.zeros((3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_unit_impulse_gives_patch():
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 6))
    g = np.zeros((1, 6, 6))
    g[0, 3, 2] = 1.0
    _, gw, gb = conv2d_backward(x, rng.random((1, 2, 3, 3)), g)
    assert np.array_equal(gw[0], x[:, 2:5, 1:4])
    assert gb.tolist() == [1.0]


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((3, 3, 3, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 5, 4))

    def f():
        return float((conv2d_forward(x, w, b) * proj).sum())

    gx, gw, gb = conv2d_backward(x, w, proj)
    assert rel_error(gx, central_difference(f, x)) < 1e-5
    assert rel_error(gw, central_difference(f, w)) < 1e-5
    assert rel_error(gb, central_difference(f, b)) < 1e-5


def test_pixel_shuffle_identity_and_inverse():
    x = np.random.default_rng(5).random((8, 3, 4))
    assert np.array_equal(pixel_shuffle(x, 1), x)
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x)


def test_pixel_shuffle_index_map():
    x = np.arange(16, dtype=float).reshape(4, 2, 2)
    out = pixel_shuffle(x, 2)
    assert out.shape == (1, 4, 4)
    assert np.array_equal(out, pixel_shuffle_loops(x, 2))
    # element (c*r*r + dy*r + dx, y, x) -> (c, y*r + dy, x*r + dx)
    assert out[0, 1 * 2 + 1, 0 * 2 + 0] == x[1 * 2 + 0, 1, 0]


def test_pixel_shuffle_rejects_indivisible():
    with pytest.raises(ValueError):
        pixel_shuffle(np.zeros((3, 2, 2)), 2)


def test_charbonnier_values():
    t = np.random.default_rng(6).random((1, 4, 4))
    loss, grad = charbonnier_loss(t, t, np.ones((4, 4), bool), eps=1e-3)
    assert loss == pytest.approx(1e-3, rel=1e-12) and not grad.any()
    loss, _ = charbonnier_loss(t + 1.0, t, np.ones((4, 4), bool), eps=1e-3)
    hand = math.sqrt(1 + 1e-6)
    assert abs(hand - 1.0000005) < 1e-12
    assert loss == pytest.approx(hand, rel=1e-12)


def test_charbonnier_empty_mask():
    with pytest.raises(EmptyInputError):
        charbonnier_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((2, 2), bool))


def test_charbonnier_gradient_and_locality():
    rng = np.random.default_rng(7)
    pred = rng.random((2, 3, 4, 5))
    target = rng.random((2, 3, 4, 5))
    mask = rng.random((2, 4, 5)) > 0.4

    def f():
        return charbonnier_loss(pred, target, mask)[0]

    loss, grad = charbonnier_loss(pred, target, mask)
    assert rel_error(grad, central_difference(f, pred, 1e-6)) < 1e-6
    assert not grad[np.broadcast_to(~mask[:, None], grad.shape)].any()
    moved = np.where(mask[:, None], target, target + rng.random(target.shape))
    loss2, grad2 = charbonnier_loss(pred, moved, mask)
    assert loss2 == loss and np.array_equal(grad2, grad)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    st = AdamState.zeros_like(p)
    for _ in range(10):
        adam_step(p, [np.zeros(2)], st, 1e-2)
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    rng = np.random.default_rng(8)
    g = rng.standard_normal(50)
    p = [np.zeros(50)]
    adam_step(p, [g], AdamState.zeros_like(p), 1e-3)
    assert np.all(np.sign(p[0]) == -np.sign(g))
    assert np.abs(np.abs(p[0]) - 1e-3).max() < 1e-6


def test_adam_converges_on_quadratic():
    p = [np.array([1.0])]
    st = AdamState.zeros_like(p)
    for _ in range(500):
        adam_step(p, [2 * p[0]], st, 0.1)
    assert abs(p[0][0]) < 1e-3


def test_param_count_closed_forms():
    assert param_count(SrModel("z", "depth", r=1, channels=1, n_layers=1)) == 10
    for c in (1, 4, 32):
        m = SrModel("z", "depth", r=1, channels=c, n_layers=2)
        assert param_count(m) == 9 * c + c + 9 * c + 1
    # default: 3 -> 32, four 32 -> 32, 32 -> 1 * 4**2
    default = (3 * 9 * 32 + 32) + 4 * (32 * 9 * 32 + 32) + (32 * 9 * 16 + 16)
    assert param_count(init_model()) == default == 42512
    assert param_count(init_model()) == sum(p.size for p in init_model().params)


def test_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    for head, inp in (("xyz", "pncc"), ("z", "depth")):
        m = init_model(head, inp, r=2, channels=3, n_layers=3, seed=1)
        m.params[-2][...] = rng.standard_normal(m.params[-2].shape) * 0.5
        x = rng.random((2, m.in_ch, 4, 3))
        y = rng.random((2, m.out_ch, 8, 6))
        mask = rng.random((2, 8, 6)) > 0.3
        out, cache = forward_batch(m, x, keep_cache=True)
        _, g = charbonnier_loss(out, y, mask, eps=0.1)
        grads = backward_batch(m, cache, g)
        for p, gp in zip(m.params, grads):
            num = central_difference(lambda: charbonnier_loss(forward_batch(m, x), y, mask, eps=0.1)[0], p)
            assert rel_error(gp, num) < 1e-5


def test_zero_init_reproduces_bicubic(tiny_data):
    s = tiny_data[0]
    for head in ("xyz", "z"):
        m = init_model(head, "pncc", 4, seed=3)
        pred = super_resolve(m, s.lr, s.hr_intr)
        base = bicubic_baseline(s.lr, s.hr_intr, 4)
        assert np.array_equal(pred.channels[..., 2], base.channels[..., 2])
        assert decode_depth(pred) == decode_depth(base)


def test_r1_keeps_shape():
    m = init_model("xyz", "pncc", r=1, channels=4, n_layers=2)
    x = np.random.default_rng(0).random((3, 5, 7))
    assert forward_batch(m, x[None])[0].shape == (3, 5, 7)


def test_forward_mode_mismatch(tiny_data):
    s = tiny_data[0]
    with pytest.raises(StateError):
        forward(init_model("z", "pncc"), s.lr_depth)
    with pytest.raises(StateError):
        forward(init_model("z", "depth"), s.lr_depth)
    out = forward(init_model("z", "depth"), s.lr_depth, s.lr.norm)
    assert out.shape == (1, s.hr.height, s.hr.width)


def test_depth_map_input_equals_z_channel(tiny_data):
    s = tiny_data[1]
    m = init_model("z", "depth", seed=2)
    m.params[-2][...] = np.random.default_rng(0).standard_normal(m.params[-2].shape) * 0.01
    a = forward(m, s.lr)
    b = forward(m, DepthMap(s.lr_depth.data, s.lr_depth.valid), s.lr.norm)
    assert np.abs(a - b).max() < 1e-12


def test_forward_deterministic_across_thread_counts(tiny_data):
    s = tiny_data[0]
    m = init_model("xyz", "pncc", seed=5)
    m.params[-2][...] = np.random.default_rng(1).standard_normal(m.params[-2].shape) * 0.01
    ref = forward(m, s.lr)
    for n in (1, 2, 4):
        with threadpool_limits(n):
            assert np.array_equal(forward(m, s.lr), ref)


def test_train_with_zero_lr_is_a_no_op(tiny_data):
    m = init_model("z", "pncc", seed=0, channels=8, n_layers=3)
    # whole images, one per batch: each epoch averages the same four losses
    cfg = TrainConfig(lr=0.0, epochs=3, batch_size=1, patch=64)
    out, losses = train(m, tiny_data, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(out.params, m.params))
    assert max(losses) - min(losses) <= 1e-12 * max(losses)


def test_train_is_deterministic(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=2, patch=4, seed=9, head_mode="xyz")
    m = init_model("xyz", "pncc", seed=1, channels=4, n_layers=3)
    a, la = train(m, tiny_data, cfg)
    b, lb = train(m, tiny_data, cfg)
    assert la == lb
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_train_errors(tiny_data):
    m = init_model("z", "pncc")
    with pytest.raises(ValueError):
        train(m, [], TrainConfig())
    with pytest.raises(StateError):
        train(m, tiny_data, TrainConfig(head_mode="xyz"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(head_mode="rgb")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
