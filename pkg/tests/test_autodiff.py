import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nirlora import autodiff as ad
from nirlora.autodiff import GradTapeError, ShapeError, Tensor
from oracles import check_op_grad, naive_conv2d

finite = st.floats(-20, 20, allow_nan=False, width=32)


def test_matmul_identity_and_zero():
    m = np.array([[1, 2], [3, 4]], np.float32)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    z = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 5))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradcheck(rng):
    errs = check_op_grad(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    assert max(errs) < 1e-3


def test_batched_matmul_gradcheck(rng):
    errs = check_op_grad(ad.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))
    assert max(errs) < 1e-3


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == 1.0 and 0.0 <= big[1] < 1e-40
    # exp(-100) is still representable (subnormal) in float32
    np.testing.assert_allclose(ad.softmax(Tensor([100.0, 0.0])).data[1], 3.72e-44, rtol=0.05)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(arrays(np.float32, (4, 7), elements=finite))
def test_softmax_rows_are_distributions(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(y > 0)


def test_softmax_gradcheck(rng):
    assert check_op_grad(lambda x: ad.softmax(x, axis=-1), rng.normal(size=(3, 5)))[0] < 1e-3


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ad.layer_norm(Tensor([5.0, 5, 5, 5]), one, zero).data, np.zeros(4))
    out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [-1, 1], atol=1e-5)


def test_layer_norm_dim_mismatch():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layer_norm_gradcheck(rng):
    errs = check_op_grad(ad.layer_norm, rng.normal(size=(2, 8)), 1 + 0.1 * rng.normal(size=8), rng.normal(size=8))
    assert max(errs) < 1e-3


def test_gelu_values_and_grad():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(ad.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4
    assert check_op_grad(ad.gelu, np.array([-2.0, -0.5, 0.3, 4.0]))[0] < 1e-3


def test_relu_gradcheck_away_from_kink(rng):
    x = rng.normal(size=20)
    x[np.abs(x) < 0.05] = 0.5
    assert check_op_grad(ad.relu, x)[0] < 1e-3


def test_conv2d_examples():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))
    x = Tensor(np.zeros((1, 14, 14)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    assert ad.conv2d(x, w, dilation=12, padding=12).shape == (1, 14, 14)


def test_conv2d_non_integral_output():
    with pytest.raises(ShapeError, match="not integral"):
        ad.conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


@pytest.mark.parametrize("dilation,padding", [(1, 0), (1, 1), (2, 2), (3, 3)])
def test_conv2d_matches_naive_loop(rng, dilation, padding):
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation, padding=padding).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, dilation, padding), rtol=1e-5, atol=1e-5)


def test_conv2d_gradcheck_dilated(rng):
    errs = check_op_grad(
        lambda x, w, b: ad.conv2d(x, w, b, dilation=2, padding=2),
        rng.normal(size=(2, 5, 5)),
        rng.normal(size=(3, 2, 3, 3)),
        rng.normal(size=3),
    )
    assert max(errs) < 1e-3


def test_conv2d_batched_gradcheck_strided(rng):
    errs = check_op_grad(
        lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
        rng.normal(size=(2, 2, 5, 5)),
        rng.normal(size=(2, 2, 3, 3)),
    )
    assert max(errs) < 1e-3


def test_bilinear_identity_and_replication(rng):
    x = rng.normal(size=(2, 5, 7)).astype(np.float32)
    np.testing.assert_array_equal(ad.bilinear_resize(Tensor(x), 5, 7).data, x)
    np.testing.assert_array_equal(ad.bilinear_resize(Tensor([[[3.5]]]), 4, 4).data, np.full((1, 4, 4), 3.5))


def test_bilinear_half_pixel_hand_values():
    # the input is the linear ramp 2*y + x, so the output is 2*s(i) + s(j) at the
    # clamped half-pixel source coordinates s = (0, 0.25, 0.75, 1)
    x = Tensor([[[0.0, 1.0], [2.0, 3.0]]])
    out = ad.bilinear_resize(x, 4, 4).data[0]
    s = np.array([0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out, 2 * s[:, None] + s[None, :], atol=1e-6)
    assert out[0, 0] == 0.0 and abs(out[3, 3] - 3.0) < 1e-6


def test_bilinear_gradcheck(rng):
    assert check_op_grad(lambda x: ad.bilinear_resize(x, 7, 5), rng.normal(size=(2, 3, 4)))[0] < 1e-3


def test_adaptive_avg_pool():
    assert ad.adaptive_avg_pool(Tensor(np.full((1, 3, 4), 3.0))).data.item() == 3.0
    assert ad.adaptive_avg_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 2.5
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    ad.adaptive_avg_pool(x).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3, 4), 1 / 12), rtol=1e-6)
    assert check_op_grad(ad.adaptive_avg_pool, np.random.default_rng(1).normal(size=(2, 3, 4)))[0] < 1e-3


def test_concat_and_reshape_gradcheck(rng):
    errs = check_op_grad(
        lambda a, b: ad.concat([a, b], axis=0).reshape(2, 9).transpose(1, 0),
        rng.normal(size=(1, 3, 2)),
        rng.normal(size=(2, 3, 2)),
    )
    assert max(errs) < 1e-3


def test_backward_frozen_input_gets_no_grad():
    x = Tensor([1.0, 2.0, 3.0])
    w = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    (w * x).sum().backward()
    np.testing.assert_array_equal(w.grad, x.data)
    assert x.grad is None


def test_backward_fan_out_accumulates():
    x = Tensor([1.5], requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_rejects_non_scalar_and_double_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    loss = (x * 3.0).sum()
    loss.backward()
    with pytest.raises(GradTapeError):
        loss.backward()


def test_tape_visits_each_node_and_clears():
    tape = ad.GradTape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape.active():
        y = ad.relu(x * 2.0)
        loss = (y + y).sum()
    assert len(tape) == 4
    loss.backward()
    assert len(tape) == 0
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_no_grad_records_nothing():
    tape = ad.GradTape()
    x = Tensor([1.0], requires_grad=True)
    with tape.active(), ad.no_grad():
        y = x * 2.0
    assert len(tape) == 0 and not y.requires_grad


def test_grads_reset_each_backward():
    w = Tensor([1.0, 1.0], requires_grad=True)
    for _ in range(3):
        (w * 2.0).sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_forward_is_deterministic(tiny_model, rng):
    x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        a, b = tiny_model(x).data, tiny_model(x).data
    assert a.tobytes() == b.tobytes()
