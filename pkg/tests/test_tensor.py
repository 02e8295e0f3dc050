import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalestack import tensor as T
from scalestack.tensor import ConvSpec, ShapeError

from oracles import direct_conv2d, numeric_grad, rel_error


# -- conv2d forward -------------------------------------------------------------

def test_conv_all_ones_window_sums():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 2, 2))
    out = T.conv2d_forward(x, w, np.zeros(1), ConvSpec(1, (2, 2)))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 4.0)


def test_conv_stride_two_output_size(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out = T.conv2d_forward(x, rng.standard_normal((1, 1, 2, 2)), np.zeros(1), ConvSpec(1, (2, 2), 2))
    assert out.shape[2:] == (2, 2)


def test_conv_matches_direct_loops(f64, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d_forward(x, w, b, ConvSpec(3, (3, 3), 1, 1))
    np.testing.assert_allclose(out, direct_conv2d(x, w, b, 1, 1), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3),
       h=st.integers(3, 8), w=st.integers(3, 8), k=st.integers(1, 3),
       stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
def test_conv_matches_direct_loops_random_shapes(n, cin, cout, h, w, k, stride, pad, seed):
    T.set_precision(64)
    try:
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, cin, h, w))
        wt = r.standard_normal((cout, cin, k, k))
        b = r.standard_normal(cout)
        out = T.conv2d_forward(x, wt, b, ConvSpec(cout, (k, k), stride, pad))
        np.testing.assert_allclose(out, direct_conv2d(x, wt, b, stride, pad), atol=1e-6)
    finally:
        T.set_precision(32)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)),
                         np.zeros(1), ConvSpec(1, (3, 3)))


def test_conv_rejects_input_smaller_than_kernel(rng):
    with pytest.raises(ShapeError):
        T.conv2d_forward(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 3, 3)),
                         np.zeros(1), ConvSpec(1, (3, 3)))


def test_conv_spec_validation():
    with pytest.raises(ValueError):
        ConvSpec(1, (0, 3))
    with pytest.raises(ValueError):
        ConvSpec(1, (3, 3), stride=0)
    with pytest.raises(ValueError):
        ConvSpec(1, (3, 3), pad=-1)


# -- conv2d backward ------------------------------------------------------------

@pytest.mark.parametrize("spec", [ConvSpec(3, (3, 3), 1, 1), ConvSpec(2, (3, 3), 2, 0),
                                  ConvSpec(2, (2, 2), 2, 1), ConvSpec(3, (1, 1), 1, 0),
                                  ConvSpec(2, (5, 5), 2, 2)])
def test_conv_backward_matches_finite_differences(f64, rng, spec):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((spec.out_channels, 2) + spec.kernel)
    b = rng.standard_normal(spec.out_channels)
    probe = rng.standard_normal(T.conv2d_forward(x, w, b, spec).shape)

    def loss():
        return float((T.conv2d_forward(x, w, b, spec) * probe).sum())

    gx, gw, gb = T.conv2d_backward(probe, x, w, spec)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-4


def test_conv_backward_zero_grad_gives_zeros(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(3, (3, 3), 2, 1)
    g = np.zeros((2, 3) + spec.output_size(6, 6))
    gx, gw, gb = T.conv2d_backward(g, x, w, spec)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_grad_bias_is_channel_sum(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(3, (3, 3), 1, 1)
    g = rng.standard_normal((2, 3, 6, 6))
    _, _, gb = T.conv2d_backward(g, x, w, spec)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-6)


def test_conv_backward_rejects_wrong_grad_shape(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    with pytest.raises(ShapeError):
        T.conv2d_backward(np.zeros((1, 3, 4, 4)), x, w, ConvSpec(3, (3, 3)))


# -- ReLU -----------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(T.relu_backward(np.array([5.0, 5.0]), np.array([-1.0, 2.0])), [0, 5])


def test_relu_backward_finite_differences(f64, rng):
    x = rng.standard_normal((3, 4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    probe = rng.standard_normal(x.shape)
    fd = numeric_grad(lambda: float((T.relu_forward(x) * probe).sum()), x)
    assert rel_error(T.relu_backward(probe, x), fd) < 1e-4


def test_guided_gate_is_subset_of_plain_gate(rng):
    x = rng.standard_normal(1000)
    g = rng.standard_normal(1000)
    guided = T.guided_relu_backward(g, x) != 0
    plain = T.relu_backward(g, x) != 0
    assert np.all(plain[guided])
    assert np.all(T.guided_relu_backward(g, x) >= 0)


# -- dropout --------------------------------------------------------------------

def test_dropout_eval_is_identity(rng):
    x = rng.standard_normal((4, 5))
    out, mask = T.dropout_forward(x, 0.5, training=False, rng=rng)
    assert out is x and mask is None


def test_dropout_rate_zero_is_identity(rng):
    x = rng.standard_normal((4, 5))
    out, _ = T.dropout_forward(x, 0.0, training=True, rng=rng)
    np.testing.assert_array_equal(out, x)


def test_dropout_law_of_large_numbers(rng):
    out, _ = T.dropout_forward(np.ones(10**6, dtype=np.float32), 0.5, training=True, rng=rng)
    assert abs(out.mean() - 1.0) < 0.01
    assert abs((out == 0).mean() - 0.5) < 0.01


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate, rng):
    with pytest.raises(ValueError):
        T.dropout_forward(np.ones(3), rate, training=True, rng=rng)


def test_dropout_backward_uses_mask(f64, rng):
    x = rng.standard_normal(50)
    out, mask = T.dropout_forward(x, 0.3, training=True, rng=rng)
    g = rng.standard_normal(50)
    np.testing.assert_array_equal(T.dropout_backward(g, mask), g * mask)
    np.testing.assert_array_equal(out, x * mask)


# -- global average pool ----------------------------------------------------------

def test_gap_identity_at_1x1():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(T.global_average_pool_forward(x), [[1.0, 2.0, 3.0]])


@pytest.mark.parametrize("h,w", [(1, 1), (2, 7), (9, 4), (13, 13)])
def test_gap_constant_channel(h, w):
    x = np.full((2, 3, h, w), 0.37)
    np.testing.assert_allclose(T.global_average_pool_forward(x), 0.37, atol=1e-12)


def test_gap_matches_direct_mean(rng):
    x = rng.standard_normal((1, 2, 7, 5))
    direct = [[sum(x[0, c, i, j] for i in range(7) for j in range(5)) / 35 for c in range(2)]]
    np.testing.assert_allclose(T.global_average_pool_forward(x), direct, atol=1e-6)


def test_gap_backward_finite_differences(f64, rng):
    x = rng.standard_normal((2, 3, 4, 5))
    probe = rng.standard_normal((2, 3))
    fd = numeric_grad(lambda: float((T.global_average_pool_forward(x) * probe).sum()), x)
    assert rel_error(T.global_average_pool_backward(probe, x.shape), fd) < 1e-4


# -- softmax / cross-entropy -------------------------------------------------------

def test_softmax_symmetric_logits():
    _, post, _ = T.softmax_xent(np.zeros((1, 2)), [0])
    np.testing.assert_allclose(post, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(logits):
    post = T.softmax(np.array([logits]))
    assert abs(post.sum() - 1.0) < 1e-6
    assert np.all(np.isfinite(post))


def test_softmax_xent_grad_finite_differences(f64, rng):
    logits = rng.standard_normal((2, 4))
    labels = [1, 3]
    _, _, grad = T.softmax_xent(logits, labels)
    fd = numeric_grad(lambda: T.softmax_xent(logits, labels)[0], logits)
    assert rel_error(grad, fd) < 1e-4


def test_softmax_xent_rejects_bad_label():
    with pytest.raises(ValueError, match="out of range"):
        T.softmax_xent(np.zeros((2, 3)), [0, 3])


def test_softmax_xent_is_stable_for_large_logits():
    loss, post, _ = T.softmax_xent(np.array([[1000.0, 0.0]]), [1])
    assert np.isfinite(loss) and abs(loss - 1000.0) < 1e-9
    assert np.all(post >= 0)


# -- precision and checkpoint container -----------------------------------------------

def test_precision_switch():
    T.set_precision(64)
    assert T.as_tensor([1, 2]).dtype == np.float64
    T.set_precision(32)
    assert T.as_tensor([1, 2]).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision(16)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_file_roundtrip(tmp_path, rng, dtype):
    tensors = [rng.standard_normal((3, 2, 5, 5)).astype(dtype), rng.standard_normal(7).astype(dtype),
               np.array(2.5, dtype=dtype)]
    path = tmp_path / "t.sstk"
    T.write_tensors(path, tensors)
    back = T.read_tensors(path)
    assert len(back) == 3
    for a, b in zip(tensors, back):
        assert a.dtype == b.dtype and a.shape == b.shape
        np.testing.assert_array_equal(a, b)


def test_tensor_header_layout():
    blob = T.encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert blob[:5] == b"SSTK1"
    assert blob[5] == 4 and blob[6] == 2
    assert int.from_bytes(blob[7:15], "little") == 2
    assert int.from_bytes(blob[15:23], "little") == 3
    assert len(blob) == 23 + 6 * 4


def test_tensor_decode_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        T.decode_tensor(b"XXXXX" + bytes(10))
