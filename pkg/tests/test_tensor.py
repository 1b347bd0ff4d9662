import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qvqa import tensor as T
from qvqa.tensor import _kernels_py, kernels
from qvqa.tensor.gradcheck import grad_check
from qvqa.tensor.io import decode_tensor, encode_tensor
from qvqa.verify import primitive_gradient_errors

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(min_side=1, max_side=6):
    return st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


def test_catalog_covers_model_needs():
    needed = {"matmul", "add", "mul", "scale", "mean", "concat", "softmax", "log", "exp",
              "layer_norm", "gelu", "embedding", "masked_fill", "cosine_similarity", "cross_entropy"}
    assert needed <= T.op_catalog()


def test_default_precision_is_32_bit():
    assert T.get_default_dtype() == np.float32
    assert T.zeros((2, 2)).dtype == np.float32


def test_matmul_identity(rng):
    x = rng.standard_normal((3, 5))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(x)).data
    np.testing.assert_allclose(out, x.astype(np.float32))


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.zeros((4,))).data, [0.25] * 4, atol=1e-7)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)))
def test_cosine_self_and_opposite(u):
    with T.default_dtype(np.float64):
        a = T.Tensor(u)
        assert T.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-6)
        assert T.cosine_similarity(a, T.neg(a)).item() == pytest.approx(-1.0, abs=1e-6)


def test_cosine_zero_vector_is_finite():
    z = T.zeros((3,))
    assert T.cosine_similarity(z, z).item() == 0.0


@given(matrices())
def test_softmax_rows_are_distributions(x):
    for dt in (np.float32, np.float64):
        with T.default_dtype(dt):
            y = T.softmax(T.Tensor(x, dtype=dt)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_survives_large_logits():
    y = T.softmax(T.Tensor(np.array([[1e4, 0.0, -1e4]]))).data
    assert np.isfinite(y).all() and y[0, 0] == pytest.approx(1.0)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3), st.integers(0, 2**31))
def test_concat_then_split_is_identity(sizes, width, seed):
    rng = np.random.default_rng(seed)
    parts = [T.Tensor(rng.standard_normal((s, width))) for s in sizes]
    back = T.split(T.concat(parts, axis=0), sizes, axis=0)
    for p, q in zip(parts, back):
        np.testing.assert_array_equal(p.data, q.data)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError) as err:
        T.add(T.zeros((2, 3)), T.zeros((3, 2)))
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)
    with pytest.raises(T.ShapeError) as err:
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_no_general_broadcasting():
    with pytest.raises(T.ShapeError):
        T.mul(T.zeros((2, 3)), T.zeros((3,)))


def test_two_path_gradients_add_up(f64):
    x = T.Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)
    w1 = np.array([1.0, 2.0, 3.0])
    w2 = np.array([-1.0, 0.5, 4.0])
    y = T.sum_(T.mul(x, T.Tensor(w1))) + T.sum_(T.mul(T.exp(x), T.Tensor(w2)))
    y.backward()
    np.testing.assert_allclose(x.grad, w1 + w2 * np.exp(x.data))


def test_gradient_accumulates_across_backward_calls(f64):
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_grad_shape_matches_data(f64, rng):
    x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.sum_(T.gelu(x)).backward()
    assert x.grad.shape == x.shape


def test_grad_check_quadratic(f64):
    x = T.Tensor(np.array(3.0), requires_grad=True)
    rep = grad_check(lambda: T.mul(x, x), [x], eps=1e-4)
    assert rep.passed and rep.max_error < 1e-8
    x.grad = None
    T.mul(x, x).backward()
    assert float(x.grad) == 6.0


def test_grad_check_reports_non_finite(f64):
    x = T.Tensor(np.array([1e-7]), requires_grad=True)
    rep = grad_check(lambda: T.sum_(T.log(x)), [x], eps=1e-6)
    assert not rep.passed
    assert any("non-finite" in msg for msg in rep.failures)


def test_grad_check_catches_a_wrong_backward(f64):
    x = T.Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def wrong():
        out = T.exp(x)
        out._backward = lambda g: (2 * g * out.data,)
        return T.sum_(out)

    assert not grad_check(wrong, [x]).passed


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
def test_every_primitive_matches_finite_differences(dtype, tol):
    worst = primitive_gradient_errors(20, dtype, seed=3)
    assert len(worst) >= 20
    bad = {name: v for name, v in worst.items() if not v[0] or v[1] >= tol}
    assert not bad


def test_cross_entropy_ignores_masked_rows(f64):
    logits = T.Tensor(np.array([[0.0, 0.0], [100.0, -100.0]]))
    got = T.cross_entropy(logits, [0, 1], np.array([True, False])).item()
    assert got == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, [0, 1], np.array([False, False]))


def test_masked_fill_blocks_gradient(f64):
    s = T.Tensor(np.ones((2, 2)), requires_grad=True)
    allowed = T.causal_mask(2)
    T.sum_(T.masked_fill(s, allowed)).backward()
    np.testing.assert_array_equal(s.grad, allowed.astype(float))


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad


@given(st.lists(st.integers(1, 5), min_size=0, max_size=3), st.integers(0, 2**31))
def test_qvt_round_trip(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    buf = encode_tensor(arr)
    assert buf[:4] == b"QVT1"
    assert int.from_bytes(buf[4:8], "little") == len(shape)
    np.testing.assert_array_equal(decode_tensor(buf), arr)


def test_qvt_layout_is_exact():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    expected = b"QVT1" + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    expected += np.array([1, 2, 3], dtype="<f4").tobytes()
    assert buf == expected


def test_qvt_rejects_bad_magic_and_truncation():
    buf = encode_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="magic"):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="payload"):
        decode_tensor(buf[:-4])


@given(matrices(1, 7), st.sampled_from([np.float32, np.float64]))
def test_compiled_kernels_match_fallback(x, dtype):
    x = x.astype(dtype)
    rng = np.random.default_rng(0)
    g = rng.standard_normal(x.shape).astype(dtype)
    gamma = rng.standard_normal(x.shape[-1]).astype(dtype)
    beta = rng.standard_normal(x.shape[-1]).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-10
    np.testing.assert_allclose(kernels.softmax_fwd(x), _kernels_py.softmax_fwd(x), atol=tol)
    np.testing.assert_allclose(kernels.gelu_fwd(x), _kernels_py.gelu_fwd(x), atol=tol * 50, rtol=tol)
    np.testing.assert_allclose(kernels.gelu_bwd(x, g), _kernels_py.gelu_bwd(x, g), atol=tol * 50, rtol=tol)
    y1, xh, rs = kernels.layernorm_fwd(x, gamma, beta, 1e-5)
    y2, _, _ = _kernels_py.layernorm_fwd(x, gamma, beta, 1e-5)
    np.testing.assert_allclose(y1, y2, atol=tol * 100, rtol=tol)


@given(st.lists(st.integers(0, 3), max_size=9), st.lists(st.integers(0, 3), max_size=9))
def test_lcs_kernel_matches_fallback(a, b):
    a64, b64 = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    assert kernels.lcs_length(a64, b64) == _kernels_py.lcs_length(a64, b64)
