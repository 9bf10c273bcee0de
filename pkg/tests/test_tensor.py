import numpy as np
import pytest

import evexit.tensor as T
from evexit.tensor import Tensor

from conftest import finite_diff, rel_err


def scalar_loss(out: Tensor) -> Tensor:
    return T.tensor_sum(T.mul(out, out))


def check_grads(build, params: dict[str, Tensor], tol: float = 1e-6, h: float = 1e-6):
    loss = scalar_loss(build())
    loss.backward()
    for name, p in params.items():
        num = finite_diff(p.data, lambda: float((build().data ** 2).sum()), h=h)
        assert p.grad is not None, name
        assert rel_err(num, p.grad) <= tol, name


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_identity_1x1():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)))
    eye = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = T.conv2d(x, eye, Tensor(np.zeros(3)), groups=1, padding="same")
    np.testing.assert_array_equal(out.data, x.data)


def test_depthwise_box_sum_by_hand():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k, None, groups=1, padding="same")
    assert out.data[0, 1, 1] == 9
    for r, c in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out.data[0, r, c] == 4


@pytest.mark.parametrize("seed", range(20))
def test_depthwise_conv_gradients_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=2), requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.conv2d(x, w, b, groups=2, padding="same"), {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("groups,padding", [(1, "same"), (1, "valid"), (2, "same"), (4, "valid")])
def test_conv_gradients_grouped(seed, groups, padding):
    rng = np.random.default_rng(100 + seed)
    x = Tensor(rng.normal(size=(3, 4, 3, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 4 // groups, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    # larger h: the summed-square loss is ~1e4 here, so 1e-6 steps are roundoff-bound
    check_grads(
        lambda: T.conv2d(x, w, b, groups=groups, padding=padding), {"x": x, "w": w, "b": b}, h=1e-5
    )


def test_conv_1x1_equals_per_pixel_linear_map():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 5, 6))
    w = rng.normal(size=(4, 3, 1, 1))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), groups=1, padding="same")
    # oracle: explicit matrix multiply per pixel
    expect = np.einsum("oi,ihw->ohw", w[:, :, 0, 0], x) + b[:, None, None]
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_conv_shape_errors_name_axes():
    x = Tensor(np.zeros((3, 4, 4)))
    with pytest.raises(T.ShapeError, match="groups"):
        T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), groups=2)
    with pytest.raises(T.ShapeError, match="C_in/groups"):
        T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), groups=1)
    with pytest.raises(T.ShapeError, match="odd"):
        T.conv2d(x, Tensor(np.zeros((4, 3, 2, 2))), groups=1, padding="same")
    with pytest.raises(T.ShapeError, match="smaller than kernel"):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="valid")


def test_same_padding_preserves_shape_valid_shrinks():
    x = Tensor(np.zeros((2, 6, 7)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    assert T.conv2d(x, w, padding="same").shape == (3, 6, 7)
    assert T.conv2d(x, w, padding="valid").shape == (3, 4, 5)


# ---------------------------------------------------------------------------
# dense layer family
# ---------------------------------------------------------------------------


def test_relu_example():
    out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_global_avg_pool_constant():
    x = Tensor(np.full((3, 4, 5), 2.5))
    np.testing.assert_allclose(T.global_avg_pool(x).data, [2.5, 2.5, 2.5])


def test_global_avg_pool_empty_spatial_errors():
    with pytest.raises(T.ShapeError, match="empty spatial"):
        T.global_avg_pool(Tensor(np.zeros((2, 0, 3))))


def test_softmax_symmetry_and_rowsum():
    out = T.softmax(Tensor(np.array([0.0, 0.0])))
    np.testing.assert_allclose(out.data, [0.5, 0.5])
    rng = np.random.default_rng(0)
    rows = T.softmax(Tensor(rng.normal(size=(10, 7))), axis=-1)
    np.testing.assert_allclose(rows.data.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_dense_layer_gradients_vs_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.linear(x, w, b), {"x": x, "w": w, "b": b})
    g = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.global_avg_pool(g), {"g": g})
    s = Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.softmax(s, axis=-1), {"s": s})
    r = Tensor(rng.normal(size=(4, 4)) + 0.1, requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.relu(r), {"r": r})


@pytest.mark.parametrize("seed", range(20))
def test_scalar_op_gradients_vs_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    a = Tensor(rng.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
    cases = [
        (lambda: T.add(a, b), {"a": a, "b": b}),
        (lambda: T.sub(a, b), {"a": a, "b": b}),
        (lambda: T.mul(a, b), {"a": a, "b": b}),
        (lambda: T.div(a, b), {"a": a, "b": b}),
        (lambda: T.log(a), {"a": a}),
        (lambda: T.exp(T.mul(a, 0.3)), {"a": a}),
        (lambda: T.lgamma(a), {"a": a}),
        (lambda: T.digamma(a), {"a": a}),
        (lambda: T.tensor_sum(a, axis=1, keepdims=True) + b, {"a": a, "b": b}),
        (lambda: T.tensor_mean(a, axis=0), {"a": a}),
        (lambda: T.clip(a, 0.8, 2.5), {"a": a}),
        (lambda: T.stack([a, b], axis=-1), {"a": a, "b": b}),
    ]
    for build, params in cases:
        a.grad = b.grad = None
        check_grads(build, params)


def test_broadcast_gradients():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    c = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    check_grads(lambda: T.mul(a, c), {"a": a, "c": c})


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.mul(x, 2.0)
    assert not out.requires_grad
    assert out._parents == ()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()


def test_float32_dtype_preserved_through_ops():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    out = T.mul(T.add(x, 1.0), 0.5)
    assert out.dtype == np.float32
    out = T.softmax(x, axis=-1)
    assert out.dtype == np.float32


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(4, 3, 5, 5)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 3, 3, 3)).astype(np.float32), requires_grad=True)
    out = T.softmax(T.global_avg_pool(T.relu(T.conv2d(x, w))), axis=-1)
    loss = T.tensor_mean(T.mul(out, out))
    loss.backward()
    assert np.isfinite(out.data).all()
    assert np.isfinite(x.grad).all() and np.isfinite(w.grad).all()
