"""Tape op correctness: values, broadcasting, finite-difference gradients."""

import numpy as np
import pytest

from artimesh import tape
from artimesh.gradcheck import finite_diff_check
from artimesh.tape import Tensor, backward


RNG = np.random.default_rng(20240817)


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestForwardValues:
    def test_square(self):
        x = t(3.0)
        y = x * x
        assert y.item() == 9.0

    def test_sum_sin_zero_vector(self):
        x = t(np.zeros(7))
        assert tape.tsum(tape.sin(x)).item() == 0.0

    def test_mlp_forward_matches_scalar_loop(self):
        # independent oracle: plain python loops over the same weights
        w1 = RNG.normal(size=(4, 5))
        b1 = RNG.normal(size=5)
        w2 = RNG.normal(size=(5, 1))
        b2 = RNG.normal(size=1)
        x = RNG.normal(size=(3, 4))

        def oracle(xrow):
            h = []
            for j in range(5):
                acc = b1[j]
                for i in range(4):
                    acc += xrow[i] * w1[i, j]
                h.append(np.tanh(acc))
            out = b2[0]
            for j in range(5):
                out += h[j] * w2[j, 0]
            return out

        y = tape.matmul(tape.tanh(tape.matmul(Tensor(x), Tensor(w1)) + Tensor(b1)), Tensor(w2)) + Tensor(b2)
        expected = np.array([[oracle(r)] for r in x])
        np.testing.assert_allclose(y.numpy(), expected, rtol=1e-12)

    def test_shape_error_names_op(self):
        with pytest.raises(tape.ShapeError, match="matmul"):
            tape.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(tape.ShapeError, match="add"):
            tape.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestBackwardBasics:
    def test_square_grad(self):
        x = t(3.0)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_constant_grad_zero(self):
        x = t(2.0)
        c = Tensor(5.0)
        y = c * c
        # x unreachable: grad stays None, reported as zero by ParamStore
        loss = y + 0.0 * x
        backward(loss)
        assert x.grad == pytest.approx(0.0)

    def test_nonscalar_loss_rejected(self):
        x = t(np.ones(3))
        with pytest.raises(tape.NonScalarLossError):
            backward(x * x)

    def test_double_backward_accumulates_2x(self):
        x = t(np.array([1.5, -2.0]))
        y = tape.tsum(x * x * x)
        backward(y)
        g1 = x.grad.copy()
        backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * g1, rtol=1e-15)

    def test_broadcast_unreduction(self):
        a = t(np.ones((4, 3)))
        b = t(np.ones(3))
        backward(tape.tsum(a * b))
        np.testing.assert_allclose(b.grad, 4.0 * np.ones(3))
        np.testing.assert_allclose(a.grad, np.ones((4, 3)))

    def test_detach_blocks_gradient(self):
        x = t(2.0)
        y = x * x
        z = y.detach() * x
        backward(z)
        assert x.grad == pytest.approx(4.0)  # only the direct factor


def _fd_cases():
    g = np.random.default_rng(7)

    def pt(shape, lo=-2.0, hi=2.0):
        return g.uniform(lo, hi, size=shape)

    cases = [
        ("add", lambda a, b: tape.tsum(tape.add(a, b) ** 2), [pt((3, 2)), pt((3, 2))]),
        ("sub", lambda a, b: tape.tsum(tape.sub(a, b) ** 2), [pt((3, 2)), pt(2)]),
        ("mul", lambda a, b: tape.tsum(tape.mul(a, b)), [pt((3, 2)), pt((3, 2))]),
        ("div", lambda a, b: tape.tsum(tape.div(a, b)), [pt((3, 2)), pt((3, 2), 0.5, 2.0)]),
        ("pow", lambda a: tape.tsum(tape.power(a, 3.0)), [pt((4,))]),
        ("matmul", lambda a, b: tape.tsum(tape.matmul(a, b) ** 2), [pt((3, 4)), pt((4, 2))]),
        ("matmul_batched", lambda a, b: tape.tsum(tape.matmul(a, b)), [pt((2, 3, 4)), pt((2, 4, 2))]),
        ("einsum", lambda a, b: tape.tsum(tape.einsum("sij,sjk->sik", a, b)), [pt((2, 3, 4)), pt((2, 4, 2))]),
        ("sin", lambda a: tape.tsum(tape.sin(a)), [pt((5,))]),
        ("cos", lambda a: tape.tsum(tape.cos(a)), [pt((5,))]),
        ("exp", lambda a: tape.tsum(tape.exp(a)), [pt((5,))]),
        ("log", lambda a: tape.tsum(tape.log(a)), [pt((5,), 0.5, 3.0)]),
        ("sqrt", lambda a: tape.tsum(tape.sqrt(a)), [pt((5,), 0.5, 3.0)]),
        ("tanh", lambda a: tape.tsum(tape.tanh(a)), [pt((5,))]),
        ("sigmoid", lambda a: tape.tsum(tape.sigmoid(a)), [pt((5,))]),
        ("relu", lambda a: tape.tsum(tape.relu(a)), [pt((6,)) + np.sign(pt((6,))) * 0.05]),
        ("leaky_relu", lambda a: tape.tsum(tape.leaky_relu(a, 0.2)), [pt((6,)) + np.sign(pt((6,))) * 0.05]),
        ("abs", lambda a: tape.tsum(tape.tabs(a)), [pt((6,)) + np.sign(pt((6,))) * 0.05]),
        ("clamp", lambda a: tape.tsum(tape.clamp(a, -1.0, 1.0) ** 2), [pt((6,)) * 3.0 + 0.1]),
        ("sum_axis", lambda a: tape.tsum(tape.tsum(a, axis=1) ** 2), [pt((3, 4))]),
        ("mean", lambda a: tape.tmean(a ** 2), [pt((3, 4))]),
        ("amax", lambda a: tape.tsum(tape.amax(a, axis=1)), [pt((3, 4))]),
        ("softmax", lambda a: tape.tsum(tape.softmax(a, axis=-1) ** 2), [pt((3, 4))]),
        ("reshape_transpose", lambda a: tape.tsum(tape.transpose(tape.reshape(a, (4, 3)), (1, 0)) ** 2), [pt((3, 4))]),
        ("concat", lambda a, b: tape.tsum(tape.concat([a, b], axis=1) ** 3), [pt((3, 2)), pt((3, 4))]),
        ("stack", lambda a, b: tape.tsum(tape.stack([a, b], axis=0) ** 2), [pt((3,)), pt((3,))]),
        ("slice", lambda a: tape.tsum(a[1:, ::2] ** 2), [pt((4, 6))]),
        ("pad2d", lambda a: tape.tsum(tape.pad2d(a, 2) ** 2), [pt((1, 2, 3, 3))]),
        ("gather", lambda a: tape.tsum(tape.gather(a, np.array([0, 2, 2, 1]), axis=0) ** 2), [pt((3, 4))]),
        ("gather_axis1", lambda a: tape.tsum(tape.gather(a, np.array([1, 1, 0]), axis=1) ** 2), [pt((2, 3))]),
        ("take_pairs", lambda a: tape.tsum(tape.take_pairs(a, np.array([0, 1, 1]), np.array([2, 0, 2])) ** 2), [pt((2, 3))]),
        ("index_add", lambda v: tape.tsum(tape.index_add((3, 2), np.array([0, 2, 2, 1]), v) ** 2), [pt((4, 2))]),
        ("scatter_write", lambda v: tape.tsum(tape.scatter_write(np.zeros(10), np.array([1, 4, 7]), v) ** 2), [pt((3,))]),
        ("group_norm", lambda x, g_, b_: tape.tsum(tape.group_norm(x, 2, g_, b_) ** 2), [pt((2, 4, 3, 3)), pt((4,)), pt((4,))]),
        ("layer_norm", lambda x, g_, b_: tape.tsum(tape.layer_norm(x, g_, b_) ** 2), [pt((3, 5)), pt((5,)), pt((5,))]),
        ("cross3", lambda a, b: tape.tsum(tape.cross3(a, b) ** 2), [pt((4, 3)), pt((4, 3))]),
        ("norm_last", lambda a: tape.tsum(tape.norm_last(a)), [pt((4, 3)) + 0.5]),
        ("bilinear", lambda img, u, v: tape.tsum(tape.bilinear_sample(img, u, v) ** 2),
         [pt((5, 5, 2)), pt((3,), 0.6, 3.4), pt((3,), 0.6, 3.4)]),
    ]
    return cases


@pytest.mark.parametrize("name,fn,tensors", _fd_cases(), ids=[c[0] for c in _fd_cases()])
def test_op_gradients_match_finite_differences(name, fn, tensors):
    rep = finite_diff_check(fn, [Tensor(x) for x in tensors], h=1e-5, tol=1e-3, name=name)
    assert rep.passed, str(rep)


def test_every_op_over_100_random_points():
    # spec invariant: each op checked at 100 random scalar/vector points
    g = np.random.default_rng(11)
    ops = {
        "sin": tape.sin, "cos": tape.cos, "tanh": tape.tanh,
        "sigmoid": tape.sigmoid, "exp": tape.exp,
    }
    for name, op in ops.items():
        pts = g.uniform(-2, 2, size=(100,))
        x = Tensor(pts, requires_grad=True)
        backward(tape.tsum(op(x)))
        h = 1e-5
        numeric = (op(Tensor(pts + h)).numpy() - op(Tensor(pts - h)).numpy()) / (2 * h)
        rel = np.abs(x.grad - numeric) / np.maximum(1e-6, np.maximum(np.abs(x.grad), np.abs(numeric)))
        assert rel.max() < 1e-3, f"{name} worst {rel.max()}"


def test_deliberately_wrong_adjoint_fails():
    # negative control: an op with a broken backward must be caught
    def bad_square(x):
        out = tape._make(x.data ** 2, (x,), lambda gr: [(x, gr * 3.0 * x.data)])
        return out

    rep = finite_diff_check(lambda x: tape.tsum(bad_square(x)), [Tensor(np.array([1.7]))],
                            name="negative-control")
    assert not rep.passed


def test_dtype_stays_float32():
    x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    y = tape.tsum((x * 2.0 + 1.0) ** 2)
    assert y.dtype == np.float32
    backward(y)
    assert x.grad.dtype == np.float32
