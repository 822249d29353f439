import numpy as np
import pytest

from mtbit import autograd as ag
from mtbit.autograd import Tensor
from mtbit.gradcheck import central_difference, relative_errors


def check_op(build, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare backward of ``sum(build(*inputs) * probe)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    probe = rng.standard_normal(out_shape)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    (build(*leaves) * probe).sum().backward()
    for k, a in enumerate(arrays):

        def f(flat, k=k):
            args = [Tensor(x) for x in arrays]
            args[k] = Tensor(flat.reshape(a.shape))
            return float((build(*args).data * probe).sum())

        num = central_difference(f, a.ravel(), h=1e-5)
        err = relative_errors(leaves[k].grad.ravel(), num)
        assert err.max() < tol, (k, err.max())


def test_elementwise_ops():
    check_op(lambda a, b: a * b + a - b, (3, 4), (3, 4))
    check_op(lambda a, b: a * b, (2, 3, 4), (4,))
    check_op(lambda a: ag.tanh(a), (5, 3))
    check_op(lambda a: ag.sigmoid(a), (5, 3))
    check_op(lambda a: ag.gelu(a), (5, 3))
    check_op(lambda a: ag.log(a), (5, 3), positive=True)


def test_matmul_broadcasting():
    check_op(lambda a, b: a @ b, (2, 3, 4), (4, 5))
    check_op(lambda a, b: a @ b, (2, 2, 3, 4), (2, 2, 4, 5))
    check_op(lambda a, b: a @ b, (4, 3), (2, 5, 3, 6))


def test_softmax_and_norms():
    check_op(lambda a: ag.softmax(a, axis=1), (2, 5, 3))
    check_op(lambda a: ag.softmax(a, axis=-1), (2, 5, 3))
    check_op(lambda a, g, b: ag.layer_norm(a, g, b), (2, 5, 6), (6,), (6,))
    check_op(lambda a, g, b: ag.batch_norm(a, g, b)[0], (3, 4, 5, 5), (4,), (4,))


def test_batch_norm_eval_mode():
    run = (np.array([0.1, -0.2]), np.array([1.5, 0.7]))
    check_op(lambda a, g, b: ag.batch_norm(a, g, b, running=run), (2, 2, 3, 3), (2,), (2,))


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7), (2, 0, 1)])
def test_conv2d(stride, padding, k):
    check_op(lambda x, w, b: ag.conv2d(x, w, b, stride, padding), (2, 3, 9, 9), (4, 3, k, k), (4,))


def test_conv_transpose_and_pool():
    check_op(lambda x, w, b: ag.conv_transpose2d(x, w, b, 2), (2, 3, 4, 4), (3, 5, 2, 2), (5,))
    check_op(lambda x: ag.max_pool2d(x, 3, 2, 1), (2, 3, 8, 8))


def test_shape_ops():
    check_op(lambda a: a.reshape(6, 4).transpose(1, 0), (2, 3, 4))
    check_op(lambda a, b: ag.concat([a, b], axis=1), (2, 3, 4), (2, 2, 4))
    check_op(lambda a: a[:, 1:3], (2, 5, 4))
    check_op(lambda a: ag.mean(a, axis=(0, 2)), (2, 5, 4))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ag.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shared_leaf_accumulates():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * a + a).sum().backward()
    np.testing.assert_allclose(a.grad, [3.0, 5.0])


def test_clip_has_zero_gradient_outside():
    a = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    ag.clip(a, 0.0, 1.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])
