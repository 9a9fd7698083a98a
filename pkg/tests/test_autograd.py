import numpy as np
import pytest

from longtail_qa.autograd import (Tensor, clip_min, concat, finite_difference,
                                  gather_rows, log_softmax, masked_fill,
                                  parameter, softmax, stack)

RNG = np.random.default_rng(0)


def check_grad(fn, shapes, atol=1e-7, rtol=1e-5):
    """fn maps a list of Tensors to a scalar Tensor; compare each input's
    analytic gradient against central differences."""
    arrays = [RNG.normal(size=s) for s in shapes]
    tensors = [parameter(a.copy()) for a in arrays]
    out = fn(*tensors)
    out.backward()
    for i, (a, t) in enumerate(zip(arrays, tensors)):
        def scalar(x, i=i):
            probe = [Tensor(arr.copy()) for arr in arrays]
            probe[i] = Tensor(x)
            return float(fn(*probe).data)

        fd = finite_difference(scalar, a.copy())
        assert t.grad is not None, f"input {i} got no gradient"
        np.testing.assert_allclose(t.grad, fd, atol=atol, rtol=rtol)


def test_add_mul_broadcast_grad():
    check_grad(lambda a, b: ((a + b) * a).sum(), [(3, 4), (4,)])
    check_grad(lambda a, b: (a * b).sum(), [(2, 1, 3), (5, 3)])


def test_sub_div_pow_grad():
    check_grad(lambda a, b: (a / (b * b + 2.0)).sum(), [(4,), (4,)])
    check_grad(lambda a: ((a ** 3.0) - a).sum(), [(3, 3)])


def test_matmul_grad_2d_and_batched():
    check_grad(lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)])
    check_grad(lambda a, b: (a @ b).sum(), [(2, 3, 4), (2, 4, 2)])
    check_grad(lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 2)])  # broadcast rhs


def test_elementwise_functions_grad():
    check_grad(lambda a: a.exp().sum(), [(5,)])
    check_grad(lambda a: (a * a + 1.0).log().sum(), [(5,)])
    check_grad(lambda a: a.tanh().sum(), [(4, 2)])
    check_grad(lambda a: ((a + 0.3).relu() * a).sum(), [(6,)])


def test_reductions_grad():
    check_grad(lambda a: a.sum(axis=1).mean(), [(3, 4)])
    check_grad(lambda a: a.mean(axis=0, keepdims=True).sum(), [(3, 4)])
    check_grad(lambda a: (a.sum(axis=(0,)) ** 2.0).sum(), [(2, 3)])


def test_shape_ops_grad():
    check_grad(lambda a: (a.reshape(6) ** 2.0).sum(), [(2, 3)])
    check_grad(lambda a: a.swapaxes(0, 1).sum(axis=0).mean(), [(2, 3)])
    check_grad(lambda a: (a.transpose((1, 0, 2)) * 2.0).sum(), [(2, 3, 4)])


def test_getitem_grad_advanced_indexing():
    idx = (np.array([0, 1, 1]), np.array([2, 0, 2]))
    check_grad(lambda a: (a[idx] ** 2.0).sum(), [(2, 3)])


def test_gather_rows_grad_with_repeats():
    idx = np.array([0, 2, 2, 1])

    def fn(a):
        return (gather_rows(a, idx) * np.arange(12).reshape(4, 3)).sum()

    check_grad(fn, [(3, 3)])


def test_gather_rows_grad_3d_table():
    idx = np.array([1, 1, 0])

    def fn(a):
        return (gather_rows(a, idx) ** 2.0).sum()

    check_grad(fn, [(2, 3, 4)])


def test_matmul_vector_cases_grad():
    check_grad(lambda a, b: (a @ b).sum(), [(3, 4), (4,)])
    check_grad(lambda a, b: (a @ b).sum(), [(4,), (4, 2)])
    check_grad(lambda a, b: a @ b, [(4,), (4,)])
    check_grad(lambda a, b: (a @ b).sum(), [(4,), (2, 4, 3)])


def test_concat_and_stack_grad():
    check_grad(lambda a, b: concat([a, b], axis=1).sum(), [(2, 3), (2, 2)])
    check_grad(lambda a, b: (stack([a, b], axis=0) ** 2.0).sum(), [(2, 3), (2, 3)])


def test_log_softmax_grad_and_values():
    x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    t = parameter(x)
    ls = log_softmax(t, axis=-1)
    np.testing.assert_allclose(np.exp(ls.data).sum(axis=-1), [1.0, 1.0])
    check_grad(lambda a: (log_softmax(a, axis=-1) *
                          np.array([[1.0, 0.0, 2.0]])).sum(), [(4, 3)])
    check_grad(lambda a: (softmax(a, axis=0) * np.arange(4.0)[:, None]).sum(),
               [(4, 2)])


def test_masked_fill_grad():
    mask = np.array([[True, False, False], [False, True, False]])

    def fn(a):
        return (masked_fill(a, mask, -5.0) ** 2.0).sum()

    check_grad(fn, [(2, 3)])


def test_clip_min_exact_and_grad():
    t = parameter(np.array([0.5, 1e-15, 0.25]))
    out = clip_min(t, 1e-12)
    assert out.data[0] == 0.5 and out.data[2] == 0.25  # bit-exact above floor
    assert out.data[1] == 1e-12
    out.sum().backward()
    np.testing.assert_allclose(t.grad, [1.0, 0.0, 1.0])


def test_backward_requires_scalar():
    t = parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (t * 2).backward()


def test_grad_accumulates_across_uses():
    t = parameter(np.array([2.0]))
    out = t * 3.0 + t * t
    out.backward(np.array([1.0]))
    np.testing.assert_allclose(t.grad, [3.0 + 4.0])


def test_detach_blocks_gradient():
    t = parameter(np.array([2.0, 3.0]))
    out = (t.detach() * t).sum()
    out.backward()
    np.testing.assert_allclose(t.grad, [2.0, 3.0])  # only the live branch
