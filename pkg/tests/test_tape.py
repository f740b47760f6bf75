"""Finite-difference checks for every tape op, plus second-order sanity."""

import numpy as np
import pytest

from gradlens import tape as tp


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(builder, shape, seed, tol=1e-6):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)

    def scalar(v):
        return tp.vsum(builder(tp.Var(v))).item()

    leaf = tp.Var(x)
    out = tp.vsum(builder(leaf))
    (g,) = tp.grad(out, [leaf])
    num = numeric_grad(scalar, x.copy())
    assert np.allclose(g.value, num, atol=tol), f"analytic {g.value} vs fd {num}"


@pytest.mark.parametrize(
    "builder,shape",
    [
        (lambda x: x + 2.0, (3, 4)),
        (lambda x: 3.0 - x, (3, 4)),
        (lambda x: x * x, (5,)),
        (lambda x: x / (x * x + 2.0), (4,)),
        (lambda x: tp.exp(x), (3, 2)),
        (lambda x: tp.log(x * x + 1.5), (4,)),
        (lambda x: tp.sqrt(x * x + 1.0), (4,)),
        (lambda x: x ** 3, (4,)),
        (lambda x: tp.absolute(x + 0.3), (6,)),
        (lambda x: tp.relu(x), (8,)),
        (lambda x: tp.reshape(x, (2, 6)), (3, 4)),
        (lambda x: tp.transpose(x, (1, 0)), (3, 4)),
        (lambda x: tp.vsum(x, axis=1), (3, 4)),
        (lambda x: tp.vsum(x, axis=0, keepdims=True), (3, 4)),
        (lambda x: tp.vmean(x, axis=1), (2, 5)),
        (lambda x: tp.broadcast_to(x, (4, 3, 2)), (3, 2)),
        (lambda x: x[1:, ::2], (4, 6)),
        (lambda x: tp.scatter(x, (5, 4), (slice(1, 3), slice(0, 4))), (2, 4)),
    ],
)
def test_unary_ops_match_finite_differences(builder, shape):
    check_op(builder, shape, seed=0)


def test_matmul_grads_both_sides():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    va, vb = tp.Var(a), tp.Var(b)
    out = tp.vsum(tp.matmul(va, vb) ** 2)
    ga, gb = tp.grad(out, [va, vb])

    def fa(x):
        return float(np.sum((x @ b) ** 2))

    def fb(x):
        return float(np.sum((a @ x) ** 2))

    assert np.allclose(ga.value, numeric_grad(fa, a.copy()), atol=1e-5)
    assert np.allclose(gb.value, numeric_grad(fb, b.copy()), atol=1e-5)


def test_batched_matmul_broadcast_weight():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 3))
    va, vw = tp.Var(a), tp.Var(w)
    out = tp.vsum(tp.exp(tp.matmul(va, vw) * 0.1))
    ga, gw = tp.grad(out, [va, vw])

    def fa(x):
        return float(np.sum(np.exp((x @ w) * 0.1)))

    def fw(x):
        return float(np.sum(np.exp((a @ x) * 0.1)))

    assert np.allclose(ga.value, numeric_grad(fa, a.copy()), atol=1e-5)
    assert np.allclose(gw.value, numeric_grad(fw, w.copy()), atol=1e-5)


def test_linear_weight_gradient_is_zt_dy():
    # For y = z @ w and scalar loss L, the tape's dL/dw must equal z.T @ dL/dy.
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 5))
    vz, vw = tp.Var(z), tp.Var(w)
    y = tp.matmul(vz, vw)
    loss = tp.vsum(y ** 2) * 0.5
    (gw,) = tp.grad(loss, [vw])
    (gy,) = tp.grad(loss, [y])
    assert np.array_equal(gw.value, z.T @ gy.value)


def test_second_order_simple():
    # f(x) = sum(x^3): grad = 3x^2, grad-of-(grad . v) = 6x * v
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5,))
    v = rng.normal(size=(5,))
    vx = tp.Var(x)
    f = tp.vsum(vx ** 3)
    (g1,) = tp.grad(f, [vx])
    inner = tp.vsum(g1 * tp.Var(v))
    (g2,) = tp.grad(inner, [vx])
    assert np.allclose(g2.value, 6.0 * x * v, atol=1e-10)


def test_second_order_through_matmul_and_softmaxish():
    # Hessian-vector product of f(x) = sum(exp(x @ w)) checked by FD on the gradient.
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4)) * 0.3
    w = rng.normal(size=(4, 2)) * 0.3
    v = rng.normal(size=(3, 4))

    def grad_np(xv):
        return np.exp(xv @ w) @ w.T

    vx = tp.Var(x)
    f = tp.vsum(tp.exp(tp.matmul(vx, tp.Var(w))))
    (g1,) = tp.grad(f, [vx])
    inner = tp.vsum(g1 * tp.Var(v))
    (hvp,) = tp.grad(inner, [vx])

    eps = 1e-6
    fd = (grad_np(x + eps * v) - grad_np(x - eps * v)) / (2 * eps)
    assert np.allclose(hvp.value, fd, atol=1e-5)


def test_stop_gradient_blocks_flow():
    x = tp.Var(np.array([1.0, 2.0]))
    y = tp.vsum(tp.stop_gradient(x) * x)
    (g,) = tp.grad(y, [x])
    assert np.allclose(g.value, x.value)  # only the live branch contributes


def test_grad_of_unreachable_is_zero():
    x = tp.Var(np.ones((2, 2)))
    y = tp.Var(np.ones((2, 2)))
    out = tp.vsum(x * 2.0)
    (gy,) = tp.grad(out, [y])
    assert np.all(gy.value == 0.0)
