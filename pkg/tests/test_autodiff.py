import numpy as np
import pytest

from potvit import autodiff as ad


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return g


def check_op(build, shape, seed=0, tol=1e-5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)

    def scalar(arr):
        v = ad.Var(arr.copy())
        out = build(v)
        return float(np.sum(out.value))

    v = ad.Var(x.copy())
    out = build(v)
    loss = ad.Var(np.sum(out.value), (out,), (lambda g: np.ones_like(out.value) * g,))
    ad.backward(loss)
    num = fd_grad(scalar, x.copy())
    assert np.allclose(v.grad, num, atol=tol), f"max err {np.abs(v.grad - num).max()}"


def test_add_broadcast_grad():
    rng = np.random.default_rng(1)
    b = ad.Var(rng.normal(size=(3,)))
    check_op(lambda v: ad.add(v, b), (2, 3))


def test_mul_grad():
    rng = np.random.default_rng(2)
    b = ad.Var(rng.normal(size=(2, 3)))
    check_op(lambda v: ad.mul(v, b), (2, 3))


def test_matmul_grad_batched():
    rng = np.random.default_rng(3)
    b = ad.Var(rng.normal(size=(4, 5)))
    check_op(lambda v: ad.matmul(v, b), (2, 3, 4))


def test_getitem_and_concat_grad():
    check_op(lambda v: ad.concat([ad.getitem(v, (slice(None), 0)), ad.getitem(v, (slice(None), 1))], axis=0), (3, 2))


def test_gelu_grad():
    check_op(ad.gelu_tanh, (4, 3))


def test_softmax_grad():
    check_op(ad.softmax_rows, (3, 5))


def test_layernorm_grad():
    rng = np.random.default_rng(4)
    gamma = ad.Var(rng.normal(size=(6,)))
    beta = ad.Var(rng.normal(size=(6,)))
    check_op(lambda v: ad.layernorm_rows(v, gamma, beta), (4, 6), tol=1e-4)


def test_layernorm_param_grads():
    rng = np.random.default_rng(5)
    x = ad.Var(rng.normal(size=(4, 6)))
    gamma_val = rng.normal(size=(6,))
    beta_val = rng.normal(size=(6,))

    def with_params(gv, bv):
        out = ad.layernorm_rows(ad.Var(x.value), ad.Var(gv), ad.Var(bv))
        return float(np.sum(out.value))

    g = ad.Var(gamma_val.copy())
    b = ad.Var(beta_val.copy())
    out = ad.layernorm_rows(x, g, b)
    loss = ad.Var(np.sum(out.value), (out,), (lambda gr: np.ones_like(out.value) * gr,))
    ad.backward(loss)
    num_g = fd_grad(lambda gv: with_params(gv, beta_val), gamma_val.copy())
    num_b = fd_grad(lambda bv: with_params(gamma_val, bv), beta_val.copy())
    assert np.allclose(g.grad, num_g, atol=1e-5)
    assert np.allclose(b.grad, num_b, atol=1e-5)


def test_cross_entropy_grad():
    rng = np.random.default_rng(6)
    labels = np.array([0, 2, 1])
    x = rng.normal(size=(3, 4))

    def scalar(arr):
        return float(ad.mean_cross_entropy(ad.Var(arr.copy()), labels).value)

    v = ad.Var(x.copy())
    loss = ad.mean_cross_entropy(v, labels)
    ad.backward(loss)
    num = fd_grad(scalar, x.copy())
    assert np.allclose(v.grad, num, atol=1e-6)


def test_cross_entropy_value_matches_manual():
    logits = np.array([[1.0, 2.0, 3.0]])
    labels = np.array([2])
    loss = ad.mean_cross_entropy(ad.Var(logits), labels)
    expected = -np.log(np.exp(3) / np.exp([1.0, 2.0, 3.0]).sum())
    assert abs(float(loss.value) - expected) < 1e-12


def test_backward_handles_shared_subgraph():
    x = ad.Var(np.array([2.0]))
    y = ad.mul(x, x)  # x^2, grad 2x
    z = ad.add(y, y)  # 2x^2, grad 4x
    ad.backward(z)
    assert np.allclose(x.grad, [8.0])


def test_constants_pinned():
    assert ad.LN_EPS == 2.0**-10
    assert np.isclose(ad.GELU_C, np.sqrt(2 / np.pi))
