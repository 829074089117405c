"""Tensor core: primitive semantics, tape backward, finite-difference oracle."""

import numpy as np
import pytest

from dcvae.autodiff import (
    Tape,
    Tensor,
    apply_primitive,
    backward,
    concat,
    constant,
    gather,
    grad_check,
    log_softmax,
    matmul,
    mul,
    parameter,
    reshape,
    row,
    rows,
    softmax,
    st_mixture,
    stack_rows,
    tanh,
    tsum,
)


class TestPrimitiveValues:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = constant(rng.uniform(-1, 1, (3, 4)))
        out = matmul(a, constant(np.eye(4)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_softmax_symmetry(self):
        out = softmax(constant(np.zeros(4)))
        np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = constant(rng.uniform(-30, 30, (4, 7)))
            s = softmax(x).data
            assert (s >= 0).all()
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_matches_softmax(self):
        rng = np.random.default_rng(2)
        x = constant(rng.uniform(-5, 5, 9))
        np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax(x).data, atol=1e-14)

    def test_tanh_gradient_finite_differences(self):
        # central differences with step 1e-5, relative error below 1e-4
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (3, 4)))
        w = constant(rng.uniform(-1, 1, (3, 4)))
        err = grad_check(lambda t: tsum(mul(tanh(t), w)), [x], eps=1e-5)
        assert err < 1e-4

    def test_shape_mismatch_names_primitive_and_shapes(self):
        a, b = constant(np.zeros(3)), constant(np.zeros(4))
        with pytest.raises(ValueError, match=r"add.*\(3,\).*\(4,\)"):
            apply_primitive("add", [a, b])
        with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
            apply_primitive("matmul", [constant(np.zeros((2, 3))), constant(np.zeros((4, 2)))])

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            apply_primitive("convolve", [constant(np.zeros(3))])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = parameter(np.arange(6, dtype=float).reshape(2, 3))
        with Tape() as tape:
            loss = tsum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_softmax_sum_gradient_is_zero(self):
        rng = np.random.default_rng(4)
        x = parameter(rng.uniform(-2, 2, 5))
        with Tape() as tape:
            loss = tsum(softmax(x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros(5), atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = parameter(np.zeros(3))
        with Tape() as tape:
            y = tanh(x)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_loss_off_tape_rejected(self):
        x = parameter(np.zeros(3))
        loss = tsum(x)  # no tape active: nothing recorded
        with pytest.raises(ValueError, match="tape"):
            backward(loss)

    def test_unreachable_parameter_gets_zeros(self):
        x = parameter(np.ones(3))
        y = parameter(np.ones(3))
        with Tape() as tape:
            _ = tsum(y)          # y is on the tape
            loss = tsum(mul(x, x))
            tape.backward(loss)
        np.testing.assert_array_equal(y.grad, np.zeros(3))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_gradient_accumulates_over_reuse(self):
        x = parameter(np.array([2.0]))
        with Tape() as tape:
            loss = tsum(mul(x, x))  # d/dx x^2 = 2x through two uses
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_repeated_gather_indices_accumulate(self):
        x = parameter(np.array([1.0, 2.0, 3.0]))
        with Tape() as tape:
            loss = tsum(gather(x, [1, 1, 2]))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 2.0, 1.0])


class TestGradCheck:
    def test_polynomial(self):
        x = Tensor(np.array([1.0, 2.0]))
        err = grad_check(lambda t: tsum(mul(t, t)), [x], eps=1e-5)
        assert err < 1e-8
        with Tape() as tape:
            x.needs_grad = True
            loss = tsum(mul(x, x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_log_softmax_onehot(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-2, 2, 6))
        onehot = constant(np.eye(6)[2])
        err = grad_check(lambda t: tsum(mul(log_softmax(t), onehot)), [x], eps=1e-5)
        assert err < 1e-6

    def test_rejects_non_scalar_function(self):
        x = Tensor(np.zeros(3))
        with pytest.raises(ValueError, match="scalar"):
            grad_check(lambda t: tanh(t), [x])

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            grad_check(lambda t: tsum(t), [Tensor(np.zeros(2))], eps=0.0)


def _random_instance(kind, rng):
    """Random inputs plus a scalar-valued wrapper for one primitive."""
    def vec(n=None):
        return Tensor(rng.uniform(-1.5, 1.5, size=n or int(rng.integers(1, 6))))

    def mat(r=None, c=None):
        r = r or int(rng.integers(1, 5))
        c = c or int(rng.integers(1, 5))
        return Tensor(rng.uniform(-1.5, 1.5, size=(r, c)))

    if kind in ("add", "mul"):
        a = mat()
        b = Tensor(rng.uniform(-1.5, 1.5, size=a.shape))
        return [a, b], lambda x, y: apply_primitive(kind, [x, y])
    if kind == "scale_shift":
        alpha, beta = float(rng.normal()), float(rng.normal())
        return [mat()], lambda x: apply_primitive(kind, [x], alpha=alpha, beta=beta)
    if kind == "matmul":
        k = int(rng.integers(1, 5))
        return [mat(c=k), mat(r=k)], lambda a, b: apply_primitive(kind, [a, b])
    if kind == "affine":
        d, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = vec(d) if rng.random() < 0.5 else mat(c=d)
        return [x, mat(r=d, c=m), vec(m)], lambda *ts: apply_primitive(kind, list(ts))
    if kind in ("tanh", "sigmoid", "softmax", "log_softmax"):
        x = vec() if rng.random() < 0.5 else mat()
        return [x], lambda t: apply_primitive(kind, [t])
    if kind == "concat":
        n = int(rng.integers(1, 4))
        return [vec() for _ in range(n)], lambda *ts: apply_primitive(kind, list(ts))
    if kind == "stack_rows":
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 4))
        return [vec(d) for _ in range(n)], lambda *ts: apply_primitive(kind, list(ts))
    if kind == "row":
        t = mat()
        i = int(rng.integers(t.shape[0]))
        return [t], lambda x: apply_primitive(kind, [x], index=i)
    if kind == "rows":
        t = mat()
        ids = list(rng.integers(0, t.shape[0], size=3))
        return [t], lambda x: apply_primitive(kind, [x], indices=ids)
    if kind == "gather":
        x = vec()
        ids = list(rng.integers(0, x.shape[0], size=4))
        return [x], lambda t: apply_primitive(kind, [t], indices=ids)
    if kind in ("sum", "mean"):
        return [mat()], lambda t: apply_primitive(kind, [t])
    if kind == "reshape":
        t = mat()
        return [t], lambda x: apply_primitive(kind, [x], shape=(t.data.size,))
    raise AssertionError(kind)


ALL_PRIMITIVES = ["add", "mul", "scale_shift", "matmul", "affine", "tanh", "sigmoid",
                  "softmax", "log_softmax", "concat", "stack_rows", "row", "rows",
                  "gather", "sum", "mean", "reshape"]


@pytest.mark.parametrize("kind", ALL_PRIMITIVES)
def test_primitive_gradients_random_shapes(kind):
    """50 random-shape instances per primitive pass the gradient check."""
    rng = np.random.default_rng(hash(kind) % 2**32)
    for trial in range(50):
        inputs, fn = _random_instance(kind, rng)

        def scalar_fn(*ts):
            out = fn(*ts)
            if out.shape == ():
                return out
            w = Tensor(np.linspace(0.3, 1.1, out.data.size).reshape(out.shape))
            return tsum(mul(out, w))
        err = grad_check(scalar_fn, inputs, eps=1e-5)
        assert err < 1e-4, f"{kind} trial {trial}: max rel error {err}"


def test_st_mixture_backward_is_the_mixture_rule():
    """Forward is the hard row; backward pretends it was the soft mixture.

    Because forward and backward deliberately disagree, the check is against
    the hand-derived mixture rule rather than finite differences: the probs
    gradient is table @ g and the table gradient is outer(probs, g).
    """
    rng = np.random.default_rng(6)
    for _ in range(50):
        m, d = int(rng.integers(2, 6)), int(rng.integers(1, 6))
        raw = rng.uniform(0.1, 1.0, m)
        probs = parameter(raw / raw.sum())
        table = parameter(rng.uniform(-1, 1, (m, d)))
        weights = np.linspace(0.5, 1.5, d)
        idx = int(rng.integers(m))
        with Tape() as tape:
            out = st_mixture(probs, table, idx)
            loss = tsum(mul(out, constant(weights)))
            tape.backward(loss)
        np.testing.assert_array_equal(out.data, table.data[idx])
        np.testing.assert_allclose(probs.grad, table.data @ weights, atol=1e-12)
        np.testing.assert_allclose(table.grad, np.outer(probs.data, weights), atol=1e-12)


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = parameter(rng.uniform(-1, 1, (4, 3)))
        w = parameter(rng.uniform(-1, 1, (3, 5)))
        with Tape() as tape:
            out = tsum(softmax(tanh(matmul(x, w))))
            tape.backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_inference_without_tape_records_nothing():
    x = parameter(np.ones(3))
    y = tsum(tanh(x))
    assert y._tape is None and not y.needs_grad


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError, match="already active"):
            with Tape():
                pass
