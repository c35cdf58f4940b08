"""Autodiff engine: op gradients, tape semantics, shape algebra."""

import numpy as np
import pytest

import nacodec.tensor as tc
from nacodec.tensor import Param, Tape, Tensor, TensorError, finite_diff_check


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


class TestTapeSemantics:
    def test_square_gradient(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        tape = Tape()
        with tape:
            loss = (w * w).sum()
        g = tape.backward(loss).get(w)
        assert np.array_equal(g, [2.0, 4.0, 6.0])

    def test_detached_branch_gives_empty_map(self):
        x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        tape = Tape()
        with tape:
            y = x.detach()
            loss = (y * y).sum()
        assert len(tape.backward(loss)) == 0

    def test_backward_twice_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        with tape:
            loss = x.sum()
        tape.backward(loss)
        with pytest.raises(TensorError):
            tape.backward(loss)

    def test_non_scalar_loss_is_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tape = Tape()
        with tape:
            y = x * 2.0
        with pytest.raises(TensorError):
            tape.backward(y)

    def test_gradients_have_leaf_shapes_after_broadcast(self, rng):
        a = Tensor(rng.standard_normal((3, 1, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)
        tape = Tape()
        with tape:
            loss = (a * b).mean()
        grads = tape.backward(loss)
        assert grads.get(a).shape == a.shape
        assert grads.get(b).shape == b.shape

    def test_param_reused_twice_accumulates(self):
        p = Param(np.array([1.0, 2.0]), name="p")
        tape = Tape()
        with tape:
            loss = (p * p).sum() + p.sum()
        g = tape.backward(loss).get(p)
        assert np.allclose(g, [3.0, 5.0])

    def test_gradmap_merge_sums(self):
        x = Tensor([1.0, 1.0], requires_grad=True, dtype=np.float64)
        maps = []
        for scale in (1.0, 2.0):
            tape = Tape()
            with tape:
                loss = (x * float(scale)).sum()
            maps.append(tape.backward(loss))
        merged = maps[0].merge(maps[1])
        assert np.allclose(merged.get(x), [3.0, 3.0])


class TestShapeAlgebra:
    def test_matmul_shape(self, rng):
        a = Tensor(rng.standard_normal((2, 3)))
        b = Tensor(rng.standard_normal((3, 4)))
        assert (a @ b).shape == (2, 4)

    def test_matmul_mismatch(self, rng):
        with pytest.raises(TensorError):
            Tensor(rng.standard_normal((2, 3))) @ Tensor(rng.standard_normal((4, 4)))

    def test_reshape_round_trip_bit_identical(self, rng):
        x = rng.standard_normal(24)
        t = Tensor(x)
        back = t.reshape(2, 3, 4).reshape(24)
        assert np.array_equal(back.data, t.data)

    def test_softmax_masked_position_exactly_zero(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        mask = np.array([0.0, -np.inf, 0.0, 0.0])
        y = tc.softmax(x, mask)
        assert np.all(y.data[:, 1] == 0.0)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(TensorError):
            tc.add(Tensor([1.0], dtype=np.float32), Tensor([1.0], dtype=np.float64))


OP_CASES = {
    "add": lambda x: (x + 1.5 * x).sum(),
    "sub": lambda x: (x - 0.3 * x).mean(),
    "mul": lambda x: (x * x).sum(),
    "div": lambda x: (x / (x * x + 2.0)).sum(),
    "neg": lambda x: (-x).sum(),
    "matmul": lambda x: (x.reshape(4, 6) @ Tensor(_W)).sum(),
    "reshape": lambda x: (x.reshape(2, 12) * 2.0).sum(),
    "transpose": lambda x: (x.reshape(4, 6).T * Tensor(_W)).sum(),
    "concat": lambda x: tc.concat([x, x * 2.0]).mean(),
    "slice": lambda x: x[3:17].sum(),
    "gather": lambda x: tc.gather(x, np.array([[0, 5], [5, 2]])).sum(),
    "sum": lambda x: x.reshape(4, 6).sum(axis=1).mean(),
    "mean": lambda x: x.reshape(4, 6).mean(axis=0, keepdims=True).sum(),
    "std": lambda x: x.reshape(4, 6).std(axis=1).sum(),
    "softmax": lambda x: (tc.softmax(x.reshape(4, 6)) * Tensor(_W.T)).sum(),
    "softmax_masked": lambda x: tc.softmax(x.reshape(4, 6), _MASK).mean(),
    "exp": lambda x: tc.exp(x * 0.3).sum(),
    "log": lambda x: tc.log(x * x + 1.2).sum(),
    "log1p": lambda x: tc.log1p(x * x).sum(),
    "tanh": lambda x: tc.tanh(x).sum(),
    "sin": lambda x: tc.sin(x).sum(),
    "cos": lambda x: tc.cos(x).sum(),
    "abs": lambda x: tc.abs_(x).sum(),
    "sqrt": lambda x: tc.sqrt(x * x + 0.5).sum(),
    "sigmoid": lambda x: tc.sigmoid(x).sum(),
    "softplus": lambda x: tc.softplus(x * 3.0).sum(),
    "clamp_min": lambda x: tc.clamp_min(x, 0.25).sum(),
    "silu": lambda x: tc.silu(x).sum(),
    "leaky_relu": lambda x: tc.leaky_relu(x).sum(),
    "rfft": lambda x: sum((t * t).sum() for t in tc.rfft(x.reshape(4, 6))),
    "iir_filter": lambda x: tc.abs_(tc.iir_filter(x, _SOS)).sum(),
    "pad_zeros": lambda x: (tc.pad_zeros(x, 2, 3) * 0.5).sum(),
    "var": lambda x: x.reshape(4, 6).var(axis=0).sum(),
}

_W = np.random.default_rng(99).standard_normal((6, 4))
_MASK = np.where(np.random.default_rng(98).random((4, 6)) < 0.3, -np.inf, 0.0)
_SOS = np.array([[0.4, 0.2, 0.1, 1.0, -0.4, 0.1]])


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_difference(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = t64(rng.standard_normal(24) + 0.1 * np.sign(rng.standard_normal(24)))
    err = finite_diff_check(OP_CASES[name], x, h=1e-6)
    assert err < 1e-4, f"{name}: max rel err {err}"


def test_reductions_deterministic(rng):
    x = Tensor(rng.standard_normal((64, 64)))
    a = x.sum().item()
    for _ in range(5):
        assert x.sum().item() == a
    m = x.mean(axis=0).data
    assert np.array_equal(m, x.mean(axis=0).data)


def test_finite_diff_check_examples():
    f = lambda t: tc.sin(t * np.pi).sum()
    err = finite_diff_check(f, t64([0.1, 0.2]))
    assert err < 1e-6
    g = lambda t: t.sum()
    assert finite_diff_check(g, t64([0.4, -0.2, 1.1])) < 1e-10


def test_finite_diff_nan_propagates():
    f = lambda t: tc.log(t).sum()  # negative inputs -> nan
    err = finite_diff_check(f, t64([-1.0, 2.0]))
    assert np.isnan(err)


def test_immutability_of_op_inputs(rng):
    x = Tensor(rng.standard_normal(8))
    before = x.data.copy()
    _ = tc.exp(x) + tc.abs_(x) * 2.0
    assert np.array_equal(x.data, before)


def test_independent_tapes_across_threads_merge(rng):
    # tensors are shared read-only; each thread owns its own tape
    import threading

    w = Tensor(rng.standard_normal(16), requires_grad=True, dtype=np.float64)
    results = {}

    def worker(scale):
        tape = Tape()
        with tape:
            loss = (w * float(scale)).sum()
        results[scale] = tape.backward(loss)

    threads = [threading.Thread(target=worker, args=(s,)) for s in (1.0, 2.0)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    merged = results[1.0].merge(results[2.0])
    assert np.allclose(merged.get(w), 3.0)
