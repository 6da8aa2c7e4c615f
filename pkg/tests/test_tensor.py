"""Tensor engine: forward values against hand/brute-force oracles, every
differentiable op against central finite differences at 64-bit."""

import numpy as np
import pytest

from conftest import fd_grad, max_rel_err, ref_attention, ref_causal_conv

from megabyte import tensor as T
from megabyte.tensor import Tensor


def _check_grads(build, arrays, tol=1e-4, h=1e-5, floor=1e-5):
    """build() recomputes the scalar loss from `arrays` (list of np arrays
    wrapped fresh inside); returns max rel err across all inputs."""
    tensors = build()
    loss = tensors["loss"]
    loss.backward()
    worst = 0.0
    for name, arr in arrays.items():
        analytic = tensors[name].grad
        assert analytic is not None, f"no grad reached {name}"
        numeric = fd_grad(lambda: build()["loss"].item(), arr, h=h)
        worst = max(worst, max_rel_err(analytic, numeric, floor=floor))
    assert worst < tol, f"max rel err {worst}"
    return worst


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_1x1():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))

    def build():
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        return {"a": ta, "b": tb, "loss": T.matmul(ta, tb).sum()}

    _check_grads(build, {"a": a, "b": b}, tol=1e-6, floor=1e-6)


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))  # broadcast over the stack of 2

    def build():
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        w = Tensor(np.linspace(0.5, 1.5, 2 * 3 * 5).reshape(2, 3, 5))
        return {"a": ta, "b": tb, "loss": (T.matmul(ta, tb) * w).sum()}

    _check_grads(build, {"a": a, "b": b}, tol=1e-6, floor=1e-6)


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax_last(Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_no_overflow():
    out = T.softmax_last(Tensor([1000.0, 0.0]))
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=5.0, size=(4, 7, 9))
    out = T.softmax_last(Tensor(x)).data
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_cross_entropy_gradient_identity():
    # d(-log softmax(x)[target]) / dx == softmax(x) - onehot(target)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 8))
    targets = rng.integers(0, 8, size=5)
    tx = Tensor(x, requires_grad=True)
    loss = -T.gather_last(T.log_softmax_last(tx), targets).sum()
    loss.backward()
    sm = np.exp(x - x.max(axis=-1, keepdims=True))
    sm /= sm.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(x)
    onehot[np.arange(5), targets] = 1.0
    assert np.allclose(tx.grad, sm - onehot, atol=1e-12)


def test_log_softmax_grad_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))

    def build():
        tx = Tensor(x, requires_grad=True)
        return {"x": tx, "loss": (T.log_softmax_last(tx) * Tensor(w)).sum()}

    _check_grads(build, {"x": x}, tol=1e-6, floor=1e-6)


# -- causal attention ----------------------------------------------------------

def test_attention_single_slot_returns_value():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(1, 1, 4))
    v = rng.normal(size=(1, 1, 4))
    out = T.causal_attention(Tensor(q), Tensor(rng.normal(size=(1, 1, 4))), Tensor(v))
    assert np.array_equal(out.data, v)


def test_attention_future_value_bit_invisible():
    rng = np.random.default_rng(6)
    q = rng.normal(size=(2, 5, 4))
    k = rng.normal(size=(2, 5, 4))
    v = rng.normal(size=(2, 5, 4))
    base = T.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for j in range(1, 5):
        for perturbed in (v, k):
            mod = perturbed.copy()
            mod[:, j, :] += 100.0
            args = (Tensor(q), Tensor(k if perturbed is v else mod),
                    Tensor(mod if perturbed is v else v))
            out = T.causal_attention(*args).data
            assert np.array_equal(out[:, :j, :], base[:, :j, :])


def test_attention_t2_matches_brute_force():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(1, 2, 1))
    k = rng.normal(size=(1, 2, 1))
    v = rng.normal(size=(1, 2, 1))
    out = T.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    ref = ref_attention(q, k, v)
    assert np.allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("rotary", [False, True])
def test_attention_with_extras_matches_brute_force(rotary):
    rng = np.random.default_rng(8)
    q = rng.normal(size=(2, 3, 4, 6))
    k = rng.normal(size=(2, 3, 4, 6))
    v = rng.normal(size=(2, 3, 4, 6))
    ek = rng.normal(size=(2, 3, 2, 6))
    ev = rng.normal(size=(2, 3, 2, 6))
    out = T.causal_attention(Tensor(q), Tensor(k), Tensor(v),
                             extra_k=Tensor(ek), extra_v=Tensor(ev), rotary=rotary).data
    ref = ref_attention(q, k, v, extra_k=ek, extra_v=ev, rotary=rotary)
    assert np.allclose(out, ref, atol=1e-12)


def test_attention_incremental_query_matches_brute_force():
    # Single new query against a longer key history (the cache shape).
    rng = np.random.default_rng(9)
    q = rng.normal(size=(1, 2, 1, 4))
    k = rng.normal(size=(1, 2, 3, 4))
    v = rng.normal(size=(1, 2, 3, 4))
    out = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), rotary=True).data
    ref = ref_attention(q, k, v, rotary=True)
    assert np.allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("rotary", [False, True])
def test_attention_grads_finite_differences(rotary):
    rng = np.random.default_rng(10)
    arrays = {
        "q": rng.normal(size=(2, 3, 4)),
        "k": rng.normal(size=(2, 3, 4)),
        "v": rng.normal(size=(2, 3, 4)),
        "ek": rng.normal(size=(2, 2, 4)),
        "ev": rng.normal(size=(2, 2, 4)),
    }
    w = rng.normal(size=(2, 3, 4))

    def build():
        ts = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        out = T.causal_attention(ts["q"], ts["k"], ts["v"],
                                 extra_k=ts["ek"], extra_v=ts["ev"], rotary=rotary)
        ts["loss"] = (out * Tensor(w)).sum()
        return ts

    _check_grads(build, arrays, tol=1e-4)


def test_attention_score_counter():
    T.reset_attention_score_ops()
    rng = np.random.default_rng(11)
    q = rng.normal(size=(3, 4, 2))
    T.causal_attention(Tensor(q), Tensor(q), Tensor(q))
    assert T.attention_score_ops() == 3 * 4 * 4
    ek = rng.normal(size=(3, 2, 2))
    T.causal_attention(Tensor(q), Tensor(q), Tensor(q), extra_k=Tensor(ek), extra_v=Tensor(ek))
    assert T.attention_score_ops() == 3 * 4 * 4 + 3 * 4 * (4 + 2)
    T.reset_attention_score_ops()


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_slice_is_zero():
    out = T.layer_norm(Tensor(np.full((3, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_already_normalized():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-4)  # shrunk by eps only


def test_layer_norm_grads_finite_differences():
    rng = np.random.default_rng(12)
    arrays = {
        "x": rng.normal(size=(4, 6)),
        "gain": rng.normal(size=6),
        "bias": rng.normal(size=6),
    }
    w = rng.normal(size=(4, 6))

    def build():
        ts = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        out = T.layer_norm(ts["x"], ts["gain"], ts["bias"])
        ts["loss"] = (out * Tensor(w)).sum()
        return ts

    _check_grads(build, arrays, tol=1e-5)


# -- causal conv -----------------------------------------------------------------

def test_conv_identity_filter():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 3))
    kernel = np.zeros((3, 3, 3))
    kernel[-1] = np.eye(3)  # the tap aligned with the current sample
    out = T.causal_conv1d(Tensor(x), Tensor(kernel))
    assert np.allclose(out.data, x, atol=1e-15)


def test_conv_causality():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(8, 2))
    kernel = rng.normal(size=(5, 2, 2))
    base = T.causal_conv1d(Tensor(x), Tensor(kernel)).data
    for j in range(1, 8):
        mod = x.copy()
        mod[j] += 10.0
        out = T.causal_conv1d(Tensor(mod), Tensor(kernel)).data
        assert np.array_equal(out[:j], base[:j])


def test_conv_width3_hand_oracle():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(4, 1))
    kernel = rng.normal(size=(3, 1, 1))
    out = T.causal_conv1d(Tensor(x), Tensor(kernel)).data
    assert np.allclose(out, ref_causal_conv(x, kernel), atol=1e-12)


def test_conv_grads_finite_differences():
    rng = np.random.default_rng(16)
    arrays = {"x": rng.normal(size=(5, 3)), "k": rng.normal(size=(3, 3, 2))}
    w = rng.normal(size=(5, 2))

    def build():
        ts = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        ts["loss"] = (T.causal_conv1d(ts["x"], ts["k"]) * Tensor(w)).sum()
        return ts

    _check_grads(build, arrays, tol=1e-5)


# -- backward mechanics -------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_repeated_backward_is_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_detached_subgraph_gets_zero_gradient():
    x = Tensor(np.ones(4), requires_grad=True)
    y = (x * 3.0).detach()
    loss = (y * 2.0).sum() + x.sum()
    loss.backward()
    assert np.array_equal(x.grad, np.ones(4))  # only the undetached path


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    assert x.grad[0] == pytest.approx(4.0)


def test_diamond_graph_visits_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * 2.0
    loss = (y + y).sum()
    loss.backward()
    assert x.grad[0] == pytest.approx(4.0)


# -- lookup and shaping ops -----------------------------------------------------------

def test_embedding_lookup_and_scatter_grad():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([1, 1, 3])
    out = T.embedding(table, ids)
    assert np.array_equal(out.data, table.data[ids])
    out.sum().backward()
    expect = np.zeros((4, 3))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.array_equal(table.grad, expect)


def test_embedding_rejects_out_of_range():
    with pytest.raises(ValueError):
        T.embedding(Tensor(np.zeros((4, 3))), np.array([4]))
    with pytest.raises(ValueError):
        T.embedding(Tensor(np.zeros((4, 3))), np.array([-1]))


def test_shaping_ops_grads():
    rng = np.random.default_rng(17)
    arrays = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 1, 4))}
    w = rng.normal(size=(4, 3, 4))

    def build():
        ta = Tensor(arrays["a"], requires_grad=True)
        tb = Tensor(arrays["b"], requires_grad=True)
        joined = T.concat([ta, T.broadcast_to(tb, (2, 3, 4))], axis=0)
        moved = joined.transpose((0, 2, 1)).transpose((0, 2, 1))  # there and back
        sliced = moved[:, :, :]
        return {"a": ta, "b": tb, "loss": (sliced * Tensor(w)).sum()}

    _check_grads(build, arrays, tol=1e-6, floor=1e-6)


def test_slice_grad_scatters():
    x = Tensor(np.arange(10.0), requires_grad=True)
    x[2:5].sum().backward()
    expect = np.zeros(10)
    expect[2:5] = 1.0
    assert np.array_equal(x.grad, expect)


# -- misc guarantees ---------------------------------------------------------------

def test_nonfinite_forward_raises():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1e308])) * Tensor(np.array([1e308]))


def test_ops_are_deterministic():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(5, 5))
    a = T.softmax_last(T.matmul(Tensor(x), Tensor(x))).data
    b = T.softmax_last(T.matmul(Tensor(x), Tensor(x))).data
    assert np.array_equal(a, b)


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.ones((3, 3)))
    assert T.dropout(x, 0.5, None) is x


def test_dropout_inverted_scaling():
    x = Tensor(np.ones((1000,)))
    out = T.dropout(x, 0.25, np.random.default_rng(0))
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(len(kept) / 1000 - 0.75) < 0.05


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y._prev == ()
