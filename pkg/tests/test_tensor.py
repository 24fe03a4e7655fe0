"""Tensor engine: kernels, tape recording, and reverse-mode gradients."""

import numpy as np
import pytest

import iemf.tensor as T
from iemf.errors import ContractError, NumericError, ShapeError
from iemf.neurons import relu
from iemf.tensor import (
    GradientSet,
    Tape,
    Tensor,
    backward,
    matmul,
    replay_forward,
    softmax,
    softmax_cross_entropy,
)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)


def test_matmul_zero():
    z = Tensor(np.zeros((2, 3)))
    other = Tensor(np.arange(12, dtype=float).reshape(3, 4))
    assert np.array_equal(matmul(z, other).data, np.zeros((2, 4)))


def test_matmul_hand_case():
    c = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(c.data, [[17.0], [39.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    for c in (-3.0, 0.0, 7.5):
        out = softmax(Tensor([c, c, c, c])).data
        assert np.allclose(out, 0.25, atol=1e-15)
        assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_shift_invariance():
    v = np.array([0.3, -1.2, 2.0, 0.0])
    a = softmax(Tensor(v)).data
    b = softmax(Tensor(v + 123.456)).data
    assert np.allclose(a, b, atol=1e-14)


def test_softmax_derived_value():
    out = softmax(Tensor([0.0, np.log(2.0)])).data
    assert np.allclose(out, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((0,))))


def test_softmax_positive_rows_sum_to_one():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((40, 7)) * 30.0)
    p = softmax(logits).data
    assert np.all(p > 0.0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


def test_cross_entropy_perfect_logits():
    logits = Tensor([[100.0, 0.0], [0.0, 100.0]])
    loss, _ = softmax_cross_entropy(logits, [0, 1])
    assert loss.item() < 1e-12


def test_cross_entropy_uniform():
    loss, _ = softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_derived_value():
    loss, probs = softmax_cross_entropy(Tensor([[0.0, np.log(2.0)]]), [1])
    assert abs(loss.item() - (-np.log(2.0 / 3.0))) < 1e-12
    assert np.allclose(probs.data, [[1.0 / 3.0, 2.0 / 3.0]])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6, dtype=float).reshape(2, 3), param_id="x")
    grads = backward(tape, T.sum_all(x))
    assert np.array_equal(grads["x"].data, np.ones((2, 3)))


def test_backward_scalar_scaling():
    tape = Tape()
    x = tape.leaf(np.ones((3, 2)), param_id="x")
    grads = backward(tape, T.sum_all(T.smul(x, 2.5)))
    assert np.array_equal(grads["x"].data, np.full((3, 2), 2.5))


def test_backward_requires_scalar_seed():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), param_id="x")
    y = T.smul(x, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_skips_non_parameter_leaves():
    tape = Tape()
    x = tape.leaf(np.ones(3), param_id="x")
    c = tape.leaf(np.full(3, 2.0))  # constant leaf
    grads = backward(tape, T.sum_all(T.mul(x, c)))
    assert set(grads.keys()) == {"x"}


def _finite_difference(loss_of, w, h=1e-5):
    fd = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd[idx] = (loss_of(wp) - loss_of(wm)) / (2.0 * h)
    return fd


def _two_layer_loss(w1_val, w2_val, x_val, labels):
    tape = Tape()
    w1 = tape.leaf(w1_val, param_id="w1")
    w2 = tape.leaf(w2_val, param_id="w2")
    x = tape.leaf(x_val)
    h = relu(T.matmul(x, T.transpose(w1)))
    logits = T.matmul(h, T.transpose(w2))
    loss, _ = softmax_cross_entropy(logits, labels)
    return tape, loss


def test_gradients_match_finite_differences_on_random_nets():
    rng = np.random.default_rng(7)
    for trial in range(5):
        w1 = rng.standard_normal((5, 4))
        w2 = rng.standard_normal((3, 5))
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, size=6)
        tape, loss = _two_layer_loss(w1, w2, x, labels)
        grads = backward(tape, loss)
        for name, w in (("w1", w1), ("w2", w2)):
            if name == "w1":
                fd = _finite_difference(lambda v: _two_layer_loss(v, w2, x, labels)[1].item(), w1)
            else:
                fd = _finite_difference(lambda v: _two_layer_loss(w1, v, x, labels)[1].item(), w2)
            err = np.abs(grads[name].data - fd) / np.maximum(1e-6, np.abs(fd))
            assert np.max(err) < 1e-6, f"trial {trial} {name}: {np.max(err)}"


def test_kernel_gradients_finite_difference_sweep():
    """Every differentiable kernel in one composed graph against central differences."""
    rng = np.random.default_rng(11)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((3, 4))
    bias0 = rng.standard_normal(4)
    old = rng.standard_normal((3, 2))

    def build(a_val, b_val, bias_val):
        tape = Tape()
        a = tape.leaf(a_val, param_id="a")
        b = tape.leaf(b_val, param_id="b")
        bias = tape.leaf(bias_val, param_id="bias")
        m = T.add_bias(T.mul(T.add(a, b), T.sub(a, b)), bias)
        m = T.sadd(T.smul(m, 0.7), 0.3)
        cat = T.concat_cols(m, T.transpose(T.transpose(m)))
        sel = T.select_cols(cat, [1, 3, 3, 6])
        sm = softmax(sel)
        kl = T.distill_kl(T.select_cols(cat, [0, 2]), Tensor(old), 2.0)
        loss = T.add(T.sum_all(T.mul(sm, sm)), kl)
        loss = T.add(loss, softmax_cross_entropy(sel, [0, 3, 2])[0])
        return tape, loss

    tape, loss = build(a0, b0, bias0)
    grads = backward(tape, loss)
    assert replay_forward(tape)
    for name, val in (("a", a0), ("b", b0), ("bias", bias0)):
        def loss_of(v, _name=name):
            vals = {"a": a0, "b": b0, "bias": bias0}
            vals[_name] = v
            return build(vals["a"], vals["b"], vals["bias"])[1].item()

        fd = _finite_difference(loss_of, val.copy())
        err = np.abs(grads[name].data - fd) / np.maximum(1e-6, np.abs(fd))
        assert np.max(err) < 1e-6, f"{name}: {np.max(err)}"


def test_detach_blocks_gradient():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), param_id="x")
    grads = backward(tape, T.sum_all(T.mul(x, T.detach(x))))
    # d/dx sum(x * const) = const = detached value
    assert np.array_equal(grads["x"].data, np.ones((2, 2)))


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    w1 = rng.standard_normal((5, 4))
    w2 = rng.standard_normal((3, 5))
    x = rng.standard_normal((6, 4))
    labels = [0, 1, 2, 0, 1, 2]
    t1, l1 = _two_layer_loss(w1, w2, x, labels)
    t2, l2 = _two_layer_loss(w1, w2, x, labels)
    assert l1.item() == l2.item()
    g1, g2 = backward(t1, l1), backward(t2, l2)
    for k in g1:
        assert np.array_equal(g1[k].data, g2[k].data)


def test_replay_after_backward_leaves_values_unchanged():
    rng = np.random.default_rng(9)
    tape, loss = _two_layer_loss(
        rng.standard_normal((4, 3)), rng.standard_normal((2, 4)),
        rng.standard_normal((5, 3)), [0, 1, 0, 1, 0],
    )
    before = [node.value.copy() for node in tape.nodes]
    backward(tape, loss)
    assert replay_forward(tape)
    for node, old in zip(tape.nodes, before):
        assert np.array_equal(node.value, old)


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        Tensor([np.inf, 1.0])
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        T.smul(Tensor([1e308]), 1e10)


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ContractError):
        T.add(a, b)


def test_gradient_set_is_a_mapping():
    gs = GradientSet({"w": Tensor(np.ones(2))})
    assert "w" in gs and len(gs) == 1
    assert list(gs.keys()) == ["w"]
    assert np.array_equal(gs["w"].data, np.ones(2))
