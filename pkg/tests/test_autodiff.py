import numpy as np
import pytest

from patchsim import autodiff as ad
from patchsim.autodiff import ShapeError, Tape, Tensor
from patchsim.gradcheck import finite_difference, grad_mismatch


def _check_op(op, *arrays, rel=1e-4):
    """Gradient-check op(*tensors).sum() against central finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]

    def forward():
        return float(ad.reduce_sum(op(*tensors)).data)

    with Tape() as tape:
        loss = ad.reduce_sum(op(*tensors))
    tape.backward(loss)
    numeric = finite_difference(forward, [t.data for t in tensors])
    for t, num in zip(tensors, numeric):
        assert grad_mismatch(t.grad, num, rel_tol=rel) <= 1.0


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_analytic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [1.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    _check_op(ad.matmul, a, b)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=0)


def test_softmax_stability_no_overflow():
    out = ad.softmax(Tensor([1000.0, 0.0]))
    assert out.data[0] == 1.0
    assert out.data[1] == 0.0


def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((5, 7)) * 10
    out = ad.softmax(Tensor(x), axis=-1)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12


def test_softmax_jacobian(rng):
    x = rng.standard_normal((3, 5))
    # weight the outputs so the pullback exercises off-diagonal jacobian terms
    w = Tensor(rng.standard_normal((3, 5)))
    _check_op(lambda t: ad.mul(ad.softmax(t, axis=-1), w), x)


def test_layer_norm_constant_row_is_all_zeros():
    x = Tensor(np.full((2, 4), 3.3))
    out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_analytic_two_values():
    out = ad.layer_norm(
        Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
    )
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_gradient(rng):
    x = rng.standard_normal((4, 6))
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    w = Tensor(rng.standard_normal((4, 6)))
    _check_op(lambda t, gg, bb: ad.mul(ad.layer_norm(t, gg, bb), w), x, g, b)


def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_elementwise_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.mul(x, x))
    tape.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_twice_is_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="tape"):
        tape.backward(loss)


def test_tape_topological_order(rng):
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with Tape() as tape:
        y = ad.silu(ad.matmul(x, x))
        z = ad.reduce_sum(ad.mul(y, y))
    seen = {id(x)}
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad:
                assert id(p) in seen
        seen.add(id(node.out))
    tape.backward(z)


def test_gradient_accumulates_across_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.mul(x, x), x))
    tape.backward(loss)
    assert np.allclose(x.grad, [5.0])


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, ad.silu, ad.sin, ad.cos, ad.square],
)
def test_unary_gradients(op, rng):
    _check_op(op, rng.standard_normal((4, 3)))


def test_log_sqrt_abs_gradients(rng):
    _check_op(ad.log, rng.uniform(0.5, 3.0, size=(3, 3)))
    _check_op(ad.sqrt, rng.uniform(0.5, 3.0, size=(3, 3)))
    _check_op(ad.absolute, rng.uniform(0.5, 3.0, size=(3, 3)) * np.sign(rng.standard_normal((3, 3))))


def test_binary_broadcast_gradients(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    _check_op(ad.add, a, b)
    _check_op(ad.mul, a, b)
    _check_op(ad.sub, a, b)
    _check_op(ad.div, a, rng.uniform(0.5, 2.0, size=3))


def test_einsum_gradients(rng):
    q = rng.standard_normal((2, 3, 2, 4))
    k = rng.standard_normal((2, 5, 2, 4))
    _check_op(lambda a, b: ad.einsum("bqhd,bkhd->bqhk", a, b), q, k)
    r = rng.standard_normal((2, 3, 5, 2, 4))
    _check_op(lambda a, b: ad.einsum("bqhd,bqkhd->bqhk", a, b), q, r)


def test_shape_ops_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    _check_op(lambda t: ad.reshape(t, (6, 4)), x)
    _check_op(lambda t: ad.transpose(t, (2, 0, 1)), x)
    _check_op(lambda t: ad.broadcast_to(ad.reshape(t, (2, 1, 3, 4)), (2, 5, 3, 4)), x)
    _check_op(lambda t: ad.narrow(t, 2, 1, 2), x)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    _check_op(lambda u, v: ad.concat([u, v], axis=1), a, b)
    _check_op(lambda u, v: ad.stack([u, ad.reshape(v, (2, 3))], axis=1), a, rng.standard_normal(6))


def test_gather_gradient_with_repeats(rng):
    x = rng.standard_normal((5, 3))
    idx = np.array([[0, 2], [2, 4]])
    _check_op(lambda t: ad.gather(t, idx), x)


def test_masked_softmax_respects_mask(rng):
    scores = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    mask = np.array([[True, False, True, False], [False, False, False, False]])
    out = ad.masked_softmax(scores, mask)
    assert out.data[0, 1] == 0.0 and out.data[0, 3] == 0.0
    assert np.allclose(out.data[0].sum(), 1.0)
    assert np.allclose(out.data[1], 0.0)  # empty row -> zero weights


def test_masked_softmax_gradient(rng):
    x = rng.standard_normal((3, 5))
    mask = rng.random((3, 5)) > 0.3
    mask[1] = False
    w = Tensor(rng.standard_normal((3, 5)))
    _check_op(lambda t: ad.mul(ad.masked_softmax(t, mask), w), x)


def test_logsumexp_matches_numpy(rng):
    x = rng.standard_normal((4, 6)) * 30
    out = ad.logsumexp(Tensor(x), axis=-1)
    ref = np.log(np.exp(x - x.max(-1, keepdims=True)).sum(-1)) + x.max(-1)
    assert np.allclose(out.data, ref, atol=1e-12)
    _check_op(lambda t: ad.logsumexp(t, axis=-1), x / 10)


def test_dropout_inverted_and_seeded():
    x = Tensor(np.ones((1000,)), requires_grad=True)
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)
    out1 = ad.dropout(x, 0.25, rng1, training=True)
    out2 = ad.dropout(x, 0.25, rng2, training=True)
    assert np.array_equal(out1.data, out2.data)
    kept = out1.data[out1.data != 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(out1.data.mean() - 1.0) < 0.1
    assert ad.dropout(x, 0.25, rng1, training=False) is x


def test_determinism_same_inputs_bitwise(rng):
    x = rng.standard_normal((8, 8))
    w = rng.standard_normal((8, 8))

    def run():
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.silu(ad.matmul(t, Tensor(w))))
        tape.backward(loss)
        return loss.data.copy(), t.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def test_composed_graph_gradcheck(rng):
    """Composite forward graph (affine -> silu -> norm -> softmax) vs FD."""
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 4))
    g = np.ones(4)
    b = np.zeros(4)
    probe = Tensor(rng.standard_normal((3, 4)))

    def net(xt, wt, gt, bt):
        h = ad.silu(ad.matmul(xt, wt))
        h = ad.layer_norm(h, gt, bt)
        return ad.mul(ad.softmax(h, axis=-1), probe)

    _check_op(net, x, w, g, b)
