import numpy as np
import pytest

from _util import grad_error, leaf
from dualts.autograd import (
    RngStream, Tape, Tensor, backward, finite_difference_grad, ops, precision, relative_error,
)
from dualts.errors import DegenerateBatch, InvalidProbability, NonScalarLoss, ShapeMismatch, StaleTape


def total(x):
    return ops.sum(x)


# -- forward values -----------------------------------------------------------------

def test_matmul_values():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0], [4.0]])
    assert np.array_equal(ops.matmul(a, b).data, [[3.0], [4.0]])
    assert ops.matmul(Tensor([[1.0, 2.0]]), b).data.item() == 11.0


def test_matmul_gradient_by_hand():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]])
    with Tape() as tape:
        out = ops.sum(ops.matmul(a, b))
    tape.backward(out)
    assert np.array_equal(a.grad, [[3.0, 4.0]])
    numeric = finite_difference_grad(lambda _: ops.sum(ops.matmul(a, b)), a, 1e-5)
    assert relative_error(a.grad, numeric) < 1e-6


def test_softmax_symmetry_and_overflow():
    assert np.allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ops.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)


def test_layer_norm_values():
    out = ops.layer_norm(Tensor([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3))
    assert np.allclose(out.data, 0.0)
    out = ops.layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=0.0)
    assert np.allclose(out.data, [[-1.0, 1.0]])


def test_batch_norm_training_and_eval():
    rm, rv = np.zeros(1), np.ones(1)
    out = ops.batch_norm_1d(Tensor([[1.0], [3.0]]), np.ones(1), np.zeros(1), rm, rv, True)
    assert np.allclose(out.data, [[-1.0], [1.0]], atol=1e-5)
    # running stats moved toward the batch mean and the unbiased variance
    assert rm[0] == pytest.approx(0.1 * 2.0)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)

    x = np.random.default_rng(0).normal(size=(4, 3))
    out = ops.batch_norm_1d(Tensor(x), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), False)
    assert np.allclose(out.data, x, atol=1e-5)

    with pytest.raises(DegenerateBatch):
        ops.batch_norm_1d(Tensor([[1.0]]), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)


def test_dropout_modes():
    x = Tensor(np.random.default_rng(0).normal(size=(10, 10)))
    assert ops.dropout(x, 0.0, True, RngStream(0)).data is x.data
    assert ops.dropout(x, 0.5, False, RngStream(0)).data is x.data
    big = Tensor(np.ones((200, 200)))
    kept = (ops.dropout(big, 0.5, True, RngStream(3)).data != 0).mean()
    assert abs(kept - 0.5) < 0.02
    with pytest.raises(InvalidProbability):
        ops.dropout(x, 1.0, True, RngStream(0))


def test_cosine_similarity_values():
    assert ops.cosine_similarity(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(1.0)
    assert ops.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert ops.cosine_similarity(Tensor([1.0, 0.0]), Tensor([-1.0, 0.0])).item() == -1.0
    with pytest.raises(ShapeMismatch):
        ops.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


def test_detach_severs_one_branch():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.mul(x, ops.detach(x)))
    tape.backward(y)
    assert x.grad[0] == 2.0
    assert np.array_equal(ops.detach(x).data, x.data)

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.add(ops.sum(ops.detach(x)), ops.scale(ops.sum(x), 0.0))
    grads = tape.backward(y, inputs=[x])
    assert np.array_equal(grads[x], np.zeros(3))


def test_backward_simple_cases():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(x)
    tape.backward(y)
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.mul(x, x))
    tape.backward(y)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_tape_rejects_misuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        v = ops.mul(x, x)
        y = ops.sum(v)
    with pytest.raises(NonScalarLoss):
        tape.backward(v)
    tape.backward(y)
    with pytest.raises(StaleTape):
        tape.backward(y)
    with pytest.raises(StaleTape):
        with tape:
            pass
    with pytest.raises(StaleTape):
        backward(y)


def test_finite_difference_reference():
    x = Tensor([3.0])
    g = finite_difference_grad(lambda t: ops.sum(ops.square(t)), x)
    assert g[0] == pytest.approx(6.0, abs=1e-6)
    x = Tensor(np.random.default_rng(1).normal(size=5))
    assert np.allclose(finite_difference_grad(lambda t: ops.sum(t), x), 1.0, atol=1e-6)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5
    assert relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


def test_precision_context():
    with precision("f32"):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


# -- every primitive against central differences -------------------------------------

rng = np.random.default_rng(42)

PRIMITIVES = {
    "add": (lambda a, b: total(ops.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: total(ops.sub(a, b)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: total(ops.mul(a, ops.mul(a, b))), [(3, 4), (1, 4)]),
    "div": (lambda a, b: total(ops.div(a, b)), [(3, 4), "pos:3,4"]),
    "neg": (lambda a: total(ops.mul(ops.neg(a), a)), [(5,)]),
    "scale": (lambda a: total(ops.square(ops.scale(a, 2.5))), [(5,)]),
    "exp": (lambda a: total(ops.exp(a)), [(2, 3)]),
    "log": (lambda a: total(ops.log(a)), ["pos:2,3"]),
    "sqrt": (lambda a: total(ops.sqrt(a)), ["pos:2,3"]),
    "square": (lambda a: total(ops.square(a)), [(2, 3)]),
    "relu": (lambda a: total(ops.mul(ops.relu(a), a)), ["pos:6"]),
    "gelu": (lambda a: total(ops.mul(ops.gelu(a), a)), [(6,)]),
    "matmul": (lambda a, b: total(ops.square(ops.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a, b: total(ops.mul(ops.transpose(a), b)), [(3, 4), (4, 3)]),
    "swapaxes": (lambda a, b: total(ops.mul(ops.swapaxes(a, 0, 2), b)), [(2, 3, 4), (4, 3, 2)]),
    "reshape": (lambda a, b: total(ops.mul(ops.reshape(a, (6, 2)), b)), [(3, 4), (6, 2)]),
    "broadcast_to": (lambda a, b: total(ops.mul(ops.broadcast_to(a, (3, 4)), b)), [(1, 4), (3, 4)]),
    "getitem": (lambda a: total(ops.square(a[1:, ::2])), [(3, 4)]),
    "getitem_fancy": (lambda a: total(ops.square(a[[0, 2, 2], [1, 0, 0]])), [(3, 4)]),
    "concatenate": (lambda a, b: total(ops.square(ops.concatenate([a, b], axis=1))), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: total(ops.mul(ops.stack([a, b]), ops.stack([b, a]))), [(2, 3), (2, 3)]),
    "sum_axis": (lambda a: total(ops.square(ops.sum(a, axis=1, keepdims=True))), [(3, 4)]),
    "mean": (lambda a: total(ops.square(ops.mean(a, axis=0))), [(3, 4)]),
    "softmax": (lambda a, b: total(ops.mul(ops.softmax(a), b)), [(3,), (3,)]),
    "log_softmax": (lambda a, b: total(ops.mul(ops.log_softmax(a), b)), [(2, 4), (2, 4)]),
    "layer_norm": (lambda a, g, b, w: total(ops.mul(ops.layer_norm(a, g, b), w)), [(4,), (4,), (4,), (4,)]),
    "layer_norm_batched": (lambda a, g, b, w: total(ops.mul(ops.layer_norm(a, g, b), w)),
                           [(2, 3, 5), (5,), (5,), (2, 3, 5)]),
    "cosine_similarity": (lambda a, b: total(ops.cosine_similarity(a, b)), [(3, 5), (3, 5)]),
    "mse": (lambda a, b: ops.mse(a, b), [(2, 4), (2, 4)]),
    "linear": (lambda x, w, b: total(ops.square(ops.linear(x, w, b))), [(3, 4), (2, 4), (2,)]),
}


def _inputs(specs, seed):
    r = np.random.default_rng(seed)
    out = []
    for s in specs:
        if isinstance(s, str):
            shape = tuple(int(v) for v in s.split(":")[1].split(","))
            out.append(Tensor(r.uniform(0.5, 2.5, size=shape), requires_grad=True))
        else:
            out.append(Tensor(r.normal(size=s), requires_grad=True))
    return out


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, specs = PRIMITIVES[name]
    for seed in range(3):
        assert grad_error(fn, _inputs(specs, seed)) < 1e-6


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(training):
    r = np.random.default_rng(0)
    x, g, b = leaf(r, 5, 3), leaf(r, 3), leaf(r, 3)
    w = Tensor(r.normal(size=(5, 3)))
    rm, rv = r.normal(size=3), r.uniform(0.5, 1.5, size=3)

    def fn(x, g, b):
        # fresh running stats per call so the probe points see identical state
        return ops.sum(ops.mul(ops.batch_norm_1d(x, g, b, rm.copy(), rv.copy(), training), w))

    assert grad_error(fn, [x, g, b]) < 1e-6


def test_dropout_gradient_with_pinned_mask():
    r = np.random.default_rng(0)
    x = leaf(r, 4, 6)
    assert grad_error(lambda a: ops.sum(ops.square(ops.dropout(a, 0.3, True, RngStream(5)))), [x]) < 1e-6


def test_cross_entropy_gradient():
    r = np.random.default_rng(0)
    logits = leaf(r, 6, 3)
    labels = r.integers(0, 3, size=6)
    assert grad_error(lambda z: ops.cross_entropy(z, labels), [logits]) < 1e-6


def test_gradient_accumulates_across_uses():
    x = Tensor([1.5, -0.5], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0)))
    tape.backward(y)
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_rng_streams_are_reproducible_and_independent():
    a, b = RngStream(7, "x"), RngStream(7, "x")
    assert np.array_equal(a.random(5), b.random(5))
    assert not np.array_equal(RngStream(7, "x").random(5), RngStream(7, "y").random(5))
    c = RngStream(7, "x")
    c.random(3)
    state = c.get_state()
    first = c.random(4)
    d = RngStream.from_state(state)
    assert np.array_equal(d.random(4), first)
