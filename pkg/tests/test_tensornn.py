import numpy as np
import pytest

from ordnet import tensornn as tn
from ordnet.errors import NonFinite, NotScalar, ShapeMismatch
from ordnet.tensornn import ParamStore, Tape, Tensor


def weighted_sum(y, seed=11):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return tn.reduce_sum(tn.mul(y, w))


def test_linear_zero_weight_gives_bias():
    p = ParamStore(0)
    p.set("l/W", np.zeros((3, 4)))
    p.set("l/b", [1.0, -2.0, 0.5])
    x = np.random.default_rng(0).normal(size=4)
    np.testing.assert_array_equal(tn.linear(p, "l", Tensor(x), 3).data, [1.0, -2.0, 0.5])


def test_linear_identity():
    p = ParamStore(0)
    p.set("l/W", np.eye(4))
    p.set("l/b", np.zeros(4))
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(tn.linear(p, "l", Tensor(x), 4).data, x)


def test_linear_shape_mismatch():
    p = ParamStore(0)
    tn.linear(p, "l", Tensor(np.ones(4)), 3)
    with pytest.raises(ShapeMismatch):
        tn.linear(p, "l", Tensor(np.ones(5)), 3)


def test_linear_gradcheck():
    p = ParamStore(1)
    x = Tensor(np.random.default_rng(2).normal(size=(6, 5)))
    rep = tn.grad_check(lambda ps, inp: weighted_sum(tn.linear(ps, "l", inp, 4)), p, x, tol=1e-4)
    assert rep.passed, rep


def test_gru_zero_weights():
    p = ParamStore(0)
    h0 = np.random.default_rng(3).normal(size=(2, 4))
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3)))
    tn.gru_step(p, "g", x, Tensor(h0))
    for k in p.names():
        p.set(k, np.zeros(p[k].shape))
    out = tn.gru_step(p, "g", x, Tensor(h0))
    np.testing.assert_allclose(out.data, 0.5 * h0, rtol=0, atol=1e-15)


def test_gru_gradcheck():
    p = ParamStore(5)
    rng = np.random.default_rng(6)
    x, h = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 5)))
    rep = tn.grad_check(lambda ps, inp: weighted_sum(tn.gru_step(ps, "g", inp[0], inp[1])), p, (x, h), tol=1e-4)
    assert rep.passed, rep


def test_gru_sequence_of_one():
    p = ParamStore(7)
    rng = np.random.default_rng(8)
    x, h = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=6))
    (seq,) = tn.gru_sequence(p, "g", [x], h)
    np.testing.assert_array_equal(seq.data, tn.gru_step(p, "g", x, h).data)


def test_mlp_examples():
    p = ParamStore(0)
    x = Tensor(np.random.default_rng(9).normal(size=(4, 3)))
    tn.mlp(p, "m", [5, 2], x)
    for k in p.names():
        p.set(k, np.zeros(p[k].shape))
    np.testing.assert_array_equal(tn.mlp(p, "m", [5, 2], x).data, np.zeros((4, 2)))
    q = ParamStore(0)
    q.set("m/0/W", np.eye(3))
    q.set("m/0/b", np.zeros(3))
    np.testing.assert_array_equal(tn.mlp(q, "m", [3], x).data, x.data)
    with pytest.raises(ShapeMismatch):
        tn.mlp(q, "m", [], x)


def test_mlp_gradcheck():
    p = ParamStore(10)
    x = Tensor(np.random.default_rng(11).normal(size=(5, 3)))
    rep = tn.grad_check(lambda ps, inp: weighted_sum(tn.mlp(ps, "m", [8, 8, 2], inp, "tanh")), p, x)
    assert rep.passed, rep


def test_backward_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = tn.reduce_sum(tn.mul(x, x))
    (g,) = tn.input_grads(tape, loss, [x])
    np.testing.assert_array_equal(g, 2 * x.data)


def test_backward_sum_wx():
    p = ParamStore(0)
    x = np.array([1.0, 2.0, -1.0])
    with Tape() as tape:
        loss = tn.reduce_sum(tn.linear(p, "l", Tensor(x), 2, bias=False))
    p.zero_grad()
    tn.backward(tape, loss, p)
    np.testing.assert_array_equal(p.grads["l/W"], np.tile(x, (2, 1)))


def test_backward_not_scalar():
    p = ParamStore(0)
    with Tape() as tape:
        y = tn.linear(p, "l", Tensor(np.ones(3)), 2)
    with pytest.raises(NotScalar):
        tn.backward(tape, y, p)


def test_unreachable_params_get_zero():
    p = ParamStore(0)
    p.get("unused/W", (2, 2))
    with Tape() as tape:
        loss = tn.reduce_sum(tn.linear(p, "l", Tensor(np.ones(3)), 2))
    p.zero_grad()
    tn.backward(tape, loss, p)
    np.testing.assert_array_equal(p.grads["unused/W"], np.zeros((2, 2)))


def test_backward_linearity():
    p = ParamStore(3)
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))

    def losses():
        y = tn.mlp(p, "m", [4, 2], x, "tanh")
        return weighted_sum(y, 1), weighted_sum(tn.sigmoid(y), 2)

    with Tape() as tape:
        l1, l2 = losses()
        total = tn.add(l1, l2)
    p.zero_grad()
    tn.backward(tape, total, p)
    both = {k: v.copy() for k, v in p.grads.items()}
    p.zero_grad()
    tn.backward(tape, l1, p)
    tn.backward(tape, l2, p)
    for k in both:
        np.testing.assert_allclose(p.grads[k], both[k], rtol=1e-12, atol=1e-14)


def test_forward_bit_deterministic():
    outs = []
    for _ in range(2):
        p = ParamStore(42)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        outs.append(tn.gru_step(p, "g", x, tn.mlp(p, "m", [6], x)).data.tobytes())
    assert outs[0] == outs[1]


def test_ops_gradcheck():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(6, 3)))

    def fn(ps, inp):
        y = tn.linear(ps, "l", inp, 3)
        a = tn.softplus(y) + tn.relu(y) * 0.3 + tn.exp(tn.tanh(y))
        b = tn.segment_sum(tn.take(a, [0, 2, 2, 5]), [1, 0, 1, 1], 2)
        c = tn.concat([b, tn.log(tn.softplus(b) + 1.0)], axis=-1)
        d = tn.div(c, tn.abs_(c) + 2.0)
        return tn.mean(tn.reshape(d, (-1,)) * np.arange(12.0)) - tn.reduce_sum(tn.reduce_sum(d, axis=0))

    rep = tn.grad_check(fn, ParamStore(4), x)
    assert rep.passed, rep


def test_corrupted_backward_fails():
    p = ParamStore(1)
    x = Tensor(np.random.default_rng(2).normal(size=(6, 5)))
    with tn.corrupted_backward():
        rep = tn.grad_check(lambda ps, inp: weighted_sum(tn.linear(ps, "l", inp, 4)), p, x)
    assert not rep.passed
    assert rep.max_rel_err > 1e-2


def test_grad_check_nonfinite():
    p = ParamStore(0)
    with pytest.raises(NonFinite), np.errstate(divide="ignore"):
        tn.grad_check(lambda ps, _: tn.reduce_sum(tn.log(tn.linear(ps, "l", Tensor(np.ones(2)), 1) * 0.0)), p)


def test_adam_zero_grad_no_change():
    p = ParamStore(0)
    w = p.get("w", (3,)).data.copy()
    tn.adam_step(p, {"w": np.zeros(3)}, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, w)


def test_adam_first_step_closed_form():
    p = ParamStore(0)
    p.set("w", np.zeros(3))
    g = np.array([0.5, -2.0, 1e-3])
    lr, eps = 0.01, 1e-8
    tn.adam_step(p, {"w": g}, lr=lr, eps=eps)
    # bias-corrected moments at t=1 are g and g^2
    np.testing.assert_allclose(p["w"].data, -lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_adam_converges_on_quadratic():
    p = ParamStore(0)
    p.set("w", [3.0])
    target = -1.25
    for step in range(5000):
        w = p["w"].data
        tn.adam_step(p, {"w": 2 * (w - target)}, lr=0.05)
        if abs(p["w"].data[0] - target) <= 1e-6:
            break
    assert abs(p["w"].data[0] - target) <= 1e-6, (step, p["w"].data)


def test_checkpoint_roundtrip(tmp_path):
    p = ParamStore(3)
    tn.mlp(p, "m", [4, 2], Tensor(np.ones((2, 3))))
    p.save(tmp_path / "ck.json", {"dims": 4})
    q = ParamStore.load(tmp_path / "ck.json")
    for k in p.names():
        np.testing.assert_array_equal(p[k].data, q[k].data)
