import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamgate import numerics as nx
from streamgate.numerics import Tensor

TOL = 1e-4


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# forward examples ------------------------------------------------------------

def test_matmul_identity():
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_row_by_column():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_sum_gradient_is_ones_times_bT(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    nx.tsum(nx.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    num = nx.numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
    assert nx.max_rel_error(a.grad, num) < TOL


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_ce_uniform_logits():
    assert nx.softmax_cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_ce_weighted():
    loss = nx.softmax_cross_entropy(Tensor([0.0, 0.0]), 0, class_weights=[0.15, 0.85]).item()
    assert loss == pytest.approx(0.15 * math.log(2), abs=1e-15)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        nx.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)


def test_ce_rejects_nonpositive_weights():
    with pytest.raises(ValueError):
        nx.softmax_cross_entropy(Tensor([0.0, 1.0]), 0, class_weights=[0.0, 1.0])


def test_ce_gradient_length_two(rng):
    for _ in range(20):
        z = leaf(rng, 2, lo=-3, hi=3)
        t = int(rng.integers(2))
        err = nx.grad_check(lambda: nx.softmax_cross_entropy(z, t, [0.3, 0.7]), [z])
        assert err < 1e-6


def test_batched_ce_half_weights_is_half_unweighted(rng):
    z = Tensor(rng.normal(size=(7, 2)))
    y = rng.integers(0, 2, size=7)
    a = nx.cross_entropy(z, y).item()
    b = nx.cross_entropy(z, y, class_weights=[0.5, 0.5]).item()
    assert abs(b - 0.5 * a) < 1e-12


# optimizer -------------------------------------------------------------------

def _p(v, g=None):
    t = nx.param(np.array([v]))
    t.grad = None if g is None else np.array([g])
    return nx.Parameter("x", t)


def test_sgd_one_step():
    p = _p(1.0, 2.0)
    nx.sgd_step([p], 0.1)
    assert p.value.data[0] == pytest.approx(0.8)
    assert p.value.grad is None


def test_sgd_zero_lr_unchanged():
    p = _p(1.0, 2.0)
    nx.sgd_step([p], 0.0)
    assert p.value.data[0] == 1.0


def test_sgd_two_steps_on_square():
    p = _p(1.0)
    for _ in range(2):
        nx.tsum(nx.mul(p.value, p.value)).backward()
        nx.sgd_step([p], 0.1)
    assert p.value.data[0] == pytest.approx(0.64)


def test_sgd_missing_grad_names_parameter():
    with pytest.raises(nx.TrainingError, match="'x'"):
        nx.sgd_step([_p(1.0)], 0.1)


def test_adam_minimizes_quadratic():
    p = _p(3.0)
    opt = nx.Adam([p])
    for _ in range(500):
        nx.tsum(nx.mul(p.value, p.value)).backward()
        opt.step(0.05)
    assert abs(p.value.data[0]) < 1e-2


def test_clip_grad_norm():
    p = _p(0.0, 3.0)
    q = nx.Parameter("y", nx.param(np.array([0.0])))
    q.value.grad = np.array([4.0])
    assert nx.clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
    assert math.hypot(p.value.grad[0], q.value.grad[0]) == pytest.approx(1.0)


def test_cosine_schedule_endpoints():
    assert nx.cosine_lr(1.0, 0, 11) == 1.0
    assert nx.cosine_lr(1.0, 10, 11) == pytest.approx(0.0, abs=1e-15)
    assert nx.cosine_lr(1.0, 5, 11) == pytest.approx(0.5)


# gradient suite ------------------------------------------------------------------

def _unary_cases():
    return {
        "exp": nx.exp, "tanh": nx.tanh, "sigmoid": nx.sigmoid, "softplus": nx.softplus, "gelu": nx.gelu,
        "log": lambda x: nx.log(nx.add(nx.mul(x, x), 0.5)),
        "softmax": lambda x: nx.softmax(x, axis=-1),
        "log_softmax": lambda x: nx.log_softmax(x, axis=-1),
        "mean0": lambda x: nx.mean(x, axis=0),
        "transpose": lambda x: nx.transpose(x),
        "reshape": lambda x: nx.reshape(x, (-1,)),
        "take": lambda x: nx.take(x, (np.array([0, 1, 0]), np.array([1, 0, 1]))),
        "slice": lambda x: x[:, 1:],
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_gradients(name, rng):
    fn = _unary_cases()[name]
    for _ in range(20):
        x = leaf(rng, 3, 4)
        w = rng.normal(size=fn(Tensor(x.data)).shape)
        assert nx.grad_check(lambda: nx.tsum(nx.mul(fn(x), w)), [x]) < TOL


def test_relu_gradient_away_from_kink(rng):
    for _ in range(20):
        x = leaf(rng, 5)
        x.data[np.abs(x.data) < 0.05] = 0.3
        w = x.data + 2
        assert nx.grad_check(lambda: nx.tsum(nx.mul(nx.relu(x), w)), [x]) < TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op, rng):
    fn = getattr(nx, op)
    for _ in range(20):
        a, b = leaf(rng, 3, 4), leaf(rng, 1, 4, lo=0.5, hi=1.5)
        w = rng.normal(size=(3, 4))
        assert nx.grad_check(lambda: nx.tsum(nx.mul(fn(a, b), w)), [a, b]) < TOL


def test_matmul_linear_layernorm_gradients(rng):
    for _ in range(20):
        x, w, bias = leaf(rng, 2, 3, 5), leaf(rng, 4, 5), leaf(rng, 4)
        g, be = leaf(rng, 4, lo=0.5, hi=1.5), leaf(rng, 4)
        wo = rng.normal(size=(2, 3, 4))

        def loss():
            return nx.tsum(nx.mul(nx.layer_norm(nx.linear(x, w, bias), g, be), wo))
        assert nx.grad_check(loss, [x, w, bias, g, be]) < TOL
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
        assert nx.grad_check(lambda: nx.tsum(nx.mul(nx.matmul(a, b), 1.7)), [a, b]) < TOL


def test_concat_stack_broadcast_gradients(rng):
    for _ in range(20):
        a, b = leaf(rng, 2, 3), leaf(rng, 1, 3)
        w = rng.normal(size=(4, 3, 3))

        def loss():
            c = nx.concat([a, b, a], axis=0)  # (5, 3)
            s = nx.stack([c[:3], c[2:]], axis=0)  # (2, 3, 3)
            return nx.tsum(nx.mul(nx.broadcast_to(nx.tsum(s, axis=0, keepdims=True), (4, 3, 3)), w))
        assert nx.grad_check(loss, [a, b]) < TOL


def test_cross_entropy_gradient(rng):
    for _ in range(20):
        z = leaf(rng, 6, 3, lo=-2, hi=2)
        y = rng.integers(0, 3, size=6)
        assert nx.grad_check(lambda: nx.cross_entropy(z, y, [0.2, 0.5, 0.3]), [z]) < TOL


# properties ----------------------------------------------------------------------

finite = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                elements=st.floats(-1, 1, allow_nan=False))


@given(finite)
def test_forward_is_deterministic(x):
    a = nx.gelu(nx.softmax(Tensor(x))).data
    b = nx.gelu(nx.softmax(Tensor(x))).data
    assert np.array_equal(a, b)


@given(finite)
def test_grad_shape_matches_data(x):
    t = Tensor(x.copy(), requires_grad=True)
    nx.tsum(nx.tanh(nx.mul(t, t))).backward()
    assert t.grad.shape == t.data.shape
    assert t.data.size == int(np.prod(t.shape))


@given(finite)
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with nx.no_grad():
        y = nx.exp(x)
    assert not y.requires_grad and y._parents == ()


# checkpoints -----------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    named = {"a.w": Tensor(rng.normal(size=(3, 2))), "b": Tensor(rng.normal(size=(4,))),
             "s": Tensor(np.array(1.5))}
    path = tmp_path / "m.sgt"
    nx.save_checkpoint(path, named)
    assert path.read_bytes()[:4] == b"SGT1"
    back = nx.load_checkpoint(path)
    assert list(back) == list(named)
    for k in named:
        assert np.array_equal(back[k], named[k].data)
    assert nx.checksum({k: Tensor(v) for k, v in back.items()}) == nx.checksum(named)


def test_checkpoint_bad_magic_and_truncation(tmp_path, rng):
    path = tmp_path / "m.sgt"
    nx.save_checkpoint(path, {"w": Tensor(rng.normal(size=(5,)))})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nx.CheckpointFormatError, match="byte 0"):
        nx.load_checkpoint(tmp_path / "bad")
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(nx.CheckpointFormatError, match="byte"):
        nx.load_checkpoint(tmp_path / "trunc")


def test_assign_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.assign({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)})
    with pytest.raises(nx.CheckpointFormatError, match="missing"):
        nx.assign({"w": Tensor(np.zeros(3))}, {})


def test_uniform_init_bounds(rng):
    t = nx.uniform_init(rng, (50, 16), 16)
    assert t.requires_grad and np.all(np.abs(t.data) <= 0.25)
