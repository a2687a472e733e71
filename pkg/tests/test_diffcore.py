import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from triagenet import diffcore as dc
from triagenet.gradcheck import numeric_grad, rel_error


def grads_of(build, *arrays):
    leaves = [dc.DiffArray(a, requires_grad=True) for a in arrays]
    with dc.Tape() as tape:
        out = build(*leaves)
    g = tape.backward(out)
    return out, [g[x] for x in leaves]


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# --- matmul ----------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    out = dc.matmul(dc.DiffArray(np.eye(2)), dc.DiffArray(b))
    assert np.array_equal(out.value, b)


def test_matmul_row_times_column():
    out = dc.matmul(dc.DiffArray([[1.0, 2.0]]), dc.DiffArray([[3.0], [4.0]]))
    assert out.value.tolist() == [[11.0]]


def test_matmul_against_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    g_up = rng.standard_normal((3, 2))
    out, (ga, gb) = grads_of(lambda x, y: dc.sum_(dc.mul(dc.matmul(x, y), dc.DiffArray(g_up))), a, b)
    # value and gradients via loops: d/da = g b^T, d/db = a^T g
    assert np.allclose(naive_matmul(a, b), dc.matmul(dc.DiffArray(a), dc.DiffArray(b)).value,
                       atol=1e-12, rtol=0)
    assert np.allclose(ga, naive_matmul(g_up, b.T), atol=1e-12, rtol=0)
    assert np.allclose(gb, naive_matmul(a.T, g_up), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        dc.matmul(dc.DiffArray(np.zeros((2, 3))), dc.DiffArray(np.zeros((4, 2))))


# --- unary -----------------------------------------------------------------

def test_sigmoid_and_tanh_at_zero():
    assert dc.unary("sigmoid", dc.DiffArray(0.0)).item() == 0.5
    assert dc.unary("tanh", dc.DiffArray(0.0)).item() == 0.0


def test_sigmoid_gradient_matches_central_difference():
    x = np.array([1.2])
    _, (g,) = grads_of(lambda v: dc.sum_(dc.unary("sigmoid", v)), x)
    num = (1 / (1 + math.exp(-(1.2 + 1e-5))) - 1 / (1 + math.exp(-(1.2 - 1e-5)))) / 2e-5
    assert abs(g[0] - num) / abs(num) < 1e-6


def test_sigmoid_extreme_inputs_are_finite():
    y = dc.unary("sigmoid", dc.DiffArray([-1000.0, 1000.0])).value
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_log_domain_error_carries_index():
    with pytest.raises(dc.DomainError) as err:
        dc.unary("log", dc.DiffArray([[1.0, 2.0], [0.0, 3.0]]))
    assert err.value.index == (1, 0)


@pytest.mark.parametrize("kind", sorted(dc.UNARY_RULES))
def test_unary_gradients(kind, rng):
    x = np.abs(rng.standard_normal(6)) + 0.2 if kind == "log" else rng.standard_normal(6) + 0.07
    _, (g,) = grads_of(lambda v: dc.sum_(dc.unary(kind, v)), x)
    num = numeric_grad(lambda: float(dc.sum_(dc.unary(kind, dc.DiffArray(x))).value), x)
    assert rel_error(g, num) < 1e-6


# --- binary ----------------------------------------------------------------

def test_add_zero_and_mul_one_identities(rng):
    x = rng.standard_normal((2, 3))
    assert np.array_equal(dc.add(dc.DiffArray(x), dc.DiffArray(np.zeros_like(x))).value, x)
    assert np.array_equal(dc.mul(dc.DiffArray(x), dc.DiffArray(np.ones_like(x))).value, x)


def test_sub_self_cancels_with_zero_gradient(rng):
    a = dc.DiffArray(rng.standard_normal(4), requires_grad=True)
    with dc.Tape() as tape:
        out = dc.sum_(dc.sub(a, a))
    assert out.item() == 0.0
    assert np.array_equal(tape.backward(out)[a], np.zeros(4))


def test_binary_rejects_broadcasting():
    with pytest.raises(dc.ShapeError):
        dc.add(dc.DiffArray(np.zeros((2, 3))), dc.DiffArray(np.zeros(3)))


def test_broadcast_to_is_explicit(rng):
    x = rng.standard_normal((3, 1))
    out, (g,) = grads_of(lambda v: dc.sum_(dc.broadcast_to(v, (2, 3, 4))), x)
    assert out.item() == pytest.approx(8 * x.sum())
    assert np.allclose(g, 8.0)


# --- rearrangements ------------------------------------------------------------

def rows(n, c=2):
    return np.arange(n * c, dtype=float).reshape(n, c)


def test_rearrange_group_small():
    x = rows(4)
    y = dc.rearrange_group(dc.DiffArray(x), 2, 2).value
    assert np.array_equal(y, np.stack([np.stack([x[0], x[1]]), np.stack([x[2], x[3]])]))


def test_rearrange_group_first_clip_is_first_rows():
    x = rows(16)
    y = dc.rearrange_group(dc.DiffArray(x), 4, 4).value
    assert np.array_equal(y[0], x[0:4])


def test_rearrange_stride_group_one():
    x = rows(16)
    y = dc.rearrange_stride(dc.DiffArray(x), 4, 4).value
    assert np.array_equal(y[1], x[[1, 5, 9, 13]])


def test_rearrange_stride_small():
    x = rows(4)
    y = dc.rearrange_stride(dc.DiffArray(x), 2, 2).value
    assert np.array_equal(y, np.stack([np.stack([x[0], x[2]]), np.stack([x[1], x[3]])]))


@pytest.mark.parametrize("op", [dc.rearrange_group, dc.rearrange_stride])
def test_rearrange_factor_mismatch(op):
    with pytest.raises(dc.ShapeError):
        op(dc.DiffArray(rows(6)), 4, 2)


@given(n1=st.integers(1, 5), n2=st.integers(1, 5), c=st.integers(1, 3), b=st.integers(0, 2),
       seed=st.integers(0, 2**16))
def test_rearrangements_are_invertible_permutations(n1, n2, c, b, seed):
    r = np.random.default_rng(seed)
    shape = ((b,) if b else ()) + (n1 * n2, c)
    x = r.standard_normal(shape)
    w = r.standard_normal(shape)
    for fwd, inv in ((dc.rearrange_group, dc.inverse_rearrange_group),
                     (dc.rearrange_stride, dc.inverse_rearrange_stride)):
        y = fwd(dc.DiffArray(x), n1, n2)
        assert np.array_equal(inv(y).value, x)
        assert sorted(y.value.ravel()) == sorted(x.ravel())
        # gradient of the round trip is the identity map on the upstream gradient
        _, (g,) = grads_of(lambda v: dc.sum_(dc.mul(inv(fwd(v, n1, n2)), dc.DiffArray(w))), x)
        assert np.array_equal(g, w)


# --- concat ------------------------------------------------------------------

def test_concat_single_part_and_vectors():
    x = np.array([1.0, 2.0])
    assert np.array_equal(dc.concat([dc.DiffArray(x)], axis=0).value, x)
    out = dc.concat([dc.DiffArray([1.0, 2.0]), dc.DiffArray([3.0, 4.0])], axis=0)
    assert out.value.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_concat_gradient_of_sum_is_ones(rng):
    _, (ga, gb) = grads_of(lambda a, b: dc.sum_(dc.concat([a, b], axis=1)),
                           rng.standard_normal((2, 3)), rng.standard_normal((2, 1)))
    assert np.array_equal(ga, np.ones((2, 3))) and np.array_equal(gb, np.ones((2, 1)))


def test_concat_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.concat([dc.DiffArray(np.zeros((2, 3))), dc.DiffArray(np.zeros((3, 3)))], axis=1)


# --- smoothed cross-entropy ----------------------------------------------------------

@pytest.mark.parametrize("k,label", [(2, 0), (5, 3), (7, 6)])
def test_ce_uniform_logits_is_log_k(k, label):
    assert dc.smoothed_cross_entropy(dc.DiffArray(np.full(k, 0.3)), label, 0.0).item() == \
        pytest.approx(math.log(k), abs=1e-15)


def test_ce_confident_closed_form():
    v = dc.smoothed_cross_entropy(dc.DiffArray([10.0, -10.0]), 0, 0.0).item()
    assert v == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert v == pytest.approx(2.061e-9, rel=1e-3)


def test_ce_gradient_finite_difference(rng):
    x = rng.standard_normal(6)
    _, (g,) = grads_of(lambda v: dc.smoothed_cross_entropy(v, 4, 0.1), x)
    num = numeric_grad(lambda: dc.smoothed_cross_entropy(dc.DiffArray(x), 4, 0.1).item(), x)
    assert rel_error(g, num) < 1e-5


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        dc.smoothed_cross_entropy(dc.DiffArray(np.zeros(3)), 3, 0.1)
    with pytest.raises(ValueError):
        dc.smoothed_cross_entropy(dc.DiffArray(np.zeros(3)), 0, 1.0)


def test_ce_large_logits_stable():
    v = dc.smoothed_cross_entropy(dc.DiffArray([1000.0, 0.0, -1000.0]), 2, 0.1).item()
    assert math.isfinite(v)


@given(hnp.arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30)), st.data())
def test_ce_nonnegative_without_smoothing(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    assert dc.smoothed_cross_entropy(dc.DiffArray(logits), label, 0.0).item() >= 0.0


@given(k=st.integers(2, 8), eps=st.floats(0.01, 0.9), data=st.data())
def test_ce_bounded_below_by_target_entropy(k, eps, data):
    label = data.draw(st.integers(0, k - 1))
    q = np.full(k, eps / k)
    q[label] += 1 - eps
    entropy = -float(np.sum(q * np.log(q)))
    # logits = log q reproduce q exactly, where the loss equals the entropy
    at_q = dc.smoothed_cross_entropy(dc.DiffArray(np.log(q)), label, eps).item()
    assert at_q == pytest.approx(entropy, abs=1e-12)
    logits = data.draw(hnp.arrays(np.float64, k, elements=st.floats(-20, 20)))
    assert dc.smoothed_cross_entropy(dc.DiffArray(logits), label, eps).item() >= entropy - 1e-12


# --- tape ----------------------------------------------------------------------

def test_backward_sum_and_square():
    _, (g,) = grads_of(lambda x: dc.sum_(x), np.zeros(3))
    assert np.array_equal(g, np.ones(3))
    _, (g,) = grads_of(lambda x: dc.sum_(dc.mul(x, x)), np.array([1.0, 2.0]))
    assert g.tolist() == [2.0, 4.0]


def test_second_backward_is_rejected():
    x = dc.DiffArray([1.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.sum_(x)
    tape.backward(loss)
    with pytest.raises(dc.TapeError, match="stale"):
        tape.backward(loss)


def test_non_scalar_root_rejected():
    x = dc.DiffArray([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        y = dc.scale(x, 2.0)
    with pytest.raises(dc.TapeError, match="scalar"):
        tape.backward(y)


def test_no_grad_leaf_gets_no_gradient():
    x = dc.DiffArray([1.0, 2.0], requires_grad=True)
    c = dc.DiffArray([3.0, 4.0])
    with dc.Tape() as tape:
        loss = dc.sum_(dc.mul(x, c))
    grads = tape.backward(loss)
    assert c not in grads and grads[x].tolist() == [3.0, 4.0]


def test_values_only_outside_a_tape():
    x = dc.DiffArray([1.0], requires_grad=True)
    y = dc.scale(x, 3.0)
    assert y._tape is None and y.item() == 3.0


def test_each_node_visited_once_and_fanout_accumulates():
    x = dc.DiffArray([1.5, -2.0], requires_grad=True)
    with dc.Tape() as tape:
        a = dc.mul(x, x)
        b = dc.add(a, x)
        c = dc.add(b, a)  # `a` reused: gradient contributions must add
        loss = dc.sum_(c)
    n_nodes = len(tape.nodes)
    g = tape.backward(loss)[x]
    assert tape.visits == n_nodes
    assert np.allclose(g, 4 * x.value + 1)


@given(seed=st.integers(0, 2**16), order=st.permutations([0, 1, 2]))
def test_accumulation_order_independent(seed, order):
    r = np.random.default_rng(seed)
    xv = r.standard_normal(3)
    coeffs = [r.standard_normal(3) for _ in range(3)]

    def build(x):
        terms = [dc.sum_(dc.mul(dc.unary("tanh", x), dc.DiffArray(coeffs[i]))) for i in order]
        return dc.add(dc.add(terms[0], terms[1]), terms[2])

    _, (g,) = grads_of(build, xv)
    expected = (1 - np.tanh(xv) ** 2) * sum(coeffs)
    assert np.allclose(g, expected, atol=1e-12)


def test_reuse_of_leaf_across_tapes():
    x = dc.DiffArray([2.0], requires_grad=True)
    for _ in range(2):
        with dc.Tape() as tape:
            loss = dc.sum_(dc.mul(x, x))
        assert tape.backward(loss)[x].tolist() == [4.0]


def test_lstm_cell_matches_closed_form(rng):
    h = 3
    z = rng.standard_normal((2, 4 * h))
    c0 = rng.standard_normal((2, h))
    hn, cn = dc.lstm_cell(dc.DiffArray(z), dc.DiffArray(c0))
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:, :h]), sig(z[:, h:2 * h]), sig(z[:, 2 * h:3 * h]), np.tanh(z[:, 3 * h:])
    c = f * c0 + i * g
    assert np.allclose(cn.value, c, atol=1e-14) and np.allclose(hn.value, o * np.tanh(c), atol=1e-14)
