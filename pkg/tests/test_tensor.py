import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trompt import tensor as tn


def naive_matmul(a, b):
    """Triple loop over every batch index; the independent matmul oracle."""
    *batch, n, k = a.shape
    m = b.shape[-1]
    out = np.zeros((*batch, n, m))
    for idx in np.ndindex(*batch):
        for i in range(n):
            for j in range(m):
                s = 0.0
                for t in range(k):
                    s += a[idx + (i, t)] * b[idx + (t, j)]
                out[idx + (i, j)] = s
    return out


dims = st.integers(1, 4)


@settings(max_examples=40, deadline=None)
@given(b1=dims, b2=dims, n=dims, k=dims, m=dims, seed=st.integers(0, 2**31))
def test_batched_matmul_matches_loops(b1, b2, n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((b1, b2, n, k))
    b = rng.standard_normal((b1, b2, k, m))
    got = tn.batched_matmul(tn.Tensor(a), tn.Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_batched_matmul_shape_errors():
    a = tn.Tensor(np.zeros((2, 3, 4)))
    with pytest.raises(tn.DimensionError):
        tn.batched_matmul(a, tn.Tensor(np.zeros((2, 5, 1))))
    with pytest.raises(tn.DimensionError):
        tn.batched_matmul(a, tn.Tensor(np.zeros((3, 4, 1))))
    with pytest.raises(tn.DimensionError):
        tn.batched_matmul(tn.Tensor(np.zeros((3, 4))), tn.Tensor(np.zeros((4, 2))))


@settings(max_examples=60, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=3), seed=st.integers(0, 2**31), shift=st.floats(-500, 500))
def test_softmax_rows_are_distributions(shape, seed, shift):
    x = np.random.default_rng(seed).standard_normal(shape) * 30 + shift
    s = tn.softmax_last_axis(tn.Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_is_shift_invariant_and_handles_large_logits():
    x = np.array([[1000.0, 1001.0, 999.0]])
    s = tn.softmax_last_axis(tn.Tensor(x)).data
    ref = np.exp([0.0, 1.0, -1.0]) / np.exp([0.0, 1.0, -1.0]).sum()
    np.testing.assert_allclose(s[0], ref, rtol=1e-14)


def test_affine_matches_naive():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    got = tn.affine(tn.Tensor(x), tn.Tensor(w), tn.Tensor(b)).data
    ref = np.empty((2, 3, 5))
    for i in range(2):
        for j in range(3):
            for o in range(5):
                ref[i, j, o] = sum(x[i, j, t] * w[t, o] for t in range(4)) + b[o]
    np.testing.assert_allclose(got, ref, atol=1e-12)


# --- gradient checks, one per primitive -------------------------------------------------------


RNG = np.random.default_rng(7)


def _weights(shape):
    return np.random.default_rng(sum(shape) + len(shape)).standard_normal(shape)


CASES = {
    "batched_matmul": (
        {"a": RNG.standard_normal((2, 3, 4)), "b": RNG.standard_normal((2, 4, 2))},
        lambda t: tn.batched_matmul(t["a"], t["b"]),
    ),
    "batched_transpose": ({"a": RNG.standard_normal((2, 3, 4))}, lambda t: tn.batched_transpose(t["a"])),
    "permute": ({"a": RNG.standard_normal((2, 3, 4))}, lambda t: tn.permute(t["a"], (2, 0, 1))),
    "affine": (
        {"x": RNG.standard_normal((3, 4)), "w": RNG.standard_normal((4, 2)), "b": RNG.standard_normal(2)},
        lambda t: tn.affine(t["x"], t["w"], t["b"]),
    ),
    "softmax": ({"a": RNG.standard_normal((3, 5))}, lambda t: tn.softmax_last_axis(t["a"])),
    "add": ({"a": RNG.standard_normal((2, 3)), "b": RNG.standard_normal((2, 3))}, lambda t: tn.add(t["a"], t["b"])),
    "mul_equal": ({"a": RNG.standard_normal((2, 3)), "b": RNG.standard_normal((2, 3))}, lambda t: tn.mul_broadcast(t["a"], t["b"])),
    "mul_trailing": (
        {"a": RNG.standard_normal((2, 3, 4)), "b": RNG.standard_normal((2, 3, 1))},
        lambda t: tn.mul_broadcast(t["a"], t["b"]),
    ),
    "scale": ({"a": RNG.standard_normal((2, 3))}, lambda t: tn.scale(t["a"], -2.5)),
    "relu": ({"a": RNG.standard_normal((4, 3)) + 0.05}, lambda t: tn.relu(t["a"])),
    "expand_axis": ({"a": RNG.standard_normal((2, 3))}, lambda t: tn.expand_axis(t["a"], 1, 4)),
    "stack_batch": ({"a": RNG.standard_normal((2, 3))}, lambda t: tn.stack_batch(t["a"], 3)),
    "stack": ({"a": RNG.standard_normal((2, 3)), "b": RNG.standard_normal((2, 3))}, lambda t: tn.stack([t["a"], t["b"]], axis=1)),
    "concat": (
        {"a": RNG.standard_normal((2, 3)), "b": RNG.standard_normal((2, 2))},
        lambda t: tn.concat_last_axis(t["a"], t["b"]),
    ),
    "reduce_sum": ({"a": RNG.standard_normal((2, 3, 4))}, lambda t: tn.reduce_sum_axis(t["a"], 1)),
    "reshape": ({"a": RNG.standard_normal((2, 6))}, lambda t: tn.reshape(t["a"], (3, 4))),
    "gather_rows": ({"a": RNG.standard_normal((4, 3))}, lambda t: tn.gather_rows(t["a"], np.array([0, 2, 2, 3, 0]))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    inputs, op = CASES[name]

    def f(t):
        out = op(t)
        # a fixed random projection makes every output coordinate matter
        return tn.sum_all(tn.mul_broadcast(out, tn.Tensor(_weights(out.shape))))

    assert tn.gradient_check(f, inputs) < 1e-7


def test_loss_gradients():
    logits = RNG.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    assert tn.gradient_check(lambda x: tn.softmax_cross_entropy(x, labels), logits) < 1e-7
    target = RNG.standard_normal((5, 1))
    assert tn.gradient_check(lambda x: tn.mean_squared_error(x, target), RNG.standard_normal((5, 1))) < 1e-7


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.0], [0.0, 0.0]])
    got = float(tn.softmax_cross_entropy(tn.Tensor(logits), np.array([0, 1])).data)
    ref = 0.5 * (np.log1p(np.exp(-2.0)) + np.log(2.0))
    assert got == pytest.approx(ref, abs=1e-14)


def test_relu_subgradient_at_zero_is_zero():
    tape = tn.Tape()
    x = tape.leaf(np.array([-1.0, 0.0, 2.0]))
    g = tn.backward(tape, tn.sum_all(tn.relu(x)))
    np.testing.assert_array_equal(g[x.node_id], [0.0, 0.0, 1.0])


def test_backward_accumulates_fan_out():
    tape = tn.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = tn.add(tn.mul_broadcast(x, x), x)
    g = tn.backward(tape, tn.sum_all(y))
    np.testing.assert_allclose(g[x.node_id], 2 * x.data + 1)


def test_unused_leaf_gets_zero_grad_in_its_dtype():
    tape = tn.Tape()
    x = tape.leaf(np.ones(3, dtype=np.float32))
    unused = tape.leaf(np.ones((2, 2), dtype=np.float32))
    g = tn.backward(tape, tn.sum_all(x))
    assert g[unused.node_id].dtype == np.float32
    np.testing.assert_array_equal(g[unused.node_id], 0.0)


def test_backward_requires_scalar_on_same_tape():
    tape = tn.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(tn.GraphError):
        tn.backward(tape, tn.scale(x, 2.0))
    other = tn.Tape()
    with pytest.raises(tn.GraphError):
        tn.backward(other, tn.sum_all(x))


def test_mixing_tapes_is_rejected():
    a = tn.Tape().leaf(np.ones(2))
    b = tn.Tape().leaf(np.ones(2))
    with pytest.raises(tn.GraphError):
        tn.add(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(tn.NonFiniteError):
        tn.Tape().leaf(np.array([1.0, np.nan]))
    with pytest.raises(tn.NonFiniteError):
        tn.scale(tn.Tensor(np.array([1e308])), 10.0)


def test_shape_errors():
    with pytest.raises(tn.DimensionError):
        tn.add(tn.Tensor(np.ones((2, 3))), tn.Tensor(np.ones((3, 2))))
    with pytest.raises(tn.DimensionError):
        tn.mul_broadcast(tn.Tensor(np.ones((2, 3))), tn.Tensor(np.ones((2, 2))))
    with pytest.raises(tn.DimensionError):
        tn.reshape(tn.Tensor(np.ones((2, 3))), (4, 2))


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        tn.gather_rows(tn.Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_gradient_check_flags_a_wrong_vjp():
    def bad_square(x):
        tape = x.tape
        data = x.data**2
        if tape is None:
            return tn.sum_all(tn.Tensor(data))
        # deliberately wrong derivative: x instead of 2x
        y = tape._record("bad", [x], data, lambda g: (g * x.data,))
        return tn.sum_all(y)

    assert tn.gradient_check(bad_square, np.array([1.0, 2.0, 3.0])) > 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_probe_blowup():
    def f(x):
        return tn.sum_all(tn.scale(x, 1e300))

    with pytest.raises((tn.ProbeError, tn.NonFiniteError)):
        tn.gradient_check(f, np.array([1e10]))
