import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointdiar.autodiff import (
    DimensionError,
    NumericalError,
    ParameterSet,
    Tape,
    Tensor,
    add,
    backpropagate,
    concatenate,
    frame_stack,
    frame_stack_indices,
    grad_check,
    length_normalize,
    log,
    masked_sum,
    matmul,
    mean_time,
    relu,
    scale,
    sigmoid,
    softmax,
    std_time,
)


def _numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        up = f()
        flat[i] = o - eps
        down = f()
        flat[i] = o
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


CASES = {
    "matmul": lambda p: masked_sum(matmul(p["a"], p["b"])),
    "matmul_t": lambda p: masked_sum(matmul(p["a"], p["c"], transpose_b=True)),
    "add_bias": lambda p: masked_sum(relu(add(matmul(p["a"], p["b"]), p["bias"]))),
    "sigmoid": lambda p: masked_sum(sigmoid(p["a"])),
    "log_sigmoid": lambda p: masked_sum(log(sigmoid(p["a"]))),
    "softmax": lambda p: masked_sum(softmax(p["a"]), np.arange(12.0).reshape(3, 4)),
    "mean_std": lambda p: masked_sum(concatenate([mean_time(p["a"]), std_time(p["a"])])),
    "grouped": lambda p: masked_sum(std_time(p["d"], groups=2), np.arange(8.0).reshape(2, 4)),
    "length_norm": lambda p: masked_sum(length_normalize(p["a"]), np.arange(12.0).reshape(3, 4)),
    "frame_stack": lambda p: masked_sum(frame_stack(p["d"], 1, 2), np.arange(36.0).reshape(3, 12) / 7),
    "scale": lambda p: masked_sum(scale(p["a"], -2.5)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    params = ParameterSet({
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(4, 5)),
        "c": rng.normal(size=(5, 4)),
        "bias": rng.normal(size=5),
        "d": rng.normal(size=(6, 4)),
    })
    used = params.subset([k for k in params if k in _used_names(name)])
    assert grad_check(lambda p: CASES[name](params), used) < 1e-6


def _used_names(name):
    return {"matmul": "ab", "matmul_t": "ac", "add_bias": ["a", "b", "bias"], "grouped": "d",
            "frame_stack": "d"}.get(name, "a")


def test_grad_accumulates_over_shared_use():
    p = ParameterSet({"w": np.array([[2.0]])})
    backpropagate(lambda: masked_sum(matmul(p["w"], p["w"])), p)
    assert p["w"].grad[0, 0] == pytest.approx(4.0)


def test_no_tape_records_nothing():
    p = ParameterSet({"w": np.ones((2, 2))})
    out = matmul(p["w"], p["w"])
    assert not out.requires_grad


def test_unused_parameter_has_exact_zero_grad():
    p = ParameterSet({"w": np.ones((2, 2)), "v": np.ones(3)})
    backpropagate(lambda: masked_sum(p["w"]), p)
    assert np.all(p["v"].grad == 0.0)


def test_backward_requires_scalar():
    p = ParameterSet({"w": np.ones((2, 2))})
    with Tape() as tape:
        out = relu(p["w"])
    with pytest.raises(ValueError):
        tape.backward(out)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_numerical_errors():
    with pytest.raises(NumericalError):
        log(Tensor(np.array([0.0])))
    with pytest.raises(NumericalError):
        length_normalize(Tensor(np.zeros((1, 3))))


def test_sigmoid_floor():
    out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert out[0] == 1e-7 and out[2] == 1 - 1e-7 and out[1] == 0.5


def test_std_floor_on_constant_rows():
    out = std_time(Tensor(np.ones((5, 3))))
    np.testing.assert_allclose(out.data, np.sqrt(1e-10))


@given(st.integers(0, 60), st.integers(0, 5), st.sampled_from([1, 2, 4, 8]))
def test_frame_stack_indices_match_loop_oracle(T, context, stride):
    idx = frame_stack_indices(T, context, stride)
    offset = stride // 2 - 1 if stride > 1 else 0
    expected = []
    for i in range(T // stride):
        centre = stride * i + offset
        expected.append([min(max(centre + k, 0), T - 1) for k in range(-context, context + 1)])
    np.testing.assert_array_equal(idx.reshape(-1, 2 * context + 1) if T // stride else idx.reshape(0, 2 * context + 1),
                                  np.array(expected, dtype=int).reshape(-1, 2 * context + 1))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_gradient_matches_closed_form(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b, w = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(n, m))
    p = ParameterSet({"a": a, "b": b})
    backpropagate(lambda: masked_sum(matmul(p["a"], p["b"]), w), p)
    np.testing.assert_allclose(p["a"].grad, w @ b.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(p["b"].grad, a.T @ w, rtol=1e-12, atol=1e-12)


def test_softmax_gradient_against_numeric():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5))
    w = rng.normal(size=(2, 5))
    p = ParameterSet({"x": x})
    backpropagate(lambda: masked_sum(softmax(p["x"]), w), p)

    def f():
        z = np.exp(p["x"].data - p["x"].data.max(1, keepdims=True))
        return float(np.sum(w * z / z.sum(1, keepdims=True)))

    np.testing.assert_allclose(p["x"].grad, _numeric_grad(f, p["x"].data), atol=1e-8)


def test_grad_check_epsilon_bounds():
    p = ParameterSet({"w": np.ones(2)})
    with pytest.raises(ValueError):
        grad_check(lambda q: masked_sum(q["w"]), p, epsilon=0.1)
