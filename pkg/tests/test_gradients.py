"""Finite-difference verification of every differentiable op.

Each op is checked at many random small tensors: max relative error below
1e-3 in float32 and 1e-5 in float64 (central differences, step chosen per
precision). The float64 runs square the output so second-use gradient
paths are exercised; the float32 runs use a fixed linear probe to keep
the finite-difference noise floor below the tolerance.
"""

import numpy as np
import pytest

from lapseg import ops
from lapseg.tensor import Tensor


def _rand(rng, shape, dtype):
    return Tensor(rng.normal(size=shape).astype(dtype), dtype=dtype)


# name -> builder(x, aux) returning the op output tensor
CASES = {
    "add": lambda x, a: ops.add(x, a[(3, 4)]),
    "add_broadcast": lambda x, a: ops.add(x, a[(4,)]),
    "sub": lambda x, a: ops.sub(x, a[(3, 4)]),
    "mul": lambda x, a: ops.mul(x, a[(3, 4)]),
    "div": lambda x, a: ops.div(x, a["pos"]),
    "scale": lambda x, a: ops.scale(x, -1.7),
    "add_scalar": lambda x, a: ops.add_scalar(x, 0.3),
    "matmul": lambda x, a: ops.matmul(x, a[(4, 2)]),
    "matmul_left": lambda x, a: ops.matmul(a[(2, 3)], x),
    "linear": lambda x, a: ops.linear(x, a[(4, 3)], a[(3,)]),
    "reshape": lambda x, a: ops.reshape(x, (2, 6)),
    "transpose": lambda x, a: ops.matmul(ops.transpose(x, (1, 0)), a[(3, 2)]),
    "concat": lambda x, a: ops.concat([x, a[(3, 4)]], axis=0),
    "sum_axis": lambda x, a: ops.sum_(x, axis=0),
    "mean_axis": lambda x, a: ops.mean_(x, axis=1, keepdims=True),
    "softmax": lambda x, a: ops.softmax(x, axis=1),
    "log_softmax": lambda x, a: ops.log_softmax(x, axis=1),
    "gelu": lambda x, a: ops.gelu(x),
    "layer_norm_x": lambda x, a: ops.layer_norm(x, a[(4,)], a[(4,)]),
    "blend2": lambda x, a: ops.blend2(x, a[(3, 4)], a[(2, 4)], a[(4,)]),
    "attention_context": lambda x, a: ops.attention_context(x, a[(3, 4)], 2),
    "attention_context_grouped":
        lambda x, a: ops.attention_context(
            ops.reshape(x, (12, 1)), ops.reshape(a[(3, 4)], (12, 1)), 1, groups=3),
    "attention_apply": lambda x, a: ops.attention_apply(x, a[(2, 2, 2)]),
}

SPATIAL_CASES = {
    "pad_reflect": lambda x, a: ops.pad_reflect(x, 2, 3),
    "depthwise_conv2d": lambda x, a: ops.depthwise_conv2d(x, a[(3, 3, 2)]),
    "extract_patches": lambda x, a: ops.extract_patches(x, 2, 2, 1, 1),
    "separable_blur": lambda x, a: ops.separable_blur(x, a["kern1d"], 1),
}


class _Aux:
    """Auxiliary tensors, drawn once per trial and cached so the probed
    function stays deterministic under repeated evaluation."""

    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self._cache = {}

    def __getitem__(self, key):
        if key in self._cache:
            return self._cache[key]
        if key == "pos":
            data = self.rng.uniform(0.5, 2.0, size=(3, 4))
        elif key == "kern1d":
            data = np.array([0.25, 0.5, 0.25])
        else:
            data = self.rng.normal(size=key)
        t = Tensor(data.astype(self.dtype), dtype=self.dtype)
        self._cache[key] = t
        return t


def _squared(build, aux):
    def f(t):
        y = build(t, aux)
        return ops.sum_(ops.mul(y, y))
    return f


def _linear_probe(build, aux, probe_key="__probe__"):
    def f(t):
        y = build(t, aux)
        if probe_key not in aux._cache:
            w = aux.rng.normal(size=y.shape).astype(aux.dtype)
            aux._cache[probe_key] = Tensor(w, dtype=aux.dtype)
        return ops.mean_(ops.mul(y, aux._cache[probe_key]))
    return f


def _run_many(cases, name, dtype, x_shape, trials, tol):
    rng = np.random.default_rng(hash((name, str(dtype))) % 2 ** 32)
    worst = 0.0
    for _ in range(trials):
        aux = _Aux(rng, dtype)
        x = _rand(rng, x_shape, dtype)
        build = cases[name]
        f = _squared(build, aux) if dtype == np.float64 else _linear_probe(build, aux)
        worst = max(worst, ops.grad_check(f, x))
    assert worst < tol, f"{name}: {worst}"


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_float64(name):
    _run_many(CASES, name, np.float64, (3, 4), 100, 1e-5)


@pytest.mark.parametrize("name", sorted(SPATIAL_CASES))
def test_spatial_op_gradients_float64(name):
    _run_many(SPATIAL_CASES, name, np.float64, (4, 5, 2), 100, 1e-5)


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_float32(name):
    _run_many(CASES, name, np.float32, (3, 4), 25, 1e-3)


@pytest.mark.parametrize("name", sorted(SPATIAL_CASES))
def test_spatial_op_gradients_float32(name):
    _run_many(SPATIAL_CASES, name, np.float32, (4, 5, 2), 25, 1e-3)


def test_grad_check_linear_function(rng):
    x = Tensor(rng.normal(size=(3, 3)), dtype=np.float64, requires_grad=True)
    err = ops.grad_check(ops.sum_, x)
    assert err < 1e-9


def test_grad_check_sum_of_squares_closed_form():
    x = Tensor(np.array([1.0, 2.0]), dtype=np.float64, requires_grad=True)
    from lapseg.tensor import Tape

    def sq(t):
        return ops.sum_(ops.mul(t, t))

    with Tape() as tape:
        loss = sq(x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)
    assert ops.grad_check(sq, x) < 1e-6


def test_grad_check_flags_non_finite():
    x = Tensor(np.array([0.0]), dtype=np.float64)

    def bad(t):
        return ops.sum_(ops.div(t, t))   # 0/0

    from lapseg.tensor import NumericalError

    with pytest.raises(NumericalError):
        ops.grad_check(bad, x)


def test_grad_check_subsamples_deterministically(rng):
    x = Tensor(rng.normal(size=(40,)), dtype=np.float64)

    def sq(t):
        return ops.sum_(ops.mul(t, t))

    e1 = ops.grad_check(sq, x, max_coords=7, seed=3)
    e2 = ops.grad_check(sq, x, max_coords=7, seed=3)
    assert e1 == e2
