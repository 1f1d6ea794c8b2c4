from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftlm import numcore
from driftlm.numcore import (
    ContractViolationError,
    InvalidInputError,
    OracleFailureError,
    finite_diff_grad,
    softmax_rows,
    tensor,
    vjp,
)

from conftest import rel_err

finite_rows = arrays(
    np.float64,
    (3, 4),
    elements=st.floats(min_value=-30.0, max_value=30.0, allow_nan=False),
)


# ---------------------------------------------------------------------------
# tensor construction


def test_tensor_validates_shape_and_finiteness():
    t = tensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2))
    assert t.shape == (2, 2) and t.dtype == np.float64
    with pytest.raises(InvalidInputError):
        tensor([1.0, math.nan])
    with pytest.raises(InvalidInputError):
        tensor([1.0, 2.0], shape=(3,))
    with pytest.raises(InvalidInputError):
        tensor([1.0], shape=(0, 1))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_row():
    assert np.allclose(softmax_rows(np.zeros((1, 4))), 0.25, atol=1e-15)


def test_softmax_two_to_one_ratio():
    row = softmax_rows(np.array([[0.0, math.log(2.0)]]))
    assert np.max(np.abs(row - np.array([[1 / 3, 2 / 3]]))) < 1e-15


def test_softmax_overflow_safe():
    row = softmax_rows(np.array([[1000.0, 1000.0]]))
    assert np.allclose(row, 0.5)


def test_softmax_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        softmax_rows(np.array([[1.0, math.inf]]))


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    p = softmax_rows(x)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) <= 1e-12
    assert np.all(p >= 0.0)


@given(finite_rows, st.floats(min_value=-50, max_value=50, allow_nan=False))
def test_softmax_shift_invariance(x, c):
    assert np.max(np.abs(softmax_rows(x + c) - softmax_rows(x))) <= 1e-12


def test_softmax_pure_bit_identical():
    x = np.random.default_rng(3).normal(size=(4, 6))
    assert np.array_equal(softmax_rows(x), softmax_rows(x))


# ---------------------------------------------------------------------------
# VJPs against the finite-difference oracle


def _random_inputs(name: str, rng: np.random.Generator):
    if name == "softmax_rows":
        return (rng.normal(size=(3, 4)),)
    if name == "matmul":
        return (rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    if name == "add":
        return (rng.normal(size=(2, 5)), rng.normal(size=(2, 5)))
    if name == "tanh":
        return (rng.normal(size=(4, 3)),)
    if name == "mean_pool":
        return (rng.normal(size=(5, 3)),)
    if name == "concat":
        return (rng.normal(size=4), rng.normal(size=3))
    if name == "l2_normalize":
        v = rng.normal(size=5)
        return (v + np.sign(v.sum() or 1.0) * 2.0,)
    if name == "scalar_scale":
        return (rng.normal(size=(3, 2)), float(rng.normal()))
    raise AssertionError(name)


@pytest.mark.parametrize("name", numcore.primitive_names())
def test_vjp_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        inputs = _random_inputs(name, rng)
        out = numcore.apply_primitive(name, *inputs)
        upstream = rng.normal(size=np.shape(out))
        cotangents = vjp(name, inputs, upstream)
        for idx, x in enumerate(inputs):
            if np.ndim(x) == 0:
                continue

            def f(val, idx=idx):
                probe = list(inputs)
                probe[idx] = val
                return float(np.sum(upstream * numcore.apply_primitive(name, *probe)))

            fd = finite_diff_grad(f, np.asarray(x, dtype=np.float64), step=1e-5)
            assert rel_err(cotangents[idx], fd) <= 1e-5


def test_vjp_softmax_constant_upstream_is_zero():
    logits = np.zeros((2, 4))
    (g,) = vjp("softmax_rows", (logits,), np.full((2, 4), 3.0))
    assert np.max(np.abs(g)) <= 1e-15


def test_vjp_matmul_closed_form(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    u = rng.normal(size=(3, 2))
    ga, gb = vjp("matmul", (a, b), u)
    assert np.allclose(ga, u @ b.T)
    assert np.allclose(gb, a.T @ u)


def test_vjp_l2_normalize_tangent_upstream_is_zero(rng):
    v = rng.normal(size=6)
    y = v / np.linalg.norm(v)
    (g,) = vjp("l2_normalize", (y,), 2.5 * y)
    assert np.max(np.abs(g)) <= 1e-12


def test_vjp_shape_mismatch_raises(rng):
    with pytest.raises(ContractViolationError):
        vjp("tanh", (rng.normal(size=(2, 2)),), rng.normal(size=(3, 2)))
    with pytest.raises(ContractViolationError):
        vjp("no-such-primitive", (rng.normal(size=2),), rng.normal(size=2))


def test_scalar_scale_vjp_includes_scale_cotangent(rng):
    x = rng.normal(size=(2, 3))
    u = rng.normal(size=(2, 3))
    gx, gc = vjp("scalar_scale", (x, 1.5), u)
    assert np.allclose(gx, 1.5 * u)
    assert abs(gc - float(np.sum(u * x))) < 1e-12


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), step=1e-5)
    assert abs(g[0] - 6.0) <= 1e-6


def test_finite_diff_constant_is_zero():
    g = finite_diff_grad(lambda x: 7.0, np.ones(4), step=1e-5)
    assert np.all(g == 0.0)


def test_finite_diff_linear(rng):
    c = rng.normal(size=5)
    g = finite_diff_grad(lambda x: float(c @ x), rng.normal(size=5), step=1e-5)
    assert np.max(np.abs(g - c)) <= 1e-8


def test_finite_diff_rejects_bad_step_and_nonfinite():
    with pytest.raises(InvalidInputError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), step=0.0)
    with pytest.raises(OracleFailureError):
        finite_diff_grad(lambda x: math.inf, np.ones(2), step=1e-5)
