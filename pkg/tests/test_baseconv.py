"""Gated convolutions: delta filters isolate the gate, oracles pin the math."""

import numpy as np
import pytest

from basedlab import baseconv as bc
from basedlab import tensor as T
from basedlab.errors import ParameterError, ShapeError
from basedlab.tensor import Tensor, grad_check, sigmoid_np


def minimal_identity(n, d, filt):
    zeros = lambda: Tensor(np.zeros((n, d)))
    return bc.MinimalBaseConv(w=Tensor(np.eye(d)), b_lin=zeros(), b_conv=zeros(), filt=Tensor(filt))


def test_minimal_delta_filter_squares_input():
    # K = delta at lag 0 makes the conv branch pass u through, so z = u .* u
    n, d = 5, 3
    filt = np.zeros((n, d))
    filt[0] = 1.0
    u = np.random.default_rng(0).normal(size=(n, d))
    z = bc.forward_minimal(minimal_identity(n, d, filt), Tensor(u))
    assert np.abs(z.data - u * u).max() < 1e-12


def test_minimal_shift_filter_multiplies_neighbours():
    # K = delta at lag 1 shifts by one position with a zero boundary row
    n, d = 6, 2
    filt = np.zeros((n, d))
    filt[1] = 1.0
    u = np.random.default_rng(1).normal(size=(n, d))
    z = bc.forward_minimal(minimal_identity(n, d, filt), Tensor(u)).data
    assert np.abs(z[0]).max() < 1e-12
    assert np.abs(z[1:] - u[1:] * u[:-1]).max() < 1e-12


def test_minimal_biases_enter_linearly():
    n, d = 4, 2
    rng = np.random.default_rng(2)
    params = bc.MinimalBaseConv(
        w=Tensor(rng.normal(size=(d, d))),
        b_lin=Tensor(rng.normal(size=(n, d))),
        b_conv=Tensor(rng.normal(size=(n, d))),
        filt=Tensor(rng.normal(size=(n, d))),
    )
    u = rng.normal(size=(n, d))
    # oracle with explicit loops
    conv = np.zeros((n, d))
    for i in range(n):
        for t in range(i + 1):
            conv[i] += params.filt.data[t] * u[i - t]
    want = (u @ params.w.data + params.b_lin.data) * (conv + params.b_conv.data)
    got = bc.forward_minimal(params, Tensor(u)).data
    assert np.abs(got - want).max() < 1e-12


def test_gated_identity_projection_reduces_to_silu_gate():
    d = 4
    eye = Tensor(np.eye(d))
    zero = lambda w: Tensor(np.zeros(w))
    filt = Tensor(np.ones((1, d)))  # single tap of ones: conv = u
    params = bc.GatedBaseConv(w1=eye, w2=eye, w3=eye, b1=zero(d), b2=zero(d), b3=zero(d), filt=filt)
    u = np.random.default_rng(3).normal(size=(7, d))
    y = bc.forward_gated(params, Tensor(u)).data
    want = u * (u * sigmoid_np(u))
    assert np.abs(y - want).max() < 1e-12


def test_gated_matches_numpy_oracle():
    d, expand, taps, n = 3, 2, 3, 8
    params = bc.create_gated(d, expand=expand, taps=taps, rng=np.random.default_rng(4))
    u = np.random.default_rng(5).normal(size=(n, d))
    pre = u @ params.w2.data
    conv = np.zeros_like(pre)
    for t in range(taps):
        conv[t:] += params.filt.data[t] * pre[: n - t if t else n]
    branch = conv + params.b2.data
    silu = branch * sigmoid_np(branch)
    want = ((u @ params.w1.data + params.b1.data) * silu) @ params.w3.data + params.b3.data
    got = bc.forward_gated(params, Tensor(u)).data
    assert np.abs(got - want).max() < 1e-12


def test_gated_batched_matches_per_sequence():
    params = bc.create_gated(4, rng=np.random.default_rng(6))
    u = np.random.default_rng(7).normal(size=(3, 9, 4))
    yb = bc.forward_gated(params, Tensor(u)).data
    for b in range(3):
        ys = bc.forward_gated(params, Tensor(u[b])).data
        assert np.abs(yb[b] - ys).max() < 1e-12


def test_create_gated_shapes_and_properties():
    params = bc.create_gated(6, expand=3, taps=4, rng=np.random.default_rng(8))
    assert params.d_model == 6
    assert params.expanded == 18
    assert params.taps == 4
    assert params.w1.shape == (6, 18) and params.w3.shape == (18, 6)
    assert params.filt.shape == (4, 18)
    assert np.all(params.b1.data == 0) and np.all(params.b3.data == 0)


def test_gradients_minimal():
    n, d = 5, 3
    rng = np.random.default_rng(9)
    params = bc.MinimalBaseConv(
        w=Tensor(rng.normal(size=(d, d)), requires_grad=True),
        b_lin=Tensor(rng.normal(size=(n, d)), requires_grad=True),
        b_conv=Tensor(rng.normal(size=(n, d)), requires_grad=True),
        filt=Tensor(rng.normal(size=(n, d)), requires_grad=True),
    )
    u = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    assert grad_check(lambda t: T.sum_all(bc.forward_minimal(params, t)), u) < 1e-6
    assert grad_check(lambda t: T.sum_all(bc.forward_minimal(
        bc.MinimalBaseConv(w=params.w, b_lin=params.b_lin, b_conv=params.b_conv, filt=t), u)), params.filt) < 1e-6


def test_gradients_gated():
    params = bc.create_gated(4, expand=2, taps=2, rng=np.random.default_rng(10))
    u = Tensor(np.random.default_rng(11).normal(size=(6, 4)), requires_grad=True)
    assert grad_check(lambda t: T.sum_all(bc.forward_gated(params, t)), u) < 1e-6
    for name in ("w1", "w2", "w3", "filt"):
        fields = {k: getattr(params, k) for k in ("w1", "w2", "w3", "b1", "b2", "b3", "filt")}
        def f(t, name=name, fields=fields):
            swapped = dict(fields)
            swapped[name] = t
            return T.sum_all(bc.forward_gated(bc.GatedBaseConv(**swapped), u))
        assert grad_check(f, fields[name]) < 1e-6


def test_validation_errors():
    n, d = 4, 3
    good = lambda: Tensor(np.zeros((n, d)))
    with pytest.raises(ShapeError):
        bc.MinimalBaseConv(w=Tensor(np.zeros((d, d + 1))), b_lin=good(), b_conv=good(), filt=good())
    with pytest.raises(ShapeError):
        bc.MinimalBaseConv(w=Tensor(np.eye(d)), b_lin=good(), b_conv=Tensor(np.zeros((n + 1, d))), filt=good())
    with pytest.raises(ParameterError):
        bc.create_gated(4, expand=0)
    with pytest.raises(ParameterError):
        bc.create_gated(4, taps=0)
    params = bc.create_gated(4, rng=np.random.default_rng(12))
    with pytest.raises(ShapeError):
        bc.forward_gated(params, Tensor(np.zeros((5, 3))))
    with pytest.raises(ShapeError):
        bc.forward_minimal(minimal_identity(4, 3, np.zeros((4, 3))), Tensor(np.zeros((5, 3))))
    with pytest.raises(ShapeError):
        bc.GatedBaseConv(
            w1=Tensor(np.zeros((4, 8))), w2=Tensor(np.zeros((4, 8))), w3=Tensor(np.zeros((8, 4))),
            b1=Tensor(np.zeros(8)), b2=Tensor(np.zeros(8)), b3=Tensor(np.zeros(4)),
            filt=Tensor(np.zeros((2, 7))),
        )
