"""Linear attention: the three views agree, states count, decay behaves."""

import numpy as np
import pytest

from basedlab import feature_maps as fm
from basedlab import linear_attention as la
from basedlab import tensor as T
from basedlab.errors import ParameterError, ShapeError
from basedlab.tensor import Tensor, grad_check


def make_params(d_model=24, heads=2, d_prime=4, seed=0, **kw):
    return la.create(d_model=d_model, heads=heads, d_prime=d_prime, rng=np.random.default_rng(seed), **kw)


def test_first_token_output_is_value():
    # with an empty state the normalizer cancels: y_0 = phi(q).phi(k) v / phi(q).phi(k)
    params = make_params()
    rng = np.random.default_rng(1)
    state = la.LinAttnState.zeros(params)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(2, 4))
    v = rng.normal(size=(2, 12))
    state, y = la.recurrent_step(params, state, q, k, v)
    assert np.abs(y - v).max() < 1e-12
    assert state.t == 1


def test_identity_map_state_accumulation():
    kind = fm.FeatureMapKind("Identity", 1)
    params = la.create(d_model=1, heads=1, d_prime=1, head_dim=1, kind=kind, rng=np.random.default_rng(0))
    state = la.LinAttnState.zeros(params)
    state, _ = la.recurrent_step(params, state, np.array([[1.0]]), np.array([[2.0]]), np.array([[3.0]]))
    assert state.s[0, 0, 0] == 6.0  # phi(k) v = 2 * 3
    assert state.z[0, 0] == 2.0


def test_constant_keys_and_values_echo_value():
    params = make_params()
    n, d = 10, 24
    u = Tensor(np.tile(np.random.default_rng(2).normal(size=(1, d)), (n, 1)))
    y = la.parallel_forward(params, u)
    assert np.abs(y.data - y.data[0]).max() < 1e-10  # same input row everywhere


@pytest.mark.parametrize("heads,d_prime", [(1, 4), (2, 8), (4, 4)])
def test_three_views_agree(heads, d_prime):
    params = make_params(d_model=32, heads=heads, d_prime=d_prime, seed=heads)
    u = Tensor(np.random.default_rng(3).normal(size=(33, 32)))
    yp = la.parallel_forward(params, u).data
    yr = la.recurrent_forward(params, u).data
    yc = la.chunked_forward(params, u, chunk=8).data
    assert np.abs(yp - yr).max() < 1e-8
    assert np.abs(yp - yc).max() < 1e-8


def test_chunk_edge_cases():
    params = make_params()
    u = Tensor(np.random.default_rng(4).normal(size=(13, 24)))
    yp = la.parallel_forward(params, u).data
    assert np.abs(la.chunked_forward(params, u, chunk=1).data - la.recurrent_forward(params, u).data).max() < 1e-8
    assert np.abs(la.chunked_forward(params, u, chunk=13).data - yp).max() < 1e-8
    assert np.abs(la.chunked_forward(params, u, chunk=50).data - yp).max() < 1e-8  # clamps to n
    with pytest.raises(ParameterError):
        la.chunked_forward(params, u, chunk=0)


def test_batched_parallel_forward():
    params = make_params()
    rng = np.random.default_rng(5)
    ub = rng.normal(size=(3, 9, 24))
    yb = la.parallel_forward(params, Tensor(ub)).data
    for b in range(3):
        ys = la.parallel_forward(params, Tensor(ub[b])).data
        assert np.abs(yb[b] - ys).max() < 1e-12


def test_taylor_denominator_grows_with_position():
    # every pairwise kernel value is >= 1/2, so the normalizer is >= (i + 1)/2
    kind = fm.taylor_exp2(6)
    rng = np.random.default_rng(6)
    q = rng.normal(size=(20, 6))
    k = rng.normal(size=(20, 6))
    pq = fm.apply_numpy(kind, q)
    pk = fm.apply_numpy(kind, k)
    den = np.einsum("nf,mf->nm", pq, pk)
    den = np.where(np.tril(np.ones((20, 20))) > 0, den, 0.0).sum(axis=1)
    floor = (np.arange(20) + 1) / 2
    assert (den >= floor - 1e-9).all()


def test_attention_weights_sum_to_one():
    kind = fm.taylor_exp2(6)
    rng = np.random.default_rng(7)
    pq = fm.apply_numpy(kind, rng.normal(size=(15, 6)))
    pk = fm.apply_numpy(kind, rng.normal(size=(15, 6)))
    scores = (pq @ pk.T) * np.tril(np.ones((15, 15)))
    weights = scores / scores.sum(axis=1, keepdims=True)
    assert np.abs(weights.sum(axis=1) - 1.0).max() < 1e-10


def test_rollout_equals_parallel_per_position():
    params = make_params(d_model=16, heads=2, d_prime=8, seed=9)
    u = Tensor(np.random.default_rng(9).normal(size=(64, 16)))
    yp = la.parallel_forward(params, u).data
    yr = la.recurrent_forward(params, u).data
    assert np.abs(yp - yr).max() < 1e-8


def test_state_scalar_count():
    params = make_params(d_model=24, heads=2, d_prime=4)
    state = la.LinAttnState.zeros(params)
    width = params.feature_width
    assert state.scalar_count() == 2 * (width * 12 + width)


def test_default_decay_gammas():
    g = la.default_decay_gammas(4)
    assert np.allclose(g, [1 - 2**-3, 1 - 2**-4, 1 - 2**-5, 1 - 2**-6])
    assert ((g > 0) & (g < 1)).all()


def test_gamma_one_is_bitwise_no_decay():
    base = make_params(seed=11)
    decayed = make_params(seed=11, decay=la.DecayConfig(np.ones(2)))
    u = Tensor(np.random.default_rng(11).normal(size=(17, 24)))
    assert np.array_equal(la.parallel_forward(base, u).data, la.parallel_forward(decayed, u).data)


def test_decay_views_agree():
    decay = la.DecayConfig(la.default_decay_gammas(2))
    params = make_params(seed=12, decay=decay)
    u = Tensor(np.random.default_rng(12).normal(size=(21, 24)))
    yp = la.parallel_forward(params, u).data
    assert np.abs(yp - la.recurrent_forward(params, u).data).max() < 1e-8
    assert np.abs(yp - la.chunked_forward(params, u, chunk=5).data).max() < 1e-8


def test_decay_shrinks_long_range_influence():
    # a strongly decayed head forgets the first token faster than gamma = 1
    kind = fm.taylor_exp2(4)
    rng = np.random.default_rng(13)
    q = Tensor(rng.normal(size=(1, 1, 30, 4)))
    k = Tensor(rng.normal(size=(1, 1, 30, 4)))
    v = Tensor(rng.normal(size=(1, 1, 30, 8)))
    pq, pk = fm.apply(kind, q), fm.apply(kind, k)
    plain = la.attention_core(pq, pk, v, eps=1e-12, gamma=1.0).data
    fast = la.attention_core(pq, pk, v, eps=1e-12, gamma=0.5).data
    # both start identically; the decayed head output diverges over time
    assert np.abs(plain[..., 0, :] - fast[..., 0, :]).max() < 1e-12
    assert np.abs(plain[..., -1, :] - fast[..., -1, :]).max() > 1e-6


def test_head_mixing_weights_apply_per_head():
    rng = np.random.default_rng(14)
    w_mix = Tensor(rng.normal(size=(24, 2)))
    decay = la.DecayConfig(np.ones(2), w_mix=w_mix)
    params = make_params(seed=14, decay=decay)
    u = Tensor(rng.normal(size=(9, 24)))
    y = la.parallel_forward(params, u).data

    # manual: per-head outputs scaled by softmax(u @ w_mix), concat, wo
    plain = make_params(seed=14)
    logits = u.data @ w_mix.data
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    per_head = la.parallel_forward(plain, u).data  # includes wo; recompute pre-wo instead
    q = (u.data @ plain.wq.data).reshape(9, 2, 4)
    k = (u.data @ plain.wk.data).reshape(9, 2, 4)
    v = (u.data @ plain.wv.data).reshape(9, 2, 12)
    kind = plain.kind
    outs = []
    for h in range(2):
        pq = fm.apply_numpy(kind, q[:, h])
        pk = fm.apply_numpy(kind, k[:, h])
        scores = (pq @ pk.T) * np.tril(np.ones((9, 9)))
        yh = (scores @ v[:, h]) / np.maximum(scores.sum(axis=1), 1e-12)[:, None]
        outs.append(yh * w[:, h][:, None])
    manual = np.concatenate(outs, axis=1) @ plain.wo.data
    assert np.abs(y - manual).max() < 1e-10
    del per_head


def test_gradients_flow_through_parallel_view():
    params = make_params(d_model=8, heads=2, d_prime=4, seed=15)
    u = Tensor(np.random.default_rng(15).normal(size=(6, 8)))
    assert grad_check(lambda t: T.sum_all(la.parallel_forward(params, t)), u) < 1e-6


def test_gradients_with_decay_and_mixing():
    rng = np.random.default_rng(16)
    decay = la.DecayConfig(la.default_decay_gammas(2), w_mix=Tensor(rng.normal(size=(8, 2))))
    params = make_params(d_model=8, heads=2, d_prime=4, seed=16, decay=decay)
    u = Tensor(rng.normal(size=(6, 8)))
    assert grad_check(lambda t: T.sum_all(la.parallel_forward(params, t)), u) < 1e-6


def test_gradient_with_floored_denominator():
    # ReLU features can zero the normalizer; the floor branch must not blow up
    kind = fm.FeatureMapKind("ReLU", 3)
    rng = np.random.default_rng(17)
    pk = fm.apply(kind, Tensor(-np.abs(rng.normal(size=(1, 1, 4, 3)))))  # all zeros
    v = Tensor(rng.normal(size=(1, 1, 4, 5)))

    def f(t):
        pq = fm.apply(kind, t)
        return T.sum_all(la.attention_core(pq, pk, v, eps=1e-12))

    assert grad_check(f, Tensor(np.abs(rng.normal(size=(1, 1, 4, 3))))) < 1e-6


def test_counter_totals():
    params = make_params(d_model=24, heads=2, d_prime=4)
    u = Tensor(np.random.default_rng(18).normal(size=(16, 24)))
    counter = {}
    la.chunked_forward(params, u, chunk=4, counter=counter)
    assert counter["q_read"] == counter["k_read"] == 2 * 16 * 4
    assert counter["v_read"] == counter["y_write"] == 2 * 16 * 12


def test_validation_errors():
    rng = np.random.default_rng(19)
    with pytest.raises(ParameterError):
        la.DecayConfig(np.array([0.0, 0.5]))
    with pytest.raises(ParameterError):
        la.DecayConfig(np.array([1.5]))
    with pytest.raises(ShapeError):
        la.create(d_model=10, heads=3, d_prime=4, rng=rng)  # heads must divide widths
    params = make_params()
    with pytest.raises(ShapeError):
        la.parallel_forward(params, Tensor(np.ones((4, 7))))
    with pytest.raises(ParameterError):
        make_params(decay=la.DecayConfig(np.array([0.9])))  # one gamma for two heads
