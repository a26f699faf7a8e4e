import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import straddle_dqn.qnet as qnet
from oracles import central_difference
from straddle_dqn.env import MarketState
from straddle_dqn.qnet import (MAGIC, CheckpointError, NetConfig, QNetwork, QNetworkParams,
                               TruncatedCheckpoint, backward, compress, encode_sequence, forward,
                               fuse_periods, init_params, inject_flags, load_params, q_values,
                               read_container, save_params, stack_states)

TINY = NetConfig(f_seq=4, f_obs=3, d=6, n=8, heads=2, layers=1, n_periods=2)


def random_state(cfg: NetConfig, rng, flag=None, hold=None) -> MarketState:
    obs = tuple(rng.normal(size=(cfg.f_obs, cfg.d)) for _ in range(cfg.n_periods))
    return MarketState(rng.normal(size=(cfg.f_seq, cfg.d)), obs,
                       int(rng.integers(2)) if flag is None else flag,
                       float(rng.random()) if hold is None else hold)


def jitter(params: QNetworkParams, rng, scale=0.1):
    """Random non-trivial values for every tensor, including zero-initialised biases."""
    for v in params.tensors.values():
        v += rng.normal(0, scale, v.shape)
    return params


def per_tensor_rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / denom


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(n=10, heads=4)
    with pytest.raises(NotImplementedError):
        NetConfig(encoder="lstm")
    with pytest.raises(ValueError):
        NetConfig(n_periods=0)


def test_shared_period_encoders_reduce_tensors():
    a = NetConfig(n_periods=3)
    b = NetConfig(n_periods=3, share_period_encoders=True)
    assert len(b.shapes()) < len(a.shapes())
    assert "obs.proj_w" in b.shapes() and "obs2.proj_w" in a.shapes()


def test_encode_sequence_shape_and_attention_rows():
    rng = np.random.default_rng(0)
    P = jitter(init_params(TINY, rng), rng)
    seq = rng.normal(size=(TINY.f_seq, TINY.d))
    H1, atts = encode_sequence(seq, P, return_attention=True)
    assert H1.shape == (TINY.n, TINY.d)
    for a in atts:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        encode_sequence(seq.T, P)


def test_identical_tokens_stay_identical(monkeypatch):
    monkeypatch.setattr(qnet, "positional_encoding", lambda d, n: np.zeros((d, n)))
    rng = np.random.default_rng(1)
    P = jitter(init_params(TINY, rng), rng)
    H1 = encode_sequence(np.zeros((TINY.f_seq, TINY.d)), P)
    np.testing.assert_allclose(H1, H1[:, :1].repeat(TINY.d, axis=1), atol=1e-14)


def test_compress_properties():
    rng = np.random.default_rng(2)
    P = jitter(init_params(TINY, rng), rng)
    H1 = rng.normal(size=(TINY.n, TINY.d)) * 5
    H2 = compress(H1, P)
    assert H2.shape == (TINY.n,) and np.all(np.abs(H2) < 1)
    P.tensors["seq.dense_w"][...] = 0
    P.tensors["seq.dense_b"][...] = 0
    assert np.all(compress(H1, P) == 0)


def test_inject_flags():
    rng = np.random.default_rng(3)
    P = jitter(init_params(TINY, rng), rng)
    H2 = np.tanh(rng.normal(size=TINY.n))
    a = inject_flags(H2, 0, 0.2, P)
    b = inject_flags(H2, 1, 0.2, P)
    assert a.shape == (TINY.n,) and not np.allclose(a, b)
    P.tensors["flag_w"][TINY.n:] = 0
    np.testing.assert_array_equal(inject_flags(H2, 0, 0.0, P), inject_flags(H2, 1, 0.9, P))


def test_fuse_periods_cases():
    rng = np.random.default_rng(4)
    P = init_params(TINY, rng)
    H4 = rng.normal(size=TINY.n)
    o = rng.normal(size=TINY.n)
    Ot, e = fuse_periods(H4, [o, o], P)
    np.testing.assert_allclose(e, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(Ot, o, atol=1e-14)
    # scores (ln 2, 0): W = I, H4 = e_0 * ln 2, O_1 = e_0, O_2 = e_1
    P.tensors["att_w"][...] = np.eye(TINY.n)
    h = np.zeros(TINY.n)
    h[0] = math.log(2)
    o1, o2 = np.eye(TINY.n)[0], np.eye(TINY.n)[1]
    _, e = fuse_periods(h, [o1, o2], P)
    np.testing.assert_allclose(e, [2 / 3, 1 / 3], atol=1e-15)
    with pytest.raises(ValueError):
        fuse_periods(h, [], P)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    P = jitter(init_params(TINY, rng), rng, 1.0)
    _, cache = forward(stack_states([random_state(TINY, rng)]), P)
    e = cache[6]
    assert abs(e.sum() - 1) <= 1e-12


def test_single_state_views_compose_to_forward():
    rng = np.random.default_rng(5)
    P = jitter(init_params(TINY, rng), rng)
    s = random_state(TINY, rng)
    H4 = inject_flags(compress(encode_sequence(s.seq, P), P), s.res_flag, s.hold_time, P)
    Os = [compress(encode_sequence(o, P, f"obs{i}"), P, f"obs{i}") for i, o in enumerate(s.obs)]
    Ot, _ = fuse_periods(H4, Os, P)
    q = np.concatenate([H4, Ot]) @ P["head_w"] + P["head_b"]
    np.testing.assert_allclose(q, q_values(s, P), rtol=1e-12, atol=1e-14)


def test_q_values_head_properties():
    rng = np.random.default_rng(6)
    P = jitter(init_params(TINY, rng), rng)
    s = random_state(TINY, rng)
    q = np.array(q_values(s, P))
    assert q.shape == (2,) and np.all(np.isfinite(q))
    assert q_values(s, P) == q_values(s, P)
    P2 = P.copy()
    P2.tensors["head_w"] *= 2
    P2.tensors["head_b"] *= 2
    np.testing.assert_allclose(q_values(s, P2), 2 * q, rtol=1e-12)
    P3 = P.copy()
    P3.tensors["head_b"] += 7.5
    assert np.argmax(q_values(s, P3)) == np.argmax(q)


def test_permuting_sequence_changes_q():
    rng = np.random.default_rng(7)
    P = jitter(init_params(TINY, rng), rng)
    s = random_state(TINY, rng)
    perm = rng.permutation(TINY.d)
    s2 = MarketState(s.seq[:, perm], s.obs, s.res_flag, s.hold_time)
    assert q_values(s, P) != q_values(s2, P)


def test_forward_shape_errors():
    rng = np.random.default_rng(8)
    P = init_params(TINY, rng)
    s = random_state(NetConfig(f_seq=5, f_obs=3, d=6, n=8, heads=2, layers=1, n_periods=2), rng)
    with pytest.raises(ValueError):
        forward(stack_states([s]), P)


def _gradient_errors(cfg: NetConfig, seed: int = 0, batch: int = 3) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    P = jitter(init_params(cfg, rng), rng, 0.3)
    states = stack_states([random_state(cfg, rng) for _ in range(batch)])
    dQ = rng.normal(size=(batch, 2))
    _, cache = forward(states, P)
    grads = backward(cache, dQ, P)

    def loss():
        return float(np.sum(forward(states, P)[0] * dQ))

    return {name: per_tensor_rel_error(grads[name], central_difference(loss, P.tensors[name]))
            for name in P.tensors}


def test_gradients_every_tensor():
    errs = _gradient_errors(NetConfig(f_seq=4, f_obs=4, d=6, n=8, heads=2, layers=1, n_periods=2))
    worst = max(errs, key=errs.get)
    assert errs[worst] <= 1e-4, (worst, errs[worst])


def test_gradients_two_layers_shared_encoders():
    cfg = NetConfig(f_seq=3, f_obs=2, d=4, n=4, heads=2, layers=2, n_periods=2, ff_mult=2,
                    share_period_encoders=True)
    errs = _gradient_errors(cfg, seed=1, batch=2)
    assert max(errs.values()) <= 1e-4


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(9)
    P = jitter(init_params(TINY, rng), rng)
    net = QNetwork(P)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2)))
    net.forward(stack_states([random_state(TINY, rng)]))
    grads = net.backward(np.zeros((1, 2)))
    assert all(np.all(g == 0) for g in grads.values())
    with pytest.raises(RuntimeError):
        backward(None, np.zeros((1, 2)), P)


def test_masked_action_leaves_other_head_column_untouched():
    rng = np.random.default_rng(10)
    P = jitter(init_params(TINY, rng), rng)
    _, cache = forward(stack_states([random_state(TINY, rng) for _ in range(4)]), P)
    dQ = np.zeros((4, 2))
    dQ[:, 1] = rng.normal(size=4)
    g = backward(cache, dQ, P)
    assert np.all(g["head_w"][:, 0] == 0) and g["head_b"][0] == 0
    assert np.any(g["head_w"][:, 1] != 0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    P = jitter(init_params(TINY, rng), rng)
    save_params(P, tmp_path / "a.bin")
    Q = load_params(tmp_path / "a.bin", expected=TINY)
    assert Q.equals(P)
    save_params(Q, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes()[:8] == MAGIC


def test_checkpoint_errors(tmp_path):
    rng = np.random.default_rng(12)
    P = init_params(TINY, rng)
    path = tmp_path / "a.bin"
    save_params(P, path)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_params(path, expected=NetConfig(f_seq=4, f_obs=3, d=6, n=16, heads=2, layers=1, n_periods=2))
    raw = bytearray(path.read_bytes())
    # corrupt the first tensor's name-length field
    hdr = qnet._HEADER.size + 4
    raw[hdr:hdr + 4] = (10**6).to_bytes(4, "little")
    (tmp_path / "c.bin").write_bytes(bytes(raw))
    with pytest.raises(TruncatedCheckpoint):
        read_container(tmp_path / "c.bin")
    (tmp_path / "t.bin").write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedCheckpoint):
        read_container(tmp_path / "t.bin")
    bad = bytearray(path.read_bytes())
    bad[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v.bin").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        read_container(tmp_path / "v.bin")
    (tmp_path / "x.bin").write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_container(tmp_path / "x.bin")


def test_params_reject_wrong_shapes():
    P = init_params(TINY, np.random.default_rng(0))
    t = dict(P.tensors)
    t["att_w"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError):
        QNetworkParams(TINY, t)
    del t["att_w"]
    with pytest.raises(CheckpointError):
        QNetworkParams(TINY, t)
