"""Q-value network: transformer encoders, multi-period channel attention, linear head.

Pure numpy in float64 with hand-written reverse mode. Tokens are kept time-major
inside the encoders, i.e. a batch of sequences is ``(B, d, f)``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

MAGIC = b"STRDDQN\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    f_seq: int = 9
    f_obs: int = 8
    d: int = 64
    n: int = 64
    heads: int = 4
    layers: int = 2
    n_periods: int = 3
    ff_mult: int = 4
    share_period_encoders: bool = False
    encoder: str = "transformer"

    def __post_init__(self):
        if self.n % self.heads:
            raise ValueError(f"embed dim {self.n} not divisible by {self.heads} heads")
        if self.n_periods < 1:
            raise ValueError("at least one observation period is required")
        if self.encoder != "transformer":
            raise NotImplementedError(f"encoder {self.encoder!r} is not implemented")
        if min(self.f_seq, self.f_obs, self.d, self.n, self.layers, self.ff_mult) < 1:
            raise ValueError("all network sizes must be >= 1")

    def period_prefix(self, i: int) -> str:
        return "obs" if self.share_period_encoders else f"obs{i}"

    def encoder_prefixes(self) -> list[tuple[str, int]]:
        out = [("seq", self.f_seq)]
        seen = set()
        for i in range(self.n_periods):
            p = self.period_prefix(i)
            if p not in seen:
                seen.add(p)
                out.append((p, self.f_obs))
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        n, d, ff = self.n, self.d, self.n * self.ff_mult
        out: dict[str, tuple[int, ...]] = {}
        for prefix, f in self.encoder_prefixes():
            out[f"{prefix}.proj_w"] = (f, n)
            out[f"{prefix}.proj_b"] = (n,)
            for l in range(self.layers):
                p = f"{prefix}.l{l}"
                out[f"{p}.ln1_g"] = (n,)
                out[f"{p}.ln1_b"] = (n,)
                for w in ("q", "k", "v", "o"):
                    out[f"{p}.w{w}"] = (n, n)
                    if w != "k":  # a key bias shifts every score in a row equally
                        out[f"{p}.b{w}"] = (n,)
                out[f"{p}.ln2_g"] = (n,)
                out[f"{p}.ln2_b"] = (n,)
                out[f"{p}.ff_w1"] = (n, ff)
                out[f"{p}.ff_b1"] = (ff,)
                out[f"{p}.ff_w2"] = (ff, n)
                out[f"{p}.ff_b2"] = (n,)
            out[f"{prefix}.lnf_g"] = (n,)
            out[f"{prefix}.lnf_b"] = (n,)
            out[f"{prefix}.dense_w"] = (d * n, n)
            out[f"{prefix}.dense_b"] = (n,)
        out["flag_w"] = (n + 2, n)
        out["flag_b"] = (n,)
        out["att_w"] = (n, n)
        out["head_w"] = (2 * n, 2)
        out["head_b"] = (2,)
        return out


class QNetworkParams:
    """Named float64 tensors plus the config that fixes their shapes."""

    def __init__(self, config: NetConfig, tensors: dict[str, np.ndarray]):
        expected = config.shapes()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CheckpointError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise CheckpointError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.config = config
        self.tensors = {k: np.ascontiguousarray(tensors[k], dtype=np.float64) for k in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def assign(self, other: "QNetworkParams") -> None:
        for k, v in other.tensors.items():
            self.tensors[k][...] = v

    def equals(self, other: "QNetworkParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(config: NetConfig, rng: np.random.Generator) -> QNetworkParams:
    tensors = {}
    for name, shape in config.shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            scale = 1.0 / math.sqrt(shape[0])
            if leaf in ("wo", "ff_w2"):
                scale /= math.sqrt(2 * config.layers)
            if leaf == "head_w":
                scale *= 0.1
            tensors[name] = rng.normal(0.0, scale, size=shape)
    return QNetworkParams(config, tensors)


def positional_encoding(d: int, n: int) -> np.ndarray:
    pos = np.arange(d)[:, None]
    i = np.arange(n)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / n)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# --------------------------------------------------------------------------- primitives


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_back(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _mm_w(x, dy):
    """Weight gradient of ``y = x @ W`` over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# --------------------------------------------------------------------------- encoder


def _encoder_forward(X, P: QNetworkParams, prefix: str):
    """X: (B, d, f) -> (H2 (B, n), cache). Cache keeps the attention maps."""
    cfg = P.config
    B, T, _ = X.shape
    n, H = cfg.n, cfg.heads
    dh = n // H
    scale = 1.0 / math.sqrt(dh)
    x = X @ P[f"{prefix}.proj_w"] + P[f"{prefix}.proj_b"] + positional_encoding(T, n)
    layers = []
    for l in range(cfg.layers):
        p = f"{prefix}.l{l}"
        h, ln1 = _layernorm(x, P[f"{p}.ln1_g"], P[f"{p}.ln1_b"])
        q = (h @ P[f"{p}.wq"] + P[f"{p}.bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ P[f"{p}.wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ P[f"{p}.wv"] + P[f"{p}.bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        c = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, n)
        x = x + c @ P[f"{p}.wo"] + P[f"{p}.bo"]
        h2, ln2 = _layernorm(x, P[f"{p}.ln2_g"], P[f"{p}.ln2_b"])
        u = h2 @ P[f"{p}.ff_w1"] + P[f"{p}.ff_b1"]
        gu, tu = _gelu(u)
        x = x + gu @ P[f"{p}.ff_w2"] + P[f"{p}.ff_b2"]
        layers.append((h, ln1, q, k, v, att, c, h2, ln2, u, gu, tu))
    y, lnf = _layernorm(x, P[f"{prefix}.lnf_g"], P[f"{prefix}.lnf_b"])
    flat = y.reshape(B, T * n)
    H2 = np.tanh(flat @ P[f"{prefix}.dense_w"] + P[f"{prefix}.dense_b"])
    return H2, (prefix, X, layers, y, lnf, flat, H2)


def _encoder_backward(dH2, cache, P: QNetworkParams, grads: dict):
    prefix, X, layers, y, lnf, flat, H2 = cache
    cfg = P.config
    B, T, _ = X.shape
    n, H = cfg.n, cfg.heads
    dh = n // H
    scale = 1.0 / math.sqrt(dh)

    def acc(name, g):
        grads[name] += g

    dz = dH2 * (1.0 - H2 * H2)
    acc(f"{prefix}.dense_w", flat.T @ dz)
    acc(f"{prefix}.dense_b", dz.sum(axis=0))
    dy = (dz @ P[f"{prefix}.dense_w"].T).reshape(B, T, n)
    dx, dg, db = _layernorm_back(dy, lnf)
    acc(f"{prefix}.lnf_g", dg)
    acc(f"{prefix}.lnf_b", db)
    for l in reversed(range(cfg.layers)):
        p = f"{prefix}.l{l}"
        h, ln1, q, k, v, att, c, h2, ln2, u, gu, tu = layers[l]
        # feed-forward branch
        acc(f"{p}.ff_w2", _mm_w(gu, dx))
        acc(f"{p}.ff_b2", dx.reshape(-1, n).sum(axis=0))
        du = (dx @ P[f"{p}.ff_w2"].T) * _gelu_grad(u, tu)
        acc(f"{p}.ff_w1", _mm_w(h2, du))
        acc(f"{p}.ff_b1", du.reshape(-1, du.shape[-1]).sum(axis=0))
        dh2 = du @ P[f"{p}.ff_w1"].T
        dxl, dg, db = _layernorm_back(dh2, ln2)
        acc(f"{p}.ln2_g", dg)
        acc(f"{p}.ln2_b", db)
        dx = dx + dxl
        # attention branch
        acc(f"{p}.wo", _mm_w(c, dx))
        acc(f"{p}.bo", dx.reshape(-1, n).sum(axis=0))
        dc = (dx @ P[f"{p}.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = dc @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dc
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dh_in = np.zeros_like(h)
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dt.transpose(0, 2, 1, 3).reshape(B, T, n)
            acc(f"{p}.w{name}", _mm_w(h, dflat))
            if name != "k":
                acc(f"{p}.b{name}", dflat.reshape(-1, n).sum(axis=0))
            dh_in += dflat @ P[f"{p}.w{name}"].T
        dxl, dg, db = _layernorm_back(dh_in, ln1)
        acc(f"{p}.ln1_g", dg)
        acc(f"{p}.ln1_b", db)
        dx = dx + dxl
    acc(f"{prefix}.proj_w", _mm_w(X, dx))
    acc(f"{prefix}.proj_b", dx.reshape(-1, n).sum(axis=0))


# --------------------------------------------------------------------------- batches


@dataclass
class StateBatch:
    seq: np.ndarray  # (B, d, f_seq)
    obs: list[np.ndarray]  # per period (B, d, f_obs)
    res_flag: np.ndarray  # (B,)
    hold_time: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.seq.shape[0]


def stack_states(states: Sequence) -> StateBatch:
    """Batch MarketState objects; their (f, d) matrices become (d, f) token rows."""
    seq = np.stack([s.seq.T for s in states])
    obs = [np.stack([s.obs[i].T for s in states]) for i in range(len(states[0].obs))]
    flags = np.array([s.res_flag for s in states], dtype=np.float64)
    hold = np.array([s.hold_time for s in states], dtype=np.float64)
    return StateBatch(seq, obs, flags, hold)


def forward(batch: StateBatch, P: QNetworkParams):
    """Full pipeline over a batch. Returns (Q (B, 2), cache)."""
    cfg = P.config
    if batch.seq.shape[1:] != (cfg.d, cfg.f_seq):
        raise ValueError(f"seq shape {batch.seq.shape[1:]} != {(cfg.d, cfg.f_seq)}")
    if len(batch.obs) != cfg.n_periods:
        raise ValueError(f"expected {cfg.n_periods} period observations, got {len(batch.obs)}")
    H2, c_seq = _encoder_forward(batch.seq, P, "seq")
    H3 = np.concatenate([H2, batch.res_flag[:, None], batch.hold_time[:, None]], axis=1)
    H4 = np.tanh(H3 @ P["flag_w"] + P["flag_b"])
    O_list, c_obs = [], []
    for i, ob in enumerate(batch.obs):
        if ob.shape[1:] != (cfg.d, cfg.f_obs):
            raise ValueError(f"obs[{i}] shape {ob.shape[1:]} != {(cfg.d, cfg.f_obs)}")
        o, c = _encoder_forward(ob, P, cfg.period_prefix(i))
        O_list.append(o)
        c_obs.append(c)
    O = np.stack(O_list, axis=1)  # (B, P, n)
    WH = H4 @ P["att_w"].T
    scores = np.einsum("bpn,bn->bp", O, WH)
    e = _softmax(scores, axis=1)
    Ot = np.einsum("bp,bpn->bn", e, O)
    cat = np.concatenate([H4, Ot], axis=1)
    Q = cat @ P["head_w"] + P["head_b"]
    cache = (c_seq, H3, H4, O, c_obs, WH, e, cat)
    return Q, cache


def backward(cache, dQ: np.ndarray, P: QNetworkParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dQ * Q)`` with respect to every tensor in ``P``."""
    if cache is None:
        raise RuntimeError("backward called before forward")
    cfg = P.config
    n = cfg.n
    c_seq, H3, H4, O, c_obs, WH, e, cat = cache
    grads = {k: np.zeros_like(v) for k, v in P.tensors.items()}
    grads["head_w"] += cat.T @ dQ
    grads["head_b"] += dQ.sum(axis=0)
    dcat = dQ @ P["head_w"].T
    dH4 = dcat[:, :n].copy()
    dOt = dcat[:, n:]
    dO = e[:, :, None] * dOt[:, None, :]
    de = np.einsum("bpn,bn->bp", O, dOt)
    dscores = e * (de - (de * e).sum(axis=1, keepdims=True))
    dO += dscores[:, :, None] * WH[:, None, :]
    dWH = np.einsum("bp,bpn->bn", dscores, O)
    dH4 += dWH @ P["att_w"]
    grads["att_w"] += dWH.T @ H4
    dz4 = dH4 * (1.0 - H4 * H4)
    grads["flag_w"] += H3.T @ dz4
    grads["flag_b"] += dz4.sum(axis=0)
    dH2 = (dz4 @ P["flag_w"].T)[:, :n]
    _encoder_backward(dH2, c_seq, P, grads)
    for i, c in enumerate(c_obs):
        _encoder_backward(dO[:, i, :], c, P, grads)
    return grads


class QNetwork:
    """Stateful wrapper that remembers the last forward pass for backward()."""

    def __init__(self, params: QNetworkParams):
        self.params = params
        self._cache = None

    def forward(self, batch: StateBatch) -> np.ndarray:
        Q, self._cache = forward(batch, self.params)
        return Q

    def backward(self, dQ: np.ndarray) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return backward(self._cache, dQ, self.params)


# --------------------------------------------------------------------------- single-state views


def encode_sequence(seq: np.ndarray, params: QNetworkParams, prefix: str = "seq",
                    return_attention: bool = False):
    """(f, d) sequence -> (n, d) encoder output (before flatten/compress)."""
    cfg = params.config
    f = cfg.f_seq if prefix == "seq" else cfg.f_obs
    if seq.shape != (f, cfg.d):
        raise ValueError(f"sequence shape {seq.shape} != {(f, cfg.d)}")
    _, cache = _encoder_forward(seq.T[None], params, prefix)
    y = cache[3][0].T
    if return_attention:
        return y, [layer[5][0] for layer in cache[2]]
    return y


def compress(H1: np.ndarray, params: QNetworkParams, prefix: str = "seq") -> np.ndarray:
    flat = H1.T.reshape(-1)
    return np.tanh(flat @ params[f"{prefix}.dense_w"] + params[f"{prefix}.dense_b"])


def inject_flags(H2: np.ndarray, res_flag: float, hold_time: float, params: QNetworkParams) -> np.ndarray:
    H3 = np.concatenate([H2, [float(res_flag), float(hold_time)]])
    return np.tanh(H3 @ params["flag_w"] + params["flag_b"])


def fuse_periods(H4: np.ndarray, period_outputs: Sequence[np.ndarray], params: QNetworkParams):
    """Bilinear scores ``O_p^T W H4`` -> softmax weights -> weighted sum of O_p."""
    if not len(period_outputs):
        raise ValueError("empty period set")
    O = np.stack(period_outputs)
    scores = O @ (params["att_w"] @ H4)
    e = _softmax(scores)
    return e @ O, e


def q_values(state, params: QNetworkParams) -> tuple[float, float]:
    Q, _ = forward(stack_states([state]), params)
    return float(Q[0, 0]), float(Q[0, 1])


# --------------------------------------------------------------------------- checkpoints

_CFG_FIELDS = [f.name for f in fields(NetConfig)]
_HEADER = struct.Struct("<8sI9i16s")


def _pack_header(cfg: NetConfig) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, cfg.f_seq, cfg.f_obs, cfg.d, cfg.n, cfg.heads,
                        cfg.layers, cfg.n_periods, cfg.ff_mult, int(cfg.share_period_encoders),
                        cfg.encoder.encode().ljust(16, b"\x00"))


def write_container(path: str | Path, cfg: NetConfig, tensors: dict[str, np.ndarray]) -> None:
    """Header (magic, version, hyperparameters) then named little-endian f64 tensors."""
    buf = io.BytesIO()
    buf.write(_pack_header(cfg))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_container(path: str | Path) -> tuple[NetConfig, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if k < 0 or pos + k > len(data):
            raise TruncatedCheckpoint(f"{path}: truncated at byte {pos} (wanted {k} more)")
        chunk = data[pos:pos + k]
        pos += k
        return chunk

    head = take(_HEADER.size)
    magic, version, *vals, enc = _HEADER.unpack(head)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    f_seq, f_obs, d, n, heads, layers, n_periods, ff_mult, share = vals
    cfg = NetConfig(f_seq, f_obs, d, n, heads, layers, n_periods, ff_mult, bool(share),
                    enc.rstrip(b"\x00").decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return cfg, tensors


def save_params(params: QNetworkParams, path: str | Path) -> None:
    write_container(path, params.config, params.tensors)


def load_params(path: str | Path, expected: NetConfig | None = None) -> QNetworkParams:
    cfg, tensors = read_container(path)
    if expected is not None and cfg != expected:
        diffs = [f"{k}: file={getattr(cfg, k)} config={getattr(expected, k)}"
                 for k in _CFG_FIELDS if getattr(cfg, k) != getattr(expected, k)]
        raise CheckpointError(f"{path}: hyperparameter mismatch ({'; '.join(diffs)})")
    return QNetworkParams(cfg, tensors)
