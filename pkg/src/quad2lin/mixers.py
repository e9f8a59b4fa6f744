"""Sequence mixers: causal grouped-query softmax attention and Mamba-2.

Each mixer has a full-sequence training form built from tape ops and a
single-token decode form working on plain numpy buffers. Mamba-2 has two
training forms (per-step recurrence and chunked state-space-duality scan)
plus an O(T^2) reference used only as an oracle.

Head layout: query head ``h`` reads kv group ``h // (H // G)``; projections
are column-blocked in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ContractError, DimensionError
from .tensor import Tensor


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class AttentionWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    n_heads: int
    n_groups: int
    head_dim: int
    scale_scores: bool = True

    def __post_init__(self):
        H, G, dh = self.n_heads, self.n_groups, self.head_dim
        if G < 1 or H % G:
            raise DimensionError(f"n_heads={H} is not a multiple of n_groups={G}")
        d = self.W_Q.shape[0]
        expected = {
            "W_Q": (d, H * dh),
            "W_K": (d, G * dh),
            "W_V": (d, G * dh),
            "W_O": (H * dh, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


@dataclass
class Mamba2Weights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    a: Tensor  # (G,) decay log-rate
    W_gamma: Tensor  # (d, G)
    conv_kernel: Tensor  # (w, (H + 2G) * dh)
    conv_bias: Tensor
    W_G: Tensor  # (d, H * dh) output gate
    gate_bias: Tensor
    n_heads: int
    n_groups: int
    head_dim: int
    conv_activation: bool = True
    head_norm: bool = False
    # constant multiplier on q; carries the attention score scale over when seeding
    score_scale: float = 1.0

    PARAM_NAMES = (
        "W_Q", "W_K", "W_V", "W_O", "a", "W_gamma", "conv_kernel", "conv_bias", "W_G", "gate_bias",
    )

    def __post_init__(self):
        H, G, dh = self.n_heads, self.n_groups, self.head_dim
        if G < 1 or H % G:
            raise DimensionError(f"n_heads={H} is not a multiple of n_groups={G}")
        d = self.W_Q.shape[0]
        C = (H + 2 * G) * dh
        w = self.conv_kernel.shape[0]
        if w < 1:
            raise DimensionError("conv width must be >= 1")
        expected = {
            "W_Q": (d, H * dh),
            "W_K": (d, G * dh),
            "W_V": (d, G * dh),
            "W_O": (H * dh, d),
            "a": (G,),
            "W_gamma": (d, G),
            "conv_kernel": (w, C),
            "conv_bias": (C,),
            "W_G": (d, H * dh),
            "gate_bias": (H * dh,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[0]

    @property
    def conv_channels(self) -> int:
        return (self.n_heads + 2 * self.n_groups) * self.head_dim

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}


def init_attention(
    d: int, n_heads: int, n_groups: int, head_dim: int, rng: np.random.Generator,
    std: float = 0.02, dtype=np.float32, scale_scores: bool = True,
) -> AttentionWeights:
    def mat(r, c):
        return Tensor(rng.normal(0.0, std, size=(r, c)).astype(dtype))

    return AttentionWeights(
        W_Q=mat(d, n_heads * head_dim),
        W_K=mat(d, n_groups * head_dim),
        W_V=mat(d, n_groups * head_dim),
        W_O=mat(n_heads * head_dim, d),
        n_heads=n_heads,
        n_groups=n_groups,
        head_dim=head_dim,
        scale_scores=scale_scores,
    )


def _batched(X: Tensor, d: int) -> tuple[Tensor, bool]:
    if X.shape[-1] != d:
        raise DimensionError(f"input feature size {X.shape[-1]} does not match d_model={d}")
    if X.ndim == 2:
        return tc.reshape(X, (1,) + X.shape), True
    if X.ndim != 3:
        raise DimensionError(f"expected (T, d) or (B, T, d) input, got {X.shape}")
    return X, False


def _unbatch(Y: Tensor, squeeze: bool) -> Tensor:
    return tc.reshape(Y, Y.shape[1:]) if squeeze else Y


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


# --- attention -------------------------------------------------------------


def attention_forward(X: Tensor, w: AttentionWeights) -> Tensor:
    """Causal grouped-query softmax attention over (T, d) or (B, T, d)."""
    X3, squeeze = _batched(X, w.d_model)
    B, T, _ = X3.shape
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    r = H // G
    q = tc.transpose(tc.reshape(tc.matmul(X3, w.W_Q), (B, T, G, r, dh)), (0, 2, 3, 1, 4))
    k = tc.transpose(tc.reshape(tc.matmul(X3, w.W_K), (B, T, G, 1, dh)), (0, 2, 3, 1, 4))
    v = tc.transpose(tc.reshape(tc.matmul(X3, w.W_V), (B, T, G, 1, dh)), (0, 2, 3, 1, 4))
    scores = tc.matmul(q, tc.transpose(k))
    if w.scale_scores:
        scores = tc.mul(scores, 1.0 / math.sqrt(dh))
    probs = tc.softmax(tc.masked_fill(scores, _causal_mask(T), -np.inf), axis=-1)
    y = tc.matmul(probs, v)
    y = tc.reshape(tc.transpose(y, (0, 3, 1, 2, 4)), (B, T, H * dh))
    return _unbatch(tc.matmul(y, w.W_O), squeeze)


class KVCache:
    """Growing per-layer key/value store for one sequence.

    Rows live in a capacity-doubling buffer laid out (G, capacity, d_h);
    ``nbytes`` counts only the live rows.
    """

    def __init__(self, n_groups: int, head_dim: int, dtype=np.float32, capacity: int = 64):
        self.n_groups = n_groups
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        self._k = np.zeros((n_groups, max(capacity, 1), head_dim), dtype=self.dtype)
        self._v = np.zeros_like(self._k)
        self.length = 0

    def __len__(self) -> int:
        return self.length

    def _reserve(self, n: int) -> None:
        cap = self._k.shape[1]
        if n <= cap:
            return
        while cap < n:
            cap *= 2
        for name in ("_k", "_v"):
            old = getattr(self, name)
            new = np.zeros((self.n_groups, cap, self.head_dim), dtype=self.dtype)
            new[:, : self.length] = old[:, : self.length]
            setattr(self, name, new)

    def extend(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        """Append rows shaped (n, G, d_h)."""
        k_rows = np.asarray(k_rows)
        v_rows = np.asarray(v_rows)
        shape = (self.n_groups, self.head_dim)
        if k_rows.shape[1:] != shape or v_rows.shape != k_rows.shape:
            raise ContractError(f"cache rows must be (n, {self.n_groups}, {self.head_dim})")
        n = k_rows.shape[0]
        self._reserve(self.length + n)
        self._k[:, self.length : self.length + n] = np.swapaxes(k_rows, 0, 1)
        self._v[:, self.length : self.length + n] = np.swapaxes(v_rows, 0, 1)
        self.length += n

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self.extend(np.asarray(k_row)[None], np.asarray(v_row)[None])

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, : self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, : self.length]

    @property
    def nbytes(self) -> int:
        return 2 * self.length * self.n_groups * self.head_dim * self.dtype.itemsize

    @property
    def num_scalars(self) -> int:
        return 2 * self.length * self.n_groups * self.head_dim


def attention_decode_step(x_t, w: AttentionWeights, cache: KVCache) -> Tensor:
    """One autoregressive step; appends k_t, v_t to ``cache``."""
    x = _np(x_t)
    if x.shape != (w.d_model,):
        raise DimensionError(f"decode input must be ({w.d_model},), got {x.shape}")
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    if cache.n_groups != G or cache.head_dim != dh:
        raise ContractError("KV cache geometry does not match the attention weights")
    q = (x @ w.W_Q.data).reshape(G, H // G, dh)
    cache.append((x @ w.W_K.data).reshape(G, dh), (x @ w.W_V.data).reshape(G, dh))
    return Tensor(_attend_cached(q[:, :, None, :], cache, cache.length - 1, w).reshape(-1) @ w.W_O.data)


def _attend_cached(q: np.ndarray, cache: KVCache, start: int, w: AttentionWeights) -> np.ndarray:
    """Attention of queries (G, r, n, dh) at absolute positions start.. over the cache."""
    n = q.shape[2]
    stop = start + n
    K = cache.keys[:, :stop]
    V = cache.values[:, :stop]
    scores = np.matmul(q, np.swapaxes(K, -1, -2)[:, None])
    if w.scale_scores:
        scores *= 1.0 / math.sqrt(w.head_dim)
    if n > 1:
        rows = np.arange(start, stop)[:, None]
        scores = np.where(np.arange(stop)[None, :] > rows, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    y = np.matmul(scores, V[:, None])  # G, r, n, dh
    return np.transpose(y, (2, 0, 1, 3)).reshape(n, w.n_heads * w.head_dim)


def attention_prefill(X, w: AttentionWeights, cache: KVCache, block: int = 256) -> np.ndarray:
    """Blocked no-grad forward over a (T, d) prefix that also fills ``cache``."""
    x = _np(X)
    T = x.shape[0]
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    start = cache.length
    cache.extend((x @ w.W_K.data).reshape(T, G, dh), (x @ w.W_V.data).reshape(T, G, dh))
    q = np.transpose((x @ w.W_Q.data).reshape(T, G, H // G, dh), (1, 2, 0, 3))
    out = np.empty((T, H * dh), dtype=np.result_type(x, w.W_Q.data))
    for s in range(0, T, block):
        e = min(T, s + block)
        out[s:e] = _attend_cached(q[:, :, s:e], cache, start + s, w)
    return out @ w.W_O.data


# --- Mamba-2 ---------------------------------------------------------------


@dataclass
class SSMState:
    """Constant-size decode state: S per kv group and the conv input tail."""

    S: np.ndarray  # (G, d_h value, d_h key)
    conv_tail: np.ndarray  # (w - 1, C)
    t: int = 0

    @classmethod
    def zeros(cls, w: Mamba2Weights, dtype=None) -> "SSMState":
        dtype = dtype or w.W_Q.dtype
        G, dh = w.n_groups, w.head_dim
        return cls(
            S=np.zeros((G, dh, dh), dtype=dtype),
            conv_tail=np.zeros((w.conv_width - 1, w.conv_channels), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.conv_tail.nbytes

    @property
    def num_scalars(self) -> int:
        return self.S.size + self.conv_tail.size


@dataclass
class MixerFlags:
    """Test switches that override parts of the Mamba-2 layer."""

    force_gate: bool = False  # gate multiplies by exactly 1
    force_unit_decay: bool = False  # gamma == 1
    conv_activation: bool | None = None  # None: use the weights' setting


def _mamba2_streams(X3: Tensor, w: Mamba2Weights, flags: MixerFlags):
    B, T, _ = X3.shape
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    r = H // G
    qkv_pre = tc.concat(
        [tc.matmul(X3, w.W_Q), tc.matmul(X3, w.W_K), tc.matmul(X3, w.W_V)], axis=-1
    )
    qkv = tc.causal_depthwise_conv(qkv_pre, w.conv_kernel, w.conv_bias)
    act = w.conv_activation if flags.conv_activation is None else flags.conv_activation
    if act:
        qkv = tc.silu(qkv)
    q = qkv[:, :, : H * dh]
    if w.score_scale != 1.0:
        q = tc.mul(q, w.score_scale)
    k = qkv[:, :, H * dh : (H + G) * dh]
    v = qkv[:, :, (H + G) * dh :]
    q = tc.transpose(tc.reshape(q, (B, T, G, r, dh)), (0, 2, 3, 1, 4))
    k = tc.transpose(tc.reshape(k, (B, T, G, dh)), (0, 2, 1, 3))
    v = tc.transpose(tc.reshape(v, (B, T, G, dh)), (0, 2, 1, 3))
    if flags.force_unit_decay:
        log_gamma = tc.zeros((B, G, T), dtype=X3.dtype)
    else:
        log_gamma = tc.neg(tc.mul(tc.softplus(tc.matmul(X3, w.W_gamma)), tc.exp(w.a)))
        log_gamma = tc.transpose(log_gamma, (0, 2, 1))
    return q, k, v, log_gamma, qkv_pre


def _mamba2_output(y: Tensor, X3: Tensor, w: Mamba2Weights, flags: MixerFlags) -> Tensor:
    B, T, _ = X3.shape
    H, dh = w.n_heads, w.head_dim
    y = tc.transpose(y, (0, 3, 1, 2, 4))  # B, T, G, r, dh
    if w.head_norm:
        y = tc.rms_norm(y)
    y = tc.reshape(y, (B, T, H * dh))
    if not flags.force_gate:
        y = tc.mul(y, tc.sigmoid(tc.add(tc.matmul(X3, w.W_G), w.gate_bias)))
    return tc.matmul(y, w.W_O)


def ssm_scan_recurrent(q: Tensor, k: Tensor, v: Tensor, log_gamma: Tensor) -> Tensor:
    """S_t = gamma_t S_{t-1} + v_t k_t^T, y_t = S_t q_t, one step at a time.

    Shapes: q (B, G, r, T, dk), k (B, G, T, dk), v (B, G, T, dv),
    log_gamma (B, G, T). Returns (B, G, r, T, dv).
    """
    B, G, r, T, dk = q.shape
    dv = v.shape[-1]
    gamma = tc.exp(log_gamma)
    S = None
    ys = []
    for t in range(T):
        outer = tc.matmul(tc.transpose(v[:, :, t : t + 1, :]), k[:, :, t : t + 1, :])
        if S is None:
            S = outer
        else:
            S = tc.add(tc.mul(tc.reshape(gamma[:, :, t : t + 1], (B, G, 1, 1)), S), outer)
        y_t = tc.matmul(q[:, :, :, t, :], tc.transpose(S))
        ys.append(tc.reshape(y_t, (B, G, r, 1, dv)))
    return tc.concat(ys, axis=3)


def _decay_matrix(cum: Tensor) -> Tensor:
    """exp(cum_t - cum_i) for i <= t, zero above the diagonal."""
    n = cum.shape[-1]
    lead = cum.shape[:-1]
    diff = tc.sub(tc.reshape(cum, lead + (n, 1)), tc.reshape(cum, lead + (1, n)))
    return tc.exp(tc.masked_fill(diff, _causal_mask(n), -np.inf))


def ssm_scan_chunked(q: Tensor, k: Tensor, v: Tensor, log_gamma: Tensor, chunk: int) -> Tensor:
    """Chunked form: masked decayed quadratic form inside each chunk plus the
    decayed state carried in from earlier chunks. Same shapes as the recurrent scan."""
    if chunk < 1:
        raise ContractError("chunk size must be >= 1")
    B, G, r, T, dk = q.shape
    dv = v.shape[-1]
    cl = min(chunk, T)
    nc = -(-T // cl)
    pad = nc * cl - T
    if pad:
        dt = q.dtype
        q = tc.concat([q, tc.zeros((B, G, r, pad, dk), dtype=dt)], axis=3)
        k = tc.concat([k, tc.zeros((B, G, pad, dk), dtype=dt)], axis=2)
        v = tc.concat([v, tc.zeros((B, G, pad, dv), dtype=dt)], axis=2)
        log_gamma = tc.concat([log_gamma, tc.zeros((B, G, pad), dtype=dt)], axis=2)
    qc = tc.reshape(q, (B, G, r, nc, cl, dk))
    kc = tc.reshape(k, (B, G, 1, nc, cl, dk))
    vc = tc.reshape(v, (B, G, 1, nc, cl, dv))
    A = tc.cumsum(tc.reshape(log_gamma, (B, G, nc, cl)), axis=-1)

    decay = tc.reshape(_decay_matrix(A), (B, G, 1, nc, cl, cl))
    y_diag = tc.matmul(tc.mul(tc.matmul(qc, tc.transpose(kc)), decay), vc)
    if nc == 1:
        y = y_diag
    else:
        A_last = A[:, :, :, cl - 1 : cl]
        to_end = tc.reshape(tc.exp(tc.sub(A_last, A)), (B, G, 1, nc, cl, 1))
        states = tc.matmul(tc.transpose(tc.mul(vc, to_end)), kc)  # B,G,1,nc,dv,dk
        states = tc.reshape(states, (B, G, nc, dv * dk))
        zero_state = tc.zeros((B, G, 1, dv * dk), dtype=q.dtype)
        totals = tc.concat([tc.zeros((B, G, 1), dtype=q.dtype), tc.reshape(A_last, (B, G, nc))], axis=-1)
        carried = tc.matmul(_decay_matrix(tc.cumsum(totals, axis=-1)), tc.concat([zero_state, states], axis=2))
        entering = tc.reshape(carried[:, :, :nc, :], (B, G, 1, nc, dv, dk))
        from_start = tc.reshape(tc.exp(A), (B, G, 1, nc, cl, 1))
        y_off = tc.mul(tc.matmul(qc, tc.transpose(entering)), from_start)
        y = tc.add(y_diag, y_off)
    y = tc.reshape(y, (B, G, r, nc * cl, dv))
    return y[:, :, :, :T, :] if pad else y


def mamba2_forward_recurrent(X: Tensor, w: Mamba2Weights, flags: MixerFlags | None = None) -> Tensor:
    flags = flags or MixerFlags()
    X3, squeeze = _batched(X, w.d_model)
    q, k, v, lg, _ = _mamba2_streams(X3, w, flags)
    return _unbatch(_mamba2_output(ssm_scan_recurrent(q, k, v, lg), X3, w, flags), squeeze)


def mamba2_forward_chunked(
    X: Tensor, w: Mamba2Weights, chunk: int = 64, flags: MixerFlags | None = None
) -> Tensor:
    flags = flags or MixerFlags()
    X3, squeeze = _batched(X, w.d_model)
    q, k, v, lg, _ = _mamba2_streams(X3, w, flags)
    return _unbatch(_mamba2_output(ssm_scan_chunked(q, k, v, lg, chunk), X3, w, flags), squeeze)


def mamba2_forward(X: Tensor, w: Mamba2Weights, chunk: int = 64, flags: MixerFlags | None = None) -> Tensor:
    return mamba2_forward_chunked(X, w, chunk, flags)


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mamba2_decode_step(
    x_t, w: Mamba2Weights, state: SSMState, flags: MixerFlags | None = None
) -> Tensor:
    """One step of the recurrence; updates ``state`` in place."""
    flags = flags or MixerFlags()
    x = _np(x_t)
    if x.shape != (w.d_model,):
        raise DimensionError(f"decode input must be ({w.d_model},), got {x.shape}")
    wdt = w.conv_width
    C = w.conv_channels
    if state.conv_tail.shape != (wdt - 1, C):
        raise ContractError(
            f"conv_tail has shape {state.conv_tail.shape}, expected {(wdt - 1, C)}"
        )
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    qkv_pre = np.concatenate([x @ w.W_Q.data, x @ w.W_K.data, x @ w.W_V.data])
    window = np.concatenate([state.conv_tail, qkv_pre[None]], axis=0)
    qkv = w.conv_bias.data + (w.conv_kernel.data * window).sum(axis=0)
    state.conv_tail[...] = window[1:]
    act = w.conv_activation if flags.conv_activation is None else flags.conv_activation
    if act:
        qkv = _silu_np(qkv)
    q = qkv[: H * dh].reshape(G, H // G, dh)
    if w.score_scale != 1.0:
        q = q * w.score_scale
    k = qkv[H * dh : (H + G) * dh].reshape(G, dh)
    v = qkv[(H + G) * dh :].reshape(G, dh)
    if flags.force_unit_decay:
        gamma = np.ones(G, dtype=x.dtype)
    else:
        gamma = np.exp(-np.logaddexp(0.0, x @ w.W_gamma.data) * np.exp(w.a.data))
    state.S *= gamma[:, None, None]
    state.S += v[:, :, None] * k[:, None, :]
    state.t += 1
    y = np.matmul(q, np.swapaxes(state.S, -1, -2))  # G, r, dv
    if w.head_norm:
        y = y / np.sqrt(np.mean(y * y, axis=-1, keepdims=True) + 1e-6)
    y = y.reshape(H * dh)
    if not flags.force_gate:
        y = y * _sigmoid_np(x @ w.W_G.data + w.gate_bias.data)
    return Tensor(y @ w.W_O.data)


def mamba2_prefill(X, w: Mamba2Weights, chunk: int = 64) -> tuple[np.ndarray, SSMState]:
    """No-grad chunked forward over a (T, d) prefix returning the decode state."""
    X3, _ = _batched(X if isinstance(X, Tensor) else Tensor(X), w.d_model)
    flags = MixerFlags()
    q, k, v, lg, qkv_pre = _mamba2_streams(X3, w, flags)
    y = _mamba2_output(ssm_scan_chunked(q, k, v, lg, chunk), X3, w, flags).data[0]
    cum = np.cumsum(lg.data[0], axis=-1)  # G, T
    to_end = np.exp(cum[:, -1:] - cum)
    S = np.matmul(np.swapaxes(v.data[0] * to_end[..., None], -1, -2), k.data[0])
    state = SSMState.zeros(w, dtype=y.dtype)
    state.S[...] = S
    T = qkv_pre.shape[1]
    n = min(T, w.conv_width - 1)
    if n:
        state.conv_tail[-n:] = qkv_pre.data[0, T - n :]
    state.t = T
    return y, state


# --- oracle ----------------------------------------------------------------


def brute_force_decayed_attention(Q, K, V, gammas) -> Tensor:
    """y_t = sum_{i<=t} (prod_{j=i+1..t} gamma_j) (q_t . k_i) v_i, row by row."""
    Q, K, V, g = (np.asarray(_np(a), dtype=np.result_type(_np(Q), np.float32)) for a in (Q, K, V, gammas))
    T = Q.shape[0]
    Y = np.zeros((T, V.shape[1]), dtype=Q.dtype)
    for t in range(T):
        # weight[i] = gamma_{i+1} * ... * gamma_t, built as an explicit running product
        rev = np.cumprod(np.concatenate([[1.0], g[t:0:-1]]).astype(Q.dtype))
        weight = rev[::-1]
        Y[t] = ((K[: t + 1] @ Q[t]) * weight) @ V[: t + 1]
    return Tensor(Y)


def mamba2_reference(X, w: Mamba2Weights, flags: MixerFlags | None = None) -> Tensor:
    """Full Mamba-2 layer on a (T, d) input with plain numpy and the O(T^2) oracle."""
    flags = flags or MixerFlags()
    x = np.asarray(_np(X))
    T = x.shape[0]
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    r = H // G
    pre = np.concatenate([x @ w.W_Q.data, x @ w.W_K.data, x @ w.W_V.data], axis=1)
    kern, bias = w.conv_kernel.data, w.conv_bias.data
    wdt = kern.shape[0]
    conv = np.empty_like(pre)
    for t in range(T):
        acc = bias.copy()
        for j in range(wdt):
            src = t - (wdt - 1) + j
            if src >= 0:
                acc = acc + kern[j] * pre[src]
        conv[t] = acc
    act = w.conv_activation if flags.conv_activation is None else flags.conv_activation
    if act:
        conv = conv / (1.0 + np.exp(-conv))
    q = conv[:, : H * dh] * w.score_scale
    k = conv[:, H * dh : (H + G) * dh]
    v = conv[:, (H + G) * dh :]
    if flags.force_unit_decay:
        gam = np.ones((T, G), dtype=x.dtype)
    else:
        gam = np.exp(-np.log1p(np.exp(x @ w.W_gamma.data)) * np.exp(w.a.data))
    y = np.zeros((T, H * dh), dtype=x.dtype)
    for h in range(H):
        g = h // r
        cols = slice(h * dh, (h + 1) * dh)
        kv = slice(g * dh, (g + 1) * dh)
        y[:, cols] = brute_force_decayed_attention(q[:, cols], k[:, kv], v[:, kv], gam[:, g]).data
    if w.head_norm:
        yh = y.reshape(T, H, dh)
        y = (yh / np.sqrt(np.mean(yh * yh, axis=-1, keepdims=True) + 1e-6)).reshape(T, H * dh)
    if not flags.force_gate:
        y = y / (1.0 + np.exp(-(x @ w.W_G.data + w.gate_bias.data)))
    return Tensor(y @ w.W_O.data)


def attention_reference(X, w: AttentionWeights) -> Tensor:
    """Row-by-row numpy causal attention on a (T, d) input."""
    x = np.asarray(_np(X))
    T = x.shape[0]
    H, G, dh = w.n_heads, w.n_groups, w.head_dim
    q, k, v = x @ w.W_Q.data, x @ w.W_K.data, x @ w.W_V.data
    scale = 1.0 / math.sqrt(dh) if w.scale_scores else 1.0
    y = np.zeros((T, H * dh), dtype=x.dtype)
    for h in range(H):
        g = h // (H // G)
        qh, kh, vh = q[:, h * dh : (h + 1) * dh], k[:, g * dh : (g + 1) * dh], v[:, g * dh : (g + 1) * dh]
        for t in range(T):
            s = (kh[: t + 1] @ qh[t]) * scale
            p = np.exp(s - s.max())
            y[t, h * dh : (h + 1) * dh] = (p / p.sum()) @ vh[: t + 1]
    return Tensor(y @ w.W_O.data)
