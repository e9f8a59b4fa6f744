"""Build Mamba-2 mixer weights from a trained attention layer.

The projections are inherited verbatim. The SSM-only parameters start out
inert: the decay is input-independent and close to one, the causal conv is
an identity, and the output gate is nearly open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError
from .mixers import AttentionWeights, Mamba2Weights, MixerFlags, attention_forward, mamba2_forward
from .tensor import Tensor

INIT_MODES = ("mimic", "inherit", "scratch")

# parameters that exist only in the Mamba-2 layer
SSM_EXTRA = ("a", "W_gamma", "conv_kernel", "conv_bias", "W_G", "gate_bias")
INHERITED = ("W_Q", "W_K", "W_V", "W_O")


def seed_gamma(a0: float) -> float:
    """Decay produced by a carved layer: exp(-softplus(0) * e^a0)."""
    return math.exp(-math.log(2.0) * math.exp(a0))


@dataclass(frozen=True)
class SeedConfig:
    a0: float = -8.0
    gate_bias0: float = 6.0
    conv_width: int = 4
    unscaled_q: bool = False

    def __post_init__(self):
        if self.conv_width < 1:
            raise ConfigError("must be >= 1", "seed.conv_width")
        if seed_gamma(self.a0) < 0.999:
            raise ConfigError(f"a0={self.a0} gives gamma < 0.999", "seed.a0")
        if 1.0 / (1.0 + math.exp(-self.gate_bias0)) < 0.995:
            raise ConfigError(f"gate_bias0={self.gate_bias0} gives gate < 0.995", "seed.gate_bias0")


def _copy(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def carve(attn: AttentionWeights, cfg: SeedConfig = SeedConfig()) -> Mamba2Weights:
    H, G, dh = attn.n_heads, attn.n_groups, attn.head_dim
    d = attn.d_model
    dt = attn.W_Q.dtype
    C = (H + 2 * G) * dh
    kernel = np.zeros((cfg.conv_width, C), dtype=dt)
    kernel[-1] = 1.0
    scale = 1.0 / math.sqrt(dh) if attn.scale_scores and not cfg.unscaled_q else 1.0
    return Mamba2Weights(
        W_Q=_copy(attn.W_Q),
        W_K=_copy(attn.W_K),
        W_V=_copy(attn.W_V),
        W_O=_copy(attn.W_O),
        a=Tensor(np.full(G, cfg.a0, dtype=dt)),
        W_gamma=Tensor(np.zeros((d, G), dtype=dt)),
        conv_kernel=Tensor(kernel),
        conv_bias=Tensor(np.zeros(C, dtype=dt)),
        W_G=Tensor(np.zeros((d, H * dh), dtype=dt)),
        gate_bias=Tensor(np.full(H * dh, cfg.gate_bias0, dtype=dt)),
        n_heads=H,
        n_groups=G,
        head_dim=dh,
        score_scale=scale,
    )


def init_mamba2(
    attn: AttentionWeights,
    mode: str,
    rng: np.random.Generator,
    cfg: SeedConfig = SeedConfig(),
    std: float = 0.02,
) -> Mamba2Weights:
    """Initialization strategies compared in the init ablation.

    ``mimic`` is :func:`carve`. ``inherit`` copies the projections but draws
    the SSM-only parameters with conventional Mamba-2 defaults: decay rate
    A * dt with A ~ U(1, 16) and dt log-uniform in [1e-3, 1e-1]. ``scratch``
    additionally redraws W_Q, W_K and W_V; W_O stays inherited.
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {mode!r}", "init")
    m = carve(attn, cfg)
    if mode == "mimic":
        return m
    dt = m.W_Q.dtype
    G = m.n_groups
    w = m.conv_width
    bound = 1.0 / math.sqrt(w)
    A = rng.uniform(1.0, 16.0, size=G)
    step = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=G))
    # softplus(0) = ln 2 multiplies the rate at W_gamma = 0
    m.a = Tensor(np.log(A * step / math.log(2.0)).astype(dt))
    m.W_gamma = Tensor(rng.normal(0.0, std, size=m.W_gamma.shape).astype(dt))
    m.conv_kernel = Tensor(rng.uniform(-bound, bound, size=m.conv_kernel.shape).astype(dt))
    m.conv_bias = Tensor(rng.uniform(-bound, bound, size=m.conv_bias.shape).astype(dt))
    m.W_G = Tensor(rng.normal(0.0, std, size=m.W_G.shape).astype(dt))
    m.gate_bias = Tensor(np.zeros(m.gate_bias.shape, dtype=dt))
    if mode == "scratch":
        for name in ("W_Q", "W_K", "W_V"):
            shape = getattr(m, name).shape
            setattr(m, name, Tensor(rng.normal(0.0, std, size=shape).astype(dt)))
    return m


@dataclass
class SeedReport:
    gamma_dev: float  # max |gamma_t - 1|
    conv_residual: float  # max |conv(P) - P| before the activation
    gate_dev: float  # max |gate - 1|
    linear_attention_dev: float  # max |layer(X) - same layer with gamma = gate = 1|
    silu_dev: float  # max |layer(X) - plain decay-free linear attention(X)|, includes the conv silu
    attention_mse: float  # mean squared gap to the source attention layer
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.gamma_dev, self.conv_residual, self.gate_dev, self.linear_attention_dev) <= self.tol


def verify_seed(m: Mamba2Weights, attn: AttentionWeights, X, tol: float) -> SeedReport:
    """Diagnostics for how inert the SSM-only parameters of ``m`` are on ``X``.

    ``passed`` covers the decay, conv, gate and unit-decay deviations. The
    silu after the conv is active at seed; ``silu_dev`` reports its effect
    separately and is not part of the pass criterion.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    x = X.data.reshape(-1, X.shape[-1])
    z = x @ m.W_gamma.data
    gamma = np.exp(-np.logaddexp(0.0, z) * np.exp(m.a.data))
    X3 = X.data if X.ndim == 3 else X.data[None]
    pre3 = np.concatenate([X3 @ m.W_Q.data, X3 @ m.W_K.data, X3 @ m.W_V.data], axis=-1)
    conv = tc.causal_depthwise_conv(Tensor(pre3), m.conv_kernel, m.conv_bias).data
    gate = 1.0 / (1.0 + np.exp(-(x @ m.W_G.data + m.gate_bias.data)))
    seeded = mamba2_forward(X, m).data
    unit = mamba2_forward(X, m, flags=MixerFlags(force_gate=True, force_unit_decay=True)).data
    linear = mamba2_forward(
        X, m, flags=MixerFlags(force_gate=True, force_unit_decay=True, conv_activation=False)
    ).data
    target = attention_forward(X, attn).data
    return SeedReport(
        gamma_dev=float(np.max(np.abs(gamma - 1.0))),
        conv_residual=float(np.max(np.abs(conv - pre3))),
        gate_dev=float(np.max(np.abs(gate - 1.0))),
        linear_attention_dev=float(np.max(np.abs(seeded - unit))),
        silu_dev=float(np.max(np.abs(seeded - linear))),
        attention_mse=float(np.mean((seeded - target) ** 2)),
        tol=tol,
    )
