"""Convolutional block attention for temporal sequences.

Channel attention first (which channels matter, map [B, C, 1]), then
temporal attention (which positions matter, map [B, 1, T]); each gate
multiplies the features it was computed from. The sequence axis plays the
role image CBAM gives to space.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernel
from .amtpn import ConfigError
from .layers import Conv1d, Linear, Relu, Sigmoid


@dataclasses.dataclass(frozen=True)
class CbamConfig:
    reduction_ratio: int = 4
    temporal_kernel: int = 7

    def __post_init__(self):
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {self.temporal_kernel}")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be positive")


class ChannelAttention:
    """M_c = sigmoid(mlp(avg_pool_T(f)) + mlp(max_pool_T(f))), shape [B, C, 1]."""

    def __init__(self, channels, reduction_ratio, rng, name="ca"):
        if channels % reduction_ratio:
            raise ConfigError(
                f"channel attention: ratio {reduction_ratio} must divide C {channels}")
        hidden = channels // reduction_ratio
        self.lin1 = Linear(channels, hidden, rng, f"{name}.mlp1")
        # near-zero output layer so the channel gate starts ~0.5
        self.lin2 = Linear(hidden, channels, rng, f"{name}.mlp2",
                           bias_init=0.0, weight_scale=0.1)
        self.act = Relu()
        self.gate = Sigmoid()
        self._cache = None

    def _mlp(self, z):
        return self.lin2.forward(self.act.forward(self.lin1.forward(z)))

    def _mlp_backward(self, g):
        return self.lin1.backward(self.act.backward(self.lin2.backward(g)))

    def forward(self, f):
        B, C, T = f.shape
        z_avg = f.mean(axis=2)
        arg = f.argmax(axis=2)
        z_max = np.take_along_axis(f, arg[:, :, None], axis=2)[:, :, 0]
        m = self.gate.forward(self._mlp(z_avg) + self._mlp(z_max))
        self._cache = (f.shape, arg)
        return m[:, :, None]

    def backward(self, g_m):
        (B, C, T), arg = self._cache
        g_logits = self.gate.backward(g_m[:, :, 0])
        # pop order mirrors forward: max branch was applied second
        g_zmax = self._mlp_backward(g_logits)
        g_zavg = self._mlp_backward(g_logits)
        g_f = np.repeat(g_zavg[:, :, None] / T, T, axis=2)
        bi = np.arange(B)[:, None]
        ci = np.arange(C)[None, :]
        g_f[bi, ci, arg] += g_zmax
        return g_f

    def params(self):
        return self.lin1.params() + self.lin2.params()


class TemporalAttention:
    """M_t = sigmoid(conv_k([mean_C(f); max_C(f)])), shape [B, 1, T]."""

    def __init__(self, kernel_size, rng, name="ta"):
        # near-zero conv so the temporal gate starts ~0.5 at every frame
        self.conv = Conv1d(2, 1, kernel_size, kernel_size // 2, rng,
                           f"{name}.conv", bias_init=0.0, weight_scale=0.1)
        self.gate = Sigmoid()
        self._cache = None

    def forward(self, f):
        B, C, T = f.shape
        avg_map = f.mean(axis=1, keepdims=True)
        arg = f.argmax(axis=1)  # [B, T]
        max_map = np.take_along_axis(f, arg[:, None, :], axis=1)
        pooled = np.concatenate([avg_map, max_map], axis=1)  # [B, 2, T]
        m = self.gate.forward(self.conv.forward(pooled))
        self._cache = (f.shape, arg)
        return m

    def backward(self, g_m):
        (B, C, T), arg = self._cache
        g_pooled = self.conv.backward(self.gate.backward(g_m))
        g_f = np.repeat(g_pooled[:, 0:1, :] / C, C, axis=1)
        g_max = g_pooled[:, 1, :]
        bi = np.arange(B)[:, None]
        ti = np.arange(T)[None, :]
        g_f[bi, arg, ti] += g_max
        return g_f

    def params(self):
        return self.conv.params()


class Cbam:
    """Sequential gating: f' = M_c(f) * f, then f'' = M_t(f') * f'.

    `use_ca` / `use_sa` force the corresponding gate to 1 (stage skipped).
    """

    def __init__(self, channels, cfg: CbamConfig, rng, name="cbam",
                 use_ca=True, use_sa=True):
        self.ca = (ChannelAttention(channels, cfg.reduction_ratio, rng, f"{name}.ca")
                   if use_ca else None)
        self.ta = (TemporalAttention(cfg.temporal_kernel, rng, f"{name}.ta")
                   if use_sa else None)
        self._cache = None

    def forward(self, f):
        mc = mt = None
        f1 = f
        if self.ca is not None:
            mc = self.ca.forward(f)
            f1 = f * mc
        f2 = f1
        if self.ta is not None:
            mt = self.ta.forward(f1)
            f2 = f1 * mt
        self._cache = (f, f1, mc, mt)
        return f2

    def backward(self, g):
        f, f1, mc, mt = self._cache
        if self.ta is not None:
            g_mt = (g * f1).sum(axis=1, keepdims=True)
            g = g * mt + self.ta.backward(g_mt)
        if self.ca is not None:
            g_mc = (g * f).sum(axis=2, keepdims=True)
            g = g * mc + self.ca.backward(g_mc)
        return g

    def params(self):
        out = []
        if self.ca is not None:
            out += self.ca.params()
        if self.ta is not None:
            out += self.ta.params()
        return out
