"""Adaptive multiscale temporal pyramid.

Three cascaded stages, all temporal-length preserving:
  TPP  - per-scale average pooling followed by a 1x1 conv + BN + ReLU branch,
  AFF  - softmax fusion weights from per-branch pooled descriptors, weighted
         sum, then a 1x1 refinement conv,
  TCE  - squeeze/excite channel gating from global temporal statistics.

Fusion weights come from all branches (per-branch GAP -> shared 2-layer MLP
-> concatenate -> linear head -> softmax). The gating MLPs use hidden width
C / reduction_ratio.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernel
from .layers import BatchNorm1d, Conv1d, Linear, Relu, Sigmoid


class ConfigError(ValueError):
    """Invalid pyramid or model configuration."""


class EmptyPyramidError(ValueError):
    """Fusion was asked to combine zero branches."""


@dataclasses.dataclass(frozen=True)
class PyramidConfig:
    scales: tuple = (1, 3, 9, 27)
    channels: int = 128
    reduction_ratio: int = 4

    def __post_init__(self):
        scales = tuple(self.scales)
        object.__setattr__(self, "scales", scales)
        if len(scales) == 0:
            raise EmptyPyramidError("pyramid needs at least one scale")
        if any(s < 1 or s % 2 == 0 for s in scales):
            raise ConfigError(f"scales must be odd and >= 1, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {scales}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.reduction_ratio < 1 or self.channels % self.reduction_ratio:
            raise ConfigError(
                f"reduction_ratio {self.reduction_ratio} must divide channels {self.channels}")


class TppBranch:
    """One pyramid scale: avg_pool(s, stride 1, pad s//2) -> conv1x1 -> BN -> ReLU."""

    def __init__(self, scale, channels, rng, name):
        self.scale = scale
        self.conv = Conv1d(channels, channels, 1, 0, rng, f"{name}.conv")
        self.bn = BatchNorm1d(channels, f"{name}.bn")
        self.act = Relu()
        self._pool_cache = None

    def forward(self, x, train):
        pooled, self._pool_cache = kernel.avg_pool1d(
            x, self.scale, stride=1, padding=self.scale // 2)
        return self.act.forward(self.bn.forward(self.conv.forward(pooled), train))

    def backward(self, g):
        g = self.conv.backward(self.bn.backward(self.act.backward(g)))
        return kernel.avg_pool1d_backward(g, self._pool_cache)

    def params(self):
        return self.conv.params() + self.bn.params()


class Tpp:
    def __init__(self, cfg: PyramidConfig, rng, name="tpp"):
        self.branches = [TppBranch(s, cfg.channels, rng, f"{name}.s{s}")
                         for s in cfg.scales]

    def forward(self, x, train):
        return [br.forward(x, train) for br in self.branches]

    def backward(self, grads):
        dx = None
        for br, g in zip(reversed(self.branches), reversed(grads)):
            d = br.backward(g)
            dx = d if dx is None else dx + d
        return dx

    def params(self):
        return [p for br in self.branches for p in br.params()]


class Aff:
    """Adaptive feature fusion over pyramid branches."""

    def __init__(self, cfg: PyramidConfig, rng, name="aff", adaptive=True):
        c, r, k = cfg.channels, cfg.reduction_ratio, len(cfg.scales)
        self.k = k
        self.adaptive = adaptive
        self.mlp1 = Linear(c, c // r, rng, f"{name}.mlp1",
                           bias_init=1.0)
        self.mlp2 = Linear(c // r, c, rng, f"{name}.mlp2")
        self.act = Relu()
        # near-zero head: fusion starts close to uniform weights and the
        # adaptive part is learned rather than injected as init noise
        self.head = Linear(k * c, k, rng, f"{name}.head",
                           bias_init=0.0, weight_scale=0.1)
        self.refine = Conv1d(c, c, 1, 0, rng, f"{name}.refine")
        self._cache = None

    def forward(self, branches):
        if len(branches) == 0:
            raise EmptyPyramidError("aff_forward: no branches")
        if len(branches) != self.k:
            raise ConfigError(f"aff_forward: expected {self.k} branches, got {len(branches)}")
        B = branches[0].shape[0]
        if self.adaptive:
            gap_caches = []
            descs = []
            for br in branches:
                e, gc = kernel.global_avg_pool(br)
                gap_caches.append(gc)
                descs.append(self.mlp2.forward(self.act.forward(self.mlp1.forward(e))))
            concat = np.concatenate(descs, axis=1)
            logits = self.head.forward(concat)
            weights, sm_cache = kernel.softmax(logits, axis=1)
        else:
            gap_caches = None
            sm_cache = None
            weights = np.full((B, self.k), 1.0 / self.k)
        mix = np.zeros_like(branches[0])
        for i, br in enumerate(branches):
            mix += weights[:, i, None, None] * br
        fused = self.refine.forward(mix)
        self._cache = (branches, weights, gap_caches, sm_cache)
        return fused, weights

    def backward(self, g_fused):
        branches, weights, gap_caches, sm_cache = self._cache
        g_mix = self.refine.backward(g_fused)
        g_branches = [weights[:, i, None, None] * g_mix for i in range(self.k)]
        if self.adaptive:
            g_w = np.stack([(g_mix * br).sum(axis=(1, 2)) for br in branches], axis=1)
            g_logits = kernel.softmax_backward(g_w, sm_cache)
            g_concat = self.head.backward(g_logits)
            c = branches[0].shape[1]
            for i in reversed(range(self.k)):
                g_d = g_concat[:, i * c:(i + 1) * c]
                g_e = self.mlp1.backward(self.act.backward(self.mlp2.backward(g_d)))
                g_branches[i] = g_branches[i] + kernel.global_avg_pool_backward(
                    g_e, gap_caches[i])
        return g_branches

    def params(self):
        if self.adaptive:
            return (self.mlp1.params() + self.mlp2.params()
                    + self.head.params() + self.refine.params())
        return self.refine.params()


class Tce:
    """Channel gate: out = x * sigmoid(W2 relu(W1 gap(x))), broadcast over T."""

    def __init__(self, channels, reduction_ratio, rng, name="tce"):
        if channels % reduction_ratio:
            raise ConfigError(
                f"tce: reduction ratio {reduction_ratio} must divide channels {channels}")
        hidden = channels // reduction_ratio
        self.lin1 = Linear(channels, hidden, rng, f"{name}.w1",
                           bias_init=1.0)
        # near-zero output layer: the gate starts ~0.5 for every channel
        # instead of a random fixed attenuation
        self.lin2 = Linear(hidden, channels, rng, f"{name}.w2",
                           bias_init=0.0, weight_scale=0.1)
        self.act = Relu()
        self.gate = Sigmoid()
        self._cache = None

    def forward(self, x):
        z, gap_cache = kernel.global_avg_pool(x)
        alpha = self.gate.forward(self.lin2.forward(self.act.forward(self.lin1.forward(z))))
        out = x * alpha[:, :, None]
        self._cache = (x, alpha, gap_cache)
        return out

    def backward(self, g):
        x, alpha, gap_cache = self._cache
        gx = g * alpha[:, :, None]
        g_alpha = (g * x).sum(axis=2)
        g_z = self.lin1.backward(self.act.backward(
            self.lin2.backward(self.gate.backward(g_alpha))))
        gx += kernel.global_avg_pool_backward(g_z, gap_cache)
        return gx

    def params(self):
        return self.lin1.params() + self.lin2.params()


class Amtpn:
    """TPP -> AFF -> TCE pipeline; output shape equals input shape.

    `use_aff=False` freezes fusion at uniform weights 1/K; `use_tce=False`
    forces the channel gate open (identity).
    """

    def __init__(self, cfg: PyramidConfig, rng, name="amtpn",
                 use_aff=True, use_tce=True):
        self.cfg = cfg
        self.tpp = Tpp(cfg, rng, f"{name}.tpp")
        self.aff = Aff(cfg, rng, f"{name}.aff", adaptive=use_aff)
        self.tce = (Tce(cfg.channels, cfg.reduction_ratio, rng, f"{name}.tce")
                    if use_tce else None)
        self.last_weights = None

    def forward(self, x, train):
        branches = self.tpp.forward(x, train)
        fused, weights = self.aff.forward(branches)
        self.last_weights = weights
        return self.tce.forward(fused) if self.tce is not None else fused

    def backward(self, g):
        if self.tce is not None:
            g = self.tce.backward(g)
        g_branches = self.aff.backward(g)
        return self.tpp.backward(g_branches)

    def params(self):
        out = self.tpp.params() + self.aff.params()
        if self.tce is not None:
            out += self.tce.params()
        return out

    def state_arrays(self):
        out = {}
        for br in self.tpp.branches:
            out.update(br.bn.state_arrays())
        return out
