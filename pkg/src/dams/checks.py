"""Module-wise finite-difference gradient verification suite.

Each check builds random inputs as Parameters, evaluates a scalar loss (a
fixed random projection of the output), runs the hand-written backward, and
compares every accumulated gradient against central differences. Shared by
`dams gradcheck` and the acceptance tests.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernel
from . import losses as L
from .amtpn import Aff, Amtpn, PyramidConfig, Tce, Tpp
from .cbam import Cbam, CbamConfig
from .kernel import Parameter, grad_check
from .model import Backbone, DamsModel, Head, ModelConfig
from .trainer import TrainConfig, train_step


def _p(rng, shape, name, lo=-1.0, hi=1.0):
    return Parameter(rng.uniform(lo, hi, shape), name)


def _projection_loss(rng, shape):
    r = rng.uniform(-1.0, 1.0, shape)
    return r


SMALL_PYRAMID = PyramidConfig(scales=(1, 3), channels=8, reduction_ratio=2)
SMALL_MODEL = ModelConfig(input_dim=16, channels=8, depth=1, head_hidden=4,
                          pyramid=SMALL_PYRAMID,
                          cbam=CbamConfig(reduction_ratio=2, temporal_kernel=3))


def check_conv1d(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 3, 8), "x")
    w = _p(rng, (4, 3, 3), "w")
    b = _p(rng, (4,), "b")
    r = _projection_loss(rng, (2, 4, 8))

    def fn():
        out, cache = kernel.conv1d(x.value, w.value, b.value, padding=1)
        dx, dw, db = kernel.conv1d_backward(r, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db
        return (out * r).sum()
    return grad_check(fn, [x, w, b], **kw)


def check_avg_pool1d(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 3, 9), "x")
    r = _projection_loss(rng, (2, 3, 9))

    def fn():
        out, cache = kernel.avg_pool1d(x.value, 3, stride=1, padding=1)
        x.grad += kernel.avg_pool1d_backward(r, cache)
        return (out * r).sum()
    return grad_check(fn, [x], **kw)


def check_max_pool1d(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 3, 9), "x")
    r = _projection_loss(rng, (2, 3, 9))

    def fn():
        out, cache = kernel.max_pool1d(x.value, 3, stride=1, padding=1)
        x.grad += kernel.max_pool1d_backward(r, cache)
        return (out * r).sum()
    return grad_check(fn, [x], **kw)


def check_linear(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (3, 5), "x")
    w = _p(rng, (4, 5), "w")
    b = _p(rng, (4,), "b")
    r = _projection_loss(rng, (3, 4))

    def fn():
        out, cache = kernel.linear(x.value, w.value, b.value)
        dx, dw, db = kernel.linear_backward(r, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db
        return (out * r).sum()
    return grad_check(fn, [x, w, b], **kw)


def _elementwise_check(op, op_backward, seed, axis=None, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (3, 6), "x")
    r = _projection_loss(rng, (3, 6))

    def fn():
        if axis is None:
            out, cache = op(x.value)
        else:
            out, cache = op(x.value, axis)
        x.grad += op_backward(r, cache)
        return (out * r).sum()
    return grad_check(fn, [x], **kw)


def check_softmax(seed, **kw):
    return _elementwise_check(kernel.softmax, kernel.softmax_backward, seed,
                              axis=1, **kw)


def check_sigmoid(seed, **kw):
    return _elementwise_check(kernel.sigmoid, kernel.sigmoid_backward, seed, **kw)


def check_relu(seed, **kw):
    return _elementwise_check(kernel.relu, kernel.relu_backward, seed, **kw)


def check_batch_norm1d(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _p(rng, (2, 4, 6), "x")
    gamma = _p(rng, (4,), "gamma", 0.5, 1.5)
    beta = _p(rng, (4,), "beta")
    state = kernel.BatchNormState.create(4)
    r = _projection_loss(rng, (2, 4, 6))

    def fn():
        out, cache = kernel.batch_norm1d(x.value, gamma.value, beta.value,
                                         state, train=True)
        dx, dg, db = kernel.batch_norm1d_backward(r, cache)
        x.grad += dx
        gamma.grad += dg
        beta.grad += db
        return (out * r).sum()
    return grad_check(fn, [x, gamma, beta], **kw)


def _module_check(build, shape, seed, train=True, **kw):
    rng = np.random.default_rng(seed)
    module = build(rng)
    x = _p(rng, shape, "x")
    out_shape = _module_out_shape(module, x.value, train)
    r = _projection_loss(rng, out_shape)

    def fn():
        out = _module_forward(module, x.value, train)
        x.grad += _module_backward(module, r)
        return (out * r).sum()
    return grad_check(fn, module.params() + [x], **kw)


def _module_forward(module, x, train):
    if isinstance(module, (Amtpn, Backbone)):
        return module.forward(x, train)
    return module.forward(x)


def _module_backward(module, g):
    return module.backward(g)


def _module_out_shape(module, x, train):
    out = _module_forward(module, x, train)
    _module_backward(module, np.zeros_like(out) if out.ndim == 3
                     else np.zeros(out.shape))
    return out.shape


def check_tpp(seed, **kw):
    rng = np.random.default_rng(seed)
    tpp = Tpp(SMALL_PYRAMID, rng)
    x = _p(rng, (1, 8, 12), "x")
    rs = [rng.uniform(-1, 1, (1, 8, 12)) for _ in SMALL_PYRAMID.scales]

    def fn():
        branches = tpp.forward(x.value, train=True)
        x.grad += tpp.backward(rs)
        return sum((b * r).sum() for b, r in zip(branches, rs))
    return grad_check(fn, tpp.params() + [x], **kw)


def check_aff(seed, **kw):
    rng = np.random.default_rng(seed)
    aff = Aff(SMALL_PYRAMID, rng)
    xs = [_p(rng, (1, 8, 12), f"x{i}") for i in range(len(SMALL_PYRAMID.scales))]
    r = _projection_loss(rng, (1, 8, 12))

    def fn():
        fused, _ = aff.forward([p.value for p in xs])
        for p, g in zip(xs, aff.backward(r)):
            p.grad += g
        return (fused * r).sum()
    return grad_check(fn, aff.params() + xs, **kw)


def check_tce(seed, **kw):
    return _module_check(lambda rng: Tce(8, 2, rng), (1, 8, 12), seed, **kw)


def check_cbam(seed, **kw):
    return _module_check(
        lambda rng: Cbam(8, CbamConfig(reduction_ratio=2, temporal_kernel=3), rng),
        (1, 8, 12), seed, **kw)


def check_backbone(seed, **kw):
    return _module_check(lambda rng: Backbone(6, 8, 1, rng), (1, 6, 12), seed, **kw)


def check_head(seed, **kw):
    rng = np.random.default_rng(seed)
    head = Head(8, 4, rng)
    x = _p(rng, (2, 8, 12), "x")
    r = _projection_loss(rng, (2, 12))

    def fn():
        out = head.forward(x.value)
        x.grad += head.backward(r)
        return (out * r).sum()
    return grad_check(fn, head.params() + [x], **kw)


def check_amtpn(seed, **kw):
    return _module_check(lambda rng: Amtpn(SMALL_PYRAMID, rng), (1, 8, 12),
                         seed, **kw)


def check_focal(seed, **kw):
    rng = np.random.default_rng(seed)
    logits = _p(rng, (2, 12), "logits", -2.0, 2.0)
    pseudo = (rng.random((2, 12)) > 0.6).astype(np.float64)
    mask = np.ones((2, 12))
    cfg = L.LossConfig()

    def fn():
        scores, sc = kernel.sigmoid(logits.value)
        loss, d_scores = L.focal_loss(scores, pseudo, mask, cfg)
        logits.grad += kernel.sigmoid_backward(d_scores, sc)
        return loss
    return grad_check(fn, [logits], **kw)


def check_topk_bce(seed, **kw):
    rng = np.random.default_rng(seed)
    logits = _p(rng, (3, 12), "logits", -2.0, 2.0)
    labels = np.array([1.0, 0.0, 1.0])
    frac = 0.25

    def fn():
        n, t = logits.value.shape
        k = L.topk_count(t, frac)
        video = np.zeros(n)
        sets = []
        for i in range(n):
            idx = L.topk_indices(logits.value[i], k)
            sets.append(idx)
            video[i] = logits.value[i, idx].mean()
        loss, d_v = L.video_cls_loss(video, labels)
        for i, idx in enumerate(sets):
            logits.grad[i, idx] += d_v[i] / len(idx)
        return loss
    return grad_check(fn, [logits], **kw)


def check_triplet(seed, **kw):
    rng = np.random.default_rng(seed)
    fa = _p(rng, (6,), "fa")
    fp = _p(rng, (6,), "fp")
    fn_ = _p(rng, (6,), "fn")

    def fn():
        loss, da, dp, dn = L.triplet_loss(fa.value, fp.value, fn_.value, 5.0)
        fa.grad += da
        fp.grad += dp
        fn_.grad += dn
        return loss
    return grad_check(fn, [fa, fp, fn_], **kw)


def check_total_loss(seed, **kw):
    rng = np.random.default_rng(seed)
    raw = _p(rng, (3,), "raw", 0.2, 1.5)  # l_i = raw_i^2 keeps components >= 0
    weights = L.UncertaintyWeights()
    weights.rho.value[:] = rng.uniform(-0.5, 0.5, 3)

    def fn():
        l = raw.value ** 2
        bd = L.total_loss(l[0], l[1], l[2], weights, accumulate_grads=True)
        raw.grad += bd.weights * 2.0 * raw.value
        return bd.total
    return grad_check(fn, [raw, weights.rho], **kw)


def check_full_model(seed, **kw):
    rng = np.random.default_rng(seed)
    model = DamsModel(SMALL_MODEL, np.random.default_rng([seed, 7]))
    weights = L.UncertaintyWeights()
    cfg = TrainConfig(seed=seed, model=SMALL_MODEL,
                      loss=L.LossConfig(topk_fraction=0.25))
    feats = rng.uniform(-1, 1, (2, 16, 12))
    mask = np.ones((2, 12))
    pseudo_probs = rng.random((2, 12))
    from .data import Batch
    batch = Batch(["a", "b"], feats, mask, np.array([1.0, 0.0]),
                  pseudo_probs, np.ones(2), [])

    def fn():
        return train_step(model, weights, batch, cfg, 0).total
    return grad_check(fn, model.params() + weights.params(), **kw)


ALL_CHECKS = {
    "conv1d": check_conv1d,
    "avg_pool1d": check_avg_pool1d,
    "max_pool1d": check_max_pool1d,
    "linear": check_linear,
    "softmax": check_softmax,
    "sigmoid": check_sigmoid,
    "relu": check_relu,
    "batch_norm1d": check_batch_norm1d,
    "tpp": check_tpp,
    "aff": check_aff,
    "tce": check_tce,
    "amtpn": check_amtpn,
    "cbam": check_cbam,
    "backbone": check_backbone,
    "head": check_head,
    "focal": check_focal,
    "topk_bce": check_topk_bce,
    "triplet": check_triplet,
    "total_loss": check_total_loss,
    "full_model": check_full_model,
}


@dataclasses.dataclass
class SuiteResult:
    name: str
    seed: int
    max_rel_error: float
    passed: bool


def run_suite(seeds=(0, 1, 2, 3, 4), tolerance=1e-4,
              max_entries_per_param=4, names=None):
    """Run every check across the given seeds; returns one result per pair."""
    results = []
    for name, fn in ALL_CHECKS.items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            report = fn(seed, tolerance=tolerance,
                        max_entries_per_param=max_entries_per_param,
                        rng=np.random.default_rng([seed, 0xC4]))
            results.append(SuiteResult(name, seed, report.max_rel_error,
                                       report.passed))
    return results
