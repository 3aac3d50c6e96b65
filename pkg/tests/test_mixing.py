"""Token-mixing checks: the fused forward must equal a composition of the
independent dense-matrix branch oracles."""

import numpy as np
import pytest

from gtmnet import tensor as T
from gtmnet.errors import ConfigError, ShapeError
from gtmnet.gtm import (
    GtmConfig,
    GtmWeights,
    alloc_gtm_weights,
    build_dense_time_bias,
    build_dense_time_matrix,
)
from gtmnet.mixing import MixingParams, axis_mix, token_mixing_forward


def t64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def make_params(rng, c, s_h, s_w, t_cfg, pool_s=None, zero_logits=False):
    def mat(shape):
        return t64(rng.normal(0.0, 0.5, size=shape))

    def axis_weights(s):
        return GtmWeights(offsets={i: mat((c, c)) for i in range(s)}, bias=mat((c,)))

    logits = np.zeros((3, c)) if zero_logits else rng.normal(0.0, 0.7, size=(3, c))
    return MixingParams(
        s_h=s_h,
        s_w=s_w,
        h_weights=axis_weights(s_h),
        w_weights=axis_weights(s_w),
        t_cfg=t_cfg,
        t_weights=alloc_gtm_weights(t_cfg, c, rng, dtype="f64", pool_s=pool_s),
        fuse_logits=t64(logits),
        proj_w=mat((c, c)),
        proj_b=mat((c,)),
    )


def circulant_oracle(x, axis, taps, bias):
    n = x.shape[axis]
    y = np.zeros_like(x)
    for i, w in enumerate(taps):
        y = y + np.take(x, (np.arange(n) - i) % n, axis=axis) @ w
    return y + bias


def dense_time_oracle(x, cfg, weights):
    t, c = x.shape[-2:]
    w = build_dense_time_matrix(cfg, t, weights)
    b = build_dense_time_bias(cfg, t, weights)
    flat = x.reshape(x.shape[:-2] + (t * c,))
    return (flat @ w + b).reshape(x.shape)


def mixing_oracle(x, params, t_cfg=None):
    hw = params.h_weights
    ww = params.w_weights
    xh = circulant_oracle(x, -4, [hw.offsets[i].data for i in range(params.s_h)],
                          hw.bias.data)
    xw = circulant_oracle(x, -3, [ww.offsets[i].data for i in range(params.s_w)],
                          ww.bias.data)
    xt = dense_time_oracle(x, t_cfg if t_cfg is not None else params.t_cfg,
                           params.t_weights)
    logits = params.fuse_logits.data
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    betas = e / e.sum(axis=0, keepdims=True)
    fused = xh * betas[0] + xw * betas[1] + xt * betas[2]
    return fused @ params.proj_w.data + params.proj_b.data


@pytest.mark.parametrize("t_cfg", [
    GtmConfig("short_range", 2),
    GtmConfig("long_range", 2),
    GtmConfig("shift_window", 2),
    GtmConfig("shift_token", 3),
    GtmConfig("short_range", 2, shared=False),
    GtmConfig("full", 4),
], ids=lambda c: f"{c.kind}{c.s}{'' if c.shared else 'u'}")
def test_forward_matches_branch_composition(t_cfg):
    rng = np.random.default_rng(21)
    c = 2
    params = make_params(rng, c, s_h=2, s_w=3, t_cfg=t_cfg)
    x = T.Tensor(rng.normal(size=(3, 4, 4, c)))
    out = token_mixing_forward(x, params)
    np.testing.assert_allclose(out.data, mixing_oracle(x.data, params),
                               rtol=1e-11, atol=1e-12)


def test_zero_logits_give_plain_branch_average():
    rng = np.random.default_rng(22)
    c = 3
    params = make_params(rng, c, s_h=2, s_w=2, t_cfg=GtmConfig("short_range", 2),
                         zero_logits=True)
    betas = T.softmax(params.fuse_logits, axis=0).data
    assert np.all(betas == 1.0 / 3.0)
    x = T.Tensor(rng.normal(size=(2, 2, 4, c)))
    out = token_mixing_forward(x, params)
    hw, ww = params.h_weights, params.w_weights
    xh = circulant_oracle(x.data, -4, [hw.offsets[i].data for i in range(2)], hw.bias.data)
    xw = circulant_oracle(x.data, -3, [ww.offsets[i].data for i in range(2)], ww.bias.data)
    xt = dense_time_oracle(x.data, params.t_cfg, params.t_weights)
    want = ((xh + xw + xt) / 3.0) @ params.proj_w.data + params.proj_b.data
    np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-13)


def test_batch_axis_passes_through():
    rng = np.random.default_rng(23)
    c = 2
    params = make_params(rng, c, s_h=2, s_w=2, t_cfg=GtmConfig("shift_token", 2))
    xb = T.Tensor(rng.normal(size=(3, 2, 2, 4, c)))
    out = token_mixing_forward(xb, params).data
    for b in range(3):
        single = token_mixing_forward(T.Tensor(xb.data[b]), params).data
        np.testing.assert_allclose(out[b], single, rtol=1e-12, atol=1e-13)


def test_config_override_reuses_pooled_weights():
    rng = np.random.default_rng(24)
    c = 2
    base = GtmConfig("short_range", 3)
    params = make_params(rng, c, s_h=2, s_w=2, t_cfg=base, pool_s=3)
    x = T.Tensor(rng.normal(size=(2, 2, 6, c)))
    for cfg in (GtmConfig("long_range", 3), GtmConfig("shift_window", 2),
                GtmConfig("shift_token", 3)):
        out = token_mixing_forward(x, params, t_cfg=cfg)
        np.testing.assert_allclose(out.data, mixing_oracle(x.data, params, t_cfg=cfg),
                                   rtol=1e-11, atol=1e-12)
    default = token_mixing_forward(x, params).data
    overridden = token_mixing_forward(x, params, t_cfg=GtmConfig("long_range", 3)).data
    assert np.abs(default - overridden).max() > 1e-6


def test_axis_mix_window_bounds():
    rng = np.random.default_rng(25)
    c = 2
    w = GtmWeights(offsets={i: t64(rng.normal(size=(c, c))) for i in range(5)},
                   bias=t64(np.zeros(c)))
    x = T.Tensor(rng.normal(size=(3, 4, 2, c)))
    with pytest.raises(ConfigError):
        axis_mix(x, "h", w, 4)  # H extent is 3
    with pytest.raises(ConfigError):
        axis_mix(x, "w", w, 0)
    with pytest.raises(ConfigError):
        axis_mix(x, "t", w, 2)


def test_fuse_logits_shape_guard():
    rng = np.random.default_rng(26)
    c = 2
    params = make_params(rng, c, s_h=1, s_w=1, t_cfg=GtmConfig("short_range", 2))
    params.fuse_logits = t64(np.zeros((2, c)))
    with pytest.raises(ShapeError):
        token_mixing_forward(T.Tensor(rng.normal(size=(2, 2, 4, c))), params)


def test_gradients_reach_every_parameter():
    rng = np.random.default_rng(27)
    c = 2
    params = make_params(rng, c, s_h=2, s_w=2, t_cfg=GtmConfig("long_range", 2))
    x = T.Tensor(rng.normal(size=(2, 2, 4, c)))

    named = []
    for label, gw in (("h", params.h_weights), ("w", params.w_weights),
                      ("t", params.t_weights)):
        for dt, tensor in sorted(gw.offsets.items()):
            named.append((f"{label}.w_{dt}", tensor))
        named.append((f"{label}.bias", gw.bias))
    named += [("fuse_logits", params.fuse_logits), ("proj.w", params.proj_w),
              ("proj.b", params.proj_b)]

    def f():
        y = token_mixing_forward(x, params)
        wgt = T.Tensor(np.linspace(0.5, 1.5, y.size).reshape(y.shape))
        return T.mean(T.mul(y, wgt), tuple(range(y.ndim)))

    report = T.grad_check(f, named, h=1e-6, tol=1e-6)
    assert report.passed, str(report)
