"""Decomposed token mixing: two spatial circulant mixers, one grouped time
mixer, and a learned per-channel fusion.

The H and W branches reuse the shift_token circulant form along their own
axes (static learnable taps; window capped at the axis extent).  The three
branch outputs are blended with per-channel softmax weights taken from a
(3, C) logit table - initialised to zero, so an untuned block reduces
exactly to ``FC((X_H + X_W + X_T) / 3)`` - and passed through a final C x C
projection.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .gtm import GtmConfig, GtmWeights, circulant_mix, gtm_apply
from .tensor import Tensor

_AXES = {"h": -4, "w": -3}


@dataclass
class MixingParams:
    s_h: int
    s_w: int
    h_weights: GtmWeights
    w_weights: GtmWeights
    t_cfg: GtmConfig
    t_weights: GtmWeights
    fuse_logits: Tensor  # (3, C) rows: H, W, T
    proj_w: Tensor
    proj_b: Tensor


def axis_mix(x: Tensor, axis: str, weights: GtmWeights, s_axis: int) -> Tensor:
    """Circulant mix along the H or W axis with taps ``w_0 .. w_{S-1}``."""
    if axis not in _AXES:
        raise ConfigError(f"axis must be 'h' or 'w', got {axis!r}")
    ax = _AXES[axis]
    extent = x.shape[ax]
    if s_axis < 1 or s_axis > extent:
        raise ConfigError(f"axis window {s_axis} outside [1, {extent}] on '{axis}'")
    taps = [weights.offsets[i] for i in range(s_axis)]
    return circulant_mix(x, ax, taps, weights.bias)


def token_mixing_forward(x: Tensor, params: MixingParams,
                         t_cfg: GtmConfig | None = None) -> Tensor:
    """Mix tokens along H, W and T, fuse the branches, project channels."""
    c = x.shape[-1]
    if params.fuse_logits.data.shape != (3, c):
        raise ShapeError(
            f"fuse_logits must be (3, {c}), got {params.fuse_logits.shape}"
        )
    xh = axis_mix(x, "h", params.h_weights, params.s_h)
    xw = axis_mix(x, "w", params.w_weights, params.s_w)
    xt = gtm_apply(t_cfg if t_cfg is not None else params.t_cfg, params.t_weights, x)
    betas = tz.softmax(params.fuse_logits, axis=0)
    bh = tz.reshape(tz.take(betas, [0], axis=0), (c,))
    bw = tz.reshape(tz.take(betas, [1], axis=0), (c,))
    bt = tz.reshape(tz.take(betas, [2], axis=0), (c,))
    fused = tz.add(tz.add(tz.mul(xh, bh), tz.mul(xw, bw)), tz.mul(xt, bt))
    return tz.add(tz.matmul(fused, params.proj_w), params.proj_b)
