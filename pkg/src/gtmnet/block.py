"""Residual token-mixing block.

Pre-norm layout with two residual branches:

    y = token_mix(LN(x)) + x
    z = channel_mlp(LN(y)) + y

The channel MLP is ``fc2(gelu(fc1(.)))`` with a configurable expansion.
Stochastic depth drops a whole residual branch per sample with probability
``drop_path_rate`` during training, scaling survivors by ``1/(1 - rate)``
so expectations match evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError
from .mixing import MixingParams, token_mixing_forward
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mixing: MixingParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    drop_path_rate: float = 0.0


def channel_mlp_forward(x: Tensor, params: BlockParams) -> Tensor:
    h = tz.add(tz.matmul(x, params.fc1_w), params.fc1_b)
    return tz.add(tz.matmul(tz.gelu(h), params.fc2_w), params.fc2_b)


def _drop_path(branch: Tensor, rate: float, training: bool, rng) -> Tensor:
    if not training or rate <= 0.0:
        return branch
    if rng is None:
        raise ConfigError("drop_path needs an rng stream during training")
    lead = branch.shape[:-4]
    keep = (rng.random(lead + (1, 1, 1, 1)) >= rate).astype(branch.data.dtype)
    scale = Tensor(keep / (1.0 - rate))
    return tz.mul(branch, scale)


def block_forward(x: Tensor, params: BlockParams, training: bool = False,
                  rng=None, t_cfg=None) -> Tensor:
    mixed = token_mixing_forward(
        tz.layer_norm(x, params.ln1_gamma, params.ln1_beta, LN_EPS),
        params.mixing,
        t_cfg=t_cfg,
    )
    y = tz.add(_drop_path(mixed, params.drop_path_rate, training, rng), x)
    refined = channel_mlp_forward(
        tz.layer_norm(y, params.ln2_gamma, params.ln2_beta, LN_EPS), params
    )
    return tz.add(_drop_path(refined, params.drop_path_rate, training, rng), y)
