"""Grouped time-mixing operators.

All four operators mix tokens along the time axis inside groups of size S
with one linear map; they differ only in how the T tokens are partitioned
(or, for ``shift_token``, in using a circulant structure instead of a
partition):

* ``short_range``  - contiguous groups ``{gS, ..., gS+S-1}``.
* ``long_range``   - strided groups ``{g, g + T/S, g + 2T/S, ...}``; members
  sit ``T/S`` steps apart.
* ``shift_window`` - contiguous groups after a circular shift of the time
  axis by ``S//2``, shifted back afterwards.
* ``shift_token``  - ``y_t = sum_i  x_{(t-i) mod T} @ w_i + b`` for
  ``i in 0..S-1`` (a row-circulant map; no partition).

With weight sharing the in-group matrix is block-Toeplitz: the (j, k) block
is ``w_{k-j}`` where ``w_dt`` maps the token at in-group position ``j`` to
position ``j + dt``.  Without sharing each group applies one dense
``(S*C, S*C)`` matrix.  ``full`` is the S = T degenerate case kept as an
oracle baseline.

``build_dense_time_matrix`` materialises any configuration as one
``(T*C, T*C)`` matrix by direct group enumeration - deliberately without
reusing the efficient reshape/roll paths - so the two routes check each
other.  Row vectors multiply from the left: ``y_flat = x_flat @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .tensor import Tensor

KINDS = ("short_range", "long_range", "shift_window", "shift_token")
ALL_KINDS = KINDS + ("full",)
# Fixed tie-break order used by architecture search.
KIND_ORDER = {"short_range": 0, "long_range": 1, "shift_window": 2, "shift_token": 3}

_TIME_AXIS = -2
_BLOCK_KINDS = ("short_range", "long_range", "shift_window", "full")


@dataclass(frozen=True)
class GtmConfig:
    """One operator choice: kind, group size, weight sharing."""

    kind: str
    s: int
    shared: bool = True

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError(f"unknown gtm kind '{self.kind}'; valid: {ALL_KINDS}")
        if self.s < 1:
            raise ConfigError(f"gtm group size must be >= 1, got {self.s}")

    def validate_for(self, t: int) -> None:
        """Check this config against a time extent of ``t`` tokens."""
        if self.kind == "full":
            if self.s != t:
                raise ConfigError(f"full requires S == T, got S={self.s}, T={t}")
        elif self.kind == "shift_token":
            if self.s > t:
                raise ConfigError(f"shift_token needs S <= T, got S={self.s}, T={t}")
        else:
            if self.s > t or t % self.s != 0:
                raise ConfigError(
                    f"{self.kind} needs S dividing T, got S={self.s}, T={t}"
                )

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "s": self.s, "shared": self.shared}

    @classmethod
    def from_json_dict(cls, d: dict) -> "GtmConfig":
        return cls(str(d["kind"]), int(d["s"]), bool(d.get("shared", True)))


@dataclass
class GtmWeights:
    """Parameters for one operator instance.

    ``offsets`` holds the shared per-offset matrices ``w_dt`` (C, C); block
    kinds use ``dt in [-(S-1), S-1]``, shift_token uses ``dt in [0, S-1]``.
    A supernet pool simply allocates the widest range ``+/-(S_max - 1)`` so
    every candidate below ``S_max`` can execute from the same instance.
    ``w_dense`` replaces ``offsets`` when sharing is off; ``bias`` is (C,)
    shared / circulant and (S*C,) per group when sharing is off.
    """

    offsets: dict[int, Tensor] = field(default_factory=dict)
    w_dense: Tensor | None = None
    bias: Tensor | None = None

    @property
    def channels(self) -> int:
        if self.offsets:
            return self.offsets[min(self.offsets)].data.shape[0]
        return self.w_dense.data.shape[0] if self.w_dense is not None else 0


def alloc_gtm_weights(cfg: GtmConfig, c: int, rng, dtype: str = "f32",
                      pool_s: int | None = None) -> GtmWeights:
    """Allocate weights for ``cfg`` at channel width ``c``.

    ``pool_s`` widens the shared offset range to ``+/-(pool_s - 1)`` so the
    instance can serve any kind/size up to ``pool_s`` (weight-sharing
    supernets); it is rejected for unshared configs.
    """
    np_dtype = tz.DTYPES[dtype]

    def init(shape, fan_in):
        if rng is None:
            return Tensor(np.zeros(shape, dtype=np_dtype), requires_grad=True)
        data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np_dtype)
        return Tensor(data, requires_grad=True)

    if cfg.kind in _BLOCK_KINDS and not cfg.shared:
        if pool_s is not None:
            raise ConfigError("a weight pool requires shared=True")
        sc = cfg.s * c
        return GtmWeights(
            w_dense=init((sc, sc), sc),
            bias=Tensor(np.zeros(sc, dtype=np_dtype), requires_grad=True),
        )
    span = pool_s if pool_s is not None else cfg.s
    if cfg.kind == "shift_token" and pool_s is None:
        dts = range(0, span)
    else:
        dts = range(-(span - 1), span)
    offsets = {dt: init((c, c), span * c) for dt in dts}
    bias = Tensor(np.zeros(c, dtype=np_dtype), requires_grad=True)
    return GtmWeights(offsets=offsets, bias=bias)


def _required_offsets(cfg: GtmConfig) -> range:
    if cfg.kind == "shift_token":
        return range(0, cfg.s)
    return range(-(cfg.s - 1), cfg.s)


def _check_weights(cfg: GtmConfig, weights: GtmWeights, c: int) -> None:
    if cfg.kind == "shift_token" or cfg.shared:
        missing = [dt for dt in _required_offsets(cfg) if dt not in weights.offsets]
        if missing:
            raise ConfigError(f"{cfg.kind} S={cfg.s} missing offsets {missing}")
        if weights.channels != c:
            raise ShapeError(
                f"gtm weights are {weights.channels}-channel, input has {c} channels"
            )
        if weights.bias.data.shape != (c,):
            raise ShapeError(f"shared gtm bias must be ({c},), got {weights.bias.shape}")
    else:
        sc = cfg.s * c
        if weights.w_dense is None or weights.w_dense.data.shape != (sc, sc):
            got = None if weights.w_dense is None else weights.w_dense.shape
            raise ShapeError(f"unshared gtm needs a ({sc}, {sc}) matrix, got {got}")
        if weights.bias.data.shape != (sc,):
            raise ShapeError(f"unshared gtm bias must be ({sc},), got {weights.bias.shape}")


def _toeplitz_matrix(offsets: dict[int, Tensor], s: int) -> Tensor:
    """Assemble the shared (S*C, S*C) block-Toeplitz matrix from w_dt."""
    rows = [tz.concat([offsets[k - j] for k in range(s)], axis=1) for j in range(s)]
    return tz.concat(rows, axis=0)


def circulant_mix(x: Tensor, axis: int, taps: list[Tensor], bias: Tensor) -> Tensor:
    """``y = sum_i roll(x, axis, i) @ taps[i] + bias`` along ``axis``.

    The shift_token operator and the spatial H/W mixers all share this form.
    """
    y = tz.matmul(x, taps[0])
    for i in range(1, len(taps)):
        y = tz.add(y, tz.matmul(tz.roll(x, axis, i), taps[i]))
    return tz.add(y, bias)


def gtm_apply(cfg: GtmConfig, weights: GtmWeights, x: Tensor) -> Tensor:
    """Apply the configured operator along the time axis of ``x``.

    ``x`` carries (..., H, W, T, C); any leading axes pass through.
    """
    if x.ndim < 4:
        raise ShapeError(f"gtm_apply expects at least (H, W, T, C), got {x.shape}")
    t = x.shape[_TIME_AXIS]
    c = x.shape[-1]
    cfg.validate_for(t)
    _check_weights(cfg, weights, c)

    if cfg.kind == "shift_token":
        taps = [weights.offsets[i] for i in range(cfg.s)]
        return circulant_mix(x, _TIME_AXIS, taps, weights.bias)

    s = cfg.s
    g = t // s
    lead = x.shape[:-2]
    if cfg.shared:
        w_s = _toeplitz_matrix(weights.offsets, s)
    else:
        w_s = weights.w_dense

    def group_linear(z: Tensor) -> Tensor:
        # z: (..., T, C) with groups contiguous along time.
        zg = tz.reshape(z, lead + (g, s * c))
        yg = tz.matmul(zg, w_s)
        if not cfg.shared:
            yg = tz.add(yg, weights.bias)
        return tz.reshape(yg, lead + (t, c))

    if cfg.kind in ("short_range", "full"):
        y = group_linear(x)
    elif cfg.kind == "long_range":
        zr = tz.reshape(x, lead + (s, g, c))
        zt = tz.permute_last(zr, (1, 0, 2))
        zt = tz.reshape(zt, lead + (t, c))
        yt = group_linear(zt)
        yr = tz.reshape(yt, lead + (g, s, c))
        yr = tz.permute_last(yr, (1, 0, 2))
        y = tz.reshape(yr, lead + (t, c))
    elif cfg.kind == "shift_window":
        xr = tz.roll(x, _TIME_AXIS, s // 2)
        yr = group_linear(xr)
        y = tz.roll(yr, _TIME_AXIS, -(s // 2))
    else:  # pragma: no cover - guarded by validate_for
        raise ConfigError(f"unhandled kind {cfg.kind}")

    if cfg.shared:
        y = tz.add(y, weights.bias)
    return y


def group_members(kind: str, t: int, s: int) -> list[list[int]]:
    """Absolute time indices of each group, ordered by in-group position."""
    g = t // s
    if kind in ("short_range", "full"):
        return [[gi * s + j for j in range(s)] for gi in range(g)]
    if kind == "long_range":
        return [[gi + j * g for j in range(s)] for gi in range(g)]
    if kind == "shift_window":
        k = s // 2
        return [[(gi * s + j - k) % t for j in range(s)] for gi in range(g)]
    raise ConfigError(f"{kind} has no group partition")


def _infer_channels(cfg: GtmConfig, weights: GtmWeights) -> int:
    if cfg.kind == "shift_token" or cfg.shared:
        return weights.channels
    return weights.w_dense.data.shape[0] // cfg.s


def build_dense_time_matrix(cfg: GtmConfig, t: int, weights: GtmWeights) -> np.ndarray:
    """Materialise the operator as a (T*C, T*C) matrix by group enumeration.

    Oracle route: built from the operator definitions, independent of the
    reshape/roll execution paths, so ``x_flat @ W + bias`` cross-checks
    ``gtm_apply``.
    """
    cfg.validate_for(t)
    c = _infer_channels(cfg, weights)
    _check_weights(cfg, weights, c)
    w = np.zeros((t * c, t * c), dtype=weights.bias.data.dtype)

    if cfg.kind == "shift_token":
        for tau in range(t):
            for i in range(cfg.s):
                src = (tau - i) % t
                w[src * c:(src + 1) * c, tau * c:(tau + 1) * c] += weights.offsets[i].data
        return w

    for members in group_members(cfg.kind, t, cfg.s):
        for j, t_in in enumerate(members):
            for k, t_out in enumerate(members):
                if cfg.shared:
                    block = weights.offsets[k - j].data
                else:
                    block = weights.w_dense.data[j * c:(j + 1) * c, k * c:(k + 1) * c]
                w[t_in * c:(t_in + 1) * c, t_out * c:(t_out + 1) * c] = block
    return w


def build_dense_time_bias(cfg: GtmConfig, t: int, weights: GtmWeights) -> np.ndarray:
    """Length T*C bias vector matching ``build_dense_time_matrix``."""
    cfg.validate_for(t)
    c = _infer_channels(cfg, weights)
    if cfg.kind == "shift_token" or cfg.shared:
        return np.tile(weights.bias.data, t)
    bias = np.zeros(t * c, dtype=weights.bias.data.dtype)
    for members in group_members(cfg.kind, t, cfg.s):
        for k, t_out in enumerate(members):
            bias[t_out * c:(t_out + 1) * c] = weights.bias.data[k * c:(k + 1) * c]
    return bias


def time_permutation_matrix(kind: str, t: int, s: int, c: int) -> np.ndarray:
    """(T*C, T*C) permutation P with dense(kind) == P @ dense(short) @ P.T.

    For ``long_range`` P maps time ``t`` to slot ``(t mod T/S) * S + t div T/S``;
    for ``shift_window`` it is the circular shift by ``S//2``.
    """
    p = np.zeros((t * c, t * c))
    for tt in range(t):
        if kind == "long_range":
            g = t // s
            dest = (tt % g) * s + tt // g
        elif kind == "shift_window":
            dest = (tt + s // 2) % t
        else:
            raise ConfigError(f"no permutation identity for kind '{kind}'")
        for ch in range(c):
            p[tt * c + ch, dest * c + ch] = 1.0
    return p


def gtm_param_count(cfg: GtmConfig, c: int) -> int:
    """Exact scalar count for one operator instance at width ``c``."""
    if cfg.kind == "shift_token":
        return cfg.s * c * c + c
    if cfg.shared:
        return (2 * cfg.s - 1) * c * c + c
    return cfg.s * cfg.s * c * c + cfg.s * c


def gtm_flop_count(cfg: GtmConfig, h: int, w: int, t: int, c: int) -> int:
    """Multiply-accumulates of the time mix over an (H, W, T, C) grid."""
    cfg.validate_for(t)
    if cfg.kind == "full":
        return h * w * (t * c) ** 2
    return h * w * t * cfg.s * c * c
