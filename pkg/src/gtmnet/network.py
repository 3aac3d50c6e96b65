"""Staged video network: tubelet embedding, four block stages with spatial
downsampling between them, global average pooling, and a linear head.

Geometry contract: clips are (..., H, W, T, 3) with H and W divisible by 32
and T divisible by 4.  The embedding takes overlapped 7 x 7 x 4 windows at
stride 4 (spatial zero-padding 1 before / 2 after per axis, no temporal
padding), giving an (H/4, W/4, T/4) token grid; each of the three
transitions merges 2 x 2 x 1 patches, so the last stage runs on
(H/32, W/32, T/4).

``count_params`` / ``count_flops`` are closed-form and must agree exactly
with allocation; MACs count the multiply-accumulates of linear maps only
(embedding, mixers, projections, MLPs, transitions, head) - norms,
activations and the per-channel branch blend are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .block import LN_EPS, BlockParams, block_forward
from .errors import ConfigError, ShapeError
from .gtm import GtmConfig, GtmWeights, alloc_gtm_weights, gtm_flop_count, gtm_param_count
from .mixing import MixingParams
from .tensor import Tensor

EMBED_WINDOW = (7, 7, 4)
EMBED_STRIDE = (4, 4, 4)
SPATIAL_PAD = (1, 2)  # before, after - on each of H and W
IN_CHANNELS = 3
PATCH_DIM = EMBED_WINDOW[0] * EMBED_WINDOW[1] * EMBED_WINDOW[2] * IN_CHANNELS  # 588

VARIANTS = {
    "XS": ((64, 128, 320, 512), (2, 2, 4, 2)),
    "S": ((64, 128, 320, 512), (2, 3, 10, 3)),
    "M": ((64, 128, 320, 512), (3, 4, 18, 3)),
    "L": ((96, 192, 384, 768), (3, 4, 24, 3)),
}


@dataclass
class NetworkSpec:
    channels: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    gtm_per_block: list[GtmConfig]
    height: int
    width: int
    frames: int
    num_classes: int
    expansion: int = 4
    drop_path_rate: float = 0.0
    head_dropout: float = 0.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ConfigError("channels and depths must each have 4 entries")
        if min(self.channels) < 1 or min(self.depths) < 1:
            raise ConfigError("channels and depths must be positive")
        if self.height % 32 or self.width % 32:
            raise ConfigError(
                f"H and W must be divisible by 32, got {self.height}x{self.width}"
            )
        if self.frames % 4:
            raise ConfigError(f"T must be divisible by 4, got {self.frames}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.expansion < 1:
            raise ConfigError("expansion must be >= 1")
        if len(self.gtm_per_block) != sum(self.depths):
            raise ConfigError(
                f"gtm_per_block has {len(self.gtm_per_block)} entries, "
                f"need {sum(self.depths)}"
            )
        t = self.time_tokens
        for i, cfg in enumerate(self.gtm_per_block):
            try:
                cfg.validate_for(t)
            except ConfigError as e:
                raise ConfigError(f"gtm_per_block[{i}]: {e}") from e
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must be in [0, 1)")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("head_dropout must be in [0, 1)")

    @property
    def time_tokens(self) -> int:
        return self.frames // 4

    def stage_grids(self) -> list[tuple[int, int, int, int]]:
        """Per-stage (h, w, t, C) token grids."""
        h, w, t = self.height // 4, self.width // 4, self.time_tokens
        grids = []
        for i, c in enumerate(self.channels):
            grids.append((h >> i, w >> i, t, c))
        return grids

    def block_configs(self) -> list[list[GtmConfig]]:
        out, i = [], 0
        for d in self.depths:
            out.append(self.gtm_per_block[i:i + d])
            i += d
        return out

    def to_json_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "depths": list(self.depths),
            "gtm_per_block": [c.to_json_dict() for c in self.gtm_per_block],
            "height": self.height,
            "width": self.width,
            "frames": self.frames,
            "num_classes": self.num_classes,
            "expansion": self.expansion,
            "drop_path_rate": self.drop_path_rate,
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(
                channels=tuple(d["channels"]),
                depths=tuple(d["depths"]),
                gtm_per_block=[GtmConfig.from_json_dict(g) for g in d["gtm_per_block"]],
                height=int(d["height"]),
                width=int(d["width"]),
                frames=int(d["frames"]),
                num_classes=int(d["num_classes"]),
                expansion=int(d.get("expansion", 4)),
                drop_path_rate=float(d.get("drop_path_rate", 0.0)),
                head_dropout=float(d.get("head_dropout", 0.0)),
            )
        except KeyError as e:
            raise ConfigError(f"network spec missing key {e}") from e


def default_gtm_configs(depths, frames: int, kind: str = "short_range",
                        s: int = 4, shared: bool = True) -> list[GtmConfig]:
    """One config per block; S is capped at T/4 so small clips stay valid."""
    t = frames // 4
    size = min(s, t)
    while t % size:
        size -= 1
    return [GtmConfig(kind, size, shared=shared) for _ in range(sum(depths))]


def make_variant(name: str, height: int = 64, width: int = 64, frames: int = 16,
                 num_classes: int = 4, channels=None, depths=None,
                 **overrides) -> NetworkSpec:
    """Catalog constructor: XS / S / M / L, or 'custom' with explicit sizes."""
    if name in VARIANTS:
        channels, depths = VARIANTS[name]
    elif name == "custom":
        if channels is None or depths is None:
            raise ConfigError("custom variant needs channels and depths")
    else:
        raise ConfigError(
            f"unknown variant '{name}'; valid: {sorted(VARIANTS)} or 'custom'"
        )
    gtm_cfgs = overrides.pop("gtm_per_block", None)
    if gtm_cfgs is None:
        gtm_cfgs = default_gtm_configs(depths, frames)
    return NetworkSpec(
        channels=tuple(channels),
        depths=tuple(depths),
        gtm_per_block=list(gtm_cfgs),
        height=height,
        width=width,
        frames=frames,
        num_classes=num_classes,
        **overrides,
    )


@dataclass
class TransitionParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    merge_w: Tensor


@dataclass
class ModelParams:
    embed_w: Tensor
    embed_b: Tensor
    stages: list[list[BlockParams]]
    transitions: list[TransitionParams]
    head_w: Tensor
    head_b: Tensor
    pool_s: int | None = None  # set for supernet weight pools

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Canonical (path, tensor) pairs; stage/block indices are 1-based."""
        out = [("embed.w", self.embed_w), ("embed.b", self.embed_b)]
        for si, blocks in enumerate(self.stages, start=1):
            for bi, bp in enumerate(blocks, start=1):
                p = f"stage{si}.block{bi}."
                out.append((p + "ln1.gamma", bp.ln1_gamma))
                out.append((p + "ln1.beta", bp.ln1_beta))
                mp = bp.mixing
                for label, gw in (("h_weights", mp.h_weights), ("w_weights", mp.w_weights),
                                  ("t_weights", mp.t_weights)):
                    for dt in sorted(gw.offsets):
                        name = "w_0" if dt == 0 else f"w_{dt:+d}"
                        out.append((f"{p}mixing.{label}.{name}", gw.offsets[dt]))
                    if gw.w_dense is not None:
                        out.append((f"{p}mixing.{label}.w_dense", gw.w_dense))
                    out.append((f"{p}mixing.{label}.bias", gw.bias))
                out.append((p + "mixing.fuse_logits", mp.fuse_logits))
                out.append((p + "mixing.proj.w", mp.proj_w))
                out.append((p + "mixing.proj.b", mp.proj_b))
                out.append((p + "ln2.gamma", bp.ln2_gamma))
                out.append((p + "ln2.beta", bp.ln2_beta))
                out.append((p + "mlp.fc1.w", bp.fc1_w))
                out.append((p + "mlp.fc1.b", bp.fc1_b))
                out.append((p + "mlp.fc2.w", bp.fc2_w))
                out.append((p + "mlp.fc2.b", bp.fc2_b))
        for ti, tp in enumerate(self.transitions, start=1):
            out.append((f"transition{ti}.norm.gamma", tp.norm_gamma))
            out.append((f"transition{ti}.norm.beta", tp.norm_beta))
            out.append((f"transition{ti}.merge.w", tp.merge_w))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out


def spatial_windows(spec: NetworkSpec) -> list[tuple[int, int]]:
    """Default per-stage spatial mixing windows: min(7, extent)."""
    return [(min(7, h), min(7, w)) for h, w, _, _ in spec.stage_grids()]


def init_params(spec: NetworkSpec, rng, dtype: str = "f32",
                pool_s: int | None = None) -> ModelParams:
    """Allocate all parameters.

    ``rng=None`` allocates zeros (checkpoint loading); otherwise matrices
    draw from N(0, 1/fan_in), biases and fusion logits start at zero, and
    norms start at identity.  ``pool_s`` switches every time mixer to a
    shared weight pool covering candidates up to that group size.
    """
    np_dtype = tz.DTYPES[dtype]

    def mat(shape, fan_in):
        if rng is None:
            return Tensor(np.zeros(shape, dtype=np_dtype), requires_grad=True)
        return Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np_dtype),
            requires_grad=True,
        )

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np_dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=np_dtype), requires_grad=True)

    c1 = spec.channels[0]
    embed_w = mat((PATCH_DIM, c1), PATCH_DIM)
    embed_b = zeros(c1)

    stages: list[list[BlockParams]] = []
    windows = spatial_windows(spec)
    cfg_by_stage = spec.block_configs()
    for (h, w, t, c), (s_h, s_w), cfgs in zip(spec.stage_grids(), windows, cfg_by_stage):
        blocks = []
        for cfg in cfgs:
            def axis_weights(s_axis):
                return GtmWeights(
                    offsets={i: mat((c, c), s_axis * c) for i in range(s_axis)},
                    bias=zeros(c),
                )
            t_weights = alloc_gtm_weights(cfg, c, rng, dtype=dtype, pool_s=pool_s)
            mixing = MixingParams(
                s_h=s_h,
                s_w=s_w,
                h_weights=axis_weights(s_h),
                w_weights=axis_weights(s_w),
                t_cfg=cfg,
                t_weights=t_weights,
                fuse_logits=zeros((3, c)),
                proj_w=mat((c, c), c),
                proj_b=zeros(c),
            )
            r = spec.expansion
            blocks.append(BlockParams(
                ln1_gamma=ones(c), ln1_beta=zeros(c),
                mixing=mixing,
                ln2_gamma=ones(c), ln2_beta=zeros(c),
                fc1_w=mat((c, r * c), c), fc1_b=zeros(r * c),
                fc2_w=mat((r * c, c), r * c), fc2_b=zeros(c),
                drop_path_rate=spec.drop_path_rate,
            ))
        stages.append(blocks)

    transitions = []
    for i in range(3):
        c_in, c_out = spec.channels[i], spec.channels[i + 1]
        transitions.append(TransitionParams(
            norm_gamma=ones(4 * c_in),
            norm_beta=zeros(4 * c_in),
            merge_w=mat((4 * c_in, c_out), 4 * c_in),
        ))

    head_w = mat((spec.channels[3], spec.num_classes), spec.channels[3])
    head_b = zeros(spec.num_classes)
    return ModelParams(embed_w, embed_b, stages, transitions, head_w, head_b,
                       pool_s=pool_s)


def _window_indices(n_out: int, stride: int, win: int) -> np.ndarray:
    return ((np.arange(n_out)[:, None] * stride) + np.arange(win)[None, :]).reshape(-1)


def tubelet_embed(x: Tensor, embed_w: Tensor, embed_b: Tensor) -> Tensor:
    """Overlapped 7x7x4 windows at stride 4, flattened and projected.

    Window contents flatten in (dh, dw, dt, channel) order, matching the
    (588, C1) kernel layout.
    """
    if x.ndim < 4 or x.shape[-1] != IN_CHANNELS:
        raise ConfigError(f"clips must end in (H, W, T, {IN_CHANNELS}), got {x.shape}")
    hh, ww, tt = x.shape[-4], x.shape[-3], x.shape[-2]
    if hh % 4 or ww % 4 or tt % 4:
        raise ConfigError(f"embedding needs H, W, T divisible by 4, got {hh}x{ww}x{tt}")
    h4, w4, t4 = hh // 4, ww // 4, tt // 4
    lead = x.shape[:-4]

    xp = tz.pad_axes(x, {-4: SPATIAL_PAD, -3: SPATIAL_PAD})
    z = tz.take(xp, _window_indices(h4, 4, 7), axis=-4)
    z = tz.reshape(z, lead + (h4, 7, ww + 3, tt, IN_CHANNELS))
    z = tz.take(z, _window_indices(w4, 4, 7), axis=-3)
    z = tz.reshape(z, lead + (h4, 7, w4, 7, tt, IN_CHANNELS))
    z = tz.take(z, _window_indices(t4, 4, 4), axis=-2)
    z = tz.reshape(z, lead + (h4, 7, w4, 7, t4, 4, IN_CHANNELS))
    z = tz.permute_last(z, (0, 2, 4, 1, 3, 5, 6))
    z = tz.reshape(z, lead + (h4, w4, t4, PATCH_DIM))
    return tz.add(tz.matmul(z, embed_w), embed_b)


def stage_transition(x: Tensor, tp: TransitionParams) -> Tensor:
    """Merge non-overlapping 2x2x1 patches, normalise, project channels."""
    h, w, t, c = x.shape[-4:]
    if h % 2 or w % 2:
        raise ConfigError(f"transition needs even spatial extents, got {h}x{w}")
    lead = x.shape[:-4]
    z = tz.reshape(x, lead + (h // 2, 2, w // 2, 2, t, c))
    z = tz.permute_last(z, (0, 2, 4, 1, 3, 5))
    z = tz.reshape(z, lead + (h // 2, w // 2, t, 4 * c))
    z = tz.layer_norm(z, tp.norm_gamma, tp.norm_beta, LN_EPS)
    return tz.matmul(z, tp.merge_w)


def network_forward(x: Tensor, spec: NetworkSpec, params: ModelParams,
                    training: bool = False, rng=None,
                    gtm_override: list[GtmConfig] | None = None,
                    record: list | None = None) -> Tensor:
    """Logits for clips ``x`` shaped (..., H, W, T, 3).

    ``gtm_override`` swaps the per-block time-mix configuration without
    touching the weights (the weight-sharing search path).  ``record``
    collects (name, Tensor) activation taps when provided.
    """
    if x.shape[-4:] != (spec.height, spec.width, spec.frames, IN_CHANNELS):
        raise ConfigError(
            f"clip trailing shape {x.shape[-4:]} does not match spec geometry "
            f"({spec.height}, {spec.width}, {spec.frames}, {IN_CHANNELS})"
        )
    if gtm_override is not None and len(gtm_override) != sum(spec.depths):
        raise ConfigError(
            f"gtm_override has {len(gtm_override)} entries, need {sum(spec.depths)}"
        )

    def tap(name, value):
        if record is not None:
            record.append((name, value))

    z = tubelet_embed(x, params.embed_w, params.embed_b)
    tap("embed", z)
    flat_idx = 0
    t_tokens = spec.time_tokens
    for si, blocks in enumerate(params.stages):
        for bi, bp in enumerate(blocks):
            t_cfg = None
            if gtm_override is not None:
                t_cfg = gtm_override[flat_idx]
                t_cfg.validate_for(t_tokens)
            z = block_forward(z, bp, training=training, rng=rng, t_cfg=t_cfg)
            tap(f"stage{si + 1}.block{bi + 1}", z)
            flat_idx += 1
        if si < 3:
            z = stage_transition(z, params.transitions[si])
            tap(f"transition{si + 1}", z)
    pooled = tz.mean(z, (-4, -3, -2))
    tap("pooled", pooled)
    if training and spec.head_dropout > 0.0:
        if rng is None:
            raise ConfigError("head_dropout needs an rng stream during training")
        keep = (rng.random(pooled.shape) >= spec.head_dropout).astype(pooled.data.dtype)
        pooled = tz.mul(pooled, Tensor(keep / (1.0 - spec.head_dropout)))
    logits = tz.add(tz.matmul(pooled, params.head_w), params.head_b)
    tap("logits", logits)
    return logits


def complexity_report(spec: NetworkSpec) -> dict:
    """Exact parameter and MAC accounting, with per-stage / per-block detail."""
    windows = spatial_windows(spec)
    cfg_by_stage = spec.block_configs()
    r = spec.expansion
    c1 = spec.channels[0]
    h4, w4, t4 = spec.height // 4, spec.width // 4, spec.time_tokens

    embed = {
        "params": PATCH_DIM * c1 + c1,
        "macs": h4 * w4 * t4 * PATCH_DIM * c1,
    }
    stages = []
    per_block_gtm = []
    for si, ((h, w, t, c), (s_h, s_w), cfgs) in enumerate(
        zip(spec.stage_grids(), windows, cfg_by_stage), start=1
    ):
        tokens = h * w * t
        blocks = []
        for bi, cfg in enumerate(cfgs, start=1):
            gtm_params = gtm_param_count(cfg, c)
            gtm_macs = gtm_flop_count(cfg, h, w, t, c)
            p = (
                2 * c                      # ln1
                + s_h * c * c + c          # H mixer
                + s_w * c * c + c          # W mixer
                + gtm_params
                + 3 * c                    # fusion logits
                + c * c + c                # projection
                + 2 * c                    # ln2
                + c * r * c + r * c        # fc1
                + r * c * c + c            # fc2
            )
            m = (
                tokens * s_h * c * c
                + tokens * s_w * c * c
                + gtm_macs
                + tokens * c * c
                + 2 * tokens * r * c * c
            )
            blocks.append({"params": p, "macs": m,
                           "gtm": {"kind": cfg.kind, "s": cfg.s, "shared": cfg.shared,
                                   "params": gtm_params, "macs": gtm_macs}})
            per_block_gtm.append({"stage": si, "block": bi, "kind": cfg.kind,
                                  "s": cfg.s, "params": gtm_params, "macs": gtm_macs})
        stages.append({
            "grid": [h, w, t, c],
            "blocks": blocks,
            "params": sum(b["params"] for b in blocks),
            "macs": sum(b["macs"] for b in blocks),
        })

    transitions = []
    for i in range(3):
        c_in, c_out = spec.channels[i], spec.channels[i + 1]
        h, w, t, _ = spec.stage_grids()[i]
        transitions.append({
            "params": 2 * 4 * c_in + 4 * c_in * c_out,
            "macs": (h // 2) * (w // 2) * t * 4 * c_in * c_out,
        })

    head = {
        "params": spec.channels[3] * spec.num_classes + spec.num_classes,
        "macs": spec.channels[3] * spec.num_classes,
    }
    total_params = (embed["params"] + sum(s["params"] for s in stages)
                    + sum(t["params"] for t in transitions) + head["params"])
    total_macs = (embed["macs"] + sum(s["macs"] for s in stages)
                  + sum(t["macs"] for t in transitions) + head["macs"])
    return {
        "params": total_params,
        "macs": total_macs,
        "embed": embed,
        "per_stage": stages,
        "transitions": transitions,
        "head": head,
        "per_block_gtm": per_block_gtm,
    }


def count_params(spec: NetworkSpec) -> int:
    return complexity_report(spec)["params"]


def count_flops(spec: NetworkSpec) -> int:
    """Total multiply-accumulates for one clip."""
    return complexity_report(spec)["macs"]


@dataclass
class Reference2D:
    """A 2-D (per-frame) counterpart: 7x7 patch-embed kernel plus one C x C
    channel-mix matrix per block, used to seed the 3-D model."""

    patch_embed: np.ndarray               # (7*7*3, C1)
    block_channel_mix: list[np.ndarray]   # one (C, C) per block

    @classmethod
    def random(cls, spec: NetworkSpec, rng) -> "Reference2D":
        dim2d = EMBED_WINDOW[0] * EMBED_WINDOW[1] * IN_CHANNELS
        mats = []
        for (_, _, _, c), d in zip(spec.stage_grids(), spec.depths):
            mats.extend(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c)) for _ in range(d))
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim2d), size=(dim2d, spec.channels[0])),
                   mats)


CENTER_FRAME = 2  # temporal index receiving the 2-D kernel (window is 0..3)


def center_init(spec: NetworkSpec, reference: Reference2D, rng,
                dtype: str = "f64") -> ModelParams:
    """Seed the 3-D model so it initially ignores time.

    The embedding kernel places the 2-D 7x7 kernel at temporal offset 2 and
    zeros the other three; every time mixer gets ``w_0`` from the reference
    channel mix and zero for the remaining offsets.  Activations on a
    constant-in-time clip then stay constant in time at every layer, while
    the zeroed offsets still receive nonzero gradients.
    """
    dim2d = EMBED_WINDOW[0] * EMBED_WINDOW[1] * IN_CHANNELS
    c1 = spec.channels[0]
    if reference.patch_embed.shape != (dim2d, c1):
        raise ShapeError(
            f"2-D patch embed must be ({dim2d}, {c1}), got {reference.patch_embed.shape}"
        )
    if len(reference.block_channel_mix) != sum(spec.depths):
        raise ShapeError(
            f"need {sum(spec.depths)} channel-mix matrices, "
            f"got {len(reference.block_channel_mix)}"
        )
    params = init_params(spec, rng, dtype=dtype)
    np_dtype = tz.DTYPES[dtype]

    kernel = np.zeros((PATCH_DIM, c1), dtype=np_dtype)
    for dh in range(7):
        for dw in range(7):
            for ch in range(IN_CHANNELS):
                flat3 = ((dh * 7 + dw) * 4 + CENTER_FRAME) * IN_CHANNELS + ch
                flat2 = (dh * 7 + dw) * IN_CHANNELS + ch
                kernel[flat3] = reference.patch_embed[flat2]
    params.embed_w.data[:] = kernel

    flat = 0
    for blocks, (_, _, _, c) in zip(params.stages, spec.stage_grids()):
        for bp in blocks:
            ref = np.asarray(reference.block_channel_mix[flat], dtype=np_dtype)
            if ref.shape != (c, c):
                raise ShapeError(f"block {flat}: channel mix must be ({c}, {c}), got {ref.shape}")
            gw = bp.mixing.t_weights
            if gw.w_dense is not None:
                gw.w_dense.data[:] = 0.0
                s = bp.mixing.t_cfg.s
                for j in range(s):
                    gw.w_dense.data[j * c:(j + 1) * c, j * c:(j + 1) * c] = ref
            else:
                for dt, tensor in gw.offsets.items():
                    tensor.data[:] = ref if dt == 0 else 0.0
            flat += 1
    return params


def time_constancy_report(spec: NetworkSpec, params: ModelParams,
                          clip: Tensor) -> list[tuple[str, float]]:
    """Max deviation from time-constancy of every tapped activation."""
    record: list = []
    with tz.no_grad():
        network_forward(clip, spec, params, record=record)
    out = []
    for name, act in record:
        a = act.data
        if a.ndim >= 2 and name not in ("pooled", "logits"):
            dev = float(np.abs(a - a.take([0], axis=-2)).max())
        else:
            dev = 0.0
        out.append((name, dev))
    return out
