"""Training loop: AdamW with decoupled weight decay, linear warmup into a
cosine schedule, and per-epoch validation.

Randomness is split into four independent streams spawned from the config
seed - batch shuffling, per-iteration architecture assignment, stochastic
depth / dropout masks, and a reserved evaluation stream.  Because the
streams never interact, training a weight-shared supernet whose sampler
always returns the fixed architecture reproduces plain training exactly,
trace row for trace row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DivergenceError
from .network import ModelParams, NetworkSpec, network_forward
from .tensor import Tensor


@dataclass
class ClipSet:
    """A labelled clip collection: ``clips`` (N, H, W, T, 3), ``labels`` (N,)."""

    clips: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.clips) != len(self.labels):
            raise ConfigError(
                f"{len(self.clips)} clips vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    label_smoothing: float = 0.0
    seed: int = 0
    precision: str = "f32"
    target_val_acc: float | None = None  # percent; stop once reached

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.precision not in tz.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(tz.DTYPES)}")
        if self.target_val_acc is not None and not 0 < self.target_val_acc <= 100:
            raise ConfigError("target_val_acc is a percentage in (0, 100]")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs,
            "label_smoothing": self.label_smoothing,
            "seed": self.seed,
            "precision": self.precision,
            "target_val_acc": self.target_val_acc,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(
                epochs=int(d["epochs"]),
                batch_size=int(d["batch_size"]),
                base_lr=float(d.get("base_lr", 5e-4)),
                weight_decay=float(d.get("weight_decay", 0.05)),
                warmup_epochs=int(d.get("warmup_epochs", 1)),
                label_smoothing=float(d.get("label_smoothing", 0.0)),
                seed=int(d.get("seed", 0)),
                precision=str(d.get("precision", "f32")),
                target_val_acc=(None if d.get("target_val_acc") is None
                                else float(d["target_val_acc"])),
            )
        except KeyError as e:
            raise ConfigError(f"train config missing key {e}") from e


def lr_at(base_lr: float, step: int, warmup_steps: int, total_steps: int) -> float:
    """Learning rate at 1-based ``step``: linear ramp, then cosine to zero."""
    if step <= warmup_steps:
        return base_lr * step / max(1, warmup_steps)
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adamw_step(named_params, state: AdamWState, lr: float,
               weight_decay: float = 0.0, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-decay Adam update.

    Parameters whose ``grad`` is None are skipped entirely - neither decay
    nor moment updates - so pooled weights that a sampled architecture never
    touched stay put.  Decay multiplies the parameter by ``1 - lr * wd``
    before the moment update.
    """
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        t = state.steps.get(name, 0) + 1
        state.steps[name] = t
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_grads(named_params) -> None:
    for _, p in named_params:
        p.grad = None


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainResult:
    trace: list[TraceRow]
    final_val_acc: float
    stopped_early: bool
    global_steps: int


def evaluate(spec: NetworkSpec, params: ModelParams, data: ClipSet,
             batch_size: int = 64,
             gtm_override=None) -> float:
    """Top-1 accuracy in percent, computed in eval mode."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty clip set")
    dtype = params.embed_w.data.dtype
    hits = 0
    with tz.no_grad():
        for lo in range(0, len(data), batch_size):
            batch = data.clips[lo:lo + batch_size].astype(dtype, copy=False)
            logits = network_forward(Tensor(batch), spec, params,
                                     gtm_override=gtm_override).data
            hits += int((logits.argmax(axis=-1) == data.labels[lo:lo + batch_size]).sum())
    return 100.0 * hits / len(data)


def train_model(spec: NetworkSpec, params: ModelParams, train_data: ClipSet,
                val_data: ClipSet, cfg: TrainConfig,
                gtm_sampler=None, on_epoch=None) -> TrainResult:
    """Run the full loop; returns the epoch trace.

    ``gtm_sampler(rng)``, when given, is called once per iteration and must
    return a per-block configuration list that the forward pass routes
    through the shared weights.  ``on_epoch(row)`` fires after each epoch's
    validation pass.  A non-finite loss aborts with ``DivergenceError``
    carrying the rows recorded so far.
    """
    want_dtype = tz.DTYPES[cfg.precision]
    if params.embed_w.data.dtype != want_dtype:
        raise ConfigError(
            f"params are {params.embed_w.data.dtype} but config wants {cfg.precision}"
        )
    if len(train_data) == 0:
        raise ConfigError("cannot train on an empty clip set")

    shuffle_ss, assign_ss, drop_ss, _eval_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    assign_rng = np.random.default_rng(assign_ss)
    drop_rng = np.random.default_rng(drop_ss)

    named = params.named_parameters()
    state = AdamWState()
    n = len(train_data)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    trace: list[TraceRow] = []
    global_step = 0
    stopped_early = False
    needs_drop_rng = spec.drop_path_rate > 0 or spec.head_dropout > 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        lr = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = Tensor(train_data.clips[idx].astype(want_dtype, copy=False))
            labels = train_data.labels[idx]
            override = gtm_sampler(assign_rng) if gtm_sampler is not None else None

            global_step += 1
            lr = lr_at(cfg.base_lr, global_step, warmup_steps, total_steps)

            zero_grads(named)
            logits = network_forward(batch, spec, params, training=True,
                                     rng=drop_rng if needs_drop_rng else None,
                                     gtm_override=override)
            loss = tz.cross_entropy(logits, labels,
                                    label_smoothing=cfg.label_smoothing)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {global_step}",
                    trace=trace,
                )
            loss.backward()
            adamw_step(named, state, lr, weight_decay=cfg.weight_decay)
            loss_sum += loss_val * len(idx)

        val_acc = evaluate(spec, params, val_data, batch_size=cfg.batch_size)
        trace.append(TraceRow(epoch, loss_sum / n, val_acc, lr))
        if on_epoch is not None:
            on_epoch(trace[-1])
        if cfg.target_val_acc is not None and val_acc >= cfg.target_val_acc:
            stopped_early = True
            break

    return TrainResult(
        trace=trace,
        final_val_acc=trace[-1].val_acc,
        stopped_early=stopped_early,
        global_steps=global_step,
    )
