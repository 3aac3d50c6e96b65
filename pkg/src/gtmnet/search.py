"""Greedy architecture search over time-mixing operators with shared weights.

One supernet holds a weight pool wide enough for every candidate, gets
pretrained under uniformly random per-block assignments, and then serves as
a zero-extra-training estimator: any candidate assignment is scored by
routing the pooled weights through that configuration.

The greedy pass decides blocks front to back.  At each block every
candidate is scored as ``score = V - alpha * C`` where V is estimated
validation accuracy (percent) averaged over random completions of the
undecided suffix (the same completion draws are reused across candidates,
so comparisons are paired) and C is the network cost in GMACs with the
suffix pinned to the model's configured blocks.  Ties break toward cheaper,
then smaller S, then the fixed kind order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gtm import KIND_ORDER, KINDS, GtmConfig
from .network import NetworkSpec, count_flops


@dataclass
class SearchSpace:
    """Per-block candidate lists plus the accuracy/cost trade-off weight."""

    per_block: list[list[GtmConfig]]
    alpha: float = 5e-3

    def __post_init__(self):
        if not self.per_block or any(not c for c in self.per_block):
            raise ConfigError("every block needs at least one candidate")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        for b, cands in enumerate(self.per_block):
            for cfg in cands:
                if not cfg.shared:
                    raise ConfigError(
                        f"block {b}: candidate {cfg} is unshared; the weight "
                        f"pool only serves shared candidates"
                    )

    @property
    def s_max(self) -> int:
        return max(cfg.s for cands in self.per_block for cfg in cands)

    def validate_for(self, spec: NetworkSpec) -> None:
        if len(self.per_block) != sum(spec.depths):
            raise ConfigError(
                f"space covers {len(self.per_block)} blocks, model has "
                f"{sum(spec.depths)}"
            )
        t = spec.time_tokens
        for b, cands in enumerate(self.per_block):
            for cfg in cands:
                try:
                    cfg.validate_for(t)
                except ConfigError as e:
                    raise ConfigError(f"block {b}: {e}") from e


def make_search_space(spec: NetworkSpec, kinds=KINDS, sizes=(1, 2, 4),
                      alpha: float = 5e-3) -> SearchSpace:
    """All (kind, size) pairs valid for the model's time extent, shared.

    At S = 1 every kind degenerates to the same per-token channel map, so a
    single short_range entry stands in for all of them.
    """
    t = spec.time_tokens
    cands: list[GtmConfig] = []
    for s in sorted(set(sizes)):
        for kind in kinds:
            if s == 1 and kind != "short_range":
                continue
            cfg = GtmConfig(kind, s)
            try:
                cfg.validate_for(t)
            except ConfigError:
                continue
            cands.append(cfg)
    if not cands:
        raise ConfigError(f"no valid candidates for {t} time tokens from {sizes}")
    return SearchSpace(per_block=[list(cands) for _ in range(sum(spec.depths))],
                       alpha=alpha)


def sample_assignment(space: SearchSpace, rng) -> list[GtmConfig]:
    """Uniform per-block candidate choice."""
    return [cands[int(rng.integers(0, len(cands)))] for cands in space.per_block]


def pretrain_supernet(spec, params, train_data, val_data, cfg, space: SearchSpace,
                      on_epoch=None):
    """Train the shared pool under random assignments; returns the trace."""
    from .train import train_model

    space.validate_for(spec)
    if params.pool_s is None or params.pool_s < space.s_max:
        raise ConfigError(
            f"params pool (s={params.pool_s}) cannot serve candidates up "
            f"to S={space.s_max}"
        )
    for b, cfg_b in enumerate(spec.gtm_per_block):
        # epoch validation runs the configured blocks, so they must be
        # servable by the pool too
        if not cfg_b.shared or cfg_b.s > params.pool_s:
            raise ConfigError(
                f"block {b} default {cfg_b} is not servable by a shared "
                f"pool of width {params.pool_s}"
            )
    return train_model(spec, params, train_data, val_data, cfg,
                       gtm_sampler=lambda rng: sample_assignment(space, rng),
                       on_epoch=on_epoch)


def make_supernet_estimator(spec, params, val_data, batch_size: int = 64):
    """V estimator: validation accuracy of the pool under an assignment."""
    from .train import evaluate

    def estimator(assignment):
        return evaluate(spec, params, val_data, batch_size=batch_size,
                        gtm_override=list(assignment))

    return estimator


def assignment_macs(spec: NetworkSpec, assignment: list[GtmConfig]) -> int:
    return count_flops(dataclasses.replace(spec, gtm_per_block=list(assignment)))


@dataclass
class TraceEvent:
    repeat: int        # 1-based
    block: int         # 1-based flat block index
    cfg: GtmConfig
    v: float           # percent
    c_gmacs: float
    score: float
    decided: bool      # True on the candidate that won this block


@dataclass
class SearchResult:
    assignment: list[GtmConfig]
    v: float
    c_gmacs: float
    score: float
    trace: list[TraceEvent]
    repeat_assignments: list[list[GtmConfig]]


def _tie_key(v_c_s_cfg):
    cfg, v, c, score = v_c_s_cfg
    return (-score, c, cfg.s, KIND_ORDER[cfg.kind])


def greedy_search(spec: NetworkSpec, space: SearchSpace, estimator,
                  repeats: int = 3, draws: int = 4, seed: int = 0) -> SearchResult:
    """Front-to-back greedy decisions, repeated with fresh completion draws.

    ``estimator(assignment) -> percent`` is the only learned signal; costs
    come from the exact MAC count.  Each repeat ends on the last block where
    the suffix is empty, so its winning score is the full assignment's
    score; the best repeat (higher score, then cheaper) is returned.
    """
    space.validate_for(spec)
    if repeats < 1 or draws < 1:
        raise ConfigError("repeats and draws must be >= 1")
    nb = len(space.per_block)
    trace: list[TraceEvent] = []
    best = None
    repeat_assignments: list[list[GtmConfig]] = []

    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(repeats), start=1):
        rng = np.random.default_rng(ss)
        decided: list[GtmConfig] = []
        final = None
        for b in range(nb):
            cands = space.per_block[b]
            if b == nb - 1:
                suffixes = [[]]  # fully decided: one exact evaluation
            else:
                suffixes = [
                    [sfx[int(rng.integers(0, len(sfx)))]
                     for sfx in space.per_block[b + 1:]]
                    for _ in range(draws)
                ]
            scored = []
            for cfg in cands:
                v = float(np.mean([estimator(decided + [cfg] + suffix)
                                   for suffix in suffixes]))
                c = assignment_macs(
                    spec, decided + [cfg] + list(spec.gtm_per_block[b + 1:])
                ) / 1e9
                scored.append((cfg, v, c, v - space.alpha * c))
            winner = min(scored, key=_tie_key)
            for cfg, v, c, score in scored:
                trace.append(TraceEvent(r, b + 1, cfg, v, c, score,
                                        decided=cfg is winner[0]))
            decided.append(winner[0])
            final = winner
        repeat_assignments.append(list(decided))
        entry = (final[3], -final[2], -r, decided, final)
        if best is None or entry[:3] > best[:3]:
            best = entry

    _, _, _, assignment, final = best
    return SearchResult(
        assignment=list(assignment),
        v=final[1],
        c_gmacs=final[2],
        score=final[3],
        trace=trace,
        repeat_assignments=repeat_assignments,
    )
