"""Synthetic video tasks on a torus.

Two classification tasks over (H, W, T, 3) clips with a bright sprite on a
dim background:

* ``direction`` (4 classes): the sprite hops ``speed * 4`` pixels right,
  left, down or up once per 4-frame block.  Motion is quantised to blocks
  so every 4-frame window is a static scene, and the per-clip travel wraps
  the torus exactly (``speed * T`` must be a multiple of the extent).  A
  left clip and a right clip from the same start therefore visit the same
  position set and differ only in frame order - by construction the class
  is invisible to any model that pools time without ordering it.
* ``flash_pair`` (2 classes): the sprite flashes for one 4-frame block at
  ``t0`` and again at ``t0 + T/2``, displaced ``width/4`` pixels right or
  left.  With 8 time tokens the two flashes sit 4 tokens apart, which only
  strided time grouping can relate within a single mixing step.

``frame_multiset_fingerprint`` hashes the sorted byte-quantised frames, so
two clips get the same fingerprint exactly when their frame multisets
match (same scenes, any order).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .train import ClipSet

BACKGROUND = 0.1
SPRITE_COLOR = (0.9, 0.6, 0.3)

DIRECTIONS = ("right", "left", "down", "up")
_DIR_VECTORS = {0: (0, 1), 1: (0, -1), 2: (1, 0), 3: (-1, 0)}

TASKS = ("direction", "flash_pair")


@dataclass(frozen=True)
class SynthConfig:
    task: str
    num_train: int
    num_val: int
    height: int = 32
    width: int = 32
    frames: int = 16
    speed: int = 2
    sprite: int = 8
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}'; valid: {TASKS}")
        if self.num_train < 1 or self.num_val < 1:
            raise ConfigError("num_train and num_val must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ConfigError("clips must be at least 8x8")
        if self.frames % 4:
            raise ConfigError(f"frames must be divisible by 4, got {self.frames}")
        if not 0 < self.sprite <= min(self.height, self.width):
            raise ConfigError("sprite size must fit inside the frame")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.task == "direction":
            if self.speed < 1:
                raise ConfigError("speed must be >= 1")
            for extent, axis in ((self.width, "width"), (self.height, "height")):
                if (self.speed * self.frames) % extent:
                    raise ConfigError(
                        f"direction task needs speed*frames divisible by {axis} "
                        f"(torus closure), got {self.speed}*{self.frames} "
                        f"vs {extent}"
                    )
        else:
            if self.frames % 8:
                raise ConfigError(
                    f"flash_pair needs frames divisible by 8, got {self.frames}"
                )
            if self.width % 4:
                raise ConfigError("flash_pair needs width divisible by 4")

    @property
    def num_classes(self) -> int:
        return 4 if self.task == "direction" else 2

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "num_train": self.num_train,
            "num_val": self.num_val,
            "height": self.height,
            "width": self.width,
            "frames": self.frames,
            "speed": self.speed,
            "sprite": self.sprite,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SynthConfig":
        try:
            return cls(
                task=str(d["task"]),
                num_train=int(d["num_train"]),
                num_val=int(d["num_val"]),
                height=int(d.get("height", 32)),
                width=int(d.get("width", 32)),
                frames=int(d.get("frames", 16)),
                speed=int(d.get("speed", 2)),
                sprite=int(d.get("sprite", 8)),
                noise_sigma=float(d.get("noise_sigma", 0.05)),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as e:
            raise ConfigError(f"synth config missing key {e}") from e


def _stamp(frame: np.ndarray, h0: int, w0: int, size: int) -> None:
    hh = (np.arange(size) + h0) % frame.shape[0]
    ww = (np.arange(size) + w0) % frame.shape[1]
    frame[np.ix_(hh, ww)] = SPRITE_COLOR


def _finish(clip: np.ndarray, rng, noise_sigma: float) -> np.ndarray:
    if rng is not None and noise_sigma > 0:
        clip = clip + rng.normal(0.0, noise_sigma, size=clip.shape)
        clip = np.clip(clip, 0.0, 1.0)
    return clip.astype(np.float32)


def render_direction_clip(height: int, width: int, frames: int, speed: int,
                          sprite: int, start: tuple[int, int], direction: int,
                          rng=None, noise_sigma: float = 0.0) -> np.ndarray:
    """One clip of class ``direction``; hop of ``speed*4`` px per block."""
    if direction not in _DIR_VECTORS:
        raise ConfigError(f"direction must be 0..3, got {direction}")
    dh, dw = _DIR_VECTORS[direction]
    clip = np.full((height, width, frames, 3), BACKGROUND)
    for t in range(frames):
        hop = speed * 4 * (t // 4)
        frame = np.full((height, width, 3), BACKGROUND)
        _stamp(frame, (start[0] + dh * hop) % height, (start[1] + dw * hop) % width,
               sprite)
        clip[:, :, t, :] = frame
    return _finish(clip, rng, noise_sigma)


def render_flash_clip(height: int, width: int, frames: int, sprite: int,
                      start: tuple[int, int], sign: int, t0: int,
                      rng=None, noise_sigma: float = 0.0) -> np.ndarray:
    """Two one-block flashes ``T/2`` apart; the second sits ``width/4`` px
    right (``sign=+1``, class 0) or left (``sign=-1``, class 1)."""
    if sign not in (1, -1):
        raise ConfigError(f"sign must be +1 or -1, got {sign}")
    if t0 % 4 or not 0 <= t0 < frames // 2:
        raise ConfigError(
            f"t0 must be a multiple of 4 in [0, {frames // 2}), got {t0}"
        )
    disp = width // 4
    clip = np.full((height, width, frames, 3), BACKGROUND)
    for t in range(t0, t0 + 4):
        _stamp(clip[:, :, t, :], start[0], start[1], sprite)
    for t in range(t0 + frames // 2, t0 + frames // 2 + 4):
        _stamp(clip[:, :, t, :], start[0], (start[1] + sign * disp) % width, sprite)
    return _finish(clip, rng, noise_sigma)


def _render_split(cfg: SynthConfig, n: int, rng) -> ClipSet:
    clips = np.empty((n, cfg.height, cfg.width, cfg.frames, 3), dtype=np.float32)
    labels = (np.arange(n) % cfg.num_classes).astype(np.int64)
    for i in range(n):
        start = (int(rng.integers(0, cfg.height)), int(rng.integers(0, cfg.width)))
        if cfg.task == "direction":
            clips[i] = render_direction_clip(
                cfg.height, cfg.width, cfg.frames, cfg.speed, cfg.sprite,
                start, int(labels[i]), rng=rng, noise_sigma=cfg.noise_sigma,
            )
        else:
            t0 = 4 * int(rng.integers(0, cfg.frames // 8))
            clips[i] = render_flash_clip(
                cfg.height, cfg.width, cfg.frames, cfg.sprite, start,
                1 if labels[i] == 0 else -1, t0,
                rng=rng, noise_sigma=cfg.noise_sigma,
            )
    return ClipSet(clips, labels)


def generate(cfg: SynthConfig) -> dict[str, ClipSet]:
    """Balanced train/val splits from independent seed streams."""
    train_ss, val_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    return {
        "train": _render_split(cfg, cfg.num_train, np.random.default_rng(train_ss)),
        "val": _render_split(cfg, cfg.num_val, np.random.default_rng(val_ss)),
    }


def frame_multiset_fingerprint(clip: np.ndarray) -> str:
    """sha256 over the sorted byte-quantised frames (order-insensitive)."""
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ConfigError(f"expected one (H, W, T, 3) clip, got {clip.shape}")
    q = np.clip(np.round(clip * 255.0), 0, 255).astype(np.uint8)
    frames = sorted(q[:, :, t, :].tobytes() for t in range(clip.shape[-2]))
    return hashlib.sha256(b"".join(frames)).hexdigest()


_MAGIC = "gtmnet-clips"


def save_split(path: str, data: ClipSet) -> None:
    """One JSON header line, then labels and clips as little-endian blobs."""
    header = {
        "format": _MAGIC,
        "version": 1,
        "count": len(data),
        "clip_shape": list(data.clips.shape[1:]),
    }
    labels = data.labels.astype("<i8")
    clips = data.clips.astype("<f4")
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(labels.tobytes())
        f.write(clips.tobytes())


def load_split(path: str) -> ClipSet:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise SchemaError(f"cannot read clip cache: {e}") from e
    with f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SchemaError(f"{path}: bad header line: {e}") from e
        if header.get("format") != _MAGIC or header.get("version") != 1:
            raise SchemaError(f"{path}: not a {_MAGIC} v1 file")
        n = int(header["count"])
        shape = tuple(int(v) for v in header["clip_shape"])
        labels = np.frombuffer(f.read(n * 8), dtype="<i8").astype(np.int64)
        want = n * int(np.prod(shape)) * 4
        blob = f.read()
        if len(blob) != want:
            raise SchemaError(f"{path}: clip payload is {len(blob)} bytes, want {want}")
        clips = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape((n,) + shape)
    return ClipSet(clips, labels)
