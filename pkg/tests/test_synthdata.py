"""Synthetic tasks: quantised motion, frame-multiset invariance, caching."""

import numpy as np
import pytest

from gtmnet import synthdata as S
from gtmnet.errors import ConfigError, SchemaError


def direction_cfg(**kw):
    args = dict(task="direction", num_train=16, num_val=8, noise_sigma=0.05, seed=1)
    args.update(kw)
    return S.SynthConfig(**args)


def flash_cfg(**kw):
    args = dict(task="flash_pair", num_train=8, num_val=4, frames=32,
                noise_sigma=0.05, seed=2)
    args.update(kw)
    return S.SynthConfig(**args)


def test_config_validation():
    with pytest.raises(ConfigError):
        S.SynthConfig(task="waving", num_train=4, num_val=4)
    with pytest.raises(ConfigError):
        direction_cfg(speed=3)  # 3*16 = 48 does not wrap a 32-torus
    with pytest.raises(ConfigError):
        direction_cfg(frames=10)
    with pytest.raises(ConfigError):
        flash_cfg(frames=20)  # needs frames % 8 == 0
    with pytest.raises(ConfigError):
        direction_cfg(sprite=64)
    assert direction_cfg().num_classes == 4
    assert flash_cfg().num_classes == 2
    cfg = direction_cfg()
    assert S.SynthConfig.from_json_dict(cfg.to_json_dict()) == cfg


def test_labels_are_balanced():
    data = S.generate(direction_cfg())
    for split in ("train", "val"):
        counts = np.bincount(data[split].labels, minlength=4)
        assert counts.min() == counts.max()


def test_generation_is_deterministic_and_seed_sensitive():
    a = S.generate(direction_cfg(seed=7))
    b = S.generate(direction_cfg(seed=7))
    c = S.generate(direction_cfg(seed=8))
    np.testing.assert_array_equal(a["train"].clips, b["train"].clips)
    np.testing.assert_array_equal(a["val"].clips, b["val"].clips)
    assert np.abs(a["train"].clips - c["train"].clips).max() > 0
    # train and val come from independent streams
    assert np.abs(a["train"].clips[0] - a["val"].clips[0]).max() > 0


def test_values_stay_in_unit_range():
    data = S.generate(direction_cfg(noise_sigma=0.3))
    assert data["train"].clips.min() >= 0.0
    assert data["train"].clips.max() <= 1.0


def test_motion_is_quantised_to_blocks():
    clip = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 0)
    for b in range(4):
        for i in range(1, 4):
            np.testing.assert_array_equal(clip[:, :, 4 * b + i], clip[:, :, 4 * b])
    # consecutive blocks differ (the sprite moved)
    assert np.abs(clip[:, :, 4] - clip[:, :, 0]).max() > 0


def test_opposite_directions_visit_the_same_scenes():
    right = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 0)
    left = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 1)
    # hop is 8 px on a 32-torus: left block k shows right block (4-k) % 4
    for k in range(4):
        np.testing.assert_array_equal(left[:, :, 4 * k], right[:, :, 4 * ((4 - k) % 4)])
    assert np.abs(left - right).max() > 0  # but not in the same order


def test_fingerprint_blind_to_frame_order():
    right = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 0)
    left = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 1)
    up = S.render_direction_clip(32, 32, 16, 2, 8, (5, 9), 3)
    other = S.render_direction_clip(32, 32, 16, 2, 8, (6, 9), 0)
    assert S.frame_multiset_fingerprint(right) == S.frame_multiset_fingerprint(left)
    assert S.frame_multiset_fingerprint(right) != S.frame_multiset_fingerprint(up)
    assert S.frame_multiset_fingerprint(right) != S.frame_multiset_fingerprint(other)
    with pytest.raises(ConfigError):
        S.frame_multiset_fingerprint(right[:, :, :, 0])


def test_flash_clip_structure():
    h0, w0, t0 = 3, 10, 4
    clip = S.render_flash_clip(32, 32, 32, 8, (h0, w0), +1, t0)
    lit = [t for t in range(32) if np.abs(clip[:, :, t] - S.BACKGROUND).max() > 0]
    assert lit == [4, 5, 6, 7, 20, 21, 22, 23]
    first, second = clip[:, :, t0], clip[:, :, t0 + 16]
    np.testing.assert_array_equal(np.roll(first, 8, axis=1), second)
    neg = S.render_flash_clip(32, 32, 32, 8, (h0, w0), -1, t0)
    np.testing.assert_array_equal(np.roll(first, -8, axis=1), neg[:, :, t0 + 16])
    with pytest.raises(ConfigError):
        S.render_flash_clip(32, 32, 32, 8, (0, 0), +1, t0=3)
    with pytest.raises(ConfigError):
        S.render_flash_clip(32, 32, 32, 8, (0, 0), +2, t0=0)


def test_flash_pair_generation_balanced():
    data = S.generate(flash_cfg())
    counts = np.bincount(data["train"].labels, minlength=2)
    assert counts[0] == counts[1]
    assert data["train"].clips.shape == (8, 32, 32, 32, 3)


def test_cache_round_trip(tmp_path):
    data = S.generate(direction_cfg())["train"]
    path = str(tmp_path / "clips.bin")
    S.save_split(path, data)
    again = S.load_split(path)
    np.testing.assert_array_equal(data.clips, again.clips)
    np.testing.assert_array_equal(data.labels, again.labels)
    assert again.clips.dtype == np.float32 and again.labels.dtype == np.int64


def test_cache_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.bin")
    with open(path, "wb") as f:
        f.write(b"\x00\x01binary junk without a header\n more")
    with pytest.raises(SchemaError):
        S.load_split(path)
    with open(path, "wb") as f:
        f.write(b'{"format": "gtmnet-clips", "version": 1, "count": 2, '
                b'"clip_shape": [4, 4, 4, 3]}\n')
        f.write(b"\x00" * 16)  # labels truncated, payload missing
    with pytest.raises(SchemaError):
        S.load_split(path)
