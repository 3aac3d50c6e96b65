"""Checkpoint round trips must be bit-exact and fail loudly on mismatches."""

import json

import numpy as np
import pytest

from gtmnet import checkpoint as CK
from gtmnet import network as N
from gtmnet.errors import SchemaError
from gtmnet.gtm import GtmConfig

from test_network import micro_spec, MIXED_GTM


def tamper(path, out, edit_manifest):
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    manifest = edit_manifest(manifest)
    with open(out, "wb") as f:
        f.write((json.dumps(manifest) + "\n").encode("utf-8"))
        f.write(payload)
    return out


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_round_trip_is_bit_exact(tmp_path, dtype):
    spec = micro_spec(gtm=MIXED_GTM)
    params = N.init_params(spec, np.random.default_rng(81), dtype=dtype)
    path = str(tmp_path / "model.ckpt")
    CK.save_checkpoint(path, spec, params, extra={"note": "x", "steps": 7})
    spec2, params2, extra = CK.load_checkpoint(path)
    assert spec2 == spec
    assert extra == {"note": "x", "steps": 7}
    a = dict(params.named_parameters())
    b = dict(params2.named_parameters())
    assert set(a) == set(b)
    for name in a:
        assert a[name].data.dtype == b[name].data.dtype, name
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_pool_width_round_trips(tmp_path):
    spec = micro_spec(frames=16, gtm=[GtmConfig("short_range", 2)] * 4)
    params = N.init_params(spec, np.random.default_rng(82), pool_s=4)
    path = str(tmp_path / "pool.ckpt")
    CK.save_checkpoint(path, spec, params)
    _, params2, _ = CK.load_checkpoint(path)
    assert params2.pool_s == 4
    names = [n for n, _ in params2.named_parameters()]
    assert "stage1.block1.mixing.t_weights.w_+3" in names
    np.testing.assert_array_equal(
        params.stages[0][0].mixing.t_weights.offsets[3].data,
        params2.stages[0][0].mixing.t_weights.offsets[3].data,
    )


def test_rejects_garbage_and_truncation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x89PNG not a checkpoint\n1234")
    with pytest.raises(SchemaError):
        CK.load_checkpoint(str(bad))

    spec = micro_spec()
    params = N.init_params(spec, np.random.default_rng(83))
    path = str(tmp_path / "ok.ckpt")
    CK.save_checkpoint(path, spec, params)
    blob = open(path, "rb").read()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-5])
    with pytest.raises(SchemaError, match="truncated"):
        CK.load_checkpoint(str(cut))
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(blob + b"\x00")
    with pytest.raises(SchemaError, match="trailing"):
        CK.load_checkpoint(str(padded))


def test_rejects_name_mismatches_both_ways(tmp_path):
    spec = micro_spec()
    params = N.init_params(spec, np.random.default_rng(84))
    path = str(tmp_path / "ok.ckpt")
    CK.save_checkpoint(path, spec, params)

    def rename(m):
        m["params"][-1]["name"] = "head.bogus"
        return m

    renamed = tamper(path, str(tmp_path / "renamed.ckpt"), rename)
    with pytest.raises(SchemaError, match="missing.*head.b.*unexpected.*head.bogus"):
        CK.load_checkpoint(renamed)

    def duplicate(m):
        m["params"][-1]["name"] = m["params"][0]["name"]
        return m

    duped = tamper(path, str(tmp_path / "duped.ckpt"), duplicate)
    with pytest.raises(SchemaError, match="duplicate"):
        CK.load_checkpoint(duped)


def test_rejects_shape_mismatch(tmp_path):
    spec = micro_spec()
    params = N.init_params(spec, np.random.default_rng(85))
    path = str(tmp_path / "ok.ckpt")
    CK.save_checkpoint(path, spec, params)

    def reshape(m):
        m["params"][0]["shape"] = [1, 1]
        return m

    warped = tamper(path, str(tmp_path / "warped.ckpt"), reshape)
    with pytest.raises(SchemaError, match="shape"):
        CK.load_checkpoint(warped)
