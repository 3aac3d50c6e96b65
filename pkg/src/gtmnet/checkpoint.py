"""Checkpoint file format.

One UTF-8 JSON manifest line - model spec, ordered parameter records, the
optional pool width, and a free-form ``extra`` dict - followed by each
parameter's raw little-endian bytes in manifest order.  Loading rebuilds
the model from the embedded spec and then requires the manifest parameter
names to match the model's names exactly, in both directions, so stale or
foreign files fail loudly instead of loading partially.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, SchemaError
from .network import ModelParams, NetworkSpec, init_params

_MAGIC = "gtmnet-checkpoint"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_LE = {"f32": "<f4", "f64": "<f8"}
_ITEM = {"f32": 4, "f64": 8}


def save_checkpoint(path: str, spec: NetworkSpec, params: ModelParams,
                    extra: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, p in params.named_parameters():
        dt = _DTYPE_NAMES.get(p.data.dtype)
        if dt is None:
            raise ConfigError(f"cannot serialise '{name}' with dtype {p.data.dtype}")
        entries.append({"name": name, "shape": list(p.data.shape), "dtype": dt})
        blobs.append(np.ascontiguousarray(p.data).astype(_LE[dt], copy=False).tobytes())
    manifest = {
        "format": _MAGIC,
        "version": 1,
        "spec": spec.to_json_dict(),
        "pool_s": params.pool_s,
        "params": entries,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write((json.dumps(manifest) + "\n").encode("utf-8"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str) -> tuple[NetworkSpec, ModelParams, dict]:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise SchemaError(f"cannot read checkpoint: {e}") from e
    with f:
        line = f.readline()
        try:
            manifest = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SchemaError(f"{path}: manifest line is not JSON: {e}") from e
        if manifest.get("format") != _MAGIC or manifest.get("version") != 1:
            raise SchemaError(f"{path}: not a {_MAGIC} v1 file")
        for key in ("spec", "params"):
            if key not in manifest:
                raise SchemaError(f"{path}: manifest missing '{key}'")

        spec = NetworkSpec.from_json_dict(manifest["spec"])
        entries = manifest["params"]
        dtypes = {e.get("dtype") for e in entries}
        if len(dtypes) != 1 or dtypes - set(_LE):
            raise SchemaError(f"{path}: parameter dtypes must be uniform, got {dtypes}")
        dtype = dtypes.pop()
        pool_s = manifest.get("pool_s")

        params = init_params(spec, None, dtype=dtype, pool_s=pool_s)
        by_name = dict(params.named_parameters())
        manifest_names = [e["name"] for e in entries]
        if len(manifest_names) != len(set(manifest_names)):
            raise SchemaError(f"{path}: duplicate parameter names in manifest")
        missing = sorted(set(by_name) - set(manifest_names))
        unexpected = sorted(set(manifest_names) - set(by_name))
        if missing or unexpected:
            raise SchemaError(
                f"{path}: parameter names do not match the model; "
                f"missing {missing or 'none'}, unexpected {unexpected or 'none'}"
            )

        for e in entries:
            shape = tuple(int(v) for v in e["shape"])
            target = by_name[e["name"]]
            if target.data.shape != shape:
                raise SchemaError(
                    f"{path}: '{e['name']}' has shape {list(shape)}, "
                    f"model wants {list(target.data.shape)}"
                )
            nbytes = int(np.prod(shape, dtype=np.int64)) * _ITEM[dtype] if shape else _ITEM[dtype]
            blob = f.read(nbytes)
            if len(blob) != nbytes:
                raise SchemaError(f"{path}: truncated payload at '{e['name']}'")
            target.data[...] = np.frombuffer(blob, dtype=_LE[dtype]).reshape(shape)
        if f.read(1):
            raise SchemaError(f"{path}: trailing bytes after the last parameter")
    return spec, params, manifest.get("extra", {})
