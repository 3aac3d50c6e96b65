"""Command-line interface.

Commands: ``count`` (exact parameter / MAC accounting), ``verify``
(self-check battery with an optional deliberate fault), ``train``,
``eval``, and ``search``.  Exit codes: 0 success, 1 a verification check
failed, 2 usage or config-schema problems, 3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from . import network as net_mod
from . import search as search_mod
from . import synthdata as synth_mod
from . import tensor as tz
from . import train as train_mod
from .errors import ConfigError, DivergenceError, SchemaError
from .gtm import GtmConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


# ---------------------------------------------------------------- config files

def _check_keys(d, where, required=(), optional=()):
    if not isinstance(d, dict):
        raise SchemaError(f"{where} must be a JSON object")
    missing = sorted(set(required) - set(d))
    unknown = sorted(set(d) - set(required) - set(optional))
    if missing or unknown:
        raise SchemaError(
            f"{where}: missing keys {missing if missing else 'none'}, "
            f"unknown keys {unknown if unknown else 'none'}"
        )


def _load_config(path, required, optional=()):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise SchemaError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {e}") from e
    _check_keys(doc, path, required, optional)
    return doc


_NETWORK_KEYS = ("variant", "channels", "depths", "height", "width", "frames",
                 "num_classes", "gtm", "expansion", "drop_path_rate",
                 "head_dropout", "init_seed")


def _spec_from_section(d):
    _check_keys(d, "network", optional=_NETWORK_KEYS)
    d = dict(d)
    init_seed = int(d.pop("init_seed", 0))
    variant = d.pop("variant", "custom")
    if "gtm" in d:
        d["gtm_per_block"] = [GtmConfig.from_json_dict(g) for g in d.pop("gtm")]
    if "channels" in d:
        d["channels"] = tuple(d["channels"])
    if "depths" in d:
        d["depths"] = tuple(d["depths"])
    return net_mod.make_variant(variant, **d), init_seed


_TRAIN_KEYS = ("epochs", "batch_size", "base_lr", "weight_decay", "warmup_epochs",
               "label_smoothing", "seed", "precision", "target_val_acc")

_DATA_KEYS = ("task", "num_train", "num_val", "height", "width", "frames",
              "speed", "sprite", "noise_sigma", "seed")


def _train_cfg_from_section(d):
    _check_keys(d, "train", required=("epochs", "batch_size"),
                optional=tuple(k for k in _TRAIN_KEYS if k not in
                               ("epochs", "batch_size")))
    return train_mod.TrainConfig.from_json_dict(d)


def _data_from_section(d):
    """Either generated clips or cached splits from ``save_split`` files."""
    if "cache_train" in d or "cache_val" in d:
        _check_keys(d, "data", required=("cache_train", "cache_val"))
        return (synth_mod.load_split(d["cache_train"]),
                synth_mod.load_split(d["cache_val"]), None)
    _check_keys(d, "data", required=("task", "num_train", "num_val"),
                optional=tuple(k for k in _DATA_KEYS if k not in
                               ("task", "num_train", "num_val")))
    cfg = synth_mod.SynthConfig.from_json_dict(d)
    splits = synth_mod.generate(cfg)
    return splits["train"], splits["val"], cfg


def _check_geometry(spec, data, what):
    want = (spec.height, spec.width, spec.frames, 3)
    if data.clips.shape[1:] != want:
        raise ConfigError(
            f"{what} clips are {data.clips.shape[1:]}, model wants {want}"
        )
    top = int(data.labels.max()) + 1
    if top > spec.num_classes:
        raise ConfigError(
            f"{what} has labels up to {top - 1} but the model emits "
            f"{spec.num_classes} classes"
        )


# ---------------------------------------------------------------- count

def cmd_count(args):
    doc = _load_config(args.config, required=("network",),
                       optional=("train", "data", "search"))
    spec, _ = _spec_from_section(doc["network"])
    rep = net_mod.complexity_report(spec)
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    print(f"parameters: {rep['params']:,}")
    print(f"macs per clip: {rep['macs']:,} ({rep['macs'] / 1e9:.4f} GMACs)")
    print(f"embed: params {rep['embed']['params']:,}, macs {rep['embed']['macs']:,}")
    for i, st in enumerate(rep["per_stage"], start=1):
        h, w, t, c = st["grid"]
        print(f"stage {i}: grid {h}x{w}x{t}x{c}, blocks {len(st['blocks'])}, "
              f"params {st['params']:,}, macs {st['macs']:,}")
    for i, tr in enumerate(rep["transitions"], start=1):
        print(f"transition {i}: params {tr['params']:,}, macs {tr['macs']:,}")
    print(f"head: params {rep['head']['params']:,}, macs {rep['head']['macs']:,}")
    return EXIT_OK


# ---------------------------------------------------------------- verify

def _swap_weights(kind):
    from .gtm import GtmWeights
    from .tensor import Tensor

    one = lambda v: Tensor(np.array([[float(v)]]))
    if kind == "shift_token":
        offsets = {0: one(0), 1: one(1)}
    else:
        offsets = {-1: one(1), 0: one(0), 1: one(1)}
    return GtmWeights(offsets=offsets, bias=Tensor(np.zeros(1)))


def _check_swap_examples(_fault):
    from .gtm import gtm_apply
    from .tensor import Tensor

    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1))
    want = {"short_range": [2, 1, 4, 3], "long_range": [3, 4, 1, 2],
            "shift_window": [4, 3, 2, 1], "shift_token": [4, 1, 2, 3]}
    for kind, expected in want.items():
        got = gtm_apply(GtmConfig(kind, 2), _swap_weights(kind), x).data.reshape(4)
        if not np.array_equal(got, np.array(expected, dtype=float)):
            return False, f"{kind}: got {got.tolist()}, want {expected}"
    return True, ""


def _check_dense_agreement(fault):
    from .gtm import alloc_gtm_weights, build_dense_time_bias, build_dense_time_matrix, gtm_apply

    rng = np.random.default_rng(1234)
    t, c = 8, 3
    x = rng.normal(size=(2, 2, t, c))
    cases = [GtmConfig(k, s, shared=sh)
             for k in ("short_range", "long_range", "shift_window")
             for s in (1, 2, 4) for sh in (True, False)]
    cases += [GtmConfig("shift_token", s) for s in (1, 2, 3)]
    cases += [GtmConfig("full", t), GtmConfig("full", t, shared=False)]
    worst = 0.0
    for i, cfg in enumerate(cases):
        weights = alloc_gtm_weights(cfg, c, rng, dtype="f64")
        dense = build_dense_time_matrix(cfg, t, weights)
        bias = build_dense_time_bias(cfg, t, weights)
        if fault and i == 0:
            weights.offsets[0].data[0, 0] += 1e-3
        from .tensor import Tensor
        got = gtm_apply(cfg, weights, Tensor(x)).data
        want = (x.reshape(2, 2, t * c) @ dense + bias).reshape(x.shape)
        diff = float(np.abs(got - want).max())
        worst = max(worst, diff)
        if diff > 1e-9:
            return False, f"{cfg.kind} S={cfg.s} shared={cfg.shared}: routes differ by {diff:.3e}"
    return True, f"max deviation {worst:.3e} over {len(cases)} cases"


def _check_permutation_identities(_fault):
    from .gtm import alloc_gtm_weights, build_dense_time_matrix, time_permutation_matrix

    rng = np.random.default_rng(99)
    t, s, c = 8, 2, 2
    weights = alloc_gtm_weights(GtmConfig("short_range", s), c, rng, dtype="f64")
    short = build_dense_time_matrix(GtmConfig("short_range", s), t, weights)
    for kind in ("long_range", "shift_window"):
        dense = build_dense_time_matrix(GtmConfig(kind, s), t, weights)
        p = time_permutation_matrix(kind, t, s, c)
        if not np.array_equal(dense, p @ short @ p.T):
            return False, f"{kind} is not a permutation conjugate of short_range"
    return True, ""


def _micro_spec():
    return net_mod.NetworkSpec(
        channels=(4, 5, 6, 7), depths=(1, 1, 1, 1),
        gtm_per_block=[GtmConfig("short_range", 2, shared=False),
                       GtmConfig("shift_token", 2),
                       GtmConfig("long_range", 2),
                       GtmConfig("shift_window", 2)],
        height=32, width=32, frames=8, num_classes=3, expansion=2,
    )


def _check_count_allocation(_fault):
    spec = _micro_spec()
    params = net_mod.init_params(spec, np.random.default_rng(0))
    allocated = sum(p.size for _, p in params.named_parameters())
    counted = net_mod.count_params(spec)
    if counted != allocated:
        return False, f"count_params says {counted}, allocation holds {allocated}"
    return True, f"{counted} parameters"


def _check_flop_examples(_fault):
    from .gtm import gtm_flop_count

    cases = [
        (GtmConfig("short_range", 2), (3, 3, 4, 2), 288),
        (GtmConfig("shift_token", 3), (3, 3, 4, 2), 432),
        (GtmConfig("full", 4), (3, 3, 4, 2), 576),
    ]
    for cfg, (h, w, t, c), want in cases:
        got = gtm_flop_count(cfg, h, w, t, c)
        if got != want:
            return False, f"{cfg.kind} S={cfg.s} on {h}x{w}x{t}x{c}: {got} macs, want {want}"
    return True, ""


def _check_center_init_constancy(_fault):
    spec = _micro_spec()
    rng = np.random.default_rng(5)
    ref = net_mod.Reference2D.random(spec, rng)
    params = net_mod.center_init(spec, ref, np.random.default_rng(6))
    frame = rng.normal(size=(spec.height, spec.width, 1, 3))
    clip = tz.Tensor(np.repeat(frame, spec.frames, axis=-2))
    report = net_mod.time_constancy_report(spec, params, clip)
    worst_name, worst = max(report, key=lambda kv: kv[1])
    if worst > 1e-9:
        return False, f"'{worst_name}' deviates by {worst:.3e}"
    return True, f"max deviation {worst:.3e}"


def _check_block_gradients(_fault):
    from .block import BlockParams, block_forward
    from .gtm import GtmWeights, alloc_gtm_weights
    from .mixing import MixingParams
    from .tensor import Tensor

    rng = np.random.default_rng(7)
    c = 3
    mat = lambda shape: Tensor(rng.normal(0, 0.5, size=shape), requires_grad=True)
    axis_w = lambda s: GtmWeights(offsets={i: mat((c, c)) for i in range(s)},
                                  bias=mat((c,)))
    cfg = GtmConfig("long_range", 2)
    mixing = MixingParams(
        s_h=2, s_w=2, h_weights=axis_w(2), w_weights=axis_w(2),
        t_cfg=cfg, t_weights=alloc_gtm_weights(cfg, c, rng, dtype="f64"),
        fuse_logits=mat((3, c)), proj_w=mat((c, c)), proj_b=mat((c,)),
    )
    bp = BlockParams(
        ln1_gamma=Tensor(np.ones(c), requires_grad=True),
        ln1_beta=Tensor(np.zeros(c), requires_grad=True),
        mixing=mixing,
        ln2_gamma=Tensor(np.ones(c), requires_grad=True),
        ln2_beta=Tensor(np.zeros(c), requires_grad=True),
        fc1_w=mat((c, 2 * c)), fc1_b=mat(2 * c),
        fc2_w=mat((2 * c, c)), fc2_b=mat(c),
    )
    x = Tensor(rng.normal(size=(2, 2, 4, c)), requires_grad=True)
    named = [("x", x), ("fc1.w", bp.fc1_w), ("fuse_logits", mixing.fuse_logits),
             ("proj.w", mixing.proj_w), ("ln1.gamma", bp.ln1_gamma),
             ("t.w_0", mixing.t_weights.offsets[0]),
             ("t.w_+1", mixing.t_weights.offsets[1]),
             ("h.w_1", mixing.h_weights.offsets[1])]

    def f():
        y = block_forward(x, bp)
        wgt = Tensor(np.linspace(0.5, 1.5, y.size).reshape(y.shape))
        return tz.mean(tz.mul(y, wgt), tuple(range(y.ndim)))

    report = tz.grad_check(f, named, h=1e-6, tol=1e-6)
    if not report.passed:
        return False, str(report)
    return True, f"max relative error {report.max_rel_error:.3e}"


_CHECKS = [
    ("group swap worked examples", _check_swap_examples, False),
    ("efficient paths match dense oracles", _check_dense_agreement, False),
    ("long/window are permutations of short", _check_permutation_identities, False),
    ("parameter count equals allocation", _check_count_allocation, False),
    ("mac formulas match hand counts", _check_flop_examples, False),
    ("centred init is time constant", _check_center_init_constancy, False),
    ("block gradients match finite differences", _check_block_gradients, True),
]


def run_verification(fast=False, fault=False):
    """Run the battery; returns (name, ok, detail) per check."""
    results = []
    for name, fn, slow in _CHECKS:
        if fast and slow:
            continue
        try:
            ok, detail = fn(fault)
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        results.append((name, ok, detail))
    return results


def cmd_verify(args):
    results = run_verification(fast=args.fast, fault=args.fault)
    failed = 0
    for name, ok, detail in results:
        suffix = f" ({detail})" if detail else ""
        if ok:
            print(f"ok - {name}{suffix}")
        else:
            failed += 1
            print(f"FAIL - {name}{suffix}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- train / eval

def _print_row(row):
    print(f"epoch {row.epoch:3d}  loss {row.train_loss:8.4f}  "
          f"val {row.val_acc:6.2f}%  lr {row.lr:.3e}")


def cmd_train(args):
    doc = _load_config(args.config, required=("network", "train", "data"),
                       optional=("search",))
    spec, init_seed = _spec_from_section(doc["network"])
    cfg = _train_cfg_from_section(doc["train"])
    train_data, val_data, synth_cfg = _data_from_section(doc["data"])
    _check_geometry(spec, train_data, "train data")
    _check_geometry(spec, val_data, "val data")

    params = net_mod.init_params(spec, np.random.default_rng(init_seed),
                                 dtype=cfg.precision)
    print(f"training on {len(train_data)} clips, validating on {len(val_data)}")
    result = train_mod.train_model(spec, params, train_data, val_data, cfg,
                                   on_epoch=_print_row)
    print(f"final val accuracy: {result.final_val_acc:.2f}%"
          + (" (target reached)" if result.stopped_early else ""))
    if args.out:
        extra = {
            "train_config": cfg.to_json_dict(),
            "final_val_acc": result.final_val_acc,
            "global_steps": result.global_steps,
        }
        if synth_cfg is not None:
            extra["data_config"] = synth_cfg.to_json_dict()
        ckpt_mod.save_checkpoint(args.out, spec, params, extra=extra)
        print(f"saved checkpoint to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    spec, params, extra = ckpt_mod.load_checkpoint(args.ckpt)
    doc = _load_config(args.config, required=("data",),
                       optional=("network", "train", "search"))
    train_data, val_data, _ = _data_from_section(doc["data"])
    data = train_data if args.split == "train" else val_data
    _check_geometry(spec, data, f"{args.split} data")
    acc = train_mod.evaluate(spec, params, data, batch_size=args.batch_size)
    print(f"{args.split} accuracy: {acc:.2f}% over {len(data)} clips")
    return EXIT_OK


# ---------------------------------------------------------------- search

_SEARCH_KEYS = ("sizes", "alpha", "repeats", "draws", "seed")


def cmd_search(args):
    doc = _load_config(args.config, required=("network", "train", "data", "search"))
    spec, init_seed = _spec_from_section(doc["network"])
    cfg = _train_cfg_from_section(doc["train"])
    train_data, val_data, _ = _data_from_section(doc["data"])
    _check_geometry(spec, train_data, "train data")
    _check_geometry(spec, val_data, "val data")

    sd = doc["search"]
    _check_keys(sd, "search", optional=_SEARCH_KEYS)
    space = search_mod.make_search_space(
        spec, sizes=tuple(sd.get("sizes", (1, 2, 4))),
        alpha=float(sd.get("alpha", 5e-3)),
    )
    # nominal routing during pool pretraining: the first candidate per block
    # (always servable, and the cost baseline for undecided suffixes)
    spec = dataclasses.replace(
        spec, gtm_per_block=[cands[0] for cands in space.per_block]
    )
    params = net_mod.init_params(spec, np.random.default_rng(init_seed),
                                 dtype=cfg.precision, pool_s=space.s_max)
    n_cands = len(space.per_block[0])
    print(f"supernet pool S<={space.s_max}, {n_cands} candidates per block, "
          f"{len(space.per_block)} blocks")
    result_pre = search_mod.pretrain_supernet(spec, params, train_data, val_data,
                                              cfg, space, on_epoch=_print_row)
    print(f"pool pretrained: val {result_pre.final_val_acc:.2f}% under random routing")

    estimator = search_mod.make_supernet_estimator(spec, params, val_data,
                                                   batch_size=cfg.batch_size)
    result = search_mod.greedy_search(
        spec, space, estimator,
        repeats=int(sd.get("repeats", 3)),
        draws=int(sd.get("draws", 4)),
        seed=int(sd.get("seed", 0)),
    )
    for r, assignment in enumerate(result.repeat_assignments, start=1):
        desc = " ".join(f"{c.kind}:{c.s}" for c in assignment)
        print(f"repeat {r}: {desc}")
    chosen = " ".join(f"{c.kind}:{c.s}" for c in result.assignment)
    print(f"selected: {chosen}")
    print(f"estimated val {result.v:.2f}%, cost {result.c_gmacs:.6f} GMACs, "
          f"score {result.score:.4f}")

    if args.out:
        payload = {
            "assignment": [c.to_json_dict() for c in result.assignment],
            "v": result.v,
            "c_gmacs": result.c_gmacs,
            "score": result.score,
            "repeats": [[c.to_json_dict() for c in a]
                        for a in result.repeat_assignments],
            "trace": [
                {"repeat": e.repeat, "block": e.block, "kind": e.cfg.kind,
                 "s": e.cfg.s, "v": e.v, "c_gmacs": e.c_gmacs,
                 "score": e.score, "decided": e.decided}
                for e in result.trace
            ],
        }
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
        print(f"wrote search report to {args.out}")
    if args.ckpt:
        ckpt_mod.save_checkpoint(args.ckpt, spec, params,
                                 extra={"pool": True,
                                        "train_config": cfg.to_json_dict()})
        print(f"saved supernet pool to {args.ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------- parser / runner

def build_parser():
    parser = argparse.ArgumentParser(
        prog="gtmnet",
        description="Grouped time-mixing video networks: count, verify, "
                    "train, eval, and search.",
    )
    parser.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS threads (read before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="exact parameter and MAC accounting")
    p.add_argument("--config", required=True, help="JSON config with a network section")
    p.add_argument("--json", action="store_true", help="dump the full report as JSON")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("verify", help="run the self-check battery")
    p.add_argument("--fast", action="store_true", help="skip the slow gradient check")
    p.add_argument("--fault", action="store_true",
                   help="inject a deliberate weight corruption; the battery "
                        "must then fail (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train a model on synthetic clips")
    p.add_argument("--config", required=True,
                   help="JSON config with network, train and data sections")
    p.add_argument("--out", help="checkpoint path to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--config", required=True, help="JSON config with a data section")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="greedy operator search over a shared pool")
    p.add_argument("--config", required=True,
                   help="JSON config with network, train, data and search sections")
    p.add_argument("--out", help="JSON file for the search report")
    p.add_argument("--ckpt", help="also save the pretrained pool checkpoint")
    p.set_defaults(func=cmd_search)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        for row in e.trace:
            _print_row(row)
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
