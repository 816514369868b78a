"""Command-line surface: phantom, train, segment, eval, bench, inspect.

Configuration comes from a JSON file plus flag overrides (flags win); every
command echoes its effective configuration to stderr before running.
Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nn
from .bench import bench_segment
from .inference import StitchedLabels, dice_whole_volume, resample_labels, segment_volume
from .model import (
    CheckpointError,
    ModelConfig,
    ResidualTransformer,
    load_checkpoint,
    save_checkpoint,
)
from .nifti import NiftiError, load_nifti
from .phantom import PhantomConfig, PhantomError, generate_phantom
from .sampler import build_offset_table, default_layout, descriptor_to_mosaic, sample_descriptor, write_pgm
from .trainer import TrainConfig, TrainingDiverged, train
from .volume import (
    RawFormatError,
    dataset_split,
    load_raw_labels_path,
    load_raw_path,
    normalize_intensity,
    save_raw_labels_path,
    save_raw_path,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "out_dir": "phantoms",
        "count": 50,
        "phantom": {
            "dims": [96, 96, 96],
            "spacing": [2.0, 2.0, 2.0],
            "organ_count": 5,
            "twin_pair": True,
            "jitter": 6.0,
            "noise_sigma": 25.0,
        },
    },
    "model": {
        "class_count": 6,
        "grid_proj_width": 32,
        "model_width": 144,
        "heads": 2,
        "n_residual_blocks": 2,
        "n_encoder_layers": 2,
        "variant": "full",
    },
    "train": {
        "samples_per_image": 1000,
        "balanced_fraction": 0.10,
        "batch_size": 128,
        "max_steps": 5000,
        "eval_every": 500,
        "adam": {"lr": 3e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 1e-5},
    },
    "inference": {"threads": 0, "out": "segmentation"},
}


class ConfigError(ValueError):
    pass


def _merge_checked(defaults, user, path=""):
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict):
            out[key] = _merge_checked(dval, user.get(key, {}), f"{path}{key}.")
        else:
            out[key] = user.get(key, dval)
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(path + k for k in unknown)}")
    return out


def load_config(path: str | None) -> dict:
    user = {}
    if path:
        user = json.loads(Path(path).read_text())
    return _merge_checked(_DEFAULT_CONFIG, user)


def stage_seed(seed: int, stage: str) -> int:
    """Expand the top-level seed into a deterministic per-stage seed."""
    h = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _echo_config(cfg: dict, args) -> None:
    effective = dict(cfg)
    effective["_flags"] = {
        k: v for k, v in vars(args).items() if k not in ("func", "config")
    }
    print("effective config: " + json.dumps(effective, sort_keys=True), file=sys.stderr)


def _load_volume(path: str):
    p = Path(path)
    if p.suffix == ".nii":
        return load_nifti(p.read_bytes())
    return load_raw_path(p.with_suffix(""))


def _default_threads(args) -> int:
    if args.threads:
        return args.threads
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(cfg, args):
    out_dir = Path(args.out or cfg["data"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    count = cfg["data"]["count"]
    if count < 2:
        raise ConfigError("need at least 2 phantoms to form a 9:1 split")
    pcfg = cfg["data"]["phantom"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    gen_seed = stage_seed(seed, "phantom")
    seeds = np.random.default_rng(gen_seed).integers(0, 2**31 - 1, count)
    ids = []
    for i, s in enumerate(seeds):
        v, l = generate_phantom(PhantomConfig(
            dims=tuple(pcfg["dims"]), spacing=tuple(pcfg["spacing"]),
            organ_count=pcfg["organ_count"], twin_pair=pcfg["twin_pair"],
            jitter=pcfg["jitter"], noise_sigma=pcfg["noise_sigma"], seed=int(s),
        ))
        stem = f"phantom_{i:04d}"
        save_raw_path(v, out_dir / stem)
        save_raw_labels_path(l, out_dir / (stem + "_labels"))
        ids.append(stem)
    train_ids, test_ids = dataset_split(ids, stage_seed(seed, "split"))
    manifest = {
        "seed": seed,
        "class_count": pcfg["organ_count"] + 1,
        "train": sorted(train_ids),
        "test": sorted(test_ids),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {count} phantoms to {out_dir} ({len(train_ids)} train / {len(test_ids)} test)")
    return EXIT_OK


def _load_dataset(data_dir: Path, ids):
    dataset = []
    for stem in ids:
        v = load_raw_path(data_dir / stem)
        l = load_raw_labels_path(data_dir / (stem + "_labels"))
        dataset.append((v, l))
    return dataset


def cmd_train(cfg, args):
    data_dir = Path(cfg["data"]["out_dir"])
    manifest = json.loads((data_dir / "manifest.json").read_text())
    dataset = _load_dataset(data_dir, manifest["train"])
    seed = args.seed if args.seed is not None else cfg["seed"]
    mc = cfg["model"]
    model = ResidualTransformer(ModelConfig(seed=stage_seed(seed, "init"), **mc))
    tc = cfg["train"]
    tcfg = TrainConfig(
        samples_per_image=tc["samples_per_image"],
        balanced_fraction=tc["balanced_fraction"],
        batch_size=tc["batch_size"],
        max_steps=tc["max_steps"],
        eval_every=tc["eval_every"],
        adam=nn.AdamConfig(**tc["adam"]),
        seed=stage_seed(seed, "train"),
    )
    out = Path(args.out or "model.spsg")
    log_path = out.with_suffix(".log")
    with open(log_path, "w") as log_sink:
        model, _ = train(model, dataset, tcfg, log_sink=log_sink)
    with open(out, "wb") as f:
        save_checkpoint(model, f)
    print(f"checkpoint written to {out}; metrics log at {log_path}")
    return EXIT_OK


def cmd_segment(cfg, args):
    with open(args.checkpoint, "rb") as f:
        model = load_checkpoint(f)
    v = _load_volume(args.volume)
    threads = _default_threads(args)
    stitched = segment_volume(model, v, threads=threads, debug_writes=args.debug_writes)
    out = Path(args.out or cfg["inference"]["out"])
    save_raw_labels_path(stitched.labels, out)
    if args.debug_writes:
        bad = int((stitched.write_counts != 1).sum())
        print(f"debug write counts: {bad} voxels not written exactly once")
    print(f"stitched labels written to {out}.svh/.svd "
          f"(dims {stitched.labels.dims}, 2 mm, origin {stitched.origin_mm} mm)")
    return EXIT_OK


def cmd_eval(cfg, args):
    pred = load_raw_labels_path(Path(args.pred).with_suffix(""))
    gt = load_raw_labels_path(Path(args.gt).with_suffix(""))
    if pred.dims != gt.dims or pred.spacing != gt.spacing:
        # stitched 2 mm output scored against a native grid
        pred = resample_labels(StitchedLabels(pred), gt.dims, gt.spacing)
    scores = dice_whole_volume(pred, gt)
    for k in sorted(k for k in scores if k != "mean"):
        print(f"class {k}: dice {scores[k]:.4f}")
    print(f"mean foreground dice: {scores['mean']:.4f}")
    print(json.dumps({str(k): v for k, v in scores.items()}, sort_keys=True))
    return EXIT_OK


def cmd_bench(cfg, args):
    with open(args.checkpoint, "rb") as f:
        model = load_checkpoint(f)
    v = _load_volume(args.volume)
    threads = _default_threads(args)
    report = bench_segment(model, v, threads=threads)
    print(report.format_table())
    print(json.dumps(asdict(report), sort_keys=True))
    return EXIT_OK


def cmd_inspect(cfg, args):
    v = _load_volume(args.volume)
    q = (args.x, args.y, args.z)
    vn = normalize_intensity(v)
    table = build_offset_table(default_layout(), vn.dims, vn.spacing)
    d = sample_descriptor(vn, table, q)
    img = descriptor_to_mosaic(d)
    with open(args.out or "descriptor.pgm", "wb") as f:
        write_pgm(img, f)
    print(f"81x81 mosaic for query {q} written to {args.out or 'descriptor.pgm'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="top-level seed override")
        p.add_argument("--threads", type=int, default=0)
        p.add_argument("--out", help="output path")
        p.add_argument("--debug-writes", action="store_true", dest="debug_writes")

    p = sub.add_parser("phantom", help="generate a seeded phantom dataset with a 9:1 split")
    common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model, write checkpoint and metrics log")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="whole-volume segmentation to a raw label file")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="dice table for predicted vs ground-truth labels")
    p.add_argument("pred")
    p.add_argument("gt")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="whole-volume timing report")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="write the 81x81 descriptor mosaic as PGM")
    p.add_argument("volume")
    p.add_argument("x", type=int)
    p.add_argument("y", type=int)
    p.add_argument("z", type=int)
    common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        _echo_config(cfg, args)
        return args.func(cfg, args)
    except (ConfigError, RawFormatError, NiftiError, CheckpointError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, PhantomError, TrainingDiverged, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
