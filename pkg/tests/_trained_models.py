"""Trained-model fixture for the acceptance suite.

Trains the full and mlp_only variants under an identical budget on a seeded
40/10 phantom split and caches the checkpoints plus a results summary under
.acceptance_cache/, keyed by a hash of the exact configuration.  The
acceptance test recomputes every asserted number from the cached checkpoints;
the cache only avoids repeating the multi-hour optimization itself.

Run directly (``python tests/_trained_models.py``) to populate the cache.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sparseseg.inference import dice_whole_volume, resample_labels, segment_volume
from sparseseg.model import ModelConfig, ResidualTransformer, load_checkpoint, save_checkpoint
from sparseseg.phantom import PhantomConfig, generate_phantom
from sparseseg.trainer import TrainConfig, train

CACHE_DIR = Path(__file__).resolve().parent.parent / ".acceptance_cache"

TRAIN_COUNT = 40
TEST_COUNT = 10
DATASET_SEED = 20240817
VARIANTS = ("full", "mlp_only")
TWIN_CLASSES = (1, 2)


def _phantom_config():
    return PhantomConfig(dims=(96, 96, 96), spacing=(2.0, 2.0, 2.0),
                         organ_count=5, twin_pair=True, seed=0)


def _train_config():
    return TrainConfig(seed=99)


def _model_config(variant):
    return ModelConfig(seed=7, variant=variant)


def config_key() -> str:
    payload = {
        "phantom": asdict(_phantom_config()),
        "train": asdict(_train_config()),
        "model": asdict(_model_config("full")),
        "dataset_seed": DATASET_SEED,
        "counts": [TRAIN_COUNT, TEST_COUNT],
        "variants": list(VARIANTS),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def dataset_seeds():
    rng = np.random.default_rng(DATASET_SEED)
    return rng.integers(0, 2**31 - 1, TRAIN_COUNT + TEST_COUNT)


def make_split(which: str):
    """Generate the phantom split: which is 'train' or 'test'."""
    seeds = dataset_seeds()
    base = _phantom_config()
    if which == "train":
        seeds = seeds[:TRAIN_COUNT]
    elif which == "test":
        seeds = seeds[TRAIN_COUNT:]
    else:
        raise ValueError(which)
    from dataclasses import replace

    return [generate_phantom(replace(base, seed=int(s))) for s in seeds]


def checkpoint_path(variant: str) -> Path:
    return CACHE_DIR / f"{config_key()}_{variant}.spsg"


def results_path() -> Path:
    return CACHE_DIR / f"{config_key()}_results.json"


def score_heldout(model, test_set):
    """Whole-volume dice against native-grid ground truth, per phantom."""
    per_volume = []
    per_class_acc = {}
    for v, l in test_set:
        stitched = segment_volume(model, v)
        pred = resample_labels(stitched, l.dims, l.spacing)
        scores = dice_whole_volume(pred, l)
        per_volume.append(scores["mean"])
        for k, val in scores.items():
            if k != "mean" and not np.isnan(val):
                per_class_acc.setdefault(int(k), []).append(val)
    return {
        "mean_foreground_dice": float(np.mean(per_volume)),
        "per_volume": [float(x) for x in per_volume],
        "per_class": {str(k): float(np.mean(v)) for k, v in per_class_acc.items()},
    }


def load_cached(variant: str):
    with open(checkpoint_path(variant), "rb") as f:
        return load_checkpoint(f)


def cache_complete() -> bool:
    return results_path().exists() and all(
        checkpoint_path(v).exists() for v in VARIANTS
    )


def populate_cache(log=sys.stderr):
    CACHE_DIR.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    print("generating phantoms ...", file=log, flush=True)
    train_set = make_split("train")
    test_set = make_split("test")
    results = {"key": config_key(), "variants": {}}
    for variant in VARIANTS:
        print(f"training variant {variant} ...", file=log, flush=True)
        model = ResidualTransformer(_model_config(variant))
        t1 = time.perf_counter()
        model, train_log = train(model, train_set, _train_config(), log_sink=log)
        train_seconds = time.perf_counter() - t1
        with open(checkpoint_path(variant), "wb") as f:
            save_checkpoint(model, f)
        print(f"scoring variant {variant} ...", file=log, flush=True)
        scores = score_heldout(model, test_set)
        scores["train_seconds"] = train_seconds
        scores["final_loss"] = train_log[-1]["loss"]
        results["variants"][variant] = scores
        print(f"{variant}: {scores['mean_foreground_dice']:.4f} "
              f"({train_seconds:.0f} s)", file=log, flush=True)
    results["total_seconds"] = time.perf_counter() - t0
    results_path().write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


if __name__ == "__main__":
    if cache_complete():
        print(f"cache already populated: {results_path()}")
    else:
        populate_cache()
        print(f"cache written: {results_path()}")
