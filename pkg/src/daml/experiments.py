"""The synthetic benchmark preset and the ablation arms run on it."""
from __future__ import annotations

import copy
import dataclasses
import logging
import time

import numpy as np

from .config import DESK_ENCODERS, HyperParams, desk_config
from .data import make_benchmark
from .training import pretrain_pair, run

log = logging.getLogger(__name__)

# Clustering thresholds for 32x16 synthetic images. Cosine distances between
# toy-encoder features are much tighter than between full-size backbone
# features, so the full-scale eps/alpha merge every identity into one cluster.
DESK_HP = {"alpha": 0.3, "eps": 0.15, "min_samples": 2, "P": 8}
DESK_TRAIN = {"pretrain_iters": 20, "adapt_epochs": 10}

# flat key/value presets for the command line; "full" keeps every default
PRESETS = {
    "full": {},
    "desk": {**DESK_ENCODERS, **DESK_TRAIN, **DESK_HP},
}

ARMS = {
    "full": {},
    "w/o L_Tsid": {"lambda1": 0.0},
    "w/o L_id": {"lambda2": 0.0},
    "w/o L_dom": {"lambda3": 0.0},
    "w/o SCU": {"smooth_update": False},
}


def desk_hyperparams(**overrides) -> HyperParams:
    return HyperParams(**{**DESK_HP, **overrides}).validate()


def benchmark_train_config(seed=0, **overrides):
    return desk_config(**{**DESK_TRAIN, "seed": seed, **overrides})


def run_arms(seeds=(0, 1, 2), arms=None, n_ids=20, per_id=8, hp=None, train_overrides=None,
             **world_kw):
    """Pretrain once per seed, then adapt each arm from copies of the same encoders.

    Returns {"seeds", "direct", "arms": {name: [final mAP per seed]}, "curves", "seconds"}.
    """
    arms = ARMS if arms is None else arms
    hp = desk_hyperparams() if hp is None else hp
    out = {"seeds": list(seeds), "direct": [], "arms": {a: [] for a in arms},
           "curves": {a: [] for a in arms}}
    t0 = time.time()
    for seed in seeds:
        bench = make_benchmark(n_ids, per_id, seed=seed, **world_kw)
        config = benchmark_train_config(seed, **(train_overrides or {}))
        pretrained = pretrain_pair(bench["source"], config, hp)
        for name, change in arms.items():
            arm_hp = dataclasses.replace(hp, **change)
            _, metrics = run(config, arm_hp, bench, pretrained=copy.deepcopy(pretrained))
            if len(out["direct"]) < len(out["arms"][name]) + 1:
                out["direct"].append(metrics["direct_transfer"]["mAP"])
            out["arms"][name].append(metrics["final"]["mAP"])
            out["curves"][name].append([e.get("mAP") for e in metrics["epochs"]])
            log.info("seed %d %s: direct %.3f -> %.3f", seed, name,
                     metrics["direct_transfer"]["mAP"], metrics["final"]["mAP"])
    out["seconds"] = time.time() - t0
    return out


def summarize(result):
    direct = float(np.mean(result["direct"]))
    means = {a: float(np.mean(v)) for a, v in result["arms"].items()}
    return {"direct_mAP": direct, "arm_mAP": means,
            "gain": {a: m - direct for a, m in means.items()}}
