"""Command line entry point: ``daml <command> [options]``.

Settings are resolved in this order, later sources winning:
built-in full-scale defaults < ``--preset`` < ``--config`` file
< ``--set key=value`` flags. Every run writes ``resolved-config.yaml`` and its
artifacts under one run directory, by default
``$DAML_OUTPUT_ROOT/<command>-<timestamp>`` (``./runs`` when unset).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime

import numpy as np
import torch
import yaml

from . import plotting
from .config import as_flat_dict, load_config_file, resolve
from .data import SOURCE, SPLITS, TARGET, load_domain_root, make_benchmark, write_benchmark
from .encoders import Encoder, EncoderConfig, extract_features, load_checkpoint, save_checkpoint
from .errors import ConfigError, DAMLError
from .evaluation import cluster_quality, cmc_map, common_neighbors
from .experiments import PRESETS
from .pseudo_labels import clustering_features, generate_pseudo_labels
from .training import (PretrainResult, cluster_policy, evaluate_student, pretrain_pair, run,
                       source_accuracy)

log = logging.getLogger("daml")

TRAIN, QUERY, GALLERY = SPLITS
DOMAIN_CHOICES = (SOURCE, TARGET)


class UsageError(DAMLError):
    pass


# ---------------------------------------------------------------------------
# argument parsing

def _common(p):
    p.add_argument("--config", help="flat YAML file of key: value settings")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable); wins over --config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full",
                   help="base settings: 'full' (full-scale defaults) or 'desk' (32x16 benchmark)")
    p.add_argument("--output-root", help="parent of the run directory "
                                         "(default: $DAML_OUTPUT_ROOT or ./runs)")
    p.add_argument("--run-dir", help="exact run directory (must not exist yet)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="root holding source/ and target/ dataset roots")
    g.add_argument("--source", help="source dataset root (bounding_box_train, ...)")
    g.add_argument("--target", help="target dataset root (bounding_box_train, query, ...)")
    g.add_argument("--synthetic", action="store_true",
                   help="generate the synthetic benchmark in memory instead of reading files")


def build_parser():
    parser = argparse.ArgumentParser(prog="daml", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the two-domain synthetic benchmark to disk")
    _common(p)

    p = sub.add_parser("pretrain", help="supervised source training of teacher and student")
    _common(p)
    _data_args(p)

    p = sub.add_parser("adapt", help="pseudo-label adaptation on the target domain")
    _common(p)
    _data_args(p)
    p.add_argument("--pretrained", help="checkpoint written by 'pretrain' (else pretrain first)")
    p.add_argument("--resume", help="adaptation checkpoint to continue from")

    p = sub.add_parser("eval", help="retrieval metrics of the student encoder")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True, help="pretrain or adapt checkpoint")
    p.add_argument("--domain", choices=DOMAIN_CHOICES, default=TARGET)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--include-distractors", action="store_true")
    p.add_argument("--no-per-query", action="store_true", help="skip the per-query CSV")

    p = sub.add_parser("cluster-stats", help="pseudo-label statistics on the target train set")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True, help="pretrain or adapt checkpoint")
    p.add_argument("--neighbors", default="1,5,10,20",
                   help="k values for the teacher/student common-neighbor count")
    return parser


# ---------------------------------------------------------------------------
# settings and run directory

def parse_overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def resolve_settings(args):
    values = dict(PRESETS[args.preset])
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        values.update(load_config_file(args.config))
    return resolve(values, parse_overrides(args.overrides))


def plan_run_dir(args):
    if args.run_dir:
        path = args.run_dir
        if os.path.exists(path):
            raise UsageError(f"run directory already exists: {path}")
        return path
    root = args.output_root or os.environ.get("DAML_OUTPUT_ROOT") or "runs"
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = os.path.join(root, f"{args.command}-{stamp}")
    n = 1
    while os.path.exists(path):
        n += 1
        path = os.path.join(root, f"{args.command}-{stamp}-{n}")
    return path


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# data

def required_data(args):
    """{domain: splits} that must exist on disk for this command."""
    if args.command == "pretrain":
        return {SOURCE: [TRAIN]}
    if args.command == "adapt":
        return {SOURCE: [TRAIN], TARGET: [TRAIN]}
    if args.command == "eval":
        return {args.domain: [QUERY, GALLERY]}
    if args.command == "cluster-stats":
        return {TARGET: [TRAIN]}
    return {}


def check_data_args(args):
    """Validate data paths before anything is written."""
    if getattr(args, "synthetic", False):
        return
    roots = {}
    for given in (args.data, args.source, args.target):
        if given and not os.path.isdir(given):
            raise FileNotFoundError(f"data root not found: {given}")
    if args.data:
        roots = {d: os.path.join(args.data, d) for d in DOMAIN_CHOICES
                 if os.path.isdir(os.path.join(args.data, d))}
    if args.source:
        roots[SOURCE] = args.source
    if args.target:
        roots[TARGET] = args.target
    for domain, splits in required_data(args).items():
        if domain not in roots:
            raise UsageError(f"no {domain} data: pass --data, --{domain} or --synthetic")
        for split in splits:
            path = os.path.join(roots[domain], split)
            if not os.path.isdir(path):
                raise FileNotFoundError(f"missing {domain} split directory: {path}")
    args.roots = roots


def load_datasets(args, train, data):
    if args.synthetic:
        return make_benchmark(data.n_ids, data.per_id, data.domain_shift, train.seed,
                              train.image_size, data.n_cams, clutter=data.clutter)
    out = {}
    for domain, root in args.roots.items():
        splits = [s for s in SPLITS if os.path.isdir(os.path.join(root, s))]
        loaded = load_domain_root(root, domain, train.image_size, splits)
        if TRAIN in loaded:
            out[domain] = loaded[TRAIN].without_distractors()
        if QUERY in loaded and GALLERY in loaded:
            out[f"{domain}_query"] = loaded[QUERY]
            out[f"{domain}_gallery"] = loaded[GALLERY]
    return out


def _encoder_from(tensors, sidecar, key):
    enc = Encoder(EncoderConfig(**sidecar[f"{key}_config"]))
    enc.load_state_dict(tensors[key])
    enc.eval()
    return enc


def load_encoders(path):
    tensors, sidecar = load_checkpoint(path)
    return _encoder_from(tensors, sidecar, "teacher"), _encoder_from(tensors, sidecar, "student")


def check_checkpoint(path):
    prefix = path[:-3] if path.endswith(".pt") else path
    for ext in (".pt", ".json"):
        if not os.path.isfile(prefix + ext):
            raise FileNotFoundError(f"checkpoint file missing: {prefix + ext}")


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(args, hp, train, data, run_dir):
    bench = make_benchmark(data.n_ids, data.per_id, data.domain_shift, train.seed,
                           train.image_size, data.n_cams, clutter=data.clutter)
    out = os.path.join(run_dir, "data")
    write_benchmark(bench, out)
    counts = {name: {"samples": len(ds), "identities": int(ds.num_identities)}
              for name, ds in bench.items()}
    write_json(os.path.join(run_dir, "metrics.json"), {"data_root": "data", "splits": counts})
    plotting.plot_samples({d: bench[d] for d in (SOURCE, TARGET)},
                          os.path.join(run_dir, "figures", "samples.png"))
    print(f"wrote synthetic benchmark to {out}")
    return 0


def save_pretrained(prefix, pair, hp, train):
    t, s = pair
    tensors = {"teacher": t.encoder.state_dict(), "student": s.encoder.state_dict(),
               "W_s_T": t.classifier, "W_s_S": s.classifier}
    sidecar = {"teacher_config": t.encoder.config.to_dict(),
               "student_config": s.encoder.config.to_dict(),
               "history": {"teacher": t.history, "student": s.history},
               "config": as_flat_dict(hp, train)}
    save_checkpoint(prefix, tensors, sidecar)


def load_pretrained(path):
    tensors, sidecar = load_checkpoint(path)
    teacher = _encoder_from(tensors, sidecar, "teacher")
    student = _encoder_from(tensors, sidecar, "student")
    hist = sidecar.get("history", {})
    return (PretrainResult(teacher, tensors["W_s_T"], hist.get("teacher", [])),
            PretrainResult(student, tensors["W_s_S"], hist.get("student", [])))


def cmd_pretrain(args, hp, train, data, run_dir):
    datasets = load_datasets(args, train, data)
    pair = pretrain_pair(datasets[SOURCE], train, hp)
    save_pretrained(os.path.join(run_dir, "checkpoints", "pretrained"), pair, hp, train)
    metrics = {"source_train_acc": {
        "teacher": source_accuracy(pair[0].encoder, pair[0].classifier, datasets[SOURCE]),
        "student": source_accuracy(pair[1].encoder, pair[1].classifier, datasets[SOURCE])}}
    for domain in DOMAIN_CHOICES:
        if f"{domain}_query" in datasets:
            res = _retrieval(pair[1].encoder, datasets[f"{domain}_query"],
                             datasets[f"{domain}_gallery"])
            metrics[f"{domain}_student"] = res.summary()
    write_json(os.path.join(run_dir, "metrics.json"), metrics)
    plotting.plot_pretrain({"teacher": pair[0].history, "student": pair[1].history},
                           os.path.join(run_dir, "figures", "pretrain.png"))
    _print_metrics(metrics)
    return 0


def cmd_adapt(args, hp, train, data, run_dir):
    datasets = load_datasets(args, train, data)
    pretrained = load_pretrained(args.pretrained) if args.pretrained else None
    state, metrics = run(train, hp, datasets, out_dir=run_dir, pretrained=pretrained,
                         resume_from=args.resume)
    metrics.pop("pretrain", None)
    write_json(os.path.join(run_dir, "metrics.json"), metrics)
    fig_dir = os.path.join(run_dir, "figures")
    direct = metrics.get("direct_transfer", {}).get("mAP")
    plotting.plot_adaptation(metrics["epochs"], os.path.join(fig_dir, "adaptation.png"), direct)
    if state.pseudo is not None:
        plotting.plot_cluster_sizes(state.pseudo.labels, os.path.join(fig_dir, "cluster_sizes.png"))
    log_path = os.path.join(run_dir, "train_log.csv")
    if os.path.exists(log_path):
        with open(log_path) as fh:
            plotting.plot_loss_terms(list(csv.DictReader(fh)), os.path.join(fig_dir, "losses.png"))
    if "target_query" in datasets:
        res = evaluate_student(state, datasets["target_query"], datasets["target_gallery"])
        plotting.plot_cmc(res.cmc, os.path.join(fig_dir, "cmc.png"))
    _print_metrics({k: v for k, v in metrics.items() if k != "epochs"})
    return 0


def _retrieval(encoder, query, gallery, metric="cosine", include_distractors=False):
    if not include_distractors:
        gallery = gallery.without_distractors()
    qf = extract_features(encoder, query.images())
    gf = extract_features(encoder, gallery.images())
    return cmc_map(qf, gf, query.person_ids, gallery.person_ids, query.camera_ids,
                   gallery.camera_ids, metric=metric)


def cmd_eval(args, hp, train, data, run_dir):
    _, student = load_encoders(args.checkpoint)
    datasets = load_datasets(args, train, data)
    qkey, gkey = f"{args.domain}_query", f"{args.domain}_gallery"
    if qkey not in datasets:
        raise UsageError(f"{args.domain} data has no query/bounding_box_test splits")
    query, gallery = datasets[qkey], datasets[gkey]
    res = _retrieval(student, query, gallery, args.metric, args.include_distractors)
    metrics = res.summary()
    write_json(os.path.join(run_dir, "metrics.json"), metrics)
    if not args.no_per_query:
        with open(os.path.join(run_dir, "per_query.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_index", "sample_id", "person_id", "camera_id",
                             "first_hit_rank", "average_precision"])
            for i, s in enumerate(query.samples):
                writer.writerow([i, s.sample_id, s.person_id, s.camera_id,
                                 int(res.first_hits[i]), f"{res.aps[i]:.10f}"])
    plotting.plot_cmc(res.cmc, os.path.join(run_dir, "figures", "cmc.png"))
    _print_metrics(metrics)
    return 0


def cmd_cluster_stats(args, hp, train, data, run_dir):
    teacher, student = load_encoders(args.checkpoint)
    target = load_datasets(args, train, data)[TARGET]
    policy = cluster_policy(hp, train)
    rng = np.random.default_rng([train.seed, 6])
    images = target.images()
    f_T = clustering_features(teacher, target, policy, hp.cluster_repeat, rng, images)
    f_S = clustering_features(student, target, policy, hp.cluster_repeat, rng, images)
    pl = generate_pseudo_labels(f_T, f_S, hp.alpha, hp.eps, hp.min_samples, hp.prenormalize)
    sizes = np.bincount(pl.labels[pl.labels >= 0]) if pl.K else np.zeros(0, int)
    hist = {str(int(k)): int(v) for k, v in zip(*np.unique(sizes, return_counts=True))}
    report = {"K": pl.K, "num_outliers": pl.num_outliers, "num_samples": len(target),
              "cluster_size_histogram": hist}
    truth = target.person_ids
    if np.all(truth >= 0):
        q = cluster_quality(pl.labels, truth)
        report.update(NMI=q["NMI"], purity=q["purity"], true_identities=int(len(set(truth))))
    ks = [int(k) for k in args.neighbors.split(",") if k.strip()]
    report["common_neighbors"] = {str(k): common_neighbors(f_T, f_S, k)
                                  for k in ks if 1 <= k < len(target)}
    write_json(os.path.join(run_dir, "cluster_stats.json"), report)
    plotting.plot_cluster_sizes(pl.labels, os.path.join(run_dir, "figures", "cluster_sizes.png"))
    _print_metrics(report)
    return 0


HANDLERS = {"synth-data": cmd_synth_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "eval": cmd_eval, "cluster-stats": cmd_cluster_stats}


def _print_metrics(metrics):
    print(json.dumps(metrics, indent=2, sort_keys=True, default=_plain))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        hp, train, data = resolve_settings(args)
        if args.command != "synth-data":
            check_data_args(args)
        for key in ("pretrained", "resume", "checkpoint"):
            if getattr(args, key, None):
                check_checkpoint(getattr(args, key))
        run_dir = plan_run_dir(args)
    except (DAMLError, OSError) as exc:
        print(f"daml {args.command}: error: {exc}", file=sys.stderr)
        return 2
    torch.manual_seed(train.seed)
    os.makedirs(run_dir)
    with open(os.path.join(run_dir, "resolved-config.yaml"), "w") as fh:
        yaml.safe_dump({"command": args.command, **as_flat_dict(hp, train, data)}, fh,
                       sort_keys=True)
    try:
        return HANDLERS[args.command](args, hp, train, data, run_dir)
    except (DAMLError, OSError) as exc:
        print(f"daml {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
