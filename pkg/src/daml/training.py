"""Source pretraining and the per-epoch adaptation loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .classifiers import ClassifierState, predict
from .config import HyperParams, TrainConfig, as_flat_dict
from .data import AugmentPolicy, Dataset, augment_batch, pk_sample, steps_per_epoch
from .encoders import (Encoder, build_encoder, check_heterogeneous, load_checkpoint,
                       save_checkpoint, student_config, teacher_config, to_tensor)
from .errors import EpochSkipped, InvalidState
from .evaluation import cluster_quality, evaluate_datasets
from .losses import (TERMS, LossReport, ce_loss, kl_distill_dom, kl_distill_id,
                     total_loss, triplet_loss)
from .pseudo_labels import PseudoLabelState, clustering_features, generate_pseudo_labels

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch") + TERMS + ("L_total",)


def step_lr(base_lr, epoch, milestones=(40, 70), gamma=0.1):
    return base_lr * gamma ** sum(epoch >= m for m in milestones)


def cosine_lr(base_lr, epoch, total_epochs):
    if total_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def make_sgd(params, lr, weight_decay, momentum=0.9):
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum, weight_decay=weight_decay)


def train_policy(config: TrainConfig):
    return AugmentPolicy(config.flip_prob, config.erase_prob, False, config.image_size)


def cluster_policy(hp: HyperParams, config: TrainConfig):
    return AugmentPolicy(flip_prob=0.0, erase_prob=1.0 if hp.cluster_erase else 0.0,
                         crop_enabled=hp.cluster_crop, image_size=config.image_size)


def build_pair(config: TrainConfig, seed=None):
    seed = config.seed if seed is None else seed
    t_cfg = teacher_config(config.image_size, config.teacher_dim,
                           width=config.teacher_width, depth=config.teacher_depth)
    s_cfg = student_config(config.image_size, config.student_dim, width=config.student_width,
                           depth=config.student_depth, patch_size=config.patch_size)
    check_heterogeneous(t_cfg, s_cfg)
    return build_encoder(t_cfg, seed=seed * 2 + 11), build_encoder(s_cfg, seed=seed * 2 + 12)


def _batch(dataset: Dataset, idx, policy, rng):
    return to_tensor(augment_batch(dataset.images(idx), policy, rng))


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class PretrainResult:
    encoder: Encoder
    classifier: torch.Tensor
    history: list = field(default_factory=list)


def pretrain(encoder: Encoder, source: Dataset, config: TrainConfig, hp: HyperParams,
             schedule="step", rng=None) -> PretrainResult:
    """Supervised source training with cross-entropy plus batch-hard triplet.

    ``schedule`` is "step" (teacher: decay by ``gamma`` at ``milestones``) or
    "cosine" (student).
    """
    rng = np.random.default_rng([config.seed, 3]) if rng is None else rng
    labels = source.dense_labels()
    n_classes = int(labels.max()) + 1
    dtype = next(encoder.parameters()).dtype
    gen = torch.Generator().manual_seed(config.seed + 101)
    W = torch.nn.Parameter(0.01 * torch.randn(n_classes, encoder.feature_dim, generator=gen,
                                              dtype=dtype))
    is_teacher = schedule == "step"
    base_lr = config.lr_teacher if is_teacher else config.lr_student
    wd = config.weight_decay_teacher if is_teacher else config.weight_decay_student
    opt = make_sgd(list(encoder.parameters()) + [W], base_lr, wd, config.momentum)
    policy = train_policy(config)
    iters = config.pretrain_iters or steps_per_epoch(int((labels >= 0).sum()), hp.P, hp.K_per_id)
    history = []
    encoder.train()
    for epoch in range(config.pretrain_epochs):
        lr = (step_lr(base_lr, epoch, config.milestones, config.gamma) if is_teacher
              else cosine_lr(base_lr, epoch, config.pretrain_epochs))
        set_lr(opt, lr)
        correct = total = 0
        loss_sum = 0.0
        for _ in range(iters):
            idx = pk_sample(source, hp.P, hp.K_per_id, labels, rng)
            y = torch.as_tensor(labels[idx])
            feats = encoder(_batch(source, idx, policy, rng).to(dtype))
            logits = predict(feats, W)
            loss = ce_loss(logits, y) + triplet_loss(feats, y, hp.rho)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item()
            correct += int((logits.argmax(1) == y).sum())
            total += len(y)
        history.append({"epoch": epoch, "lr": lr, "loss": loss_sum / iters,
                        "train_acc": correct / max(total, 1)})
        log.info("pretrain[%s] epoch %d lr %.2e loss %.4f acc %.3f", encoder.config.kind,
                 epoch, lr, loss_sum / iters, correct / max(total, 1))
    return PretrainResult(encoder, W.detach(), history)


@torch.no_grad()
def source_accuracy(encoder, W, source: Dataset):
    from .encoders import extract_features

    feats = torch.from_numpy(extract_features(encoder, source.images())).to(W.dtype)
    pred = predict(feats, W).argmax(1).numpy()
    return float((pred == source.dense_labels()).mean())


# ---------------------------------------------------------------------------
# adaptation

@dataclass
class RunState:
    epoch: int
    teacher: Encoder
    student: Encoder
    classifiers: ClassifierState
    opt_teacher: torch.optim.Optimizer
    opt_student: torch.optim.Optimizer
    rng: np.random.Generator
    pseudo: Optional[PseudoLabelState] = None
    history: list = field(default_factory=list)
    step: int = 0

    @property
    def optimizers(self):
        return (self.opt_teacher, self.opt_student)


def init_run_state(teacher, student, source_classifier, config: TrainConfig, rng=None):
    classifiers = ClassifierState(len(source_classifier), teacher.feature_dim,
                                  student.feature_dim, dtype=source_classifier.dtype)
    with torch.no_grad():
        classifiers.W_s_T.copy_(source_classifier)
    opt_t = make_sgd(list(teacher.parameters()) + [classifiers.W_s_T],
                     config.teacher_adapt_lr, config.weight_decay_teacher, config.momentum)
    opt_s = make_sgd(student.parameters(), config.student_adapt_lr,
                     config.weight_decay_student, config.momentum)
    rng = np.random.default_rng([config.seed, 5]) if rng is None else rng
    return RunState(0, teacher, student, classifiers, opt_t, opt_s, rng)


def compute_terms(state: RunState, src_x, src_y, tgt_x, tgt_y, hp: HyperParams,
                  use_source=True):
    """All loss terms for one (source batch, target batch) pair."""
    cls = state.classifiers
    n_src = cls.num_source_classes
    t_T = state.teacher(tgt_x)
    t_S = state.student(tgt_x)
    zero = t_T.new_zeros(())
    terms = dict.fromkeys(TERMS, zero)
    terms["L_tri_T"] = triplet_loss(t_T, tgt_y, hp.rho)
    terms["L_tri_S"] = triplet_loss(t_S, tgt_y, hp.rho)
    terms["L_Ttid"] = ce_loss(predict(t_T, cls.teacher_weights()), tgt_y + n_src)
    terms["L_Stid"] = ce_loss(predict(t_S, cls.W_t_S), tgt_y)
    terms["L_id"] = kl_distill_id(predict(t_T, cls.W_t_T), predict(t_S, cls.W_t_S),
                                  hp.temperature)
    if use_source:
        s_T = state.teacher(src_x)
        if hp.lambda1 > 0:
            terms["L_Tsid"] = ce_loss(predict(s_T, cls.teacher_weights()), src_y)
            terms["L_tri_sT"] = triplet_loss(s_T, src_y, hp.rho)
        if hp.lambda3 > 0:
            with torch.no_grad():
                s_S = state.student(src_x)
            terms["L_dom"] = kl_distill_dom(predict(s_S, cls.W_t_S), predict(s_T, cls.W_t_T),
                                            hp.temperature)
    return terms


def refresh_pseudo_labels(state: RunState, target: Dataset, hp: HyperParams,
                          config: TrainConfig) -> PseudoLabelState:
    policy = cluster_policy(hp, config)
    images = target.images()
    feats_T = clustering_features(state.teacher, target, policy, hp.cluster_repeat,
                                  state.rng, images)
    feats_S = clustering_features(state.student, target, policy, hp.cluster_repeat,
                                  state.rng, images)
    return generate_pseudo_labels(feats_T, feats_S, hp.alpha, hp.eps, hp.min_samples,
                                  hp.prenormalize)


def adapt_epoch(state: RunState, source: Dataset, target: Dataset, hp: HyperParams,
                config: TrainConfig, log_rows=None, use_source=None) -> RunState:
    """Cluster, refresh the target classifiers, then optimize the full objective."""
    if use_source is None:
        use_source = hp.lambda1 > 0 or hp.lambda3 > 0
    pl = refresh_pseudo_labels(state, target, hp, config)
    state.pseudo = pl
    if pl.K == 0:
        raise InvalidState("clustering produced no clusters")
    if pl.K < hp.P:
        raise EpochSkipped(f"only {pl.K} clusters, need at least P={hp.P}")
    state.classifiers.update(pl.centers_T, pl.centers_S, state.optimizers,
                             smooth=hp.smooth_update, normalize_init=hp.init_normalize)

    src_labels = source.dense_labels()
    policy = train_policy(config)
    dtype = state.classifiers.W_s_T.dtype
    state.teacher.train()
    state.student.train()
    n_steps = steps_per_epoch(len(pl.clustered), hp.P, hp.K_per_id)
    for _ in range(n_steps):
        tgt_idx = pk_sample(target, hp.P, hp.K_per_id, pl.labels, state.rng)
        tgt_x = _batch(target, tgt_idx, policy, state.rng).to(dtype)
        tgt_y = torch.as_tensor(pl.labels[tgt_idx])
        src_x = src_y = None
        if use_source:
            src_idx = pk_sample(source, hp.P, hp.K_per_id, src_labels, state.rng)
            src_x = _batch(source, src_idx, policy, state.rng).to(dtype)
            src_y = torch.as_tensor(src_labels[src_idx])
        terms = compute_terms(state, src_x, src_y, tgt_x, tgt_y, hp, use_source)
        loss = total_loss(terms, hp)
        for opt in state.optimizers:
            opt.zero_grad()
        loss.backward()
        for opt in state.optimizers:
            opt.step()
        state.step += 1
        if log_rows is not None:
            row = {k: v.item() for k, v in terms.items()}
            row.update(step=state.step, epoch=state.epoch, L_total=loss.item())
            log_rows.append(row)
    return state


def evaluate_student(state: RunState, query: Dataset, gallery: Dataset):
    """Retrieval metrics on the student's features (the teacher is never used at test time)."""
    return evaluate_datasets(state.student, query, gallery)


# ---------------------------------------------------------------------------
# checkpoints

def save_run_state(state: RunState, prefix, config: TrainConfig, hp: HyperParams, metrics=None):
    tensors = {
        "teacher": state.teacher.state_dict(),
        "student": state.student.state_dict(),
        "classifiers": state.classifiers.blocks(),
        "opt_teacher": state.opt_teacher.state_dict(),
        "opt_student": state.opt_student.state_dict(),
        "rng": state.rng.bit_generator.state,
    }
    sidecar = {
        "epoch": state.epoch,
        "step": state.step,
        "K": state.classifiers.K,
        "K_hat": state.classifiers.K_hat,
        "teacher_config": state.teacher.config.to_dict(),
        "student_config": state.student.config.to_dict(),
        "config": as_flat_dict(hp, config),
        "metrics": metrics or {},
        "history": state.history,
    }
    save_checkpoint(prefix, tensors, sidecar)


def load_run_state(prefix, config: TrainConfig) -> RunState:
    from .encoders import EncoderConfig

    tensors, sidecar = load_checkpoint(prefix)
    teacher = Encoder(EncoderConfig(**sidecar["teacher_config"]))
    student = Encoder(EncoderConfig(**sidecar["student_config"]))
    teacher.load_state_dict(tensors["teacher"])
    student.load_state_dict(tensors["student"])
    blocks = tensors["classifiers"]
    state = init_run_state(teacher, student, blocks["W_s_T"], config)
    state.classifiers.load_blocks(blocks)
    cls = state.classifiers
    t_params = list(teacher.parameters()) + [cls.W_s_T]
    if cls.W_t_T is not None:
        t_params.append(cls.W_t_T)
    s_params = list(student.parameters())
    if cls.W_t_S is not None:
        s_params.append(cls.W_t_S)
    state.opt_teacher = make_sgd(t_params, config.teacher_adapt_lr,
                                 config.weight_decay_teacher, config.momentum)
    state.opt_student = make_sgd(s_params, config.student_adapt_lr,
                                 config.weight_decay_student, config.momentum)
    state.opt_teacher.load_state_dict(tensors["opt_teacher"])
    state.opt_student.load_state_dict(tensors["opt_student"])
    state.rng.bit_generator.state = tensors["rng"]
    state.epoch = sidecar["epoch"]
    state.step = sidecar["step"]
    state.history = sidecar.get("history", [])
    return state


def write_log(rows, path):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


# ---------------------------------------------------------------------------
# end-to-end

def pretrain_pair(source: Dataset, config: TrainConfig, hp: HyperParams):
    teacher, student = build_pair(config)
    t = pretrain(teacher, source, config, hp, "step", np.random.default_rng([config.seed, 3]))
    s = pretrain(student, source, config, hp, "cosine", np.random.default_rng([config.seed, 4]))
    return t, s


def run(config: TrainConfig, hp: HyperParams, datasets: dict, out_dir=None,
        pretrained=None, resume_from=None, use_source=None):
    """Pretrain (unless given), adapt for ``config.adapt_epochs`` epochs and evaluate.

    ``datasets`` needs "source" and "target" train sets; "target_query" and
    "target_gallery" enable per-epoch evaluation of the student.
    Returns (RunState, metrics dict).
    """
    source, target = datasets["source"], datasets["target"]
    query, gallery = datasets.get("target_query"), datasets.get("target_gallery")
    metrics = {"epochs": []}
    if resume_from is not None:
        state = load_run_state(resume_from, config)
    else:
        if pretrained is None:
            pretrained = pretrain_pair(source, config, hp)
        t, s = pretrained
        metrics["pretrain"] = {"teacher": t.history, "student": s.history}
        state = init_run_state(t.encoder, s.encoder, t.classifier, config)
        if query is not None:
            metrics["direct_transfer"] = evaluate_student(state, query, gallery).summary()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    truth = target.person_ids
    while state.epoch < config.adapt_epochs:
        rows = []
        record = {"epoch": state.epoch}
        try:
            adapt_epoch(state, source, target, hp, config, rows, use_source)
        except (EpochSkipped, InvalidState) as exc:
            log.warning("epoch %d skipped: %s", state.epoch, exc)
            record["skipped"] = str(exc)
        if state.pseudo is not None:
            record.update(cluster_quality(state.pseudo.labels, truth))
        if query is not None and ((state.epoch + 1) % config.eval_every == 0
                                  or state.epoch + 1 == config.adapt_epochs):
            record.update(evaluate_student(state, query, gallery).summary())
        state.history.append(record)
        metrics["epochs"].append(record)
        log.info("adapt epoch %d: %s", state.epoch, record)
        state.epoch += 1
        if out_dir:
            write_log(rows, os.path.join(out_dir, "train_log.csv"))
            save_run_state(state, os.path.join(out_dir, "checkpoints", f"epoch_{state.epoch:03d}"),
                           config, hp, record)
    if query is not None:
        metrics["final"] = evaluate_student(state, query, gallery).summary()
    return state, metrics
