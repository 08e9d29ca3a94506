"""Bias-free linear classifiers and the smooth classifier update between epochs."""
from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidState, NoPreviousClassifier, ShapeMismatch


def predict(features, weights):
    """logits = features @ weights.T"""
    if features.shape[-1] != weights.shape[-1]:
        raise ShapeMismatch(
            f"feature dim {features.shape[-1]} != classifier dim {weights.shape[-1]}")
    return features @ weights.T


def smooth_update(old_W, old_momentum, centers):
    """Rebuild a target block for a new set of classes.

    Each new class row is the softmax(center @ old_W.T)-weighted combination of
    the previous rows; momentum rows are carried over with the same weights.
    """
    if old_W is None or len(old_W) == 0:
        raise NoPreviousClassifier("smooth update needs the previous epoch's classifier")
    old_W = torch.as_tensor(old_W)
    centers = torch.as_tensor(centers, dtype=old_W.dtype)
    if old_momentum is None:
        old_momentum = torch.zeros_like(old_W)
    old_momentum = torch.as_tensor(old_momentum, dtype=old_W.dtype)
    if old_momentum.shape != old_W.shape:
        raise ShapeMismatch("momentum buffer must mirror the classifier weights")
    with torch.no_grad():
        coef = torch.softmax(predict(centers, old_W), dim=1)
        return coef @ old_W, coef @ old_momentum


def initialize_target_blocks(centers_T, centers_S, normalize=False):
    """First adaptation epoch: rows are the cluster centers, momentum starts at zero.

    With ``normalize`` the rows are unit-length centers, which keeps the new
    target logits on the scale of a trained source classifier.
    """
    centers_T = torch.as_tensor(centers_T)
    centers_S = torch.as_tensor(centers_S)
    if len(centers_T) == 0 or len(centers_S) == 0:
        raise InvalidState("no clusters to initialize the target classifiers from")
    if len(centers_T) != len(centers_S):
        raise ShapeMismatch("teacher and student centers disagree on the class count")
    W_t_T, W_t_S = centers_T.clone(), centers_S.clone()
    if normalize:
        W_t_T = torch.nn.functional.normalize(W_t_T, dim=1)
        W_t_S = torch.nn.functional.normalize(W_t_S, dim=1)
    return W_t_T, torch.zeros_like(W_t_T), W_t_S, torch.zeros_like(W_t_S)


class ClassifierState(nn.Module):
    """Teacher blocks [W_s_T, W_t_T] and the student block W_t_S.

    Momentum buffers live in the optimizers; ``replace_target_blocks`` swaps
    parameters and their buffers together.
    """

    def __init__(self, num_source_classes, c_T, c_S, dtype=torch.float32):
        super().__init__()
        self.W_s_T = nn.Parameter(torch.empty(num_source_classes, c_T, dtype=dtype))
        nn.init.normal_(self.W_s_T, std=0.01)
        self.W_t_T = None
        self.W_t_S = None
        self.K = 0
        self.K_hat = 0
        self.c_T, self.c_S = c_T, c_S

    @property
    def num_source_classes(self):
        return self.W_s_T.shape[0]

    def teacher_weights(self):
        if self.W_t_T is None:
            return self.W_s_T
        return torch.cat([self.W_s_T, self.W_t_T], dim=0)

    def replace_target_blocks(self, W_t_T, W_t_S, momentum=None, optimizers=None):
        """Install new target blocks; ``optimizers`` is (teacher_opt, student_opt)."""
        old = (self.W_t_T, self.W_t_S)
        self.K_hat = self.K
        self.W_t_T = nn.Parameter(W_t_T.detach().to(self.W_s_T.dtype).clone())
        self.W_t_S = nn.Parameter(W_t_S.detach().to(self.W_s_T.dtype).clone())
        self.K = len(W_t_T)
        if optimizers is not None:
            mom_T, mom_S = momentum if momentum is not None else (None, None)
            swap_param(optimizers[0], old[0], self.W_t_T, mom_T)
            swap_param(optimizers[1], old[1], self.W_t_S, mom_S)

    def update(self, centers_T, centers_S, optimizers=None, smooth=True, normalize_init=False):
        """Per-epoch classifier refresh: SCU when possible, otherwise center init."""
        centers_T = torch.as_tensor(centers_T, dtype=self.W_s_T.dtype)
        centers_S = torch.as_tensor(centers_S, dtype=self.W_s_T.dtype)
        if len(centers_T) == 0:
            raise InvalidState("no clusters this epoch")
        if smooth and self.W_t_T is not None:
            mom_T = get_momentum(optimizers[0], self.W_t_T) if optimizers else None
            mom_S = get_momentum(optimizers[1], self.W_t_S) if optimizers else None
            W_T, m_T = smooth_update(self.W_t_T.detach(), mom_T, centers_T)
            W_S, m_S = smooth_update(self.W_t_S.detach(), mom_S, centers_S)
        else:
            W_T, m_T, W_S, m_S = initialize_target_blocks(centers_T, centers_S,
                                                          normalize_init)
        self.replace_target_blocks(W_T, W_S, (m_T, m_S), optimizers)

    def blocks(self):
        return {"W_s_T": self.W_s_T.detach().clone(),
                "W_t_T": None if self.W_t_T is None else self.W_t_T.detach().clone(),
                "W_t_S": None if self.W_t_S is None else self.W_t_S.detach().clone(),
                "K": self.K, "K_hat": self.K_hat}

    def load_blocks(self, blocks):
        self.W_s_T = nn.Parameter(blocks["W_s_T"].clone())
        self.W_t_T = None if blocks["W_t_T"] is None else nn.Parameter(blocks["W_t_T"].clone())
        self.W_t_S = None if blocks["W_t_S"] is None else nn.Parameter(blocks["W_t_S"].clone())
        self.K, self.K_hat = blocks["K"], blocks["K_hat"]


def get_momentum(optimizer, param):
    if optimizer is None or param is None:
        return None
    buf = optimizer.state.get(param, {}).get("momentum_buffer")
    return torch.zeros_like(param) if buf is None else buf.detach().clone()


def swap_param(optimizer, old, new, momentum=None):
    """Replace ``old`` by ``new`` in the optimizer (or add it to group 0)."""
    if old is not None:
        for group in optimizer.param_groups:
            for i, p in enumerate(group["params"]):
                if p is old:
                    group["params"][i] = new
                    optimizer.state.pop(old, None)
                    break
            else:
                continue
            break
        else:
            optimizer.param_groups[0]["params"].append(new)
    else:
        optimizer.param_groups[0]["params"].append(new)
    if momentum is not None:
        optimizer.state[new] = {"momentum_buffer": momentum.detach().clone().to(new.dtype)}
