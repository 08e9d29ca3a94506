import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from daml.config import HyperParams
from daml.errors import ClassCountMismatch, DegenerateBatch, LabelOutOfRange
from daml.losses import (TERMS, LossReport, ce_loss, kl_distill_dom, kl_distill_id,
                         total_loss, triplet_loss)
from oracles import brute_batch_hard, kl

D = torch.float64


def logits_of(p):
    return torch.log(torch.tensor([p], dtype=D))


def test_triplet_identical_features_give_margin():
    x = torch.ones(4, 3, dtype=D)
    assert triplet_loss(x, [0, 0, 1, 1], 1.2).item() == pytest.approx(1.2)


def test_triplet_inactive_hinge():
    x = torch.tensor([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]], dtype=D)
    assert triplet_loss(x, [0, 0, 1, 1], 1.2).item() == 0.0


def test_triplet_hand_example():
    # anchor (0,0): hardest positive (3,4) at 5, nearest negative (0,1) at 1
    x = torch.tensor([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0], [0.0, 1.0]], dtype=D)
    labels = [0, 0, 1, 1]
    d = torch.cdist(x, x)
    per_anchor = [max(1.2 + 5 - 1, 0)]
    for a in (1, 2, 3):
        pos = [d[a, p].item() for p in range(4) if p != a and labels[p] == labels[a]]
        neg = [d[a, q].item() for q in range(4) if labels[q] != labels[a]]
        per_anchor.append(max(1.2 + max(pos) - min(neg), 0))
    assert per_anchor[0] == pytest.approx(5.2)
    # rows 2 and 3 coincide; the distance floor of 1e-6 shifts their terms by at most that
    assert triplet_loss(x, labels, 1.2).item() == pytest.approx(np.mean(per_anchor), abs=1e-6)


def test_triplet_matches_brute_force(rng):
    for _ in range(10):
        n = int(rng.integers(4, 17))
        labels = np.arange(n) % int(rng.integers(2, n // 2 + 1))
        x = rng.normal(size=(n, 3))
        got = triplet_loss(torch.from_numpy(x), labels, 0.7).item()
        assert got == pytest.approx(brute_batch_hard(x, labels, 0.7), abs=1e-9)


def test_triplet_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        triplet_loss(torch.zeros(3, 2), [0, 0, 1])


def test_ce_examples():
    assert ce_loss(torch.zeros(1, 2, dtype=D), [0]).item() == pytest.approx(math.log(2))
    strong = torch.tensor([[10.0, -10.0]], dtype=D)
    assert ce_loss(strong, [0]).item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert ce_loss(strong, [1]).item() == pytest.approx(20 + math.log1p(math.exp(-20)), rel=1e-12)
    with pytest.raises(LabelOutOfRange):
        ce_loss(strong, [2])


def test_kl_examples():
    p, q = (0.75, 0.25), (0.5, 0.5)
    assert kl(p, q) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5))
    assert kl(p, q) == pytest.approx(0.1308, abs=5e-5)
    assert kl(q, p) == pytest.approx(0.1438, abs=5e-5)
    assert kl_distill_id(logits_of(p), logits_of(q)).item() == pytest.approx(kl(p, q), abs=1e-12)
    assert kl_distill_id(logits_of(q), logits_of(p)).item() == pytest.approx(kl(q, p), abs=1e-12)
    # on source samples the student's distribution is the reference
    assert kl_distill_dom(logits_of(p), logits_of(q)).item() == pytest.approx(kl(p, q), abs=1e-12)
    same = torch.randn(3, 4, dtype=D)
    assert kl_distill_id(same, same).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_class_count_mismatch():
    with pytest.raises(ClassCountMismatch):
        kl_distill_id(torch.zeros(2, 3), torch.zeros(2, 4))


def test_kl_reference_side_is_constant():
    ref = torch.randn(3, 4, dtype=D, requires_grad=True)
    other = torch.randn(3, 4, dtype=D, requires_grad=True)
    kl_distill_id(ref, other).backward()
    assert ref.grad is None and other.grad.abs().max() > 0
    ref2 = torch.randn(3, 4, dtype=D, requires_grad=True)
    other2 = torch.randn(3, 4, dtype=D, requires_grad=True)
    kl_distill_dom(ref2, other2).backward()
    assert ref2.grad is None and other2.grad.abs().max() > 0


def test_shift_invariance(rng):
    a = torch.from_numpy(rng.normal(size=(5, 4)))
    b = torch.from_numpy(rng.normal(size=(5, 4)))
    shift = torch.from_numpy(rng.normal(size=(5, 1)) * 50)
    labels = [0, 1, 2, 3, 0]
    assert abs(ce_loss(a + shift, labels).item() - ce_loss(a, labels).item()) < 1e-9
    assert abs(kl_distill_id(a + shift, b - shift).item() - kl_distill_id(a, b).item()) < 1e-9
    assert abs(kl_distill_dom(a - shift, b + shift).item() - kl_distill_dom(a, b).item()) < 1e-9


def test_terms_non_negative(rng):
    a = torch.from_numpy(rng.normal(size=(8, 5)))
    b = torch.from_numpy(rng.normal(size=(8, 5)))
    labels = np.arange(8) % 4
    for value in (triplet_loss(a, labels), ce_loss(a, labels), kl_distill_id(a, b),
                  kl_distill_dom(a, b)):
        assert value.item() >= 0 and math.isfinite(value.item())


def test_total_loss_examples():
    ones = dict.fromkeys(TERMS, 1.0)
    assert total_loss(ones, HyperParams()) == pytest.approx(6.1)
    no_transfer = HyperParams(lambda2=0.0, lambda3=0.0)
    assert total_loss(ones, no_transfer) == pytest.approx(4.2)
    terms = {k: float(i + 1) for i, k in enumerate(TERMS)}
    hp = SimpleNamespace(lambda1=0.1, lambda2=0.7, lambda3=1.2)
    doubled = SimpleNamespace(lambda1=0.1, lambda2=0.7, lambda3=2.4)
    assert total_loss(terms, doubled) - total_loss(terms, hp) == pytest.approx(1.2 * terms["L_dom"])


def test_loss_report_fields():
    assert list(LossReport().as_dict()) == list(TERMS) + ["L_total"]
