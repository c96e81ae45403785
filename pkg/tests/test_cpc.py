import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from duoclr.cpc import (
    CLASS_BANK_SIZE,
    PERMUTATION_BANK_SIZE,
    BankSet,
    MemoryBank,
    cpc_loss,
    cpc_terms,
    info_nce,
    instance_loss,
    permutation_loss,
    update_banks,
)
from duoclr.encoder import ProjectionSet


def infonce_oracle(anchor, positive, negatives, tau):
    """Plain numpy InfoNCE with exp(cosine / tau) terms."""
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    num = math.exp(cos(anchor, positive) / tau)
    den = num + sum(math.exp(cos(anchor, n) / tau) for n in negatives)
    return -math.log(num / den)


def vec(rng, d=6):
    return torch.tensor(rng.normal(size=d), dtype=torch.float64)


# -- InfoNCE ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_info_nce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, p = vec(rng), vec(rng)
    negs = [vec(rng) for _ in range(7)]
    got = info_nce(a, p, negs, 0.5).item()
    want = infonce_oracle(a.numpy(), p.numpy(), [n.numpy() for n in negs], 0.5)
    assert abs(got - want) < 1e-12


def test_empty_negatives_give_exact_zero():
    rng = np.random.default_rng(0)
    assert instance_loss(vec(rng), vec(rng), [], 0.07).item() == 0.0
    assert permutation_loss(vec(rng), vec(rng), MemoryBank(4), 0.07).item() == 0.0


def test_negative_equal_to_positive_gives_log_two():
    rng = np.random.default_rng(1)
    a, p = vec(rng), vec(rng)
    assert abs(instance_loss(a, p, [p.clone()], 0.07).item() - math.log(2)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_loss_is_positive_with_negatives(seed, k):
    rng = np.random.default_rng(seed)
    loss = instance_loss(vec(rng), vec(rng), [vec(rng) for _ in range(k)], 0.2).item()
    assert loss > 0


def test_permutation_loss_grows_as_negatives_are_added():
    rng = np.random.default_rng(2)
    a, p = vec(rng), vec(rng)
    bank = MemoryBank(16)
    prev = permutation_loss(a, p, bank, 0.1).item()
    for _ in range(10):
        bank.enqueue(vec(rng))
        cur = permutation_loss(a, p, bank, 0.1).item()
        assert cur > prev
        prev = cur


def test_closer_negative_never_lowers_the_loss():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, p = vec(rng), vec(rng)
        negs = [vec(rng) for _ in range(4)]
        base = info_nce(a, p, negs, 0.1).item()
        # blend one negative toward the anchor: its cosine to the anchor rises
        k = int(rng.integers(4))
        closer = list(negs)
        closer[k] = 0.5 * negs[k] / negs[k].norm() + 0.5 * a / a.norm()
        assert torch.dot(closer[k], a) / closer[k].norm() >= torch.dot(negs[k], a) / negs[k].norm()
        assert info_nce(a, p, closer, 0.1).item() >= base


def test_gradients_reach_anchor_and_positive_not_negatives():
    rng = np.random.default_rng(4)
    a, p = vec(rng).requires_grad_(), vec(rng).requires_grad_()
    n = vec(rng).requires_grad_()
    info_nce(a, p, [n], 0.1).backward()
    assert a.grad is not None and p.grad is not None
    assert n.grad is None


def test_permutation_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    bank = MemoryBank(8)
    for _ in range(5):
        bank.enqueue(vec(rng))
    a, p = vec(rng).requires_grad_(), vec(rng).requires_grad_()
    loss = permutation_loss(a, p, bank, 0.07)
    ga, gp = torch.autograd.grad(loss, [a, p])
    for x, g in ((a, ga), (p, gp)):
        num = torch.zeros_like(x)
        for i in range(len(x)):
            d = torch.zeros_like(x)
            d[i] = 1e-6
            with torch.no_grad():
                args_up = (a + d, p) if x is a else (a, p + d)
                args_dn = (a - d, p) if x is a else (a, p - d)
                num[i] = (permutation_loss(*args_up, bank, 0.07)
                          - permutation_loss(*args_dn, bank, 0.07)) / 2e-6
        assert (g - num).norm() / num.norm() < 1e-6


# -- banks -------------------------------------------------------------------------

@pytest.mark.parametrize("capacity", [8, 64])
def test_bank_keeps_the_most_recent_entries(capacity):
    bank = MemoryBank(capacity)
    keys = torch.arange(10 * capacity, dtype=torch.float64)[:, None].repeat(1, 3)
    for k in keys:
        bank.enqueue(k)
        assert len(bank) <= capacity
    assert len(bank) == capacity
    assert torch.equal(bank.contents(), keys[-capacity:])


def test_bank_chunked_enqueue_matches_single_enqueues():
    rng = np.random.default_rng(0)
    keys = torch.tensor(rng.normal(size=(50, 4)))
    one, chunked = MemoryBank(12), MemoryBank(12)
    for k in keys:
        one.enqueue(k)
    for a, b in ((0, 3), (3, 10), (10, 31), (31, 45), (45, 50)):
        chunked.enqueue(keys[a:b])
    assert torch.equal(one.contents(), chunked.contents())


def test_full_capacity_banks_smoke():
    assert (CLASS_BANK_SIZE, PERMUTATION_BANK_SIZE) == (684, 32768)
    banks = BankSet()
    keys = torch.randn(PERMUTATION_BANK_SIZE + 100, 4, generator=torch.Generator().manual_seed(0))
    banks.permutation_bank.enqueue(keys)
    assert torch.equal(banks.permutation_bank.contents(), keys[-PERMUTATION_BANK_SIZE:])
    for k in keys[:CLASS_BANK_SIZE + 1]:
        banks.bank(0).enqueue(k)
    assert len(banks.bank(0)) == CLASS_BANK_SIZE
    assert torch.equal(banks.bank(0).contents()[0], keys[1])


def test_bank_entries_are_detached_and_stable():
    bank = MemoryBank(4)
    z = torch.ones(3, requires_grad=True)
    bank.enqueue(z * 2)
    snap = bank.contents().clone()
    with torch.no_grad():
        z.add_(5.0)
    assert not bank.contents().requires_grad
    assert torch.equal(bank.contents(), snap)


def _projection(rng, keys, d=5):
    return ProjectionSet({k: vec(rng, d) for k in keys}, vec(rng, d))


def test_update_banks_after_one_step():
    rng = np.random.default_rng(0)
    banks = BankSet(8, 16)
    update_banks(banks, _projection(rng, [2, 0, 4]), (2, 0, 4))
    assert sorted(banks.class_banks) == [0, 2, 4]
    assert all(len(b) == 1 for b in banks.class_banks.values())
    assert len(banks.permutation_bank) == 1


def test_bank_determinism():
    def run():
        rng = np.random.default_rng(9)
        banks = BankSet(4, 8)
        for _ in range(20):
            update_banks(banks, _projection(rng, [0, 1]), (1, 0))
        return banks
    a, b = run(), run()
    assert torch.equal(a.permutation_bank.contents(), b.permutation_bank.contents())
    assert torch.equal(a.bank(1).contents(), b.bank(1).contents())


# -- the gated objective --------------------------------------------------------------

def _filled_banks(rng, keys, n=6):
    banks = BankSet(16, 32)
    for _ in range(n):
        update_banks(banks, _projection(rng, keys), tuple(keys))
    return banks


def test_equal_permutations_use_the_permutation_branch_only():
    rng = np.random.default_rng(1)
    banks = _filled_banks(rng, ["a", "b", "c"])
    pi, pj = _projection(rng, "abc"), _projection(rng, "abc")
    terms = cpc_terms(pi, pj, banks, ("b", "a", "c"), ("b", "a", "c"), 0.07)
    assert terms.lam == 0
    assert terms.instance.item() == 0.0
    want = permutation_loss(pi.global_, pj.global_, banks.permutation_bank, 0.07)
    assert terms.total.item() == want.item()


def test_different_permutations_use_the_instance_branch_only():
    rng = np.random.default_rng(2)
    banks = _filled_banks(rng, ["a", "b", "c"])
    pi, pj = _projection(rng, "abc"), _projection(rng, "abc")
    terms = cpc_terms(pi, pj, banks, ("b", "a", "c"), ("c", "b", "a"), 0.07)
    assert terms.lam == 1
    assert terms.permutation.item() == 0.0
    want = 0.0
    for n in "abc":
        negs = [z.numpy() for m, b in banks.class_banks.items() if m != n for z in b.contents()]
        want += infonce_oracle(pi.local[n].numpy(), pj.local[n].numpy(), negs, 0.07)
    assert abs(terms.total.item() - want) < 1e-9
    assert cpc_loss(pi, pj, banks, ("b", "a", "c"), ("c", "b", "a"), 0.07).item() == terms.total.item()


def test_empty_banks_give_zero():
    rng = np.random.default_rng(3)
    pi, pj = _projection(rng, "abc"), _projection(rng, "abc")
    banks = BankSet(8, 8)
    for pj_perm in (("a", "b", "c"), ("c", "a", "b")):
        assert cpc_loss(pi, pj, banks, ("a", "b", "c"), pj_perm, 0.07).item() == 0.0


def test_mismatched_permutations():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError, match="mismatched permutations"):
        cpc_loss(_projection(rng, "abc"), _projection(rng, "abd"), BankSet(4, 4),
                 ("a", "b", "c"), ("a", "b", "d"), 0.07)
