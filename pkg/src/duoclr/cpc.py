"""Cross permutation contrasting: memory banks and InfoNCE losses."""

from __future__ import annotations

from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field

import torch

from .encoder import ProjectionSet, similarity

CLASS_BANK_SIZE = 684
PERMUTATION_BANK_SIZE = 32768


class MemoryBank:
    """Fixed-capacity FIFO queue of detached embeddings.

    Stored as a ring buffer; ``contents()`` returns the entries oldest first.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._buf: torch.Tensor | None = None
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def enqueue(self, z: torch.Tensor) -> None:
        z = z.detach().reshape(-1, z.shape[-1])
        if self._buf is None:
            self._buf = torch.zeros(self.capacity, z.shape[-1], dtype=z.dtype)
        n = len(z)
        if n > self.capacity:
            # only the newest `capacity` rows survive; keep the write pointer consistent
            self._next = (self._next + n - self.capacity) % self.capacity
            z = z[n - self.capacity:]
            n = self.capacity
        first = min(n, self.capacity - self._next)
        self._buf[self._next:self._next + first] = z[:first]
        self._buf[: n - first] = z[first:]
        self._next = (self._next + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def contents(self) -> torch.Tensor:
        if self._buf is None:
            return torch.zeros(0, 0)
        if self._size < self.capacity:
            return self._buf[: self._size].clone()
        return torch.cat([self._buf[self._next:], self._buf[: self._next]])


@dataclass
class BankSet:
    class_capacity: int = CLASS_BANK_SIZE
    permutation_capacity: int = PERMUTATION_BANK_SIZE
    class_banks: dict = field(default_factory=dict)
    permutation_bank: MemoryBank | None = None

    def __post_init__(self):
        if self.permutation_bank is None:
            self.permutation_bank = MemoryBank(self.permutation_capacity)

    def bank(self, key: Hashable) -> MemoryBank:
        if key not in self.class_banks:
            self.class_banks[key] = MemoryBank(self.class_capacity)
        return self.class_banks[key]

    def negatives_excluding(self, key: Hashable) -> torch.Tensor | None:
        """Union of all class banks other than ``key`` (None when empty)."""
        parts = [b.contents() for k, b in self.class_banks.items() if k != key and len(b)]
        return torch.cat(parts) if parts else None

    def with_fresh_class_banks(self) -> BankSet:
        """Empty class banks sharing this set's permutation bank."""
        return BankSet(self.class_capacity, self.permutation_capacity, {}, self.permutation_bank)


def _as_matrix(negatives) -> torch.Tensor | None:
    if negatives is None:
        return None
    if isinstance(negatives, (list, tuple)):
        if not negatives:
            return None
        negatives = torch.stack([torch.as_tensor(n) for n in negatives])
    if negatives.numel() == 0:
        return None
    return negatives.detach()


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives, tau: float) -> torch.Tensor:
    """``-log(e(a, p) / (e(a, p) + sum e(a, n)))`` with ``e = exp(cos / tau)``.

    Negatives are treated as constants. Exactly zero when there are none.
    """
    pos = similarity(anchor, positive, tau)
    neg = _as_matrix(negatives)
    if neg is None:
        return pos - pos
    neg = neg.to(anchor.dtype)
    norms = torch.linalg.vector_norm(neg, dim=1)
    if torch.any(norms == 0):
        raise ValueError("zero vector has no direction")
    neg_logits = (neg @ anchor) / (norms * torch.linalg.vector_norm(anchor) * tau)
    logits = torch.cat([pos.reshape(1), neg_logits])
    return torch.logsumexp(logits, dim=0) - pos


def instance_loss(z_i_n, z_j_n, negatives, tau: float) -> torch.Tensor:
    return info_nce(z_i_n, z_j_n, negatives, tau)


def permutation_loss(z_i, z_j, bank: MemoryBank, tau: float) -> torch.Tensor:
    return info_nce(z_i, z_j, bank.contents() if len(bank) else None, tau)


@dataclass
class CPCTerms:
    lam: int
    instance: torch.Tensor
    permutation: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.instance + self.permutation


def cpc_terms(proj_i: ProjectionSet, proj_j: ProjectionSet, banks: BankSet,
              perm_i: Sequence, perm_j: Sequence, tau: float) -> CPCTerms:
    """Both gated branches of the CPC objective; the inactive one is exactly zero."""
    if set(perm_i) != set(perm_j) or len(perm_i) != len(perm_j):
        raise ValueError("mismatched permutations")
    if set(proj_i.local) != set(perm_i) or set(proj_j.local) != set(perm_j):
        raise ValueError("mismatched permutations")
    lam = int(tuple(perm_i) != tuple(perm_j))
    zero = proj_i.global_.sum() * 0
    if lam:
        instance = zero
        for n in perm_i:
            instance = instance + instance_loss(proj_i.local[n], proj_j.local[n],
                                                banks.negatives_excluding(n), tau)
        return CPCTerms(1, instance, zero)
    perm = permutation_loss(proj_i.global_, proj_j.global_, banks.permutation_bank, tau)
    return CPCTerms(0, zero, perm)


def cpc_loss(proj_i, proj_j, banks, perm_i, perm_j, tau: float) -> torch.Tensor:
    return cpc_terms(proj_i, proj_j, banks, perm_i, perm_j, tau).total


def update_banks(banks: BankSet, proj_j: ProjectionSet, perm_j: Sequence) -> None:
    """Push each slot's key projection into its class bank and the global one into the permutation bank."""
    for m in perm_j:
        banks.bank(m).enqueue(proj_j.local[m])
    banks.permutation_bank.enqueue(proj_j.global_)
