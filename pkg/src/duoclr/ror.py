"""Relative order reasoning: which of the G! mappings links two permutations."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ProjectionSet


@dataclass(frozen=True)
class MappingLabel:
    index: int
    granularity: int

    def __post_init__(self):
        if not 0 <= self.index < math.factorial(self.granularity):
            raise ValueError(f"mapping index {self.index} out of range for G={self.granularity}")

    def one_hot(self) -> list[int]:
        out = [0] * math.factorial(self.granularity)
        out[self.index] = 1
        return out


def _check_same_set(perm_i: Sequence, perm_j: Sequence):
    if len(perm_i) != len(perm_j) or set(perm_i) != set(perm_j) or len(set(perm_j)) != len(perm_j):
        raise ValueError("permutations must cover the same identities")


def relative_order(perm_i: Sequence, perm_j: Sequence) -> tuple[int, ...]:
    """Position in ``perm_j`` of each element of ``perm_i``."""
    _check_same_set(perm_i, perm_j)
    where = {key: pos for pos, key in enumerate(perm_j)}
    return tuple(where[key] for key in perm_i)


def permutation_rank(sigma: Sequence[int]) -> int:
    """Lexicographic rank of a permutation of ``0..G-1`` (Lehmer code)."""
    remaining = sorted(sigma)
    rank = 0
    for k, value in enumerate(sigma):
        pos = remaining.index(value)
        rank += pos * math.factorial(len(sigma) - 1 - k)
        remaining.pop(pos)
    return rank


def permutation_unrank(index: int, g: int) -> tuple[int, ...]:
    remaining = list(range(g))
    out = []
    for k in range(g):
        f = math.factorial(g - 1 - k)
        pos, index = divmod(index, f)
        out.append(remaining.pop(pos))
    return tuple(out)


def mapping_index(perm_i: Sequence, perm_j: Sequence) -> MappingLabel:
    """Label of the mapping from ``perm_i`` to ``perm_j``.

    For ``perm_j = (c, b, a)`` the labels enumerate ``(c, b, a), (c, a, b),
    (b, c, a), (b, a, c), ...``; ``perm_i = (b, a, c)`` gets index 3.
    """
    sigma = relative_order(perm_i, perm_j)
    return MappingLabel(permutation_rank(sigma), len(sigma))


def mapping_from_index(label: MappingLabel, perm_j: Sequence) -> tuple:
    if label.granularity != len(perm_j):
        raise ValueError("label granularity does not match the permutation")
    if not 0 <= label.index < math.factorial(label.granularity):
        raise ValueError("mapping index out of range")
    sigma = permutation_unrank(label.index, label.granularity)
    return tuple(perm_j[s] for s in sigma)


def positional_encoding(proj_i: ProjectionSet, proj_j: ProjectionSet,
                        perm_i: Sequence, perm_j: Sequence) -> torch.Tensor:
    """Concatenate ``|z_i^(n) - z_j^(m)|`` over n in ``perm_i`` (outer) and m in ``perm_j``."""
    _check_same_set(perm_i, perm_j)
    if set(proj_i.local) != set(perm_i) or set(proj_j.local) != set(perm_j):
        raise ValueError("projections do not match the permutations")
    blocks = [torch.abs(proj_i.local[n] - proj_j.local[m]) for n in perm_i for m in perm_j]
    return torch.cat(blocks)


class RORHead(nn.Module):
    """Fully connected layer from ``C3 * G^2`` encodings to ``G!`` mapping logits."""

    def __init__(self, c3: int, granularity: int, seed: int = 0):
        super().__init__()
        self.granularity = granularity
        self.fc = nn.Linear(c3 * granularity ** 2, math.factorial(granularity))
        gen = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(self.fc.in_features)
        with torch.no_grad():
            self.fc.weight.uniform_(-bound, bound, generator=gen)
            self.fc.bias.zero_()

    def forward(self, pe: torch.Tensor) -> torch.Tensor:
        return self.fc(pe)


def ror_loss(head: RORHead, pe: torch.Tensor, label: MappingLabel) -> torch.Tensor:
    """Softmax cross-entropy of the head's logits against the mapping label."""
    if pe.shape[-1] != head.fc.in_features:
        raise ValueError(f"encoding has {pe.shape[-1]} features, head expects {head.fc.in_features}")
    if label.granularity != head.granularity:
        raise ValueError("label granularity does not match the head")
    logits = head(pe.reshape(1, -1))
    return F.cross_entropy(logits, torch.tensor([label.index]))
