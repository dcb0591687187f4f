"""Padding and per-token log-prob gathering for prompt + trajectory batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .codec import DEFAULT_VOCAB, PAD


@dataclass
class TokenBatch:
    """Right-padded sequences with a mask over the *predicted* positions.

    ``mask[b, j]`` refers to the token at index ``j + 1`` of sequence ``b``,
    i.e. to log-prob row ``j``.
    """

    tokens: torch.Tensor
    mask: torch.Tensor
    weights: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def build_batch(prefixes: Sequence[Sequence[int]], trajectories: Sequence[Sequence[int]],
                positions: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> TokenBatch:
    """Concatenate prefix + trajectory; mark trajectory positions selected by ``positions`` (bool masks)."""
    pad = DEFAULT_VOCAB.id(PAD)
    seqs = [list(p) + list(t) for p, t in zip(prefixes, trajectories)]
    L = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), L), pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), L - 1), dtype=torch.bool)
    w = torch.zeros((len(seqs), L - 1), dtype=torch.float64)
    for b, (s, p, pos) in enumerate(zip(seqs, prefixes, positions)):
        tokens[b, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        idx = np.flatnonzero(np.asarray(pos, dtype=bool)) + len(p) - 1
        mask[b, idx] = True
        w[b, idx] = 1.0 if weights is None else float(weights[b])
    return TokenBatch(tokens, mask, w)


def gather_token_logprobs(logprobs: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """(B, L, V) rows and (B, L) tokens -> (B, L-1) log-prob of each next token."""
    return logprobs[:, :-1].gather(-1, tokens[:, 1:].unsqueeze(-1)).squeeze(-1)


def microbatches(lengths: Sequence[int], max_tokens: int) -> list[list[int]]:
    """Group indices (sorted by length) so each group's padded size stays under ``max_tokens``."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    groups, current, longest = [], [], 0
    for i in order:
        longest_if = max(longest, lengths[i])
        if current and longest_if * (len(current) + 1) > max_tokens:
            groups.append(current)
            current, longest_if = [], lengths[i]
        current.append(i)
        longest = longest_if
    if current:
        groups.append(current)
    return groups
