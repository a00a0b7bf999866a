"""Shared-prefix analysis and prefix-length selection for deduplicated prefill.

``D(L)`` counts the distinct length-``L`` prefixes in a batch, where a prompt
shorter than ``L`` is its own (terminated) prefix. For a fixed batch ``D`` is
non-decreasing in ``L``: extending a prefix can split a class, never merge two.

The index sorts prompts lexicographically. Prefix classes at any ``L`` are
then contiguous runs, and two neighbours fall in different classes at ``L``
exactly when they differ as strings and their longest common prefix is
shorter than ``L``. A histogram of neighbour LCPs gives ``D(L)`` in O(1)
per query; it carries the same per-depth counts a token trie would.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .workload import Prompt


@dataclass(frozen=True)
class PrefillCapacity:
    b_prefill: int
    gpu_count: int = 1

    def __post_init__(self):
        if self.b_prefill < 1:
            raise ValueError(f"b_prefill must be >= 1, got {self.b_prefill}")


@dataclass
class PrefixIndex:
    prompt_ids: tuple[str, ...]       # lexicographic order of token sequences
    lengths: np.ndarray               # prompt length, same order
    _split_at: np.ndarray = field(repr=False)   # split_at[i]: classes i, i+1 first differ at depth split_at[i]+1
    _cum_splits: np.ndarray = field(repr=False)  # cum_splits[L] = #{i : split_at[i] < L}

    @property
    def size(self) -> int:
        return len(self.prompt_ids)

    @property
    def min_len(self) -> int:
        return int(self.lengths.min())

    @property
    def max_len(self) -> int:
        return int(self.lengths.max())

    def unique_prefix_count(self, L: int) -> int:
        if L < 0:
            raise ValueError("prefix length must be non-negative")
        if L == 0:
            return 1
        L = min(L, len(self._cum_splits) - 1)
        return 1 + int(self._cum_splits[L])

    def counts(self, lo: int | None = None, hi: int | None = None) -> dict[int, int]:
        lo = self.min_len if lo is None else lo
        hi = self.max_len if hi is None else hi
        return {L: self.unique_prefix_count(L) for L in range(lo, hi + 1)}

    def class_ids(self, L: int) -> dict[str, int]:
        """Prefix-class label of every prompt at length ``L``."""
        breaks = np.concatenate([[0], (self._split_at < L).astype(np.int64)])
        labels = np.cumsum(breaks)
        return {pid: int(c) for pid, c in zip(self.prompt_ids, labels)}

    def unique_prefix_tokens(self, L: int, subset: set[str] | None = None) -> int:
        """Sum of ``min(len, L)`` over the distinct length-``L`` prefixes
        (restricted to ``subset`` if given)."""
        labels = self.class_ids(L)
        seen: dict[int, int] = {}
        for pid, ln in zip(self.prompt_ids, self.lengths):
            if subset is not None and pid not in subset:
                continue
            seen.setdefault(labels[pid], min(int(ln), L))
        return sum(seen.values())


def build_index(prompts: Sequence[Prompt]) -> PrefixIndex:
    if len(prompts) == 0:
        raise ValueError("cannot index an empty batch")
    ordered = sorted(prompts, key=lambda p: (p.token_ids, p.id))
    lengths = np.fromiter((p.prompt_len for p in ordered), dtype=np.int64, count=len(ordered))
    max_len = int(lengths.max())
    n = len(ordered)
    big = max_len + 1  # "never splits": identical sequences
    if n > 1:
        mat = np.full((n, max_len + 1), -1, dtype=np.int64)
        for i, p in enumerate(ordered):
            mat[i, : p.prompt_len] = p.token_ids
        diff = mat[1:] != mat[:-1]
        any_diff = diff.any(axis=1)
        lcp = np.where(any_diff, diff.argmax(axis=1), big)
        split_at = np.minimum(lcp, big)
    else:
        split_at = np.zeros(0, dtype=np.int64)
    hist = np.bincount(split_at, minlength=big + 1)
    # cum_splits[L] counts neighbours with lcp < L, for L in 0..max_len
    cum = np.concatenate([[0], np.cumsum(hist)])[: max_len + 1]
    return PrefixIndex(tuple(p.id for p in ordered), lengths, split_at, cum)


@dataclass(frozen=True)
class PrefixChoice:
    L_star: int
    unique_count: int
    capacity_exceeded: bool
    L_min: int
    L_max: int


def select_prefix_length(index: PrefixIndex, cap: PrefillCapacity, L_min: int | None = None,
                         L_max: int | None = None) -> PrefixChoice:
    """Largest ``L`` in ``[L_min, L_max]`` with ``D(L) <= b_prefill``.

    When even ``L_min`` does not fit, returns ``L_min`` flagged as
    capacity-exceeded; the prefill then runs in several waves.
    """
    L_min = index.min_len if L_min is None else L_min
    L_max = index.max_len if L_max is None else L_max
    if L_min > L_max:
        raise ValueError(f"L_min {L_min} > L_max {L_max}")
    if cap.b_prefill < 1:
        raise ValueError("b_prefill must be >= 1")
    if index.unique_prefix_count(L_min) > cap.b_prefill:
        return PrefixChoice(L_min, index.unique_prefix_count(L_min), True, L_min, L_max)
    # D is non-decreasing, so the feasible set is an interval starting at L_min
    lo, hi = L_min, L_max
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if index.unique_prefix_count(mid) <= cap.b_prefill:
            lo = mid
        else:
            hi = mid - 1
    return PrefixChoice(lo, index.unique_prefix_count(lo), False, L_min, L_max)


@dataclass(frozen=True)
class DedupSavings:
    raw_prefill_tokens: int
    dedup_prefill_tokens: int
    saved_fraction: float


def dedup_savings(index: PrefixIndex, L_star: int, G: int) -> DedupSavings:
    raw = G * int(index.lengths.sum())
    remainder = int(np.maximum(index.lengths - L_star, 0).sum())
    dedup = index.unique_prefix_tokens(L_star) + remainder
    return DedupSavings(raw, dedup, 1.0 - dedup / raw)


def minimal_prefill_tokens(index: PrefixIndex) -> int:
    """Tokens a perfect prefix cache would compute: distinct token-trie nodes."""
    # a sorted neighbour contributes its tokens beyond the shared prefix
    if index.size == 0:
        return 0
    shared = np.minimum(index._split_at, index.lengths[1:])
    return int(index.lengths[0] + (index.lengths[1:] - shared).sum())


def prefill_report(index: PrefixIndex, choice: PrefixChoice, G: int) -> dict:
    s = dedup_savings(index, choice.L_star, G)
    return {
        "L_min": choice.L_min,
        "L_max": choice.L_max,
        "L_star": choice.L_star,
        "unique_prefixes": choice.unique_count,
        "capacity_exceeded": choice.capacity_exceeded,
        "D": {str(L): c for L, c in index.counts(choice.L_min, choice.L_max).items()},
        "raw_prefill_tokens": s.raw_prefill_tokens,
        "dedup_prefill_tokens": s.dedup_prefill_tokens,
        "saved_fraction": s.saved_fraction,
    }
