"""Prompt assignment, per-actor time/cost estimation and actor-count selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dedup import PrefixChoice
from .profile import LatencyProfile


def decode_ticks(predicted: float) -> int:
    """Whole decode ticks for a (possibly fractional) predicted length."""
    return max(1, math.ceil(predicted - 1e-9))


@dataclass(frozen=True)
class ActorGroup:
    actor_id: int
    prompt_ids: tuple[str, ...]
    predicted_lengths: tuple[float, ...]
    prompt_lens: tuple[int, ...]
    gpu_count: int = 1
    responses_per_prompt: int = 1

    def __len__(self):
        return len(self.prompt_ids)

    @property
    def n_responses(self) -> int:
        return len(self.prompt_ids) * self.responses_per_prompt

    @property
    def horizon(self) -> int:
        """Ticks the planner expects this actor to decode for."""
        return max(decode_ticks(x) for x in self.predicted_lengths)

    def predicted(self) -> dict[str, float]:
        return dict(zip(self.prompt_ids, self.predicted_lengths))


@dataclass(frozen=True)
class PrefillPlan:
    L_star: int
    unique_count: int
    capacity_exceeded: bool
    waves: int
    tokens: int
    raw_tokens: int
    duration: float
    gpu_count: int


@dataclass
class GenerationPlan:
    step_idx: int
    n_actors: int
    groups: list[ActorGroup]
    est_time_per_actor: list[float]
    est_total_time: float
    est_cost: float
    lam: float
    tau: float
    prefill: PrefillPlan | None = None
    prefix: PrefixChoice | None = None
    strategy: str = "elastic"
    candidates: list[dict] = field(default_factory=list)

    def group(self, actor_id: int) -> ActorGroup:
        for g in self.groups:
            if g.actor_id == actor_id:
                return g
        raise KeyError(actor_id)

    def est_time(self, actor_id: int) -> float:
        for g, t in zip(self.groups, self.est_time_per_actor):
            if g.actor_id == actor_id:
                return t
        raise KeyError(actor_id)

    def to_dict(self) -> dict:
        out = {
            "step": self.step_idx,
            "strategy": self.strategy,
            "n_actors": self.n_actors,
            "lambda": self.lam,
            "tau": self.tau,
            "est_total_time": self.est_total_time,
            "est_cost": self.est_cost,
            "groups": [
                {"actor_id": g.actor_id, "prompts": list(g.prompt_ids),
                 "predicted": [round(x, 3) for x in g.predicted_lengths],
                 "gpus": g.gpu_count, "est_time": t}
                for g, t in zip(self.groups, self.est_time_per_actor)
            ],
            "candidates": self.candidates,
        }
        if self.prefill is not None:
            p = self.prefill
            out["prefill"] = {"L_star": p.L_star, "unique_prefixes": p.unique_count,
                              "capacity_exceeded": p.capacity_exceeded, "waves": p.waves,
                              "tokens": p.tokens, "raw_tokens": p.raw_tokens, "duration": p.duration}
        return out


# ---------------------------------------------------------------------------
# assignment


def rank_prompts(predicted: Mapping[str, float]) -> list[str]:
    """Prompt ids by predicted length, longest first, ties by id."""
    return sorted(predicted, key=lambda pid: (-predicted[pid], pid))


def chunk_bounds(n: int, N: int) -> np.ndarray:
    """Start offsets of ``N`` contiguous chunks over ``n`` items; the first
    ``n % N`` chunks hold one extra item."""
    q, r = divmod(n, N)
    sizes = np.full(N, q, dtype=np.int64)
    sizes[:r] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def assign(predicted: Mapping[str, float], N: int, *, prompt_lens: Mapping[str, int] | None = None,
           G: int = 1, gpu_count: int = 1) -> list[ActorGroup]:
    """Rank prompts by predicted length (longest first, ties by id) and cut
    the ranking into ``N`` contiguous, balanced groups."""
    if N < 1:
        raise ValueError(f"actor count must be >= 1, got {N}")
    if not predicted:
        raise ValueError("no prompts to assign")
    if N > len(predicted):
        raise ValueError(f"{N} actors for {len(predicted)} prompts would leave an actor empty")
    order = rank_prompts(predicted)
    bounds = chunk_bounds(len(order), N)
    groups = []
    for i in range(N):
        ids = tuple(order[bounds[i]:bounds[i + 1]])
        groups.append(ActorGroup(
            actor_id=i,
            prompt_ids=ids,
            predicted_lengths=tuple(float(predicted[p]) for p in ids),
            prompt_lens=tuple(int(prompt_lens[p]) if prompt_lens else 0 for p in ids),
            gpu_count=gpu_count,
            responses_per_prompt=G,
        ))
    return groups


def assign_round_robin(predicted: Mapping[str, float], N: int, order: Sequence[str], *,
                       prompt_lens: Mapping[str, int] | None = None, G: int = 1,
                       gpu_count: int = 1) -> list[ActorGroup]:
    """Unranked assignment: prompt ``k`` of the batch goes to actor ``k mod N``."""
    if N < 1 or N > len(order):
        raise ValueError(f"cannot spread {len(order)} prompts over {N} actors")
    groups = []
    for i in range(N):
        ids = tuple(order[i::N])
        groups.append(ActorGroup(
            actor_id=i,
            prompt_ids=ids,
            predicted_lengths=tuple(float(predicted[p]) for p in ids),
            prompt_lens=tuple(int(prompt_lens[p]) if prompt_lens else 0 for p in ids),
            gpu_count=gpu_count,
            responses_per_prompt=G,
        ))
    return groups


# ---------------------------------------------------------------------------
# time and cost estimation


def _sorted_group_times(ticks: np.ndarray, plens: np.ndarray, starts: np.ndarray, G: int,
                        profile: LatencyProfile) -> np.ndarray:
    """Decode time of each contiguous group of a descending tick array.

    Within a group sorted longest-first, ticks ``(l[j+1], l[j]]`` run with
    ``(j+1)*G`` live sequences and context ``max_prompt + k - 1`` where
    ``max_prompt`` is the longest prompt still decoding.
    """
    n = len(ticks)
    gid = np.zeros(n, dtype=np.int64)
    gid[starts[1:-1]] = 1
    gid = np.cumsum(gid)
    big = int(plens.max()) + 1 if n else 1
    run_max = np.maximum.accumulate(plens + gid * big) - gid * big
    nxt = np.zeros(n, dtype=np.int64)
    nxt[:-1] = ticks[1:]
    nxt[starts[1:] - 1] = 0  # last element of each group runs down to zero
    rank = np.arange(n) - starts[gid] + 1
    seg = profile.decode_sum(rank * G, run_max + nxt, run_max + ticks)
    return np.add.reduceat(seg, starts[:-1])


def _group_arrays(group: ActorGroup):
    order = sorted(range(len(group.prompt_ids)),
                   key=lambda i: (-group.predicted_lengths[i], group.prompt_ids[i]))
    ticks = np.array([decode_ticks(group.predicted_lengths[i]) for i in order], dtype=np.int64)
    plens = np.array([group.prompt_lens[i] for i in order], dtype=np.int64)
    return ticks, plens


def estimate_actor_time(group: ActorGroup, profile: LatencyProfile) -> float:
    if len(group) == 0:
        raise ValueError("empty actor group")
    ticks, plens = _group_arrays(group)
    starts = np.array([0, len(ticks)])
    return float(_sorted_group_times(ticks, plens, starts, group.responses_per_prompt, profile)[0])


def estimate_cost(groups: Sequence[ActorGroup], profile: LatencyProfile,
                  times: Sequence[float] | None = None) -> float:
    if times is None:
        times = [estimate_actor_time(g, profile) for g in groups]
    return profile.rho * sum(t * g.gpu_count for t, g in zip(times, groups))


# ---------------------------------------------------------------------------
# actor scaling


TIE_EPS = 1e-9


def normalize(values: Sequence[float]) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to zeros."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


# penalty(N, starts, times) -> extra seconds added to T_total(N); ``starts`` are
# chunk offsets into rank_prompts(predicted)
Penalty = Callable[[int, np.ndarray, list[float]], float]


@dataclass
class ScaleResult:
    n_star: int
    groups: list[ActorGroup]
    times: list[float]
    total_time: float
    cost: float
    candidates: list[dict]


def scale(predicted: Mapping[str, float], profile: LatencyProfile, n_min: int, n_max: int, lam: float, *,
          prompt_lens: Mapping[str, int] | None = None, G: int = 1,
          penalty: Penalty | None = None) -> ScaleResult:
    """Evaluate every actor count in ``[n_min, n_max]`` and return the one
    minimising ``lam * T_norm + (1 - lam) * C_norm`` (ties to fewer actors)."""
    n = len(predicted)
    if not 1 <= n_min <= n_max <= n:
        raise ValueError(f"need 1 <= n_min <= n_max <= {n}, got [{n_min}, {n_max}]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    gpus = profile.gpus_per_actor
    order = rank_prompts(predicted)
    ticks = np.array([decode_ticks(predicted[p]) for p in order], dtype=np.int64)
    plens = np.array([prompt_lens[p] if prompt_lens else 0 for p in order], dtype=np.int64)

    counts = range(n_min, n_max + 1)
    bounds = [chunk_bounds(n, N) for N in counts]
    # every candidate split integrated in one vectorised pass over stacked copies
    k = len(bounds)
    stacked = np.concatenate([b[:-1] + i * n for i, b in enumerate(bounds)] + [[k * n]])
    all_times = _sorted_group_times(np.tile(ticks, k), np.tile(plens, k), stacked, G, profile)
    per_n = []
    pos = 0
    for N, starts in zip(counts, bounds):
        times = all_times[pos:pos + N].tolist()
        pos += N
        total = max(times)
        cost = profile.rho * gpus * sum(times)
        extra = max(0.0, penalty(N, starts, times)) if penalty is not None else 0.0
        per_n.append((N, starts, times, total, cost, extra))

    t_norm = normalize([r[3] + r[5] for r in per_n])
    c_norm = normalize([r[4] for r in per_n])
    obj = lam * t_norm + (1.0 - lam) * c_norm
    # smallest N among objectives equal up to float noise
    best = int(np.flatnonzero(obj <= obj.min() + TIE_EPS)[0])
    candidates = [
        {"N": r[0], "T_total": r[3], "penalty": r[5], "cost": r[4],
         "T_norm": float(t_norm[i]), "C_norm": float(c_norm[i]), "objective": float(obj[i])}
        for i, r in enumerate(per_n)
    ]
    N, starts, times, total, cost, _ = per_n[best]
    groups = _groups_from_order(order, starts, predicted, prompt_lens, G, gpus)
    return ScaleResult(N, groups, times, total, cost, candidates)


def _groups_from_order(order, starts, predicted, prompt_lens, G, gpus) -> list[ActorGroup]:
    out = []
    for i in range(len(starts) - 1):
        ids = tuple(order[starts[i]:starts[i + 1]])
        out.append(ActorGroup(i, ids, tuple(float(predicted[p]) for p in ids),
                              tuple(int(prompt_lens[p]) if prompt_lens else 0 for p in ids), gpus, G))
    return out
