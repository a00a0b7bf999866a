"""Per-step planning for each strategy, and the multi-step training loop.

``elastic`` runs the full pipeline: shared-prefix analysis and a dedicated
prefill pass on the learner's GPUs, ranked assignment, actor-count selection
(with the transfer-hiding condition as a soft penalty) and locality-aware
placement. Both baselines use a fixed actor count, round-robin assignment and
per-actor prefill of every response; they differ only in how the simulator
treats stragglers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dedup import (PrefillCapacity, PrefixIndex, build_index, dedup_savings, minimal_prefill_tokens,
                    select_prefix_length)
from .errors import ConfigError
from .placement import ClusterTopology, PlacementPlan, TransferSizes, check_overlap, kv_transfer_bytes, place
from .planner import (GenerationPlan, PrefillPlan, assign_round_robin, estimate_actor_time, estimate_cost,
                      rank_prompts, scale)
from .predictor import LengthHistory, NoiseModel, predict_lengths
from .profile import LatencyProfile
from .simulator import STRATEGY_MODE, SimConfig, SimResult, run_step
from .workload import Prompt, WorkloadTrace

STRATEGIES = tuple(STRATEGY_MODE)


@dataclass(frozen=True)
class PlannerConfig:
    lam: float = 0.7
    n_min: int = 1
    n_max: int | None = None        # None: as many actors as free GPUs allow
    b_prefill: int = 256            # prompts per prefill pass
    dedup: bool = True
    overlap_penalty: bool = True
    static_actors: int = 3          # actor count of both baselines
    model_bytes: float = 6.0e9      # weights shipped to every decode actor

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_min < 1 or (self.n_max is not None and self.n_max < self.n_min):
            raise ConfigError(f"bad actor range [{self.n_min}, {self.n_max}]")
        if self.b_prefill < 1 or self.static_actors < 1:
            raise ConfigError("b_prefill and static_actors must be >= 1")
        if self.model_bytes < 0:
            raise ConfigError("model_bytes must be non-negative")


@dataclass
class StepPlan:
    plan: GenerationPlan
    placement: PlacementPlan
    index: PrefixIndex
    minimal_prefill_tokens: int


def _prefill_plan(index: PrefixIndex, pcfg: PlannerConfig, G: int, profile: LatencyProfile,
                  topo: ClusterTopology):
    cap = PrefillCapacity(pcfg.b_prefill, len(topo.learner_gpus))
    choice = select_prefix_length(index, cap)
    savings = dedup_savings(index, choice.L_star, G)
    waves = math.ceil(choice.unique_count / pcfg.b_prefill) if choice.capacity_exceeded else 1
    tokens = savings.dedup_prefill_tokens
    duration = waves * profile.prefill_time(tokens / waves)
    pf = PrefillPlan(choice.L_star, choice.unique_count, choice.capacity_exceeded, waves, tokens,
                     savings.raw_prefill_tokens, duration, cap.gpu_count)
    return choice, pf


def _chunk_kv_tokens(order: Sequence[str], index: PrefixIndex, L_star: int, plens: dict[str, int]):
    """Per ranked position: prefix tokens it contributes if it is the first
    of its prefix class inside a chunk, and the position of the previous
    member of its class."""
    labels = index.class_ids(L_star)
    weight = np.array([min(plens[p], L_star) for p in order], dtype=float)
    prev = np.empty(len(order), dtype=np.int64)
    last: dict[int, int] = {}
    for i, p in enumerate(order):
        c = labels[p]
        prev[i] = last.get(c, -1)
        last[c] = i
    return weight, prev


def _overlap_penalty(order, index, L_star, plens, pcfg, scfg, topo, profile, l_prefill):
    """Worst negative transfer-hiding slack of each candidate split.

    Array form of ``place_actors`` followed by ``check_overlap``: actors take
    consecutive GPU chunks of the free list heaviest first, and a chunk's
    bandwidth to the learner is that of its last (farthest) GPU.
    """
    weight, prev = _chunk_kv_tokens(order, index, L_star, plens)
    gpus = profile.gpus_per_actor
    free_bw = np.asarray(topo.free_bw)

    def penalty(N: int, starts: np.ndarray, times: list[float]) -> float:
        if N < 2:
            return 0.0
        gid = np.repeat(np.arange(N), np.diff(starts))
        kv = np.add.reduceat(weight * (prev < starts[gid]), starts[:-1]) * scfg.kv_bytes_per_token
        t = np.asarray(times)
        rank_order = np.lexsort((np.arange(N), -t))
        bw = free_bw[np.arange(1, N + 1) * gpus - 1]
        rest = rank_order[1:]
        need = pcfg.model_bytes / bw[1:] + kv[rest] / bw[1:] + t[rest]
        worst = float(np.min(l_prefill + t[rank_order[0]] - need))
        return -worst if worst < 0 else 0.0

    return penalty


def max_actors(topo: ClusterTopology, profile: LatencyProfile) -> int:
    return len(topo.free_order) // profile.gpus_per_actor


def plan_step(step_idx: int, batch: Sequence[Prompt], predicted: dict[str, float], G: int, strategy: str,
              pcfg: PlannerConfig, scfg: SimConfig, profile: LatencyProfile, topo: ClusterTopology,
              index: PrefixIndex | None = None) -> StepPlan:
    """Plan and place one generation phase under ``strategy``."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    index = index or build_index(batch)
    plens = {p.id: p.prompt_len for p in batch}
    n = len(batch)
    limit = max_actors(topo, profile)

    if strategy != "elastic":
        N = min(pcfg.static_actors, n, limit)
        if N < 1:
            raise ConfigError("no free GPUs for a decode actor")
        groups = assign_round_robin(predicted, N, [p.id for p in batch], prompt_lens=plens, G=G,
                                    gpu_count=profile.gpus_per_actor)
        times = [estimate_actor_time(g, profile) for g in groups]
        plan = GenerationPlan(step_idx, N, groups, times, max(times), estimate_cost(groups, profile, times),
                              pcfg.lam, scfg.tau, strategy=strategy)
        pp = place(plan, topo, TransferSizes(pcfg.model_bytes, {}))
        check_overlap(pp, plan, 0.0)
        return StepPlan(plan, pp, index, minimal_prefill_tokens(index))

    choice = prefill = None
    if pcfg.dedup:
        choice, prefill = _prefill_plan(index, pcfg, G, profile, topo)
    hi = min(n, limit, pcfg.n_max if pcfg.n_max is not None else limit)
    lo = min(pcfg.n_min, hi)
    if hi < 1:
        raise ConfigError("no free GPUs for a decode actor")
    penalty = None
    if pcfg.overlap_penalty:
        L_star = choice.L_star if choice else 0
        l_prefill = prefill.duration if prefill else 0.0
        penalty = _overlap_penalty(rank_prompts(predicted), index, L_star, plens, pcfg,
                                   scfg if choice else replace(scfg, kv_bytes_per_token=0.0),
                                   topo, profile, l_prefill)
    res = scale(predicted, profile, lo, hi, pcfg.lam, prompt_lens=plens, G=G, penalty=penalty)
    plan = GenerationPlan(step_idx, res.n_star, res.groups, res.times, res.total_time, res.cost,
                          pcfg.lam, scfg.tau, prefill=prefill, prefix=choice, strategy=strategy,
                          candidates=res.candidates)
    kv = kv_transfer_bytes(res.groups, index, choice.L_star, scfg.kv_bytes_per_token) if choice else {}
    pp = place(plan, topo, TransferSizes(pcfg.model_bytes, kv))
    check_overlap(pp, plan, prefill.duration if prefill else 0.0)
    return StepPlan(plan, pp, index, minimal_prefill_tokens(index))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingResult:
    strategy: str
    steps: list[SimResult]
    plans: list[GenerationPlan] = field(repr=False, default_factory=list)

    def aggregates(self) -> dict:
        s = self.steps
        k = len(s)
        return {
            "strategy": self.strategy,
            "steps": k,
            "mean_step_time": sum(r.wall_time for r in s) / k,
            "mean_generation_time": sum(r.generation_time for r in s) / k,
            "mean_gpu_seconds": sum(r.gpu_seconds for r in s) / k,
            "mean_cost": sum(r.dollars for r in s) / k,
            "mean_actors": sum(r.n_actors for r in s) / k,
            "total_gpu_seconds": sum(r.gpu_seconds for r in s),
            "total_cost": sum(r.dollars for r in s),
            "total_cuts": sum(r.cuts for r in s),
            "total_migrations": sum(r.migrations for r in s),
            "total_redundant_prefill_tokens": sum(r.redundant_prefill_tokens for r in s),
        }


def run_training(trace: WorkloadTrace, strategy: str, pcfg: PlannerConfig, scfg: SimConfig,
                 profile: LatencyProfile, topo: ClusterTopology, *, window: int = 1, alpha: float = 0.5,
                 noise: NoiseModel | None = None, history: LengthHistory | None = None) -> TrainingResult:
    """Replay ``trace`` step by step: predict, plan, place, simulate, observe."""
    if history is None:
        history = LengthHistory(window=window, alpha=alpha, max_response_len=trace.max_response_len)
    out = TrainingResult(strategy, [])
    for step in trace.steps:
        batch = trace.batch(step)
        predicted = predict_lengths(history, batch, noise, step.step_idx)
        sp = plan_step(step.step_idx, batch, predicted, trace.responses_per_prompt, strategy, pcfg, scfg,
                       profile, topo)
        out.steps.append(run_step(sp.plan, sp.placement, step, scfg, profile,
                                  minimal_prefill_tokens=sp.minimal_prefill_tokens))
        out.plans.append(sp.plan)
        history.observe_step(step)
    return out
