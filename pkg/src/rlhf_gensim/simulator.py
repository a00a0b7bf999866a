"""Discrete-event execution of one generation phase against actual lengths.

Time starts when the learner finishes the previous update. Every decode
actor is launched at t=0, becomes ready once its weights (and, with a shared
prefill actor, its prefix KV) have arrived, then decodes one token per live
response per tick. A tick lasts ``tpot(live responses, longest live
context)``; the same rule drives the planner's estimates.

Three execution modes:

``ranked``
    Once ``tau`` of an actor's assigned responses are done and the actor has
    run past its planned horizon, its remaining responses are cut and moved,
    one at a time, to the live actor with the most free slots (ties to the
    lower id). A response moves at most once. Without a free slot the
    response keeps decoding where it is.
``global``
    When ``tau`` of all responses in the step are done, every actor stops and
    ships its unfinished responses to the lowest-id live actor.
``none``
    No cuts.

A fixed (serverful) allocation keeps every actor until the slowest one is
done; elastic allocations release each actor as soon as it has no work left.

Migrated responses resume from their generated prefix after a
``payload / bandwidth`` delay.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

from .errors import TraceValidationError
from .placement import PlacementPlan
from .planner import GenerationPlan
from .profile import LatencyProfile
from .workload import StepRecord

MODES = ("ranked", "global", "none")
STRATEGY_MODE = {"elastic": "ranked", "static_baseline": "none", "global_cut_baseline": "global"}
HELD_STRATEGIES = frozenset({"static_baseline"})


@dataclass(frozen=True)
class SimConfig:
    tau: float = 0.7
    kv_bytes_per_token: float = 36864.0
    # bytes per token moved on migration; None reuses kv_bytes_per_token, inf disables migration
    migration_bytes_per_token: float | None = None
    prep_latency: float = 0.0
    learn_latency: float = 0.0
    record_events: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @property
    def migration_bytes(self) -> float:
        return self.kv_bytes_per_token if self.migration_bytes_per_token is None else self.migration_bytes_per_token


@dataclass
class SimResult:
    step_idx: int
    strategy: str
    wall_time: float
    generation_time: float
    actor_intervals: dict[int, tuple[float, float]]
    actor_gpus: dict[int, int]
    decode_spans: dict[int, tuple[float, float]]
    busy: dict[int, float]
    prefill_interval: tuple[float, float] | None
    prefill_gpus: int
    gpu_seconds: float
    dollars: float
    cuts: int
    migrations: int
    migration_seconds: float
    prefill_tokens: int
    redundant_prefill_tokens: int
    n_actors: int
    generated: dict[tuple[str, int], int] = field(repr=False, default_factory=dict)
    finished_count: dict[tuple[str, int], int] = field(repr=False, default_factory=dict)
    events: list[dict] = field(repr=False, default_factory=list)

    def row(self) -> dict:
        return {
            "step": self.step_idx, "strategy": self.strategy, "n_actors": self.n_actors,
            "wall_time": self.wall_time, "generation_time": self.generation_time,
            "gpu_seconds": self.gpu_seconds, "dollars": self.dollars, "cuts": self.cuts,
            "migrations": self.migrations, "migration_seconds": self.migration_seconds,
            "prefill_tokens": self.prefill_tokens, "redundant_prefill_tokens": self.redundant_prefill_tokens,
        }


class _Resp:
    __slots__ = ("key", "plen", "target", "base", "loc", "home", "moved", "done", "gen_at_move", "final")

    def __init__(self, key, plen, target, home):
        self.key = key
        self.plen = plen
        self.target = target
        self.base = 0          # generated = actor tick counter + base
        self.loc = home        # hosting actor id, None while in transit
        self.home = home
        self.moved = False
        self.done = False
        self.gen_at_move = 0
        self.final = None


class _Actor:
    def __init__(self, aid, gpus, gpu_count, horizon, responses):
        self.id = aid
        self.gpus = gpus
        self.gpu_count = gpu_count
        self.horizon = horizon
        self.assigned = len(responses)
        self.capacity = len(responses)
        self.active = len(responses)
        self.done_local = 0
        self.pending_in = 0
        self.incoming: list[_Resp] = []
        self.k = 0
        self.fin: list = []
        self.ctx: list = []
        self.members: list[_Resp] = list(responses)
        self.ticking = False
        self.tick_start = 0.0
        self.tick_end = 0.0
        self.epoch = 0
        self.triggered = False
        self.queue: list[_Resp] = []
        self.queued = False
        self.released = False
        self.start = 0.0
        self.release = 0.0
        self.decode_start = None
        self.last_finish = 0.0
        self.busy = 0.0
        self.outgoing_until = 0.0
        self.ready_at = 0.0


class _StepSim:
    def __init__(self, plan: GenerationPlan, placement: PlacementPlan, actual: StepRecord, cfg: SimConfig,
                 profile: LatencyProfile, mode: str, hold: bool = False):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.plan, self.pp, self.cfg, self.profile, self.mode = plan, placement, cfg, profile, mode
        self.hold = hold
        self.heap: list = []
        self.seq = itertools.count()
        self.events: list[dict] = []
        self.cuts = 0
        self.migrations = 0
        self.migration_seconds = 0.0
        self.total = 0
        self.total_done = 0
        self.global_fired = False
        self.global_pending = False
        self.actors: dict[int, _Actor] = {}
        self.resps: list[_Resp] = []

        planned = {pid for g in plan.groups for pid in g.prompt_ids}
        if planned != set(actual.scheduled_prompts) or len(planned) != sum(len(g) for g in plan.groups):
            raise TraceValidationError(f"step {actual.step_idx}: plan and actual batch differ")
        for g in plan.groups:
            rs = []
            for pid, plen in zip(g.prompt_ids, g.prompt_lens):
                lens = actual.actual_lengths[pid]
                if len(lens) != g.responses_per_prompt:
                    raise TraceValidationError(
                        f"step {actual.step_idx}, prompt {pid!r}: plan expects {g.responses_per_prompt} "
                        f"responses, actual has {len(lens)}")
                for j, ln in enumerate(lens):
                    rs.append(_Resp((pid, j), plen, int(ln), g.actor_id))
            self.resps.extend(rs)
            self.actors[g.actor_id] = _Actor(g.actor_id, placement.gpus[g.actor_id], g.gpu_count, g.horizon, rs)
        self.total = len(self.resps)

    # -- helpers

    def log(self, t, event, actor, **kw):
        if self.cfg.record_events:
            self.events.append({"t": t, "event": event, "actor": actor, **kw})

    def push(self, t, kind, aid, data=None):
        heapq.heappush(self.heap, (t, next(self.seq), kind, aid, data))

    def _admit(self, a: _Actor, r: _Resp):
        gen = r.gen_at_move
        r.base = gen - a.k
        r.loc = a.id
        a.pending_in -= 1
        a.active += 1
        heapq.heappush(a.fin, (r.target - r.base, next(self.seq), r))
        heapq.heappush(a.ctx, (-(r.plen + r.base), next(self.seq), r))

    def _max_ctx(self, a: _Actor) -> int:
        ctx = a.ctx
        while ctx and (ctx[0][2].loc != a.id or ctx[0][2].done):
            heapq.heappop(ctx)
        return a.k - ctx[0][0]

    def _start_tick(self, a: _Actor, t: float):
        dur = self.profile.tpot(a.active, self._max_ctx(a))
        a.ticking = True
        a.tick_start, a.tick_end = t, t + dur
        a.busy += dur
        self.push(t + dur, "tick", a.id, a.epoch)

    def _release(self, a: _Actor, t: float):
        a.released = True
        a.ticking = False
        a.release = max(t, a.outgoing_until)
        if not self.hold:
            self.log(a.release, "release", a.id)

    def _free_slots(self, a: _Actor) -> int:
        return a.capacity - a.active - a.pending_in

    def _send(self, src: _Actor, dst: _Actor, r: _Resp, t: float) -> bool:
        gen = src.k + r.base
        payload = (r.plen + gen) * self.cfg.migration_bytes
        delay = payload / self.pp.bandwidth(src.id, dst.id) if payload > 0 else 0.0
        if not math.isfinite(delay):
            return False
        r.gen_at_move = gen
        r.loc = None
        r.moved = True
        src.active -= 1
        dst.pending_in += 1
        src.outgoing_until = max(src.outgoing_until, t + delay)
        self.migrations += 1
        self.migration_seconds += delay
        self.log(t, "migrate", src.id, response=list(r.key), to=dst.id, generated=gen, delay=delay)
        self.push(t + delay, "arrive", dst.id, r)
        return True

    # -- policies

    def _ranked_policy(self, a: _Actor, t: float):
        if not a.triggered and a.done_local >= self.cfg.tau * a.assigned - 1e-9:
            a.triggered = True
            self.log(t, "trigger", a.id, done=a.done_local, assigned=a.assigned)
        if not a.triggered or a.k < a.horizon:
            return
        if not a.queued:
            a.queued = True
            a.queue = sorted((r for r in a.members if r.loc == a.id and not r.done and not r.moved),
                             key=lambda r: r.key)
            for r in a.queue:
                self.cuts += 1
                self.log(t, "cut", a.id, response=list(r.key), generated=a.k + r.base)
        if not a.queue:
            return
        keep = []
        for r in a.queue:
            if r.done or r.loc != a.id:
                continue
            dst = self._pick_destination(a)
            if dst is None or not self._send(a, dst, r, t):
                keep.append(r)
        a.queue = keep

    def _pick_destination(self, src: _Actor) -> _Actor | None:
        best, best_free = None, 0
        for b in sorted(self.actors.values(), key=lambda x: x.id):
            if b is src or b.released or b.decode_start is None:
                continue
            free = self._free_slots(b)
            if free > best_free:
                best, best_free = b, free
        return best

    def _global_due(self) -> bool:
        return not self.global_fired and self.total_done >= self.cfg.tau * self.total - 1e-9

    def _global_policy(self, t: float):
        if not self._global_due():
            return
        self.global_fired = True
        live = sorted((a for a in self.actors.values() if not a.released), key=lambda a: a.id)
        self.log(t, "global_cut", None, done=self.total_done, total=self.total)
        if not live:
            return
        dst = live[0]
        for a in live[1:]:
            moving = sorted((r for r in a.members if r.loc == a.id and not r.done), key=lambda r: r.key)
            if a.ticking:
                # abandon the tick in flight; its tokens were never produced
                a.busy -= a.tick_end - t
                a.epoch += 1
                a.ticking = False
            for r in moving:
                dst.capacity += 1
                self.cuts += 1
                self.log(t, "cut", a.id, response=list(r.key), generated=a.k + r.base)
                if not self._send(a, dst, r, t):
                    # unreachable destination: leave it in place
                    dst.capacity -= 1
            if a.active == 0 and a.pending_in == 0:
                self._release(a, t)
            elif not a.ticking and a.decode_start is not None:
                self._start_tick(a, t)

    # -- main loop

    def run(self, prefill_done: float, ready: dict[int, float]):
        for a in self.actors.values():
            a.start = 0.0
            self.log(0.0, "start", a.id, gpus=list(a.gpus))
            for r in a.members:
                heapq.heappush(a.fin, (r.target, next(self.seq), r))
                heapq.heappush(a.ctx, (-r.plen, next(self.seq), r))
            a.ready_at = ready[a.id]
            self.push(ready[a.id], "ready", a.id)

        while self.heap:
            t, _, kind, aid, data = heapq.heappop(self.heap)
            a = self.actors[aid]
            if kind == "ready":
                if a.released:
                    continue
                a.decode_start = t
                self.log(t, "ready", aid)
                self._start_tick(a, t)
            elif kind == "arrive":
                self.log(t, "arrive", aid, response=list(data.key))
                a.incoming.append(data)
                if not a.ticking and not a.released:
                    for r in a.incoming:
                        self._admit(a, r)
                    a.incoming.clear()
                    self._start_tick(a, t)
            elif kind == "tick":
                if data != a.epoch or a.released:
                    continue
                self._on_tick(a, t)
            elif kind == "global":
                self._global_policy(t)
        if self.hold:
            end = max(a.release for a in self.actors.values())
            for a in sorted(self.actors.values(), key=lambda x: x.id):
                a.release = end
                self.log(end, "release", a.id)

    def _on_tick(self, a: _Actor, t: float):
        a.ticking = False
        a.k += 1
        fin = a.fin
        while fin and fin[0][0] <= a.k:
            _, _, r = heapq.heappop(fin)
            if r.loc != a.id or r.done:
                continue
            r.done = True
            r.final = a.k + r.base
            a.active -= 1
            a.last_finish = t
            self.total_done += 1
            if r.home == a.id and not r.moved:
                a.done_local += 1
            self.log(t, "finish", a.id, response=list(r.key), length=r.target)
        if a.incoming:
            for r in a.incoming:
                self._admit(a, r)
            a.incoming.clear()
        if self.mode == "ranked":
            self._ranked_policy(a, t)
        elif self.mode == "global" and not self.global_pending and self._global_due():
            # fire after every event already due at t, so ticks ending now complete first
            self.global_pending = True
            self.push(t, "global", a.id)
        if a.ticking:
            return
        if a.active > 0:
            self._start_tick(a, t)
        elif a.pending_in == 0:
            self._release(a, t)


def _ready_times(plan: GenerationPlan, pp: PlacementPlan, profile: LatencyProfile) -> tuple[float, dict[int, float]]:
    if plan.prefill is not None:
        done = plan.prefill.duration
        return done, {g.actor_id: pp.ready_time(g.actor_id, done) for g in plan.groups}
    # every actor prefills its own responses after the weights arrive
    ready = {}
    for g in plan.groups:
        tokens = g.responses_per_prompt * sum(g.prompt_lens)
        ready[g.actor_id] = pp.l_model[g.actor_id] + profile.prefill_time(tokens)
    return 0.0, ready


def run_step(plan: GenerationPlan, placement: PlacementPlan, actual: StepRecord, cfg: SimConfig,
             profile: LatencyProfile, mode: str | None = None, minimal_prefill_tokens: int | None = None,
             hold: bool | None = None) -> SimResult:
    """Simulate one generation phase.

    ``mode`` and ``hold`` (keep all actors until the last one finishes)
    default from ``plan.strategy``.
    """
    mode = mode or STRATEGY_MODE.get(plan.strategy, "ranked")
    if hold is None:
        hold = plan.strategy in HELD_STRATEGIES
    sim = _StepSim(plan, placement, actual, cfg, profile, mode, hold)
    prefill_done, ready = _ready_times(plan, placement, profile)
    sim.run(prefill_done, ready)

    intervals = {a.id: (a.start, a.release) for a in sim.actors.values()}
    gpus = {a.id: a.gpu_count for a in sim.actors.values()}
    prefill_interval = None
    prefill_gpus = 0
    if plan.prefill is not None:
        prefill_interval = (0.0, plan.prefill.duration)
        prefill_gpus = plan.prefill.gpu_count
        sim.log(0.0, "start", "prefill", gpus=list(placement.prefill_gpus))
        sim.log(plan.prefill.duration, "release", "prefill")
        prefill_tokens = plan.prefill.tokens
    else:
        prefill_tokens = sum(g.responses_per_prompt * sum(g.prompt_lens) for g in plan.groups)
    gpu_seconds = gpu_seconds_of(intervals, gpus, prefill_interval, prefill_gpus)
    end = max([iv[1] for iv in intervals.values()] + ([prefill_interval[1]] if prefill_interval else []))
    minimal = prefill_tokens if minimal_prefill_tokens is None else minimal_prefill_tokens
    return SimResult(
        step_idx=actual.step_idx,
        strategy=plan.strategy,
        wall_time=cfg.prep_latency + end + cfg.learn_latency,
        generation_time=end,
        actor_intervals=intervals,
        actor_gpus=gpus,
        decode_spans={a.id: (a.decode_start, a.last_finish) for a in sim.actors.values()},
        busy={a.id: a.busy for a in sim.actors.values()},
        prefill_interval=prefill_interval,
        prefill_gpus=prefill_gpus,
        gpu_seconds=gpu_seconds,
        dollars=profile.rho * gpu_seconds,
        cuts=sim.cuts,
        migrations=sim.migrations,
        migration_seconds=sim.migration_seconds,
        prefill_tokens=prefill_tokens,
        redundant_prefill_tokens=prefill_tokens - minimal,
        n_actors=len(plan.groups),
        generated={r.key: r.final for r in sim.resps},
        finished_count={r.key: int(r.done) for r in sim.resps},
        events=sorted(sim.events, key=lambda e: e["t"]),
    )


def gpu_seconds_of(intervals, gpus, prefill_interval=None, prefill_gpus=0) -> float:
    total = 0.0
    for aid in sorted(intervals):
        s, e = intervals[aid]
        total += (e - s) * gpus[aid]
    if prefill_interval is not None:
        total += (prefill_interval[1] - prefill_interval[0]) * prefill_gpus
    return total


def baseline_global_cut(plan_static: GenerationPlan, placement: PlacementPlan, actual: StepRecord,
                        cfg: SimConfig, profile: LatencyProfile, **kw) -> SimResult:
    return run_step(plan_static, placement, actual, cfg, profile, mode="global", **kw)
