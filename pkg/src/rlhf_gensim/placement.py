"""Locality-aware mapping of decode actors onto a GPU cluster.

The prefill actor runs on the learner's GPUs. Decode actors are placed
heaviest-first onto free GPUs ordered by bandwidth to the learner, so the
heaviest actor lands on the learner's node and the lightest ones end up
farthest away. Transfer latencies are point-to-point ``bytes / bandwidth``
estimates; model sync to all actors is assumed to proceed in parallel at full
per-link bandwidth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, PlacementError
from .planner import ActorGroup, GenerationPlan


@dataclass(frozen=True)
class ClusterTopology:
    node_gpus: tuple[int, ...]
    intra_bw: float = 25e9          # bytes/s between GPUs of one node
    inter_bw: float = 12.5e9        # bytes/s across nodes
    learner_gpus: tuple[int, ...] = (0, 1)
    bw_matrix: tuple[tuple[float, ...], ...] | None = None  # node x node, overrides the tiers

    def __post_init__(self):
        if not self.node_gpus or any(g < 1 for g in self.node_gpus):
            raise ConfigError("every node needs at least one GPU")
        if self.bw_matrix is None:
            if self.intra_bw <= 0 or self.inter_bw <= 0:
                raise ConfigError("bandwidths must be positive")
            if self.intra_bw < self.inter_bw:
                raise ConfigError("intra-node bandwidth must be >= inter-node bandwidth")
        else:
            m = np.asarray(self.bw_matrix, dtype=float)
            k = len(self.node_gpus)
            if m.shape != (k, k) or np.any(m <= 0) or not np.allclose(m, m.T):
                raise ConfigError("bandwidth matrix must be square, positive and symmetric")
            if np.any(np.diag(m)[:, None] < m):
                raise ConfigError("intra-node bandwidth must be >= any inter-node bandwidth")
        total = self.total_gpus
        if not self.learner_gpus or any(not 0 <= g < total for g in self.learner_gpus):
            raise ConfigError("learner GPUs must be valid GPU indices")
        if len(set(self.learner_gpus)) != len(self.learner_gpus):
            raise ConfigError("learner GPUs must be distinct")

    @classmethod
    def uniform(cls, n_nodes: int, gpus_per_node: int, learner_gpu_count: int = 2, **kw) -> "ClusterTopology":
        return cls(tuple([gpus_per_node] * n_nodes), learner_gpus=tuple(range(learner_gpu_count)), **kw)

    @property
    def total_gpus(self) -> int:
        return sum(self.node_gpus)

    @cached_property
    def gpu_node(self) -> tuple[int, ...]:
        out = []
        for node, k in enumerate(self.node_gpus):
            out.extend([node] * k)
        return tuple(out)

    def node_bw(self, a: int, b: int) -> float:
        if self.bw_matrix is not None:
            return float(self.bw_matrix[a][b])
        return self.intra_bw if a == b else self.inter_bw

    def nodes_of(self, gpus: Sequence[int]) -> set[int]:
        return {self.gpu_node[g] for g in gpus}

    def bandwidth(self, src: Sequence[int], dst: Sequence[int]) -> float:
        """Bottleneck bandwidth between two GPU sets."""
        return min(self.node_bw(a, b) for a in self.nodes_of(src) for b in self.nodes_of(dst))

    @cached_property
    def free_order(self) -> tuple[int, ...]:
        """Non-learner GPUs, nearest to the learner first."""
        learner = set(self.learner_gpus)
        lnodes = self.nodes_of(self.learner_gpus)

        def key(g):
            node = self.gpu_node[g]
            return (-min(self.node_bw(a, node) for a in lnodes), node, g)

        return tuple(sorted((g for g in range(self.total_gpus) if g not in learner), key=key))

    @cached_property
    def free_bw(self) -> tuple[float, ...]:
        """Bandwidth from the learner to each GPU of :attr:`free_order`."""
        return tuple(self.bandwidth(self.learner_gpus, (g,)) for g in self.free_order)

    def to_dict(self) -> dict:
        out = {"node_gpus": list(self.node_gpus), "intra_bw": self.intra_bw, "inter_bw": self.inter_bw,
               "learner_gpus": list(self.learner_gpus)}
        if self.bw_matrix is not None:
            out["bw_matrix"] = [list(r) for r in self.bw_matrix]
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ClusterTopology":
        try:
            if "node_gpus" in obj:
                nodes = tuple(int(x) for x in obj["node_gpus"])
            else:
                nodes = tuple([int(obj["gpus_per_node"])] * int(obj["nodes"]))
            matrix = obj.get("bw_matrix")
            return cls(
                nodes,
                intra_bw=float(obj.get("intra_bw", 25e9)),
                inter_bw=float(obj.get("inter_bw", 12.5e9)),
                learner_gpus=tuple(int(g) for g in obj.get("learner_gpus", (0, 1))),
                bw_matrix=tuple(tuple(float(x) for x in r) for r in matrix) if matrix else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed topology: {exc}") from None

    @classmethod
    def load(cls, path) -> "ClusterTopology":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"topology file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class TransferSizes:
    model_bytes: float = 0.0
    kv_bytes_per_actor: Mapping[int, float] = field(default_factory=dict)


@dataclass
class PlacementPlan:
    gpus: dict[int, tuple[int, ...]]
    l_model: dict[int, float]
    l_kv: dict[int, float]
    lead_actor: int                  # heaviest actor, next to prefill/learner
    lead_colocated: bool
    prefill_gpus: tuple[int, ...]
    topology: ClusterTopology
    overlap_slack: dict[int, float] = field(default_factory=dict)

    def ready_time(self, actor_id: int, prefill_done: float) -> float:
        """Earliest decode start: weights synced and prefix KV received."""
        return max(self.l_model[actor_id], prefill_done + self.l_kv[actor_id])

    def bandwidth(self, a: int, b: int) -> float:
        return self.topology.bandwidth(self.gpus[a], self.gpus[b])


def kv_transfer_bytes(groups: Sequence[ActorGroup], index, L_star: int, kv_bytes_per_token: float) -> dict[int, float]:
    """Prefix KV each actor pulls from the prefill actor: the distinct
    length-``L_star`` prefixes among its prompts."""
    labels = index.class_ids(L_star)
    lengths = dict(zip(index.prompt_ids, index.lengths.tolist()))
    out = {}
    for g in groups:
        seen = {labels[p]: min(lengths[p], L_star) for p in g.prompt_ids}
        out[g.actor_id] = sum(seen.values()) * kv_bytes_per_token
    return out


def place(plan: GenerationPlan, topo: ClusterTopology, transfer: TransferSizes) -> PlacementPlan:
    return place_groups(plan.groups, plan.est_time_per_actor, topo, transfer)


def place_groups(groups: Sequence[ActorGroup], times: Sequence[float], topo: ClusterTopology,
                 transfer: TransferSizes) -> PlacementPlan:
    ids = [g.actor_id for g in groups]
    kv = [transfer.kv_bytes_per_actor.get(a, 0.0) for a in ids]
    return place_actors(ids, [g.gpu_count for g in groups], times, topo, transfer.model_bytes, kv)


def place_actors(actor_ids: Sequence[int], gpu_counts: Sequence[int], times: Sequence[float],
                 topo: ClusterTopology, model_bytes: float, kv_bytes: Sequence[float]) -> PlacementPlan:
    """Greedy heaviest-first placement over GPUs ordered nearest-to-learner."""
    demand = sum(gpu_counts)
    free = topo.free_order
    if demand > len(free):
        raise PlacementError(
            f"{len(actor_ids)} actors need {demand} GPUs but only {len(free)} are free "
            f"(short by {demand - len(free)})", shortfall=demand - len(free))
    order = sorted(range(len(actor_ids)), key=lambda i: (-times[i], actor_ids[i]))
    free_bw = topo.free_bw
    gpus, l_model, l_kv = {}, {}, {}
    pos = 0
    for rank, i in enumerate(order):
        a, k = actor_ids[i], gpu_counts[i]
        gpus[a] = free[pos:pos + k]
        bw = free_bw[pos + k - 1]  # free GPUs are sorted by falling bandwidth
        pos += k
        l_model[a] = model_bytes / bw
        l_kv[a] = 0.0 if rank == 0 else kv_bytes[i] / bw
    lead = actor_ids[order[0]]
    colocated = topo.nodes_of(gpus[lead]) <= topo.nodes_of(topo.learner_gpus)
    return PlacementPlan(gpus, l_model, l_kv, lead, colocated, tuple(topo.learner_gpus), topo)


def check_overlap(pp: PlacementPlan, plan: GenerationPlan | None, l_prefill: float,
                  decode_times: Mapping[int, float] | None = None) -> dict[int, float]:
    """Slack of the transfer-hiding condition for every non-lead actor.

    ``slack_i = (l_prefill + decode_lead) - (l_model_i + l_kv_i + decode_i)``;
    negative values mean actor ``i``'s transfers are not hidden.
    """
    if decode_times is None:
        decode_times = {g.actor_id: t for g, t in zip(plan.groups, plan.est_time_per_actor)}
    lead = pp.lead_actor
    budget = l_prefill + decode_times[lead]
    slack = {a: budget - (pp.l_model[a] + pp.l_kv[a] + t) for a, t in decode_times.items() if a != lead}
    pp.overlap_slack = slack
    return slack
