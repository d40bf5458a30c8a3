"""Reinforced-routing simulator emitting schema-conformant traces.

Agents act round-robin. The scheduled agent either opens a new cascade by
proposing a root claim, or routes to a visible open claim with probability
proportional to activity**beta (activity starts at 1 and grows by one per
referencing record) and applies an event drawn from the event mix.
Expansion events spawn max(1, Poisson(lambda)) child claims.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from ..errors import ConfigError
from ..trace import (
    TASK_FAMILIES,
    TOPOLOGIES,
    ClaimPayload,
    EventRecord,
    RunMeta,
    SubtaskPayload,
    TraceBundle,
)
from .topology import Topology, build_topology, rewire_toward_effort
from .workload import Workload, WorkloadConfig, generate_workload

MIX_KEYS = ("delegate", "revise", "contradict", "merge", "endorse")
EVENT_OF = {
    "delegate": "delegate_subtask",
    "revise": "revise_claim",
    "contradict": "contradict_claim",
    "merge": "merge_claims",
    "endorse": "endorse_claim",
}
STATUS_OF = {"delegate": "proposed", "revise": "revised", "contradict": "contradictory", "merge": "merged"}
DEFAULT_MIX = {"delegate": 0.25, "revise": 0.30, "contradict": 0.25, "merge": 0.15, "endorse": 0.05}
RECRUIT_MODES = ("leader", "actor")
REWIRE_EVERY = 50
_REJECTION_TRIES = 32


@dataclass(frozen=True)
class SimConfig:
    N: int = 64
    topology: str = "fully_connected"
    task_family: str = "reasoning"
    beta: float = 0.15
    lam: float = 1.0
    event_mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    max_steps: int | None = None
    max_depth: int = 64
    context_budget: int | None = None
    seed: int = 0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    propose_prob: float = 0.5
    closure_prob: float = 0.0
    cascade_capacity: float | None = 3.0
    merge_extra: float = 1.0
    recruit: str = "leader"
    steps_per_agent: int = 60
    run_id: str | None = None

    def validate(self) -> None:
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.task_family not in TASK_FAMILIES:
            raise ConfigError(f"unknown task_family {self.task_family!r}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not self.lam > 0:
            raise ConfigError("lambda must be > 0")
        unknown = set(self.event_mix) - set(MIX_KEYS)
        if unknown:
            raise ConfigError(f"unknown event_mix keys {sorted(unknown)}")
        if any(v < 0 for v in self.event_mix.values()):
            raise ConfigError("event_mix probabilities must be non-negative")
        if abs(sum(self.event_mix.values()) - 1.0) > 1e-12:
            raise ConfigError("event_mix must sum to 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.context_budget is not None and self.context_budget < 1:
            raise ConfigError("context_budget must be positive")
        if not 0.0 <= self.propose_prob <= 1.0 or not 0.0 <= self.closure_prob <= 1.0:
            raise ConfigError("propose_prob and closure_prob must lie in [0, 1]")
        if self.recruit not in RECRUIT_MODES:
            raise ConfigError(f"unknown recruit mode {self.recruit!r}")
        if self.cascade_capacity is not None and not self.cascade_capacity > 0:
            raise ConfigError("cascade_capacity must be positive")
        if self.steps_per_agent < 1:
            raise ConfigError("steps_per_agent must be positive")
        self.workload.validate()

    @property
    def steps(self) -> int:
        return self.max_steps if self.max_steps is not None else self.steps_per_agent * self.N

    @property
    def budget(self) -> int:
        return self.context_budget if self.context_budget is not None else 10 * self.steps

    @property
    def closure_hazard(self) -> float:
        """Per-action probability that the touched cascade closes."""
        h = self.closure_prob
        if self.cascade_capacity is not None:
            h += 1.0 / (self.cascade_capacity * self.N)
        return min(h, 1.0)

    @property
    def condition_class(self) -> tuple[str, str]:
        return (self.topology, self.task_family)

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        return f"sim-{self.topology}-{self.task_family}-N{self.N}-b{self.beta:g}-s{self.seed}-{self.digest()[:8]}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["event_mix"] = {k: float(self.event_mix.get(k, 0.0)) for k in MIX_KEYS}
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("run_id", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        if "lambda" in d and "lam" not in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig fields {sorted(unknown)}")
        if "workload" in d and not isinstance(d["workload"], WorkloadConfig):
            try:
                d["workload"] = WorkloadConfig(**d["workload"])
            except TypeError as exc:
                raise ConfigError(f"bad workload config: {exc}") from exc
        if "event_mix" in d:
            d["event_mix"] = {k: float(v) for k, v in d["event_mix"].items()}
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def rng_for(config: SimConfig, stream: str = "sim") -> np.random.Generator:
    """Isolated stream derived from (seed, config hash)."""
    h = int.from_bytes(hashlib.sha256(f"{config.digest()}|{stream}".encode()).digest()[:8], "little")
    return np.random.default_rng([config.seed, h])


class _Fenwick:
    """Growable Fenwick tree of non-negative weights with prefix-sum sampling."""

    __slots__ = ("tree", "vals", "n", "total")

    def __init__(self, cap: int = 64) -> None:
        self.tree = [0.0] * (cap + 1)
        self.vals: list[float] = []
        self.n = 0
        self.total = 0.0

    def append(self, w: float) -> int:
        i = self.n
        if i + 1 >= len(self.tree):
            self._grow()
        self.vals.append(0.0)
        self.n += 1
        self.update(i, w)
        return i

    def _grow(self) -> None:
        vals = self.vals
        cap = 2 * (len(self.tree) - 1)
        self.tree = [0.0] * (cap + 1)
        self.total = 0.0
        old = list(vals)
        self.vals = [0.0] * len(old)
        for i, w in enumerate(old):
            self.update(i, w)

    def update(self, i: int, w: float) -> None:
        d = w - self.vals[i]
        self.vals[i] = w
        self.total += d
        j = i + 1
        tree = self.tree
        size = len(tree)
        while j < size:
            tree[j] += d
            j += j & -j

    def find(self, u: float) -> int:
        """Smallest index whose prefix sum exceeds u."""
        tree = self.tree
        pos = 0
        step = 1 << (len(tree) - 1).bit_length()
        while step:
            nxt = pos + step
            if nxt < len(tree) and tree[nxt] <= u:
                pos = nxt
                u -= tree[nxt]
            step >>= 1
        idx = min(pos, self.n - 1)
        # guard against float drift landing on a zero-weight slot
        while idx > 0 and self.vals[idx] <= 0.0:
            idx -= 1
        return idx


@dataclass
class TriggerDirective:
    root: str
    heads: tuple[str, ...]
    deficit: float
    step: int
    t: int = 0
    m: int = 0


class Simulation:
    """Single sequential run. ``controller`` (optional) observes every emitted
    record and may return a TriggerDirective that overrides the next action."""

    def __init__(self, config: SimConfig, controller: Any = None) -> None:
        config.validate()
        self.cfg = config
        self.rng = rng_for(config)
        self.run_id = config.resolved_run_id()
        self.topo: Topology = build_topology(config.topology, config.N, config.seed)
        self.workload: Workload = generate_workload(config.workload, config.N, config.seed)
        self.controller = controller
        N = config.N
        self.public = N  # pseudo-owner for broadcast claims, visible to all
        self.pools = [_Fenwick() for _ in range(N + 1)]
        self.owner_total = np.zeros(N + 1)
        self.claim_ids: list[str] = []
        self.index: dict[str, int] = {}
        self._claim_at: list[list[int]] = [[] for _ in range(N + 1)]
        self.owner: list[int] = []
        self.slot: list[int] = []
        self.cascade: list[int] = []
        self.depth: list[int] = []
        self.activity: list[int] = []
        self.subtask: list[str] = []
        self.has_children: list[bool] = []
        self.retired: list[bool] = []
        self.cascade_members: list[list[int]] = []
        self.cascade_open: list[bool] = []
        self.cascade_root: list[int] = []
        self.effort = [0] * N
        self.cascade_leader: list[int] = []
        self.cascade_activity: list[int] = []
        self.cascade_max_activity: list[int] = []
        self.records: list[EventRecord] = []
        self.step_id = 0
        self.n_subtasks = 0
        self.pending: TriggerDirective | None = None
        self.hazard = config.closure_hazard
        self.mix_keys = [k for k in MIX_KEYS if config.event_mix.get(k, 0.0) > 0]
        self.mix_p = np.array([config.event_mix[k] for k in self.mix_keys])
        self.mix_cum = np.cumsum(self.mix_p)
        self.mix_cum[-1] = 1.0
        self._refresh_visibility()

    # -- visibility -------------------------------------------------------

    def _refresh_visibility(self) -> None:
        self.visible_set = [frozenset(self.topo.neighbors[a] | {a, self.public}) for a in range(self.cfg.N)]
        self.visible_owners = [np.array(sorted(v), dtype=np.int64) for v in self.visible_set]

    def _weight(self, x: int) -> float:
        return float(x) ** self.cfg.beta

    def _route(self, agent: int) -> int | None:
        owners = self.visible_owners[agent]
        tot = self.owner_total[owners]
        s = float(tot.sum())
        if s <= 1e-12:
            return None
        cum = np.cumsum(tot)
        u = self.rng.random() * cum[-1]
        k = int(np.searchsorted(cum, u, side="right"))
        k = min(k, len(owners) - 1)
        while tot[k] <= 0:
            k -= 1
        o = int(owners[k])
        pool = self.pools[o]
        local = pool.find(self.rng.random() * pool.total)
        return self._claim_at[o][local]

    # -- claim bookkeeping -------------------------------------------------

    def _add_claim(self, cid: str, owner_pool: int, cascade: int, depth: int, subtask: str) -> int:
        idx = len(self.claim_ids)
        self.claim_ids.append(cid)
        self.index[cid] = idx
        self.owner.append(owner_pool)
        self.cascade.append(cascade)
        self.depth.append(depth)
        self.activity.append(1)
        self.subtask.append(subtask)
        self.has_children.append(False)
        self.retired.append(False)
        w = self._weight(1) if self.cascade_open[cascade] else 0.0
        slot = self.pools[owner_pool].append(w)
        self._claim_at[owner_pool].append(idx)
        self.slot.append(slot)
        self.owner_total[owner_pool] += w
        self.cascade_members[cascade].append(idx)
        return idx

    def _touch(self, idx: int) -> None:
        self.activity[idx] += 1
        cas = self.cascade[idx]
        if self.activity[idx] > self.cascade_max_activity[cas]:
            self.cascade_max_activity[cas] = self.activity[idx]
        if self.retired[idx] or not self.cascade_open[self.cascade[idx]]:
            return
        o = self.owner[idx]
        pool = self.pools[o]
        old = pool.vals[self.slot[idx]]
        w = self._weight(self.activity[idx])
        pool.update(self.slot[idx], w)
        self.owner_total[o] += w - old

    def _retire(self, idx: int) -> None:
        """Drop a claim from the routable set; its activity keeps counting."""
        self.retired[idx] = True
        o = self.owner[idx]
        pool = self.pools[o]
        old = pool.vals[self.slot[idx]]
        pool.update(self.slot[idx], 0.0)
        self.owner_total[o] = max(self.owner_total[o] - old, 0.0)

    def _close(self, cascade: int) -> None:
        self.cascade_open[cascade] = False
        for idx in self.cascade_members[cascade]:
            o = self.owner[idx]
            pool = self.pools[o]
            old = pool.vals[self.slot[idx]]
            pool.update(self.slot[idx], 0.0)
            self.owner_total[o] -= old
        for o in range(len(self.owner_total)):
            # re-sync against drift once a cascade leaves the routable set
            self.owner_total[o] = max(self.pools[o].total, 0.0)

    # -- emission -----------------------------------------------------------

    def _emit(self, agent: int, event: str, tick: int, target: int | None, claim: ClaimPayload | None,
              subtask: SubtaskPayload | None = None, target_subtask: str | None = None, **extra) -> EventRecord:
        rec = EventRecord(
            run_id=self.run_id,
            step_id=self.step_id,
            agent_id=f"a{agent:03d}",
            event_type=event,
            target_claim_id=None if target is None else self.claim_ids[target],
            target_subtask_id=target_subtask,
            timestamp=tick,
            message_length=int(self.rng.integers(20, 400)),
            claim=claim,
            subtask=subtask,
            extra=extra,
        )
        self.step_id += 1
        self.records.append(rec)
        if target is not None:
            cas = self.cascade[target]
            self.cascade_activity[cas] += 1
        return rec

    def _observe(self, rec: EventRecord, root_idx: int) -> None:
        if self.controller is None:
            return
        directive = self.controller.observe(rec, self.claim_ids[root_idx], self)
        if directive is not None and self.pending is None:
            self.pending = directive

    def _budget_left(self) -> int:
        return self.cfg.budget - len(self.records)

    def _new_claim_id(self) -> str:
        return f"c{len(self.claim_ids)}"

    def _propose(self, agent: int, tick: int) -> None:
        task = self.workload.tasks[len(self.cascade_members) % len(self.workload.tasks)]
        cas = len(self.cascade_members)
        self.cascade_members.append([])
        self.cascade_open.append(True)
        self.cascade_leader.append(agent)
        self.cascade_activity.append(0)
        self.cascade_max_activity.append(1)
        cid = self._new_claim_id()
        idx = self._add_claim(cid, agent, cas, 0, task)
        self.cascade_root.append(idx)
        self.effort[agent] += 1
        rec = self._emit(agent, "propose_claim", tick, None, ClaimPayload(cid, (), "proposed"),
                         target_subtask=task)
        self._observe(rec, idx)

    def _author_for(self, agent: int, target: int) -> int:
        """Author of a child claim.

        With mode "leader", the share of a trajectory's routing weight above
        the activity-independent baseline, 1 - (1 + S)**-beta for a cascade
        with accumulated activity S, pulls its originator back in; the
        scheduled agent authors the rest. At beta = 0 every child belongs to
        the scheduled agent.
        """
        if self.cfg.recruit == "actor":
            return agent
        cas = self.cascade[target]
        q = 1.0 - (1.0 + self.cascade_activity[cas]) ** (-self.cfg.beta)
        return self.cascade_leader[cas] if self.rng.random() < q else agent

    def _expand(self, agent: int, kind: str, target: int, tick: int) -> None:
        k = max(1, int(self.rng.poisson(self.cfg.lam)))
        k = min(k, self._budget_left())
        cas = self.cascade[target]
        root_idx = self.cascade_root[cas]
        for j in range(k):
            author = self._author_for(agent, target)
            cid = self._new_claim_id()
            payload = ClaimPayload(cid, (self.claim_ids[target],), STATUS_OF[kind])
            sub = None
            subtask = self.subtask[target]
            if kind == "delegate":
                self.n_subtasks += 1
                sid = f"s{self.n_subtasks}"
                sub = SubtaskPayload(sid, self.subtask[target], f"a{author:03d}", "active")
                subtask = sid
            self.has_children[target] = True
            self._touch(target)
            idx = self._add_claim(cid, author, cas, self.depth[target] + 1, subtask)
            self.effort[author] += 1
            rec = self._emit(author, EVENT_OF[kind], tick, target, payload, sub,
                             target_subtask=self.subtask[target])
            self._observe(rec, root_idx)

    def _endorse(self, agent: int, target: int, tick: int) -> None:
        self._touch(target)
        rec = self._emit(agent, "endorse_claim", tick, target, None)
        self._observe(rec, self.cascade_root[self.cascade[target]])

    def _merge_parents(self, agent: int, first: int) -> list[int]:
        """``first`` plus 1 + Poisson(merge_extra) distinct visible claims of
        its cascade, drawn sequentially with probability proportional to x**beta."""
        cas = self.cascade[first]
        members = self.cascade_members[cas]
        want = 1 + int(self.rng.poisson(self.cfg.merge_extra))
        vis = self.visible_set[agent]
        w_max = self._weight(self.cascade_max_activity[cas])
        picked: set[int] = set()
        # rejection sampling: uniform member, accepted with prob w / w_max
        for _ in range(_REJECTION_TRIES * want):
            if len(picked) == want:
                break
            i = members[int(self.rng.integers(len(members)))]
            if i == first or i in picked or self.retired[i] or self.owner[i] not in vis:
                continue
            if self.rng.random() * w_max < self._weight(self.activity[i]):
                picked.add(i)
        if len(picked) < want:
            cand = [i for i in members
                    if i != first and i not in picked and not self.retired[i] and self.owner[i] in vis]
            k = min(want - len(picked), len(cand))
            if k > 0:
                w = np.array([self._weight(self.activity[i]) for i in cand])
                picked.update(int(i) for i in self.rng.choice(cand, size=k, replace=False, p=w / w.sum()))
        return [first] + sorted(picked)

    def _merge(self, agent: int, parents: list[int], tick: int, injected: bool = False,
               owner_pool: int | None = None) -> int:
        cas = self.cascade[parents[0]]
        if not injected:
            agent = self._author_for(agent, parents[0])
        cid = self._new_claim_id()
        for p in parents:
            self.has_children[p] = True
            self._touch(p)
        depth = max(self.depth[p] for p in parents) + 1
        idx = self._add_claim(cid, agent if owner_pool is None else owner_pool, cas, depth, self.subtask[parents[0]])
        self.effort[agent] += 1
        payload = ClaimPayload(cid, tuple(self.claim_ids[p] for p in parents), "merged")
        extra = {"dti_injected": True} if injected else {}
        rec = self._emit(agent, "merge_claims", tick, parents[0], payload, **extra)
        if not injected:
            self._observe(rec, self.cascade_root[cas])
        else:
            # the broadcast integration supersedes the branch heads it consumed
            for p in parents:
                self._retire(p)
            if self.controller is not None:
                self.controller.record_injected(rec, self.claim_ids[self.cascade_root[cas]])
        return idx

    def _act(self, agent: int, tick: int) -> None:
        cfg = self.cfg
        if self.pending is not None:
            d = self.pending
            self.pending = None
            parents = [self.index[h] for h in d.heads if h in self.index]
            if len(parents) >= 2 and max(self.depth[p] for p in parents) < cfg.max_depth:
                # expansion deferred: this agent's action becomes the integration step
                idx = self._merge(agent, parents, tick, injected=True, owner_pool=self.public)
                self._hazard(self.cascade[idx])
                return
        if self.rng.random() < cfg.propose_prob:
            self._propose(agent, tick)
            return
        target = self._route(agent)
        if target is None:
            self._propose(agent, tick)
            return
        u = self.rng.random()
        kind = self.mix_keys[int(np.searchsorted(self.mix_cum, u, side="right"))]
        if kind == "merge":
            parents = self._merge_parents(agent, target)
            if len(parents) >= 2 and max(self.depth[p] for p in parents) < cfg.max_depth:
                self._merge(agent, parents, tick)
            else:
                self._endorse(agent, target, tick)
        elif kind == "endorse" or self.depth[target] >= cfg.max_depth:
            self._endorse(agent, target, tick)
        else:
            self._expand(agent, kind, target, tick)
        self._hazard(self.cascade[target])

    def _hazard(self, cas: int) -> None:
        if self.hazard > 0 and self.cascade_open[cas] and self.rng.random() < self.hazard:
            self._close(cas)

    def run(self) -> TraceBundle:
        cfg = self.cfg
        for tick in range(cfg.steps):
            if self._budget_left() <= 0:
                break
            agent = tick % cfg.N
            self._act(agent, tick)
            if cfg.topology == "dynamic_reputation" and (tick + 1) % REWIRE_EVERY == 0:
                rewire_toward_effort(self.topo, self.effort, self.rng)
                self._refresh_visibility()
        meta = RunMeta(
            run_id=self.run_id,
            agent_count=cfg.N,
            topology=cfg.topology,
            task_family=cfg.task_family,
            seed=cfg.seed,
            root_subtasks=tuple(self.workload.tasks),
            extra={"sim_config": cfg.to_dict()},
        )
        return TraceBundle(tuple(self.records), {self.run_id: meta})


def run_simulation(config: SimConfig, controller: Any = None) -> TraceBundle:
    return Simulation(config, controller).run()
