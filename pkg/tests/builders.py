"""Small constructors for hand-built traces used across the test suite."""

from __future__ import annotations

import random
from pathlib import Path

from coordcascade.trace import ClaimPayload, EventRecord, RunMeta, SubtaskPayload, TraceBundle

DATA = Path(__file__).parent / "data"
WORKED_EXAMPLE = DATA / "worked_example.jsonl"

_STATUS = {
    "propose_claim": "proposed",
    "revise_claim": "revised",
    "contradict_claim": "contradictory",
    "merge_claims": "merged",
}


class TraceBuilder:
    """Append events with auto-incrementing step ids."""

    def __init__(self, run_id: str = "r0", N: int = 4, topology: str = "fully_connected",
                 task_family: str = "reasoning", roots: tuple[str, ...] = ()):
        self.run_id = run_id
        self.meta = RunMeta(run_id, N, topology, task_family, 0, roots)
        self.records: list[EventRecord] = []

    def _step(self) -> int:
        return len(self.records) + 1

    def claim(self, event_type: str, cid: str, parents: tuple[str, ...] = (), agent: str = "a0",
              target: str | None = None, step: int | None = None) -> "TraceBuilder":
        if target is None and event_type in ("revise_claim", "contradict_claim"):
            target = parents[0]
        s = self._step() if step is None else step
        self.records.append(EventRecord(self.run_id, s, agent, event_type, target, None, s, 10,
                                        ClaimPayload(cid, tuple(parents), _STATUS[event_type])))
        return self

    def propose(self, cid: str, agent: str = "a0", **kw) -> "TraceBuilder":
        return self.claim("propose_claim", cid, (), agent, **kw)

    def revise(self, cid: str, parent: str, agent: str = "a0", **kw) -> "TraceBuilder":
        return self.claim("revise_claim", cid, (parent,), agent, **kw)

    def contradict(self, cid: str, parent: str, agent: str = "a0", **kw) -> "TraceBuilder":
        return self.claim("contradict_claim", cid, (parent,), agent, **kw)

    def merge(self, cid: str, parents: tuple[str, ...], agent: str = "a0", **kw) -> "TraceBuilder":
        return self.claim("merge_claims", cid, tuple(parents), agent, **kw)

    def endorse(self, target: str, agent: str = "a0") -> "TraceBuilder":
        s = self._step()
        self.records.append(EventRecord(self.run_id, s, agent, "endorse_claim", target, None, s, 5))
        return self

    def delegate(self, sid: str, parent: str | None, agent: str = "a0") -> "TraceBuilder":
        s = self._step()
        self.records.append(EventRecord(self.run_id, s, agent, "delegate_subtask", None, parent, s, 5,
                                        None, SubtaskPayload(sid, parent, agent, "active")))
        return self

    def bundle(self) -> TraceBundle:
        return TraceBundle(tuple(self.records), {self.run_id: self.meta})


def worked_tree_bundle() -> TraceBundle:
    """T0 root; T1, T2 under T0; T3, T4 under T1; T5 under T2."""
    b = TraceBuilder(roots=("T0",))
    for sid, parent in (("T1", "T0"), ("T2", "T0"), ("T3", "T1"), ("T4", "T1"), ("T5", "T2")):
        b.delegate(sid, parent)
    return b.bundle()


def random_lineage(rnd: random.Random, n: int) -> TraceBundle:
    """Random valid lineage of n events: proposals, revisions, contradictions, merges and endorsements."""
    b = TraceBuilder()
    ids: list[str] = []
    for i in range(n):
        cid = f"c{i}"
        kind = rnd.choice(["propose", "revise", "contradict", "merge", "endorse"]) if ids else "propose"
        if kind == "propose" or (kind == "merge" and len(ids) < 2):
            b.propose(cid, agent=f"a{rnd.randrange(5)}")
        elif kind == "revise":
            b.revise(cid, rnd.choice(ids), agent=f"a{rnd.randrange(5)}")
        elif kind == "contradict":
            b.contradict(cid, rnd.choice(ids), agent=f"a{rnd.randrange(5)}")
        elif kind == "merge":
            b.merge(cid, tuple(rnd.sample(ids, rnd.randint(2, min(4, len(ids))))), agent=f"a{rnd.randrange(5)}")
        else:
            b.endorse(rnd.choice(ids))
            continue
        ids.append(cid)
    return b.bundle()
