"""Lineage reconstruction: subtask tree, claim DAG, derived groupings, cascades."""

from __future__ import annotations

import csv
import heapq
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .errors import CycleError, DanglingParent
from .trace import TraceBundle

DEFAULT_TAU = 10


def _single_run(bundle: TraceBundle, run_id: str | None) -> str | None:
    if run_id is not None:
        return run_id
    runs = bundle.run_ids()
    if len(runs) > 1:
        raise ValueError("bundle holds several runs; pass run_id")
    return runs[0] if runs else None


# ---------------------------------------------------------------------------
# subtask tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubtaskNode:
    subtask_id: str
    parent_subtask_id: str | None
    subtask_depth: int
    assigned_agent: str
    subtask_status: str
    record_index: int | None  # None for declared or implicit roots


@dataclass
class SubtaskTree:
    nodes: dict[str, SubtaskNode] = field(default_factory=dict)
    children: dict[str, list[str]] = field(default_factory=dict)
    roots: list[str] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def subtree_size(self, subtask_id: str) -> int:
        n = 0
        stack = [subtask_id]
        while stack:
            s = stack.pop()
            n += 1
            stack.extend(self.children.get(s, ()))
        return n

    def edges(self) -> list[tuple[str, str]]:
        return [(p, c) for p, kids in self.children.items() for c in kids]


def build_subtask_tree(bundle: TraceBundle, run_id: str | None = None, strict: bool = False) -> SubtaskTree:
    """Rooted forest over subtasks from ``delegate_subtask`` events.

    Parents that are never delegated become implicit roots (diagnostic), unless
    ``strict`` is set, in which case DanglingParent is raised.
    """
    run_id = _single_run(bundle, run_id)
    tree = SubtaskTree()
    defs: dict[str, tuple[int, object]] = {}
    for i, r in enumerate(bundle.records):
        if r.run_id != run_id or r.event_type != "delegate_subtask" or r.subtask is None:
            continue
        defs.setdefault(r.subtask.subtask_id, (i, r.subtask))

    declared = list(bundle.run_meta[run_id].root_subtasks) if run_id in bundle.run_meta else []
    parent_of: dict[str, str | None] = {}
    for sid, (_, sub) in defs.items():
        parent_of[sid] = sub.parent_subtask_id  # type: ignore[attr-defined]
    implicit: list[str] = []
    for sid, p in list(parent_of.items()):
        if p is not None and p not in parent_of and p not in declared and p not in implicit:
            if strict:
                raise DanglingParent(f"subtask {sid} references undefined parent {p}")
            implicit.append(p)
            tree.diagnostics.append(f"parent subtask {p} of {sid} undefined; promoted to root")
    for sid in declared + implicit:
        if sid not in parent_of:
            parent_of[sid] = None

    # depth by walking parent links; revisiting a node on the current walk is a cycle
    depth: dict[str, int] = {}
    for start in parent_of:
        path = []
        on_path = set()
        s: str | None = start
        while s is not None and s not in depth:
            if s in on_path:
                raise CycleError(f"subtask parent links form a cycle through {s}")
            on_path.add(s)
            path.append(s)
            s = parent_of.get(s)
        base = -1 if s is None else depth[s]
        for node in reversed(path):
            base += 1
            depth[node] = base

    order = declared + implicit + [s for s in defs if s not in declared and s not in implicit]
    for sid in order:
        if sid in defs:
            idx, sub = defs[sid]
            node = SubtaskNode(sid, sub.parent_subtask_id, depth[sid], sub.assigned_agent,  # type: ignore[attr-defined]
                               sub.subtask_status, idx)  # type: ignore[attr-defined]
        else:
            node = SubtaskNode(sid, None, 0, "", "active", None)
        tree.nodes[sid] = node
        tree.children.setdefault(sid, [])
        if node.parent_subtask_id is None:
            tree.roots.append(sid)
        else:
            tree.children.setdefault(node.parent_subtask_id, []).append(sid)
    return tree


# ---------------------------------------------------------------------------
# claim DAG
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimNode:
    claim_id: str
    parent_claim_ids: tuple[str, ...]
    root_claim_id: str
    claim_depth: int
    claim_status: str
    agent_id: str
    step_id: int
    record_index: int
    event_type: str


@dataclass
class ClaimGraph:
    run_id: str | None = None
    nodes: dict[str, ClaimNode] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    children: dict[str, list[str]] = field(default_factory=dict)
    revision_chain_id: dict[str, str] = field(default_factory=dict)
    revision_chains: dict[str, tuple[str, ...]] = field(default_factory=dict)
    contradiction_group_id: dict[str, str] = field(default_factory=dict)
    contradiction_groups: dict[str, tuple[str, ...]] = field(default_factory=dict)
    merge_groups: dict[str, tuple[str, ...]] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    grouped: bool = False

    def topological_order(self) -> list[str]:
        # nodes are inserted in topological order by construction
        return list(self.nodes)

    def roots(self) -> list[str]:
        return [c for c, n in self.nodes.items() if not n.parent_claim_ids]


def build_claim_graph(bundle: TraceBundle, run_id: str | None = None) -> ClaimGraph:
    """Claim DAG with recomputed depths and propagated root ids.

    A claim whose parents sit in different cascades joins the cascade whose root
    was created first (smallest step_id), i.e. its earliest ancestor.
    """
    run_id = _single_run(bundle, run_id)
    defs: dict[str, int] = {}
    for i, r in enumerate(bundle.records):
        if r.run_id == run_id and r.claim is not None:
            defs.setdefault(r.claim.claim_id, i)

    for cid, i in defs.items():
        for p in bundle.records[i].claim.parent_claim_ids:  # type: ignore[union-attr]
            if p not in defs:
                raise DanglingParent(f"claim {cid} references undefined parent {p}")

    # Kahn's algorithm; ties resolved by record order for determinism
    indeg = {cid: len(set(bundle.records[i].claim.parent_claim_ids)) for cid, i in defs.items()}  # type: ignore[union-attr]
    kids: dict[str, list[str]] = defaultdict(list)
    for cid, i in defs.items():
        for p in dict.fromkeys(bundle.records[i].claim.parent_claim_ids):  # type: ignore[union-attr]
            kids[p].append(cid)
    heap = [(defs[c], c) for c, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        _, c = heapq.heappop(heap)
        order.append(c)
        for k in kids.get(c, ()):
            indeg[k] -= 1
            if indeg[k] == 0:
                heapq.heappush(heap, (defs[k], k))
    if len(order) != len(defs):
        stuck = sorted(c for c, d in indeg.items() if d > 0)
        raise CycleError(f"claim lineage contains a cycle among {stuck[:5]}")

    g = ClaimGraph(run_id=run_id)
    for cid in order:
        r = bundle.records[defs[cid]]
        c = r.claim
        parents = tuple(dict.fromkeys(c.parent_claim_ids))  # type: ignore[union-attr]
        if parents:
            depth = 1 + max(g.nodes[p].claim_depth for p in parents)
            root = min((g.nodes[g.nodes[p].root_claim_id] for p in parents),
                       key=lambda n: (n.step_id, n.record_index)).claim_id
        else:
            depth, root = 0, cid
        g.nodes[cid] = ClaimNode(cid, parents, root, depth, c.claim_status, r.agent_id,  # type: ignore[union-attr]
                                 r.step_id, defs[cid], r.event_type)
        g.children.setdefault(cid, [])
        for p in parents:
            g.edges.append((p, cid))
            g.children[p].append(cid)
        logged = c.extra  # type: ignore[union-attr]
        if "claim_depth" in logged and logged["claim_depth"] != depth:
            g.diagnostics.append(f"claim {cid}: logged depth {logged['claim_depth']} != recomputed {depth}")
        if logged.get("root_claim_id") not in (None, root):
            g.diagnostics.append(f"claim {cid}: logged root {logged['root_claim_id']} != recomputed {root}")
    return g


def derive_groupings(graph: ClaimGraph, tau: int = DEFAULT_TAU) -> ClaimGraph:
    """Attach revision chains, contradiction groups (window ``tau`` steps) and merge groups."""
    if tau <= 0:
        raise ValueError("tau must be a positive number of steps")
    chain_of: dict[str, str] = {}
    chains: dict[str, list[str]] = {}
    continued: set[str] = set()  # parents whose chain already has a successor
    for cid, node in graph.nodes.items():
        if node.claim_status != "revised":
            continue
        (p,) = node.parent_claim_ids
        pnode = graph.nodes[p]
        if pnode.claim_status == "revised" and p not in continued:
            cid_chain = chain_of[p]
            chains[cid_chain].append(cid)
        else:
            cid_chain = f"rc{len(chains)}"
            chains[cid_chain] = [p, cid]
            chain_of.setdefault(p, cid_chain)
        continued.add(p)
        chain_of[cid] = cid_chain

    by_parent: dict[str, list[str]] = defaultdict(list)
    for cid, node in graph.nodes.items():
        if node.claim_status == "contradictory":
            by_parent[node.parent_claim_ids[0]].append(cid)
    group_of: dict[str, str] = {}
    groups: dict[str, list[str]] = {}
    for parent in sorted(by_parent, key=lambda p: graph.nodes[p].record_index):
        members = sorted(by_parent[parent], key=lambda c: graph.nodes[c].step_id)
        anchor = None
        gid = None
        for c in members:
            s = graph.nodes[c].step_id
            if anchor is None or s - anchor > tau:
                anchor = s
                gid = f"cg{len(groups)}"
                groups[gid] = []
            groups[gid].append(c)  # type: ignore[index]
            group_of[c] = gid  # type: ignore[assignment]

    merges = {cid: n.parent_claim_ids for cid, n in graph.nodes.items() if n.claim_status == "merged"}
    return replace(
        graph,
        revision_chain_id=chain_of,
        revision_chains={k: tuple(v) for k, v in chains.items()},
        contradiction_group_id=group_of,
        contradiction_groups={k: tuple(v) for k, v in groups.items()},
        merge_groups=merges,
        grouped=True,
    )


# ---------------------------------------------------------------------------
# cascades
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cascade:
    root_claim_id: str
    member_claim_ids: frozenset[str]
    member_event_indices: frozenset[int]
    run_id: str | None = None

    @property
    def size(self) -> int:
        return len(self.member_claim_ids)

    @property
    def tce(self) -> int:
        return len(self.member_event_indices)


def event_roots(graph: ClaimGraph, bundle: TraceBundle) -> dict[int, str]:
    """Map record index -> root claim id, via the claim it creates or targets."""
    out: dict[int, str] = {}
    for i, r in enumerate(bundle.records):
        if r.run_id != graph.run_id:
            continue
        if r.claim is not None and r.claim.claim_id in graph.nodes:
            out[i] = graph.nodes[r.claim.claim_id].root_claim_id
        elif r.target_claim_id and r.target_claim_id in graph.nodes:
            out[i] = graph.nodes[r.target_claim_id].root_claim_id
    return out


def extract_cascades(graph: ClaimGraph, bundle: TraceBundle) -> list[Cascade]:
    members: dict[str, list[str]] = {}
    for cid, n in graph.nodes.items():
        members.setdefault(n.root_claim_id, []).append(cid)
    events: dict[str, list[int]] = defaultdict(list)
    for i, root in event_roots(graph, bundle).items():
        events[root].append(i)
    return [
        Cascade(root, frozenset(mem), frozenset(events.get(root, ())), graph.run_id)
        for root, mem in members.items()
    ]


def write_edge_csv(path: str | Path, graph: ClaimGraph | None = None, tree: SubtaskTree | None = None) -> None:
    rows: list[tuple[str, str, str]] = []
    if graph is not None:
        rows += [(p, c, graph.nodes[c].claim_status) for p, c in graph.edges]
    if tree is not None:
        rows += [(p, c, "subtask") for p, c in tree.edges()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parent_id", "child_id", "kind"])
        w.writerows(rows)


def reachable(children: dict[str, Iterable[str]], start: str) -> set[str]:
    seen = {start}
    q = deque([start])
    while q:
        for k in children.get(q.popleft(), ()):
            if k not in seen:
                seen.add(k)
                q.append(k)
    return seen
