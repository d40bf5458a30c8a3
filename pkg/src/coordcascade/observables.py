"""Coordination observables: event sizes, cascade statistics, concentration, maxima."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientAgents
from .graph import Cascade, ClaimGraph, SubtaskTree
from .trace import RunMeta, TraceBundle

OBSERVABLES = ("delegation_cascade", "revision_wave", "contradiction_burst", "merge_fanin", "tce")
COMPOSITION_KEYS = ("proposal", "delegation", "revision", "contradiction", "merge", "endorsement")
_KIND = {
    "propose_claim": "proposal",
    "delegate_subtask": "delegation",
    "revise_claim": "revision",
    "contradict_claim": "contradiction",
    "merge_claims": "merge",
    "endorse_claim": "endorsement",
}
EXPANSION_KINDS = ("delegation", "contradiction", "revision")


@dataclass(frozen=True)
class EventSizeSample:
    observable: str
    x: int
    run_id: str | None = None
    topology: str | None = None
    task_family: str | None = None
    N: int | None = None

    @property
    def condition(self) -> tuple[str | None, str | None, int | None]:
        return (self.topology, self.task_family, self.N)


def _sample(obs: str, x: int, run_id: str | None, meta: RunMeta | None) -> EventSizeSample:
    if meta is None:
        return EventSizeSample(obs, int(x), run_id)
    return EventSizeSample(obs, int(x), run_id, meta.topology, meta.task_family, meta.agent_count)


def delegation_cascade_sizes(tree: SubtaskTree, run_id: str | None = None,
                             meta: RunMeta | None = None) -> list[EventSizeSample]:
    """Subtree node count (root inclusive) for every delegated subtask."""
    return [
        _sample("delegation_cascade", tree.subtree_size(sid), run_id, meta)
        for sid, node in tree.nodes.items()
        if node.record_index is not None
    ]


def revision_waves(graph: ClaimGraph, meta: RunMeta | None = None) -> list[EventSizeSample]:
    if not graph.grouped:
        raise ValueError("derive_groupings must run before revision_waves")
    return [_sample("revision_wave", len(ch), graph.run_id, meta) for ch in graph.revision_chains.values()]


def contradiction_bursts(graph: ClaimGraph, meta: RunMeta | None = None) -> list[EventSizeSample]:
    if not graph.grouped:
        raise ValueError("derive_groupings must run before contradiction_bursts")
    out = []
    for members in graph.contradiction_groups.values():
        agents = {graph.nodes[c].agent_id for c in members}
        out.append(_sample("contradiction_burst", len(agents), graph.run_id, meta))
    return out


def merge_fanins(graph: ClaimGraph, meta: RunMeta | None = None) -> list[EventSizeSample]:
    return [
        _sample("merge_fanin", len(n.parent_claim_ids), graph.run_id, meta)
        for n in graph.nodes.values()
        if n.claim_status == "merged"
    ]


@dataclass(frozen=True)
class CascadeStats:
    root_claim_id: str
    cascade_size: int
    tce: int
    composition: dict[str, float]
    counts: dict[str, int]
    merge_conversion_ratio: float | None
    run_id: str | None = None

    def to_row(self) -> dict:
        row = {
            "run_id": self.run_id,
            "root_claim_id": self.root_claim_id,
            "cascade_size": self.cascade_size,
            "tce": self.tce,
            "merge_conversion_ratio": self.merge_conversion_ratio,
        }
        row.update({f"frac_{k}": self.composition[k] for k in COMPOSITION_KEYS})
        return row


def cascade_stats(cascades: Sequence[Cascade], bundle: TraceBundle) -> list[CascadeStats]:
    out = []
    for c in cascades:
        counts = Counter(_KIND[bundle.records[i].event_type] for i in c.member_event_indices)
        tce = len(c.member_event_indices)
        comp = {k: (counts[k] / tce if tce else 0.0) for k in COMPOSITION_KEYS}
        expansions = sum(counts[k] for k in EXPANSION_KINDS)
        ratio = counts["merge"] / expansions if expansions else None
        out.append(CascadeStats(c.root_claim_id, c.size, tce, comp,
                                {k: counts[k] for k in COMPOSITION_KEYS}, ratio, c.run_id))
    return out


def tce_samples(stats: Iterable[CascadeStats], meta: RunMeta | None = None) -> list[EventSizeSample]:
    return [_sample("tce", s.tce, s.run_id, meta) for s in stats if s.tce >= 1]


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------


def gini(values: Sequence[float]) -> float:
    """Gini coefficient via the sorted-rank closed form."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.sum(ranks * x) / (n * x.sum()) - (n + 1.0) / n)


def effective_number(values: Sequence[float]) -> float:
    """Inverse participation ratio 1 / sum(p_a^2) of the effort shares."""
    x = np.asarray(values, dtype=float)
    p = x / x.sum()
    return float(1.0 / np.sum(p * p))


def lorenz_curve(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Population fractions and cumulative effort shares, ascending order, from (0, 0)."""
    x = np.sort(np.asarray(values, dtype=float))
    pop = np.arange(x.size + 1) / x.size
    cum = np.concatenate([[0.0], np.cumsum(x) / x.sum()])
    return pop, cum


def top_share_pct(values: Sequence[float], pct: float) -> float:
    """Effort share of the top ``pct`` percent of agents.

    Fractional agents are handled by linear interpolation on the Lorenz curve,
    so equal effort gives exactly pct/100 for any population size.
    """
    pop, cum = lorenz_curve(values)
    return float(1.0 - np.interp(1.0 - pct / 100.0, pop, cum))


def top_k_share(counts: dict[str, int], k: int) -> float:
    """S_k: share of the k most active agents; ties broken by agent id."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(counts.values())
    return sum(v for _, v in ranked[:k]) / total


@dataclass
class ConcentrationReport:
    run_id: str | None
    N: int
    effort: dict[str, int]
    s_k: dict[int, float]
    e_active: dict[int, float]
    e_all: dict[int, float]
    delta_active: dict[int, float]
    gini: float
    n_eff: float
    n_eff_ratio: float
    active_fraction: float
    lorenz: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("s_k", "e_active", "e_all", "delta_active"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def to_row(self) -> dict:
        row = {"run_id": self.run_id, "N": self.N, "gini": self.gini, "n_eff_ratio": self.n_eff_ratio,
               "active_fraction": self.active_fraction}
        for k in self.e_active:
            row[f"E_active_{k}"] = self.e_active[k]
            row[f"E_all_{k}"] = self.e_all[k]
            row[f"delta_active_{k}"] = self.delta_active[k]
        return row


def agent_effort(bundle: TraceBundle, cascades: Sequence[Cascade] | None = None,
                 run_id: str | None = None) -> dict[str, int]:
    """Claims authored per agent (restricted to cascade members when given)."""
    allowed: set[int] | None = None
    if cascades is not None:
        allowed = set()
        for c in cascades:
            allowed.update(c.member_event_indices)
    counts: dict[str, int] = defaultdict(int)
    for i, r in enumerate(bundle.records):
        if r.claim is None or (run_id is not None and r.run_id != run_id):
            continue
        if allowed is not None and i not in allowed:
            continue
        counts[r.agent_id] += 1
    return dict(counts)


def concentration(bundle: TraceBundle, cascades: Sequence[Cascade] | None = None, run_id: str | None = None,
                  ks: Sequence[int] = (10, 25, 50), top_k: Sequence[int] = (1,)) -> ConcentrationReport:
    if run_id is None:
        runs = bundle.run_ids()
        if len(runs) == 1:
            run_id = runs[0]
    effort = agent_effort(bundle, cascades, run_id)
    if not effort or sum(effort.values()) == 0:
        raise InsufficientAgents("no claims in run; concentration undefined")
    meta = bundle.run_meta.get(run_id) if run_id is not None else None
    n_active = len(effort)
    N = max(meta.agent_count if meta else n_active, n_active)
    vals = np.array(sorted(effort.values()), dtype=float)
    e_active = {k: top_share_pct(vals, k) for k in ks}
    frac = n_active / N
    pop, cum = lorenz_curve(vals)
    n_eff = effective_number(vals)
    s_k = {k: top_k_share(effort, k) for k in sorted(set(top_k) | {n_active})}
    return ConcentrationReport(
        run_id=run_id,
        N=N,
        effort=dict(sorted(effort.items())),
        s_k=s_k,
        e_active=e_active,
        e_all={k: e_active[k] * frac for k in ks},
        delta_active={k: e_active[k] - k / 100.0 for k in ks},
        gini=gini(vals),
        n_eff=n_eff,
        n_eff_ratio=n_eff / N,
        active_fraction=frac,
        lorenz=[(float(a), float(b)) for a, b in zip(pop, cum)],
    )


# ---------------------------------------------------------------------------
# maxima
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtremeSample:
    observable: str
    run_id: str | None
    N: int
    x_max: int


def extreme_samples(samples: Iterable[EventSizeSample],
                    meta: dict[str, RunMeta] | None = None) -> list[ExtremeSample]:
    best: dict[tuple[str | None, str], int] = {}
    n_of: dict[str | None, int] = {}
    for s in samples:
        key = (s.run_id, s.observable)
        best[key] = max(best.get(key, 0), s.x)
        if s.N is not None:
            n_of[s.run_id] = s.N
    out = []
    for (run_id, obs), xm in best.items():
        N = n_of.get(run_id)
        if N is None and meta is not None and run_id in meta:
            N = meta[run_id].agent_count
        if N is None:
            raise ValueError(f"no agent count for run {run_id}")
        out.append(ExtremeSample(obs, run_id, N, xm))
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_rows_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return "" if v is None else v


SAMPLE_COLUMNS = ("observable", "x", "run_id", "topology", "task_family", "N")


def write_samples_csv(path: str | Path, samples: Sequence[EventSizeSample]) -> None:
    write_rows_csv(path, [asdict(s) for s in samples], SAMPLE_COLUMNS)
