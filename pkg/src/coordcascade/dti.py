"""Deficit-triggered integration (DTI).

Each active root r carries a segment clock t_r (events since the segment
started) and a merge count M_r. Exploration pressure is P_r = a_c * t_r**b_c
and the integration deficit is D_r = P_r - M_r. When D_r exceeds the
threshold delta_c the controller asks the next scheduled agent to merge the
root's most recent branch heads, then restarts the segment at (t_r, M_r) =
(0, 1).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CoordCascadeError, InsufficientCascades, MissingParams, UnknownRoot
from .graph import build_claim_graph, event_roots, extract_cascades
from .observables import cascade_stats, concentration, write_rows_csv
from .sim.engine import SimConfig, TriggerDirective, run_simulation
from .trace import EventRecord, TraceBundle

MAX_HEADS = 8
MIN_CASCADES = 20
Condition = tuple[str, str]


# ---------------------------------------------------------------------------
# parameters and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DtiParams:
    condition_class: Condition
    a_c: float
    delta_c: float
    beta_c_hat: float
    n_cascades: int = 0
    N: int | None = None  # set when calibrated per agent count

    def __post_init__(self) -> None:
        if not self.a_c > 0:
            raise ValueError(f"a_c must be positive, got {self.a_c}")

    def pressure(self, t: int) -> float:
        return self.a_c * float(t) ** self.beta_c_hat

    def with_delta(self, delta: float) -> "DtiParams":
        return DtiParams(self.condition_class, self.a_c, delta, self.beta_c_hat, self.n_cascades, self.N)

    def to_dict(self) -> dict:
        return {
            "condition_class": list(self.condition_class),
            "a_c": self.a_c,
            "delta_c": _num_out(self.delta_c),
            "beta_c_hat": self.beta_c_hat,
            "n_cascades": self.n_cascades,
            "N": self.N,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DtiParams":
        topo, fam = d["condition_class"]
        n = d.get("N")
        return cls((str(topo), str(fam)), float(d["a_c"]), float(d["delta_c"]),
                   float(d["beta_c_hat"]), int(d.get("n_cascades", 0)), None if n is None else int(n))

    @property
    def key(self) -> Condition | tuple[Condition, int]:
        return self.condition_class if self.N is None else (self.condition_class, self.N)


def _num_out(v: float) -> float | str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def condition_key(c: Condition, N: int | None = None) -> str:
    return f"{c[0]}/{c[1]}" if N is None else f"{c[0]}/{c[1]}/N{N}"


def save_params(params: Mapping | Iterable[DtiParams], path: str | Path) -> None:
    items = params.values() if isinstance(params, Mapping) else params
    doc = {condition_key(p.condition_class, p.N): p.to_dict() for p in items}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_params(path: str | Path) -> dict:
    """Calibration table keyed by condition class, or (condition class, N) if stratified."""
    doc = json.loads(Path(path).read_text())
    out = {}
    for v in doc.values():
        p = DtiParams.from_dict(v)
        out[p.key] = p
    return out


def lookup(params: DtiParams | Mapping, condition: Condition, N: int | None = None) -> DtiParams:
    table = params if isinstance(params, Mapping) else {params.key: params}
    p = table.get((condition, N)) if N is not None else None
    p = p or table.get(condition)
    if p is None:
        raise MissingParams(f"no DTI parameters for condition class {condition_key(condition)}")
    return p


@dataclass
class RootState:
    t: int = 0
    m: int = 0
    last_trigger_step: int | None = None
    # leaves created in the current segment, oldest first, capped at MAX_HEADS
    leaves: dict[str, None] = field(default_factory=dict)

    def add_leaf(self, cid: str) -> None:
        self.leaves[cid] = None
        while len(self.leaves) > MAX_HEADS:
            del self.leaves[next(iter(self.leaves))]

    def reset(self, step_id: int, leaf: str | None = None) -> None:
        self.t, self.m = 0, 1
        self.last_trigger_step = step_id
        self.leaves = {}
        if leaf is not None:
            self.leaves[leaf] = None


@dataclass
class DtiState:
    roots: dict[str, RootState] = field(default_factory=dict)

    def deficit(self, root: str, params: DtiParams) -> float:
        s = self.roots[root]
        return params.pressure(s.t) - s.m


@dataclass(frozen=True)
class Trigger:
    step: int
    root: str
    deficit: float
    t: int
    m: int
    heads: tuple[str, ...]

    def to_row(self) -> dict:
        return {"step": self.step, "root": self.root, "deficit": self.deficit, "t": self.t, "M": self.m,
                "heads": ";".join(self.heads)}


def _parents(event: EventRecord) -> tuple[str, ...]:
    if event.claim is not None:
        return tuple(event.claim.parent_claim_ids)
    return (event.target_claim_id,) if event.target_claim_id else ()


def step(state: DtiState, params: DtiParams | None, event: EventRecord, root: str,
         allow_trigger: bool = True) -> tuple[DtiState, TriggerDirective | None]:
    """Advance the state of ``root`` by one event (in place; returns ``state``).

    A proposal opens a root at (0, 0) and is not counted. Every other event
    increments t_r, merges increment M_r. A trigger needs D_r > delta_c and
    at least two branch heads to integrate; when it fires the segment is
    restarted at (0, 1) immediately.
    """
    if params is None:
        raise MissingParams("no DTI parameters for this condition class")
    if event.event_type == "propose_claim" and event.claim is not None and event.claim.claim_id == root:
        s = state.roots.setdefault(root, RootState())
        s.add_leaf(root)
        return state, None
    s = state.roots.get(root)
    if s is None:
        raise UnknownRoot(f"event {event.step_id} refers to unknown root {root!r}")
    s.t += 1
    if event.event_type == "merge_claims":
        s.m += 1
    for p in _parents(event):
        s.leaves.pop(p, None)
    if event.claim is not None:
        s.add_leaf(event.claim.claim_id)
    deficit = params.pressure(s.t) - s.m
    if not allow_trigger or not deficit > params.delta_c or len(s.leaves) < 2:
        return state, None
    directive = TriggerDirective(root, tuple(s.leaves), deficit, event.step_id, s.t, s.m)
    s.reset(event.step_id)
    return state, directive


# ---------------------------------------------------------------------------
# live controller
# ---------------------------------------------------------------------------


@dataclass
class DtiReport:
    params: DtiParams
    triggers: list[Trigger] = field(default_factory=list)
    deficits: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    conversion: list[dict] = field(default_factory=list)

    @property
    def n_triggers(self) -> int:
        return len(self.triggers)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "n_triggers": self.n_triggers,
            "triggers": [t.to_row() for t in self.triggers],
            "conversion": self.conversion,
            "deficits": {r: [[s, d] for s, d in v] for r, v in self.deficits.items()},
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            write_rows_csv(csv_path, [t.to_row() for t in self.triggers], ["step", "root", "deficit", "t", "M", "heads"])


class DtiController:
    """Engine hook: observes each emitted record and may request an integration merge."""

    def __init__(self, params: DtiParams | Mapping[Condition, DtiParams], track_deficits: bool = True) -> None:
        self._table = params
        self.params: DtiParams | None = None
        self.state = DtiState()
        self.track = track_deficits
        self.report: DtiReport | None = None
        self._pending: dict[str, TriggerDirective] = {}

    def bind(self, condition: Condition, N: int | None = None) -> DtiParams:
        p = lookup(self._table, condition, N)
        self.params = p
        self.report = DtiReport(p)
        return p

    def observe(self, rec: EventRecord, root: str, sim) -> TriggerDirective | None:
        if self.params is None:
            self.bind(sim.cfg.condition_class, sim.cfg.N)
        _, directive = step(self.state, self.params, rec, root, allow_trigger=sim.pending is None)
        if self.track and rec.event_type != "propose_claim":
            self.report.deficits.setdefault(root, []).append((rec.step_id, self.state.deficit(root, self.params)))
        if directive is not None:
            self._pending[root] = directive
        return directive

    def record_injected(self, rec: EventRecord, root: str) -> None:
        d = self._pending.pop(root, None)
        s = self.state.roots[root]
        # the merge is counted, then the segment restarts; the reset wins
        s.reset(d.step if d is not None else rec.step_id, rec.claim.claim_id if rec.claim is not None else None)
        if d is not None:
            self.report.triggers.append(Trigger(d.step, root, d.deficit, d.t, d.m, d.heads))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CascadeTrajectory:
    """Per-cascade counts used for calibration (proposal excluded)."""

    root: str
    t: int
    merges: int
    contradiction_times: tuple[int, ...]


def trajectories(bundle: TraceBundle) -> list[CascadeTrajectory]:
    out: list[CascadeTrajectory] = []
    for rid in bundle.run_ids():
        graph = build_claim_graph(bundle, rid)
        roots = event_roots(graph, bundle)
        per: dict[str, list[str]] = {}
        for i in sorted(roots):
            rec = bundle.records[i]
            if rec.event_type == "propose_claim" or rec.extra.get("dti_injected"):
                continue
            per.setdefault(roots[i], []).append(rec.event_type)
        for root in graph.roots():
            evs = per.get(root, [])
            times = tuple(k + 1 for k, e in enumerate(evs) if e == "contradict_claim")
            out.append(CascadeTrajectory(root, len(evs), sum(e == "merge_claims" for e in evs), times))
    return out


def fit_params(trajs: Sequence[CascadeTrajectory], condition: Condition, ddof: int = 0,
               N: int | None = None) -> DtiParams:
    """(a_c, beta_c_hat, delta_c) from completed cascade trajectories."""
    done = [tr for tr in trajs if tr.t >= 1]
    if len(done) < MIN_CASCADES:
        raise InsufficientCascades(f"{len(done)} completed cascades for {condition_key(condition)}; need >= {MIN_CASCADES}")
    lt, lk = [], []
    for tr in done:
        for k, t in enumerate(tr.contradiction_times, start=1):
            lt.append(math.log(t))
            lk.append(math.log(k))
    if len(lt) < 2 or np.ptp(lt) == 0:
        raise InsufficientCascades("contradiction counts too sparse to fit the pressure exponent")
    b = float(np.polyfit(lt, lk, 1)[0])
    if not b > 0:
        raise InsufficientCascades(f"non-positive pressure exponent {b:.3g}")
    tb = np.array([tr.t for tr in done], dtype=float) ** b
    m = np.array([tr.merges for tr in done], dtype=float)
    a = float(tb @ m / (tb @ tb))
    if not a > 0:
        raise InsufficientCascades("no merges in baseline cascades; pressure scale undefined")
    deficits = a * tb - m
    delta = float(deficits.mean() + deficits.std(ddof=ddof))
    return DtiParams(condition, a, delta, b, len(done), N)


def calibrate(baselines: Sequence[TraceBundle] | TraceBundle, stratify_by_n: bool = False
              ) -> dict[Condition, DtiParams] | dict[tuple[Condition, int], DtiParams]:
    """DtiParams per condition class (topology, task_family), pooled over N by default."""
    if isinstance(baselines, TraceBundle):
        baselines = [baselines]
    groups: dict = {}
    for bundle in baselines:
        for rid in bundle.run_ids():
            meta = bundle.run_meta.get(rid)
            cond = (meta.topology or "unknown", meta.task_family or "unknown") if meta else ("unknown", "unknown")
            key = (cond, meta.agent_count if meta else None) if stratify_by_n else cond
            sub = TraceBundle(tuple(r for r in bundle.records if r.run_id == rid), {rid: meta} if meta else {})
            groups.setdefault(key, []).extend(trajectories(sub))
    out = {}
    for key in sorted(groups, key=str):
        if stratify_by_n:
            out[key] = fit_params(groups[key], key[0], N=key[1])
        else:
            out[key] = fit_params(groups[key], key)
    return out


# ---------------------------------------------------------------------------
# intervention
# ---------------------------------------------------------------------------


def run_with_dti(config: SimConfig, params: DtiParams | Mapping[Condition, DtiParams],
                 delta_override: float | None = None, track_deficits: bool = True) -> tuple[TraceBundle, DtiReport]:
    p = lookup(params, config.condition_class, config.N)
    if delta_override is not None:
        p = p.with_delta(delta_override)
    ctl = DtiController(p, track_deficits)
    ctl.bind(config.condition_class, config.N)
    bundle = run_simulation(config, ctl)
    report = ctl.report
    report.conversion = _segment_conversion(bundle, report.triggers)
    return bundle, report


def _segment_conversion(bundle: TraceBundle, triggers: Sequence[Trigger]) -> list[dict]:
    """Merge conversion before and after the first trigger, per treated cascade."""
    first = {}
    for tr in triggers:
        first.setdefault(tr.root, tr.step)
    if not first:
        return []
    graph = build_claim_graph(bundle)
    roots = event_roots(graph, bundle)
    pre: dict[str, Counter] = {r: Counter() for r in first}
    post: dict[str, Counter] = {r: Counter() for r in first}
    for i, root in roots.items():
        if root not in first:
            continue
        rec = bundle.records[i]
        (pre if rec.step_id <= first[root] else post)[root][rec.event_type] += 1
    rows = []
    for r in first:
        rows.append({"root": r, "first_trigger_step": first[r],
                     "pre_ratio": _conv(pre[r]), "post_ratio": _conv(post[r])})
    return rows


_EXPANSIONS = ("delegate_subtask", "revise_claim", "contradict_claim")


def _conv(c: Counter) -> float | None:
    e = sum(c[k] for k in _EXPANSIONS)
    return c["merge_claims"] / e if e else None


@dataclass
class ArmSummary:
    n_cascades: int
    lr_vs_ln: float | None
    p_vs_ln: float | None
    lr_vs_pl: float | None
    p_vs_pl: float | None
    alpha_hat: float | None
    xc_hat: float | None
    x_min: int | None
    conversion_by_quantile: dict[str, float | None]
    top_decile_conversion: float | None
    contradiction_density: float
    e_active_10: float | None
    n_triggers: int = 0


def _arm(bundles: Sequence[TraceBundle], x_min: int | str = "scan", n_triggers: int = 0) -> ArmSummary:
    from . import tails

    stats, e10 = [], []
    for b in bundles:
        for rid in b.run_ids():
            g = build_claim_graph(b, rid)
            cs = extract_cascades(g, b)
            stats.extend(cascade_stats(cs, b))
            try:
                e10.append(concentration(b, cs, rid).e_active[10])
            except CoordCascadeError:  # no claims in run
                pass
    tce = np.array([s.tce for s in stats if s.tce >= 1])
    fit = cmp_ln = cmp_pl = None
    xm = None
    try:
        if x_min == "scan":
            xm, _ = tails.select_xmin(tce, "power_law")
        else:
            xm = int(x_min)
        fit = tails.fit_family(tce, "truncated_power_law", xm)
        cmp_ln = tails.compare_models(tce, xm, "truncated_power_law", "log_normal")
        cmp_pl = tails.compare_models(tce, xm, "truncated_power_law", "power_law")
    except CoordCascadeError:  # tail too small to fit
        pass
    by_q = _conversion_by_quantile(stats)
    ev = sum(s.tce for s in stats)
    contra = sum(s.counts.get("contradiction", 0) for s in stats)
    return ArmSummary(
        n_cascades=len(stats),
        lr_vs_ln=cmp_ln.lr if cmp_ln else None, p_vs_ln=cmp_ln.p_value if cmp_ln else None,
        lr_vs_pl=cmp_pl.lr if cmp_pl else None, p_vs_pl=cmp_pl.p_value if cmp_pl else None,
        alpha_hat=fit.alpha_hat if fit else None, xc_hat=fit.xc_hat if fit else None, x_min=xm,
        conversion_by_quantile=by_q, top_decile_conversion=by_q.get("q90-100"),
        contradiction_density=contra / ev if ev else 0.0,
        e_active_10=float(np.mean(e10)) if e10 else None,
        n_triggers=n_triggers,
    )


def _conversion_by_quantile(stats) -> dict[str, float | None]:
    """Mean per-cascade merge conversion ratio within TCE deciles (by rank)."""
    rows = sorted((s for s in stats if s.tce >= 1), key=lambda s: (s.tce, s.run_id or "", s.root_claim_id))
    out: dict[str, float | None] = {}
    n = len(rows)
    for q in range(10):
        chunk = rows[q * n // 10:(q + 1) * n // 10]
        vals = [s.merge_conversion_ratio for s in chunk if s.merge_conversion_ratio is not None]
        out[f"q{q * 10}-{q * 10 + 10}"] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class InterventionReport:
    baseline: ArmSummary
    treated: ArmSummary

    def deltas(self) -> dict[str, float | None]:
        out = {}
        for k in ("lr_vs_ln", "lr_vs_pl", "alpha_hat", "xc_hat", "top_decile_conversion",
                  "contradiction_density", "e_active_10", "n_triggers"):
            a, b = getattr(self.baseline, k), getattr(self.treated, k)
            out[k] = None if a is None or b is None else b - a
        return out

    def to_dict(self) -> dict:
        import dataclasses

        return {"baseline": dataclasses.asdict(self.baseline), "treated": dataclasses.asdict(self.treated),
                "delta": self.deltas()}


def evaluate_intervention(baseline: TraceBundle | Sequence[TraceBundle], treated: TraceBundle | Sequence[TraceBundle],
                          x_min: int | str = "scan", n_triggers: int = 0) -> InterventionReport:
    """Side-by-side tail, conversion and concentration summaries for two arms."""
    if isinstance(baseline, TraceBundle):
        baseline = [baseline]
    if isinstance(treated, TraceBundle):
        treated = [treated]
    return InterventionReport(_arm(baseline, x_min), _arm(treated, x_min, n_triggers))
