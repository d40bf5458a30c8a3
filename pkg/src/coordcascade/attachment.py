"""Empirical preferential-attachment measurement.

Each routing decision picks an existing claim. We record the target's prior
activity (1 + number of earlier events referencing it), bin activity on a
log2 grid and compare the observed selection counts against a uniform null
over every claim already defined in the run at decision time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDecisions
from .graph import ClaimGraph
from .trace import EVENT_TYPES, TraceBundle

MIN_DECISIONS = 100
_NBINS = 40


@dataclass
class AttachmentCurve:
    x: list[float]
    ratio: list[float]
    observed: list[int]
    expected: list[float]
    beta_hat: float | None
    intercept: float | None
    n_decisions: int

    def to_dict(self) -> dict:
        return {"x": self.x, "R": self.ratio, "observed": self.observed, "expected": self.expected,
                "beta_hat": self.beta_hat, "intercept": self.intercept, "n_decisions": self.n_decisions}


@dataclass
class AttachmentEstimate:
    beta_hat: float
    curve: AttachmentCurve
    per_type: dict[str, AttachmentCurve] = field(default_factory=dict)
    beta_e: dict[str, float | None] = field(default_factory=dict)
    p_cont_e: dict[str, float | None] = field(default_factory=dict)
    amplification_e: dict[str, float | None] = field(default_factory=dict)
    n_decisions: int = 0
    N: int | None = None

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "beta_hat": self.beta_hat,
            "n_decisions": self.n_decisions,
            "curve": self.curve.to_dict(),
            "per_type": {k: v.to_dict() for k, v in self.per_type.items()},
            "beta_e": self.beta_e,
            "p_cont_e": self.p_cont_e,
            "A_e": self.amplification_e,
        }


class _Accumulator:
    """Observed counts and null expectations per activity bin."""

    def __init__(self) -> None:
        self.obs = np.zeros(_NBINS)
        self.obs_logx = np.zeros(_NBINS)
        self.exp = np.zeros(_NBINS)
        self.exp_logx = np.zeros(_NBINS)
        self.n = 0

    def add(self, x: int, hist: np.ndarray, hist_logx: np.ndarray, alive: int) -> None:
        b = _bin(x)
        self.obs[b] += 1
        self.obs_logx[b] += math.log(x)
        self.exp += hist / alive
        self.exp_logx += hist_logx / alive
        self.n += 1

    def curve(self, min_obs: int) -> AttachmentCurve:
        keep = (self.obs >= min_obs) & (self.exp > 0)
        xs, rs = [], []
        for b in np.flatnonzero(keep):
            # representative activity: null-weighted geometric mean inside the bin
            xs.append(math.exp(self.exp_logx[b] / self.exp[b]))
            rs.append(self.obs[b] / self.exp[b])
        obs = self.obs[keep]
        beta = icpt = None
        if len(xs) >= 2:
            # var(log R) ~ 1/obs for Poisson counts
            beta, icpt = (float(v) for v in np.polyfit(np.log(xs), np.log(rs), 1, w=np.sqrt(obs)))
        return AttachmentCurve([float(v) for v in xs], [float(v) for v in rs],
                               [int(v) for v in obs],
                               [float(self.exp[b]) for b in np.flatnonzero(keep)], beta, icpt, self.n)


def _bin(x: int) -> int:
    return min(int(x).bit_length() - 1, _NBINS - 1)


def _decision_targets(rec) -> list[str]:
    if rec.event_type == "merge_claims" and rec.claim is not None:
        return list(rec.claim.parent_claim_ids)
    return [rec.target_claim_id] if rec.target_claim_id else []


def estimate_attachment(bundle: TraceBundle, graph: ClaimGraph | None = None, run_id: str | None = None,
                        min_bin_obs: int = 10, min_decisions: int = MIN_DECISIONS) -> AttachmentEstimate:
    """Routing ratio R(x) and attachment exponents from a trace.

    Consecutive records sharing (timestamp, target, event type) form one
    decision, whoever authored them.
    The pooled curve uses each decision's primary target (the explicit
    target, else the first merge parent); per-type curves for merges count
    every parent selection.
    """
    if graph is not None and run_id is None:
        run_id = graph.run_id
    runs = [run_id] if run_id is not None else bundle.run_ids()
    pooled = _Accumulator()
    per_type = {et: _Accumulator() for et in EVENT_TYPES if et != "propose_claim"}
    cont_hits = {et: 0 for et in per_type}
    cont_total = {et: 0 for et in per_type}
    n_agents = None

    run_idx = bundle.run_indices()
    for rid in runs:
        idxs = run_idx.get(rid, [])
        meta = bundle.run_meta.get(rid)
        if meta is not None:
            n_agents = meta.agent_count
        activity: dict[str, int] = {}
        hist = np.zeros(_NBINS)
        hist_logx = np.zeros(_NBINS)
        pending: list[tuple[str, str, int]] = []  # (event type, followed claim, its activity then)
        last_key = None

        def bump(cid: str) -> None:
            x = activity[cid]
            b = _bin(x)
            hist[b] -= 1
            hist_logx[b] -= math.log(x)
            x += 1
            activity[cid] = x
            b = _bin(x)
            hist[b] += 1
            hist_logx[b] += math.log(x)

        for i in idxs:
            r = bundle.records[i]
            targets = [t for t in _decision_targets(r) if t in activity]
            key = (r.timestamp, r.target_claim_id, r.event_type)
            if targets and key != last_key:
                alive = len(activity)
                snapshot = {t: activity[t] for t in targets}
                primary = targets[0]
                pooled.add(snapshot[primary], hist, hist_logx, alive)
                acc = per_type[r.event_type]
                for t in targets:
                    acc.add(snapshot[t], hist, hist_logx, alive)
            last_key = key if targets else None

            for ref in r.referenced_claims():
                if ref in activity:
                    bump(ref)
            if r.claim is not None and r.claim.claim_id not in activity:
                activity[r.claim.claim_id] = 1
                hist[0] += 1
            if r.event_type != "propose_claim":
                # an endorsement continues through a later reference to its target
                follow = r.claim.claim_id if r.claim is not None else r.target_claim_id
                if follow in activity:
                    pending.append((r.event_type, follow, activity[follow]))

        for et, cid, x_then in pending:
            cont_total[et] += 1
            cont_hits[et] += int(activity[cid] > x_then)

    if pooled.n < min_decisions:
        raise InsufficientDecisions(f"{pooled.n} routing decisions; need >= {min_decisions}")
    curve = pooled.curve(min_bin_obs)
    if curve.beta_hat is None:
        raise InsufficientDecisions("fewer than two populated activity bins")
    per_curves = {et: acc.curve(min_bin_obs) for et, acc in per_type.items() if acc.n > 0}
    beta_e = {et: c.beta_hat for et, c in per_curves.items()}
    p_cont = {et: (cont_hits[et] / cont_total[et] if cont_total[et] else None) for et in per_type}
    amp = {}
    for et in per_type:
        b, p = beta_e.get(et), p_cont.get(et)
        amp[et] = None if b is None or p is None else b * p
    return AttachmentEstimate(curve.beta_hat, curve, per_curves, beta_e, p_cont, amp, pooled.n, n_agents)
