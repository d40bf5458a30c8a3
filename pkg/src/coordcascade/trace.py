"""Event-level trace records: data model, line-delimited JSON ingestion, validation.

One JSON object per line. Event lines carry the logging fields
(``run_id``, ``step_id``, ``agent_id``, ``event_type``, ``target_claim_id``,
``target_subtask_id``, ``timestamp``, ``message_length``) plus optional embedded
``claim`` and ``subtask`` objects. A line with ``"record_type": "run_meta"``
declares per-run condition labels::

    {"record_type": "run_meta", "run_id": "r0", "agent_count": 16,
     "topology": "star", "task_family": "qa", "seed": 3, "root_subtasks": ["T0"]}

Runs without a meta line get one synthesised from the records (agent count =
distinct agent ids) and a warning.
"""

from __future__ import annotations

import gzip
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import EmptyInput, SchemaError

EVENT_TYPES = (
    "propose_claim",
    "revise_claim",
    "contradict_claim",
    "merge_claims",
    "delegate_subtask",
    "endorse_claim",
)
CLAIM_STATUSES = ("proposed", "revised", "contradictory", "merged")
SUBTASK_STATUSES = ("active", "completed")
TOPOLOGIES = (
    "chain",
    "star",
    "tree",
    "hierarchical",
    "fully_connected",
    "sparse_mesh",
    "dynamic_reputation",
)
TASK_FAMILIES = ("qa", "coding", "planning", "reasoning")

# event types that must point at an existing claim
TARGETED_EVENTS = ("revise_claim", "contradict_claim", "endorse_claim")
# status each claim-creating event must produce
STATUS_FOR_EVENT = {
    "propose_claim": "proposed",
    "revise_claim": "revised",
    "contradict_claim": "contradictory",
    "merge_claims": "merged",
    "delegate_subtask": "proposed",
}

_EVENT_KEYS = (
    "run_id",
    "step_id",
    "agent_id",
    "event_type",
    "target_claim_id",
    "target_subtask_id",
    "timestamp",
    "message_length",
    "claim",
    "subtask",
)
_CLAIM_KEYS = ("claim_id", "parent_claim_ids", "claim_status")
_SUBTASK_KEYS = ("subtask_id", "parent_subtask_id", "assigned_agent", "subtask_status")


@dataclass(frozen=True)
class ClaimPayload:
    claim_id: str
    parent_claim_ids: tuple[str, ...] = ()
    claim_status: str = "proposed"
    # logged-but-untrusted fields (claim_depth, root_claim_id, ...) round-trip here
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        out = {
            "claim_id": self.claim_id,
            "parent_claim_ids": list(self.parent_claim_ids),
            "claim_status": self.claim_status,
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class SubtaskPayload:
    subtask_id: str
    parent_subtask_id: str | None = None
    assigned_agent: str = ""
    subtask_status: str = "active"
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        out = {
            "subtask_id": self.subtask_id,
            "parent_subtask_id": self.parent_subtask_id,
            "assigned_agent": self.assigned_agent,
            "subtask_status": self.subtask_status,
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class EventRecord:
    run_id: str
    step_id: int
    agent_id: str
    event_type: str
    target_claim_id: str | None = None
    target_subtask_id: str | None = None
    timestamp: int | str = 0
    message_length: int = 0
    claim: ClaimPayload | None = None
    subtask: SubtaskPayload | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def referenced_claims(self) -> tuple[str, ...]:
        """Existing claims this event points at (target and/or parents)."""
        refs: list[str] = []
        if self.target_claim_id:
            refs.append(self.target_claim_id)
        if self.claim is not None:
            refs.extend(p for p in self.claim.parent_claim_ids if p not in refs)
        return tuple(refs)

    def to_dict(self) -> dict:
        out = {
            "run_id": self.run_id,
            "step_id": self.step_id,
            "agent_id": self.agent_id,
            "event_type": self.event_type,
            "target_claim_id": self.target_claim_id,
            "target_subtask_id": self.target_subtask_id,
            "timestamp": self.timestamp,
            "message_length": self.message_length,
            "claim": None if self.claim is None else self.claim.to_dict(),
            "subtask": None if self.subtask is None else self.subtask.to_dict(),
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class RunMeta:
    run_id: str
    agent_count: int
    topology: str | None = None
    task_family: str | None = None
    seed: int | None = None
    root_subtasks: tuple[str, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def condition_class(self) -> tuple[str | None, str | None]:
        return (self.topology, self.task_family)

    def to_dict(self) -> dict:
        out = {
            "record_type": "run_meta",
            "run_id": self.run_id,
            "agent_count": self.agent_count,
            "topology": self.topology,
            "task_family": self.task_family,
            "seed": self.seed,
            "root_subtasks": list(self.root_subtasks),
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class TraceBundle:
    records: tuple[EventRecord, ...]
    run_meta: Mapping[str, RunMeta]
    diagnostics: tuple[SchemaError, ...] = ()
    warnings: tuple[str, ...] = ()

    def run_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.run_id, None)
        for rid in self.run_meta:
            seen.setdefault(rid, None)
        return list(seen)

    def run_indices(self) -> dict[str, list[int]]:
        """Record indices grouped by run, in input order."""
        groups: dict[str, list[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            groups[r.run_id].append(i)
        return dict(groups)

    def select_run(self, run_id: str) -> "TraceBundle":
        recs = tuple(r for r in self.records if r.run_id == run_id)
        return TraceBundle(recs, {run_id: self.run_meta[run_id]})


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _req_str(obj: Mapping, key: str, line: int, where: str = "") -> str:
    if key not in obj or obj[key] is None:
        raise SchemaError(line, f"missing required field {where}{key}")
    v = obj[key]
    if not isinstance(v, str) or not v:
        raise SchemaError(line, f"field {where}{key} must be a non-empty string")
    return v


def _opt_str(obj: Mapping, key: str, line: int, where: str = "") -> str | None:
    v = obj.get(key)
    if v is None:
        return None
    if not isinstance(v, str):
        raise SchemaError(line, f"field {where}{key} must be a string or null")
    return v or None


def _parse_claim(obj: Any, line: int) -> ClaimPayload:
    if not isinstance(obj, Mapping):
        raise SchemaError(line, "claim must be an object")
    cid = _req_str(obj, "claim_id", line, "claim.")
    parents = obj.get("parent_claim_ids", [])
    if parents is None:
        parents = []
    if not isinstance(parents, list) or not all(isinstance(p, str) and p for p in parents):
        raise SchemaError(line, "claim.parent_claim_ids must be a list of claim ids")
    status = obj.get("claim_status")
    if status not in CLAIM_STATUSES:
        raise SchemaError(line, f"unknown claim.claim_status {status!r}")
    extra = {k: v for k, v in obj.items() if k not in _CLAIM_KEYS}
    return ClaimPayload(cid, tuple(parents), status, extra)


def _parse_subtask(obj: Any, line: int) -> SubtaskPayload:
    if not isinstance(obj, Mapping):
        raise SchemaError(line, "subtask must be an object")
    sid = _req_str(obj, "subtask_id", line, "subtask.")
    parent = _opt_str(obj, "parent_subtask_id", line, "subtask.")
    agent = obj.get("assigned_agent", "")
    if not isinstance(agent, str):
        raise SchemaError(line, "subtask.assigned_agent must be a string")
    status = obj.get("subtask_status", "active")
    if status not in SUBTASK_STATUSES:
        raise SchemaError(line, f"unknown subtask.subtask_status {status!r}")
    extra = {k: v for k, v in obj.items() if k not in _SUBTASK_KEYS}
    return SubtaskPayload(sid, parent, agent, status, extra)


def _check_timestamp(v: Any, line: int) -> int | str:
    if _is_int(v):
        if v < 0:
            raise SchemaError(line, "timestamp must be non-negative")
        return v
    if isinstance(v, str):
        try:
            datetime.fromisoformat(v.replace("Z", "+00:00"))
        except ValueError:
            raise SchemaError(line, f"timestamp {v!r} is neither an integer nor ISO-8601") from None
        return v
    raise SchemaError(line, "timestamp must be an integer or ISO-8601 string")


def parse_event(obj: Any, line: int = 0) -> EventRecord:
    """Build one EventRecord from a decoded JSON object; raises SchemaError."""
    if not isinstance(obj, Mapping):
        raise SchemaError(line, "record must be a JSON object")
    run_id = _req_str(obj, "run_id", line)
    if "step_id" not in obj:
        raise SchemaError(line, "missing required field step_id")
    step = obj["step_id"]
    if not _is_int(step) or step < 0:
        raise SchemaError(line, "step_id must be a non-negative integer")
    agent = _req_str(obj, "agent_id", line)
    if "event_type" not in obj or obj["event_type"] is None:
        raise SchemaError(line, "missing required field event_type")
    etype = obj["event_type"]
    if etype not in EVENT_TYPES:
        raise SchemaError(line, f"unknown event_type {etype!r}")
    mlen = obj.get("message_length", 0)
    if not _is_int(mlen) or mlen < 0:
        raise SchemaError(line, "message_length must be a non-negative integer")
    ts = _check_timestamp(obj.get("timestamp", 0), line)
    claim = obj.get("claim")
    subtask = obj.get("subtask")
    extra = {k: v for k, v in obj.items() if k not in _EVENT_KEYS}
    return EventRecord(
        run_id=run_id,
        step_id=step,
        agent_id=agent,
        event_type=etype,
        target_claim_id=_opt_str(obj, "target_claim_id", line),
        target_subtask_id=_opt_str(obj, "target_subtask_id", line),
        timestamp=ts,
        message_length=mlen,
        claim=None if claim is None else _parse_claim(claim, line),
        subtask=None if subtask is None else _parse_subtask(subtask, line),
        extra=extra,
    )


def parse_meta(obj: Mapping, line: int = 0) -> RunMeta:
    run_id = _req_str(obj, "run_id", line)
    n = obj.get("agent_count")
    if not _is_int(n) or n < 1:
        raise SchemaError(line, "run_meta.agent_count must be a positive integer")
    topo = obj.get("topology")
    if topo is not None and topo not in TOPOLOGIES:
        raise SchemaError(line, f"unknown topology {topo!r}")
    fam = obj.get("task_family")
    if fam is not None and fam not in TASK_FAMILIES:
        raise SchemaError(line, f"unknown task_family {fam!r}")
    seed = obj.get("seed")
    if seed is not None and not _is_int(seed):
        raise SchemaError(line, "run_meta.seed must be an integer")
    roots = obj.get("root_subtasks") or []
    if not isinstance(roots, list) or not all(isinstance(s, str) for s in roots):
        raise SchemaError(line, "run_meta.root_subtasks must be a list of strings")
    keys = ("record_type", "run_id", "agent_count", "topology", "task_family", "seed", "root_subtasks")
    extra = {k: v for k, v in obj.items() if k not in keys}
    return RunMeta(run_id, n, topo, fam, seed, tuple(roots), extra)


def _open_lines(source: str | Path) -> Iterator[str]:
    path = Path(source)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            yield from fh
    else:
        with open(path, "r", encoding="utf-8") as fh:
            yield from fh


def parse_trace(source: str | Path | Iterable[str]) -> TraceBundle:
    """Parse a line-delimited JSON stream (path, gzip path, or iterable of lines).

    Malformed lines never abort parsing; each becomes a SchemaError in
    ``bundle.diagnostics`` carrying its 1-based line number.
    """
    if isinstance(source, (str, Path)):
        lines: Iterable[str] = _open_lines(source)
    elif isinstance(source, io.IOBase):
        lines = source  # type: ignore[assignment]
    else:
        lines = source

    records: list[EventRecord] = []
    metas: dict[str, RunMeta] = {}
    diags: list[SchemaError] = []
    warnings: list[str] = []
    n_lines = 0
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        if not raw.strip():
            continue
        n_lines += 1
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            diags.append(SchemaError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        try:
            if isinstance(obj, Mapping) and obj.get("record_type") == "run_meta":
                meta = parse_meta(obj, lineno)
                if meta.run_id in metas:
                    warnings.append(f"line {lineno}: duplicate run_meta for {meta.run_id}; later one kept")
                metas[meta.run_id] = meta
            else:
                records.append(parse_event(obj, lineno))
        except SchemaError as exc:
            diags.append(exc)
    if n_lines == 0:
        raise EmptyInput("trace stream contains no records")

    agents: dict[str, set[str]] = defaultdict(set)
    for r in records:
        agents[r.run_id].add(r.agent_id)
    for run_id, ids in agents.items():
        if run_id not in metas:
            metas[run_id] = RunMeta(run_id, max(1, len(ids)))
            warnings.append(f"run {run_id}: no run_meta line; agent_count inferred as {len(ids)}")
    return TraceBundle(tuple(records), metas, tuple(diags), tuple(warnings))


def iter_lines(bundle: TraceBundle) -> Iterator[str]:
    """Serialise a bundle back to line-delimited JSON (meta line first per run)."""
    emitted: set[str] = set()
    for r in bundle.records:
        if r.run_id not in emitted:
            emitted.add(r.run_id)
            yield json.dumps(bundle.run_meta[r.run_id].to_dict(), separators=(",", ":"))
        yield json.dumps(r.to_dict(), separators=(",", ":"))
    for run_id, meta in bundle.run_meta.items():
        if run_id not in emitted:
            yield json.dumps(meta.to_dict(), separators=(",", ":"))


def write_trace(bundle: TraceBundle, path: str | Path) -> None:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    # mtime=0 keeps gzip output byte-stable across runs
    if opener is gzip.open:
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            for line in iter_lines(bundle):
                gz.write(line.encode("utf-8") + b"\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for line in iter_lines(bundle):
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    run_id: str
    index: int  # record index in the bundle, -1 for run-level issues
    message: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "run_id": self.run_id, "index": self.index, "message": self.message}


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    n_records: int = 0
    n_runs: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_records": self.n_records,
            "n_runs": self.n_runs,
            "n_violations": len(self.violations),
            "violations": [v.to_dict() for v in self.violations],
            "warnings": list(self.warnings),
        }


def _check_record(i: int, r: EventRecord, out: list[Violation]) -> None:
    def bad(kind: str, msg: str) -> None:
        out.append(Violation(kind, r.run_id, i, msg))

    et = r.event_type
    c = r.claim
    if et in TARGETED_EVENTS and not r.target_claim_id:
        bad("missing_target", f"{et} requires target_claim_id")
    if et == "endorse_claim":
        if c is not None:
            bad("unexpected_claim", "endorse_claim does not create a claim")
    elif et == "delegate_subtask":
        if r.subtask is None:
            bad("missing_subtask", "delegate_subtask requires a subtask payload")
    elif c is None:
        bad("missing_claim", f"{et} requires a claim payload")

    if c is None:
        return
    parents = c.parent_claim_ids
    if c.claim_id in parents:
        bad("self_parent", f"claim {c.claim_id} lists itself as parent")
    if len(set(parents)) != len(parents):
        bad("duplicate_parent", f"claim {c.claim_id} repeats a parent id")
    want = STATUS_FOR_EVENT.get(et)
    if want is not None and c.claim_status != want:
        bad("status_mismatch", f"{et} must produce a {want} claim, got {c.claim_status}")
    st = c.claim_status
    if st == "merged" and len(set(parents)) < 2:
        bad("merge_arity", f"merged claim {c.claim_id} needs >= 2 parents")
    elif st in ("revised", "contradictory") and len(parents) != 1:
        bad("parent_arity", f"{st} claim {c.claim_id} needs exactly 1 parent")
    elif st == "proposed":
        # a delegation-spawned claim hangs off the delegating claim
        allowed = 1 if (et == "delegate_subtask" and r.target_claim_id) else 0
        if len(parents) != allowed:
            bad("parent_arity", f"proposed claim {c.claim_id} must have {allowed} parent(s)")
    if et in ("revise_claim", "contradict_claim", "delegate_subtask") and r.target_claim_id and parents:
        if tuple(parents) != (r.target_claim_id,):
            bad("target_mismatch", f"claim {c.claim_id} parent differs from target_claim_id")


def validate_bundle(bundle: TraceBundle) -> ValidationReport:
    """Check record, payload and cross-record invariants. Violations are data."""
    report = ValidationReport(n_records=len(bundle.records), n_runs=len(bundle.run_ids()))
    out = report.violations
    for diag in bundle.diagnostics:
        report.warnings.append(f"unparsed line {diag.line}: {diag.message}")
    report.warnings.extend(bundle.warnings)

    for run_id, idxs in bundle.run_indices().items():
        if run_id not in bundle.run_meta:
            out.append(Violation("missing_meta", run_id, -1, "run has no run_meta entry"))
        meta = bundle.run_meta.get(run_id)
        claim_at: dict[str, int] = {}
        subtask_at: dict[str, int] = {}
        for pos, i in enumerate(idxs):
            r = bundle.records[i]
            if r.claim is not None:
                if r.claim.claim_id in claim_at:
                    out.append(Violation("duplicate_claim", run_id, i, f"claim {r.claim.claim_id} defined twice"))
                else:
                    claim_at[r.claim.claim_id] = pos
            if r.subtask is not None:
                s = r.subtask
                if s.parent_subtask_id == s.subtask_id:
                    out.append(Violation("self_parent_subtask", run_id, i, f"subtask {s.subtask_id} is its own parent"))
                if s.subtask_id in subtask_at:
                    out.append(Violation("duplicate_subtask", run_id, i, f"subtask {s.subtask_id} defined twice"))
                else:
                    subtask_at[s.subtask_id] = pos

        prev_step = None
        declared = set(meta.root_subtasks) if meta else set()
        for pos, i in enumerate(idxs):
            r = bundle.records[i]
            if prev_step is not None and r.step_id <= prev_step:
                out.append(Violation("non_monotone_step", run_id, i, f"step_id {r.step_id} after {prev_step}"))
            prev_step = r.step_id
            _check_record(i, r, out)
            for ref in r.referenced_claims():
                at = claim_at.get(ref)
                if at is None:
                    out.append(Violation("dangling_reference", run_id, i, f"reference to undefined claim {ref}"))
                elif at >= pos and not (r.claim is not None and r.claim.claim_id == ref):
                    out.append(Violation("forward_reference", run_id, i, f"claim {ref} referenced before it is defined"))
            if r.subtask is not None and r.subtask.parent_subtask_id:
                p = r.subtask.parent_subtask_id
                if p not in subtask_at and p not in declared:
                    report.warnings.append(
                        f"run {run_id} record {i}: parent subtask {p} undefined; treated as a root"
                    )
                elif p in subtask_at and subtask_at[p] > pos:
                    out.append(Violation("forward_reference", run_id, i, f"subtask {p} referenced before definition"))
    return report
