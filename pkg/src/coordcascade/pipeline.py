"""End-to-end analysis: traces in, sample CSVs, fit JSON and summary tables out."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import tails
from .attachment import estimate_attachment
from .errors import ConfigError, CoordCascadeError
from .graph import DEFAULT_TAU, build_claim_graph, build_subtask_tree, derive_groupings, extract_cascades
from .observables import (
    OBSERVABLES,
    EventSizeSample,
    ExtremeSample,
    cascade_stats,
    concentration,
    contradiction_bursts,
    delegation_cascade_sizes,
    extreme_samples,
    merge_fanins,
    revision_waves,
    tce_samples,
    write_rows_csv,
    write_samples_csv,
)
from .trace import TraceBundle, parse_trace

FIT_FAMILIES = ("truncated_power_law", "power_law", "log_normal", "exponential")
COMPARISONS = (("truncated_power_law", "power_law"), ("truncated_power_law", "log_normal"),
               ("truncated_power_law", "exponential"))
SUMMARY_COLUMNS = (
    "observable", "n_total", "n_distinct", "x_min", "n_tail", "alpha_hat", "alpha_ci_low", "alpha_ci_high",
    "xc_hat", "family", "x_max",
    "lr_tpl_pl", "p_tpl_pl", "lr_tpl_ln", "p_tpl_ln", "lr_tpl_exp", "p_tpl_exp", "status",
)
_SHORT = {"truncated_power_law": "tpl", "power_law": "pl", "log_normal": "ln", "exponential": "exp"}


@dataclass
class PipelineConfig:
    inputs: list[str] = field(default_factory=list)
    out: str | None = None
    observables: tuple[str, ...] = OBSERVABLES
    tau: int = DEFAULT_TAU
    x_min: str | int = "scan"
    bootstrap: int = 0
    seed: int = 0
    sweep: dict | None = None
    dti: bool = False
    calibration: str | None = None
    delta_override: float | None = None

    def validate(self) -> None:
        bad = set(self.observables) - set(OBSERVABLES)
        if bad:
            raise ConfigError(f"unknown observables {sorted(bad)}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.x_min != "scan":
            if isinstance(self.x_min, bool) or not isinstance(self.x_min, int) or self.x_min < 1:
                raise ConfigError("x_min must be 'scan' or an integer >= 1")
        if self.bootstrap < 0:
            raise ConfigError("bootstrap count must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "observables" in d:
            d["observables"] = tuple(d["observables"])
        if "inputs" in d and isinstance(d["inputs"], str):
            d["inputs"] = [d["inputs"]]
        cfg = cls(**d)
        cfg.x_min = parse_xmin(cfg.x_min)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def parse_xmin(v: str | int) -> str | int:
    if isinstance(v, int) and not isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s == "scan":
        return "scan"
    try:
        n = int(s)
    except ValueError as exc:
        raise ConfigError(f"x_min must be 'scan' or an integer, got {v!r}") from exc
    if n < 1:
        raise ConfigError("fixed x_min must be >= 1")
    return n


def load_bundles(paths: Iterable[str | Path]) -> list[TraceBundle]:
    """Trace files, or directories of ``*.jsonl`` / ``*.jsonl.gz`` files (sorted)."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(list(p.glob("*.jsonl")) + list(p.glob("*.jsonl.gz")))
            out.extend(parse_trace(f) for f in files)
        else:
            out.append(parse_trace(p))
    return out


def combine(bundles: Sequence[TraceBundle]) -> TraceBundle:
    if len(bundles) == 1:
        return bundles[0]
    recs, meta = [], {}
    for b in bundles:
        recs.extend(b.records)
        meta.update(b.run_meta)
    return TraceBundle(tuple(recs), meta)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------


@dataclass
class ObservableSet:
    samples: dict[str, list[EventSizeSample]]
    cascade_rows: list[dict]
    concentration_rows: list[dict]
    diagnostics: list[str]


def collect(bundle: TraceBundle, tau: int = DEFAULT_TAU) -> ObservableSet:
    samples: dict[str, list[EventSizeSample]] = {o: [] for o in OBSERVABLES}
    casc_rows, conc_rows, diags = [], [], []
    for rid in bundle.run_ids():
        meta = bundle.run_meta.get(rid)
        sub = _run_view(bundle, rid)
        graph = derive_groupings(build_claim_graph(sub, rid), tau)
        tree = build_subtask_tree(sub, rid)
        diags.extend(f"{rid}: {d}" for d in graph.diagnostics + tree.diagnostics)
        cascades = extract_cascades(graph, sub)
        stats = cascade_stats(cascades, sub)
        samples["delegation_cascade"] += delegation_cascade_sizes(tree, rid, meta)
        samples["revision_wave"] += revision_waves(graph, meta)
        samples["contradiction_burst"] += contradiction_bursts(graph, meta)
        samples["merge_fanin"] += merge_fanins(graph, meta)
        samples["tce"] += tce_samples(stats, meta)
        casc_rows += [s.to_row() for s in stats]
        try:
            rep = concentration(sub, cascades, rid)
        except CoordCascadeError as exc:
            diags.append(f"{rid}: concentration skipped ({exc})")
            continue
        row = {"run_id": rid, "N": rep.N, "active_fraction": rep.active_fraction, "gini": rep.gini,
               "n_eff": rep.n_eff, "n_eff_ratio": rep.n_eff_ratio}
        for k in (10, 25, 50):
            row[f"e_active_{k}"] = rep.e_active[k]
            row[f"e_all_{k}"] = rep.e_all[k]
            row[f"delta_active_{k}"] = rep.delta_active[k]
        row["s_1"] = rep.s_k.get(1)
        conc_rows.append(row)
    return ObservableSet(samples, casc_rows, conc_rows, diags)


def _run_view(bundle: TraceBundle, rid: str) -> TraceBundle:
    if len(bundle.run_ids()) == 1:
        return bundle
    meta = bundle.run_meta.get(rid)
    return TraceBundle(tuple(r for r in bundle.records if r.run_id == rid), {rid: meta} if meta else {})


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def fit_observable(values: Sequence[int], x_min: str | int = "scan", bootstrap: int = 0,
                   seed: int = 0) -> tuple[dict, dict]:
    """(summary row, JSON document) for one pooled observable."""
    x = np.asarray(values, dtype=np.int64)
    row: dict[str, Any] = {"n_total": int(x.size), "n_distinct": int(np.unique(x).size) if x.size else 0,
                           "x_max": int(x.max()) if x.size else None}
    doc: dict[str, Any] = {"n_total": row["n_total"], "x_min_mode": x_min, "fits": {}, "comparisons": []}
    try:
        if x_min == "scan":
            xm, _ = tails.select_xmin(x, "power_law")
        else:
            xm = int(x_min)
        fits = {fam: tails.fit_family(x, fam, xm) for fam in FIT_FAMILIES}
    except CoordCascadeError as exc:
        row["status"] = f"insufficient: {type(exc).__name__}"
        doc["status"] = row["status"]
        doc["error"] = str(exc)
        return row, doc
    tpl = fits["truncated_power_law"]
    row.update(x_min=xm, n_tail=tpl.n_tail, alpha_hat=tpl.alpha_hat, xc_hat=tpl.xc_hat,
               family=max(FIT_FAMILIES, key=lambda f: (fits[f].loglik, -FIT_FAMILIES.index(f))))
    doc["x_min"] = xm
    doc["fits"] = {f: fits[f].to_dict() for f in FIT_FAMILIES}
    for a, b in COMPARISONS:
        key = f"{_SHORT[a]}_{_SHORT[b]}"
        try:
            c = tails.compare_fits(fits[a], fits[b], x)
            row[f"lr_{key}"], row[f"p_{key}"] = c.lr, c.p_value
            doc["comparisons"].append(c.to_dict())
        except CoordCascadeError as exc:
            doc["comparisons"].append({"family_a": a, "family_b": b, "error": str(exc)})
    if bootstrap > 0:
        try:
            bs = tails.bootstrap_ci(x, "truncated_power_law", resamples=bootstrap, x_min=xm, seed=seed)
            row["alpha_ci_low"], row["alpha_ci_high"] = bs.intervals["alpha"]
            doc["bootstrap"] = bs.to_dict()
        except CoordCascadeError as exc:
            doc["bootstrap"] = {"error": str(exc)}
    row["status"] = "ok"
    doc["status"] = "ok"
    return row, doc


def _scaling(extremes: Sequence[ExtremeSample], alpha: float | None) -> dict:
    try:
        sf = tails.fit_extreme_scaling(extremes, alpha)
    except CoordCascadeError as exc:
        return {"status": f"insufficient: {type(exc).__name__}", "error": str(exc)}
    d = sf.to_dict()
    d["status"] = "ok"
    return d


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


@dataclass
class AnalysisResult:
    summary: list[dict]
    fits: dict
    scaling: dict
    attachment: dict
    observables: ObservableSet


def analyze(bundle: TraceBundle | Sequence[TraceBundle], out_dir: str | Path | None = None,
            tau: int = DEFAULT_TAU, x_min: str | int = "scan", bootstrap: int = 0, seed: int = 0,
            observables: Sequence[str] = OBSERVABLES) -> AnalysisResult:
    if not isinstance(bundle, TraceBundle):
        bundle = combine(list(bundle))
    obs = collect(bundle, tau)
    summary, fits, scaling = [], {}, {}
    extremes = extreme_samples([s for o in observables for s in obs.samples[o]], bundle.run_meta)
    for o in observables:
        vals = [s.x for s in obs.samples[o]]
        row, doc = fit_observable(vals, x_min, bootstrap, seed)
        row["observable"] = o
        summary.append(row)
        fits[o] = doc
        scaling[o] = _scaling([e for e in extremes if e.observable == o], row.get("alpha_hat"))
    try:
        attachment = estimate_attachment(bundle).to_dict()
        attachment["status"] = "ok"
    except CoordCascadeError as exc:
        attachment = {"status": f"insufficient: {type(exc).__name__}", "error": str(exc)}
    result = AnalysisResult(summary, fits, scaling, attachment, obs)
    if out_dir is not None:
        write_analysis(result, out_dir, extremes, observables)
    return result


def write_analysis(result: AnalysisResult, out_dir: str | Path, extremes: Sequence[ExtremeSample],
                   observables: Sequence[str] = OBSERVABLES) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for o in observables:
        write_samples_csv(out / f"{o}.csv", result.observables.samples[o])
    write_rows_csv(out / "cascades.csv", result.observables.cascade_rows,
                   list(result.observables.cascade_rows[0]) if result.observables.cascade_rows else ["run_id"])
    conc = result.observables.concentration_rows
    write_rows_csv(out / "concentration.csv", conc, list(conc[0]) if conc else ["run_id"])
    write_rows_csv(out / "extremes.csv", [asdict(e) for e in extremes], ["observable", "run_id", "N", "x_max"])
    write_rows_csv(out / "summary.csv", result.summary, SUMMARY_COLUMNS)
    dump_json(out / "fits.json", result.fits)
    dump_json(out / "scaling.json", result.scaling)
    dump_json(out / "attachment.json", result.attachment)
    if result.observables.diagnostics:
        (out / "diagnostics.txt").write_text("\n".join(result.observables.diagnostics) + "\n")


def dump_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(analysis_dirs: Sequence[str | Path], out_dir: str | Path, x_min: str | int = "scan") -> dict:
    """Aggregate analyze outputs: per-label summaries, alpha vs N, <x_max> vs N and scaling fits."""
    dirs = [Path(d) for d in analysis_dirs]
    for d in dirs:
        if not (d / "summary.csv").exists() and not (d / "intervention.json").exists():
            raise FileNotFoundError(f"{d} holds neither analyze nor dti-run output")
    labels = _labels(dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for lab, d in zip(labels, dirs):
        if not (d / "summary.csv").exists():
            continue
        for r in _read_csv(d / "summary.csv"):
            rows.append({"label": lab, **r})
    write_rows_csv(out / "summary_by_label.csv", rows, ("label",) + SUMMARY_COLUMNS)

    samples: dict[str, dict[int, list[int]]] = {}
    seen_runs: set[tuple[str, str]] = set()
    extremes: dict[str, list[ExtremeSample]] = {}
    for d in dirs:
        for o in OBSERVABLES:
            f = d / f"{o}.csv"
            if not f.exists():
                continue
            for r in _read_csv(f):
                if r["N"]:
                    samples.setdefault(o, {}).setdefault(int(r["N"]), []).append(int(r["x"]))
        if not (d / "extremes.csv").exists():
            continue
        for r in _read_csv(d / "extremes.csv"):
            key = (r["observable"], r["run_id"])
            if key in seen_runs:
                continue
            seen_runs.add(key)
            extremes.setdefault(r["observable"], []).append(
                ExtremeSample(r["observable"], r["run_id"], int(r["N"]), int(r["x_max"])))

    alpha_rows, pooled_alpha = [], {}
    for o in OBSERVABLES:
        by_n = samples.get(o, {})
        allv = [v for n in sorted(by_n) for v in by_n[n]]
        if allv:
            prow, _ = fit_observable(allv, x_min)
            pooled_alpha[o] = prow.get("alpha_hat")
        for n in sorted(by_n):
            r, _ = fit_observable(by_n[n], x_min)
            alpha_rows.append({"observable": o, "N": n, "n_total": r["n_total"], "x_min": r.get("x_min"),
                               "alpha_hat": r.get("alpha_hat"), "xc_hat": r.get("xc_hat"), "status": r["status"]})
    write_rows_csv(out / "alpha_vs_n.csv", alpha_rows,
                   ["observable", "N", "n_total", "x_min", "alpha_hat", "xc_hat", "status"])

    xmax_rows, scaling = [], {}
    for o in OBSERVABLES:
        ex = extremes.get(o, [])
        by_n: dict[int, list[int]] = {}
        for e in ex:
            by_n.setdefault(e.N, []).append(e.x_max)
        for n in sorted(by_n):
            v = np.asarray(by_n[n], dtype=float)
            xmax_rows.append({"observable": o, "N": n, "runs": v.size, "mean_x_max": float(v.mean()),
                              "sd_x_max": float(v.std(ddof=1)) if v.size > 1 else None})
        scaling[o] = _scaling(ex, pooled_alpha.get(o))
    write_rows_csv(out / "xmax_vs_n.csv", xmax_rows, ["observable", "N", "runs", "mean_x_max", "sd_x_max"])
    dump_json(out / "scaling.json", scaling)

    dti_rows = []
    for lab, d in zip(labels, dirs):
        f = d / "intervention.json"
        if f.exists():
            doc = json.loads(f.read_text())
            for arm in ("baseline", "treated"):
                dti_rows.append({"label": lab, "arm": arm, **{k: v for k, v in doc[arm].items()
                                                               if not isinstance(v, dict)}})
    if dti_rows:
        write_rows_csv(out / "dti_comparison.csv", dti_rows, list(dti_rows[0]))
    doc = {"labels": labels, "scaling": scaling, "n_alpha_rows": len(alpha_rows)}
    dump_json(out / "report.json", doc)
    return doc


def _labels(dirs: Sequence[Path]) -> list[str]:
    names = [d.name or str(d) for d in dirs]
    if len(set(names)) == len(names):
        return names
    return [str(d) for d in dirs]
