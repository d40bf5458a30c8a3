"""Batch execution of simulator configurations with an on-disk index."""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..errors import ConfigError, CoordCascadeError
from ..observables import write_rows_csv
from ..trace import write_trace
from .engine import SimConfig, run_simulation

INDEX_COLUMNS = ("run_id", "file", "N", "topology", "task_family", "beta", "lambda", "seed", "events", "digest")


@dataclass
class SweepResult:
    index: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    index_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def grid(base: SimConfig | None = None, **axes: Sequence[Any]) -> list[SimConfig]:
    """Cartesian product of SimConfig field values over ``base``."""
    base = base or SimConfig()
    keys = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        out.append(replace(base, **dict(zip(keys, combo))))
    return out


def _run_one(cfg: SimConfig, out_dir: str) -> dict:
    bundle = run_simulation(cfg)
    run_id = cfg.resolved_run_id()
    name = f"{run_id}.jsonl"
    write_trace(bundle, Path(out_dir) / name)
    return {
        "run_id": run_id,
        "file": name,
        "N": cfg.N,
        "topology": cfg.topology,
        "task_family": cfg.task_family,
        "beta": cfg.beta,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "events": len(bundle.records),
        "digest": cfg.digest()[:16],
    }


def sweep(configs: Iterable[SimConfig], out_dir: str | Path, workers: int = 1) -> SweepResult:
    """Run every config, write one trace file per run plus ``index.csv``.

    All configs are validated before anything is written. Runs that fail at
    runtime are listed in ``failures.json``; the index covers the rest.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep needs at least one config")
    for c in configs:
        c.validate()
    seen: dict[str, int] = {}
    for i, c in enumerate(configs):
        rid = c.resolved_run_id()
        if rid in seen:
            # same config twice: the file would be identical, keep one
            continue
        seen[rid] = i
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = SweepResult()
    jobs = [configs[i] for i in seen.values()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, c, str(out)) for c in jobs]
            outcomes = []
            for c, f in zip(jobs, futures):
                try:
                    outcomes.append((c, f.result(), None))
                except CoordCascadeError as exc:
                    outcomes.append((c, None, exc))
    else:
        outcomes = []
        for c in jobs:
            try:
                outcomes.append((c, _run_one(c, str(out)), None))
            except CoordCascadeError as exc:
                outcomes.append((c, None, exc))
    for c, row, exc in outcomes:
        if exc is None:
            result.index.append(row)
        else:
            result.failures.append({"run_id": c.resolved_run_id(), "error": f"{type(exc).__name__}: {exc}",
                                    "config": c.to_dict()})
    result.index_path = out / "index.csv"
    write_rows_csv(result.index_path, result.index, INDEX_COLUMNS)
    if result.failures:
        (out / "failures.json").write_text(json.dumps(result.failures, indent=2, sort_keys=True) + "\n")
    return result


def configs_from_json(doc: Mapping[str, Any]) -> list[SimConfig]:
    """``{"base": {...}, "grid": {"N": [...], "seed": [...]}}`` or ``{"configs": [...]}``."""
    if "configs" in doc:
        return [SimConfig.from_dict(d) for d in doc["configs"]]
    base = SimConfig.from_dict(doc.get("base", {}))
    axes = dict(doc.get("grid", {}))
    if "lambda" in axes:
        axes["lam"] = axes.pop("lambda")
    bad = set(axes) - set(SimConfig.__dataclass_fields__)
    if bad:
        raise ConfigError(f"unknown grid axes {sorted(bad)}")
    if "workload" in axes:
        raise ConfigError("workload cannot be a grid axis")
    configs = grid(base, **axes) if axes else [base]
    for c in configs:
        c.validate()
    return configs
