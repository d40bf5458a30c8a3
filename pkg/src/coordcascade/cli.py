"""Command-line front-end.

Exit codes: 0 success, 1 data violation, 2 IO or configuration error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import dti as dti_mod
from .errors import ConfigError, CoordCascadeError, EmptyInput
from .observables import write_rows_csv
from .pipeline import PipelineConfig, analyze, dump_json, load_bundles, parse_xmin, report
from .sim.engine import SimConfig, run_simulation
from .sim.sweep import configs_from_json, sweep
from .trace import validate_bundle, write_trace

EXIT_OK, EXIT_DATA, EXIT_IO = 0, 1, 2


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _guard(fn):
    """Map package and IO errors onto the exit-code contract."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _Fail as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except (ConfigError, OSError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except (CoordCascadeError, ValueError) as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_DATA)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _config(path: str | None) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _require_inputs(paths) -> list[str]:
    if not paths:
        raise _Fail(EXIT_IO, "no --input given")
    for p in paths:
        if not Path(p).exists():
            raise _Fail(EXIT_IO, f"input not found: {p}")
    return list(paths)


def _bundles(paths):
    try:
        return load_bundles(paths)
    except EmptyInput as exc:
        raise _Fail(EXIT_DATA, f"empty input: {exc}") from exc


def _sim_doc(cfg: PipelineConfig, seed: int | None) -> list[SimConfig]:
    doc = cfg.sweep or {}
    configs = configs_from_json(doc)
    if seed is not None and "seed" not in doc.get("grid", {}) and "seed" not in doc.get("base", {}):
        configs = [replace(c, seed=seed) for c in configs]
    return configs


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Coordination-cascade analysis toolkit."""


@main.command("validate")
@click.option("--input", "inputs", multiple=True, help="Trace file(s).")
@click.option("--out", type=click.Path(), default=None, help="Where to write the validation report (JSON).")
@_guard
def cmd_validate(inputs, out) -> None:
    """Check trace files against the record schema and lineage rules."""
    paths = _require_inputs(inputs)
    reports = []
    ok = True
    for p in paths:
        try:
            bundles = load_bundles([p])
        except EmptyInput as exc:
            reports.append({"input": p, "ok": False, "violations": [{"kind": "empty_input", "message": str(exc)}]})
            ok = False
            continue
        for b in bundles:
            rep = validate_bundle(b)
            d = rep.to_dict()
            d["input"] = p
            d["parse_diagnostics"] = [str(x) for x in b.diagnostics]
            if d["parse_diagnostics"]:
                d["ok"] = False
            reports.append(d)
            ok = ok and d["ok"]
    doc = reports[0] if len(reports) == 1 else {"ok": ok, "reports": reports}
    if out:
        dump_json(out, doc)
    for r in reports:
        n = len(r.get("violations", [])) + len(r.get("parse_diagnostics", []))
        click.echo(f"{r['input']}: {'ok' if r['ok'] else 'INVALID'} ({n} issues)")
        for v in r.get("violations", [])[:20]:
            click.echo(f"  {v.get('kind')}: {v.get('message')}")
    sys.exit(EXIT_OK if ok else EXIT_DATA)


@main.command("analyze")
@click.option("--input", "inputs", multiple=True, help="Trace file(s) or directories of traces.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Pipeline config (JSON).")
@click.option("--tau", type=int, default=None, help="Contradiction window in step units.")
@click.option("--xmin", default=None, help="'scan' or a fixed integer tail onset.")
@click.option("--bootstrap", type=int, default=None, help="Bootstrap resamples for the TPL exponent (0 = off).")
@click.option("--seed", type=int, default=None, help="Seed for bootstrap resampling.")
@_guard
def cmd_analyze(inputs, out, config_path, tau, xmin, bootstrap, seed) -> None:
    """Observables, tail fits, concentration and scaling for a set of traces."""
    cfg = _config(config_path)
    cfg = replace(cfg, inputs=list(inputs) or cfg.inputs, out=out or cfg.out,
                  tau=cfg.tau if tau is None else tau, bootstrap=cfg.bootstrap if bootstrap is None else bootstrap,
                  seed=cfg.seed if seed is None else seed,
                  x_min=cfg.x_min if xmin is None else parse_xmin(xmin))
    cfg.validate()
    if not cfg.out:
        raise _Fail(EXIT_IO, "no --out directory given")
    bundles = _bundles(_require_inputs(cfg.inputs))
    for b in bundles:
        rep = validate_bundle(b)
        if not rep.ok or b.diagnostics:
            n = len(rep.violations) + len(b.diagnostics)
            raise _Fail(EXIT_DATA, f"input fails validation ({n} issues); run validate")
    res = analyze(bundles, cfg.out, cfg.tau, cfg.x_min, cfg.bootstrap, cfg.seed, cfg.observables)
    for row in res.summary:
        click.echo(f"{row['observable']:>20}  n={row['n_total']:<7} {row['status']}")


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline config with a 'sweep' section ({base, grid} or {configs}).")
@click.option("--out", type=click.Path(), default=None, help="Output directory for traces and index.csv.")
@click.option("--seed", type=int, default=None, help="Seed when the sweep does not list seeds.")
@_guard
def cmd_simulate(config_path, out, seed) -> None:
    """Run a simulator sweep and write one trace per run plus an index."""
    cfg = _config(config_path)
    out = out or cfg.out
    if not out:
        raise _Fail(EXIT_IO, "no --out directory given")
    configs = _sim_doc(cfg, seed if seed is not None else (cfg.seed if config_path else None))
    res = sweep(configs, out)
    click.echo(f"{len(res.index)} runs written to {out}")
    if res.failures:
        click.echo(f"{len(res.failures)} runs failed; see failures.json", err=True)
        sys.exit(EXIT_DATA)


@main.command("dti-calibrate")
@click.option("--input", "inputs", multiple=True, help="Baseline trace file(s) or directories.")
@click.option("--out", type=click.Path(), required=True, help="Calibration file (JSON) to write.")
@click.option("--stratify", is_flag=True, help="Fit one parameter set per N instead of pooling.")
@_guard
def cmd_dti_calibrate(inputs, out, stratify) -> None:
    """Fit DTI parameters per condition class from baseline traces."""
    bundles = _bundles(_require_inputs(inputs))
    params = dti_mod.calibrate(bundles, stratify_by_n=stratify)
    dti_mod.save_params(params, out)
    for k, p in params.items():
        click.echo(f"{k}: a_c={p.a_c:.4g} beta_c={p.beta_c_hat:.4g} delta_c={p.delta_c:.4g} (n={p.n_cascades})")


@main.command("dti-run")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Pipeline config with a 'sweep' section.")
@click.option("--calibration", type=click.Path(), default=None, help="Calibration file from dti-calibrate.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Seed when the sweep does not list seeds.")
@click.option("--delta-override", type=float, default=None, help="Replace every delta_c (inf disables triggers).")
@click.option("--xmin", default=None, help="'scan' or a fixed integer tail onset for the comparison.")
@_guard
def cmd_dti_run(config_path, calibration, out, seed, delta_override, xmin) -> None:
    """Run treated sweeps with seed-matched baselines and compare them."""
    cfg = _config(config_path)
    out = out or cfg.out
    calibration = calibration or cfg.calibration
    delta = delta_override if delta_override is not None else cfg.delta_override
    if not out or not calibration:
        raise _Fail(EXIT_IO, "dti-run needs --out and --calibration")
    params = dti_mod.load_params(calibration)
    configs = _sim_doc(cfg, seed if seed is not None else (cfg.seed if config_path else None))
    x_min = cfg.x_min if xmin is None else parse_xmin(xmin)
    root = Path(out)
    (root / "treated").mkdir(parents=True, exist_ok=True)
    (root / "baseline").mkdir(parents=True, exist_ok=True)
    base, treated, rows, n_trig = [], [], [], 0
    for c in configs:
        b_bundle = run_simulation(c)
        t_bundle, rep = dti_mod.run_with_dti(c, params, delta_override=delta)
        rid = c.resolved_run_id()
        write_trace(b_bundle, root / "baseline" / f"{rid}.jsonl")
        write_trace(t_bundle, root / "treated" / f"{rid}.jsonl")
        rep.write(root / "treated" / f"{rid}.dti.json", root / "treated" / f"{rid}.triggers.csv")
        base.append(b_bundle)
        treated.append(t_bundle)
        n_trig += rep.n_triggers
        rows.append({"run_id": rid, "N": c.N, "seed": c.seed, "triggers": rep.n_triggers,
                     "identical": b_bundle == t_bundle})
    ev = dti_mod.evaluate_intervention(base, treated, x_min=x_min, n_triggers=n_trig)
    dump_json(root / "intervention.json", ev.to_dict())
    write_rows_csv(root / "runs.csv", rows, ["run_id", "N", "seed", "triggers", "identical"])
    click.echo(f"{len(configs)} seed-matched pairs, {n_trig} triggers")


@main.command("report")
@click.option("--input", "inputs", multiple=True, help="Analyze output directories.")
@click.option("--out", type=click.Path(), required=True, help="Report directory.")
@click.option("--xmin", default="scan", help="'scan' or a fixed integer tail onset for per-N fits.")
@_guard
def cmd_report(inputs, out, xmin) -> None:
    """Aggregate analyze outputs into comparison tables."""
    doc = report(_require_inputs(inputs), out, parse_xmin(xmin))
    for o, s in doc["scaling"].items():
        if s.get("status") == "ok":
            click.echo(f"{o}: gamma_hat={s['gamma_hat']:.3f} gamma_th={s['gamma_th']}")


if __name__ == "__main__":  # pragma: no cover
    main()
