"""Config-driven experiment runs with deterministic CSV output and a manifest.

Layout of an output directory::

    config.yaml          config echo with defaults filled in
    manifest.json        config hash, seeds, package version, sha256 of every file
    sweep.csv            only when a sweep is configured (seed independent)
    seed_<n>/estimates.csv, cov.csv      always
    seed_<n>/energy.csv, distribution_bound.csv   analysis.energy
    seed_<n>/bounds.csv, bounds_summary.txt       analysis.bounds
    seed_<n>/states.csv, observations.csv         simulate stage
    seed_<n>/validation.txt                       validate stage
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .analysis import bound_report, check_bound_assumptions, monotonicity_sweep
from .channels import observe
from .config import ExperimentSpec, build_energy, build_model, config_hash, dump_config
from .dynamics import simulate_state_grid
from .energy import bound_activation, simulate_energy_grid
from .estimator import FilterConfig, resolve_activation, run_filter
from .model import InvariantViolation, ModelError
from .validation import mc_battery

log = logging.getLogger(__name__)

STAGES = ("simulate", "filter", "energy", "bounds", "sweep", "validate")

HEADERS = {
    "estimates.csv": ("l", "k", "step", "comp", "value"),
    "cov.csv": ("l", "k", "step", "trace", "lambda_min"),
    "energy.csv": ("l", "k", "sensor", "rho", "rho_tilde"),
    "distribution_bound.csv": ("l", "k", "sensor", "level", "value"),
    "bounds.csv": ("l", "k", "step", "lower", "upper"),
    "sweep.csv": ("rho", "probe_l", "probe_k", "trace"),
    "states.csv": ("l", "k", "comp", "value"),
    "observations.csv": ("l", "k", "channel", "component", "value"),
}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, rows: Iterable[Sequence]) -> None:
    header = HEADERS[path.name]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextlib.contextmanager
def _stage(module: str):
    """Re-raise numerical failures with the module that produced them."""
    try:
        yield
    except InvariantViolation:
        raise
    except (ModelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise InvariantViolation(str(exc), module) from None


def filter_config(spec: ExperimentSpec) -> FilterConfig:
    f = spec.filter
    return FilterConfig(
        mode=f.mode,
        mc_size=f.mc_size,
        mc_seed=f.mc_seed,
        activation=f.activation,
        synthetic_rho=f.synthetic_rho,
        empirical_runs=f.empirical_runs,
        jitter=f.jitter,
    )


def default_stages(spec: ExperimentSpec) -> set[str]:
    stages = {"filter"}
    if spec.analysis.energy:
        stages.add("energy")
    if spec.analysis.bounds:
        stages.add("bounds")
    if spec.analysis.sweep is not None:
        stages.add("sweep")
    return stages


@dataclass
class RunResult:
    out_dir: Path
    files: dict[str, str]
    passed: bool = True
    messages: list[str] = field(default_factory=list)


def _grid_points(rows: int, cols: int):
    for l in range(rows):
        for k in range(cols):
            yield l, k


def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None, stages: Iterable[str] | None = None) -> RunResult:
    """Run every configured seed and write the outputs under ``out_dir``."""
    stages = default_stages(spec) if stages is None else set(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    out = Path(out_dir if out_dir is not None else spec.output)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(path: Path, rows) -> None:
        write_csv(path, rows)
        written.append(path)

    def emit_text(path: Path, text: str) -> None:
        path.write_text(text)
        written.append(path)

    emit_text(out / "config.yaml", dump_config(spec))

    model = build_model(spec)
    energy = build_energy(spec)
    fcfg = filter_config(spec)
    i, j = spec.horizon if spec.horizon is not None else (model.size, model.size)
    result = RunResult(out, {})

    acts = None
    if stages & {"filter", "energy", "bounds"}:
        with _stage("energy_harvest"):
            acts = resolve_activation(fcfg, energy, model.size, len(model.channels))

    per_seed = stages - {"sweep"}
    for seed in spec.seeds if per_seed else ():
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        log.info("seed %d -> %s", seed, sdir)
        with _stage("core_model"):
            states = simulate_state_grid(model, seed, 1)
        with _stage("energy_harvest"):
            buffers = [simulate_energy_grid(e, seed, 1, sensor=c) for c, e in enumerate(energy)]
        with _stage("channels"):
            obs = observe(model, states, [b.indicator for b in buffers], seed, (i, j))

        if "simulate" in stages:
            x = states.x[0]
            emit(
                sdir / "states.csv",
                ((l, k, c, x[l, k, c]) for l, k in _grid_points(i + 1, j + 1) for c in range(model.n)),
            )
            emit(
                sdir / "observations.csv",
                (
                    (l, k, s, c, y[0, l, k, c])
                    for s, y in enumerate(obs.ybar)
                    for l, k in _grid_points(i + 1, j + 1)
                    if not np.isnan(y[0, l, k, 0])
                    for c in range(y.shape[-1])
                ),
            )

        run = None
        if stages & {"filter", "bounds"}:
            with _stage("estimator"):
                run = run_filter(model, acts, fcfg, recon=obs.recon, horizon=(i, j), energy=energy)
            xu = run.x_upd[0]
            emit(
                sdir / "estimates.csv",
                ((l, k, run.step[l, k], c, xu[l, k, c]) for l, k in _grid_points(i + 1, j + 1) for c in range(model.n)),
            )
            lam = np.linalg.eigvalsh(run.P_upd)[..., 0]
            tr = run.trace_upd()
            emit(
                sdir / "cov.csv",
                ((l, k, run.step[l, k], tr[l, k], lam[l, k]) for l, k in _grid_points(i + 1, j + 1)),
            )

        if "energy" in stages:
            emit(
                sdir / "energy.csv",
                (
                    (l, k, c, a.rho[l, k], a.rho_tilde[l, k])
                    for c, a in enumerate(acts)
                    for l, k in _grid_points(i + 1, j + 1)
                ),
            )
            with _stage("energy_harvest"):
                Fs = [bound_activation(e)[1] for e in energy]
            emit(
                sdir / "distribution_bound.csv",
                (
                    (l, k, c, b, F[l, k, b])
                    for c, F in enumerate(Fs)
                    for l, k in _grid_points(i + 1, j + 1)
                    for b in range(F.shape[-1])
                ),
            )

        if "bounds" in stages:
            with _stage("analysis"):
                rep = bound_report(run, model, spec.analysis.young, spec.analysis.convention)
                failed = check_bound_assumptions(model, rep.params, run.moments)
            upper = np.fmin.reduce(np.stack(list(rep.upper.values())), axis=0)
            emit(
                sdir / "bounds.csv",
                (
                    (l, k, run.step[l, k], rep.lower_grid[l, k], upper[l, k])
                    for l, k in _grid_points(i + 1, j + 1)
                ),
            )
            lines = [f"convention: {rep.convention}"]
            lines.append("assumption check: " + ("ok" if not failed else "failed " + ", ".join(failed)))
            lines.append(f"lower bound violations: {len(rep.lower_violations)}")
            for y, bad in rep.upper_violations.items():
                lines.append(f"upper bound violations (young={y!r}): {len(bad)}")
            emit_text(sdir / "bounds_summary.txt", "\n".join(lines) + "\n")
            if not rep.ok:
                result.passed = False
                result.messages.append(f"seed {seed}: bound violations")

        if "validate" in stages:
            with _stage("validation"):
                rep = mc_battery(
                    model,
                    energy,
                    fcfg,
                    spec.analysis.validate_runs,
                    seed,
                    (i, j),
                    check_covariance=spec.analysis.validate_covariance,
                )
            emit_text(sdir / "validation.txt", "\n".join(c.line() for c in rep.checks) + "\n")
            result.messages.extend(f"seed {seed}: {c.line()}" for c in rep.checks)
            if not rep.ok:
                result.passed = False

    if "sweep" in stages:
        sw = spec.analysis.sweep
        if sw is None:
            raise ModelError("the sweep stage needs analysis.sweep in the config")
        with _stage("analysis"):
            table = monotonicity_sweep(model, sw.rho, sw.probes, fcfg, (i, j), energy=energy)
        emit(out / "sweep.csv", table.rows())
        viol = table.violations()
        if viol:
            result.passed = False
            result.messages.append(f"sweep: {len(viol)} monotonicity violations")

    files = {p.relative_to(out).as_posix(): sha256_file(p) for p in sorted(written)}
    manifest = {
        "version": __version__,
        "config_sha256": config_hash(spec),
        "seeds": list(spec.seeds),
        "stages": sorted(stages),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result.files = files
    return result
