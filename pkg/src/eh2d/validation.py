"""Monte Carlo checks of the filter and the energy bound."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channels import observe
from .dynamics import simulate_state_grid
from .energy import EnergySpec, bound_activation, empirical_level_distribution, simulate_energy_grid
from .estimator import FilterConfig, FilterRun, resolve_activation, run_filter
from .model import ModelError, SystemModel


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.4g} vs {self.threshold:.4g}{extra}"


@dataclass
class ValidationReport:
    n_runs: int
    error_mean: np.ndarray  # (rows, cols, n)
    error_se: np.ndarray
    empirical_cov: np.ndarray  # (rows, cols, n, n)
    analytic_cov: np.ndarray
    energy_empirical: list[np.ndarray]
    energy_bound: list[np.ndarray]
    checks: list[Check] = field(default_factory=list)
    run: FilterRun | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def error_mean_check(errors: np.ndarray, mask: np.ndarray, z: float = 4.0) -> tuple[np.ndarray, np.ndarray, Check]:
    """Largest ``|mean| / (std / sqrt(N))`` over masked points and components."""
    N = errors.shape[0]
    mean = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / np.sqrt(N)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(se > 0, np.abs(mean) / se, np.where(mean == 0, 0.0, np.inf))
    worst = float(score[mask].max()) if mask.any() else 0.0
    return mean, se, Check("error mean", worst, z, worst <= z, "max |mean|/SE")


def covariance_check(empirical: np.ndarray, analytic: np.ndarray, mask: np.ndarray, rel: float = 0.05) -> Check:
    num = np.linalg.norm(empirical - analytic, axis=(-2, -1))
    den = np.linalg.norm(analytic, axis=(-2, -1))
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    worst = float(ratio[mask].max()) if mask.any() else 0.0
    return Check("error covariance", worst, rel, worst <= rel, "max relative Frobenius")


def energy_check(empirical: np.ndarray, bound: np.ndarray, n_runs: int, sigmas: float = 3.0) -> Check:
    """Largest excess of the empirical level distribution over ``min(bound, 1) + sigmas * SE``."""
    cap = np.minimum(bound, 1.0)
    se = np.sqrt(np.clip(cap * (1.0 - cap), 0.0, None) / n_runs)
    excess = empirical - (cap + sigmas * se)
    worst = float(excess.max())
    return Check("energy bound", worst, 0.0, worst <= 0.0, "max excess over clamped bound")


def mc_battery(
    model: SystemModel,
    energy: Sequence[EnergySpec],
    config: FilterConfig,
    n_runs: int,
    seed: int = 0,
    horizon: tuple[int, int] | None = None,
    check_covariance: bool = True,
) -> ValidationReport:
    """Simulate ``n_runs`` runs, filter them and compare with the analytic recursions.

    The covariance comparison is only meaningful where the analytic
    recursion is exact (always-on channels and rows without coupling);
    pass ``check_covariance=False`` otherwise.
    """
    if n_runs < 100:
        raise ModelError("mc_battery needs at least 100 runs")
    i, j = horizon if horizon is not None else (model.size, model.size)
    states = simulate_state_grid(model, seed, n_runs)
    buffers = [simulate_energy_grid(spec, seed, n_runs, sensor=c) for c, spec in enumerate(energy)]
    obs = observe(model, states, [b.indicator for b in buffers], seed, (i, j))
    acts = resolve_activation(config, energy, model.size, len(model.channels))
    run = run_filter(model, acts, config, recon=obs.recon, horizon=(i, j), energy=energy)
    err = run.errors(states.x)
    mask = run.filtered
    mean, se, mean_check = error_mean_check(err, mask)
    emp_cov = np.einsum("nlki,nlkj->lkij", err, err) / n_runs
    checks = [mean_check]
    if check_covariance:
        checks.append(covariance_check(emp_cov, run.P_upd, mask))
    emp_levels, bounds = [], []
    worst = None
    for spec, buf in zip(energy, buffers):
        emp = empirical_level_distribution(buf)
        F = bound_activation(spec)[1]
        emp_levels.append(emp)
        bounds.append(F)
        c = energy_check(emp, F, n_runs)
        worst = c if worst is None or c.value > worst.value else worst
    if worst is not None:
        checks.append(worst)
    return ValidationReport(n_runs, mean, se, emp_cov, run.P_upd, emp_levels, bounds, checks, run)
