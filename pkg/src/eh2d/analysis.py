"""Covariance bounds and activation-probability monotonicity.

* ``extract_bound_params`` : tight spectral constants of the model on the grid.
* ``lower_bound`` : uniform lower bound on the updated covariance per step.
* ``daleth_table`` / ``daleth_upper_bound`` : scalar double recursion whose
  weighted sums bound the spectral norm of the updated covariance on the
  corner sub-regions.
* ``monotonicity_sweep`` : trace of the updated covariance against a
  uniform synthetic activation probability.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import MomentGrid, second_moment_grid
from .energy import ActivationGrid, EnergySpec
from .estimator import FilterConfig, FilterRun, run_filter
from .model import ModelError, SystemModel

CONVENTIONS = ("consistent", "printed")


@dataclass(frozen=True)
class BoundParams:
    """Bound constants; per-channel-stack entries are indexed by stack order ``s``."""

    a1: float
    a2: float
    c: tuple[float, ...]
    q_hi: tuple[float, float]
    q_lo: tuple[float, float]
    r_hi: tuple[float, ...]
    r_lo: tuple[float, ...]
    x: float
    delta_g: tuple[float, ...]
    sigma_g: tuple[float, ...]


def _eig_range(stack: np.ndarray) -> tuple[float, float]:
    vals = np.linalg.eigvalsh(stack.reshape((-1,) + stack.shape[-2:]))
    return float(vals.min()), float(vals.max())


def _gram_max(stack: np.ndarray) -> float:
    flat = stack.reshape((-1,) + stack.shape[-2:])
    return float(np.linalg.eigvalsh(flat @ np.swapaxes(flat, -1, -2)).max())


def _grid_stack(fn, rows: int) -> np.ndarray:
    return np.array([[fn(l, k) for k in range(rows)] for l in range(rows)])


def extract_bound_params(model: SystemModel, moments: MomentGrid | None = None) -> BoundParams:
    """Tightest constants over every grid point.

    ``moments`` supplies the second moments behind ``x``; the zero-cross
    recursion is used when omitted.
    """
    rows = model.rows
    moments = moments or second_moment_grid(model, "zero")
    a1 = _gram_max(np.asarray(model.A1.values))
    a2 = _gram_max(np.asarray(model.A2.values))
    Qv = np.asarray(model.Q.values)
    q = []
    for B in (model.B1.values, model.B2.values):
        B = np.asarray(B)
        q.append(_eig_range(B @ Qv @ np.swapaxes(B, -1, -2)))
    c, r_lo, r_hi = [], [], []
    for s in range(model.hbar + 1):
        Cs = _grid_stack(lambda l, k: model.stacked_C(s, l, k), rows)
        Rs = _grid_stack(lambda l, k: model.stacked_R(s, l, k), rows)
        c.append(_gram_max(Cs))
        lo, hi = _eig_range(Rs)
        r_lo.append(lo)
        r_hi.append(hi)
    x_bar = float(np.trace(moments.X, axis1=-2, axis2=-1).max())
    Delta, Sigma = model.g.Delta, model.g.Sigma
    delta = tuple(float(np.linalg.eigvalsh(D @ D.T).max()) for D in Delta)
    sym2 = Sigma + np.swapaxes(Sigma, -1, -2)
    sigma = tuple(float(np.linalg.eigvalsh(S @ S.T).max()) for S in sym2)
    return BoundParams(
        a1=a1,
        a2=a2,
        c=tuple(c),
        q_hi=(q[0][1], q[1][1]),
        q_lo=(q[0][0], q[1][0]),
        r_hi=tuple(r_hi),
        r_lo=tuple(r_lo),
        x=x_bar,
        delta_g=delta,
        sigma_g=sigma,
    )


def check_bound_assumptions(model: SystemModel, params: BoundParams, moments: MomentGrid | None = None) -> list[str]:
    """Names of the inequalities that fail somewhere on the grid (empty when all hold).

    Upper constants must dominate and lower constants must be dominated by
    every spectral value; the comparison is exact, with no slack.
    """
    fresh = extract_bound_params(model, moments)
    failed = []
    for name in ("a1", "a2", "x"):
        if getattr(fresh, name) > getattr(params, name):
            failed.append(name)
    for name in ("c", "q_hi", "r_hi", "delta_g", "sigma_g"):
        for idx, (have, need) in enumerate(zip(getattr(params, name), getattr(fresh, name))):
            if need > have:
                failed.append(f"{name}[{idx}]")
    for name in ("q_lo", "r_lo"):
        for idx, (have, need) in enumerate(zip(getattr(params, name), getattr(fresh, name))):
            if need < have:
                failed.append(f"{name}[{idx}]")
    return failed


def lower_bound(params: BoundParams, step: int, hbar: int) -> float:
    """Uniform lower bound ``(1/(q1+q2) + c_s/r_s)^{-1}`` for step ``step`` (1-based)."""
    s = hbar + 1 - step
    if not 0 <= s <= hbar:
        raise ModelError(f"step {step} outside [1, {hbar + 1}]")
    q = params.q_lo[0] + params.q_lo[1]
    if q <= 0:
        raise ModelError("lower bound needs positive definite process-noise blocks (q_lo sum is zero)")
    if params.r_lo[s] <= 0:
        raise ModelError(f"lower bound needs positive definite R for stack order {s}")
    return 1.0 / (1.0 / q + params.c[s] / params.r_lo[s])


@dataclass(frozen=True)
class DalethScalars:
    young: float
    upsilon1: float
    upsilon2: float
    gamma1: float
    gamma2: float
    source: float  # constant driving term


def daleth_scalars(params: BoundParams, young: float = 1.0, convention: str = "consistent") -> DalethScalars:
    """Weights of the upper-bound recursion.

    "consistent" uses weights ``(1+y) a1`` and ``(1+1/y) a2`` with ``a`` the
    bound on ``A A^T``, and ``x sqrt(delta sigma)`` for the nonlinear power.
    "printed" squares ``a`` and uses ``x delta sigma`` instead; it is kept
    for comparison and is not a valid bound when these constants are below 1.
    """
    if young <= 0:
        raise ModelError("Young scalar must be positive")
    if convention not in CONVENTIONS:
        raise ModelError(f"convention must be one of {CONVENTIONS}")
    u1, u2 = 1.0 + young, 1.0 + 1.0 / young
    if convention == "consistent":
        g1, g2 = u1 * params.a1, u2 * params.a2
        nl = sum(params.x * np.sqrt(d * s) for d, s in zip(params.delta_g, params.sigma_g))
    else:
        g1, g2 = u1 * params.a1**2, u2 * params.a2**2
        nl = sum(params.x * d * s for d, s in zip(params.delta_g, params.sigma_g))
    return DalethScalars(young, u1, u2, g1, g2, float(nl + params.q_hi[0] + params.q_hi[1]))


def daleth_table(gamma1: float, gamma2: float, rows: int, cols: int) -> np.ndarray:
    """``T[a, b]`` with ``T[0,0] = 1``, ``T[0,b] = g1 T[0,b-1]``, ``T[a,0] = g2 T[a-1,0]``
    and ``T[a,b] = g1 T[a,b-1] + g2 T[a-1,b]``.

    ``b`` counts steps along the column index (weight ``g1``) and ``a``
    steps along the row index (weight ``g2``).
    """
    T = np.zeros((rows, cols))
    T[0, 0] = 1.0
    for b in range(1, cols):
        T[0, b] = gamma1 * T[0, b - 1]
    for a in range(1, rows):
        T[a, 0] = gamma2 * T[a - 1, 0]
        for b in range(1, cols):
            T[a, b] = gamma1 * T[a, b - 1] + gamma2 * T[a - 1, b]
    return T


def daleth_upper_bound(
    scalars: DalethScalars,
    origin: tuple[int, int],
    extent: tuple[int, int],
    boundary_row: np.ndarray,
    boundary_col: np.ndarray,
) -> np.ndarray:
    """Upper bound on ``||P_u(l,k)||_2`` over a corner region.

    Parameters
    ----------
    origin : (l0, k0), the corner just outside the region
    extent : (i_s, j_s), last row and column of the region
    boundary_row : norms of ``P_u(l, k0)`` for ``l = l0 .. i_s``
    boundary_col : norms of ``P_u(l0, k)`` for ``k = k0 .. j_s``

    Returns
    -------
    ndarray (i_s - l0 + 1, j_s - k0 + 1)
        Bound at offsets ``(l - l0, k - k0)``; the boundary row and column of
        the result hold NaN.
    """
    l0, k0 = origin
    L, K = extent[0] - l0, extent[1] - k0
    g1, g2, src = scalars.gamma1, scalars.gamma2, scalars.source
    T = daleth_table(g1, g2, L + 1, K + 1)
    csum = T.cumsum(axis=0).cumsum(axis=1)  # csum[a,b] = sum_{a'<=a, b'<=b} T
    out = np.full((L + 1, K + 1), np.nan)
    for a in range(1, L + 1):
        for b in range(1, K + 1):
            left = sum(g1 * T[a - s, b - 1] * boundary_row[s] for s in range(1, a + 1))
            up = sum(g2 * T[a - 1, b - t] * boundary_col[t] for t in range(1, b + 1))
            out[a, b] = left + up + csum[a - 1, b - 1] * src
    return out


def region_upper_bounds(
    run: FilterRun, params: BoundParams, young: float = 1.0, convention: str = "consistent"
) -> np.ndarray:
    """Upper bound on every corner sub-region of the run's partition; NaN elsewhere."""
    part = run.partition
    scalars = daleth_scalars(params, young, convention)
    norms = np.linalg.norm(run.P_upd, ord=2, axis=(-2, -1))
    out = np.full(norms.shape, np.nan)
    for r in range(part.hbar + 1):
        l0, k0 = (0, 0) if r == 0 else (part.i_s[r - 1], part.j_s[r - 1])
        il, jk = part.i_s[r], part.j_s[r]
        if il <= l0 or jk <= k0:
            continue
        sub = daleth_upper_bound(scalars, (l0, k0), (il, jk), norms[l0 : il + 1, k0], norms[l0, k0 : jk + 1])
        out[l0 + 1 : il + 1, k0 + 1 : jk + 1] = sub[1:, 1:]
    return out


def best_young(
    run: FilterRun, params: BoundParams, probe: tuple[int, int], grid: Sequence[float] | None = None
) -> tuple[float, float]:
    """Coarse line search of the Young scalar minimising the bound at ``probe``."""
    grid = np.geomspace(0.05, 20.0, 61) if grid is None else np.asarray(grid, dtype=float)
    vals = [region_upper_bounds(run, params, float(y))[probe] for y in grid]
    idx = int(np.nanargmin(vals))
    return float(grid[idx]), float(vals[idx])


@dataclass
class BoundReport:
    params: BoundParams
    lower: dict[int, float]  # per step
    lower_grid: np.ndarray
    upper: dict[float, np.ndarray]  # per Young scalar
    lambda_min: np.ndarray
    norm: np.ndarray
    lower_violations: list[tuple[int, int]]
    upper_violations: dict[float, list[tuple[int, int]]]
    convention: str = "consistent"

    @property
    def ok(self) -> bool:
        return not self.lower_violations and not any(self.upper_violations.values())


def bound_report(
    run: FilterRun,
    model: SystemModel,
    young: Sequence[float] = (1.0,),
    convention: str = "consistent",
    tol: float = 1e-10,
) -> BoundReport:
    """Evaluate both bounds against a finished run.

    The lower bound is checked at every updated point, the upper bound on
    the corner sub-regions.
    """
    params = extract_bound_params(model, run.moments)
    lam = np.linalg.eigvalsh(run.P_upd)[..., 0]
    norm = np.linalg.norm(run.P_upd, ord=2, axis=(-2, -1))
    steps = sorted(set(int(s) for s in np.unique(run.step)))
    lower = {s: lower_bound(params, s, model.hbar) for s in steps}
    lower_grid = np.vectorize(lambda s: lower[int(s)])(run.step).astype(float)
    lower_grid[~run.filtered] = np.nan
    lower_viol = [tuple(map(int, p)) for p in np.argwhere(run.filtered & (lam < lower_grid - tol))]
    upper, upper_viol = {}, {}
    for y in young:
        ub = region_upper_bounds(run, params, float(y), convention)
        upper[float(y)] = ub
        bad = np.isfinite(ub) & (norm > ub + tol * np.maximum(1.0, np.abs(ub)))
        upper_viol[float(y)] = [tuple(map(int, p)) for p in np.argwhere(bad)]
    return BoundReport(params, lower, lower_grid, upper, lam, norm, lower_viol, upper_viol, convention)


@dataclass
class SweepTable:
    rho: np.ndarray
    probes: list[tuple[int, int]]
    trace: np.ndarray  # (len(rho), len(probes))
    runs: list[FilterRun] = field(default_factory=list, repr=False)

    def rows(self) -> list[tuple[float, int, int, float]]:
        order = np.argsort(self.rho, kind="stable")
        return [
            (float(self.rho[a]), p[0], p[1], float(self.trace[a, b]))
            for a in order
            for b, p in enumerate(self.probes)
        ]

    def violations(self, tol: float = 1e-12) -> list[tuple[float, float, tuple[int, int]]]:
        """Consecutive pairs ``(rho_a, rho_b)`` and probe where the trace increased."""
        order = np.argsort(self.rho, kind="stable")
        tr, rho = self.trace[order], self.rho[order]
        out = []
        for a in range(len(rho) - 1):
            for b, p in enumerate(self.probes):
                if tr[a + 1, b] > tr[a, b] + tol:
                    out.append((float(rho[a]), float(rho[a + 1]), p))
        return out


def monotonicity_sweep(
    model: SystemModel,
    rhos: Sequence[float],
    probes: Sequence[tuple[int, int]],
    config: FilterConfig | None = None,
    horizon: tuple[int, int] | None = None,
    keep_runs: bool = False,
    energy: Sequence[EnergySpec] | None = None,
) -> SweepTable:
    """Trace of the updated covariance at ``probes`` for each uniform ``rho``.

    Everything except the synthetic activation is held fixed; ``energy`` is
    only needed in mc mode, where it drives the internal ensemble.
    """
    base = config or FilterConfig()
    rhos = np.asarray(rhos, dtype=float)
    if np.any(rhos <= 0) or np.any(rhos > 1):
        raise ModelError("sweep activation probabilities must lie in (0, 1]")
    probes = [tuple(int(v) for v in p) for p in probes]
    trace = np.zeros((rhos.size, len(probes)))
    runs = []
    for a, rho in enumerate(rhos):
        cfg = replace(base, activation="synthetic", synthetic_rho=float(rho), gain_override=None)
        acts = [ActivationGrid.synthetic(float(rho), model.size) for _ in model.channels]
        run = run_filter(model, acts, cfg, horizon=horizon, energy=energy)
        tr = run.trace_upd()
        trace[a] = [tr[p] for p in probes]
        if keep_runs:
            runs.append(run)
    return SweepTable(rhos, probes, trace, runs)
