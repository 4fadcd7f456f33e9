"""Multi-step recursive minimum-variance filter over the reconstruction regions.

Region ``N_r`` is handled by step ``r + 1`` with the stacked observation of
order ``hbar - r``. Points on row 0 and column 0 carry the prior statistics
and are never updated; every other point is predicted from its left and
upper neighbours, whichever step produced them, which is exactly the
boundary stitching between consecutive steps.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .channels import RegionPartition, observe, partition
from .dynamics import MomentGrid, second_moment_grid, simulate_state_grid
from .energy import (
    ActivationGrid,
    EnergySpec,
    StackedActivation,
    bound_activation,
    empirical_activation,
    simulate_energy_grid,
    stacked_activation,
)
from .model import PSD_TOL, InvariantViolation, ModelError, SystemModel, sym, wavefront

GainHook = Callable[[int, int, int, np.ndarray], np.ndarray]


@dataclass
class FilterConfig:
    """Filter options.

    mode : "zero" drops the cross moments of neighbouring errors (and uses
        the mean product for neighbouring states); "mc" estimates both from
        an internal ensemble of ``mc_size`` simulated runs.
    activation : "bound" (distribution bound), "empirical" (Monte Carlo
        estimate from ``empirical_runs`` energy simulations) or "synthetic"
        (``synthetic_rho`` everywhere).
    gain_override : called as ``hook(l, k, step, K_opt)``; its return value
        replaces the optimal gain and the updated covariance is then taken
        from the full quadratic form.
    jitter : added to the active innovation block before factorising; 0 means
        a failed factorisation is reported instead.
    """

    mode: str = "zero"
    mc_size: int = 2000
    mc_seed: int = 918273
    activation: str = "bound"
    synthetic_rho: float = 1.0
    empirical_runs: int = 20000
    jitter: float = 0.0
    gain_override: GainHook | None = None

    def __post_init__(self):
        if self.mode not in ("zero", "mc"):
            raise ModelError(f"filter mode must be 'zero' or 'mc', got {self.mode!r}")
        if self.activation not in ("bound", "empirical", "synthetic"):
            raise ModelError(f"unknown activation source {self.activation!r}")
        if self.mode == "mc" and self.mc_size < 1:
            raise ModelError("mc mode needs mc_size >= 1")
        if not 0.0 <= self.synthetic_rho <= 1.0:
            raise ModelError("synthetic_rho must lie in [0, 1]")
        if self.jitter < 0:
            raise ModelError("jitter must be nonnegative")


def resolve_activation(
    config: FilterConfig, energy: Sequence[EnergySpec] | None, size: int, n_channels: int
) -> list[ActivationGrid]:
    """Activation grids for every channel according to ``config.activation``."""
    if config.activation == "synthetic":
        return [ActivationGrid.synthetic(config.synthetic_rho, size) for _ in range(n_channels)]
    if energy is None or len(energy) != n_channels:
        raise ModelError(f"activation source {config.activation!r} needs one energy spec per channel")
    if config.activation == "bound":
        return [bound_activation(spec)[0] for spec in energy]
    return [
        empirical_activation(spec, config.mc_seed, config.empirical_runs, sensor=c) for c, spec in enumerate(energy)
    ]


# ---------------------------------------------------------------------------
# single-point building blocks


def predict(A1: np.ndarray, A2: np.ndarray, xu_left: np.ndarray, xu_up: np.ndarray) -> np.ndarray:
    """``A1 xu(l,k-1) + A2 xu(l-1,k)``; batched over leading axes."""
    return xu_left @ A1.T + xu_up @ A2.T


def prediction_covariance(
    model: SystemModel,
    l: int,
    k: int,
    P_left: np.ndarray,
    P_up: np.ndarray,
    X_left: np.ndarray,
    X_up: np.ndarray,
    cross: np.ndarray | None = None,
) -> np.ndarray:
    """Prediction error covariance at ``(l, k)``.

    ``cross`` is ``E{e(l,k-1) e(l-1,k)^T}`` for the updated errors ``e``;
    ``None`` drops it.
    """
    A1, A2 = model.A1(l, k - 1), model.A2(l - 1, k)
    B1, B2 = model.B1(l, k - 1), model.B2(l - 1, k)
    out = (
        A1 @ P_left @ A1.T
        + A2 @ P_up @ A2.T
        + B1 @ model.Q(l, k - 1) @ B1.T
        + B2 @ model.Q(l - 1, k) @ B2.T
        + model.g.power(X_left + X_up)
    )
    if cross is not None:
        out = out + A1 @ cross @ A2.T + A2 @ cross.T @ A1.T
    return sym(out)


def noise_power(R: np.ndarray, H: np.ndarray, act: StackedActivation) -> np.ndarray:
    """Gated noise term ``rho~ o (C X C^T) + rho (R + H) rho`` without the state part."""
    D = act.matrix()
    return D @ (R + H) @ D


def innovation_covariance(
    P_pred: np.ndarray, X: np.ndarray, C: np.ndarray, R: np.ndarray, H: np.ndarray, act: StackedActivation
) -> np.ndarray:
    """``rho (C P C^T + R + H) rho + rho~ o (C X C^T)`` with block-expanded ``rho~``."""
    D = act.matrix()
    return sym(D @ (C @ P_pred @ C.T + R + H) @ D + act.tilde_mask() * (C @ X @ C.T))


def gain(P_pred: np.ndarray, C: np.ndarray, act: StackedActivation, Rbar: np.ndarray, jitter: float = 0.0):
    """Optimal gain ``P C^T rho R_bar^{-1}`` restricted to channels with ``rho > 0``.

    Columns of silent channels are zero. The active block of ``R_bar`` is
    factorised with Cholesky; failure raises ``ModelError``.
    """
    rho = act.expand()
    K = np.zeros((P_pred.shape[0], C.shape[0]))
    idx = np.flatnonzero(rho > 0)
    if idx.size == 0:
        return K
    Ra = Rbar[np.ix_(idx, idx)] + jitter * np.eye(idx.size)
    try:
        factor = cho_factor(Ra, lower=True)
    except LinAlgError as exc:
        raise ModelError(f"innovation covariance is not positive definite on active channels ({exc})") from None
    cross = (P_pred @ C.T * rho)[:, idx]
    K[:, idx] = cho_solve(factor, cross.T).T
    return K


def update(x_pred: np.ndarray, y: np.ndarray, act: StackedActivation, C: np.ndarray, K: np.ndarray) -> np.ndarray:
    """``x_p + K (y - rho C x_p)``; batched over leading axes."""
    DC = act.expand()[:, None] * C
    return x_pred + (y - x_pred @ DC.T) @ K.T


def update_covariance(P_pred: np.ndarray, K: np.ndarray, act: StackedActivation, C: np.ndarray) -> np.ndarray:
    """Short form ``P - K rho C P``; valid only at the optimal gain."""
    DC = act.expand()[:, None] * C
    return sym(P_pred - K @ DC @ P_pred)


def full_update_covariance(
    P_pred: np.ndarray,
    K: np.ndarray,
    act: StackedActivation,
    C: np.ndarray,
    R: np.ndarray,
    H: np.ndarray,
    X: np.ndarray,
) -> np.ndarray:
    """Updated covariance for an arbitrary gain.

    ``(I - K rho C) P (I - K rho C)^T + K (rho~ o C X C^T + rho (R + H) rho) K^T``
    """
    DC = act.expand()[:, None] * C
    L = np.eye(P_pred.shape[0]) - K @ DC
    S = act.tilde_mask() * (C @ X @ C.T) + noise_power(R, H, act)
    return sym(L @ P_pred @ L.T + K @ S @ K.T)


def completed_square(P_pred: np.ndarray, K: np.ndarray, K_opt: np.ndarray, Rbar: np.ndarray) -> np.ndarray:
    """``P + (K - K*) R_bar (K - K*)^T - K* R_bar K*^T``."""
    dK = K - K_opt
    return sym(P_pred + dK @ Rbar @ dK.T - K_opt @ Rbar @ K_opt.T)


def _psd_fault(mat: np.ndarray, what: str, l: int, k: int, step: int) -> None:
    if not np.all(np.isfinite(mat)):
        raise InvariantViolation(f"{what} is not finite", "estimator", (l, k), step)
    lam = float(np.linalg.eigvalsh(mat).min())
    if lam < -PSD_TOL * max(1.0, float(np.abs(mat).max())):
        raise InvariantViolation(f"{what} lost positive semidefiniteness (min eigenvalue {lam:.3e})", "estimator", (l, k), step)


# ---------------------------------------------------------------------------
# full run


@dataclass
class PointRecord:
    """Per-point quantities of an updated interior point."""

    K: np.ndarray
    Rbar: np.ndarray
    C: np.ndarray
    R: np.ndarray
    H: np.ndarray
    activation: StackedActivation
    K_opt: np.ndarray


@dataclass
class FilterRun:
    """Estimates, covariances and gains of one filter pass over ``[0,i] x [0,j]``.

    Arrays are indexed ``[run, l, k, ...]`` for estimates and ``[l, k, ...]``
    for covariances. ``step[l, k]`` is the 1-based step that owns the point;
    ``filtered`` is False on row 0 and column 0.
    """

    x_pred: np.ndarray | None
    x_upd: np.ndarray | None
    P_pred: np.ndarray
    P_upd: np.ndarray
    step: np.ndarray
    filtered: np.ndarray
    records: dict[tuple[int, int], PointRecord]
    moments: MomentGrid
    partition: RegionPartition
    activations: list[ActivationGrid]
    mode: str
    mc_error_mean: np.ndarray | None = field(default=None, repr=False)

    @property
    def horizon(self) -> tuple[int, int]:
        return self.partition.i, self.partition.j

    def gain(self, l: int, k: int) -> np.ndarray | None:
        rec = self.records.get((l, k))
        return None if rec is None else rec.K

    def trace_upd(self) -> np.ndarray:
        return np.trace(self.P_upd, axis1=-2, axis2=-1)

    def errors(self, states: np.ndarray) -> np.ndarray:
        """``x - x_u`` for states shaped like ``x_upd``."""
        i, j = self.horizon
        return states[:, : i + 1, : j + 1] - self.x_upd


class _Ensemble:
    """Internal simulated runs used to estimate cross moments in mc mode."""

    def __init__(self, model, energy, size, mc_seed, horizon):
        self.states = simulate_state_grid(model, mc_seed, size)
        inds = [simulate_energy_grid(spec, mc_seed, size, sensor=c).indicator for c, spec in enumerate(energy)]
        self.obs = observe(model, self.states, inds, mc_seed, horizon)
        i, j = horizon
        self.x = self.states.x[:, : i + 1, : j + 1]
        self.xu = np.zeros_like(self.x)

    def cross(self, l: int, k: int) -> np.ndarray:
        e1 = self.x[:, l, k - 1] - self.xu[:, l, k - 1]
        e2 = self.x[:, l - 1, k] - self.xu[:, l - 1, k]
        return e1.T @ e2 / e1.shape[0]


def run_filter(
    model: SystemModel,
    activations: Sequence[ActivationGrid],
    config: FilterConfig | None = None,
    recon: Sequence[np.ndarray] | None = None,
    horizon: tuple[int, int] | None = None,
    energy: Sequence[EnergySpec] | None = None,
) -> FilterRun:
    """Run the multi-step filter.

    Parameters
    ----------
    model : SystemModel
    activations : one ActivationGrid per channel
    config : FilterConfig
    recon : reconstructed stacks from ``channels.reconstruct`` for the data
        runs, or None to compute covariances and gains only
    horizon : (i, j); defaults to the full grid
    energy : per-channel energy specs; required in mc mode
    """
    config = config or FilterConfig()
    i, j = horizon if horizon is not None else (model.size, model.size)
    part = partition(i, j, model.delays)
    hbar, n = model.hbar, model.n
    dims = model.output_dims
    if len(activations) != hbar + 1:
        raise ModelError(f"need {hbar + 1} activation grids, got {len(activations)}")

    ens = None
    if config.mode == "mc":
        if energy is None:
            raise ModelError("mc mode needs the energy specs to simulate its internal ensemble")
        ens = _Ensemble(model, energy, config.mc_size, config.mc_seed, (i, j))
        moments = second_moment_grid(model, "mc", ensemble=ens.states)
    else:
        moments = second_moment_grid(model, "zero")
    X = moments.X

    shape = (i + 1, j + 1)
    P_pred = np.zeros(shape + (n, n))
    P_upd = np.zeros(shape + (n, n))
    have_data = recon is not None
    if have_data:
        N = recon[0].shape[0]
        x_pred = np.zeros((N,) + shape + (n,))
        x_upd = np.zeros((N,) + shape + (n,))
    else:
        x_pred = x_upd = None
    step = part.n_index + 1
    filtered = np.zeros(shape, dtype=bool)
    filtered[1:, 1:] = True

    ic = model.initial
    for l in range(i + 1):
        for k in range(j + 1):
            if l == 0 or k == 0:
                P_pred[l, k] = P_upd[l, k] = ic.cov(l, k)
                if have_data:
                    x_pred[:, l, k] = x_upd[:, l, k] = ic.mean(l, k)
                if ens is not None:
                    ens.xu[:, l, k] = ic.mean(l, k)

    records: dict[tuple[int, int], PointRecord] = {}
    for r in range(hbar + 1):
        s = hbar - r
        gamma = r + 1
        for l, k in wavefront(p for p in part.n_set(r) if p[0] > 0 and p[1] > 0):
            cross = ens.cross(l, k) if ens is not None else None
            try:
                Pp = prediction_covariance(model, l, k, P_upd[l, k - 1], P_upd[l - 1, k], X[l, k - 1], X[l - 1, k], cross)
                _psd_fault(Pp, "prediction covariance", l, k, gamma)
                act = stacked_activation(activations, model.delays, dims, s, l, k)
                C = model.stacked_C(s, l, k)
                R = model.stacked_R(s, l, k)
                H = model.stacked_h_power(s, X[l, k])
                Rbar = innovation_covariance(Pp, X[l, k], C, R, H, act)
                K_opt = gain(Pp, C, act, Rbar, config.jitter)
            except ModelError as exc:
                raise InvariantViolation(str(exc), "estimator", (l, k), gamma) from None
            K = K_opt
            if config.gain_override is not None:
                K = np.asarray(config.gain_override(l, k, gamma, K_opt.copy()), dtype=float)
                if K.shape != K_opt.shape:
                    raise InvariantViolation(
                        f"gain override returned shape {K.shape}, expected {K_opt.shape}", "estimator", (l, k), gamma
                    )
                Pu = full_update_covariance(Pp, K, act, C, R, H, X[l, k])
            else:
                Pu = update_covariance(Pp, K, act, C)
            _psd_fault(Pu, "updated covariance", l, k, gamma)
            P_pred[l, k], P_upd[l, k] = Pp, Pu
            records[(l, k)] = PointRecord(K=K, Rbar=Rbar, C=C, R=R, H=H, activation=act, K_opt=K_opt)

            A1, A2 = model.A1(l, k - 1), model.A2(l - 1, k)
            if have_data:
                xp = predict(A1, A2, x_upd[:, l, k - 1], x_upd[:, l - 1, k])
                x_pred[:, l, k] = xp
                x_upd[:, l, k] = update(xp, recon[s][:, l, k], act, C, K)
            if ens is not None:
                xp = predict(A1, A2, ens.xu[:, l, k - 1], ens.xu[:, l - 1, k])
                ens.xu[:, l, k] = update(xp, ens.obs.recon[s][:, l, k], act, C, K)

    if have_data and np.any(~np.isfinite(x_upd)):
        raise InvariantViolation("non-finite estimate produced", "estimator")
    return FilterRun(
        x_pred=x_pred,
        x_upd=x_upd,
        P_pred=P_pred,
        P_upd=P_upd,
        step=step,
        filtered=filtered,
        records=records,
        moments=moments,
        partition=part,
        activations=list(activations),
        mode=config.mode,
        mc_error_mean=None if ens is None else (ens.x - ens.xu).mean(axis=0),
    )


def run_rows(run: FilterRun, index: int = 0):
    """Per-point rows ``(l, k, step, x_u components..., tr P_u, tr P_p)`` of data run ``index``."""
    if run.x_upd is None:
        raise ModelError("run has no estimates; pass observations to run_filter")
    tr_u = run.trace_upd()
    tr_p = np.trace(run.P_pred, axis1=-2, axis2=-1)
    rows, cols = run.step.shape
    for l in range(rows):
        for k in range(cols):
            yield (l, k, int(run.step[l, k]), *run.x_upd[index, l, k].tolist(), float(tr_u[l, k]), float(tr_p[l, k]))


def write_run(run: FilterRun, path, seed: int, config_echo: str = "", index: int = 0) -> None:
    """Write ``<path>.csv`` with per-point rows and ``<path>.txt`` with a key/value summary."""
    path = Path(path)
    n = run.P_upd.shape[-1]
    with path.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l", "k", "step", *[f"x{c}" for c in range(n)], "trace_upd", "trace_pred"])
        for row in run_rows(run, index):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    i, j = run.horizon
    summary = {
        "seed": seed,
        "horizon": f"{i},{j}",
        "mode": run.mode,
        "steps": int(run.step.max()),
        "max_trace_upd": repr(float(run.trace_upd().max())),
        "activation": ",".join(a.source for a in run.activations),
    }
    text = "".join(f"{key}: {val}\n" for key, val in summary.items())
    if config_echo:
        text += "config:\n" + "".join(f"  {line}\n" for line in config_echo.splitlines())
    path.with_suffix(".txt").write_text(text)
