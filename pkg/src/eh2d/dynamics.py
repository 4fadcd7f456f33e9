"""State trajectories and second-moment propagation for the 2-D plant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InvariantViolation, ModelError, NonlinearitySpec, SystemModel, interior_points, is_psd, sym

# Independent RNG streams derived from one user seed.
STREAM_STATE = 0
STREAM_MEASURE = 1
STREAM_ENERGY = 2
STREAM_ACTIVATION = 3  # ensembles that estimate activation probabilities


def rng_for(seed: int, stream: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, sub]))


def sample_nonlinearity(spec: NonlinearitySpec, x: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Evaluate the stochastic nonlinearity.

    Parameters
    ----------
    spec : NonlinearitySpec
    x : ndarray, shape (..., n_in)
    draws : ndarray, shape (..., r)
        Zero-mean unit-variance noise, one entry per term.

    Returns
    -------
    ndarray, shape (..., n_out)
    """
    x = np.asarray(x, dtype=float)
    draws = np.asarray(draws, dtype=float)
    if x.shape[-1] != spec.n_in:
        raise ModelError(f"state has dimension {x.shape[-1]}, nonlinearity expects {spec.n_in}")
    if draws.shape[-1] != spec.r:
        raise ModelError(f"expected {spec.r} draws, got {draws.shape[-1]}")
    proj = np.einsum("...i,ri->...r", x, spec.shapes)
    return spec.scale * np.einsum("...r,ro->...o", proj * draws, spec.directions)


def psd_sqrt(mats: np.ndarray) -> np.ndarray:
    """Symmetric square roots of a stack of PSD matrices."""
    vals, vecs = np.linalg.eigh(mats)
    vals = np.clip(vals, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", vecs, np.sqrt(vals), vecs)


def gaussian_field(rng: np.random.Generator, cov: np.ndarray, n_runs: int) -> np.ndarray:
    """Draw zero-mean Gaussians with per-point covariance ``cov`` (..., d, d)."""
    std = rng.standard_normal((n_runs,) + cov.shape[:-1])
    return np.einsum("...ij,n...j->n...i", psd_sqrt(cov), std)


@dataclass
class StateGrid:
    """Simulated states plus every draw needed to recompute them."""

    x: np.ndarray  # (N, rows, cols, n)
    w: np.ndarray  # (N, rows, cols, m)
    xi: np.ndarray  # (N, rows, cols, r)
    seed: int

    @property
    def n_runs(self) -> int:
        return self.x.shape[0]


def state_step(model: SystemModel, l: int, k: int, x_left, x_up, w_left, w_up, xi_left, xi_up) -> np.ndarray:
    """Right-hand side of the state recursion at interior point ``(l, k)``."""
    g = model.g
    return (
        x_left @ model.A1(l, k - 1).T
        + x_up @ model.A2(l - 1, k).T
        + sample_nonlinearity(g, x_left, xi_left)
        + sample_nonlinearity(g, x_up, xi_up)
        + w_left @ model.B1(l, k - 1).T
        + w_up @ model.B2(l - 1, k).T
    )


def simulate_state_grid(model: SystemModel, seed: int, n_runs: int = 1) -> StateGrid:
    """Simulate ``n_runs`` independent trajectories over the whole grid.

    Boundary states are drawn from the initial-condition statistics with a
    single shared draw for ``x(0,0)``; interior points are filled in
    anti-diagonal order.
    """
    rng = rng_for(seed, STREAM_STATE)
    size, n = model.size, model.n
    rows = size + 1
    ic = model.initial
    x = np.zeros((n_runs, rows, rows, n))
    x[:, :, 0] = ic.mean_rows + gaussian_field(rng, ic.cov_rows, n_runs)
    x[:, 0, 1:] = ic.mean_cols[1:] + gaussian_field(rng, ic.cov_cols[1:], n_runs)
    w = gaussian_field(rng, np.array(model.Q.values), n_runs)
    xi = rng.standard_normal((n_runs, rows, rows, model.g.r))
    with np.errstate(over="ignore", invalid="ignore"):
        for l, k in interior_points(rows, rows):
            x[:, l, k] = state_step(
                model, l, k, x[:, l, k - 1], x[:, l - 1, k], w[:, l, k - 1], w[:, l - 1, k], xi[:, l, k - 1], xi[:, l - 1, k]
            )
    bad = ~np.isfinite(x).all(axis=(0, 3))
    if bad.any():
        l, k = (int(v) for v in np.argwhere(bad)[0])
        raise InvariantViolation("simulated state is not finite", "core_model", (l, k))
    return StateGrid(x=x, w=w, xi=xi, seed=seed)


def mean_grid(model: SystemModel) -> np.ndarray:
    """Deterministic mean recursion ``m(l,k) = A1 m(l,k-1) + A2 m(l-1,k)``."""
    rows = model.rows
    m = np.zeros((rows, rows, model.n))
    m[:, 0] = model.initial.mean_rows
    m[0, 1:] = model.initial.mean_cols[1:]
    for l, k in interior_points(rows, rows):
        m[l, k] = model.A1(l, k - 1) @ m[l, k - 1] + model.A2(l - 1, k) @ m[l - 1, k]
    return m


def second_moment_step(
    model: SystemModel, l: int, k: int, X_left: np.ndarray, X_up: np.ndarray, cross: np.ndarray
) -> np.ndarray:
    """Second moment ``X(l,k)`` from its two predecessors.

    ``cross`` is ``E{x(l,k-1) x(l-1,k)^T}``, which has no closed recursion
    and must be supplied by the caller.
    """
    for name, mat in (("X(l,k-1)", X_left), ("X(l-1,k)", X_up)):
        if not is_psd(mat):
            raise ModelError(f"{name} at ({l},{k}) is not symmetric PSD")
    A1, A2 = model.A1(l, k - 1), model.A2(l - 1, k)
    B1, B2 = model.B1(l, k - 1), model.B2(l - 1, k)
    out = (
        A1 @ X_left @ A1.T
        + A2 @ X_up @ A2.T
        + B1 @ model.Q(l, k - 1) @ B1.T
        + B2 @ model.Q(l - 1, k) @ B2.T
        + model.g.power(X_left + X_up)
        + A1 @ cross @ A2.T
        + A2 @ cross.T @ A1.T
    )
    return sym(out)


@dataclass
class MomentGrid:
    X: np.ndarray  # (rows, cols, n, n)
    mean: np.ndarray  # (rows, cols, n)
    mode: str


def second_moment_grid(
    model: SystemModel,
    mode: str = "zero",
    ensemble: StateGrid | None = None,
) -> MomentGrid:
    """Second moments ``E{x x^T}`` over the grid.

    mode "zero" treats ``x(l,k-1)`` and ``x(l-1,k)`` as uncorrelated, so the
    cross moment reduces to the product of their means. mode "mc" estimates
    the cross moment from ``ensemble``.
    """
    if mode not in ("zero", "mc"):
        raise ModelError(f"unknown cross-moment mode {mode!r}")
    if mode == "mc" and ensemble is None:
        raise ModelError("mode 'mc' requires a state ensemble")
    rows, n = model.rows, model.n
    m = mean_grid(model)
    X = np.zeros((rows, rows, n, n))
    ic = model.initial
    X[:, 0] = ic.cov_rows + np.einsum("li,lj->lij", ic.mean_rows, ic.mean_rows)
    X[0, 1:] = ic.cov_cols[1:] + np.einsum("li,lj->lij", ic.mean_cols[1:], ic.mean_cols[1:])
    for l, k in interior_points(rows, rows):
        if mode == "zero":
            cross = np.outer(m[l, k - 1], m[l - 1, k])
        else:
            xs = ensemble.x
            cross = np.einsum("ni,nj->ij", xs[:, l, k - 1], xs[:, l - 1, k]) / xs.shape[0]
        X[l, k] = second_moment_step(model, l, k, X[l, k - 1], X[l - 1, k], cross)
    return MomentGrid(X=X, mean=m, mode=mode)


def empirical_second_moment(states: StateGrid) -> np.ndarray:
    xs = states.x
    return np.einsum("nlki,nlkj->lkij", xs, xs) / xs.shape[0]
