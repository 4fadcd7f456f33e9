"""Energy buffers of harvesting sensors and the activated probability.

Each sensor stores an integer energy level in ``[0, M]``. A sensor with a
positive level spends one unit to transmit; harvests are i.i.d. over the
grid. The level distribution itself has no closed form on a 2-D grid, so
the filter works with an entrywise upper bound propagated by a fixed
``(M+1) x (M+1)`` operator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import STREAM_ACTIVATION, STREAM_ENERGY, rng_for
from .model import ModelError, interior_points


@dataclass(frozen=True)
class HarvestDistribution:
    """Finite-support law of the harvested amount, ``probs[b] = P(harvest = b)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ModelError("harvest distribution must be a finite 1-D probability vector")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ModelError("harvest probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ModelError(f"harvest probabilities sum to {p.sum():.15g}, not 1")
        p = np.trim_zeros(p, "b") if p[-1] == 0 and p.size > 1 else p
        object.__setattr__(self, "probs", p)

    @property
    def support_max(self) -> int:
        return self.probs.size - 1

    def __call__(self, b: int) -> float:
        return float(self.probs[b]) if 0 <= b < self.probs.size else 0.0


@dataclass(frozen=True)
class EnergySpec:
    """Per-sensor energy model: harvest law, capacity and boundary levels."""

    harvest: HarvestDistribution
    capacity: int
    boundary_rows: np.ndarray  # levels at (l, 0)
    boundary_cols: np.ndarray  # levels at (0, k)

    @classmethod
    def uniform(cls, probs, capacity: int, level: int, size: int) -> "EnergySpec":
        prof = np.full(size + 1, level, dtype=int)
        return cls(HarvestDistribution(np.asarray(probs, dtype=float)), capacity, prof, prof.copy())

    def __post_init__(self):
        rows = np.asarray(self.boundary_rows, dtype=int)
        cols = np.asarray(self.boundary_cols, dtype=int)
        object.__setattr__(self, "boundary_rows", rows)
        object.__setattr__(self, "boundary_cols", cols)
        if self.capacity < 1:
            raise ModelError("energy capacity must be at least 1")
        if rows.shape != cols.shape:
            raise ModelError("boundary energy profiles must have equal length")
        if rows[0] != cols[0]:
            raise ModelError("boundary energy profiles disagree at (0,0)")
        for prof in (rows, cols):
            if np.any(prof < 0) or np.any(prof > self.capacity):
                raise ModelError(f"boundary energy levels must lie in [0, {self.capacity}]")

    @property
    def size(self) -> int:
        return self.boundary_rows.size - 1


def step_energy(level_left, level_up, harvest_left, harvest_up, capacity: int):
    """Next buffer level from two predecessors and their harvests."""
    level_left = np.asarray(level_left)
    level_up = np.asarray(level_up)
    total = (
        level_left
        + level_up
        + np.asarray(harvest_left)
        + np.asarray(harvest_up)
        - (level_left > 0).astype(int)
        - (level_up > 0).astype(int)
    )
    return np.minimum(total, capacity)


def _pair_mass(p: HarvestDistribution, n: int) -> float:
    """``sum_{u=0}^{n} p(u) p(n-u)``; zero for negative ``n``."""
    return sum(p(u) * p(n - u) for u in range(n + 1)) if n >= 0 else 0.0


def _saturated_mass(p: HarvestDistribution, n: int) -> float:
    """``sum_{d>=0} sum_{w>=0} sum_{u=0}^{n+w} p(u+d) p(n+w-u)``.

    Terms vanish once ``u + d`` or ``n + w - u`` exceeds the support bound
    ``F``, which forces ``d <= F`` and ``w <= 2F - n``; the sums stop there.
    """
    top = p.support_max
    total = 0.0
    for d in range(top + 1):
        for w in range(max(0, 2 * top - n) + 1):
            for u in range(n + w + 1):
                total += p(u + d) * p(n + w - u)
    return total


def build_transition_bound(p: HarvestDistribution, capacity: int) -> np.ndarray:
    """Bound operator ``Q`` of shape ``(M+1, M+1)`` for the level distribution.

    Rows ``0..M-1`` hold the unsaturated coefficients and row ``M`` the
    saturated ones. Entries are nonnegative but may exceed one.
    """
    if not isinstance(p, HarvestDistribution):
        raise ModelError("transition bound needs a finite-support HarvestDistribution")
    M = int(capacity)
    Q = np.zeros((M + 1, M + 1))
    for b in range(M):
        Q[b, 0] = _pair_mass(p, b) + sum(_pair_mass(p, b + 1 - t) for t in range(1, b + 2))
        for c in range(1, b + 1):
            Q[b, c] = _pair_mass(p, b + 1 - c) + sum(_pair_mass(p, b + 2 - t) for t in range(c + 1, b + 3))
        Q[b, b + 1] = 2.0 * p(0) ** 2
    Q[M, 0] = _saturated_mass(p, M) + sum(_saturated_mass(p, M + 1 - t) for t in range(1, M + 1))
    for c in range(1, M + 1):
        Q[M, c] = _saturated_mass(p, M + 1 - c) + sum(_saturated_mass(p, M + 2 - t) for t in range(c + 1, M + 2))
    return Q


def one_hot(level: int, capacity: int) -> np.ndarray:
    vec = np.zeros(capacity + 1)
    vec[level] = 1.0
    return vec


def recurse_distribution_bound(Q: np.ndarray, spec: EnergySpec) -> np.ndarray:
    """Entrywise upper bound on ``P(level(l,k) = b)``, shape ``(rows, cols, M+1)``.

    The recursion is applied verbatim; no normalisation is done here.
    """
    M = spec.capacity
    if Q.shape != (M + 1, M + 1):
        raise ModelError(f"transition bound has shape {Q.shape}, capacity {M} needs {(M + 1, M + 1)}")
    rows = spec.size + 1
    F = np.zeros((rows, rows, M + 1))
    for l in range(rows):
        F[l, 0] = one_hot(spec.boundary_rows[l], M)
    for k in range(1, rows):
        F[0, k] = one_hot(spec.boundary_cols[k], M)
    for l, k in interior_points(rows, rows):
        F[l, k] = Q @ (F[l, k - 1] + F[l - 1, k])
    return F


def activated_probability(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation mean and variance from a level-distribution bound.

    The tail mass ``F[1:]`` can exceed one because ``F`` is a bound; the mean
    is clamped to ``[0, 1]`` here and nowhere earlier.
    """
    F = np.asarray(F, dtype=float)
    rho = np.clip(F[..., 1:].sum(axis=-1), 0.0, 1.0)
    return rho, rho * (1.0 - rho)


@dataclass
class ActivationGrid:
    """Per-point activation mean ``rho`` and variance ``rho_tilde`` of one sensor."""

    rho: np.ndarray
    rho_tilde: np.ndarray
    source: str = "bound"

    def __post_init__(self):
        if np.any(self.rho < 0) or np.any(self.rho > 1):
            raise ModelError("activation probabilities must lie in [0, 1]")

    @classmethod
    def synthetic(cls, value: float, size: int) -> "ActivationGrid":
        rho = np.full((size + 1, size + 1), float(value))
        return cls(rho, rho * (1.0 - rho), source="synthetic")


def bound_activation(spec: EnergySpec) -> tuple[ActivationGrid, np.ndarray]:
    """Activation grid derived from the distribution bound, and the bound itself."""
    F = recurse_distribution_bound(build_transition_bound(spec.harvest, spec.capacity), spec)
    rho, rho_t = activated_probability(F)
    return ActivationGrid(rho, rho_t, source="bound"), F


@dataclass
class EnergyBufferGrid:
    levels: np.ndarray  # (N, rows, cols) int
    harvest: np.ndarray  # (N, rows, cols) int
    capacity: int

    @property
    def indicator(self) -> np.ndarray:
        return self.levels > 0


def simulate_energy_grid(
    spec: EnergySpec, seed: int, n_runs: int = 1, sensor: int = 0, stream: int = STREAM_ENERGY
) -> EnergyBufferGrid:
    """Simulate ``n_runs`` buffer trajectories of one sensor."""
    rng = rng_for(seed, stream, sensor)
    rows = spec.size + 1
    p = spec.harvest.probs
    harvest = rng.choice(p.size, size=(n_runs, rows, rows), p=p).astype(np.int64)
    levels = np.zeros((n_runs, rows, rows), dtype=np.int64)
    levels[:, :, 0] = spec.boundary_rows
    levels[:, 0, :] = spec.boundary_cols
    for l, k in interior_points(rows, rows):
        levels[:, l, k] = step_energy(
            levels[:, l, k - 1], levels[:, l - 1, k], harvest[:, l, k - 1], harvest[:, l - 1, k], spec.capacity
        )
    return EnergyBufferGrid(levels=levels, harvest=harvest, capacity=spec.capacity)


def empirical_level_distribution(grid: EnergyBufferGrid) -> np.ndarray:
    """Fraction of runs at each level, shape ``(rows, cols, M+1)``."""
    levels = grid.levels
    return np.stack([(levels == b).mean(axis=0) for b in range(grid.capacity + 1)], axis=-1)


def empirical_activation(spec: EnergySpec, seed: int, n_runs: int, sensor: int = 0) -> ActivationGrid:
    """Monte-Carlo estimate of ``P(level > 0)`` at every point."""
    rho = simulate_energy_grid(spec, seed, n_runs, sensor, stream=STREAM_ACTIVATION).indicator.mean(axis=0)
    return ActivationGrid(rho, rho * (1.0 - rho), source="empirical")


@dataclass
class StackedActivation:
    """Activation of the stacked channels ``0..s`` seen at one grid point."""

    rho: np.ndarray  # per channel
    rho_tilde: np.ndarray
    dims: tuple[int, ...]

    def expand(self) -> np.ndarray:
        """Diagonal of the stacked activation matrix."""
        return np.repeat(self.rho, self.dims)

    def matrix(self) -> np.ndarray:
        return np.diag(self.expand())

    def tilde_mask(self) -> np.ndarray:
        """Block matrix with ``rho_tilde[c]`` filling channel ``c``'s diagonal block."""
        total = sum(self.dims)
        out = np.zeros((total, total))
        start = 0
        for rt, p in zip(self.rho_tilde, self.dims):
            out[start : start + p, start : start + p] = rt
            start += p
        return out


def stacked_activation(
    activations: Sequence[ActivationGrid],
    delays: Sequence[tuple[int, int]],
    dims: Sequence[int],
    s: int,
    l: int,
    k: int,
) -> StackedActivation:
    """Activation of channels ``0..s`` for the delay-free sample at ``(l,k)``.

    Channel ``c`` contributes its activation at the shifted point
    ``(l + i_c, k + j_c)`` where its delayed copy of ``z_c(l,k)`` arrives.
    """
    rho, rho_t = [], []
    for c in range(s + 1):
        di, dj = delays[c]
        grid = activations[c]
        rows, cols = grid.rho.shape
        li, kj = l + di, k + dj
        if not (0 <= li < rows and 0 <= kj < cols):
            raise ModelError(f"channel {c} sample for ({l},{k}) lands outside the grid at ({li},{kj})")
        rho.append(grid.rho[li, kj])
        rho_t.append(grid.rho_tilde[li, kj])
    return StackedActivation(np.array(rho), np.array(rho_t), tuple(int(p) for p in dims[: s + 1]))
