"""Delayed, energy-gated measurement channels and observation reconstruction.

Channel ``c`` delivers ``z_c(l - i_c, k - j_c)`` at point ``(l, k)``, and only
when its sensor has energy. Re-indexing every delivered sample back to the
point it measures yields delay-free stacked observations ``y_s(l, k)`` on the
N-regions; the original per-point stacks live on the M-regions.

Missing samples are stored as NaN and reported as ``None`` by accessors:
zero is a legitimate gated observation and never stands in for absence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import STREAM_MEASURE, StateGrid, gaussian_field, rng_for, sample_nonlinearity
from .model import ChannelSpec, ModelError, SystemModel, check_delay_order

MISSING = np.nan


@dataclass(frozen=True)
class Rect:
    """Inclusive integer rectangle ``l0 <= l <= l1, k0 <= k <= k1``."""

    l0: int
    l1: int
    k0: int
    k1: int

    def __contains__(self, point) -> bool:
        l, k = point
        return self.l0 <= l <= self.l1 and self.k0 <= k <= self.k1

    def points(self) -> list[tuple[int, int]]:
        return [(l, k) for l in range(self.l0, self.l1 + 1) for k in range(self.k0, self.k1 + 1)]

    @property
    def empty(self) -> bool:
        return self.l1 < self.l0 or self.k1 < self.k0


@dataclass
class RegionPartition:
    """N-regions (reconstructed stacks) and M-regions (original stacks) for horizon ``(i, j)``.

    ``n_pieces[r]`` maps piece labels ``'-', 'o', '+'`` to rectangles whose
    union is ``N_r``; ``m_pieces[s]`` does the same for ``M_s``.
    """

    i: int
    j: int
    delays: list[tuple[int, int]]
    i_s: list[int]
    j_s: list[int]
    n_pieces: list[dict[str, Rect]]
    m_pieces: list[dict[str, Rect]]
    _n_index: np.ndarray = field(repr=False, default=None)
    _m_index: np.ndarray = field(repr=False, default=None)

    @property
    def hbar(self) -> int:
        return len(self.delays) - 1

    def n_set(self, r: int) -> list[tuple[int, int]]:
        return sorted({p for rect in self.n_pieces[r].values() for p in rect.points()})

    def m_set(self, s: int) -> list[tuple[int, int]]:
        return sorted({p for rect in self.m_pieces[s].values() for p in rect.points()})

    def n_region(self, l: int, k: int) -> int:
        return int(self._n_index[l, k])

    def m_region(self, l: int, k: int) -> int:
        return int(self._m_index[l, k])

    def stack_order(self, l: int, k: int) -> int:
        """Number of extra channels in the reconstructed stack at ``(l, k)``."""
        return self.hbar - self.n_region(l, k)

    @property
    def n_index(self) -> np.ndarray:
        return self._n_index

    @property
    def m_index(self) -> np.ndarray:
        return self._m_index


def partition(i: int, j: int, delays: Sequence[tuple[int, int]]) -> RegionPartition:
    """Split ``[0,i] x [0,j]`` into the N- and M-regions.

    Only horizons at or beyond the largest delay are supported.
    """
    delays = [tuple(int(v) for v in d) for d in delays]
    check_delay_order(delays)
    hbar = len(delays) - 1
    di = [d[0] for d in delays]
    dj = [d[1] for d in delays]
    if i < di[hbar] or j < dj[hbar]:
        raise ModelError(f"horizon ({i},{j}) is smaller than the largest delay {delays[hbar]}")
    i_s = [i - di[hbar - s] for s in range(hbar + 1)]
    j_s = [j - dj[hbar - s] for s in range(hbar + 1)]

    n_pieces: list[dict[str, Rect]] = [{"o": Rect(0, i_s[0], 0, j_s[0])}]
    for s in range(1, hbar + 1):
        n_pieces.append(
            {
                "-": Rect(0, i_s[s - 1], j_s[s - 1] + 1, j_s[s]),
                "o": Rect(i_s[s - 1] + 1, i_s[s], j_s[s - 1] + 1, j_s[s]),
                "+": Rect(i_s[s - 1] + 1, i_s[s], 0, j_s[s - 1]),
            }
        )

    m_pieces: list[dict[str, Rect]] = []
    for s in range(hbar):
        m_pieces.append(
            {
                "+": Rect(di[s], di[s + 1] - 1, dj[s + 1], j),
                "o": Rect(di[s], di[s + 1] - 1, dj[s], dj[s + 1] - 1),
                "-": Rect(di[s + 1], i, dj[s], dj[s + 1] - 1),
            }
        )
    m_pieces.append({"o": Rect(di[hbar], i, dj[hbar], j)})

    part = RegionPartition(i, j, delays, i_s, j_s, n_pieces, m_pieces)
    part._n_index = _index_grid(i, j, n_pieces, "N")
    part._m_index = _index_grid(i, j, m_pieces, "M")
    return part


def _index_grid(i: int, j: int, pieces: list[dict[str, Rect]], label: str) -> np.ndarray:
    idx = np.full((i + 1, j + 1), -1, dtype=int)
    for r, rects in enumerate(pieces):
        for rect in rects.values():
            for l, k in rect.points():
                if idx[l, k] != -1:
                    raise ModelError(f"{label}-regions overlap at ({l},{k})")
                idx[l, k] = r
    if np.any(idx < 0):
        l, k = np.argwhere(idx < 0)[0]
        raise ModelError(f"{label}-regions do not cover ({l},{k})")
    return idx


@dataclass
class ChannelDraws:
    z: np.ndarray  # (N, rows, cols, p)
    v: np.ndarray
    gamma: np.ndarray  # (N, rows, cols, r_h)


def measure(model: SystemModel, states: StateGrid, s: int, seed: int) -> ChannelDraws:
    """Noisy output ``z_s = C_s x + h_s(x) + v_s`` at every point of the grid."""
    ch: ChannelSpec = model.channels[s]
    rng = rng_for(seed, STREAM_MEASURE, s)
    x = states.x
    N = x.shape[0]
    v = gaussian_field(rng, np.array(ch.R.values), N)
    gamma = rng.standard_normal(x.shape[:3] + (ch.h.r,))
    z = np.einsum("lkpi,nlki->nlkp", ch.C.values, x) + sample_nonlinearity(ch.h, x, gamma) + v
    return ChannelDraws(z=z, v=v, gamma=gamma)


def delay_and_gate(z: np.ndarray, indicator: np.ndarray, delay: tuple[int, int]) -> np.ndarray:
    """Received samples ``1{level(l,k) > 0} * z(l - i_c, k - j_c)``.

    Points where the delayed sample does not exist yet hold ``MISSING``.
    """
    di, dj = delay
    out = np.full(z.shape, MISSING)
    rows, cols = z.shape[1:3]
    out[:, di:, dj:] = indicator[:, di:, dj:, None] * z[:, : rows - di, : cols - dj]
    return out


def sample(grid: np.ndarray, run: int, l: int, k: int):
    """Sample at ``(l, k)`` or ``None`` when it is absent."""
    if not (0 <= l < grid.shape[1] and 0 <= k < grid.shape[2]):
        return None
    val = grid[run, l, k]
    return None if np.any(np.isnan(val)) else val


def stacked_dims(dims: Sequence[int], s: int) -> int:
    return int(sum(dims[: s + 1]))


def block_slice(dims: Sequence[int], c: int) -> slice:
    start = int(sum(dims[:c]))
    return slice(start, start + int(dims[c]))


def reconstruct(ybars: Sequence[np.ndarray], part: RegionPartition) -> list[np.ndarray]:
    """Delay-free stacked observations.

    Returns one array per stack order ``s``, shaped ``(N, i+1, j+1, p_0+..+p_s)``
    and defined (non-NaN) exactly on ``N_{hbar-s}``.
    """
    hbar = part.hbar
    dims = [y.shape[-1] for y in ybars]
    N = ybars[0].shape[0]
    shape = (N, part.i + 1, part.j + 1)
    out = [np.full(shape + (stacked_dims(dims, s),), MISSING) for s in range(hbar + 1)]
    for r in range(hbar + 1):
        s = hbar - r
        for l, k in part.n_set(r):
            for c in range(s + 1):
                di, dj = part.delays[c]
                li, kj = l + di, k + dj
                val = ybars[c][:, li, kj] if li <= part.i and kj <= part.j else None
                if val is None or np.any(np.isnan(val)):
                    raise ModelError(f"channel {c} sample for ({l},{k}) is missing at ({li},{kj})")
                out[s][:, l, k, block_slice(dims, c)] = val
    return out


def original_stacks(ybars: Sequence[np.ndarray], part: RegionPartition) -> np.ndarray:
    """Per-point stacks of received samples, NaN-padded beyond ``M_s``'s channels."""
    dims = [y.shape[-1] for y in ybars]
    N = ybars[0].shape[0]
    total = sum(dims)
    Y = np.full((N, part.i + 1, part.j + 1, total), MISSING)
    for s in range(part.hbar + 1):
        for l, k in part.m_set(s):
            for c in range(s + 1):
                Y[:, l, k, block_slice(dims, c)] = ybars[c][:, l, k]
    return Y


def selector(dst_dims: Sequence[int], dst_block: int, src_dims: Sequence[int], src_block: int) -> np.ndarray:
    """0/1 matrix copying block ``src_block`` of a source stack into block ``dst_block``."""
    E = np.zeros((int(sum(dst_dims)), int(sum(src_dims))))
    rs, cs = block_slice(dst_dims, dst_block), block_slice(src_dims, src_block)
    E[rs, cs] = np.eye(dst_dims[dst_block])
    return E


@dataclass
class RoundTripReport:
    to_original: float  # max |rebuilt Y - Y|
    to_reconstructed: float  # max |rebuilt y_s - y_s|
    n_original: int
    n_reconstructed: int

    @property
    def discrepancy(self) -> float:
        return max(self.to_original, self.to_reconstructed)


def lemma1_roundtrip(
    Y: np.ndarray, recon: Sequence[np.ndarray], part: RegionPartition, dims: Sequence[int]
) -> RoundTripReport:
    """Rebuild each observation family from the other with block selectors.

    Original stack at ``(l,k)`` in ``M_s``: block ``c`` comes from the
    reconstructed stack at ``(l - i_c, k - j_c)``. Reconstructed stack of
    order ``s`` at ``(l,k)``: block ``c`` comes from the original stack at
    ``(l + i_c, k + j_c)``.
    """
    hbar = part.hbar
    err_orig = 0.0
    err_rec = 0.0
    n_orig = n_rec = 0
    for s in range(hbar + 1):
        dst = list(dims[: s + 1])
        for l, k in part.m_set(s):
            rebuilt = np.zeros(Y.shape[:1] + (sum(dst),))
            for c in range(s + 1):
                di, dj = part.delays[c]
                ql, qk = l - di, k - dj
                src_order = part.stack_order(ql, qk)
                if src_order < c:
                    raise ModelError(f"reconstructed stack at ({ql},{qk}) lacks channel {c}")
                E = selector(dst, c, dims[: src_order + 1], c)
                rebuilt = rebuilt + recon[src_order][:, ql, qk] @ E.T
            err_orig = max(err_orig, float(np.max(np.abs(rebuilt - Y[:, l, k, : sum(dst)]), initial=0.0)))
            n_orig += 1
    for r in range(hbar + 1):
        s = hbar - r
        dst = list(dims[: s + 1])
        for l, k in part.n_set(r):
            rebuilt = np.zeros(Y.shape[:1] + (sum(dst),))
            for c in range(s + 1):
                di, dj = part.delays[c]
                ql, qk = l + di, k + dj
                src_order = part.m_region(ql, qk)
                if src_order < c:
                    raise ModelError(f"original stack at ({ql},{qk}) lacks channel {c}")
                E = selector(dst, c, dims[: src_order + 1], c)
                rebuilt = rebuilt + Y[:, ql, qk, : sum(dims[: src_order + 1])] @ E.T
            err_rec = max(err_rec, float(np.max(np.abs(rebuilt - recon[s][:, l, k]), initial=0.0)))
            n_rec += 1
    return RoundTripReport(err_orig, err_rec, n_orig, n_rec)


@dataclass
class ObservationSet:
    """Every observation family produced by one batch of simulations."""

    draws: list[ChannelDraws]
    indicators: list[np.ndarray]  # (N, rows, cols) bool per channel
    ybar: list[np.ndarray]
    recon: list[np.ndarray]
    original: np.ndarray
    partition: RegionPartition

    @property
    def dims(self) -> list[int]:
        return [y.shape[-1] for y in self.ybar]


def observe(
    model: SystemModel,
    states: StateGrid,
    indicators: Sequence[np.ndarray],
    seed: int,
    horizon: tuple[int, int] | None = None,
) -> ObservationSet:
    """Measure, delay, gate and reconstruct for horizon ``(i, j)``."""
    i, j = horizon if horizon is not None else (model.size, model.size)
    if i > model.size or j > model.size:
        raise ModelError(f"horizon ({i},{j}) exceeds the model grid size {model.size}")
    part = partition(i, j, model.delays)
    draws, ybars, inds = [], [], []
    for s, ch in enumerate(model.channels):
        d = measure(model, states, s, seed)
        ind = np.asarray(indicators[s], dtype=bool)[:, : i + 1, : j + 1]
        draws.append(d)
        inds.append(ind)
        ybars.append(delay_and_gate(d.z[:, : i + 1, : j + 1], ind, ch.delay))
    recon = reconstruct(ybars, part)
    Y = original_stacks(ybars, part)
    return ObservationSet(draws=draws, indicators=inds, ybar=ybars, recon=recon, original=Y, partition=part)
