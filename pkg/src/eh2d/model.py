"""System description for shift-varying 2-D stochastic plants.

The plant evolves over the square grid ``[0, size] x [0, size]``::

    x(l,k) = A1(l,k-1) x(l,k-1) + A2(l-1,k) x(l-1,k)
             + g(x(l,k-1)) + g(x(l-1,k))
             + B1(l,k-1) w(l,k-1) + B2(l-1,k) w(l-1,k)
    z_s(l,k) = C_s(l,k) x(l,k) + h_s(x(l,k)) + v_s(l,k)

and channel ``s`` delivers ``z_s`` to the remote filter after a fixed
``(row, column)`` delay.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

PSD_TOL = 1e-10


class ModelError(ValueError):
    """Raised when a model, channel or configuration is inconsistent."""


class InvariantViolation(RuntimeError):
    """A numerical invariant failed while a pipeline was running."""

    def __init__(self, message: str, module: str | None = None, point=None, step: int | None = None):
        super().__init__(message)
        self.message = message
        self.module = module
        self.point = tuple(point) if point is not None else None
        self.step = step

    def __str__(self) -> str:
        ctx = [f"module={self.module}"] if self.module else []
        if self.point is not None:
            ctx.append(f"point={self.point}")
        if self.step is not None:
            ctx.append(f"step={self.step}")
        return f"{self.message} [{', '.join(ctx)}]" if ctx else self.message


def is_psd(mat: np.ndarray, tol: float = PSD_TOL) -> bool:
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        return True
    if not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
        return False
    return bool(np.linalg.eigvalsh(mat).min() >= -tol * max(1.0, np.abs(mat).max()))


def sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def wavefront(points: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Order grid points by anti-diagonal ``l + k``, ties broken by row."""
    return sorted(points, key=lambda p: (p[0] + p[1], p[0]))


def interior_points(rows: int, cols: int) -> Iterator[tuple[int, int]]:
    for diag in range(2, rows + cols - 1):
        for l in range(max(1, diag - cols + 1), min(rows - 1, diag - 1) + 1):
            yield l, diag - l


@dataclass(frozen=True)
class GridIndex:
    l: int
    k: int

    def check(self, size: int) -> None:
        if not (0 <= self.l <= size and 0 <= self.k <= size):
            raise ModelError(f"grid index ({self.l},{self.k}) outside [0,{size}]^2")


class Field:
    """A matrix-valued parameter defined at every grid point.

    Values are stored as an array of shape ``(rows, cols, a, b)``; constant
    fields are broadcast views, so they cost one matrix of memory.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 4:
            raise ModelError(f"field table must be 4-D (rows, cols, a, b), got shape {values.shape}")
        self.values = values
        self.values.flags.writeable = False

    @classmethod
    def constant(cls, mat, size: int) -> "Field":
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return cls(np.broadcast_to(mat, (size + 1, size + 1) + mat.shape))

    @classmethod
    def from_function(cls, fn: Callable[[int, int], np.ndarray], size: int) -> "Field":
        table = np.array([[np.atleast_2d(fn(l, k)) for k in range(size + 1)] for l in range(size + 1)], dtype=float)
        return cls(table)

    def __call__(self, l: int, k: int) -> np.ndarray:
        return self.values[l, k]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[2:]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def is_constant(self) -> bool:
        return self.values.strides[0] == 0 and self.values.strides[1] == 0


@dataclass(frozen=True)
class NonlinearitySpec:
    """Stochastic nonlinearity ``f(x) = scale * sum_mu d_mu * u_mu * (s_mu . x)``.

    ``u`` are independent unit-variance draws, so ``E[f | x] = 0`` and
    ``E[f f^T | x] = sum_mu Delta_mu (x^T Sigma_mu x)`` with
    ``Delta_mu = scale^2 d_mu d_mu^T`` and ``Sigma_mu = s_mu s_mu^T``.
    """

    directions: np.ndarray  # (r, n_out)
    shapes: np.ndarray  # (r, n_in)
    scale: float = 1.0

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        s = np.atleast_2d(np.asarray(self.shapes, dtype=float))
        if d.shape[0] != s.shape[0]:
            raise ModelError(f"nonlinearity has {d.shape[0]} directions but {s.shape[0]} shapes")
        if d.shape[0] < 1:
            raise ModelError("nonlinearity needs at least one term")
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ModelError("nonlinearity scale must be a nonnegative finite number")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "shapes", s)

    @classmethod
    def zero(cls, n_out: int, n_in: int) -> "NonlinearitySpec":
        return cls(np.zeros((1, n_out)), np.zeros((1, n_in)))

    @classmethod
    def from_matrices(cls, deltas: Sequence[np.ndarray], sigmas: Sequence[np.ndarray]) -> "NonlinearitySpec":
        """Build from rank-one PSD matrices by factorising each one."""
        dirs, shps = [], []
        for name, mats, out in (("Delta", deltas, dirs), ("Sigma", sigmas, shps)):
            for mat in mats:
                mat = np.atleast_2d(np.asarray(mat, dtype=float))
                if not is_psd(mat):
                    raise ModelError(f"{name} factor is not symmetric PSD")
                vals, vecs = np.linalg.eigh(mat)
                if np.sum(vals > PSD_TOL * max(1.0, vals.max())) > 1:
                    raise ModelError(f"{name} factor must have rank at most one")
                out.append(vecs[:, -1] * np.sqrt(max(vals[-1], 0.0)))
        return cls(np.array(dirs), np.array(shps))

    @property
    def r(self) -> int:
        return self.directions.shape[0]

    @property
    def n_out(self) -> int:
        return self.directions.shape[1]

    @property
    def n_in(self) -> int:
        return self.shapes.shape[1]

    @property
    def Delta(self) -> np.ndarray:
        return self.scale**2 * np.einsum("ri,rj->rij", self.directions, self.directions)

    @property
    def Sigma(self) -> np.ndarray:
        return np.einsum("ri,rj->rij", self.shapes, self.shapes)

    @property
    def is_zero(self) -> bool:
        return self.scale == 0 or not (np.any(self.directions) and np.any(self.shapes))

    def power(self, X: np.ndarray) -> np.ndarray:
        """``sum_mu Delta_mu tr(X Sigma_mu)`` for a second moment ``X``."""
        traces = np.einsum("ri,ij,rj->r", self.shapes, X, self.shapes)
        return np.einsum("r,rij->ij", traces, self.Delta)


@dataclass(frozen=True)
class InitialConditions:
    """Boundary statistics: row 0 / column 0 means and covariances.

    Boundary states are mutually uncorrelated; ``x(0,0)`` is shared by the
    row and column families, so entry 0 of both must agree.
    """

    mean_rows: np.ndarray  # (size+1, n): E x(l,0)
    mean_cols: np.ndarray  # (size+1, n): E x(0,k)
    cov_rows: np.ndarray  # (size+1, n, n)
    cov_cols: np.ndarray

    @classmethod
    def constant(cls, mean, cov, size: int) -> "InitialConditions":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        means = np.tile(mean, (size + 1, 1))
        covs = np.tile(cov, (size + 1, 1, 1))
        return cls(means, means.copy(), covs, covs.copy())

    def __post_init__(self):
        for name in ("mean_rows", "mean_cols", "cov_rows", "cov_cols"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not np.array_equal(self.mean_rows[0], self.mean_cols[0]) or not np.array_equal(
            self.cov_rows[0], self.cov_cols[0]
        ):
            raise ModelError("x(0,0) statistics differ between the row and column boundary")
        for name in ("cov_rows", "cov_cols"):
            for idx, cov in enumerate(getattr(self, name)):
                if not is_psd(cov):
                    raise ModelError(f"initial {name}[{idx}] is not symmetric PSD")

    def mean(self, l: int, k: int) -> np.ndarray:
        return self.mean_rows[l] if k == 0 else self.mean_cols[k]

    def cov(self, l: int, k: int) -> np.ndarray:
        return self.cov_rows[l] if k == 0 else self.cov_cols[k]


@dataclass(frozen=True)
class ChannelSpec:
    """One sensor channel: output map, noise, nonlinearity and fixed delay."""

    C: Field
    R: Field
    h: NonlinearitySpec
    delay: tuple[int, int] = (0, 0)

    @property
    def p(self) -> int:
        return self.C.shape[0]


def check_delay_order(delays: Sequence[tuple[int, int]]) -> None:
    """Delays must satisfy ``0 = i_0 = j_0 < i_1 <= j_1 < i_2 <= j_2 < ...``."""
    if not delays:
        raise ModelError("at least one channel is required")
    if tuple(delays[0]) != (0, 0):
        raise ModelError(f"delay ordering rule violated: channel 0 must have delay (0,0), got {tuple(delays[0])}")
    for s in range(1, len(delays)):
        (pi, pj), (ci, cj) = delays[s - 1], delays[s]
        if not (pj < ci <= cj):
            raise ModelError(
                "delay ordering rule violated (need j_{s-1} < i_s <= j_s): "
                f"channel {s - 1} delay {(pi, pj)}, channel {s} delay {(ci, cj)}"
            )


@dataclass(frozen=True)
class SystemModel:
    A1: Field
    A2: Field
    B1: Field
    B2: Field
    Q: Field
    g: NonlinearitySpec
    initial: InitialConditions
    channels: tuple[ChannelSpec, ...]
    size: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        grid = (self.size + 1, self.size + 1)
        n, m = self.n, self.m
        expect = {"A1": (n, n), "A2": (n, n), "B1": (n, m), "B2": (n, m), "Q": (m, m)}
        for name, shape in expect.items():
            fld = getattr(self, name)
            if fld.shape != shape:
                raise ModelError(f"{name} has shape {fld.shape}, expected {shape}")
            if fld.grid != grid:
                raise ModelError(f"{name} is defined on a {fld.grid} grid, expected {grid}")
        if (self.g.n_out, self.g.n_in) != (n, n):
            raise ModelError(f"state nonlinearity maps {self.g.n_in}->{self.g.n_out}, expected {n}->{n}")
        ic = self.initial
        if ic.mean_rows.shape != (self.size + 1, n) or ic.cov_rows.shape != (self.size + 1, n, n):
            raise ModelError("initial conditions do not match the state dimension or grid size")
        if ic.mean_cols.shape != (self.size + 1, n) or ic.cov_cols.shape != (self.size + 1, n, n):
            raise ModelError("initial conditions do not match the state dimension or grid size")
        _check_field_psd("Q", self.Q, strict=False)
        for s, ch in enumerate(self.channels):
            p = ch.p
            if ch.C.shape != (p, n) or ch.C.grid != grid:
                raise ModelError(f"channel {s}: C has shape {ch.C.shape}, expected ({p},{n})")
            if ch.R.shape != (p, p) or ch.R.grid != grid:
                raise ModelError(f"channel {s}: R has shape {ch.R.shape}, expected ({p},{p})")
            if (ch.h.n_out, ch.h.n_in) != (p, n):
                raise ModelError(f"channel {s}: nonlinearity maps {ch.h.n_in}->{ch.h.n_out}, expected {n}->{p}")
            _check_field_psd(f"channel {s} R", ch.R, strict=True)
        check_delay_order(self.delays)

    @property
    def n(self) -> int:
        return self.A1.shape[0]

    @property
    def m(self) -> int:
        return self.B1.shape[1]

    @property
    def hbar(self) -> int:
        return len(self.channels) - 1

    @property
    def delays(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in ch.delay) for ch in self.channels]

    @property
    def output_dims(self) -> list[int]:
        return [ch.p for ch in self.channels]

    @property
    def rows(self) -> int:
        return self.size + 1

    def stacked_C(self, s: int, l: int, k: int) -> np.ndarray:
        return np.vstack([self.channels[c].C(l, k) for c in range(s + 1)])

    def stacked_R(self, s: int, l: int, k: int) -> np.ndarray:
        return _block_diag([self.channels[c].R(l, k) for c in range(s + 1)])

    def stacked_h_power(self, s: int, X: np.ndarray) -> np.ndarray:
        # Independent draws per channel give a block-diagonal power term.
        return _block_diag([self.channels[c].h.power(X) for c in range(s + 1)])

    def with_(self, **changes) -> "SystemModel":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return SystemModel(**fields)


def _check_field_psd(name: str, fld: Field, strict: bool) -> None:
    vals = fld.values
    mats = vals[:1, :1] if fld.is_constant else vals
    flat = mats.reshape((-1,) + fld.shape)
    if not np.allclose(flat, np.swapaxes(flat, -1, -2), atol=1e-12, rtol=0.0):
        raise ModelError(f"{name} is not symmetric")
    lam = np.linalg.eigvalsh(flat).min()
    if strict and lam <= 0:
        raise ModelError(f"{name} must be positive definite (min eigenvalue {lam:.3g})")
    if not strict and lam < -PSD_TOL:
        raise ModelError(f"{name} must be positive semidefinite (min eigenvalue {lam:.3g})")


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


block_diag = _block_diag


def simple_model(
    size: int,
    A1,
    A2,
    B1,
    B2,
    Q,
    channels: Sequence[dict],
    g: NonlinearitySpec | None = None,
    mean=None,
    cov=None,
) -> SystemModel:
    """Convenience builder for constant-parameter models.

    ``channels`` entries are dicts with keys ``C``, ``R`` and optionally
    ``delay`` and ``h``.
    """
    A1 = np.atleast_2d(np.asarray(A1, dtype=float))
    n = A1.shape[0]
    B1 = np.atleast_2d(np.asarray(B1, dtype=float))
    chans = []
    for ch in channels:
        C = np.atleast_2d(np.asarray(ch["C"], dtype=float))
        chans.append(
            ChannelSpec(
                C=Field.constant(C, size),
                R=Field.constant(ch["R"], size),
                h=ch.get("h") or NonlinearitySpec.zero(C.shape[0], n),
                delay=tuple(ch.get("delay", (0, 0))),
            )
        )
    return SystemModel(
        A1=Field.constant(A1, size),
        A2=Field.constant(A2, size),
        B1=Field.constant(B1, size),
        B2=Field.constant(B2, size),
        Q=Field.constant(Q, size),
        g=g or NonlinearitySpec.zero(n, n),
        initial=InitialConditions.constant(
            np.zeros(n) if mean is None else mean, np.eye(n) if cov is None else cov, size
        ),
        channels=tuple(chans),
        size=size,
    )
