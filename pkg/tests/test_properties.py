"""Randomised invariants checked with hypothesis."""
import numpy as np
from hypothesis import given, settings, strategies as st

from eh2d.analysis import daleth_table, extract_bound_params
from eh2d.channels import partition, selector
from eh2d.energy import EnergySpec, bound_activation, simulate_energy_grid
from eh2d.model import interior_points

from oracles import admissible_delays, exact_level_distribution, shift_varying_row_model

FAST = settings(max_examples=40, deadline=None)
SLOW = settings(max_examples=12, deadline=None)

seeds = st.integers(0, 2**31 - 1)


def prob_vector(size):
    return st.lists(st.floats(0.01, 1.0), min_size=size, max_size=size).map(lambda v: np.array(v) / sum(v))


# -- partition -------------------------------------------------------------------


@FAST
@given(seed=seeds, hbar=st.integers(0, 3), extra=st.tuples(st.integers(0, 4), st.integers(0, 4)))
def test_partition_covers_grid_once(seed, hbar, extra):
    delays = admissible_delays(np.random.default_rng(seed), hbar)
    i, j = delays[-1][0] + extra[0], delays[-1][1] + extra[1]
    part = partition(i, j, delays)
    grid = {(l, k) for l in range(i + 1) for k in range(j + 1)}
    for sets in ([part.n_set(r) for r in range(hbar + 1)], [part.m_set(s) for s in range(hbar + 1)]):
        flat = [p for s in sets for p in s]
        assert len(flat) == len(set(flat)) and set(flat) == grid
    for r in range(hbar + 1):
        assert all(part.n_region(l, k) == r for l, k in part.n_set(r))
    for s in range(hbar + 1):
        assert all(part.m_region(l, k) == s for l, k in part.m_set(s))


@FAST
@given(seed=seeds, hbar=st.integers(1, 3))
def test_reconstructed_stacks_point_into_the_grid(seed, hbar):
    delays = admissible_delays(np.random.default_rng(seed), hbar)
    i, j = delays[-1]
    part = partition(i + 2, j + 2, delays)
    for r in range(hbar + 1):
        for l, k in part.n_set(r):
            for di, dj in delays[: hbar - r + 1]:
                assert l + di <= part.i and k + dj <= part.j


# -- selectors -------------------------------------------------------------------


@FAST
@given(dims=st.lists(st.integers(1, 4), min_size=1, max_size=4), data=st.data())
def test_selector_copies_block_exactly(dims, data):
    c = data.draw(st.integers(0, len(dims) - 1))
    dst = dims[: data.draw(st.integers(c + 1, len(dims)))]
    v = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=sum(dims), max_size=sum(dims)))
    v = np.array(v)
    out = selector(dst, c, dims, c) @ v
    lo = sum(dims[:c])
    assert np.array_equal(out[lo : lo + dims[c]], v[lo : lo + dims[c]])
    assert np.count_nonzero(np.delete(out, np.s_[lo : lo + dims[c]])) == 0
    E = selector(dst, c, dims, c)
    assert np.array_equal(E.T @ E @ E.T, E.T)


# -- energy ----------------------------------------------------------------------


@FAST
@given(probs=st.integers(1, 4).flatmap(prob_vector), M=st.integers(1, 4), seed=seeds)
def test_levels_stay_within_capacity(probs, M, seed):
    spec = EnergySpec.uniform(probs, M, min(1, M), 6)
    levels = simulate_energy_grid(spec, seed, 20).levels
    assert levels.min() >= 0 and levels.max() <= M


@SLOW
@given(probs=prob_vector(2), M=st.integers(1, 3), level=st.integers(0, 3))
def test_bound_dominates_exact_distribution(probs, M, level):
    level = min(level, M)
    exact = exact_level_distribution(probs, M, level)
    F = bound_activation(EnergySpec.uniform(probs, M, level, 2))[1]
    assert np.all(exact <= np.minimum(F, 1.0) + 1e-12)


@FAST
@given(probs=st.integers(1, 4).flatmap(prob_vector), M=st.integers(1, 4))
def test_rho_tilde_is_rho_times_complement(probs, M):
    act, F = bound_activation(EnergySpec.uniform(probs, M, 1, 5))
    assert np.array_equal(act.rho_tilde, act.rho * (1.0 - act.rho))
    assert np.all((act.rho >= 0) & (act.rho <= 1))


# -- bounds ----------------------------------------------------------------------


@FAST
@given(g1=st.floats(0.0, 3.0), g2=st.floats(0.0, 3.0), d1=st.floats(0.0, 1.0), d2=st.floats(0.0, 1.0))
def test_daleth_table_monotone_in_both_weights(g1, g2, d1, d2):
    base = daleth_table(g1, g2, 5, 6)
    assert np.all(daleth_table(g1 + d1, g2, 5, 6) >= base)
    assert np.all(daleth_table(g1, g2 + d2, 5, 6) >= base)
    assert np.all(base >= 0)


@SLOW
@given(seed=st.integers(0, 10_000))
def test_extracted_constants_are_attained(seed):
    model = shift_varying_row_model(5, seed=seed)
    p = extract_bound_params(model)
    rows = model.rows
    a1 = max(np.linalg.norm(model.A1(l, k), 2) ** 2 for l in range(rows) for k in range(rows))
    c = max(np.linalg.norm(model.channels[0].C(l, k), 2) ** 2 for l in range(rows) for k in range(rows))
    r_lo = min(np.linalg.eigvalsh(model.channels[0].R(l, k)).min() for l in range(rows) for k in range(rows))
    bqb = [model.B1(l, k) @ model.Q(l, k) @ model.B1(l, k).T for l, k in interior_points(rows, rows)]
    np.testing.assert_allclose([p.a1, p.c[0], p.r_lo[0]], [a1, c, r_lo], rtol=1e-12)
    assert p.q_hi[0] >= max(np.linalg.eigvalsh(m).max() for m in bqb) - 1e-12
