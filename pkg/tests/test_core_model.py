import numpy as np
import pytest

from eh2d.dynamics import (
    empirical_second_moment,
    mean_grid,
    rng_for,
    sample_nonlinearity,
    second_moment_grid,
    simulate_state_grid,
    state_step,
)
from eh2d.model import (
    Field,
    InvariantViolation,
    ModelError,
    NonlinearitySpec,
    check_delay_order,
    interior_points,
    is_psd,
    simple_model,
    wavefront,
)


def zero_model(size=4):
    return simple_model(size, 0.7, 0.2, 0.0, 0.0, 0.0, [{"C": 1.0, "R": 1.0}], mean=0.0, cov=0.0)


# -- nonlinearity -----------------------------------------------------------


def test_nonlinearity_vanishes_at_origin():
    spec = NonlinearitySpec(np.array([[1.0, -2.0]]), np.array([[0.3, 0.4]]))
    draws = rng_for(1, 9).standard_normal((50, 1))
    assert np.all(sample_nonlinearity(spec, np.zeros((50, 2)), draws) == 0.0)


def test_nonlinearity_moments_match_conditional_statistics():
    spec = NonlinearitySpec(np.array([[1.0, 0.5], [0.0, 1.0]]), np.array([[0.3, 0.1], [0.2, -0.4]]), scale=0.7)
    x = np.array([1.5, -2.0])
    N = 100_000
    draws = rng_for(3, 9).standard_normal((N, spec.r))
    f = sample_nonlinearity(spec, np.broadcast_to(x, (N, 2)), draws)
    se = f.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(f.mean(axis=0)) <= 4 * se)
    emp = f.T @ f / N
    ana = spec.power(np.outer(x, x))
    assert np.linalg.norm(emp - ana) <= 0.05 * np.linalg.norm(ana)


def test_nonlinearity_from_matrices_roundtrip():
    d = np.array([0.5, 1.0])
    s = np.array([1.0, -1.0])
    spec = NonlinearitySpec.from_matrices([np.outer(d, d)], [np.outer(s, s)])
    np.testing.assert_allclose(spec.Delta[0], np.outer(d, d), atol=1e-12)
    np.testing.assert_allclose(spec.Sigma[0], np.outer(s, s), atol=1e-12)
    with pytest.raises(ModelError, match="rank"):
        NonlinearitySpec.from_matrices([np.eye(2)], [np.outer(s, s)])


# -- state grid --------------------------------------------------------------


def test_zero_everything_gives_zero_grid():
    st = simulate_state_grid(zero_model(), seed=5, n_runs=3)
    assert np.all(st.x == 0.0)


def test_hand_recursion_at_first_interior_point():
    model = simple_model(3, 0.5, 0.5, 0.0, 0.0, 0.0, [{"C": 1.0, "R": 1.0}], mean=1.0, cov=0.0)
    st = simulate_state_grid(model, seed=0)
    assert st.x[0, 1, 1, 0] == pytest.approx(1.0, abs=1e-15)


def test_state_grid_is_deterministic(two_channel_model):
    a = simulate_state_grid(two_channel_model, seed=11, n_runs=4)
    b = simulate_state_grid(two_channel_model, seed=11, n_runs=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.w, b.w) and np.array_equal(a.xi, b.xi)
    c = simulate_state_grid(two_channel_model, seed=12, n_runs=4)
    assert not np.array_equal(a.x, c.x)


def test_interior_recomputes_from_retained_draws(two_channel_model):
    model = two_channel_model
    st = simulate_state_grid(model, seed=2, n_runs=5)
    worst = 0.0
    for l, k in interior_points(model.rows, model.rows):
        rhs = state_step(
            model, l, k, st.x[:, l, k - 1], st.x[:, l - 1, k], st.w[:, l, k - 1], st.w[:, l - 1, k],
            st.xi[:, l, k - 1], st.xi[:, l - 1, k],
        )
        worst = max(worst, float(np.abs(rhs - st.x[:, l, k]).max()))
    assert worst <= 1e-12


def test_distinct_boundary_points_are_uncorrelated(two_channel_model):
    st = simulate_state_grid(two_channel_model, seed=4, n_runs=2000)
    # x(0,0) is drawn once; every other boundary point has its own draw
    corr = np.corrcoef(st.x[:, 0, 1, 0], st.x[:, 1, 0, 0])[0, 1]
    assert abs(corr) < 4 / np.sqrt(2000)


def test_ensemble_mean_follows_mean_recursion(two_channel_model):
    N = 10_000
    st = simulate_state_grid(two_channel_model, seed=8, n_runs=N)
    m = mean_grid(two_channel_model)
    se = st.x.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(st.x.mean(axis=0) - m) <= 4 * se + 1e-15)


# -- second moments --------------------------------------------------------------


def test_second_moment_zero_when_no_randomness():
    X = second_moment_grid(zero_model(), "zero").X
    assert np.all(X == 0.0)


def test_second_moment_hand_value():
    model = simple_model(4, 0.0, 0.0, 1.0, 1.0, 1.0, [{"C": 1.0, "R": 1.0}])
    X = second_moment_grid(model, "zero").X
    np.testing.assert_allclose(X[1:, 1:, 0, 0], 2.0, atol=0)


@pytest.mark.parametrize("mode", ["zero", "mc"])
def test_second_moment_symmetric_psd(two_channel_model, mode):
    ens = simulate_state_grid(two_channel_model, 1, 500) if mode == "mc" else None
    X = second_moment_grid(two_channel_model, mode, ensemble=ens).X
    assert np.abs(X - np.swapaxes(X, -1, -2)).max() <= 1e-12
    assert all(is_psd(X[l, k]) for l in range(X.shape[0]) for k in range(X.shape[1]))


def test_second_moment_mc_needs_ensemble(scalar_model):
    with pytest.raises(ModelError):
        second_moment_grid(scalar_model, "mc")
    with pytest.raises(ModelError):
        second_moment_grid(scalar_model, "other")


def test_zero_mode_exact_for_decoupled_rows():
    # with A2 = B2 = 0 each row is its own chain, so the zero-cross recursion is exact
    model = simple_model(4, 0.8, 0.0, 1.0, 0.0, 0.5, [{"C": 1.0, "R": 1.0}], mean=0.3, cov=0.2)
    X = second_moment_grid(model, "zero").X
    emp = empirical_second_moment(simulate_state_grid(model, 6, 100_000))
    rel = np.abs(emp - X).max() / np.abs(X).max()
    assert rel < 0.02


# -- model plumbing --------------------------------------------------------------


def test_delay_order_rule():
    check_delay_order([(0, 0), (1, 2), (3, 3)])
    with pytest.raises(ModelError, match="ordering rule"):
        check_delay_order([(0, 0), (2, 1)])
    with pytest.raises(ModelError, match="ordering rule"):
        check_delay_order([(0, 0), (1, 2), (2, 3)])
    with pytest.raises(ModelError, match="ordering rule"):
        check_delay_order([(1, 1)])


def test_model_rejects_inconsistent_shapes():
    with pytest.raises(ModelError, match="B1"):
        simple_model(3, np.eye(2), np.eye(2), np.ones((3, 1)), np.ones((2, 1)), 1.0, [{"C": [[1.0, 0.0]], "R": 1.0}])
    with pytest.raises(ModelError, match="channel 0"):
        simple_model(3, 0.5, 0.5, 1.0, 1.0, 1.0, [{"C": [[1.0, 0.0]], "R": 1.0}])


def test_field_constant_and_table():
    f = Field.constant([[1.0, 2.0]], 3)
    assert f.shape == (1, 2) and f.grid == (4, 4) and f.is_constant
    g = Field.from_function(lambda l, k: [[l + k]], 3)
    assert g(2, 1)[0, 0] == 3.0 and not g.is_constant


def test_wavefront_orders_by_antidiagonal():
    pts = wavefront([(2, 1), (1, 1), (1, 2), (3, 0)])
    sums = [l + k for l, k in pts]
    assert sums == sorted(sums) and pts[0] == (1, 1)


def test_invariant_violation_carries_context():
    err = InvariantViolation("bad", "estimator", (2, 3), 1)
    assert "module=estimator" in str(err) and "point=(2, 3)" in str(err) and "step=1" in str(err)
