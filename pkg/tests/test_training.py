from pathlib import Path

import numpy as np
import pytest

from src.schedules import (
    GridKind,
    VarianceKind,
    VarianceSchedule,
    WeightingSpec,
    build_time_grid,
    edm_weighting,
    uniform_weighting,
)
from src.score_net import ScoreNet, init_net, loss_and_grad
from src.training import (
    DataSourceError,
    FileSource,
    GaussianMixtureSource,
    GaussianSource,
    TrainBatch,
    TrainingError,
    TrainState,
    TrainStatus,
    bell_shape_probe,
    decay_frame,
    decay_ratio_trace,
    default_learning_rate,
    equalizing_total_weighting,
    fit,
    gd_run,
    loss_trace_frame,
    make_batch,
    rate_factor_correlation,
    residual_norms_sq,
)


EDM = VarianceSchedule(kind=VarianceKind.EDM, sigma_bar_min=0.002, sigma_bar_max=80.0)
SMALL = VarianceSchedule(kind=VarianceKind.EDM, sigma_bar_min=0.02, sigma_bar_max=2.0)


def test_gaussian_source_scale() -> None:
    x = GaussianSource(d=4).draw(100, np.random.default_rng(0))
    assert x.shape == (100, 4)
    assert 0.7 <= float((x**2).sum(axis=1).mean() / 4) <= 1.3


def test_gaussian_source_rejects_bad_mean() -> None:
    with pytest.raises(DataSourceError):
        GaussianSource(d=2, mean=(1.0,))


def test_mixture_source_centers() -> None:
    x = GaussianMixtureSource(d=3, separation=5.0, sigma=0.1).draw(50, np.random.default_rng(1))
    assert np.all(np.abs(np.abs(x) - 5.0) < 1.0)


def test_file_source_reads_csv_and_whitespace(tmp_path: Path) -> None:
    csv_path = tmp_path / "data.csv"
    csv_path.write_text("# samples\n1.0,2.0\n3.0,4.0\n5.0,6.0\n", encoding="utf-8")
    txt_path = tmp_path / "data.txt"
    txt_path.write_text("1.0 2.0\n3.0   4.0\n", encoding="utf-8")
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(FileSource(csv_path, d=2).draw(2, rng), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(FileSource(txt_path, d=2).draw(2, rng), [[1.0, 2.0], [3.0, 4.0]])


def test_file_source_errors(tmp_path: Path) -> None:
    path = tmp_path / "data.csv"
    path.write_text("1.0,2.0\n", encoding="utf-8")
    rng = np.random.default_rng(0)
    with pytest.raises(DataSourceError):
        FileSource(path, d=3).draw(1, rng)
    with pytest.raises(DataSourceError):
        FileSource(path, d=2).draw(2, rng)
    with pytest.raises(DataSourceError):
        FileSource(tmp_path / "missing.csv", d=2).draw(1, rng)


def test_make_batch_shapes_and_determinism() -> None:
    grid = build_time_grid(EDM, GridKind.POLYNOMIAL, 4, 7.0)
    a = make_batch(GaussianSource(d=3), 5, grid, EDM, seed=9)
    b = make_batch(GaussianSource(d=3), 5, grid, EDM, seed=9)
    assert a.xi.shape == (5, 4, 3)
    assert a.inputs().shape == (5, 4, 4)
    np.testing.assert_array_equal(a.sigma_bars, grid.times[1:])
    np.testing.assert_array_equal(a.xi, b.xi)
    np.testing.assert_array_equal(a.inputs()[:, :, -1], np.broadcast_to(grid.times[1:], (5, 4)))


def test_gd_run_rejects_untrainable_network() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    state = TrainState(net=init_net(d=2, m=8, L=0, seed=0), lr=0.01)
    with pytest.raises(TrainingError):
        gd_run(state, batch, uniform_weighting(grid, SMALL), max_steps=10, eps_train=1e-3)


def test_gd_run_validates_arguments() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    weighting = uniform_weighting(grid, SMALL)
    net = init_net(d=2, m=8, L=1, seed=0)
    with pytest.raises(TrainingError):
        gd_run(TrainState(net=net, lr=-1.0), batch, weighting, max_steps=10, eps_train=1e-3)
    with pytest.raises(TrainingError):
        gd_run(TrainState(net=net, lr=0.01), batch, weighting, max_steps=0, eps_train=1e-3)
    with pytest.raises(TrainingError):
        gd_run(TrainState(net=net, lr=0.01), batch, weighting, max_steps=10, eps_train=0.0)


def test_gd_run_converges_after_a_single_step() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    state = gd_run(
        TrainState(net=init_net(d=2, m=8, L=1, seed=0), lr=1e-6),
        batch,
        uniform_weighting(grid, SMALL),
        max_steps=10,
        eps_train=np.inf,
    )
    assert state.status is TrainStatus.CONVERGED
    assert state.step == 1
    assert [k for k, _ in state.loss_trace] == [0, 1]


def test_gd_run_records_every_iteration() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    weighting = uniform_weighting(grid, SMALL)
    state = gd_run(TrainState(net=init_net(d=2, m=8, L=1, seed=0), lr=1e-6), batch, weighting, 5, 1e-12)
    assert state.status is TrainStatus.MAX_STEPS
    assert [k for k, _ in state.loss_trace] == list(range(6))
    assert len(state.step_records) == 6
    assert all(1 <= record.j_star <= 3 for record in state.step_records)
    assert state.per_term_loss is not None
    assert state.per_term_loss.sum() / (2 * 4) == pytest.approx(state.final_loss, rel=8 * np.finfo(float).eps)


def test_huge_learning_rate_diverges() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    state = gd_run(
        TrainState(net=init_net(d=2, m=32, L=1, seed=0), lr=1e6),
        batch,
        uniform_weighting(grid, SMALL),
        max_steps=50,
        eps_train=1e-12,
    )
    assert state.status is TrainStatus.DIVERGED


@pytest.mark.slow
def test_training_decreases_loss_monotonically() -> None:
    grid = build_time_grid(EDM, GridKind.POLYNOMIAL, 4, 7.0)
    batch = make_batch(GaussianSource(d=4), 8, grid, EDM, seed=1)
    weighting = edm_weighting(grid, EDM)
    net = init_net(d=4, m=256, L=2, seed=0)
    lr = default_learning_rate(grid, EDM, weighting, n=8, m=256)
    state = fit(net, batch, weighting, lr, max_steps=2000, eps_train=1e-12, abort_on_increase_after=10)
    assert state.status in (TrainStatus.MAX_STEPS, TrainStatus.CONVERGED)
    losses = [loss for _, loss in state.loss_trace]
    assert all(later <= earlier for earlier, later in zip(losses[10:], losses[11:]))
    assert losses[-1] <= 0.5 * losses[0]
    # the derived rate is only an order-of-magnitude guide at this width
    assert state.halvings >= 1
    assert state.lr == lr / 2**state.halvings
    assert rate_factor_correlation(decay_ratio_trace(state)) > 0.0


def test_fit_halves_learning_rate_after_divergence() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    state = fit(
        init_net(d=2, m=32, L=1, seed=0),
        batch,
        uniform_weighting(grid, SMALL),
        lr=1e6,
        max_steps=20,
        eps_train=1e-12,
    )
    assert state.status is TrainStatus.MAX_STEPS
    assert state.halvings > 0
    assert state.lr == 1e6 / 2**state.halvings


def test_decay_diagnostics() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    weighting = uniform_weighting(grid, SMALL)
    state = gd_run(TrainState(net=init_net(d=2, m=8, L=1, seed=0), lr=1e-4), batch, weighting, 8, 1e-12)
    trace = decay_ratio_trace(state)
    losses = [loss for _, loss in state.loss_trace]
    assert trace.ratios.size == len(losses) - 1
    assert trace.ratios[0] == pytest.approx(losses[1] / losses[0])
    frame = decay_frame(state)
    assert list(frame.columns) == ["step", "loss", "ratio", "j_star", "rate_factor"]
    assert list(loss_trace_frame(state).columns) == ["step", "loss"]
    assert len(trace.argmax_sets) == trace.ratios.size
    assert all(len(members) == size for members, size in zip(trace.argmax_sets, trace.argmax_size))
    correlation = rate_factor_correlation(trace)
    assert np.isnan(correlation) or -1.0 <= correlation <= 1.0


def test_argmax_set_keeps_ties_and_picks_largest_rate_factor() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    sigma_bars = SMALL.sigma_bar(grid.times[1:])
    # W_last = 0 makes the score vanish, so f(i, j) = beta_j ||xi_ij||^2
    xi = np.array([[1.0, 2.0, 1.0], [2.0, 1.0, 1.0]])[:, :, np.newaxis]
    batch = TrainBatch(x=np.zeros((2, 1)), xi=xi, sigma_bars=sigma_bars, seed=0)
    net = ScoreNet(W0=np.ones((4, 2)), hidden=(np.eye(4),), W_last=np.zeros((1, 4)))
    state = gd_run(TrainState(net=net, lr=0.1), batch, uniform_weighting(grid, SMALL), max_steps=1, eps_train=1e-12)
    record = state.step_records[0]
    assert record.argmax_set == ((0, 2), (1, 1))
    assert record.argmax_size == 2
    assert record.j_star == 2
    assert record.rate_factor == sigma_bars[1] ** 2
    assert decay_ratio_trace(state).argmax_sets == (((0, 2), (1, 1)),)


def test_argmax_set_covers_every_term_when_all_tie() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    sigma_bars = SMALL.sigma_bar(grid.times[1:])
    batch = TrainBatch(x=np.zeros((2, 1)), xi=np.ones((2, 3, 1)), sigma_bars=sigma_bars, seed=0)
    net = ScoreNet(W0=np.ones((4, 2)), hidden=(np.eye(4),), W_last=np.zeros((1, 4)))
    state = gd_run(TrainState(net=net, lr=0.1), batch, uniform_weighting(grid, SMALL), max_steps=1, eps_train=1e-12)
    record = state.step_records[0]
    assert record.argmax_size == 6
    assert set(record.argmax_set) == {(i, j) for i in range(2) for j in range(1, 4)}
    assert record.j_star == 3
    assert record.rate_factor == sigma_bars[-1] ** 2


def test_gd_step_is_plain_gradient_update_on_hidden_layers() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    weighting = uniform_weighting(grid, SMALL)
    net = init_net(d=2, m=8, L=2, seed=0)
    grads = loss_and_grad(net, batch, weighting).grads
    state = gd_run(TrainState(net=net, lr=1e-3), batch, weighting, max_steps=1, eps_train=1e-12)
    assert state.step == 1
    for before, after, grad in zip(net.hidden, state.net.hidden, grads):
        np.testing.assert_array_equal(after, before - 1e-3 * grad)


def test_gd_run_leaves_first_and_last_layers_untouched() -> None:
    grid = build_time_grid(SMALL, GridKind.POLYNOMIAL, 3, 7.0)
    batch = make_batch(GaussianSource(d=2), 4, grid, SMALL, seed=0)
    net = init_net(d=2, m=8, L=2, seed=0)
    state = gd_run(TrainState(net=net, lr=1e-3), batch, uniform_weighting(grid, SMALL), 5, 1e-12)
    assert state.step == 5
    assert state.net.W0.tobytes() == net.W0.tobytes()
    assert state.net.W_last.tobytes() == net.W_last.tobytes()
    assert any(not np.array_equal(a, b) for a, b in zip(state.net.hidden, net.hidden))


def _geometric_mean_ratio(state: TrainState) -> float:
    return float(np.exp(np.mean(np.log(decay_ratio_trace(state).ratios))))


def test_equalizing_weighting_decays_at_least_as_fast_as_uniform() -> None:
    # one hidden unit with every ReLU active: r_j = sigma_bar_j^2 (w - 1), so the loss is quadratic in w
    sigma_bars = np.array([1.0, 2.0])
    xi = -(sigma_bars**2)[np.newaxis, :, np.newaxis]
    batch = TrainBatch(x=np.zeros((1, 1)), xi=xi, sigma_bars=sigma_bars, seed=0)
    net = ScoreNet(W0=np.array([[0.0, 1.0]]), hidden=(np.array([[2.0]]),), W_last=np.array([[1.0]]))
    uniform = WeightingSpec(w=np.ones(2), beta=np.ones(2))
    beta = equalizing_total_weighting(net, batch)
    equalizing = WeightingSpec(w=np.ones(2), beta=beta)

    runs = {
        name: gd_run(TrainState(net=net, lr=0.1), batch, weighting, max_steps=200, eps_train=1e-20)
        for name, weighting in (("uniform", uniform), ("equalizing", equalizing))
    }
    assert all(state.status is TrainStatus.CONVERGED for state in runs.values())
    curvature = float(np.sum(beta * sigma_bars**4))
    assert decay_ratio_trace(runs["equalizing"]).ratios[0] == pytest.approx((1.0 - 0.1 * curvature) ** 2, rel=1e-9)
    assert _geometric_mean_ratio(runs["equalizing"]) <= _geometric_mean_ratio(runs["uniform"])


def test_decay_trace_needs_two_losses() -> None:
    state = TrainState(net=init_net(d=2, m=4, L=1, seed=0), lr=0.1, loss_trace=[(0, 1.0)])
    with pytest.raises(TrainingError):
        decay_ratio_trace(state)


def test_equalizing_weighting_balances_per_time_means() -> None:
    grid = build_time_grid(EDM, GridKind.POLYNOMIAL, 6, 7.0)
    batch = make_batch(GaussianSource(d=2), 10, grid, EDM, seed=3)
    net = init_net(d=2, m=32, L=2, seed=3)
    beta = equalizing_total_weighting(net, batch)
    assert beta.mean() == pytest.approx(1.0)
    balanced = beta * residual_norms_sq(net, batch).mean(axis=0)
    np.testing.assert_allclose(balanced, balanced[0], rtol=1e-12)


def test_bell_shape_probe_at_initialization() -> None:
    passing = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(2)
        xi = rng.standard_normal(2)
        net = init_net(d=2, m=64, L=2, seed=seed)
        rows = bell_shape_probe(net, x, xi, [1e-4, 1.0, 80.0])
        small, middle, large = rows[:, 1]
        if abs(small - np.linalg.norm(xi)) <= 0.05 * np.linalg.norm(xi) and large > middle:
            passing += 1
    assert passing >= 18


def test_bell_shape_probe_rejects_unsorted_levels() -> None:
    net = init_net(d=2, m=4, L=1, seed=0)
    with pytest.raises(ValueError):
        bell_shape_probe(net, np.zeros(2), np.ones(2), [1.0, 0.5])
