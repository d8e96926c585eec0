#!/usr/bin/env python3

"""
Tests for the multi-task GP imputation layer, including a dense Kronecker oracle
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from models.cohort import ObservationSeries
from services import mgp_imputation
from services import tensor_core as tc
from services.mgp_imputation import (MgpParameters, TimeGrid, batch_posteriors, grid_positions, grid_prior,
                                     observed_covariance, posterior, restrict_series, sample_posterior,
                                     se_kernel_matrix, task_covariance, to_grid_rows)


def se(a, b, length_scale):
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    return np.exp(-((a - b) ** 2) / (2.0 * length_scale ** 2))


def dense_posterior(series: ObservationSeries, grid: TimeGrid, factor, noise, length_scale):
    """Posterior built from explicit Kronecker products over the union of observed times"""
    task = factor @ factor.T
    union = sorted({t for ts in series.times for t in ts})
    n_union = len(union)
    full = np.kron(task, se(union, union, length_scale)) + np.kron(np.diag(noise), np.eye(n_union))
    index = [d * n_union + union.index(t) for d, ts in enumerate(series.times) for t in ts]
    values = np.array([v for vs in series.values for v in vs])
    sigma = full[np.ix_(index, index)]
    cross = np.kron(task, se(grid.points, union, length_scale))[:, index]
    prior = np.kron(task, se(grid.points, grid.points, length_scale))
    mean = cross @ np.linalg.solve(sigma, values)
    covariance = prior - cross @ np.linalg.solve(sigma, cross.T)
    return mean, covariance


def random_instance(rng: np.random.Generator):
    n_features = int(rng.integers(1, 4))
    n_points = int(rng.integers(2, 6))
    width = 4.0
    grid = TimeGrid(points=[(j + 0.5) * width for j in range(n_points)], width=width)
    n_times = int(rng.integers(1, 7))
    union = np.unique(np.round(rng.uniform(0.0, n_points * width, n_times), 3))
    times, values = [], []
    for _ in range(n_features):
        kept = sorted(t for t in union if rng.random() < 0.6)
        times.append([float(t) for t in kept])
        values.append(rng.normal(size=len(kept)).tolist())
    if not any(times):
        times[0], values[0] = [float(union[0])], [0.5]
    factor = np.tril(rng.normal(scale=0.5, size=(n_features, n_features)), k=-1) + np.diag(
        rng.uniform(0.5, 1.5, n_features))
    noise = rng.uniform(0.05, 0.5, n_features)
    length_scale = float(rng.uniform(2.0, 10.0))
    series = ObservationSeries(patient_id="R", times=times, values=values)
    return series, grid, factor, noise, length_scale


def test_posterior_matches_dense_kronecker_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        series, grid, factor, noise, length_scale = random_instance(rng)
        params = MgpParameters.from_factor(factor, noise, length_scale)
        post = posterior(series, grid, params, jitter_scale=0.0)
        mean, covariance = dense_posterior(series, grid, factor, noise, length_scale)
        assert np.max(np.abs(post.mean.data - mean)) < 1e-8
        assert np.max(np.abs(post.covariance.data - covariance)) < 1e-8


def test_se_kernel_values():
    assert se_kernel_matrix([3.0], [3.0], 2.0).item() == 1.0
    assert se_kernel_matrix([1.0], [3.5], 2.5).item() == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert math.exp(-0.5) == pytest.approx(0.606531, abs=1e-6)
    times = np.random.default_rng(1).uniform(0.0, 24.0, 4)
    k = se_kernel_matrix(times, times, 6.0)
    tc.cholesky(k + 1e-9 * np.eye(4), jitter=0.0)
    with pytest.raises(ValueError):
        se_kernel_matrix([1.0], [2.0], 0.0)


def test_task_covariance():
    assert np.array_equal(task_covariance(MgpParameters.initial(3)).data, np.eye(3))
    params = MgpParameters.from_factor(np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([0.1, 0.1]), 12.0)
    assert np.allclose(task_covariance(params).data, [[4.0, 2.0], [2.0, 2.0]], atol=1e-12)
    rng = np.random.default_rng(2)
    for _ in range(20):
        params = MgpParameters(rng.normal(size=(4, 4)), rng.normal(size=4), np.zeros(4), 0.0)
        assert np.min(np.linalg.eigvalsh(task_covariance(params).data)) >= -1e-12


def test_initial_parameters():
    params = MgpParameters.initial(2)
    assert np.allclose(params.noise_variances().data, 0.1)
    assert params.length_scale().item() == pytest.approx(12.0)
    assert set(params.penalized()) == {"task_lower"}


def test_observed_covariance_single_entry():
    params = MgpParameters.from_factor(np.array([[1.5]]), np.array([0.2]), 12.0)
    series = ObservationSeries(patient_id="a", times=[[5.0]], values=[[1.0]])
    covariance = observed_covariance(series, params).data
    assert covariance.shape == (1, 1)
    assert covariance[0, 0] == pytest.approx(1.5 ** 2 + 0.2, abs=1e-12)


def test_observed_covariance_fully_observed_is_kronecker():
    factor = np.array([[1.0, 0.0], [0.6, 0.8]])
    noise = np.array([0.1, 0.3])
    params = MgpParameters.from_factor(factor, noise, 5.0)
    times = [1.0, 4.0, 9.0]
    series = ObservationSeries(patient_id="a", times=[times, times], values=[[0.0] * 3, [0.0] * 3])
    expected = np.kron(factor @ factor.T, se(times, times, 5.0)) + np.kron(np.diag(noise), np.eye(3))
    covariance = observed_covariance(series, params).data
    assert np.max(np.abs(covariance - expected)) < 1e-12
    assert np.max(np.abs(covariance - covariance.T)) < 1e-14


def test_observed_covariance_rejects_feature_mismatch():
    series = ObservationSeries(patient_id="a", times=[[1.0]], values=[[1.0]])
    with pytest.raises(tc.ShapeError):
        observed_covariance(series, MgpParameters.initial(2))


def test_noiseless_observation_is_interpolated():
    params = MgpParameters.from_factor(np.array([[1.0]]), np.array([1e-12]), 12.0)
    grid = TimeGrid(points=[6.0, 10.0], width=4.0)
    series = ObservationSeries(patient_id="a", times=[[6.0]], values=[[2.5]])
    post = posterior(series, grid, params, jitter_scale=0.0)
    assert post.mean.data[0] == pytest.approx(2.5, abs=1e-8)


def test_far_query_reverts_to_prior():
    params = MgpParameters.from_factor(np.array([[1.5]]), np.array([0.1]), 12.0)
    grid = TimeGrid(points=[200.0, 204.0], width=4.0)
    series = ObservationSeries(patient_id="a", times=[[0.0]], values=[[3.0]])
    post = posterior(series, grid, params)
    assert np.max(np.abs(post.mean.data)) < 1e-6
    assert np.allclose(np.diag(post.covariance.data), 2.25, atol=1e-6)


def test_patient_without_observations_gets_prior():
    params = MgpParameters.initial(2)
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    post = posterior(ObservationSeries(patient_id="empty", times=[[], []], values=[[], []]), grid, params)
    assert np.array_equal(post.mean.data, np.zeros(6))
    assert np.allclose(np.diag(post.covariance.data), 1.0)


def small_posterior():
    params = MgpParameters.from_factor(np.array([[1.0, 0.0], [0.5, 0.9]]), np.array([0.1, 0.2]), 6.0)
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    series = ObservationSeries(patient_id="s", times=[[1.0, 7.5], [3.0]], values=[[0.4, -0.2], [1.1]])
    return posterior(series, grid, params)


def test_zero_draw_returns_mean():
    post = small_posterior()
    assert np.array_equal(sample_posterior(post, np.zeros(post.size)).data, post.mean.data)


def test_sample_statistics():
    post = small_posterior()
    n = 100_000
    eps = np.random.default_rng(3).standard_normal((post.size, n))
    samples = sample_posterior(post, eps).data
    mu = post.mean.data
    cov = post.factor.data @ post.factor.data.T

    sigma = np.sqrt(np.diag(cov))
    assert np.all(np.abs(samples.mean(axis=1) - mu) <= 4.0 * sigma / math.sqrt(n))

    centered = samples - mu[:, None]
    empirical = centered @ centered.T / n
    standard_error = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    assert np.all(np.abs(empirical - cov) <= 5.0 * standard_error)


def test_same_seed_same_sample():
    post = small_posterior()
    first = sample_posterior(post, np.random.default_rng(9).standard_normal(post.size)).data
    second = sample_posterior(post, np.random.default_rng(9).standard_normal(post.size)).data
    assert np.array_equal(first, second)


def test_sample_rejects_wrong_size():
    post = small_posterior()
    with pytest.raises(tc.ShapeError):
        sample_posterior(post, np.zeros(post.size + 1))


def test_to_grid_rows_is_feature_major():
    z = tc.tensor(np.arange(6.0))
    rows = to_grid_rows(z, n_features=2, n_points=3).data
    assert rows.tolist() == [[0.0, 3.0], [1.0, 4.0], [2.0, 5.0]]
    batch = to_grid_rows(tc.tensor(np.stack([np.arange(6.0), 10 + np.arange(6.0)], axis=1)), 2, 3).data
    assert batch.shape == (2, 3, 2)
    assert batch[1].tolist() == [[10.0, 13.0], [11.0, 14.0], [12.0, 15.0]]


def test_restrict_series_keeps_earlier_observations():
    series = ObservationSeries(patient_id="a", times=[[1.0, 5.0, 9.0], [4.0]], values=[[1.0, 2.0, 3.0], [4.0]])
    restricted = restrict_series(series, 5.0)
    assert restricted.times == [[1.0], [4.0]]
    assert restricted.values == [[1.0], [4.0]]


def test_batch_posteriors_threads_preserve_order():
    params = MgpParameters.initial(1)
    grid = TimeGrid(points=[2.0, 6.0], width=4.0)
    series = [ObservationSeries(patient_id=str(i), times=[[1.0 + i]], values=[[float(i)]]) for i in range(5)]
    serial = batch_posteriors(series, grid, params, threads=1)
    pooled = batch_posteriors(series, grid, params, threads=3)
    for a, b in zip(serial, pooled):
        assert np.array_equal(a.mean.data, b.mean.data)


def test_posterior_mean_gradient_reaches_every_parameter():
    params = MgpParameters.from_factor(np.array([[1.0, 0.0], [0.4, 0.8]]), np.array([0.15, 0.25]), 5.0)
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    series = ObservationSeries(patient_id="g", times=[[1.0, 6.5], [3.0, 9.0]], values=[[0.3, -0.4], [1.2, 0.1]])
    weights = np.random.default_rng(4).normal(size=6)

    def loss(_):
        post = posterior(series, grid, params, jitter_scale=0.0)
        return (post.mean * weights).sum() + post.covariance.sum()

    for tensor in params.tensors().values():
        assert tc.grad_check(loss, tensor, floor=1e-8) < 1e-5


def aligned_instance(rng: np.random.Generator):
    """Random instance whose observations all sit on window centers"""
    series, grid, factor, noise, length_scale = random_instance(rng)
    times, values = [], []
    for _ in range(series.n_features):
        kept = [t for t in grid.points if rng.random() < 0.6]
        times.append(kept)
        values.append(rng.normal(size=len(kept)).tolist())
    if not any(times):
        times[0], values[0] = [grid.points[-1]], [0.5]
    return ObservationSeries(patient_id="A", times=times, values=values), grid, factor, noise, length_scale


def test_grid_positions():
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    aligned = ObservationSeries(patient_id="a", times=[[2.0, 10.0], [6.0]], values=[[0.1, 0.2], [0.3]])
    assert grid_positions(aligned, grid).tolist() == [0, 2, 4]
    shifted = ObservationSeries(patient_id="b", times=[[2.0, 9.5], [6.0]], values=[[0.1, 0.2], [0.3]])
    assert grid_positions(shifted, grid) is None
    outside = ObservationSeries(patient_id="c", times=[[14.0], []], values=[[0.1], []])
    assert grid_positions(outside, grid) is None


def test_aligned_posterior_matches_dense_kronecker_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        series, grid, factor, noise, length_scale = aligned_instance(rng)
        assert grid_positions(series, grid) is not None
        params = MgpParameters.from_factor(factor, noise, length_scale)
        post = posterior(series, grid, params, jitter_scale=0.0)
        mean, covariance = dense_posterior(series, grid, factor, noise, length_scale)
        assert np.max(np.abs(post.mean.data - mean)) < 1e-8
        assert np.max(np.abs(post.covariance.data - covariance)) < 1e-8


def test_aligned_gather_agrees_with_pointwise_kernels(monkeypatch):
    rng = np.random.default_rng(6)
    cases = [aligned_instance(rng) for _ in range(20)]
    gathered = []
    for series, grid, factor, noise, length_scale in cases:
        params = MgpParameters.from_factor(factor, noise, length_scale)
        gathered.append(posterior(series, grid, params, jitter_scale=0.0))
    monkeypatch.setattr(mgp_imputation, "grid_positions", lambda obs, grid: None)
    for (series, grid, factor, noise, length_scale), fast in zip(cases, gathered):
        params = MgpParameters.from_factor(factor, noise, length_scale)
        general = posterior(series, grid, params, jitter_scale=0.0)
        assert np.max(np.abs(fast.mean.data - general.mean.data)) < 1e-10
        assert np.max(np.abs(fast.covariance.data - general.covariance.data)) < 1e-10


def test_grid_prior_is_kronecker():
    factor = np.array([[1.0, 0.0], [0.6, 0.8]])
    params = MgpParameters.from_factor(factor, np.array([0.1, 0.3]), 5.0)
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    expected = np.kron(factor @ factor.T, se(grid.points, grid.points, 5.0))
    assert np.max(np.abs(grid_prior(grid, params).data - expected)) < 1e-12


def test_shared_prior_gradient_reaches_every_parameter():
    params = MgpParameters.from_factor(np.array([[1.0, 0.0], [0.4, 0.8]]), np.array([0.15, 0.25]), 5.0)
    grid = TimeGrid(points=[2.0, 6.0, 10.0], width=4.0)
    series = [
        ObservationSeries(patient_id="a", times=[[2.0, 10.0], [6.0]], values=[[0.3, -0.4], [1.2]]),
        ObservationSeries(patient_id="b", times=[[6.0], [2.0, 6.0, 10.0]], values=[[0.8], [0.1, -0.5, 0.2]]),
    ]
    weights = np.random.default_rng(7).normal(size=6)

    def loss(_):
        total = None
        for post in batch_posteriors(series, grid, params, jitter_scale=0.0):
            term = (post.mean * weights).sum() + post.covariance.sum()
            total = term if total is None else total + term
        return total

    for tensor in params.tensors().values():
        assert tc.grad_check(loss, tensor, floor=1e-8) < 1e-5


def test_time_grid_must_be_even():
    with pytest.raises(ValueError):
        TimeGrid(points=[2.0, 6.0, 11.0], width=4.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
