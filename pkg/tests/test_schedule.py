import math

import numpy as np
import pytest
import torch

from tabdiff import numerics as nx
from tabdiff.errors import ScheduleError, ShapeError
from tabdiff.schedule import build_schedule, marginal_stats, q_sample, q_step


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(1000, 1e-4, 0.02)


def test_linear_schedule_invariants(schedule):
    assert schedule.betas.dtype == np.float64
    assert np.all((schedule.betas > 0) & (schedule.betas < 1))
    assert schedule.betas[0] == 1e-4 and math.isclose(schedule.betas[-1], 0.02)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.alpha_bar(1000) < 1e-2
    for t in range(1, 1001):
        mean, std = marginal_stats(t, schedule)
        assert abs(mean ** 2 + std ** 2 - 1) < 1e-6


def test_schedule_endpoints(schedule):
    assert schedule.alpha_bar(0) == 1.0
    assert math.isclose(schedule.alpha_bar(1), 1 - 1e-4)
    assert schedule.alpha_bar(1000) == pytest.approx(4.0e-5, rel=0.05)


@pytest.mark.parametrize("kw", [dict(T=0), dict(T=10, beta_start=0.0), dict(T=10, beta_start=0.1, beta_end=0.01),
                                dict(T=10, beta_end=1.0), dict(T=10, kind="cosine")])
def test_bad_schedules(kw):
    with pytest.raises(ScheduleError):
        build_schedule(**kw)


@pytest.mark.parametrize("t", [0, 1001, -3])
def test_timestep_out_of_range(schedule, t):
    with pytest.raises(ScheduleError):
        marginal_stats(t, schedule)
    with pytest.raises(ScheduleError):
        q_sample(torch.zeros(2), t, torch.zeros(2), schedule)


def test_q_sample_noise_free_at_zero_eps(schedule):
    z0 = torch.tensor([1.0, -2.0])
    z = q_sample(z0, 10, torch.zeros(2), schedule)
    assert torch.allclose(z, z0 * math.sqrt(schedule.alpha_bar(10)))


def test_q_sample_per_sample_timesteps_match_scalar(schedule):
    z0 = nx.random_normal((3, 4, 2, 2), 0)
    eps = nx.random_normal((3, 4, 2, 2), 1)
    ts = [1, 500, 1000]
    batched = q_sample(z0, ts, eps, schedule)
    for i, t in enumerate(ts):
        assert torch.allclose(batched[i], q_sample(z0[i], t, eps[i], schedule))


def test_q_sample_shape_errors(schedule):
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 3), 5, torch.zeros(3, 2), schedule)
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 3), [5, 6, 7], torch.zeros(2, 3), schedule)


@pytest.mark.parametrize("t", [10, 100, 1000])
def test_markov_chain_matches_closed_form_marginal(schedule, t):
    n, z0 = 10_000, 1.0
    with nx.float64_mode():
        z = torch.full((n,), z0, dtype=torch.float64)
        for s in range(1, t + 1):
            z = q_step(z, s, nx.random_normal((n,), nx.derive_seed(42, t, s)), schedule)
    mean, std = marginal_stats(t, schedule)
    emp_mean, emp_var = float(z.mean()), float(z.var())
    # Monte-Carlo bounds on the sample mean and sample variance
    assert abs(emp_mean - mean * z0) < 4 * std / math.sqrt(n)
    assert abs(emp_var - std ** 2) < 4 * std ** 2 * math.sqrt(2 / (n - 1))


@pytest.mark.parametrize("t", [1, 250, 1000])
def test_q_sample_from_zero_is_scaled_noise(schedule, t):
    eps = nx.random_normal((4, 8, 8), t)
    z = q_sample(torch.zeros_like(eps), t, eps, schedule)
    assert torch.equal(z, math.sqrt(1.0 - schedule.alpha_bar(t)) * eps)


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_q_sample_keeps_unit_variance(schedule, t):
    n = 100_000
    z = q_sample(nx.random_normal((n,), 1), t, nx.random_normal((n,), 2), schedule)
    assert abs(float(z.double().var()) - 1.0) < 0.05


def test_single_step_schedule():
    s = build_schedule(1, 1e-3, 0.02)
    assert s.betas.tolist() == [1e-3]
    assert s.alpha_bar(1) == 1 - 1e-3
    assert marginal_stats(1, s) == pytest.approx((math.sqrt(1 - 1e-3), math.sqrt(1e-3)), rel=1e-9)
    with pytest.raises(ScheduleError):
        marginal_stats(2, s)
