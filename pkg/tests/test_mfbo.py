import math

import numpy as np
import pytest

from promptctl.errors import InsufficientBudget, SemanticError
from promptctl.mfbo import (
    Decision,
    GPConfig,
    HistoryEntry,
    KeyedNoise,
    MultiFidelityEnv,
    SequentialNoise,
    default_catalog,
    gp_posterior,
    ground_truth,
    objective_argmax,
    state_token_cost,
)


def test_ground_truth_reference_values():
    # frozen from direct evaluation of the closed form
    assert ground_truth(2.0) == pytest.approx(0.8895, abs=5e-4)
    assert ground_truth(5.8) == pytest.approx(1.284, abs=5e-4)


def test_ground_truth_rejects_out_of_domain():
    with pytest.raises(ValueError):
        ground_truth(-0.1)
    with pytest.raises(ValueError):
        ground_truth(10.5)


def test_argmax_near_dominant_mode():
    x_star, g_star = objective_argmax()
    assert abs(x_star - 5.8) < 0.3
    assert g_star >= ground_truth(5.8)


def test_surrogate_exact_at_full_fidelity():
    env = MultiFidelityEnv(noise=SequentialNoise(0))
    for x in (0.3, 2.0, 7.7):
        assert env.surrogate_eval(4, x) == ground_truth(x)


def test_surrogate_exact_when_eta_zero():
    env = MultiFidelityEnv(eta=0.0, noise=SequentialNoise(1))
    for index in (1, 2, 3, 4):
        assert env.surrogate_eval(index, 5.0) == ground_truth(5.0)


def test_surrogate_noise_scale_monte_carlo():
    env = MultiFidelityEnv(noise=SequentialNoise(42))
    draws = np.array([env.surrogate_eval(1, 3.0) for _ in range(10_000)])
    target = 0.15 * 0.75
    assert np.std(draws) == pytest.approx(target, rel=0.05)


def test_surrogate_unbiased():
    env = MultiFidelityEnv(noise=SequentialNoise(7))
    n = 100_000
    draws = np.array([env.surrogate_eval(1, 6.2) for _ in range(n)])
    se = 0.15 * 0.75 / math.sqrt(n)
    assert abs(np.mean(draws) - ground_truth(6.2)) < 3 * se


def test_lower_fidelity_has_larger_mae():
    env = MultiFidelityEnv(noise=SequentialNoise(3))
    for x in (1.0, 5.0, 9.0):
        maes = []
        for index in (1, 2, 3, 4):
            errs = [abs(env.surrogate_eval(index, x) - ground_truth(x)) for _ in range(4000)]
            maes.append(np.mean(errs))
        assert maes[0] > maes[1] > maes[2] > maes[3] == 0.0


def test_keyed_noise_is_query_determined():
    noise = KeyedNoise(11)
    a = noise(2, 4.25)
    b = noise(2, 4.25)
    assert a == b
    assert noise(3, 4.25) != a
    assert noise(2, 4.26) != a
    assert KeyedNoise(12)(2, 4.25) != a


def _gp_oracle(data, query, cfg):
    """Independent direct-formula GP: explicit matrix inverse."""
    xs = np.array([e.x for e in data])
    ys = np.array([e.y for e in data])
    noise = np.diag([cfg.noise_var.get(e.fidelity, 0.0) for e in data])

    def k(a, b):
        return cfg.signal_var * np.exp(-((a[:, None] - b[None, :]) ** 2) / (2 * cfg.lengthscale**2))

    kinv = np.linalg.inv(k(xs, xs) + noise + 1e-8 * np.eye(len(xs)))
    q = np.atleast_1d(np.asarray(query, dtype=float))
    ks = k(q, xs)
    mean = ks @ kinv @ ys
    var = cfg.signal_var - np.einsum("ij,jk,ik->i", ks, kinv, ks)
    return mean, np.sqrt(np.clip(var, 0, None))


def test_gp_prior_with_no_data():
    cfg = GPConfig(noise_var={})
    mean, std = gp_posterior([], 3.3, cfg)
    assert mean == 0.0
    assert std == pytest.approx(1.0)


def test_gp_interpolates_noise_free_observation():
    cfg = GPConfig(noise_var={4: 0.0})
    data = [HistoryEntry(x=2.5, y=1.7, fidelity=4, std=1.0)]
    mean, std = gp_posterior(data, 2.5, cfg)
    assert mean == pytest.approx(1.7, abs=1e-8)
    assert std <= 1e-4


def test_gp_matches_direct_formula_oracle():
    rng = np.random.default_rng(5)
    catalog = default_catalog()
    cfg = GPConfig.for_catalog(catalog)
    data = [
        HistoryEntry(x=float(rng.uniform(0, 10)), y=float(rng.normal()), fidelity=int(rng.integers(1, 5)), std=1.0)
        for _ in range(5)
    ]
    queries = np.linspace(0, 10, 23)
    mean, std = gp_posterior(data, queries, cfg)
    omean, ostd = _gp_oracle(data, queries, cfg)
    np.testing.assert_allclose(mean, omean, atol=1e-8)
    np.testing.assert_allclose(std, ostd, atol=1e-6)


def test_gp_std_bounded_by_prior():
    rng = np.random.default_rng(9)
    cfg = GPConfig.for_catalog(default_catalog())
    data = [
        HistoryEntry(x=float(rng.uniform(0, 10)), y=float(rng.normal()), fidelity=1, std=1.0)
        for _ in range(40)
    ]
    _, std = gp_posterior(data, np.linspace(0, 10, 101), cfg)
    assert np.all(std >= 0.0)
    assert np.all(std <= math.sqrt(cfg.signal_var) + 1e-6)


def test_gp_observation_never_increases_variance_at_point():
    cfg = GPConfig.for_catalog(default_catalog())
    data = [HistoryEntry(x=4.0, y=1.0, fidelity=1, std=1.0)]
    _, before = gp_posterior(data, 4.0, cfg)
    data2 = data + [HistoryEntry(x=4.0, y=1.05, fidelity=2, std=1.0)]
    _, after = gp_posterior(data2, 4.0, cfg)
    assert after <= before + 1e-9


def test_step_budget_accounting():
    env = MultiFidelityEnv(noise=SequentialNoise(0), budget=10.0)
    state = env.initial_state()
    state = env.step(state, Decision(4, 5.0))
    assert state.remaining_budget == 6.0
    assert state.history[-1].fidelity == 4
    assert state.token_cost == state_token_cost(1)
    state = env.step(state, Decision(2, 1.0))
    assert state.remaining_budget == 4.0


def test_step_insufficient_budget():
    env = MultiFidelityEnv(noise=SequentialNoise(0), budget=3.0)
    state = env.initial_state()
    with pytest.raises(InsufficientBudget):
        env.step(state, Decision(4, 5.0))


def test_step_rejects_bad_decisions():
    env = MultiFidelityEnv(noise=SequentialNoise(0))
    state = env.initial_state()
    with pytest.raises(SemanticError):
        env.step(state, Decision(9, 5.0))
    with pytest.raises(SemanticError):
        env.step(state, Decision(1, 11.0))


def test_budget_conservation_along_trajectory():
    env = MultiFidelityEnv(noise=SequentialNoise(4), budget=40.0)
    state = env.initial_state()
    rng = np.random.default_rng(0)
    while state.remaining_budget >= 4.0:
        idx = int(rng.integers(1, 5))
        state = env.step(state, Decision(idx, float(rng.uniform(0, 10))))
    spent = sum(state.model(e.fidelity).cost for e in state.history)
    assert state.initial_budget == state.remaining_budget + spent + state.wasted_cost


def test_charge_wasted_tracks_separately():
    env = MultiFidelityEnv(noise=SequentialNoise(0), budget=5.0)
    state = env.initial_state()
    state = env.charge_wasted(state, 1.0)
    assert state.remaining_budget == 4.0
    assert state.wasted_cost == 1.0
    assert len(state.history) == 0


def test_regret_metrics_at_optimum_and_empty():
    env = MultiFidelityEnv(noise=SequentialNoise(0))
    x_star, g_star = objective_argmax(env.domain)
    state = env.initial_state()
    metrics = env.regret_metrics(state)
    assert not metrics.defined
    assert metrics.num_points == 0
    state = env.step(state, Decision(4, x_star))
    metrics = env.regret_metrics(state)
    assert metrics.defined
    assert metrics.x_regret == pytest.approx(0.0, abs=1e-12)
    assert metrics.f_regret == pytest.approx(0.0, abs=1e-12)
    assert metrics.num_points == 1


def test_regret_metrics_single_origin_point():
    env = MultiFidelityEnv(noise=SequentialNoise(0))
    state = env.step(env.initial_state(), Decision(4, 0.0))
    _, g_star = objective_argmax(env.domain)
    metrics = env.regret_metrics(state)
    assert metrics.f_regret == pytest.approx(g_star - ground_truth(0.0))
    assert metrics.num_points == 1


def test_best_error_tracks_best_observation():
    env = MultiFidelityEnv(noise=SequentialNoise(0))
    _, g_star = objective_argmax(env.domain)
    state = env.initial_state()
    assert state.best_error == pytest.approx(g_star)
    state = env.step(state, Decision(4, 5.8))
    assert state.best_error == pytest.approx(g_star - ground_truth(5.8))
