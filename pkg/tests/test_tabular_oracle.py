import dataclasses

import numpy as np
import pytest

from ctstop.tabular_oracle import (
    TabularMDP,
    TabularPolicies,
    convergence_errors,
    enumerate_objective,
    estimator_check,
    exact_continuation_values,
    exact_gradients,
    exact_objective,
    identity_error,
    policy_after,
    random_mdp,
    random_policies,
    relative_error,
    run_oracle_suite,
    sampled_advantage,
    train_tabular_naive,
    train_tabular_terminal,
)


def _chain(cost_b=0.5):
    # 0 -> 1 -> 2 -> 2 with a single action
    t = np.zeros((3, 1, 3))
    t[0, 0, 1] = t[1, 0, 2] = t[2, 0, 2] = 1.0
    return TabularMDP(transition=t, psnr=np.array([10.0, 20.0, 30.0]), cost_b=cost_b, horizon=2)


def test_always_stop_returns_first_psnr():
    mdp = _chain()
    pol = TabularPolicies(np.zeros((3, 1)), np.full(3, 50.0))
    assert exact_objective(mdp, pol) == pytest.approx(10.0)


def test_never_stop_runs_to_horizon():
    mdp = _chain(cost_b=0.5)
    pol = TabularPolicies(np.zeros((3, 1)), np.full(3, -50.0))
    assert exact_objective(mdp, pol) == pytest.approx(-2 * 0.5 + 30.0)


def test_recursion_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3)
        pol = random_policies(rng, mdp)
        assert abs(exact_objective(mdp, pol) - enumerate_objective(mdp, pol)) < 1e-12


def test_identities_hold_on_random_mdps():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mdp = random_mdp(rng, n_states=int(rng.integers(2, 13)), n_actions=int(rng.integers(1, 5)),
                         horizon=int(rng.integers(1, 6)))
        assert identity_error(mdp, random_policies(rng, mdp)) < 1e-12


def test_equal_q_values_give_zero_advantage():
    rng = np.random.default_rng(2)
    row = rng.dirichlet(np.ones(3), size=3)
    t = np.stack([row, row], axis=1)
    mdp = TabularMDP(transition=t, psnr=np.array([12.0, 25.0, 31.0]), cost_b=0.3, horizon=3)
    vals = exact_continuation_values(mdp, TabularPolicies(np.zeros((3, 2)), rng.standard_normal(3)))
    np.testing.assert_allclose(vals.advantage, 0.0, atol=1e-12)


def test_sure_stop_next_makes_q_one_step_lookahead():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, n_states=4, n_actions=3, horizon=3, cost_b=0.7)
    pol = TabularPolicies(rng.standard_normal((4, 3)), np.full(4, 50.0))
    vals = exact_continuation_values(mdp, pol)
    np.testing.assert_allclose(vals.q[0], -0.7 + mdp.transition @ mdp.psnr, rtol=1e-12)


def test_sampled_td_error_estimates_advantage():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3)
    pol = random_policies(rng, mdp)
    exact = exact_continuation_values(mdp, pol).advantage
    for k, x, theta in ((1, 0, 0), (2, 1, 1), (3, 2, 0)):
        mean, se = sampled_advantage(mdp, pol, k, x, theta, 100_000, np.random.default_rng(k))
        assert abs(mean - exact[k - 1, x, theta]) <= 3 * se


def test_unrolled_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3)
    unrolled, fd = exact_gradients(mdp, random_policies(rng, mdp))
    assert relative_error(unrolled.flat(), fd.flat()) < 1e-6


def test_stop_gradient_follows_the_stopping_rule():
    rng = np.random.default_rng(6)
    for _ in range(10):
        mdp = random_mdp(rng, n_states=4, n_actions=2, horizon=1)
        pol = random_policies(rng, mdp)
        gap = mdp.psnr[mdp.start] - exact_continuation_values(mdp, pol).cont[0, mdp.start]
        grad = exact_gradients(mdp, pol)[0].term[mdp.start]
        assert np.sign(grad) == np.sign(gap)


def test_unreachable_state_has_zero_gradient():
    rng = np.random.default_rng(7)
    t = np.zeros((3, 2, 3))
    t[0] = [[0.4, 0.6, 0.0], [0.9, 0.1, 0.0]]
    t[1] = [[0.5, 0.5, 0.0], [0.2, 0.8, 0.0]]
    t[2] = [[0.0, 0.0, 1.0], [0.3, 0.3, 0.4]]
    mdp = TabularMDP(transition=t, psnr=np.array([15.0, 22.0, 35.0]), cost_b=0.5, horizon=4)
    unrolled, fd = exact_gradients(mdp, random_policies(rng, mdp))
    assert np.all(unrolled.actor[2] == 0.0) and unrolled.term[2] == 0.0
    np.testing.assert_allclose(fd.actor[2], 0.0, atol=1e-9)


def test_estimators_agree_with_exact_gradients():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3)
    check = estimator_check(mdp, random_policies(rng, mdp), 100_000, seed=1)
    assert check.passed
    with pytest.raises(ValueError):
        estimator_check(mdp, random_policies(rng, mdp), 1_000)


def test_estimator_error_shrinks_with_more_trajectories():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3)
    errors = convergence_errors(mdp, random_policies(rng, mdp))
    assert errors[2] < errors[0]


def test_small_oracle_suite():
    report = run_oracle_suite(n_mdps=3, n_trajectories=20_000, seed=0, max_states=3, max_actions=2, max_horizon=3)
    assert len(report.mdps) == 3
    for r in report.mdps:
        assert r.recursion_vs_enumeration < 1e-12
        assert r.identity_error < 1e-12
        assert r.fd_rel_error < 1e-6
    assert report.passed
    assert report.to_text().endswith("PASS")
    loose = dataclasses.replace(report.mdps[0], identity_error=5e-12)
    assert not loose.passed
    assert not dataclasses.replace(report.mdps[0], recursion_vs_enumeration=5e-12).passed


@pytest.mark.slow
def test_full_oracle_suite():
    assert run_oracle_suite(n_mdps=20, n_trajectories=100_000, seed=0).passed


def test_huge_cost_teaches_immediate_termination():
    rng = np.random.default_rng(10)
    mdp = random_mdp(rng, n_states=3, n_actions=2, horizon=3, cost_b=100.0)
    run = train_tabular_naive(mdp, episodes=2000, seed=0)
    assert policy_after(run)["actor"][mdp.start, mdp.n_actions] > 0.5


def test_tabular_terminal_training_respects_horizon():
    rng = np.random.default_rng(11)
    mdp = random_mdp(rng, n_states=4, n_actions=2, horizon=3)
    run = train_tabular_terminal(mdp, episodes=200, seed=0)
    assert len(run.lengths) == 200
    assert all(0 <= n <= mdp.horizon for n in run.lengths)
    assert policy_after(run)["stop"].shape == (4,)
