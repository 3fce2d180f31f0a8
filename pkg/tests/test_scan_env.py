import numpy as np
import pytest

from ctstop.ct_core import NoiseModel
from ctstop.errors import AngleRepeated, EpisodeExhausted
from ctstop.policy_net import avail_vector
from ctstop import scan_env
from ctstop.scan_env import (
    RewardSpec,
    ScanEnvironment,
    StepRecord,
    noise_model_for,
    simulate_noisy_target,
    simulate_target,
)


def _target(env, phantom, eta=0.05, seed=5):
    return simulate_target(phantom, noise_model_for(phantom, eta, seed, env.geom), env.geom)


def test_reset_gives_empty_state(env32, triangle32):
    state = env32.reset_target(_target(env32, triangle32))
    assert not state.image.any()
    assert state.mask == frozenset()
    assert state.step == 1


def test_reset_is_deterministic(env32, triangle32):
    a = _target(env32, triangle32)
    b = _target(env32, triangle32)
    np.testing.assert_array_equal(a.noisy_full.data, b.noisy_full.data)


def test_step_contract(env32, triangle32):
    state = env32.reset_target(_target(env32, triangle32))
    nxt, reward = env32.step(state, 37)
    assert nxt.mask == {37}
    assert reward == -0.5
    assert nxt.step == 2
    with pytest.raises(AngleRepeated):
        env32.step(nxt, 37)
    with pytest.raises(ValueError):
        env32.step(nxt, 180)


def test_acquisition_order_does_not_matter(env32, triangle32):
    s0 = env32.reset_target(_target(env32, triangle32))
    a, _ = env32.step(env32.step(s0, 10)[0], 20)
    env32._cache.clear()
    b, _ = env32.step(env32.step(s0, 20)[0], 10)
    np.testing.assert_array_equal(a.image, b.image)


def test_budget_of_one_forces_stop(geom32, triangle32):
    env = ScanEnvironment(geom32, RewardSpec(0.5), max_steps=1, sirt_iters=5)
    state = env.reset_target(_target(env, triangle32))
    nxt, _ = env.step(state, 0)
    assert env.forced_stop(nxt)
    with pytest.raises(EpisodeExhausted):
        env.step(nxt, 1)


def test_more_angles_rarely_hurt_on_clean_data(triangle32, geom32, rng):
    env = ScanEnvironment(geom32, RewardSpec(0.5), max_steps=180, sirt_iters=50)
    state = env.reset_target(_target(env, triangle32, eta=0.0))
    ok, total = 0, 0
    for theta in rng.permutation(180)[:20]:
        before = env.terminal_reward(state)
        state, _ = env.step(state, int(theta))
        ok += env.terminal_reward(state) >= before - 0.5
        total += 1
    assert ok / total >= 0.95


def test_terminal_reward_edges(env32, triangle32):
    target = _target(env32, triangle32, eta=0.0)
    state = env32.reset_target(target)
    assert np.isfinite(env32.terminal_reward(state))
    full = env32.acquire_all(list(range(0, 180, 45)))
    assert env32.terminal_reward(full) > env32.terminal_reward(state)
    assert env32.episode_return(3, 20.0) == pytest.approx(18.5)


def test_noise_sigma_uses_clean_full_sinogram(env32, triangle32):
    model = noise_model_for(triangle32, 0.05, 1, env32.geom)
    assert isinstance(model, NoiseModel)
    assert model.sigma > 0


def test_avail_vector_blocks_acquired_angles():
    avail = avail_vector([0, 5], 181)
    assert not avail[0] and not avail[5]
    assert avail[180]
    assert avail.sum() == 179


def test_reward_spec_rejects_bad_cost():
    with pytest.raises(ValueError):
        RewardSpec(cost_b=0.0)


def test_step_record_row(env32, triangle32):
    state = env32.reset_target(_target(env32, triangle32))
    nxt, reward = env32.step(state, 12)
    rec = StepRecord(state_before=nxt, theta=40, decision=0, reward_continue=reward, psnr_before=10.0,
                     psnr_after=12.5, td_error=0.25, components={"p_next": 0.3})
    row = rec.as_row(episode=7)
    assert (row["episode"], row["step"], row["theta"], row["reward"]) == (7, 2, 40, -0.5)
    assert row["p_next"] == 0.3
    with pytest.raises(AngleRepeated):
        StepRecord(state_before=nxt, theta=12, decision=1, reward_continue=reward, psnr_before=0.0, psnr_after=0.0)


def test_noisy_target_projects_once(env32, triangle32, monkeypatch):
    calls = []
    real_project = scan_env.project

    def counting(*args, **kwargs):
        calls.append(1)
        return real_project(*args, **kwargs)

    monkeypatch.setattr(scan_env, "project", counting)
    target = simulate_noisy_target(triangle32, 0.05, 5, env32.geom)
    assert len(calls) == 1
    monkeypatch.undo()
    np.testing.assert_array_equal(target.noisy_full.data, _target(env32, triangle32).noisy_full.data)
