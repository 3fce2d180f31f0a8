"""Desk-scale training runs at G=64. Hours on a CPU; run with `pytest -m slow`."""
import pandas as pd
import pytest
import torch

from ctstop.config import build_config
from ctstop.eval_harness import (
    condition_label,
    cost_trend_holds,
    evaluate_targets,
    noise_trend_holds,
    rl_beats_gr,
    summary_table,
    synthetic_targets,
)
from ctstop.phantom_gen import rotation_pool, sample_dataset
from ctstop.policy_net import N_ANGLES, build_network
from ctstop.rl_train import train_terminal
from ctstop.scan_env import ScanEnvironment

pytestmark = pytest.mark.slow

DESK = {
    "geometry.grid": 64,
    "noise.eta": 0.05,
    "train.episodes": 5000,
    "train.n_per_shape": 200,
    "train.checkpoint_every": 0,
    "eval.n_per_shape": 50,
    "seed": 0,
}


def _cfg(**overrides):
    return build_config({**DESK, **overrides})


def _trained(cost_b):
    cfg = _cfg(**{"reward.cost_b": cost_b})
    dataset = sample_dataset(cfg.seed, cfg.train.n_per_shape, cfg.geometry.grid, rotation_pool("train"))
    net = build_network(cfg.geometry.grid, N_ANGLES, cfg.network, seed=cfg.seed)
    return cfg, train_terminal(cfg, dataset, net).net


@pytest.fixture(scope="module")
def desk_summary():
    torch.set_num_threads(1)
    runs = []
    validation = sample_dataset(1, DESK["eval.n_per_shape"], DESK["geometry.grid"], rotation_pool("validation"))
    for cost_b in (0.5, 0.9):
        cfg, net = _trained(cost_b)
        env = ScanEnvironment.from_config(cfg)
        levels = (0.03, 0.05, 0.07) if cost_b == 0.5 else (0.05,)
        for eta in levels:
            targets = synthetic_targets(validation, env, eta, seed=cfg.seed)
            runs.append(evaluate_targets(net, env, targets, cost_b, f"eta{eta:g}", seed=cfg.seed))
    return summary_table(runs)


def _mean_angles(summary: pd.DataFrame, condition: str, shape: str) -> float:
    row = summary[(summary["condition"] == condition) & (summary["shape"] == shape)]
    return float(row["n_angles_mean"].iloc[0])


def test_higher_cost_stops_earlier(desk_summary):
    held = cost_trend_holds(desk_summary, condition_label(0.5, "eta0.05"), condition_label(0.9, "eta0.05"))
    assert set(held) == {"parallelogram", "triangle", "pentagon"}
    assert all(held.values()), held


def test_pentagon_needs_more_angles_than_parallelogram(desk_summary):
    cond = condition_label(0.5, "eta0.05")
    assert _mean_angles(desk_summary, cond, "pentagon") > _mean_angles(desk_summary, cond, "parallelogram")


def test_policy_matches_or_beats_golden_ratio(desk_summary):
    beats = rl_beats_gr(desk_summary, condition_label(0.5, "eta0.05"))
    assert beats["parallelogram"] and beats["triangle"], beats


def test_lower_noise_stops_earlier(desk_summary):
    held = noise_trend_holds(desk_summary, condition_label(0.5, "eta0.03"), condition_label(0.5, "eta0.07"))
    assert set(held) == {"parallelogram", "triangle", "pentagon"}
    assert all(held.values()), held


def test_training_prefix_is_reproducible():
    torch.set_num_threads(1)
    traces = []
    for _ in range(2):
        cfg = _cfg(**{"train.episodes": 200})
        dataset = sample_dataset(cfg.seed, cfg.train.n_per_shape, cfg.geometry.grid, rotation_pool("train"))
        net = build_network(cfg.geometry.grid, N_ANGLES, cfg.network, seed=cfg.seed)
        traces.append(train_terminal(cfg, dataset, net).trace_frame())
    pd.testing.assert_frame_equal(traces[0], traces[1])
