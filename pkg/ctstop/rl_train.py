"""Online Actor-Critic training: naive stopping (terminate action) and the separate terminal policy."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union
import os

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import RunConfig, ensure_dir
from .ct_core import Geometry
from .logging_utils import get_logger, Timer
from .phantom_gen import Phantom
from .policy_net import (
    ActorCritic,
    N_ANGLES,
    TERMINATE_ACTION,
    UpdateSample,
    add_grads,
    apply_update,
    forward,
    loss_and_grads,
    make_optimizer,
    optimizer_step_count,
    sample_action,
)
from .scan_env import ScanEnvironment, ScanTarget, StepRecord, simulate_noisy_target
from .storage import save_checkpoint, write_table

logger = get_logger("rl_train")

TRACE_COLUMNS = ["episode", "phantom_id", "shape", "n_angles", "n_decisions", "final_psnr", "stop_state_psnr",
                 "episode_return", "mean_abs_td"]


@dataclass(frozen=True)
class TDRecord:
    delta: float
    target: float
    variant: str


def td_error_naive(reward: float, psnr_next: float, v_k: float, v_next: float, terminated: bool) -> TDRecord:
    """`reward` is the signed per-step reward -b."""
    target = reward + (psnr_next if terminated else v_next)
    return TDRecord(delta=target - v_k, target=target, variant="naive")


def td_error_terminal(reward: float, p_next: float, psnr_next: float, vc_k: float, vc_next: float) -> TDRecord:
    """delta = -b + (1 - p') V_C(x') + p' PSNR(x') - V_C(x); arrays broadcast elementwise."""
    if not np.all((np.asarray(p_next) >= 0.0) & (np.asarray(p_next) <= 1.0)):
        raise ValueError(f"termination probability {p_next} outside [0, 1]")
    target = reward + (1.0 - p_next) * vc_next + p_next * psnr_next
    return TDRecord(delta=target - vc_k, target=target, variant="terminal")


@dataclass
class TrainResult:
    net: ActorCritic
    optimizer: torch.optim.Optimizer
    trace: List[Dict[str, object]] = field(default_factory=list)
    steps: List[Dict[str, object]] = field(default_factory=list)
    step_count: int = 0
    last_episode: int = 0

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=TRACE_COLUMNS)


class _Learner:
    """Online mode applies each sample immediately; synchronous mode sums until `flush`."""

    def __init__(self, net: ActorCritic, optimizer: torch.optim.Optimizer, variant: str, cfg: RunConfig):
        self.net = net
        self.optimizer = optimizer
        self.variant = variant
        self.opt_cfg = cfg.optimizer
        self.online = cfg.train.sync_workers == 1
        self._pending: List[UpdateSample] = []
        self.step_count = optimizer_step_count(optimizer)

    def observe(self, sample: UpdateSample) -> None:
        if self.online:
            _, grads = loss_and_grads(self.net, [sample], self.variant, self.opt_cfg)
            self.step_count = apply_update(self.net, grads, self.optimizer)
        else:
            self._pending.append(sample)

    def flush(self) -> None:
        if not self._pending:
            return
        total = None
        for sample in self._pending:
            _, grads = loss_and_grads(self.net, [sample], self.variant, self.opt_cfg)
            total = add_grads(total, grads)
        self._pending.clear()
        self.step_count = apply_update(self.net, total, self.optimizer)


TargetSource = Union[Sequence[Phantom], Sequence[ScanTarget]]


def _draw_target(dataset: TargetSource, rng: np.random.Generator, eta: float, geom: Geometry) -> ScanTarget:
    item = dataset[int(rng.integers(len(dataset)))]
    if isinstance(item, ScanTarget):
        return item
    noise_seed = int(rng.integers(2**31 - 1))
    return simulate_noisy_target(item, eta, noise_seed, geom)


def _trace_row(episode: int, target: ScanTarget, n_angles: int, n_decisions: int, final_psnr: float,
               stop_psnr: float, ret: float, deltas: List[float]) -> Dict[str, object]:
    return {
        "episode": episode,
        "phantom_id": target.target_id,
        "shape": target.shape,
        "n_angles": n_angles,
        "n_decisions": n_decisions,
        "final_psnr": final_psnr,
        "stop_state_psnr": stop_psnr,
        "episode_return": ret,
        "mean_abs_td": float(np.mean(np.abs(deltas))) if deltas else 0.0,
    }


def run_naive_episode(env: ScanEnvironment, net: ActorCritic, target: ScanTarget, rng: np.random.Generator,
                      learner: Optional[_Learner], episode: int = 0,
                      step_log: Optional[List[Dict[str, object]]] = None) -> Dict[str, object]:
    """Terminate action appended to the angle set; actor and critic updated after every action."""
    b = env.reward.cost_b
    state = env.reset_target(target)
    deltas: List[float] = []
    n_actions = 0
    while True:
        out_k = forward(net, state.image, state.mask)
        action = sample_action(out_k.action_probs, rng)
        n_actions += 1
        if action == TERMINATE_ACTION:
            nxt = state
            terminated = True
            v_next = out_k.value
        else:
            nxt, _ = env.step(state, action)
            terminated = env.forced_stop(nxt)
            v_next = forward(net, nxt.image, nxt.mask).value
        psnr_next = env.terminal_reward(nxt)
        td = td_error_naive(-b, psnr_next, out_k.value, v_next, terminated)
        deltas.append(td.delta)
        if step_log is not None:
            step_log.append({"episode": episode, "step": state.step, "action": action, "reward": -b,
                             "psnr_next": psnr_next, "v_k": out_k.value, "v_next": v_next,
                             "terminated": terminated, "delta": td.delta, "target": td.target})
        if learner is not None:
            learner.observe(UpdateSample(image=state.image, mask=tuple(state.mask), action=action,
                                         advantage=td.delta, value_target=td.target))
        state = nxt
        if terminated:
            break
    final = env.terminal_reward(state)
    n_angles = len(state.mask)
    return _trace_row(episode, target, n_angles, n_actions, final, final, -b * n_actions + final, deltas)


def run_terminal_episode(env: ScanEnvironment, net: ActorCritic, target: ScanTarget, rng: np.random.Generator,
                         learner: Optional[_Learner], cfg: RunConfig, episode: int = 0,
                         step_log: Optional[List[Dict[str, object]]] = None) -> Dict[str, object]:
    """One episode with the separate terminal policy.

    Default ordering: acquire theta_k, then draw d_k ~ Bernoulli(p(x_k)); d is forced to 1 once
    M angles are acquired. With `decide_before_acquire` the draw happens first, from k = 2 on.
    """
    before = cfg.train.decide_before_acquire
    skip_forced = cfg.train.skip_forced_terminal_update
    state = env.reset_target(target)
    deltas: List[float] = []
    stop_psnr = None
    while True:
        out_k = forward(net, state.image, state.mask)
        psnr_k = env.terminal_reward(state)
        if before and state.step >= 2:
            if rng.random() < out_k.term_prob:
                if learner is not None:
                    learner.observe(UpdateSample(image=state.image, mask=tuple(state.mask), action=0,
                                                 advantage=0.0, value_target=out_k.value,
                                                 term_advantage=psnr_k - out_k.value, actor_active=False))
                stop_psnr = psnr_k
                break
        theta = sample_action(out_k.action_probs, rng)
        nxt, reward = env.step(state, theta)
        out_next = forward(net, nxt.image, nxt.mask)
        psnr_next = env.terminal_reward(nxt)
        forced = env.forced_stop(nxt)
        # no decision remains after the budget is spent, so the next state terminates surely
        p_next = 1.0 if forced else out_next.term_prob
        td = td_error_terminal(reward, p_next, psnr_next, out_k.value, out_next.value)
        deltas.append(td.delta)

        if before:
            term_active = state.step >= 2
            stop = forced
        else:
            stop = True if forced else bool(rng.random() < out_k.term_prob)
            term_active = not (forced and skip_forced)
        if step_log is not None:
            record = StepRecord(state_before=state, theta=theta, decision=int(stop), reward_continue=reward,
                                psnr_before=psnr_k, psnr_after=psnr_next, td_error=td.delta,
                                components={"p_next": p_next, "vc_k": out_k.value, "vc_next": out_next.value,
                                            "target": td.target})
            step_log.append(record.as_row(episode))
        if learner is not None:
            learner.observe(UpdateSample(image=state.image, mask=tuple(state.mask), action=theta,
                                         advantage=td.delta, value_target=td.target,
                                         term_advantage=psnr_k - out_k.value, term_active=term_active))
        if stop:
            stop_psnr = psnr_k
            state = nxt
            break
        state = nxt
    final = env.terminal_reward(state)
    n_angles = len(state.mask)
    if before:
        stop_psnr = final
    return _trace_row(episode, target, n_angles, n_angles, final, stop_psnr, env.episode_return(n_angles, final), deltas)


def _train(variant: str, cfg: RunConfig, dataset: TargetSource, net: ActorCritic,
           optimizer: Optional[torch.optim.Optimizer] = None, env: Optional[ScanEnvironment] = None,
           start_episode: int = 0, run_dir: Optional[str] = None, keep_steps: bool = False,
           progress: bool = False) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    expected = N_ANGLES + 1 if variant == "naive" else N_ANGLES
    if net.arch.n_actions != expected:
        raise ValueError(f"{variant} training needs {expected} actions, network has {net.arch.n_actions}")
    env = env or ScanEnvironment.from_config(cfg)
    optimizer = optimizer or make_optimizer(net, cfg.optimizer)
    learner = _Learner(net, optimizer, variant, cfg)
    rng = np.random.default_rng([cfg.seed, start_episode])
    torch.manual_seed(cfg.seed + start_episode)
    result = TrainResult(net=net, optimizer=optimizer, last_episode=start_episode)
    step_log = result.steps if keep_steps else None
    workers = cfg.train.sync_workers
    end = start_episode + cfg.train.episodes
    timer = Timer()
    window = Timer()
    logger.info(
        "Training started",
        extra={"event": "train_start", "data": {"variant": variant, "episodes": cfg.train.episodes, "start": start_episode,
                                               "cost_b": cfg.reward.cost_b, "max_steps": cfg.reward.max_steps,
                                               "sync_workers": workers}},
    )
    for episode in tqdm(range(start_episode + 1, end + 1), desc=f"train-{variant}", disable=not progress):
        target = _draw_target(dataset, rng, cfg.noise.eta, env.geom)
        if variant == "naive":
            row = run_naive_episode(env, net, target, rng, learner, episode, step_log)
        else:
            row = run_terminal_episode(env, net, target, rng, learner, cfg, episode, step_log)
        result.trace.append(row)
        if workers > 1 and (episode - start_episode) % workers == 0:
            learner.flush()
        result.last_episode = episode
        if episode % cfg.train.trace_window == 0:
            recent = result.trace[-cfg.train.trace_window:]
            logger.info(
                "Training window",
                extra={"event": "train_window", "data": {
                    "episode": episode,
                    "mean_angles": float(np.mean([r["n_angles"] for r in recent])),
                    "mean_psnr": float(np.mean([r["final_psnr"] for r in recent])),
                    "ms": window.elapsed_ms(),
                }},
            )
            window = Timer()
        if run_dir and cfg.train.checkpoint_every and episode % cfg.train.checkpoint_every == 0:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"episode_{episode:06d}.pt"), net, optimizer,
                            step_count=learner.step_count, episode=episode, variant=variant)
    learner.flush()
    result.step_count = learner.step_count
    if run_dir:
        ensure_dir(run_dir)
        save_checkpoint(os.path.join(run_dir, "checkpoint.pt"), net, optimizer, step_count=result.step_count,
                        episode=result.last_episode, variant=variant)
        write_table(os.path.join(run_dir, "train_trace.tsv"), result.trace, columns=TRACE_COLUMNS)
        write_table(os.path.join(run_dir, "train_windows.tsv"), aggregate_trace(result.trace, cfg.train.trace_window))
    logger.info(
        "Training finished",
        extra={"event": "train_done", "data": {"variant": variant, "episodes": len(result.trace),
                                              "updates": result.step_count, "ms": timer.elapsed_ms()}},
    )
    return result


def train_naive(cfg: RunConfig, dataset: TargetSource, net: ActorCritic, **kwargs) -> TrainResult:
    """Naive stopping with 181 actions; index 180 terminates without acquiring."""
    return _train("naive", cfg, dataset, net, **kwargs)


def train_terminal(cfg: RunConfig, dataset: TargetSource, net: ActorCritic, **kwargs) -> TrainResult:
    return _train("terminal", cfg, dataset, net, **kwargs)


def aggregate_trace(trace: Union[pd.DataFrame, Sequence[Dict[str, object]]], window: int = 1000) -> pd.DataFrame:
    """Mean and population variance of the angle count per shape per block of `window` episodes."""
    df = trace if isinstance(trace, pd.DataFrame) else pd.DataFrame(list(trace), columns=TRACE_COLUMNS)
    if df.empty:
        return pd.DataFrame(columns=["window_end", "shape", "episodes", "mean_angles", "var_angles", "mean_psnr"])
    df = df.assign(window_end=((df["episode"] - 1) // window + 1) * window)
    grouped = df.groupby(["window_end", "shape"], sort=True)
    out = grouped.agg(
        episodes=("n_angles", "size"),
        mean_angles=("n_angles", "mean"),
        var_angles=("n_angles", lambda s: float(np.var(s))),
        mean_psnr=("final_psnr", "mean"),
    ).reset_index()
    return out


def mean_angles_by_shape(trace: Union[pd.DataFrame, Sequence[Dict[str, object]]], last: Optional[int] = None) -> Dict[str, float]:
    df = trace if isinstance(trace, pd.DataFrame) else pd.DataFrame(list(trace), columns=TRACE_COLUMNS)
    if last is not None:
        df = df.tail(last)
    return {str(k): float(v) for k, v in df.groupby("shape")["n_angles"].mean().items()}
