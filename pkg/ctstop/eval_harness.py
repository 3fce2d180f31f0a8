"""Evaluation protocols: trained policy against the golden-ratio schedule at matched angle counts."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from tqdm import tqdm  # noqa: E402

from .baselines import gr_matched_psnr  # noqa: E402
from .config import ensure_dir  # noqa: E402
from .ct_core import Geometry  # noqa: E402
from .errors import ArchitectureMismatch, EmptyRunSet, ShapeMismatch  # noqa: E402
from .logging_utils import get_logger, Timer  # noqa: E402
from .phantom_gen import Phantom  # noqa: E402
from .policy_net import ActorCritic, N_ANGLES, TERMINATE_ACTION, forward, sample_action  # noqa: E402
from .scan_env import ScanEnvironment, ScanTarget, measured_target, simulate_noisy_target  # noqa: E402
from .storage import append_jsonl, load_sinogram, write_table  # noqa: E402

logger = get_logger("eval_harness")

EPISODE_COLUMNS = ["condition", "cost_b", "noise", "target_id", "shape", "mode", "n_angles", "psnr_rl",
                   "psnr_gr", "angles"]
SUMMARY_COLUMNS = ["shape", "condition", "episodes", "n_angles_mean", "n_angles_std", "psnr_rl_mean",
                   "psnr_rl_std", "psnr_gr_mean", "psnr_gr_std"]


@dataclass
class EpisodeRecord:
    target_id: str
    shape: str
    n_angles: int
    psnr_rl: float
    psnr_gr: Optional[float]
    angles: Tuple[int, ...]
    mode: str = "stochastic"

    def as_row(self, run: "EvalRun") -> Dict[str, object]:
        return {
            "condition": run.condition,
            "cost_b": run.cost_b,
            "noise": run.noise,
            "target_id": self.target_id,
            "shape": self.shape,
            "mode": self.mode,
            "n_angles": self.n_angles,
            "psnr_rl": self.psnr_rl,
            "psnr_gr": self.psnr_gr,
            "angles": " ".join(str(a) for a in self.angles),
        }


@dataclass
class EvalRun:
    checkpoint: str
    dataset: str
    cost_b: float
    noise: str
    condition: str
    records: List[EpisodeRecord] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.as_row(self) for r in self.records], columns=EPISODE_COLUMNS)


def condition_label(cost_b: float, noise: str) -> str:
    return f"b{cost_b:g}_{noise}"


def run_policy_episode(net: ActorCritic, env: ScanEnvironment, target: ScanTarget, mode: str = "stochastic",
                       rng: Optional[np.random.Generator] = None, decide_before: bool = False) -> EpisodeRecord:
    """Play one episode without learning.

    Greedy mode takes the argmax angle and stops once p > 0.5; stochastic mode samples both.
    Networks with a terminate action stop when that action is chosen. With `decide_before` the
    stop decision is drawn from the current reconstruction before the next angle, from the second angle on.
    """
    if net.arch.grid != env.geom.grid:
        raise ArchitectureMismatch(f"checkpoint was trained at G={net.arch.grid}, input has G={env.geom.grid}")
    if mode not in ("greedy", "stochastic"):
        raise ValueError("mode must be 'greedy' or 'stochastic'")
    greedy = mode == "greedy"
    rng = rng or np.random.default_rng(0)
    naive = net.arch.n_actions == N_ANGLES + 1

    def wants_stop(p: float) -> bool:
        return p > 0.5 if greedy else rng.random() < p

    state = env.reset_target(target)
    order: List[int] = []
    while True:
        out = forward(net, state.image, state.mask)
        if not naive and decide_before and order and wants_stop(out.term_prob):
            break
        action = sample_action(out.action_probs, rng, greedy=greedy)
        if naive and action == TERMINATE_ACTION:
            break
        state, _ = env.step(state, action)
        order.append(action)
        if env.forced_stop(state):
            break
        if not naive and not decide_before and wants_stop(out.term_prob):
            break
    return EpisodeRecord(target_id=target.target_id, shape=target.shape, n_angles=len(order),
                         psnr_rl=env.terminal_reward(state), psnr_gr=None, angles=tuple(order), mode=mode)


def evaluate_targets(net: ActorCritic, env: ScanEnvironment, targets: Sequence[ScanTarget], cost_b: float,
                     noise: str, mode: str = "stochastic", seed: int = 0, gr_offset: int = 0,
                     checkpoint: str = "", dataset: str = "", progress: bool = False,
                     episode_log: Optional[str] = None, decide_before: bool = False) -> EvalRun:
    """One record per target, each paired with the golden-ratio schedule of the same length.

    With `episode_log` set, every finished episode is appended to that jsonl file right away.
    """
    timer = Timer()
    rng = np.random.default_rng(seed)
    run = EvalRun(checkpoint=checkpoint, dataset=dataset, cost_b=cost_b, noise=noise,
                  condition=condition_label(cost_b, noise))
    for target in tqdm(targets, desc=run.condition, disable=not progress):
        rec = run_policy_episode(net, env, target, mode, rng, decide_before=decide_before)
        rec.psnr_gr = gr_matched_psnr(env, target, rec.n_angles, gr_offset)
        run.records.append(rec)
        if episode_log:
            append_jsonl(episode_log, [rec.as_row(run)])
    logger.info(
        "Evaluation finished",
        extra={"event": "eval_run", "data": {"condition": run.condition, "episodes": len(run.records),
                                            "mean_angles": float(np.mean([r.n_angles for r in run.records])) if run.records else 0.0,
                                            "ms": timer.elapsed_ms()}},
    )
    return run


def synthetic_targets(phantoms: Sequence[Phantom], env: ScanEnvironment, eta: float, seed: int) -> List[ScanTarget]:
    """Simulated noisy scans; each phantom gets its own noise seed."""
    rng = np.random.default_rng(seed)
    out = []
    for p in phantoms:
        out.append(simulate_noisy_target(p, eta, int(rng.integers(2**31 - 1)), env.geom))
    return out


# ----------------------------------------------------------------- summaries

def _population_std(s: pd.Series) -> float:
    values = s.dropna().to_numpy(dtype=float)
    return float(np.std(values)) if values.size else float("nan")


def summary_table(runs: Sequence[EvalRun]) -> pd.DataFrame:
    frames = [r.frame() for r in runs if r.records]
    if not frames:
        raise EmptyRunSet("no evaluation episodes to summarize")
    df = pd.concat(frames, ignore_index=True)
    grouped = df.groupby(["shape", "condition"], sort=True)
    out = grouped.agg(
        episodes=("n_angles", "size"),
        n_angles_mean=("n_angles", "mean"),
        n_angles_std=("n_angles", _population_std),
        psnr_rl_mean=("psnr_rl", "mean"),
        psnr_rl_std=("psnr_rl", _population_std),
        psnr_gr_mean=("psnr_gr", "mean"),
        psnr_gr_std=("psnr_gr", _population_std),
    ).reset_index()
    return out[SUMMARY_COLUMNS]


def cost_colour(cost_b: float) -> Tuple[float, float, float, float]:
    """Blues for costs 0.4-0.6, oranges for 0.7-0.9, darker for larger costs within each group."""
    if cost_b < 0.65:
        cmap, lo, hi = plt.get_cmap("Blues"), 0.4, 0.6
    else:
        cmap, lo, hi = plt.get_cmap("Oranges"), 0.7, 0.9
    t = float(np.clip((cost_b - lo) / (hi - lo), 0.0, 1.0))
    return cmap(0.45 + 0.5 * t)


def _scatter(df: pd.DataFrame, path: str, title: str) -> str:
    shapes = sorted(df["shape"].unique())
    fig, axes = plt.subplots(1, len(shapes), figsize=(4.5 * len(shapes), 4), squeeze=False)
    for ax, shape in zip(axes[0], shapes):
        part = df[df["shape"] == shape]
        for cost, grp in part.groupby("cost_b"):
            ax.scatter(grp["n_angles"], grp["psnr_rl"], s=10, alpha=0.6, color=cost_colour(float(cost)), label=f"-{cost:g}")
        gr = part.dropna(subset=["psnr_gr"]).groupby("n_angles")["psnr_gr"].mean()
        if len(gr):
            ax.scatter(gr.index, gr.values, marker="x", color="black", s=30, label="GR mean")
        ax.set_title(shape)
        ax.set_xlabel("number of angles")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def summarize(runs: Sequence[EvalRun], out_dir: str, group_by: str = "noise") -> pd.DataFrame:
    """Write summary.tsv, episodes.tsv and one scatter plot per noise level (all costs in one figure)."""
    if not runs:
        raise EmptyRunSet("no evaluation runs")
    summary = summary_table(runs)
    ensure_dir(out_dir)
    episodes = pd.concat([r.frame() for r in runs], ignore_index=True)
    write_table(os.path.join(out_dir, "episodes.tsv"), episodes)
    write_table(os.path.join(out_dir, "summary.tsv"), summary)
    for key, part in episodes.groupby(group_by):
        _scatter(part, os.path.join(out_dir, f"scatter_{key}.png"), f"{group_by} = {key}")
    logger.info("Summary written", extra={"event": "eval_summary", "data": {"dir": out_dir, "rows": len(summary)}})
    return summary


def _means_by_shape(summary: pd.DataFrame, condition: str, column: str = "n_angles_mean") -> Dict[str, float]:
    part = summary[summary["condition"] == condition]
    return {str(s): float(v) for s, v in zip(part["shape"], part[column])}


def noise_trend_holds(summary: pd.DataFrame, low_noise_condition: str, high_noise_condition: str) -> Dict[str, bool]:
    """Per shape: fewer angles at the lower noise level."""
    low = _means_by_shape(summary, low_noise_condition)
    high = _means_by_shape(summary, high_noise_condition)
    return {s: low[s] < high[s] for s in low if s in high}


def cost_trend_holds(summary: pd.DataFrame, cheap_condition: str, costly_condition: str) -> Dict[str, bool]:
    """Per shape: fewer angles at the larger per-angle cost."""
    cheap = _means_by_shape(summary, cheap_condition)
    costly = _means_by_shape(summary, costly_condition)
    return {s: costly[s] < cheap[s] for s in cheap if s in costly}


def rl_beats_gr(summary: pd.DataFrame, condition: str) -> Dict[str, bool]:
    part = summary[summary["condition"] == condition]
    return {str(s): bool(rl >= gr) for s, rl, gr in zip(part["shape"], part["psnr_rl_mean"], part["psnr_gr_mean"])}


def load_measured_targets(scans_dir: str, geom: Geometry, sirt_iters: int = 150) -> Dict[str, List[ScanTarget]]:
    """Rebinned sinogram containers grouped by emission current; the reference is the 180-angle SIRT image."""
    groups: Dict[str, List[ScanTarget]] = {}
    for header_path in sorted(glob.glob(os.path.join(scans_dir, "*.json"))):
        sino, header = load_sinogram(header_path)
        if sino.data.shape[1] != geom.n_bins:
            raise ShapeMismatch(f"{header_path} has {sino.data.shape[1]} bins, geometry expects {geom.n_bins}")
        stem = os.path.splitext(os.path.basename(header_path))[0]
        label = f"{header.get('current', 'unknown')}uA"
        groups.setdefault(label, []).append(
            measured_target(stem, str(header.get("shape", "unknown")), sino, geom, iters=sirt_iters))
    if not groups:
        raise EmptyRunSet(f"no sinogram containers in {scans_dir}")
    logger.info("Measured scans loaded",
                extra={"event": "measured_load", "data": {k: len(v) for k, v in groups.items()}})
    return groups


def plot_baseline_curves(curves: pd.DataFrame, path: str) -> str:
    """Mean PSNR against angle count, one line per policy, one panel per shape."""
    shapes = sorted(curves["shape"].unique())
    fig, axes = plt.subplots(1, len(shapes), figsize=(4.5 * len(shapes), 4), squeeze=False)
    for ax, shape in zip(axes[0], shapes):
        part = curves[curves["shape"] == shape]
        for policy, grp in part.groupby("policy"):
            mean = grp.groupby("n_angles")["psnr"].mean()
            ax.plot(mean.index, mean.values, marker=".", label=str(policy))
        ax.set_title(shape)
        ax.set_xlabel("number of angles")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
