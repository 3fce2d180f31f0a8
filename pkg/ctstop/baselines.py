"""Non-learned angle schedules: golden ratio, uniform spacing and greedy exhaustive search."""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import DuplicateAngle
from .logging_utils import get_logger, Timer
from .scan_env import ScanEnvironment, ScanTarget

logger = get_logger("baselines")

N_ANGLES = 180
GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0
GOLDEN_INCREMENT = N_ANGLES / GOLDEN_RATIO  # ~111.246 degrees


class PolicyKind(str, Enum):
    GOLDEN_RATIO = "golden_ratio"
    UNIFORM = "uniform"
    GREEDY = "greedy"


@dataclass
class AngleSequence:
    policy_kind: PolicyKind
    angles: Tuple[int, ...]
    psnr: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.angles = tuple(int(a) for a in self.angles)
        if len(set(self.angles)) != len(self.angles):
            raise DuplicateAngle(f"{self.policy_kind.value} sequence repeats an angle: {self.angles}")
        if any(not (0 <= a < N_ANGLES) for a in self.angles):
            raise ValueError(f"{self.policy_kind.value} sequence leaves [0, {N_ANGLES})")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _nearest_unused(angle: int, used: set) -> int:
    """Nearest free integer angle on the 180-degree circle; ties go to the larger angle."""
    if angle not in used:
        return angle
    for d in range(1, N_ANGLES):
        for cand in ((angle + d) % N_ANGLES, (angle - d) % N_ANGLES):
            if cand not in used:
                return cand
    raise ValueError("all angles are in use")


def _check_count(n: int, lo: int = 0) -> None:
    if not (lo <= n <= N_ANGLES):
        raise ValueError(f"angle count {n} outside [{lo}, {N_ANGLES}]")


def golden_ratio_sequence(n: int, offset: int = 0) -> AngleSequence:
    """theta_k = round(k * 180 / phi) + offset (mod 180), collisions moved to the nearest unused angle."""
    _check_count(n)
    used: set = set()
    angles: List[int] = []
    for k in range(n):
        a = _nearest_unused((_round_half_up(k * GOLDEN_INCREMENT) + offset) % N_ANGLES, used)
        used.add(a)
        angles.append(a)
    return AngleSequence(PolicyKind.GOLDEN_RATIO, tuple(angles))


def uniform_sequence(n: int) -> AngleSequence:
    """round(i * 180 / n) for i < n; not prefix-consistent in n."""
    _check_count(n, lo=1)
    used: set = set()
    angles: List[int] = []
    for i in range(n):
        a = _nearest_unused(_round_half_up(i * N_ANGLES / n) % N_ANGLES, used)
        used.add(a)
        angles.append(a)
    return AngleSequence(PolicyKind.UNIFORM, tuple(angles))


def psnr_for_sequence(env: ScanEnvironment, target: ScanTarget, angles: Sequence[int]) -> List[float]:
    """PSNR after each prefix of `angles` (cold-start reconstructions)."""
    env.reset_target(target)
    out = []
    for k in range(1, len(angles) + 1):
        state = env.acquire_all(angles[:k])
        out.append(env.terminal_reward(state))
    return out


def greedy_exhaustive(env: ScanEnvironment, target: ScanTarget, n: int, progress: bool = False) -> AngleSequence:
    """Each step adds the unused angle whose reconstruction scores highest; ties go to the smallest angle."""
    _check_count(n, lo=1)
    timer = Timer()
    env.reset_target(target)
    chosen: List[int] = []
    curve: List[float] = []
    for _ in tqdm(range(n), desc="greedy", disable=not progress):
        best_angle, best_score = None, -np.inf
        for a in range(N_ANGLES):
            if a in chosen:
                continue
            score = env.terminal_reward(env.acquire_all(chosen + [a]))
            if score > best_score:
                best_angle, best_score = a, score
        chosen.append(best_angle)
        curve.append(best_score)
    logger.info("Greedy search finished",
                extra={"event": "greedy", "data": {"target": target.target_id, "n": n, "ms": timer.elapsed_ms()}})
    return AngleSequence(PolicyKind.GREEDY, tuple(chosen), psnr=curve)


def gr_matched_psnr(env: ScanEnvironment, target: ScanTarget, n_angles: int, offset: int = 0) -> Optional[float]:
    """PSNR of the golden-ratio schedule with the same number of angles as a policy episode."""
    if n_angles == 0:
        return None
    seq = golden_ratio_sequence(n_angles, offset)
    env.reset_target(target)
    return env.terminal_reward(env.acquire_all(seq.angles))


def baseline_curves(env: ScanEnvironment, target: ScanTarget, n_max: int, include_greedy: bool = True,
                    offset: int = 0) -> pd.DataFrame:
    """PSNR against angle count for uniform, golden-ratio and (optionally) greedy selection."""
    rows = []
    for n in range(1, n_max + 1):
        uni = uniform_sequence(n)
        env.reset_target(target)
        rows.append({"target": target.target_id, "shape": target.shape, "policy": PolicyKind.UNIFORM.value,
                     "n_angles": n, "psnr": env.terminal_reward(env.acquire_all(uni.angles))})
    gr = golden_ratio_sequence(n_max, offset)
    for n, value in enumerate(psnr_for_sequence(env, target, gr.angles), start=1):
        rows.append({"target": target.target_id, "shape": target.shape, "policy": PolicyKind.GOLDEN_RATIO.value,
                     "n_angles": n, "psnr": value})
    if include_greedy:
        greedy = greedy_exhaustive(env, target, n_max)
        for n, value in enumerate(greedy.psnr, start=1):
            rows.append({"target": target.target_id, "shape": target.shape, "policy": PolicyKind.GREEDY.value,
                         "n_angles": n, "psnr": value})
    return pd.DataFrame(rows, columns=["target", "shape", "policy", "n_angles", "psnr"])
