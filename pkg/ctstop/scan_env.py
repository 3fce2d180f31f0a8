"""Sequential scanning environment: the reconstruction is the belief state."""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .ct_core import Geometry, NoiseModel, Sinogram, add_noise, full_angle_reference, project, sirt_reconstruct
from .errors import AngleRepeated, EpisodeExhausted
from .logging_utils import get_logger
from .metrics import psnr
from .phantom_gen import Phantom, ShapeKind

logger = get_logger("scan_env")


@dataclass(frozen=True)
class RewardSpec:
    cost_b: float = 0.5
    terminal_metric: str = "psnr"

    def __post_init__(self):
        if not (self.cost_b > 0 and np.isfinite(self.cost_b)):
            raise ValueError("cost_b must be a positive finite number")


@dataclass
class ScanTarget:
    """What an episode scans: noisy rows for all angles plus the image PSNR is measured against."""
    target_id: str
    shape: str
    reference: np.ndarray
    noisy_full: Sinogram
    noise: Optional[NoiseModel] = None


@dataclass
class ReconState:
    image: np.ndarray
    mask: FrozenSet[int]
    step: int
    phantom_id: str

    @property
    def angles(self) -> Tuple[int, ...]:
        return tuple(sorted(self.mask))


@dataclass
class StepRecord:
    """One transition (x_k, theta_k, d_k, -b); `components` holds what the TD error was built from."""
    state_before: ReconState
    theta: int
    decision: int
    reward_continue: float
    psnr_before: float
    psnr_after: float
    td_error: Optional[float] = None
    components: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.theta in self.state_before.mask:
            raise AngleRepeated(f"step record for angle {self.theta}, which was already acquired")

    def as_row(self, episode: int) -> dict:
        row = {
            "episode": episode,
            "step": self.state_before.step,
            "theta": self.theta,
            "d": self.decision,
            "reward": self.reward_continue,
            "psnr_k": self.psnr_before,
            "psnr_next": self.psnr_after,
            "delta": self.td_error,
        }
        row.update(self.components)
        return row


def noise_model_for(phantom: Phantom, eta: float, seed: int, geom: Geometry) -> NoiseModel:
    clean = project(phantom.image, geom.all_angles(), geom)
    return NoiseModel.from_clean(clean, eta, seed)


def simulate_target(phantom: Phantom, noise: NoiseModel, geom: Geometry,
                    clean: Optional[Sinogram] = None) -> ScanTarget:
    if clean is None:
        clean = project(phantom.image, geom.all_angles(), geom)
    return ScanTarget(
        target_id=phantom.id,
        shape=ShapeKind(phantom.spec.kind).value,
        reference=phantom.image,
        noisy_full=add_noise(clean, noise, geom.n_angles_total),
        noise=noise,
    )


def simulate_noisy_target(phantom: Phantom, eta: float, seed: int, geom: Geometry) -> ScanTarget:
    """Same as simulate_target(phantom, noise_model_for(...)) with a single forward projection."""
    clean = project(phantom.image, geom.all_angles(), geom)
    return simulate_target(phantom, NoiseModel.from_clean(clean, eta, seed), geom, clean=clean)


def measured_target(target_id: str, shape: str, sino: Sinogram, geom: Geometry, iters: int = 150) -> ScanTarget:
    """Measured scans have no phantom; the 180-angle reconstruction is the reference."""
    reference = full_angle_reference(sino, geom, iters=iters)
    return ScanTarget(target_id=target_id, shape=shape, reference=reference, noisy_full=sino)


class ScanEnvironment:
    """One instance per episode worker; not safe for concurrent mutation."""

    def __init__(self, geom: Geometry, reward: RewardSpec, max_steps: int = 20, sirt_iters: int = 150,
                 relaxation: float = 1.0, cache_size: int = 64):
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        self.geom = geom
        self.reward = reward
        self.max_steps = max_steps
        self.sirt_iters = sirt_iters
        self.relaxation = relaxation
        self.target: Optional[ScanTarget] = None
        self._cache: "OrderedDict[FrozenSet[int], np.ndarray]" = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ScanEnvironment":
        return cls(
            Geometry.from_config(cfg.geometry),
            RewardSpec(cost_b=cfg.reward.cost_b),
            max_steps=cfg.reward.max_steps,
            sirt_iters=cfg.geometry.sirt_iters,
            relaxation=cfg.geometry.sirt_relaxation,
        )

    def reset(self, phantom: Phantom, noise: NoiseModel) -> ReconState:
        return self.reset_target(simulate_target(phantom, noise, self.geom))

    def reset_target(self, target: ScanTarget) -> ReconState:
        self.target = target
        self._cache.clear()
        logger.debug("Episode reset", extra={"event": "env_reset", "data": {"target": target.target_id, "shape": target.shape}})
        return ReconState(
            image=np.zeros((self.geom.grid, self.geom.grid)),
            mask=frozenset(),
            step=1,
            phantom_id=target.target_id,
        )

    def reconstruct(self, angles: Iterable[int]) -> np.ndarray:
        """Cold-start SIRT over exactly these angles, sorted so the result ignores acquisition order."""
        key = frozenset(int(a) for a in angles)
        if not key:
            return np.zeros((self.geom.grid, self.geom.grid))
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        rows = self.target.noisy_full.rows(sorted(key))
        image = sirt_reconstruct(rows, self.geom, iters=self.sirt_iters, relaxation=self.relaxation)
        self._cache[key] = image
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return image

    def step(self, state: ReconState, theta: int) -> Tuple[ReconState, float]:
        theta = int(theta)
        if theta in state.mask:
            raise AngleRepeated(f"angle {theta} already acquired")
        if not (0 <= theta < self.geom.n_angles_total):
            raise ValueError(f"angle {theta} outside [0, {self.geom.n_angles_total})")
        if state.step > self.max_steps:
            raise EpisodeExhausted(f"episode already acquired {len(state.mask)} of {self.max_steps} angles")
        mask = state.mask | {theta}
        nxt = ReconState(image=self.reconstruct(mask), mask=mask, step=state.step + 1, phantom_id=state.phantom_id)
        return nxt, -self.reward.cost_b

    def terminal_reward(self, state: ReconState, phantom: Optional[Phantom] = None) -> float:
        reference = phantom.image if phantom is not None else self.target.reference
        return psnr(state.image, reference).psnr

    def forced_stop(self, state: ReconState) -> bool:
        """True once the acquisition budget M is used up."""
        return len(state.mask) >= self.max_steps

    def acquire_all(self, angles: Sequence[int]) -> ReconState:
        """State after acquiring `angles`, built from scratch."""
        mask = frozenset(int(a) for a in angles)
        if len(mask) != len(angles):
            raise AngleRepeated(f"duplicate angles in {list(angles)}")
        return ReconState(image=self.reconstruct(mask), mask=mask, step=len(mask) + 1,
                          phantom_id=self.target.target_id)

    def episode_return(self, n_angles: int, final_psnr: float) -> float:
        return -self.reward.cost_b * n_angles + final_psnr
