"""Shared-encoder Actor-Critic with angle, value and terminal heads."""
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig, OptimizerConfig, FULL_GRID
from .errors import ArchitectureMismatch, MissingTarget, ShapeMismatch
from .logging_utils import get_logger

logger = get_logger("policy_net")

N_ANGLES = 180
TERMINATE_ACTION = N_ANGLES  # extra action index of the naive variant


def default_pools(grid: int, n_blocks: int) -> Tuple[int, ...]:
    """2/2/4 at the full grid (240 -> 7x7x48 = 2352 features); 2 everywhere otherwise."""
    pools = [2] * n_blocks
    if grid == FULL_GRID and n_blocks == 3:
        pools[-1] = 4
    return tuple(pools)


@dataclass(frozen=True)
class Architecture:
    grid: int
    n_actions: int
    channels: Tuple[int, ...] = (12, 24, 48)
    pools: Tuple[int, ...] = (2, 2, 4)
    groups: int = 4
    leaky_slope: float = 0.2
    critic_hidden: Optional[int] = None
    dtype: str = "float32"

    @classmethod
    def from_config(cls, grid: int, n_actions: int, cfg: NetworkConfig) -> "Architecture":
        channels = tuple(cfg.channels)
        pools = tuple(cfg.pools) if cfg.pools is not None else default_pools(grid, len(channels))
        return cls(grid=grid, n_actions=n_actions, channels=channels, pools=pools, groups=cfg.groups,
                   leaky_slope=cfg.leaky_slope, critic_hidden=cfg.critic_hidden, dtype=cfg.dtype)

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pools"] = list(self.pools)
        return d


class ActorCritic(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        layers: List[nn.Module] = []
        in_ch = 1
        for i, (out_ch, pool) in enumerate(zip(arch.channels, arch.pools)):
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2 if i == 0 else 1, padding=1),
                nn.GroupNorm(arch.groups, out_ch),
                nn.LeakyReLU(arch.leaky_slope),
                nn.MaxPool2d(pool),
            ]
            in_ch = out_ch
        layers.append(nn.Flatten())
        self.encoder = nn.Sequential(*layers)
        try:
            with torch.no_grad():
                width = self.encoder(torch.zeros(1, 1, arch.grid, arch.grid)).shape[1]
        except RuntimeError as e:
            raise ArchitectureMismatch(f"grid {arch.grid} is too small for pools {arch.pools}: {e}") from e
        if width == 0:
            raise ArchitectureMismatch(f"grid {arch.grid} collapses to zero features with pools {arch.pools}")
        self.flat_width = width
        hidden = arch.critic_hidden or width
        self.actor_head = nn.Linear(width, arch.n_actions)
        self.critic_head = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.terminal_head = nn.Linear(width, 1)
        self._init_weights()
        self.to(getattr(torch, arch.dtype))

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="leaky_relu", a=self.arch.leaky_slope)
                nn.init.zeros_(m.bias)

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.arch.dtype)

    def forward(self, images: torch.Tensor, avail: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (masked logits, value, terminal logit); masked logits are -inf."""
        h = self.encoder(images)
        logits = self.actor_head(h).masked_fill(~avail, float("-inf"))
        value = self.critic_head(h).squeeze(-1)
        term_logit = self.terminal_head(h).squeeze(-1)
        return logits, value, term_logit


def build_network(grid: int, n_actions: int, cfg: NetworkConfig, seed: Optional[int] = None) -> ActorCritic:
    if seed is not None:
        torch.manual_seed(seed)
    net = ActorCritic(Architecture.from_config(grid, n_actions, cfg))
    logger.info(
        "Network built",
        extra={"event": "network_build", "data": {"grid": grid, "actions": n_actions, "features": net.flat_width,
                                                 "parameters": sum(p.numel() for p in net.parameters())}},
    )
    return net


@dataclass
class NetOutputs:
    action_probs: np.ndarray
    value: float
    term_prob: float


def avail_vector(mask: Sequence[int], n_actions: int) -> np.ndarray:
    """True for selectable actions. The terminate action of the naive variant is never masked."""
    avail = np.ones(n_actions, dtype=bool)
    angles = [int(a) for a in mask if int(a) < N_ANGLES]
    avail[angles] = False
    return avail


def _batch(net: ActorCritic, images: Sequence[np.ndarray], avails: Sequence[np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor]:
    g = net.arch.grid
    for img in images:
        if img.shape != (g, g):
            raise ShapeMismatch(f"state image {img.shape} does not match network grid {g}")
    x = torch.as_tensor(np.stack(images)[:, None], dtype=net.dtype)
    m = torch.as_tensor(np.stack(avails), dtype=torch.bool)
    return x, m


def forward(net: ActorCritic, state_image: np.ndarray, mask: Sequence[int]) -> NetOutputs:
    """Deterministic evaluation without gradients."""
    avail = avail_vector(mask, net.arch.n_actions)
    x, m = _batch(net, [state_image], [avail])
    with torch.no_grad():
        logits, value, term_logit = net(x, m)
        probs = torch.softmax(logits, dim=-1)[0]
        p = torch.sigmoid(term_logit)[0]
    p = float(p.clamp(min=torch.finfo(p.dtype).tiny, max=1.0 - torch.finfo(p.dtype).eps))
    return NetOutputs(action_probs=probs.cpu().numpy().astype(np.float64), value=float(value[0]), term_prob=p)


@dataclass
class UpdateSample:
    """One step's inputs to the composite loss; targets are constants."""
    image: np.ndarray
    mask: Tuple[int, ...]
    action: int
    advantage: float
    value_target: Optional[float]
    term_advantage: Optional[float] = None
    term_active: bool = True
    actor_active: bool = True


def loss_and_grads(net: ActorCritic, batch: Sequence[UpdateSample], variant: str,
                   opt: OptimizerConfig) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Gradients of  w_a*L_actor + w_c*L_critic + w_t*L_term - w_e*H  summed over the batch.

    L_actor = -log pi(a|x) * delta, L_critic = 0.5 * (target - V(x))^2 (semi-gradient),
    L_term = -p(x) * (PSNR(x) - V_C(x)) (probability gradient, not log-probability).
    """
    if variant not in ("naive", "terminal"):
        raise ValueError("variant must be 'naive' or 'terminal'")
    if not batch:
        raise MissingTarget("empty update batch")
    for s in batch:
        if s.value_target is None or s.advantage is None:
            raise MissingTarget("every sample needs a TD error and a value target")
        if variant == "terminal" and s.term_active and s.term_advantage is None:
            raise MissingTarget("terminal variant needs PSNR(x) - V_C(x) for every active sample")
    x, m = _batch(net, [s.image for s in batch], [avail_vector(s.mask, net.arch.n_actions) for s in batch])
    dt = net.dtype
    actions = torch.as_tensor([s.action for s in batch], dtype=torch.long)
    act = torch.as_tensor([bool(s.actor_active) for s in batch])
    if not bool((m[torch.arange(len(batch)), actions] | ~act).all()):
        raise ValueError("an update sample selects a masked action")
    delta = torch.as_tensor([s.advantage for s in batch], dtype=dt)
    target = torch.as_tensor([s.value_target for s in batch], dtype=dt)

    net.zero_grad(set_to_none=True)
    logits, value, term_logit = net(x, m)
    logp = F.log_softmax(logits, dim=-1)
    probs = logp.exp()
    logp_taken = logp.gather(1, actions[:, None]).squeeze(1).masked_fill(~act, 0.0)
    entropy = -(probs * logp.masked_fill(~m, 0.0)).sum(dim=-1)

    w = act.to(dt)
    actor_loss = -(logp_taken * delta * w).sum()
    critic_loss = 0.5 * (((target - value) ** 2) * w).sum()
    loss = opt.actor_weight * actor_loss + opt.critic_weight * critic_loss - opt.entropy_weight * (entropy * w).sum()
    if variant == "terminal":
        active = torch.as_tensor([bool(s.term_active) for s in batch])
        adv_t = torch.as_tensor([s.term_advantage if s.term_active else 0.0 for s in batch], dtype=dt)
        p = torch.sigmoid(term_logit)
        term_loss = -(p * adv_t * active.to(dt)).sum()
        loss = loss + opt.terminal_weight * term_loss
    loss.backward()
    grads = {
        name: (prm.grad.detach().clone() if prm.grad is not None else torch.zeros_like(prm))
        for name, prm in net.named_parameters()
    }
    net.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def make_optimizer(net: ActorCritic, cfg: OptimizerConfig) -> torch.optim.Adam:
    """Adam with classic L2 decay (decay term added to the gradient)."""
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.adam_betas),
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def add_grads(total: Optional[Dict[str, torch.Tensor]], grads: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    if total is None:
        return {k: v.clone() for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += v
    return total


def apply_update(net: ActorCritic, grads: Dict[str, torch.Tensor], optimizer: torch.optim.Optimizer) -> int:
    """Single-writer Adam step; returns the optimizer step count afterwards."""
    params = dict(net.named_parameters())
    if set(grads) != set(params):
        raise ShapeMismatch("gradient set does not match network parameters")
    for name, prm in params.items():
        g = grads[name]
        if g.shape != prm.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(prm.shape)}")
        prm.grad = g.to(prm.dtype).clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return optimizer_step_count(optimizer)


def optimizer_step_count(optimizer: torch.optim.Optimizer) -> int:
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps) if steps else 0


def sample_action(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
    if greedy:
        return int(np.argmax(probs))
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    return int(rng.choice(len(p), p=p))
