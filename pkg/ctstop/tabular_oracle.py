"""Exact objective, continuation values and policy gradients on small finite MDPs.

States reached after M continuation decisions are terminal, so V(x, M+1) = PSNR(x) and the
decisions at k = 1..M are sampled from the terminal policy.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .logging_utils import get_logger, Timer
from .rl_train import td_error_naive, td_error_terminal

logger = get_logger("tabular_oracle")

FD_STEP = 1e-5
EXACT_TOL = 1e-12
FD_REL_TOL = 1e-6


@dataclass
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    psnr: np.ndarray  # (S,)
    cost_b: float
    horizon: int
    start: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        s, a, s2 = self.transition.shape
        if s != s2 or self.psnr.shape != (s,):
            raise ValueError("transition must be (S, A, S) and psnr (S,)")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=-1), 1.0, atol=1e-12):
            raise ValueError("transition rows must be probability vectors")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass
class TabularPolicies:
    actor_logits: np.ndarray  # (S, A)
    term_logits: np.ndarray  # (S,)

    def __post_init__(self):
        self.actor_logits = np.asarray(self.actor_logits, dtype=np.float64)
        self.term_logits = np.asarray(self.term_logits, dtype=np.float64)
        if not (np.all(np.isfinite(self.actor_logits)) and np.all(np.isfinite(self.term_logits))):
            raise ValueError("policy logits must be finite")

    @property
    def actor(self) -> np.ndarray:
        z = self.actor_logits - self.actor_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @property
    def stop(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.term_logits))

    def copy(self) -> "TabularPolicies":
        return TabularPolicies(self.actor_logits.copy(), self.term_logits.copy())


def random_mdp(rng: np.random.Generator, n_states: int = 3, n_actions: int = 2, horizon: int = 3,
               cost_b: float = 0.5, psnr_range: Tuple[float, float] = (10.0, 40.0)) -> TabularMDP:
    if not (2 <= n_states <= 12 and 1 <= n_actions <= 4 and 1 <= horizon <= 5):
        raise ValueError("random MDPs are limited to 12 states, 4 actions and horizon 5")
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p /= p.sum(axis=-1, keepdims=True)
    psnr = rng.uniform(*psnr_range, size=n_states)
    return TabularMDP(transition=p, psnr=psnr, cost_b=cost_b, horizon=horizon, start=0)


def random_policies(rng: np.random.Generator, mdp: TabularMDP, scale: float = 1.0) -> TabularPolicies:
    return TabularPolicies(
        actor_logits=scale * rng.standard_normal((mdp.n_states, mdp.n_actions)),
        term_logits=scale * rng.standard_normal(mdp.n_states),
    )


@dataclass
class ExactValues:
    """Per-step tables; index 0 is k = 1. `value` has M+1 rows, the last being PSNR."""
    value: np.ndarray  # (M+1, S)
    cont: np.ndarray  # V_C, (M, S)
    q: np.ndarray  # Q_C, (M, S, A)

    @property
    def advantage(self) -> np.ndarray:
        return self.q - self.cont[:, :, None]


def exact_continuation_values(mdp: TabularMDP, pol: TabularPolicies) -> ExactValues:
    m, s, a = mdp.horizon, mdp.n_states, mdp.n_actions
    pa, p = pol.actor, pol.stop
    value = np.zeros((m + 1, s))
    cont = np.zeros((m, s))
    q = np.zeros((m, s, a))
    value[m] = mdp.psnr
    for k in range(m - 1, -1, -1):
        q[k] = -mdp.cost_b + mdp.transition @ value[k + 1]
        cont[k] = np.sum(pa * q[k], axis=1)
        value[k] = p * mdp.psnr + (1.0 - p) * cont[k]
    return ExactValues(value=value, cont=cont, q=q)


def exact_objective(mdp: TabularMDP, pol: TabularPolicies) -> float:
    return float(exact_continuation_values(mdp, pol).value[0, mdp.start])


def enumerate_objective(mdp: TabularMDP, pol: TabularPolicies) -> float:
    """Brute force over every (decision, angle, next state) path."""
    pa, p = pol.actor, pol.stop
    total = 0.0

    def walk(x: int, k: int, prob: float) -> None:
        nonlocal total
        if k == mdp.horizon + 1:
            total += prob * (mdp.psnr[x] - mdp.cost_b * mdp.horizon)
            return
        total += prob * p[x] * (mdp.psnr[x] - mdp.cost_b * (k - 1))
        for theta in range(mdp.n_actions):
            for nxt in range(mdp.n_states):
                w = prob * (1.0 - p[x]) * pa[x, theta] * mdp.transition[x, theta, nxt]
                if w > 0.0:
                    walk(nxt, k + 1, w)

    walk(mdp.start, 1, 1.0)
    return float(total)


def occupancy(mdp: TabularMDP, pol: TabularPolicies) -> np.ndarray:
    """rho[k-1, x]: probability of standing at x at step k with no stop so far, k = 1..M+1."""
    pa, p = pol.actor, pol.stop
    rho = np.zeros((mdp.horizon + 1, mdp.n_states))
    rho[0, mdp.start] = 1.0
    # (S, S): one continuation step from x to x'
    step = np.einsum("xa,xay->xy", pa, mdp.transition) * (1.0 - p)[:, None]
    for k in range(mdp.horizon):
        rho[k + 1] = rho[k] @ step
    return rho


@dataclass
class Gradients:
    actor: np.ndarray  # (S, A)
    term: np.ndarray  # (S,)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.actor.ravel(), self.term.ravel()])


def unrolled_gradients(mdp: TabularMDP, pol: TabularPolicies) -> Gradients:
    vals = exact_continuation_values(mdp, pol)
    rho = occupancy(mdp, pol)[: mdp.horizon]
    pa, p = pol.actor, pol.stop
    term = np.sum(rho * (p * (1.0 - p))[None, :] * (mdp.psnr[None, :] - vals.cont), axis=0)
    weight = rho * (1.0 - p)[None, :]
    actor = np.sum(weight[:, :, None] * pa[None] * vals.advantage, axis=0)
    return Gradients(actor=actor, term=term)


def finite_difference_gradients(mdp: TabularMDP, pol: TabularPolicies, h: float = FD_STEP) -> Gradients:
    actor = np.zeros_like(pol.actor_logits)
    term = np.zeros_like(pol.term_logits)
    for idx in np.ndindex(*actor.shape):
        up, down = pol.copy(), pol.copy()
        up.actor_logits[idx] += h
        down.actor_logits[idx] -= h
        actor[idx] = (exact_objective(mdp, up) - exact_objective(mdp, down)) / (2 * h)
    for i in range(term.shape[0]):
        up, down = pol.copy(), pol.copy()
        up.term_logits[i] += h
        down.term_logits[i] -= h
        term[i] = (exact_objective(mdp, up) - exact_objective(mdp, down)) / (2 * h)
    return Gradients(actor=actor, term=term)


def exact_gradients(mdp: TabularMDP, pol: TabularPolicies) -> Tuple[Gradients, Gradients]:
    """(unrolled occupancy form, central finite differences); the two must agree."""
    return unrolled_gradients(mdp, pol), finite_difference_gradients(mdp, pol)


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


def sample_gradients(mdp: TabularMDP, pol: TabularPolicies, n_trajectories: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-trajectory update directions (N, S*A + S) with exact V_C in place of the critic.

    Terminal head: p(1-p)(PSNR(x) - V_C(x)) at every visited decision. Actor: (e_theta - pi) * delta
    with delta from `td_error_terminal`.
    """
    vals = exact_continuation_values(mdp, pol)
    pa, p = pol.actor, pol.stop
    n, s, a, m = n_trajectories, mdp.n_states, mdp.n_actions, mdp.horizon
    g_actor = np.zeros((n, s, a))
    g_term = np.zeros((n, s))
    x = np.full(n, mdp.start)
    alive = np.ones(n, dtype=bool)
    eye = np.eye(a)
    for k in range(m):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xs = x[idx]
        g_term[idx, xs] += p[xs] * (1.0 - p[xs]) * (mdp.psnr[xs] - vals.cont[k, xs])
        stop = rng.random(idx.size) < p[xs]
        alive[idx[stop]] = False
        idx, xs = idx[~stop], xs[~stop]
        if idx.size == 0:
            break
        theta = _categorical(rng, pa[xs])
        nxt = _categorical(rng, mdp.transition[xs, theta])
        if k + 1 < m:
            p_next, vc_next = p[nxt], vals.cont[k + 1, nxt]
        else:
            p_next, vc_next = np.ones(idx.size), np.zeros(idx.size)
        td = td_error_terminal(-mdp.cost_b, p_next, mdp.psnr[nxt], vals.cont[k, xs], vc_next)
        g_actor[idx, xs] += (eye[theta] - pa[xs]) * td.delta[:, None]
        x[idx] = nxt
    return np.concatenate([g_actor.reshape(n, -1), g_term], axis=1)


@dataclass
class EstimatorCheck:
    n_trajectories: int
    exact: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    z: np.ndarray
    n_sigma: float = 3.0

    @property
    def within(self) -> np.ndarray:
        return np.abs(self.z) <= self.n_sigma

    @property
    def error(self) -> float:
        return float(np.linalg.norm(self.mean - self.exact))

    @property
    def allowed_outside(self) -> int:
        return max(1, int(np.ceil(0.01 * self.z.size)))

    @property
    def passed(self) -> bool:
        """At most 1% of coordinates (at least one) beyond n_sigma, none beyond 5 sigma."""
        outside = int((~self.within).sum())
        return outside <= self.allowed_outside and bool(np.all(np.abs(self.z) <= 5.0))


def estimator_check(mdp: TabularMDP, pol: TabularPolicies, n_trajectories: int, seed: int = 0,
                    n_sigma: float = 3.0) -> EstimatorCheck:
    if n_trajectories < 10_000:
        raise ValueError("estimator checks need at least 10^4 trajectories")
    return _estimator_check(mdp, pol, n_trajectories, seed, n_sigma)


def _estimator_check(mdp: TabularMDP, pol: TabularPolicies, n_trajectories: int, seed: int,
                     n_sigma: float) -> EstimatorCheck:
    g = sample_gradients(mdp, pol, n_trajectories, np.random.default_rng(seed))
    exact = unrolled_gradients(mdp, pol).flat()
    mean = g.mean(axis=0)
    stderr = g.std(axis=0, ddof=1) / np.sqrt(n_trajectories)
    diff = mean - exact
    z = np.where(stderr > 0, diff / np.where(stderr > 0, stderr, 1.0), np.where(np.abs(diff) < 1e-9, 0.0, np.inf))
    return EstimatorCheck(n_trajectories=n_trajectories, exact=exact, mean=mean, stderr=stderr, z=z, n_sigma=n_sigma)


def convergence_errors(mdp: TabularMDP, pol: TabularPolicies, sizes=(1_000, 10_000, 100_000), seed: int = 0) -> List[float]:
    """Distance between the Monte-Carlo mean direction and the exact gradient for each sample size."""
    return [_estimator_check(mdp, pol, n, seed + i, 3.0).error for i, n in enumerate(sizes)]


def sampled_advantage(mdp: TabularMDP, pol: TabularPolicies, k: int, x: int, theta: int, n: int,
                      rng: np.random.Generator) -> Tuple[float, float]:
    """Mean and standard error of the one-step TD error for (x, theta) at step k (1-based)."""
    vals = exact_continuation_values(mdp, pol)
    nxt = rng.choice(mdp.n_states, size=n, p=mdp.transition[x, theta])
    if k < mdp.horizon:
        p_next, vc_next = pol.stop[nxt], vals.cont[k, nxt]
    else:
        p_next, vc_next = np.ones(n), np.zeros(n)
    td = td_error_terminal(-mdp.cost_b, p_next, mdp.psnr[nxt], vals.cont[k - 1, x], vc_next)
    return float(td.delta.mean()), float(td.delta.std(ddof=1) / np.sqrt(n))


# ----------------------------------------------------------------- suite

@dataclass
class MDPReport:
    index: int
    n_states: int
    n_actions: int
    horizon: int
    recursion_vs_enumeration: float
    identity_error: float
    fd_rel_error: float
    estimator: EstimatorCheck

    @property
    def passed(self) -> bool:
        return self.recursion_vs_enumeration < EXACT_TOL and self.identity_error < EXACT_TOL \
            and self.fd_rel_error < FD_REL_TOL and self.estimator.passed


@dataclass
class OracleReport:
    n_trajectories: int
    seed: int
    mdps: List[MDPReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.mdps)

    def to_text(self) -> str:
        lines = [f"oracle seed={self.seed} trajectories={self.n_trajectories} mdps={len(self.mdps)}"]
        for r in self.mdps:
            est = r.estimator
            lines.append(
                f"mdp {r.index} S={r.n_states} A={r.n_actions} M={r.horizon} "
                f"enum={r.recursion_vs_enumeration:.2e} identity={r.identity_error:.2e} fd_rel={r.fd_rel_error:.2e} "
                f"mc_max_z={np.max(np.abs(est.z)):.2f} mc_within={int(est.within.sum())}/{est.z.size} "
                f"{'PASS' if r.passed else 'FAIL'}"
            )
            for i, (e, mu, se, z) in enumerate(zip(est.exact, est.mean, est.stderr, est.z)):
                lines.append(f"  coord {i}: exact={e:.6g} mean={mu:.6g} se={se:.3g} z={z:.2f}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def identity_error(mdp: TabularMDP, pol: TabularPolicies) -> float:
    """Largest violation of V_C = sum pi_a Q_C, sum pi_a A_C = 0 and V = p PSNR + (1-p) V_C."""
    vals = exact_continuation_values(mdp, pol)
    pa, p = pol.actor, pol.stop
    e1 = np.abs(vals.cont - np.sum(pa[None] * vals.q, axis=2)).max()
    e2 = np.abs(np.sum(pa[None] * vals.advantage, axis=2)).max()
    e3 = np.abs(vals.value[:-1] - (p * mdp.psnr + (1 - p) * vals.cont)).max()
    return float(max(e1, e2, e3))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def run_oracle_suite(n_mdps: int = 20, n_trajectories: int = 100_000, seed: int = 0, max_states: int = 12,
                     max_actions: int = 4, max_horizon: int = 5, n_sigma: float = 3.0) -> OracleReport:
    timer = Timer()
    rng = np.random.default_rng(seed)
    report = OracleReport(n_trajectories=n_trajectories, seed=seed)
    for i in range(n_mdps):
        # enumeration cost grows as (S*A)^M; keep the brute-force check cheap
        s = int(rng.integers(2, max_states + 1))
        a = int(rng.integers(1, max_actions + 1))
        m = int(rng.integers(1, max_horizon + 1))
        while (s * a) ** m > 1_000_000:
            m -= 1
        mdp = random_mdp(rng, n_states=s, n_actions=a, horizon=m, cost_b=float(rng.uniform(0.1, 2.0)))
        pol = random_policies(rng, mdp)
        unrolled, fd = exact_gradients(mdp, pol)
        report.mdps.append(MDPReport(
            index=i, n_states=s, n_actions=a, horizon=m,
            recursion_vs_enumeration=abs(exact_objective(mdp, pol) - enumerate_objective(mdp, pol)),
            identity_error=identity_error(mdp, pol),
            fd_rel_error=relative_error(unrolled.flat(), fd.flat()),
            estimator=estimator_check(mdp, pol, n_trajectories, seed=seed + 1000 + i, n_sigma=n_sigma),
        ))
    logger.info("Oracle suite finished",
                extra={"event": "oracle_suite", "data": {"mdps": n_mdps, "passed": report.passed, "ms": timer.elapsed_ms()}})
    return report


# ----------------------------------------------------------------- tabular training

def actor_step(logits_row: np.ndarray, action: int, delta: float, lr: float) -> np.ndarray:
    """Gradient ascent on log pi(action) * delta for one softmax row."""
    z = logits_row - logits_row.max()
    pi = np.exp(z) / np.exp(z).sum()
    grad = -pi
    grad[action] += 1.0
    return logits_row + lr * delta * grad


def term_step(term_logit: float, advantage: float, lr: float) -> float:
    """Gradient ascent on p * advantage, p = sigmoid(term_logit)."""
    p = 1.0 / (1.0 + np.exp(-term_logit))
    return float(term_logit + lr * p * (1.0 - p) * advantage)


@dataclass
class TabularRun:
    actor_logits: np.ndarray
    critic: np.ndarray
    term_logits: Optional[np.ndarray] = None
    lengths: List[int] = field(default_factory=list)


def train_tabular_naive(mdp: TabularMDP, episodes: int, seed: int = 0, lr: float = 0.01,
                        critic_lr: float = 0.1) -> TabularRun:
    """Tabular actor-critic with an extra terminate action (index A)."""
    rng = np.random.default_rng(seed)
    a = mdp.n_actions
    logits = np.zeros((mdp.n_states, a + 1))
    v = np.zeros(mdp.n_states)
    run = TabularRun(actor_logits=logits, critic=v)
    for _ in range(episodes):
        x, k = mdp.start, 1
        while True:
            z = logits[x] - logits[x].max()
            pi = np.exp(z) / np.exp(z).sum()
            action = int(rng.choice(a + 1, p=pi))
            if action == a:
                td = td_error_naive(-mdp.cost_b, mdp.psnr[x], v[x], v[x], terminated=True)
                nxt, done = x, True
            else:
                nxt = int(rng.choice(mdp.n_states, p=mdp.transition[x, action]))
                done = k == mdp.horizon
                td = td_error_naive(-mdp.cost_b, mdp.psnr[nxt], v[x], v[nxt], terminated=done)
            logits[x] = actor_step(logits[x], action, td.delta, lr)
            v[x] += critic_lr * td.delta
            if done:
                run.lengths.append(k if action != a else k - 1)
                break
            x, k = nxt, k + 1
    return run


def train_tabular_terminal(mdp: TabularMDP, episodes: int, seed: int = 0, lr: float = 0.01,
                           critic_lr: float = 0.1) -> TabularRun:
    """Tabular counterpart of the terminal-policy trainer with a step-independent continuation critic."""
    rng = np.random.default_rng(seed)
    logits = np.zeros((mdp.n_states, mdp.n_actions))
    term = np.zeros(mdp.n_states)
    vc = np.zeros(mdp.n_states)
    run = TabularRun(actor_logits=logits, critic=vc, term_logits=term)
    for _ in range(episodes):
        x = mdp.start
        for k in range(1, mdp.horizon + 2):
            if k == mdp.horizon + 1:
                run.lengths.append(k - 1)
                break
            p = 1.0 / (1.0 + np.exp(-term[x]))
            term[x] = term_step(term[x], mdp.psnr[x] - vc[x], lr)
            if rng.random() < p:
                run.lengths.append(k - 1)
                break
            z = logits[x] - logits[x].max()
            pi = np.exp(z) / np.exp(z).sum()
            theta = int(rng.choice(mdp.n_actions, p=pi))
            nxt = int(rng.choice(mdp.n_states, p=mdp.transition[x, theta]))
            p_next = 1.0 if k == mdp.horizon else 1.0 / (1.0 + np.exp(-term[nxt]))
            td = td_error_terminal(-mdp.cost_b, p_next, mdp.psnr[nxt], vc[x], vc[nxt])
            logits[x] = actor_step(logits[x], theta, td.delta, lr)
            vc[x] += critic_lr * td.delta
            x = nxt
    return run


def policy_after(run: TabularRun) -> Dict[str, np.ndarray]:
    z = run.actor_logits - run.actor_logits.max(axis=1, keepdims=True)
    out = {"actor": np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)}
    if run.term_logits is not None:
        out["stop"] = 1.0 / (1.0 + np.exp(-run.term_logits))
    return out
