"""Centralized training and decentralized evaluation.

Rollouts run on plain arrays.  After an epoch's episodes are collected, the
whole batch is replayed once on a :class:`~mcomm.gradcore.Graph` with the
sampled topologies and actions held fixed, and that graph gives the loss.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from . import metrics
from . import protocol as pr
from .metrics import EpochStats

logger = logging.getLogger(__name__)

EVAL_STREAM = 2**31 - 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    gamma: float = 1.0
    w_q: float = 0.5
    epochs: int = 500
    episodes_per_epoch: int = 16
    rounds_train: int | None = None
    rounds_exec: int | None = None
    eps: float = 1e-10
    threshold: float = 0.05
    beta: float = 0.5
    alpha: float = 0.01
    lambda_min: float = 1e-5
    lambda_max: float = 5e-3
    augmentation: bool = False
    seed: int = 0
    normalize_returns: bool = True
    grad_clip: float | None = None
    eval_episodes: int = 32
    checkpoint_every: int = 0
    log_topology: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.lr < 0:
            errs.append(f"lr: must be >= 0, got {self.lr}")
        if self.gamma != 1.0:
            errs.append(f"gamma: only undiscounted episodes (1.0) are supported, got {self.gamma}")
        if self.w_q < 0:
            errs.append(f"w_q: must be >= 0, got {self.w_q}")
        if self.epochs < 0:
            errs.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.episodes_per_epoch < 1:
            errs.append(f"episodes_per_epoch: must be >= 1, got {self.episodes_per_epoch}")
        for name in ("rounds_train", "rounds_exec"):
            v = getattr(self, name)
            if v is not None and v < 0:
                errs.append(f"{name}: must be >= 0, got {v}")
        if not self.eps > 0:
            errs.append(f"eps: must be > 0, got {self.eps}")
        if not 0 < self.threshold <= 1:
            errs.append(f"threshold: must lie in (0, 1], got {self.threshold}")
        if not 0 <= self.beta <= 1:
            errs.append(f"beta: must lie in [0, 1], got {self.beta}")
        if self.alpha < 0:
            errs.append(f"alpha: must be >= 0, got {self.alpha}")
        if self.lambda_min > self.lambda_max:
            errs.append(f"lambda_min: {self.lambda_min} exceeds lambda_max {self.lambda_max}")
        if self.lambda_min < 0:
            errs.append(f"lambda_min: must be >= 0, got {self.lambda_min}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errs.append(f"grad_clip: must be > 0, got {self.grad_clip}")
        if self.eval_episodes < 1:
            errs.append(f"eval_episodes: must be >= 1, got {self.eval_episodes}")
        if self.checkpoint_every < 0:
            errs.append(f"checkpoint_every: must be >= 0, got {self.checkpoint_every}")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


def train_rounds(config: TrainConfig, spec: pr.ProtocolSpec) -> int:
    return spec.rounds if config.rounds_train is None else config.rounds_train


def exec_rounds(config: TrainConfig, spec: pr.ProtocolSpec) -> int:
    return spec.rounds if config.rounds_exec is None else config.rounds_exec


@dataclass
class RolloutBatch:
    obs: np.ndarray
    active: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    car_ids: np.ndarray
    topologies: list  # per round: stacked (steps*n, n) hard topologies
    episode_starts: list
    successes: list
    group: int

    @property
    def steps(self) -> int:
        return self.obs.shape[0] // self.group


@dataclass
class EpochResult:
    stats: EpochStats
    losses: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    aborted: bool = False
    topologies: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss pieces


def returns_to_go(rewards: np.ndarray, car_ids: np.ndarray) -> np.ndarray:
    """Undiscounted per-slot return, restarting whenever a slot changes occupant.

    ``rewards`` and ``car_ids`` are (steps, n) for a single episode.
    """
    out = np.zeros_like(rewards, dtype=float)
    run = np.zeros(rewards.shape[1])
    nxt = np.full(rewards.shape[1], -2)
    for t in range(rewards.shape[0] - 1, -1, -1):
        same = car_ids[t] == nxt
        run = np.where(same, run, 0.0) + rewards[t]
        out[t] = run
        nxt = car_ids[t]
    return out


def normalize(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sel = values[mask]
    if sel.size == 0:
        return values.copy()
    mu, sd = sel.mean(), sel.std()
    return np.where(mask, (values - mu) / (sd + 1e-8), 0.0)


def base_loss(log_probs, values, targets: np.ndarray, mask: np.ndarray, w_q: float):
    """Actor-critic loss ``(L_t, l_a, l_Q)``; accepts graph variables or arrays.

    The advantage uses the critic's value as a constant baseline.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 1)
    m = np.asarray(mask, dtype=float).reshape(-1, 1)
    count = max(m.sum(), 1.0)
    adv = (targets - gc.value_of(values)) * m
    l_a = gc.sum_(gc.mul(log_probs, adv)) * (-1.0 / count)
    err = gc.sub(values, targets)
    l_q = gc.sum_(gc.mul(gc.mul(err, err), m)) * (1.0 / count)
    return gc.add(l_a, gc.scale(l_q, w_q)), l_a, l_q


def smoothed_terms(entropy, similarity, success: float, beta: float, threshold: float):
    s_eff = max(success, threshold)
    factor = 1.0 - beta * s_eff
    return gc.scale(entropy, factor) if isinstance(entropy, gc.Var) else entropy * factor, (
        gc.scale(similarity, factor) if isinstance(similarity, gc.Var) else similarity * factor
    )


def dynamic_weights(loss: float, iei_s: float, sei_s: float, alpha: float, eps: float, lam_min: float, lam_max: float):
    def clamp(term):
        raw = alpha * loss / (term + eps)
        return max(lam_min, min(lam_max, raw))

    return clamp(float(iei_s)), clamp(float(sei_s))


def augmented_loss(loss, iei_s, sei_s, w_iei: float, w_sei: float):
    return loss + iei_s * w_iei + sei_s * w_sei


# ---------------------------------------------------------------------------
# rollouts


def _episode_seeds(seed: int, epoch: int, episode: int):
    return [seed, epoch, episode, 0], np.random.default_rng([seed, epoch, episode, 1])


def rollout(params: pr.ProtocolParams, env, rounds: int, seed: int, epoch: int, episodes: int) -> RolloutBatch:
    n = params.n_agents
    P = pr.Bound(params)
    obs_rows, act_rows, actions, rewards, car_ids = [], [], [], [], []
    topo = [[] for _ in range(rounds)]
    starts, successes = [], []
    for ep in range(episodes):
        env_seed, rng = _episode_seeds(seed, epoch, ep)
        state, obs = env.reset(env_seed)
        starts.append(len(obs_rows))
        collisions = 0
        ep_rewards, ep_ids = [], []
        done = False
        while not done:
            active = state.active
            h0 = pr.encode_observations(obs, P)
            h, states, _ = pr.run_rounds(h0, P, active, n, rounds, rng, "training")
            a, _, _ = pr.act(pr.policy_logits(h, P), rng, "training")
            env_actions = np.where(active, a, -1)
            ids = state.car_ids()
            state, next_obs, res = env.step(state, env_actions)
            obs_rows.append(obs)
            act_rows.append(active)
            actions.append(a)
            ep_rewards.append(res.rewards)
            ep_ids.append(ids)
            for l, rs in enumerate(states):
                topo[l].append(rs.G)
            collisions += res.collisions
            obs = next_obs
            done = res.done
        rewards.append(np.asarray(ep_rewards))
        car_ids.append(np.asarray(ep_ids))
        successes.append(collisions == 0)
    return RolloutBatch(
        obs=np.concatenate(obs_rows),
        active=np.concatenate(act_rows),
        actions=np.concatenate(actions),
        rewards=np.concatenate(rewards),
        car_ids=np.concatenate(car_ids),
        topologies=[np.concatenate(t) for t in topo],
        episode_starts=starts,
        successes=successes,
        group=n,
    )


def batch_targets(batch: RolloutBatch, normalize_returns: bool = True) -> np.ndarray:
    bounds = batch.episode_starts + [batch.steps]
    rtg = [
        returns_to_go(batch.rewards[a:b], batch.car_ids[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
    ]
    flat = np.concatenate(rtg).reshape(-1)
    if normalize_returns:
        flat = normalize(flat, batch.active)
    return flat


def build_loss(params: pr.ProtocolParams, batch: RolloutBatch, config: TrainConfig, rounds: int, epoch: int):
    """Replay ``batch`` on a graph; returns ``(graph, total_loss, stats, losses)``."""
    n = batch.group
    g = gc.Graph()
    P = pr.Bound(params, g)
    x = g.input("obs", batch.obs)
    h0 = pr.encode_observations(x, P)
    h, states, messages = pr.run_rounds(h0, P, batch.active, n, rounds, hard_topologies=batch.topologies)
    _, logp, _ = pr.act(pr.policy_logits(h, P), actions=batch.actions)
    values = pr.critic_values(h, P, n)
    targets = batch_targets(batch, config.normalize_returns)
    loss, l_a, l_q = base_loss(logp, values, targets, batch.active, config.w_q)
    stats = metrics.epoch_stats(epoch, batch.successes, states, config.threshold)
    losses = {
        "la": float(l_a.value[0, 0]),
        "lQ": float(l_q.value[0, 0]),
        "Lt": float(loss.value[0, 0]),
        "wIEI": None,
        "wSEI": None,
    }
    total = loss
    if config.augmentation:
        h_term = metrics.entropy_term(messages, states)
        xi_term = metrics.similarity_term(messages, states)
        h_term = h_term if h_term is not None else 0.0
        xi_term = xi_term if xi_term is not None else 0.0
        iei_s, sei_s = smoothed_terms(h_term, xi_term, stats.success, config.beta, config.threshold)
        w_iei, w_sei = dynamic_weights(
            losses["Lt"],
            float(gc.value_of(iei_s)[0, 0]) if isinstance(iei_s, gc.Var) else iei_s,
            float(gc.value_of(sei_s)[0, 0]) if isinstance(sei_s, gc.Var) else sei_s,
            config.alpha,
            config.eps,
            config.lambda_min,
            config.lambda_max,
        )
        total = augmented_loss(loss, iei_s, sei_s, w_iei, w_sei)
        losses.update(wIEI=w_iei, wSEI=w_sei)
    g.output("loss", total)
    losses["total"] = float(gc.value_of(total)[0, 0])
    return g, total, stats, losses


def _clip(params, max_norm: float) -> None:
    norm = np.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm


def train_epoch(params: pr.ProtocolParams, env, config: TrainConfig, epoch: int) -> EpochResult:
    """One epoch: collect episodes, build the loss, one gradient step."""
    rounds = train_rounds(config, params.spec)
    batch = rollout(params, env, rounds, config.seed, epoch, config.episodes_per_epoch)
    for p in params:
        p.zero_grad()
    try:
        g, total, stats, losses = build_loss(params, batch, config, rounds, epoch)
    except gc.NonFiniteError as exc:
        logger.error("epoch %d aborted: %s", epoch, exc)
        stats = metrics.epoch_stats(epoch, batch.successes, [], config.threshold)
        return EpochResult(stats, aborted=True)
    gc.backward(g, total)
    if not all(np.isfinite(p.grad).all() for p in params):
        logger.error("epoch %d aborted: non-finite gradient", epoch)
        for p in params:
            p.zero_grad()
        return EpochResult(stats, losses, aborted=True, topologies=batch.topologies)
    if config.grad_clip is not None:
        _clip(params, config.grad_clip)
    skipped = gc.sgd_step(params, config.lr)
    return EpochResult(stats, losses, skipped, topologies=batch.topologies)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: pr.ProtocolParams, env, config: TrainConfig, episodes: int | None = None, epoch: int = 0) -> EpochStats:
    """Greedy decentralized execution with the execution round count; no updates."""
    stats, _ = evaluate_traces(params, env, config, episodes, epoch)
    return stats


def evaluate_traces(params, env, config: TrainConfig, episodes: int | None = None, epoch: int = 0):
    rounds = exec_rounds(config, params.spec)
    episodes = config.eval_episodes if episodes is None else episodes
    all_states, successes, actions_log = [], [], []
    for ep in range(episodes):
        state, obs = env.reset([config.seed, EVAL_STREAM, ep, 0])
        collisions = 0
        done = False
        while not done:
            active = state.active
            a, states = pr.decentralized_step(obs, params, active, rounds)
            all_states.extend(states)
            actions_log.append((obs, active, a))
            state, obs, res = env.step(state, np.where(active, a, -1))
            collisions += res.collisions
            done = res.done
        successes.append(collisions == 0)
    return metrics.epoch_stats(epoch, successes, all_states, config.threshold), actions_log
