"""Standard PPO machinery shared by all trainers.

Generalized advantage estimation, the clipped surrogate objective with an
entropy bonus, value regression against targets G = V_old(s) + A, and the
shuffled-minibatch epoch engine. The trigger-based trainer reuses the
engine verbatim (only advantage construction differs), which is what makes
the trigger-disabled configuration reproduce this trainer bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .env import (
    ApEnv,
    EpisodeConfig,
    Observation,
    RewardConfig,
    obs_vec,
    reward_r1,
)
from .metrics import EpisodeRecord, aurr, ecf, tir
from .neural import (
    DivergedUpdateError,
    GaussianPolicy,
    OptimizerState,
    ValueNet,
    adam_step,
    gaussian_logprob_entropy,
)
from .plant import PumpConfig, SensorConfig
from .scenario import DEFAULT_MEAL_SPECS, generate_episode_scenario
from .seeding import RngBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    c_ent: float = 0.01
    buffer_size: int = 512
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 128
    adv_norm: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Backward-recursion GAE with done masking between episodes.

    values must carry one extra entry: the bootstrap value of the state
    following the last stored transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = len(rewards)
    if len(values) != n + 1 or len(dones) != n:
        raise ValueError("rewards/values/dones lengths are inconsistent")
    adv = np.empty(n)
    acc = 0.0
    for h in range(n - 1, -1, -1):
        nonterm = 1.0 - dones[h]
        delta = rewards[h] + gamma * nonterm * values[h + 1] - values[h]
        acc = delta + gamma * lam * nonterm * acc
        adv[h] = acc
    return adv


def clipped_surrogate(
    logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float
) -> float:
    """Batch mean of min(ratio * A, clip(ratio) * A)."""
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return float(np.minimum(ratio * adv, clipped * adv).mean())


def value_loss(values_pred: np.ndarray, return_targets: np.ndarray) -> float:
    diff = np.asarray(values_pred, dtype=float) - np.asarray(return_targets, dtype=float)
    return float((diff * diff).mean())


def values_with_bootstrap(
    vnet: ValueNet, obs: np.ndarray, last_next_obs: np.ndarray
) -> np.ndarray:
    """V(s) for every stored state plus V of the final next-state."""
    v = vnet.values(obs)
    v_boot = vnet.values(np.asarray(last_next_obs, dtype=float)[None, :])
    return np.concatenate([v, v_boot])


def gaussian_policy_grads(
    policy: GaussianPolicy,
    obs: np.ndarray,
    act: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    hyper: HyperParams,
) -> tuple[float, list[np.ndarray], dict]:
    """Objective J = L_clip + c_ent * entropy and gradients of -J.

    The gradient follows the branch selected by the min: the unclipped
    surrogate when it is the smaller (or equal) term, otherwise the
    clipped branch, whose derivative is zero outside the clip interval.
    """
    mean, acts = policy.net.forward_cached(obs)
    std = np.exp(policy.log_std)
    z = (act - mean) / std
    logp_new, entropy = gaussian_logprob_entropy(mean, policy.log_std, act)
    b = len(adv)

    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps)
    u1 = ratio * adv
    u2 = clipped * adv
    objective = float(np.minimum(u1, u2).mean()) + hyper.c_ent * entropy

    dlogp = np.where(u1 <= u2, ratio * adv, 0.0) / b
    dmean = dlogp[:, None] * z / std
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0) + hyper.c_ent

    grads = policy.net.backward(acts, -dmean)
    grads.append(-dlog_std)
    diag = {
        "mean_ratio": float(ratio.mean()),
        "clip_frac": float((np.abs(ratio - 1.0) > hyper.clip_eps).mean()),
        "entropy": entropy,
    }
    return objective, grads, diag


def value_grads(
    vnet: ValueNet, obs: np.ndarray, targets: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean-squared-error loss and its gradients."""
    pred, acts = vnet.net.forward_cached(obs)
    diff = pred[:, 0] - targets
    loss = float((diff * diff).mean())
    dout = (2.0 * diff / len(targets))[:, None]
    return loss, vnet.net.backward(acts, dout)


@dataclass
class UpdateStats:
    policy_objective: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mean_ratio: float = 1.0
    clip_frac: float = 0.0
    minibatches: int = 0
    diverged: bool = False


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Batch standardization with a floor on the standard deviation."""
    std = float(adv.std())
    return (adv - adv.mean()) / max(std, 1e-8)


def update_networks(
    policy,
    vnet: ValueNet,
    opt_policy: OptimizerState,
    opt_value: OptimizerState,
    data: dict[str, np.ndarray],
    hyper: HyperParams,
    shuffle_rng: np.random.Generator,
    policy_grads_fn=gaussian_policy_grads,
) -> UpdateStats:
    """Epochs of shuffled minibatches: ascend J(theta), descend J(phi).

    data needs keys obs, act, logp_old, adv, vtarget (adv already
    normalized by the caller if desired). A non-finite loss or gradient
    aborts the update and flags the stats.
    """
    n = len(data["adv"])
    stats = UpdateStats()
    sums = {"obj": 0.0, "vl": 0.0, "ent": 0.0, "ratio": 0.0, "clip": 0.0}
    for _ in range(hyper.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, hyper.minibatch):
            idx = perm[start : start + hyper.minibatch]
            try:
                obj, pgrads, diag = policy_grads_fn(
                    policy, data["obs"][idx], data["act"][idx],
                    data["logp_old"][idx], data["adv"][idx], hyper,
                )
                vl, vgrads = value_grads(vnet, data["obs"][idx], data["vtarget"][idx])
                if not (math.isfinite(obj) and math.isfinite(vl)):
                    raise DivergedUpdateError("diverged-update: non-finite loss")
                adam_step(policy.params(), pgrads, opt_policy)
                adam_step(vnet.params(), vgrads, opt_value)
            except DivergedUpdateError as exc:
                log.error("update aborted: %s", exc)
                stats.diverged = True
                return stats
            stats.minibatches += 1
            sums["obj"] += obj
            sums["vl"] += vl
            sums["ent"] += diag["entropy"]
            sums["ratio"] += diag["mean_ratio"]
            sums["clip"] += diag["clip_frac"]
    if stats.minibatches:
        stats.policy_objective = sums["obj"] / stats.minibatches
        stats.value_loss = sums["vl"] / stats.minibatches
        stats.entropy = sums["ent"] / stats.minibatches
        stats.mean_ratio = sums["ratio"] / stats.minibatches
        stats.clip_frac = sums["clip"] / stats.minibatches
    return stats


class RolloutBuffer:
    """Fixed-capacity store of per-step transitions (the MDP buffer)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.clear()

    def clear(self) -> None:
        self.obs: list[np.ndarray] = []
        self.act: list[np.ndarray] = []
        self.rew: list[float] = []
        self.done: list[float] = []
        self.logp: list[float] = []
        self.last_next_obs: np.ndarray | None = None

    def add(self, obs, act, reward, done, logp, next_obs) -> None:
        if self.full:
            raise ValueError("buffer already full")
        self.obs.append(np.asarray(obs, dtype=float))
        self.act.append(np.asarray(act, dtype=float))
        self.rew.append(float(reward))
        self.done.append(1.0 if done else 0.0)
        self.logp.append(float(logp))
        self.last_next_obs = np.asarray(next_obs, dtype=float)

    def __len__(self) -> int:
        return len(self.rew)

    @property
    def full(self) -> bool:
        return len(self.rew) >= self.capacity

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.stack(self.obs),
            "act": np.stack(self.act),
            "rew": np.asarray(self.rew),
            "done": np.asarray(self.done),
            "logp_old": np.asarray(self.logp),
            "last_next_obs": self.last_next_obs,
        }


def ppo_update(
    buffer: RolloutBuffer,
    policy: GaussianPolicy,
    vnet: ValueNet,
    opt_policy: OptimizerState,
    opt_value: OptimizerState,
    hyper: HyperParams,
    shuffle_rng: np.random.Generator,
) -> tuple[UpdateStats, np.ndarray]:
    """Full PPO update from a filled step buffer; returns (stats, advantages)."""
    d = buffer.arrays()
    values = values_with_bootstrap(vnet, d["obs"], d["last_next_obs"])
    adv = compute_gae(d["rew"], values, d["done"], hyper.gamma, hyper.lam)
    data = {
        "obs": d["obs"],
        "act": d["act"],
        "logp_old": d["logp_old"],
        "adv": normalize_advantages(adv) if hyper.adv_norm else adv,
        "vtarget": values[:-1] + adv,
    }
    stats = update_networks(
        policy, vnet, opt_policy, opt_value, data, hyper, shuffle_rng
    )
    return stats, adv


@dataclass
class EpisodeStats:
    episode: int
    steps: int
    K: int
    ret: float
    ecf: float
    tir: float
    aurr: float


@dataclass
class UpdateSnapshot:
    """Debug capture of one update, for equivalence and regression tests."""

    advantages: np.ndarray
    stats: UpdateStats
    params: list[np.ndarray] = field(default_factory=list)


class PpoTrainer:
    """Plain-MDP PPO: a fresh Gaussian action every 3-minute step.

    Reward is the in-range indicator of the CGM value the action was
    chosen on. Used directly as the periodic-update baseline.
    """

    method = "ppo"

    def __init__(
        self,
        patient,
        rngs: RngBundle,
        hyper: HyperParams = HyperParams(),
        episode_cfg: EpisodeConfig = EpisodeConfig(),
        reward_cfg: RewardConfig = RewardConfig(),
        sensor: SensorConfig = SensorConfig(),
        pump: PumpConfig = PumpConfig(),
        meal_specs=DEFAULT_MEAL_SPECS,
        record_updates: bool = False,
    ):
        self.patient = patient
        self.rngs = rngs
        self.hyper = hyper
        self.reward_cfg = reward_cfg
        self.pump = pump
        self.meal_specs = meal_specs
        self.env = ApEnv(patient, episode_cfg, sensor, pump)
        # Net creation order (actor, then critic) is part of the seeding
        # contract; both trainers that share stream semantics follow it.
        self.policy = GaussianPolicy.create(2, 1, rngs.net_init)
        self.vnet = ValueNet.create(2, rngs.net_init)
        self.opt_policy = OptimizerState(lr=hyper.lr)
        self.opt_value = OptimizerState(lr=hyper.lr)
        self.buffer = RolloutBuffer(hyper.buffer_size)
        self.record_updates = record_updates
        self.updates: list[UpdateStats] = []
        self.snapshots: list[UpdateSnapshot] = []
        self.n_days = max(
            1, math.ceil(episode_cfg.horizon * episode_cfg.step_minutes / 1440.0)
        )

    def _maybe_update(self) -> None:
        if not self.buffer.full:
            return
        stats, adv = ppo_update(
            self.buffer, self.policy, self.vnet,
            self.opt_policy, self.opt_value, self.hyper, self.rngs.shuffle,
        )
        self.updates.append(stats)
        if self.record_updates:
            self.snapshots.append(UpdateSnapshot(
                advantages=adv,
                stats=stats,
                params=[p.copy() for p in self.policy.params() + self.vnet.params()],
            ))
        self.buffer.clear()

    def act_raw_to_rate(self, a_raw: np.ndarray) -> float:
        """Normalized unsquashed action -> pump rate [U/min]."""
        return float(np.clip(a_raw[0], 0.0, 1.0)) * self.pump.u_max

    def run_episode(self, episode_idx: int = 0) -> EpisodeStats:
        env = self.env
        scenario = generate_episode_scenario(
            self.meal_specs, self.rngs.scenario, self.n_days
        )
        obs = env.reset(scenario, self.rngs.plant_noise, self.rngs.init_state,
                        training=True)
        ep_ret = 0.0
        while not env.done:
            x = obs_vec(obs, self.pump)
            a_raw, logp = self.policy.sample(x, self.rngs.policy)
            r = reward_r1(obs.y, self.reward_cfg)
            env.log_reward(r)
            obs_next, done = env.step(self.act_raw_to_rate(a_raw), event=True)
            self.buffer.add(x, a_raw, r, done, logp, obs_vec(obs_next, self.pump))
            ep_ret += r
            obs = obs_next
            self._maybe_update()
        t = env.steps
        rec = EpisodeRecord(
            T=t, H=env.cfg.horizon, y_trace=tuple(env.y_trace), K=t,
            update_times=tuple(range(t)), thresholds=None,
        )
        return EpisodeStats(episode_idx, t, t, ep_ret, ecf(rec), tir(rec), aurr(rec))

    def train(self, episodes: int) -> list[EpisodeStats]:
        return [self.run_episode(i) for i in range(episodes)]

    def greedy_rate(self, obs: Observation) -> float:
        """Deterministic evaluation action: the Gaussian mean, squashed."""
        mean = self.policy.net.forward(obs_vec(obs, self.pump)[None, :])[0]
        return self.act_raw_to_rate(mean)
