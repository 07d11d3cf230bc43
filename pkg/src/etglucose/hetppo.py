"""Event-augmented PPO: the policy decides *whether* to update the pump.

Each step the policy emits a factored action (e, u): a Bernoulli event
flag from a logit head and, only when e = 1, a fresh Gaussian insulin
command from a mean head sharing the same trunk. Between events the last
commanded value is held. The per-step reward subtracts a fixed charge
eta_e for every event, so the agent trades regulation quality against
communication.

The clipped-surrogate objective factors the same way: a Bernoulli ratio
term over every step plus a Gaussian ratio term over the event steps
only, both driven by the same advantage estimates.

With pin_events=True the event head is removed outright: every step is
an event, no Bernoulli is drawn, and no event charge applies. That mode
reproduces the plain per-step trainer exactly, update for update.
"""
from __future__ import annotations

import math

import numpy as np

from .env import ApEnv, EpisodeConfig, Observation, RewardConfig, obs_vec, reward_het
from .metrics import EpisodeRecord, aurr, ecf, tir
from .neural import (
    GaussianPolicy,
    HetPolicy,
    OptimizerState,
    ValueNet,
    bernoulli_logprob_entropy,
    gaussian_logprob_entropy,
    sigmoid,
)
from .plant import PumpConfig, SensorConfig
from .ppo import (
    EpisodeStats,
    HyperParams,
    RolloutBuffer,
    UpdateSnapshot,
    UpdateStats,
    compute_gae,
    gaussian_policy_grads,
    normalize_advantages,
    update_networks,
    values_with_bootstrap,
)
from .scenario import DEFAULT_MEAL_SPECS, generate_episode_scenario
from .seeding import RngBundle


def factored_sample(
    policy: HetPolicy, x: np.ndarray, rng: np.random.Generator
) -> tuple[int, float, float, float]:
    """Draw (e, u) for one observation; returns (e, u_raw, logp_e, logp_u).

    Consumes one uniform for the event flag and one normal only when the
    flag comes up 1. On e = 0 the insulin component is not sampled;
    u_raw and logp_u are returned as 0 and must be masked downstream.
    """
    mean, logit = policy.heads(x[None, :])
    p = float(sigmoid(logit[0]))
    e = 1 if rng.random() < p else 0
    lp_e, _ = bernoulli_logprob_entropy(np.asarray([logit[0]]), np.asarray([float(e)]))
    if e == 0:
        return 0, 0.0, float(lp_e[0]), 0.0
    u_raw = float(mean[0] + np.exp(policy.log_std[0]) * rng.standard_normal())
    lp_u, _ = gaussian_logprob_entropy(
        mean[:, None], policy.log_std, np.asarray([[u_raw]])
    )
    return 1, u_raw, float(lp_e[0]), float(lp_u[0])


class HetBuffer:
    """Per-step buffer whose action and log-prob carry both factors.

    act rows are [u_raw, e]; logp rows are [logp_u, logp_e]. Non-event
    rows carry the held command and a zero logp in the insulin slots;
    neither enters the objective.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.clear()

    def clear(self) -> None:
        self.obs: list[np.ndarray] = []
        self.act: list[np.ndarray] = []
        self.rew: list[float] = []
        self.done: list[float] = []
        self.logp: list[np.ndarray] = []
        self.last_next_obs: np.ndarray | None = None

    def add(self, obs, e, u_raw, reward, done, logp_e, logp_u, next_obs) -> None:
        if self.full:
            raise ValueError("buffer already full")
        self.obs.append(np.asarray(obs, dtype=float))
        self.act.append(np.asarray([u_raw, float(e)]))
        self.rew.append(float(reward))
        self.done.append(1.0 if done else 0.0)
        self.logp.append(np.asarray([logp_u, logp_e]))
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
            "logp_old": np.stack(self.logp),
            "last_next_obs": self.last_next_obs,
        }


def het_policy_grads(
    policy: HetPolicy,
    obs: np.ndarray,
    act: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    hyper: HyperParams,
) -> tuple[float, list[np.ndarray], dict]:
    """Factored clipped surrogate and gradients of its negation.

    The Bernoulli term averages over the whole minibatch; the Gaussian
    term averages over its event rows only (zero if there are none).
    Both heads get an entropy bonus. Shapes: act (B, 2) as [u_raw, e],
    logp_old (B, 2) as [logp_u, logp_e].
    """
    out, acts = policy.net.forward_cached(obs)
    u_mean, logit = out[:, 0], out[:, 1]
    b = len(adv)
    e = act[:, 1]
    eps = hyper.clip_eps

    # Event factor, every row.
    lp_e_new, ent_e = bernoulli_logprob_entropy(logit, e)
    ratio_e = np.exp(lp_e_new - logp_old[:, 1])
    u1 = ratio_e * adv
    u2 = np.clip(ratio_e, 1.0 - eps, 1.0 + eps) * adv
    j_event = float(np.minimum(u1, u2).mean())
    dlp_e = np.where(u1 <= u2, ratio_e * adv, 0.0) / b
    p = sigmoid(logit)
    dlogit = dlp_e * (e - p)
    # d entropy(e) / d logit = -logit * p * (1 - p)
    dlogit += hyper.c_ent * (-logit * p * (1.0 - p)) / b

    # Insulin factor, event rows only.
    idx = np.flatnonzero(e == 1.0)
    m = len(idx)
    std = float(np.exp(policy.log_std[0]))
    ent_u = float(0.5 * (math.log(2.0 * math.pi) + 1.0) + policy.log_std[0])
    dmean = np.zeros(b)
    dlog_std = np.zeros(1)
    j_insulin = 0.0
    mean_ratio_u = 1.0
    clip_u = 0.0
    if m > 0:
        z = (act[idx, 0] - u_mean[idx]) / std
        lp_u_new = -0.5 * (z * z + math.log(2.0 * math.pi)) - policy.log_std[0]
        ratio_u = np.exp(lp_u_new - logp_old[idx, 0])
        w1 = ratio_u * adv[idx]
        w2 = np.clip(ratio_u, 1.0 - eps, 1.0 + eps) * adv[idx]
        j_insulin = float(np.minimum(w1, w2).sum()) / m
        dlp_u = np.where(w1 <= w2, ratio_u * adv[idx], 0.0) / m
        dmean[idx] = dlp_u * z / std
        dlog_std[0] = float((dlp_u * (z * z - 1.0)).sum())
        mean_ratio_u = float(ratio_u.mean())
        clip_u = float((np.abs(ratio_u - 1.0) > eps).sum())
    dlog_std[0] += hyper.c_ent

    entropy = ent_u + float(ent_e.mean())
    objective = j_event + j_insulin + hyper.c_ent * entropy

    dout = np.stack([dmean, dlogit], axis=1)
    grads = policy.net.backward(acts, -dout)
    grads.append(-dlog_std)
    diag = {
        "mean_ratio": 0.5 * (float(ratio_e.mean()) + mean_ratio_u),
        "clip_frac": (float((np.abs(ratio_e - 1.0) > eps).sum()) + clip_u)
        / (b + max(m, 1)),
        "entropy": entropy,
    }
    return objective, grads, diag


def hetppo_update(
    buffer: HetBuffer,
    policy: HetPolicy,
    vnet: ValueNet,
    opt_policy: OptimizerState,
    opt_value: OptimizerState,
    hyper: HyperParams,
    shuffle_rng: np.random.Generator,
) -> tuple[UpdateStats, np.ndarray]:
    """Per-step PPO update with the factored objective."""
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
        policy, vnet, opt_policy, opt_value, data, hyper, shuffle_rng,
        policy_grads_fn=het_policy_grads,
    )
    return stats, adv


class HetppoTrainer:
    """Per-step trainer with a learned when-to-transmit head.

    Between events the pump keeps the last commanded value (the raw
    sample is what is held, so the executed rate stays constant). Before
    the first event of an episode the held command is zero insulin.
    """

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
        pin_events: bool = False,
        record_updates: bool = False,
    ):
        self.patient = patient
        self.rngs = rngs
        self.hyper = hyper
        self.reward_cfg = reward_cfg
        self.pump = pump
        self.meal_specs = meal_specs
        self.pin_events = pin_events
        self.env = ApEnv(patient, episode_cfg, sensor, pump)
        # Actor then critic, from the shared net-init stream.
        if pin_events:
            self.policy = GaussianPolicy.create(2, 1, rngs.net_init)
            self.buffer: HetBuffer | RolloutBuffer = RolloutBuffer(hyper.buffer_size)
        else:
            self.policy = HetPolicy.create(2, rngs.net_init)
            self.buffer = HetBuffer(hyper.buffer_size)
        self.vnet = ValueNet.create(2, rngs.net_init)
        self.opt_policy = OptimizerState(lr=hyper.lr)
        self.opt_value = OptimizerState(lr=hyper.lr)
        self.record_updates = record_updates
        self.updates: list[UpdateStats] = []
        self.snapshots: list[UpdateSnapshot] = []
        self.n_days = max(
            1, math.ceil(episode_cfg.horizon * episode_cfg.step_minutes / 1440.0)
        )

    method = "hetppo"

    def held_to_rate(self, u_raw: float) -> float:
        return float(np.clip(u_raw, 0.0, 1.0)) * self.pump.u_max

    def _maybe_update(self) -> None:
        if not self.buffer.full:
            return
        if self.pin_events:
            from .ppo import ppo_update

            stats, adv = ppo_update(
                self.buffer, self.policy, self.vnet,
                self.opt_policy, self.opt_value, self.hyper, self.rngs.shuffle,
            )
        else:
            stats, adv = hetppo_update(
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

    def run_episode(self, episode_idx: int = 0) -> EpisodeStats:
        env = self.env
        scenario = generate_episode_scenario(
            self.meal_specs, self.rngs.scenario, self.n_days
        )
        obs = env.reset(scenario, self.rngs.plant_noise, self.rngs.init_state,
                        training=True)
        ep_ret = 0.0
        held = 0.0  # raw commanded value; zero insulin until the first event
        event_steps: list[int] = []
        while not env.done:
            x = obs_vec(obs, self.pump)
            if self.pin_events:
                a_raw, logp = self.policy.sample(x, self.rngs.policy)
                r = reward_het(obs.y, 0, self.reward_cfg)
                env.log_reward(r)
                event_steps.append(env.steps)
                obs_next, done = env.step(
                    self.held_to_rate(float(a_raw[0])), event=True
                )
                self.buffer.add(x, a_raw, r, done, logp, obs_vec(obs_next, self.pump))
            else:
                e, u_raw, lp_e, lp_u = factored_sample(
                    self.policy, x, self.rngs.policy
                )
                if e:
                    held = u_raw
                    event_steps.append(env.steps)
                r = reward_het(obs.y, e, self.reward_cfg)
                env.log_reward(r)
                obs_next, done = env.step(self.held_to_rate(held), event=bool(e))
                # Non-event rows store the held command; the objective
                # masks their insulin slot out either way.
                self.buffer.add(x, e, held, r, done, lp_e, lp_u,
                                obs_vec(obs_next, self.pump))
            ep_ret += r
            obs = obs_next
            self._maybe_update()
        t = env.steps
        rec = EpisodeRecord(
            T=t, H=env.cfg.horizon, y_trace=tuple(env.y_trace),
            K=len(event_steps), update_times=tuple(event_steps), thresholds=None,
        )
        return EpisodeStats(
            episode_idx, t, rec.K, ep_ret, ecf(rec), tir(rec), aurr(rec)
        )

    def train(self, episodes: int) -> list[EpisodeStats]:
        return [self.run_episode(i) for i in range(episodes)]

    def greedy_event(self, obs: Observation, held: float) -> tuple[int, float]:
        """Deterministic action: event iff p >= 1/2, insulin at the mean.

        held is the raw commanded value carried between events; returns
        (e, new held). Callers execute held_to_rate(new held).
        """
        x = obs_vec(obs, self.pump)[None, :]
        if self.pin_events:
            mean = self.policy.net.forward(x)[0]
            return 1, float(mean[0])
        mean, logit = self.policy.heads(x)
        if logit[0] >= 0.0:
            return 1, float(mean[0])
        return 0, held
