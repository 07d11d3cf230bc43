"""Episode semantics over the plant.

Time is discretized at a 3-minute control grid; each control step holds the
commanded pump rate (zero-order hold) over three 1-minute RK4 substeps with
the scenario's carbohydrate delivery rate sampled at each substep start.
Episodes terminate at the horizon or when the CGM leaves (10, 600) mg/dL.

Per-step rewards follow the convention that the reward credited to step h
is computed from the observation the controller acted on (the pre-step
CGM), so the terminal observation itself is never rewarded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .plant import (
    PatientParams,
    PatientState,
    PumpConfig,
    SensorConfig,
    cgm_read,
    pump_command,
    rk4_step,
)
from .scenario import MealScenario, meal_rate_at


class EpisodeFinishedError(RuntimeError):
    """Raised when the environment is stepped after termination."""


class Observation(NamedTuple):
    y: float  # latest CGM value [mg/dL]
    u_prev: float  # previously applied pump rate [U/min]


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 960  # control steps (48 h at 3 min)
    step_minutes: float = 3.0
    ode_dt: float = 1.0
    hypo_threshold: float = 10.0  # terminate when y <= this [mg/dL]
    hyper_threshold: float = 600.0  # or y >= this [mg/dL]
    init_spread: float = 0.1  # training reset: sd as fraction of the mean

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.hypo_threshold >= self.hyper_threshold:
            raise ValueError("hypo threshold must lie below hyper threshold")
        n = self.step_minutes / self.ode_dt
        if abs(n - round(n)) > 1e-12 or round(n) < 1:
            raise ValueError("step_minutes must be an integer multiple of ode_dt")

    @property
    def substeps(self) -> int:
        return int(round(self.step_minutes / self.ode_dt))


@dataclass(frozen=True)
class RewardConfig:
    """Constants of the reward terms.

    R1 pays 1 per step with CGM in [range_lo, range_hi]. R2, used by the
    trigger-based trainer, additionally pays (ell - c)/C for an in-range
    step held ell steps after the last insulin update. eta_e is the
    per-update penalty of the factored-policy trainer.
    """

    c: float = 5.0
    C: float = 10.0
    eta_e: float = 0.1
    range_lo: float = 70.0
    range_hi: float = 180.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.eta_e < 0:
            raise ValueError("eta_e must be non-negative")
        if self.range_lo >= self.range_hi:
            raise ValueError("range_lo must lie below range_hi")


def reward_r1(y: float, cfg: RewardConfig = RewardConfig()) -> float:
    """1 inside the target range (inclusive), else 0."""
    return 1.0 if cfg.range_lo <= y <= cfg.range_hi else 0.0


def reward_r2(y: float, ell: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Holding bonus: (ell - c)/C while in range, else 0."""
    if cfg.range_lo <= y <= cfg.range_hi:
        return (ell - cfg.c) / cfg.C
    return 0.0


def reward_het(y: float, e: int, cfg: RewardConfig = RewardConfig()) -> float:
    """In-range reward minus the update penalty eta_e * e."""
    return reward_r1(y, cfg) - cfg.eta_e * e


class Transition(NamedTuple):
    s: Observation
    a: np.ndarray
    r: float
    s_next: Observation
    done: int


# Observation normalization for the networks.
Y_NORM = 600.0


def obs_vec(obs: Observation, pump: PumpConfig) -> np.ndarray:
    """Map an observation into the normalized network input space."""
    return np.array([obs.y / Y_NORM, obs.u_prev / pump.u_max])


class ApEnv:
    """One artificial-pancreas episode at a time.

    The environment keeps a per-episode trace (CGM, applied rate, event
    flags, rewards) that the metrics pipeline consumes. Rewards are pushed
    by the caller via log_reward, because only the trainer knows which
    reward function is in force; the hold loop does this itself.
    """

    def __init__(
        self,
        patient: PatientParams,
        episode_cfg: EpisodeConfig = EpisodeConfig(),
        sensor: SensorConfig = SensorConfig(),
        pump: PumpConfig = PumpConfig(),
    ):
        self.patient = patient
        self.cfg = episode_cfg
        self.sensor = sensor
        self.pump = pump
        self._scenario: MealScenario | None = None
        self._noise_rng: np.random.Generator | None = None
        self._done = True

    def reset(
        self,
        scenario: MealScenario,
        noise_rng: np.random.Generator,
        init_rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> Observation:
        """Start a new episode; returns the first observation.

        Training resets resample the glucose states g_p, g_t, g_sc from
        N(mu, (spread*mu)^2) truncated at zero (in that draw order);
        evaluation resets use the basal state as-is.
        """
        self._scenario = scenario
        self._noise_rng = noise_rng
        state = self.patient.basal
        if training:
            if init_rng is None:
                raise ValueError("training reset needs an init-state rng")
            spread = self.cfg.init_spread
            g_p = max(0.0, init_rng.normal(state.g_p, spread * state.g_p))
            g_t = max(0.0, init_rng.normal(state.g_t, spread * state.g_t))
            g_sc = max(0.0, init_rng.normal(state.g_sc, spread * state.g_sc))
            state = state._replace(g_p=g_p, g_t=g_t, g_sc=g_sc)
        self._state = state
        self._noise = 0.0
        self._t = 0.0
        self._steps = 0
        self._done = False
        self._u_prev = 0.0
        y, self._noise = cgm_read(state, self.patient, self.sensor, self._noise, noise_rng)
        self._y = y
        # Per-episode trace. y_trace holds y_0 .. y_T; the other lists hold
        # one entry per completed step.
        self.y_trace: list[float] = [y]
        self.u_trace: list[float] = []
        self.event_trace: list[int] = []
        self.reward_trace: list[float] = []
        return Observation(y, self._u_prev)

    @property
    def y(self) -> float:
        return self._y

    @property
    def t(self) -> float:
        return self._t

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def done(self) -> bool:
        return self._done

    def observation(self) -> Observation:
        return Observation(self._y, self._u_prev)

    def step(self, u: float, event: bool = False) -> tuple[Observation, bool]:
        """Apply u for one control period; returns (observation, done).

        `event` marks steps at which the controller freshly decided the
        command; it only feeds the trace log.
        """
        if self._done:
            raise EpisodeFinishedError("episode-finished: reset before stepping again")
        u_cmd = pump_command(u, self.pump)
        state = self._state
        cfg = self.cfg
        for j in range(cfg.substeps):
            d = meal_rate_at(self._t + j * cfg.ode_dt, self._scenario)
            state = rk4_step(state, u_cmd, d, cfg.ode_dt, self.patient)
        self._state = state
        self._t += cfg.step_minutes
        self._steps += 1
        y, self._noise = cgm_read(state, self.patient, self.sensor, self._noise, self._noise_rng)
        self._y = y
        self._u_prev = u_cmd
        if self._steps >= cfg.horizon or not (cfg.hypo_threshold < y < cfg.hyper_threshold):
            self._done = True
        self.y_trace.append(y)
        self.u_trace.append(u_cmd)
        self.event_trace.append(1 if event else 0)
        return Observation(y, u_cmd), self._done

    def log_reward(self, r: float) -> None:
        """Record the reward credited to the most recently decided step."""
        self.reward_trace.append(r)


class HoldResult(NamedTuple):
    reward: float  # R_k: gamma-discounted sum over the held steps
    tau: int  # steps the command was held (>= 1)
    obs: Observation  # observation at the next decision epoch
    done: bool


def hold_until_trigger(
    env: ApEnv,
    u: float,
    eta: float,
    gamma: float,
    reward_fn: Callable[[float, int], float],
) -> HoldResult:
    """Hold u until the CGM moves at least eta from its start value.

    Steps the environment with the held command, accumulating
    R_k = sum_i gamma^i * reward_fn(y_i, i) over the held steps, where y_i
    is the CGM the i-th held step starts from (i = 0 at the decision).
    Stops after the first step whose fresh CGM satisfies
    |y - y_start| >= eta, or when the episode ends mid-hold.
    """
    if env.done:
        raise EpisodeFinishedError("episode-finished: reset before stepping again")
    if eta < 0:
        raise ValueError("trigger threshold must be non-negative")
    if not math.isfinite(eta):
        raise ValueError("trigger threshold must be finite")
    y_start = env.y
    total = 0.0
    disc = 1.0
    tau = 0
    while True:
        r = reward_fn(env.y, tau)
        env.log_reward(r)
        obs, done = env.step(u, event=(tau == 0))
        total += disc * r
        tau += 1
        disc *= gamma
        if done or abs(env.y - y_start) >= eta:
            return HoldResult(total, tau, obs, done)
