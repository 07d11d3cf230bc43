"""Virtual patient: glucose-insulin dynamics, CGM sensor, insulin pump.

The plant is a 13-compartment ODE in the style of the UVA/Padova simulator:
a three-compartment oral carbohydrate chain, two glucose masses, a
five-compartment insulin subsystem (two subcutaneous depots, plasma, liver,
remote action), a two-stage delayed insulin signal acting on endogenous
glucose production, and a lagged subcutaneous glucose compartment that the
CGM samples. All dynamics are linear in the state except one bilinear
insulin-action term x_remote * g_p.

Units: q_* mg; g_p, g_t, g_sc mg/kg; insulin compartments pmol/kg;
u U/min; d mg/min; CGM output mg/dL; time minutes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np


class PlantDivergedError(RuntimeError):
    """Raised when the plant state or inputs stop being finite."""


class PatientState(NamedTuple):
    """One plant state. Field order is fixed and part of the file formats."""

    q_sto1: float  # stomach, solid phase [mg]
    q_sto2: float  # stomach, liquid phase [mg]
    q_gut: float  # gut [mg]
    g_p: float  # plasma glucose [mg/kg]
    g_t: float  # slowly-equilibrating tissue glucose [mg/kg]
    i_p: float  # plasma insulin [pmol/kg]
    x_remote: float  # remote insulin action [pmol/kg]
    i_1: float  # delayed insulin signal, stage 1 [pmol/kg]
    i_d: float  # delayed insulin signal, stage 2 [pmol/kg]
    i_l: float  # liver insulin [pmol/kg]
    i_sc1: float  # subcutaneous insulin, depot 1 [pmol/kg]
    i_sc2: float  # subcutaneous insulin, depot 2 [pmol/kg]
    g_sc: float  # subcutaneous glucose [mg/kg]


@dataclass(frozen=True, slots=True)
class PatientParams:
    """Parameter set of one synthetic patient, including its basal point.

    The basal fields describe the steady state of the ODE under constant
    u = u_basal and d = 0; loaders verify this invariant numerically.
    """

    name: str
    bw: float  # body weight [kg]
    v_g: float  # glucose distribution volume [dL/kg]
    f_abs: float  # fraction of absorbed carbohydrate reaching plasma
    u_ii: float  # insulin-independent glucose utilization [mg/kg/min]
    k_gri: float  # stomach grinding rate [1/min]
    k_empt: float  # gastric emptying rate [1/min]
    k_abs: float  # intestinal absorption rate [1/min]
    k_p1: float  # endogenous production at zero glucose/insulin [mg/kg/min]
    k_p2: float  # production sensitivity to plasma glucose [1/min]
    k_p3: float  # production sensitivity to delayed insulin [mg/kg/min per pmol/kg]
    k_x: float  # insulin-dependent utilization gain [1/min per pmol/kg]
    k_1: float  # glucose exchange plasma -> tissue [1/min]
    k_2: float  # glucose exchange tissue -> plasma [1/min]
    k_i: float  # delayed insulin signal rate [1/min]
    k_sc: float  # subcutaneous glucose equilibration rate [1/min]
    k_d: float  # subcutaneous depot 1 -> 2 transfer [1/min]
    k_a1: float  # absorption from depot 1 [1/min]
    k_a2: float  # absorption from depot 2 [1/min]
    m_1: float  # insulin flux liver -> plasma [1/min]
    m_2: float  # insulin flux plasma -> liver [1/min]
    m_3: float  # hepatic insulin degradation [1/min]
    m_4: float  # peripheral insulin degradation [1/min]
    p_2u: float  # remote insulin action rate [1/min]
    u_basal: float  # basal pump rate [U/min]
    y_basal: float  # basal CGM level [mg/dL]
    basal: PatientState


@dataclass(frozen=True)
class SensorConfig:
    """CGM noise model: stationary AR(1) added to the true reading."""

    phi: float = 0.7  # AR(1) coefficient
    sigma: float = 5.0  # stationary standard deviation [mg/dL]


@dataclass(frozen=True)
class PumpConfig:
    """Pump actuation limits [U/min]."""

    u_min: float = 0.0
    u_max: float = 0.15


# 1 U of insulin = 6000 pmol.
PMOL_PER_UNIT = 6000.0


def rhs(state: Sequence[float], u: float, d: float, params: PatientParams) -> tuple:
    """Time derivative of the plant state.

    u is the pump rate [U/min] and d the carbohydrate delivery rate
    [mg/min], both held constant over the evaluation (zero-order hold).
    """
    (q_sto1, q_sto2, q_gut, g_p, g_t, i_p, x_remote,
     i_1, i_d, i_l, i_sc1, i_sc2, g_sc) = state

    probe = (q_sto1 + q_sto2 + q_gut + g_p + g_t + i_p + x_remote
             + i_1 + i_d + i_l + i_sc1 + i_sc2 + g_sc + u + d)
    if not math.isfinite(probe):
        raise PlantDivergedError("plant-diverged: non-finite state or input")

    p = params
    ra = p.f_abs * p.k_abs * q_gut / p.bw
    egp = p.k_p1 - p.k_p2 * g_p - p.k_p3 * i_d
    r_iu = PMOL_PER_UNIT * u / p.bw

    return (
        -p.k_gri * q_sto1 + d,
        p.k_gri * q_sto1 - p.k_empt * q_sto2,
        p.k_empt * q_sto2 - p.k_abs * q_gut,
        egp + ra - p.u_ii - p.k_1 * g_p + p.k_2 * g_t - p.k_x * x_remote * g_p,
        p.k_1 * g_p - p.k_2 * g_t,
        -(p.m_2 + p.m_4) * i_p + p.m_1 * i_l + p.k_a1 * i_sc1 + p.k_a2 * i_sc2,
        -p.p_2u * (x_remote - i_p),
        -p.k_i * (i_1 - i_p),
        -p.k_i * (i_d - i_1),
        p.m_2 * i_p - (p.m_1 + p.m_3) * i_l,
        -(p.k_d + p.k_a1) * i_sc1 + r_iu,
        p.k_d * i_sc1 - p.k_a2 * i_sc2,
        -p.k_sc * (g_sc - g_p),
    )


def rk4_update(f: Callable[[tuple], tuple], x: Sequence[float], dt: float) -> tuple:
    """One classical fourth-order Runge-Kutta step of x' = f(x).

    Works on plain tuples of floats so it can integrate any small system,
    not just the plant.
    """
    k1 = f(tuple(x))
    h = 0.5 * dt
    k2 = f(tuple(xi + h * ki for xi, ki in zip(x, k1)))
    k3 = f(tuple(xi + h * ki for xi, ki in zip(x, k2)))
    k4 = f(tuple(xi + dt * ki for xi, ki in zip(x, k3)))
    s = dt / 6.0
    return tuple(
        xi + s * (a + 2.0 * (b + c) + e)
        for xi, a, b, c, e in zip(x, k1, k2, k3, k4)
    )


def rk4_step(
    state: PatientState, u: float, d: float, dt: float, params: PatientParams
) -> PatientState:
    """Advance the plant by dt minutes under constant (u, d).

    Compartments are clamped to be non-negative after the step; the clamp
    guards against integrator overshoot near zero, not against instability.
    """
    nxt = rk4_update(lambda s: rhs(s, u, d, params), state, dt)
    return PatientState._make(v if v > 0.0 else 0.0 for v in nxt)


def cgm_read(
    state: PatientState,
    params: PatientParams,
    sensor: SensorConfig,
    noise: float,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Sample the CGM: y = g_sc / v_g + AR(1) noise.

    The noise state advances first and the fresh value is what the sensor
    reports, so the very first read after a reset is already noisy. One
    normal variate is consumed per read even when sigma = 0, keeping RNG
    stream consumption independent of the noise configuration.
    """
    w = rng.standard_normal() * (sensor.sigma * math.sqrt(1.0 - sensor.phi**2))
    noise_next = sensor.phi * noise + w
    y = state.g_sc / params.v_g + noise_next
    return y, noise_next


def pump_command(u: float, pump: PumpConfig) -> float:
    """Clamp a requested rate to the pump's actuation range."""
    if not math.isfinite(u):
        raise ValueError("invalid-command: pump rate must be finite")
    return min(max(u, pump.u_min), pump.u_max)
