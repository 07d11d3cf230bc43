"""Run orchestration: training, greedy evaluation, tuning, export, sweeps.

Directory layout under the output base:

    <method>/<patient>/seed_<s>/
        checkpoint.npz        final parameters + optimizer state (RL methods)
        checkpoint_ep<N>.npz  periodic checkpoints when configured
        gains.yaml            tuned gains (pid)
        train_log.csv         per-episode training statistics
        updates.csv           per-update optimizer diagnostics
        metrics.csv           per-scenario evaluation metrics + mean row
        eval_trace_scen<i>.csv  per-step evaluation traces
        hist.csv              (interval-average CGM, threshold) counts
        plotdata/             export-plots output

Evaluation always runs the policy greedily (Gaussian mean, event iff
p >= 1/2) on the five fixed scenarios under fixed sensor-noise streams,
so a (config, seed) pair maps to byte-identical metrics.csv content.
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import yaml

from .cgmetppo import CgmEtppoTrainer
from .config import ConfigError, ExperimentConfig, MatrixConfig
from .env import ApEnv, hold_until_trigger, obs_vec
from .hetppo import HetppoTrainer
from .metrics import (
    EpisodeRecord,
    aggregate,
    aurr,
    ecf,
    interval_avg_hist,
    tir,
)
from .neural import (
    GaussianPolicy,
    HetPolicy,
    ValueNet,
    load_checkpoint,
    pack_mlp,
    pack_opt,
    save_checkpoint,
    unpack_mlp,
)
from .patients import default_cohort, load_cohort
from .pid import PidGains, PidState, grid_search_pid, pid_output
from .plant import PumpConfig
from .ppo import PpoTrainer
from .scenario import default_eval_scenarios, meal_rate_at
from .seeding import RngBundle, eval_noise_stream

log = logging.getLogger(__name__)

TRACE_HEADER = "step,t_min,y,u,event,eta"
METRICS_HEADER = "patient,method,seed,scenario,ecf,tir,aurr"
# Histogram bins for the (interval-average CGM, threshold) counts.
CGM_HIST_EDGES = np.arange(40.0, 401.0, 20.0)
ETA_HIST_EDGES = np.arange(15.0, 26.0, 1.0)


def patient_slug(name: str) -> str:
    return name.replace("#", "-")


def run_dir(out_base: str | Path, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(out_base) / cfg.method / patient_slug(cfg.patient) / f"seed_{seed}"


def get_cohort(cfg: ExperimentConfig):
    if cfg.cohort_file is not None:
        if not Path(cfg.cohort_file).exists():
            raise ConfigError(f"cohort file not found: {cfg.cohort_file}")
        return load_cohort(cfg.cohort_file)
    return default_cohort()


def resolve_patient(cfg: ExperimentConfig):
    cohort = get_cohort(cfg)
    for p in cohort:
        if p.name == cfg.patient:
            return p
    known = ", ".join(p.name for p in cohort)
    raise ConfigError(f"unknown patient {cfg.patient!r}; cohort has: {known}")


def build_trainer(cfg: ExperimentConfig, patient, seed: int):
    rngs = RngBundle.from_master(seed)
    common = dict(
        hyper=cfg.hyper, episode_cfg=cfg.episode, reward_cfg=cfg.reward,
        sensor=cfg.sensor, pump=cfg.pump,
    )
    if cfg.method == "ppo":
        return PpoTrainer(patient, rngs, **common)
    if cfg.method == "hetppo":
        return HetppoTrainer(patient, rngs, pin_events=cfg.pin_events, **common)
    scheme = "fixed" if cfg.method == "cgmetppo-fixed" else "variable"
    trigger = dataclasses.replace(cfg.trigger, scheme=scheme)
    return CgmEtppoTrainer(
        patient, rngs, trigger=trigger, r1_only=cfg.r1_only, **common
    )


# ---------------------------------------------------------------------------
# Checkpoints


def trainer_arrays(trainer) -> dict[str, np.ndarray]:
    arrays = pack_mlp("policy", trainer.policy.net)
    arrays["policy_log_std"] = trainer.policy.log_std
    arrays.update(pack_mlp("value", trainer.vnet.net))
    arrays.update(pack_opt("opt_policy", trainer.opt_policy))
    arrays.update(pack_opt("opt_value", trainer.opt_value))
    arrays["pin_events"] = np.asarray(
        int(getattr(trainer, "pin_events", False)), dtype=np.int64
    )
    return arrays


def save_trainer(trainer, path: Path) -> None:
    save_checkpoint(path, trainer.method, trainer_arrays(trainer))


def load_policy(path: Path) -> tuple[str, object, ValueNet, bool]:
    """Rebuild (method, policy, value net, pin_events) from a checkpoint."""
    method, data = load_checkpoint(path)
    net = unpack_mlp("policy", data)
    log_std = np.array(data["policy_log_std"], dtype=float)
    pin = bool(int(data.get("pin_events", 0)))
    if method == "hetppo" and not pin:
        policy: object = HetPolicy(net, log_std)
    else:
        policy = GaussianPolicy(net, log_std)
    vnet = ValueNet(unpack_mlp("value", data))
    return method, policy, vnet, pin


# ---------------------------------------------------------------------------
# Greedy evaluation rollouts. Each returns (EpisodeRecord, trace rows);
# a trace row is (step, t_min, y, u, event, eta_text) with y the CGM the
# step's command was decided on.


def _trace_rows(env: ApEnv, etas_by_step: list[str]) -> list[tuple]:
    rows = []
    dt = env.cfg.step_minutes
    for h in range(env.steps):
        rows.append((
            h, h * dt, env.y_trace[h], env.u_trace[h], env.event_trace[h],
            etas_by_step[h],
        ))
    return rows


def _squash_rate(mean_raw: float, pump: PumpConfig) -> float:
    return float(np.clip(mean_raw, 0.0, 1.0)) * pump.u_max


def roll_pid(patient, gains: PidGains, scenario, noise_rng, cfg: ExperimentConfig):
    env = ApEnv(patient, cfg.episode, cfg.sensor, cfg.pump)
    obs = env.reset(scenario, noise_rng)
    state = PidState()
    while not env.done:
        u, state = pid_output(gains, state, obs.y, cfg.episode.step_minutes, cfg.pump)
        obs, _ = env.step(u, event=True)
    t = env.steps
    rec = EpisodeRecord(
        T=t, H=cfg.episode.horizon, y_trace=tuple(env.y_trace),
        K=t, update_times=tuple(range(t)), thresholds=None,
    )
    return rec, _trace_rows(env, [""] * t)


def roll_ppo(patient, policy: GaussianPolicy, scenario, noise_rng,
             cfg: ExperimentConfig):
    env = ApEnv(patient, cfg.episode, cfg.sensor, cfg.pump)
    obs = env.reset(scenario, noise_rng)
    while not env.done:
        mean = policy.net.forward(obs_vec(obs, cfg.pump)[None, :])[0]
        obs, _ = env.step(_squash_rate(float(mean[0]), cfg.pump), event=True)
    t = env.steps
    rec = EpisodeRecord(
        T=t, H=cfg.episode.horizon, y_trace=tuple(env.y_trace),
        K=t, update_times=tuple(range(t)), thresholds=None,
    )
    return rec, _trace_rows(env, [""] * t)


def roll_hetppo(patient, policy: HetPolicy, scenario, noise_rng,
                cfg: ExperimentConfig):
    env = ApEnv(patient, cfg.episode, cfg.sensor, cfg.pump)
    obs = env.reset(scenario, noise_rng)
    held = 0.0  # raw command; zero insulin until the first event
    update_times = []
    while not env.done:
        mean, logit = policy.heads(obs_vec(obs, cfg.pump)[None, :])
        if logit[0] >= 0.0:
            held = float(mean[0])
            update_times.append(env.steps)
        obs, _ = env.step(_squash_rate(held, cfg.pump), event=logit[0] >= 0.0)
    t = env.steps
    rec = EpisodeRecord(
        T=t, H=cfg.episode.horizon, y_trace=tuple(env.y_trace),
        K=len(update_times), update_times=tuple(update_times), thresholds=None,
    )
    return rec, _trace_rows(env, [""] * t)


def roll_cgmetppo(patient, policy: GaussianPolicy, scenario, noise_rng,
                  cfg: ExperimentConfig, scheme: str):
    env = ApEnv(patient, cfg.episode, cfg.sensor, cfg.pump)
    obs = env.reset(scenario, noise_rng)
    trig = cfg.trigger
    update_times: list[int] = []
    etas: list[float] = []
    while not env.done:
        mean = policy.net.forward(obs_vec(obs, cfg.pump)[None, :])[0]
        u = _squash_rate(float(mean[0]), cfg.pump)
        if scheme == "fixed":
            eta = trig.fixed_eta
        else:
            frac = float(np.clip(mean[1], 0.0, 1.0))
            eta = trig.eta_lo + (trig.eta_hi - trig.eta_lo) * frac
        update_times.append(env.steps)
        etas.append(eta)
        res = hold_until_trigger(env, u, eta, cfg.hyper.gamma, lambda y, i: 0.0)
        obs = res.obs
    t = env.steps
    # Per-step threshold labels for the trace: interval k's eta covers
    # steps [h_k, h_{k+1}).
    bounds = update_times + [t]
    eta_by_step = []
    for k in range(len(update_times)):
        eta_by_step.extend([f"{etas[k]:.6f}"] * (bounds[k + 1] - bounds[k]))
    rec = EpisodeRecord(
        T=t, H=cfg.episode.horizon, y_trace=tuple(env.y_trace),
        K=len(update_times), update_times=tuple(update_times),
        thresholds=tuple(etas),
    )
    return rec, _trace_rows(env, eta_by_step)


# ---------------------------------------------------------------------------
# PID tuning


def tune_pid(cfg: ExperimentConfig, out_base: str | Path,
             seeds: tuple[int, ...] | None = None) -> tuple[PidGains, float]:
    """Grid-search gains for the configured patient; saves gains.yaml.

    The same gains are written to every seed directory (the search is
    deterministic and seed-free) so that evaluation finds them in place.
    """
    patient = resolve_patient(cfg)
    scenarios = default_eval_scenarios()
    gains, score = grid_search_pid(
        patient, scenarios,
        kp_grid=cfg.pid_grid.kp, ki_grid=cfg.pid_grid.ki, kd_grid=cfg.pid_grid.kd,
        episode_cfg=cfg.episode, sensor=cfg.sensor, pump=cfg.pump,
    )
    pid_cfg = dataclasses.replace(cfg, method="pid")
    payload = {
        "kp": gains.kp, "ki": gains.ki, "kd": gains.kd, "target": gains.target,
        "mean_tir": round(score, 6),
    }
    for seed in seeds if seeds is not None else cfg.seeds:
        rd = run_dir(out_base, pid_cfg, seed)
        rd.mkdir(parents=True, exist_ok=True)
        with open(rd / "gains.yaml", "w") as fh:
            yaml.safe_dump(payload, fh, sort_keys=True)
    log.info("tuned pid for %s: %s (mean TIR %.2f)", cfg.patient, gains, score)
    return gains, score


def load_gains(path: Path) -> PidGains:
    if not path.exists():
        raise FileNotFoundError(f"no tuned gains at {path}; run tune-pid or train")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return PidGains(kp=raw["kp"], ki=raw["ki"], kd=raw["kd"], target=raw["target"])


# ---------------------------------------------------------------------------
# Train / eval entry points


def run_train(cfg: ExperimentConfig, out_base: str | Path,
              seeds: tuple[int, ...] | None = None) -> list[Path]:
    """Train (or tune) one method on one patient for each seed."""
    seeds = seeds if seeds is not None else cfg.seeds
    if cfg.method == "pid":
        tune_pid(cfg, out_base, seeds)
        return [run_dir(out_base, cfg, s) for s in seeds]
    patient = resolve_patient(cfg)
    dirs = []
    for seed in seeds:
        rd = run_dir(out_base, cfg, seed)
        rd.mkdir(parents=True, exist_ok=True)
        trainer = build_trainer(cfg, patient, seed)
        with open(rd / "train_log.csv", "w") as fh:
            fh.write("episode,steps,K,ret,ecf,tir,aurr\n")
            for ep in range(cfg.episodes):
                s = trainer.run_episode(ep)
                fh.write(
                    f"{s.episode},{s.steps},{s.K},{s.ret:.6f},"
                    f"{s.ecf:.6f},{s.tir:.6f},{s.aurr:.6f}\n"
                )
                if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                    save_trainer(trainer, rd / f"checkpoint_ep{ep + 1}.npz")
        with open(rd / "updates.csv", "w") as fh:
            fh.write("update,policy_objective,value_loss,entropy,"
                     "mean_ratio,clip_frac,minibatches,diverged\n")
            for i, u in enumerate(trainer.updates):
                fh.write(
                    f"{i},{u.policy_objective:.6f},{u.value_loss:.6f},"
                    f"{u.entropy:.6f},{u.mean_ratio:.6f},{u.clip_frac:.6f},"
                    f"{u.minibatches},{int(u.diverged)}\n"
                )
        save_trainer(trainer, rd / "checkpoint.npz")
        log.info("trained %s/%s seed %d: %d episodes, %d updates",
                 cfg.method, cfg.patient, seed, cfg.episodes, len(trainer.updates))
        dirs.append(rd)
    return dirs


def eval_records(cfg: ExperimentConfig, patient, rd: Path):
    """Greedy records + traces for the five fixed scenarios of one run."""
    scenarios = default_eval_scenarios()
    if cfg.method == "pid":
        gains = load_gains(rd / "gains.yaml")
        roll = lambda sc, rng: roll_pid(patient, gains, sc, rng, cfg)
    else:
        path = rd / "checkpoint.npz"
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}; train first")
        method, policy, _vnet, pin = load_policy(path)
        if method != cfg.method:
            raise ValueError(
                f"checkpoint method {method!r} does not match config "
                f"method {cfg.method!r}"
            )
        if cfg.method == "ppo":
            roll = lambda sc, rng: roll_ppo(patient, policy, sc, rng, cfg)
        elif cfg.method == "hetppo":
            if pin:
                roll = lambda sc, rng: roll_ppo(patient, policy, sc, rng, cfg)
            else:
                roll = lambda sc, rng: roll_hetppo(patient, policy, sc, rng, cfg)
        else:
            scheme = "fixed" if cfg.method == "cgmetppo-fixed" else "variable"
            roll = lambda sc, rng: roll_cgmetppo(
                patient, policy, sc, rng, cfg, scheme
            )
    out = []
    for i, sc in enumerate(scenarios):
        out.append(roll(sc, eval_noise_stream(i)))
    return out


def run_eval(cfg: ExperimentConfig, out_base: str | Path,
             seeds: tuple[int, ...] | None = None) -> list[Path]:
    """Evaluate trained runs; writes metrics.csv, traces, histogram."""
    seeds = seeds if seeds is not None else cfg.seeds
    patient = resolve_patient(cfg)
    paths = []
    for seed in seeds:
        rd = run_dir(out_base, cfg, seed)
        rolled = eval_records(cfg, patient, rd)
        rows = []
        for i, (rec, trace) in enumerate(rolled):
            with open(rd / f"eval_trace_scen{i}.csv", "w") as fh:
                fh.write(TRACE_HEADER + "\n")
                for step, t_min, y, u, event, eta in trace:
                    fh.write(f"{step},{t_min:.1f},{y:.6f},{u:.8f},{event},{eta}\n")
            rows.append({"scenario": str(i), "ecf": ecf(rec), "tir": tir(rec),
                         "aurr": aurr(rec)})
        mean_row = {
            "scenario": "mean",
            **{m: float(np.mean([r[m] for r in rows])) for m in ("ecf", "tir", "aurr")},
        }
        path = rd / "metrics.csv"
        with open(path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for r in rows + [mean_row]:
                fh.write(
                    f"{cfg.patient},{cfg.method},{seed},{r['scenario']},"
                    f"{r['ecf']:.6f},{r['tir']:.6f},{r['aurr']:.6f}\n"
                )
        if cfg.method == "cgmetppo-variable":
            counts = np.zeros((len(CGM_HIST_EDGES) - 1, len(ETA_HIST_EDGES) - 1))
            for rec, _ in rolled:
                c, _, _ = interval_avg_hist(rec, (CGM_HIST_EDGES, ETA_HIST_EDGES))
                counts += c
            with open(rd / "hist.csv", "w") as fh:
                fh.write("cgm_lo,eta_lo,count\n")
                for a in range(counts.shape[0]):
                    for b in range(counts.shape[1]):
                        fh.write(f"{CGM_HIST_EDGES[a]:.1f},"
                                 f"{ETA_HIST_EDGES[b]:.1f},{int(counts[a, b])}\n")
        paths.append(path)
        log.info("evaluated %s/%s seed %d -> %s", cfg.method, cfg.patient, seed, path)
    return paths


# ---------------------------------------------------------------------------
# Plot-data export


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict[str, str]]:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    for col in required:
        if col not in header:
            raise ValueError(f"{path.name}: missing column: {col}")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def export_plotdata(cfg: ExperimentConfig, out_base: str | Path,
                    seeds: tuple[int, ...] | None = None) -> list[Path]:
    """Bundle evaluation traces into plot-ready CSVs.

    Time-response files align CGM, command, threshold, and the meal
    delivery rate minute-grid values at each control step; the histogram
    bundle re-emits hist.csv with bin centers.
    """
    seeds = seeds if seeds is not None else cfg.seeds
    scenarios = default_eval_scenarios()
    out = []
    for seed in seeds:
        rd = run_dir(out_base, cfg, seed)
        pd = rd / "plotdata"
        pd.mkdir(parents=True, exist_ok=True)
        for i, sc in enumerate(scenarios):
            rows = _read_csv(rd / f"eval_trace_scen{i}.csv",
                             ("step", "t_min", "y", "u", "event", "eta"))
            dst = pd / f"timeresponse_scen{i}.csv"
            with open(dst, "w") as fh:
                fh.write("t_min,y,u,event,eta,meal_mg_min\n")
                for r in rows:
                    meal = meal_rate_at(float(r["t_min"]), sc)
                    fh.write(f"{r['t_min']},{r['y']},{r['u']},{r['event']},"
                             f"{r['eta']},{meal:.1f}\n")
            out.append(dst)
        hist = rd / "hist.csv"
        if hist.exists():
            rows = _read_csv(hist, ("cgm_lo", "eta_lo", "count"))
            c_w = CGM_HIST_EDGES[1] - CGM_HIST_EDGES[0]
            e_w = ETA_HIST_EDGES[1] - ETA_HIST_EDGES[0]
            dst = pd / "hist_points.csv"
            with open(dst, "w") as fh:
                fh.write("cgm_center,eta_center,count\n")
                for r in rows:
                    fh.write(f"{float(r['cgm_lo']) + c_w / 2:.1f},"
                             f"{float(r['eta_lo']) + e_w / 2:.1f},{r['count']}\n")
            out.append(dst)
    return out


# ---------------------------------------------------------------------------
# Full sweep


def run_matrix(matrix: MatrixConfig, out_base: str | Path) -> Path:
    """Train + evaluate every (method, patient) combination; summarize."""
    summary_rows = []
    for cfg in matrix.configs():
        run_train(cfg, out_base)
        run_eval(cfg, out_base)
        per_seed = []
        for seed in cfg.seeds:
            rows = _read_csv(run_dir(out_base, cfg, seed) / "metrics.csv",
                             ("scenario", "ecf", "tir", "aurr"))
            per_seed.append([
                {m: float(r[m]) for m in ("ecf", "tir", "aurr")}
                for r in rows if r["scenario"] != "mean"
            ])
        agg = aggregate(per_seed)
        for m in ("ecf", "tir", "aurr"):
            summary_rows.append(
                f"{cfg.patient},{cfg.method},{m},{agg.mean[m]:.6f},"
                f"{agg.std[m]:.6f},{agg.n_seeds}"
            )
    path = Path(out_base) / "summary.csv"
    with open(path, "w") as fh:
        fh.write("patient,method,metric,mean,std,n_seeds\n")
        for row in summary_rows:
            fh.write(row + "\n")
    return path
