from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.barrier import DeadlockMonitor, barrier_preset
from core.config import NOMINAL_H_STAR, ApfbsConfig, ExperimentConfig, build_config
from core.envs import Environment, QuadrotorEnv, RewardSpec, build_env, reward_eval, reward_for
from core.gpbaseline import (
    BayesLinearLearner,
    GpSarsaState,
    OnlineGpSarsa,
    bayes_linear_prior,
    gp_sarsa_posterior,
    psi_route_posterior,
)
from core.kernels import Gaussian, Tensor, control_kernel
from core.metrics import mean_std, nmse_series, summarize_run, value_at
from core.structmodel import (
    DynamicsLearner,
    ExactLearner,
    ParametricLearner,
    ParametricModel,
    StructuredLearner,
    build_structured_model,
    sparsity_report,
)
from core.valuerl import (
    GreedyPolicy,
    LearnerBundle,
    PsiQLearner,
    QKernelSpec,
    ValueLearner,
    empty_qmodel,
    rollout_horizon,
    run_loop,
    start_bundle,
)
from exporters.excel_export import write_summary_xlsx
from exporters.metrics_csv import metrics_frame, write_metrics, write_summary


logger = logging.getLogger(__name__)


@dataclass
class ReplicaResult:
    index: int
    frame: pd.DataFrame
    summary: Dict[str, Any]
    extra: Dict[str, pd.DataFrame] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_paths: List[Path]
    summary_path: Path
    xlsx_path: Path
    summary: Dict[str, Any]


def replica_seeds(seed: int, replicas: int) -> List[np.random.SeedSequence]:
    """Independent streams per replica; the same for any worker count."""
    return np.random.SeedSequence(seed).spawn(replicas)


# --- wiring ----------------------------------------------------------------------------


def make_dynamics_learner(config: ExperimentConfig, env: Environment) -> DynamicsLearner:
    mc = config.model
    if mc.kind == "exact":
        return ExactLearner(env.true_affine, env.n_u)
    if mc.kind in ("parametric", "bayes_linear"):
        assert isinstance(env, QuadrotorEnv)
        h0 = np.asarray(mc.initial_parameters or NOMINAL_H_STAR, dtype=np.float64)
        truth = lambda: env.h_star
        if mc.kind == "parametric":
            return ParametricLearner(ParametricModel(env.basis, h0, mc.lam), env.n_u, truth)
        return BayesLinearLearner(bayes_linear_prior(h0, mc.prior_variance, mc.noise_variance), env.basis, env.n_u, truth)
    model = build_structured_model(
        env.n_x,
        env.n_u,
        sigmas=mc.sigmas,
        tau=mc.tau,
        r_max=[mc.apfbs_per_dim.get(i, mc.apfbs).r_max for i in range(env.n_x)],
        window=[mc.apfbs_per_dim.get(i, mc.apfbs).s for i in range(env.n_x)],
        state_indices=mc.state_indices,
        constant_dims=mc.constant_dims,
        angle_dims=env.angle_dims,
    )
    configs: List[ApfbsConfig] = [mc.apfbs_per_dim.get(i, mc.apfbs) for i in range(env.n_x)]
    return StructuredLearner(model, configs)


def _gp_learner(config: ExperimentConfig, n_x: int, max_basis: int) -> OnlineGpSarsa:
    bc = config.baselines
    kernel = Tensor(Gaussian(bc.gp_sigma, n_x), control_kernel(), split=n_x)
    return OnlineGpSarsa(kernel, config.policy.gamma, bc.gp_noise, max_basis, bc.refresh_every)


def make_value_learner(config: ExperimentConfig, n_x: int, n_u: int) -> Optional[ValueLearner]:
    qc = config.q
    if not qc.enabled:
        return None
    if qc.method == "gp_sarsa":
        return _gp_learner(config, n_x, config.baselines.gp_sarsa_max_basis)
    if qc.method == "gp_sarsa2":
        return _gp_learner(config, n_x, config.baselines.gp_sarsa2_freeze)
    spec = QKernelSpec(n_x, n_u, tuple(qc.sigmas), config.policy.gamma)
    return PsiQLearner(empty_qmodel(spec, qc.apfbs.r_max, qc.apfbs.s), qc.apfbs)


def make_shadows(config: ExperimentConfig, n_x: int) -> Dict[str, ValueLearner]:
    bc = config.baselines
    shadows: Dict[str, ValueLearner] = {}
    if not config.q.enabled:
        return shadows
    if bc.gp_sarsa and config.q.method != "gp_sarsa":
        shadows["gp_sarsa"] = _gp_learner(config, n_x, bc.gp_sarsa_max_basis)
    if bc.gp_sarsa2 and config.q.method != "gp_sarsa2":
        shadows["gp_sarsa2"] = _gp_learner(config, n_x, bc.gp_sarsa2_freeze)
    return shadows


def make_bundle(config: ExperimentConfig, seed: np.random.SeedSequence) -> LearnerBundle:
    env_seed, loop_seed = seed.spawn(2)
    bc = config.barrier
    env = build_env(config.env, np.random.default_rng(env_seed), bc.position_bound, bc.x_max, bc.y_max)
    learner = make_dynamics_learner(config, env)
    monitor = DeadlockMonitor(config.deadlock.window, config.deadlock.threshold) if config.deadlock.enabled else None
    bundle = LearnerBundle(
        env=env,
        learner=learner,
        barriers=barrier_preset(bc),
        reward=reward_for(env),
        policy_config=config.policy,
        rng=np.random.default_rng(loop_seed),
        value=make_value_learner(config, env.n_x, env.n_u),
        shadows=make_shadows(config, env.n_x),
        monitor=monitor,
        viability=bc.viability_check,
        lyapunov_c=bc.lyapunov_c,
    )
    return start_bundle(bundle)


# --- policy evaluation ------------------------------------------------------------------


Controller = Callable[[np.ndarray], np.ndarray]


def greedy_controller(policy: GreedyPolicy) -> Controller:
    def act(x: np.ndarray) -> np.ndarray:
        result = policy.act(x)
        if result.u is not None:
            return result.u
        assert result.witness is not None
        return result.witness

    return act


def evaluate_policy_value(
    env: Environment,
    policy: Controller,
    starts: Sequence[np.ndarray],
    gamma: float,
    horizon: int,
    reward: Optional[RewardSpec] = None,
) -> Tuple[List[float], List[np.ndarray]]:
    """
    Truncated discounted returns sum_{t < horizon} gamma^t R(x_t, u_t) from each
    start on a schedule-free copy of env; also returns the final states.
    """
    reward = reward or reward_for(env)
    values: List[float] = []
    finals: List[np.ndarray] = []
    for start in starts:
        world = copy.deepcopy(env)
        world.relocations = []
        if isinstance(world, QuadrotorEnv):
            world.switches = []
        world.state = np.asarray(start, dtype=np.float64).copy()
        total, disc = 0.0, 1.0
        x = world.state
        for _ in range(horizon):
            u = np.atleast_1d(policy(x))
            total += disc * reward_eval(reward, x, u)
            disc *= gamma
            x = world.step(u).copy()
        values.append(total)
        finals.append(x)
    return values, finals


def evaluation_starts(env: Environment, rng: np.random.Generator, count: int, position_bound: float) -> List[np.ndarray]:
    if isinstance(env, QuadrotorEnv):
        return [np.array([rng.uniform(-position_bound, position_bound), 0.0]) for _ in range(count)]
    world = copy.deepcopy(env)
    world.rng = rng
    return [world.draw_state() for _ in range(count)]


# --- experiments ---------------------------------------------------------------------------


def run_equivalence(config: ExperimentConfig, rng: np.random.Generator) -> pd.DataFrame:
    """Both GP SARSA routes on random datasets; one row per query."""
    eq = config.equivalence
    n_x, n_u = 2, 1
    kernel = Tensor(Gaussian(eq.sigma, n_x), control_kernel(), split=n_x)
    rows = []
    for d in range(eq.datasets):
        gamma = eq.gammas[d % len(eq.gammas)]
        n_d = int(rng.integers(1, eq.max_points + 1))
        Z = rng.uniform(-1.0, 1.0, size=(n_d + 1, n_x + n_u))
        R = rng.normal(size=n_d)
        state = GpSarsaState(kernel, gamma, Z, R, eq.noise)
        for q in range(eq.queries):
            z_star = rng.uniform(-1.0, 1.0, size=n_x + n_u)
            m1, v1 = gp_sarsa_posterior(state, z_star)
            m2, v2 = psi_route_posterior(state, z_star)
            rows.append(
                {
                    "dataset": d,
                    "query": q,
                    "gamma": gamma,
                    "n_d": n_d,
                    "mean_gp": m1,
                    "mean_psi": m2,
                    "var_gp": v1,
                    "var_psi": v2,
                    "mean_gap": abs(m1 - m2),
                    "var_gap": abs(v1 - v2),
                }
            )
    return pd.DataFrame(rows)


def run_replica(config: ExperimentConfig, index: int, seed: np.random.SeedSequence) -> ReplicaResult:
    if config.kind == "equivalence":
        frame = run_equivalence(config, np.random.default_rng(seed))
        summary = {
            "replica": index,
            "max_mean_gap": float(frame["mean_gap"].max()),
            "max_var_gap": float(frame["var_gap"].max()),
            "queries": int(len(frame)),
        }
        return ReplicaResult(index, frame, summary)

    bundle = make_bundle(config, seed)
    rows = run_loop(bundle, config.steps)
    frame = metrics_frame(rows)
    switch_steps = [s.step for s in config.env.switches]
    summary: Dict[str, Any] = {"replica": index}
    summary.update(summarize_run(frame, switch_steps))
    extra: Dict[str, pd.DataFrame] = {}

    if not frame.empty and frame["psi_pred"].notna().any():
        nmse = nmse_series(frame)
        frame["nmse"] = nmse
        for step in (1000, 10000):
            summary[f"nmse_at_{step}"] = value_at(nmse, frame, step)
        for name in sorted(bundle.shadows):
            frame[f"nmse_{name}"] = nmse_series(frame, pred_col=f"pred_{name}")

    if config.kind == "recovery" and config.baselines.bayes_linear and config.model.kind != "bayes_linear":
        baseline = config.model_copy(
            update={
                "model": config.model.model_copy(update={"kind": "bayes_linear"}),
                "baselines": config.baselines.model_copy(update={"bayes_linear": False}),
            }
        )
        other = run_replica(baseline, index, np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key))
        summary["bayes_linear"] = {k: v for k, v in other.summary.items() if k != "replica"}
        extra["bayes_linear_trace"] = other.frame[["n", "x0", "x1", "param_error"]]

    if config.kind == "structure":
        report = sparsity_report(bundle.learner.model)  # type: ignore[attr-defined]
        extra["sparsity"] = report.to_frame()
        summary["p_to_g_ratio"] = report.ratio("p", "g")
        summary["block_mass"] = {b: report.mass(b) for b in ("p", "f", "g")}

    evaluated = bundle.explore_end_policy or bundle.policy
    if config.kind == "rl" and config.evaluations > 0 and evaluated is not None:
        eval_rng = np.random.default_rng(seed.spawn(1)[0])
        starts = evaluation_starts(bundle.env, eval_rng, config.evaluations, config.barrier.position_bound)
        horizon = rollout_horizon(config.policy.gamma, bundle.reward.r_max)
        values, finals = evaluate_policy_value(bundle.env, greedy_controller(evaluated), starts, config.policy.gamma, horizon)
        summary["values"] = values
        summary["value_mean"] = float(np.mean(values))
        summary["final_positions"] = [float(f[0]) for f in finals]
        summary["horizon"] = horizon
        summary["policy_version"] = evaluated.version
    return ReplicaResult(index, frame, summary, extra)


def _replica_job(payload: Tuple[Dict[str, Any], int, np.random.SeedSequence]) -> ReplicaResult:
    data, index, seed = payload
    return run_replica(build_config(data), index, seed)


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
) -> RunArtifacts:
    """
    Runs every replica of the experiment and writes metrics_<replica>.csv,
    summary.json and summary.xlsx under <out>/<name>.
    """
    out = Path(out_dir or config.output_dir) / config.name
    seeds = replica_seeds(config.seed, config.replicas)
    n_workers = min(workers or config.workers, config.replicas)
    logger.info("event=run_start name=%s kind=%s replicas=%d workers=%d", config.name, config.kind, config.replicas, n_workers)

    if n_workers > 1:
        payloads = [(config.model_dump(mode="json"), i, s) for i, s in enumerate(seeds)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replica_job, payloads))
    else:
        results = [run_replica(config, i, s) for i, s in enumerate(seeds)]

    metrics_paths = []
    for res in sorted(results, key=lambda r: r.index):
        metrics_paths.append(write_metrics(res.frame, out / f"metrics_{res.index}.csv"))
        logger.info("event=replica_done name=%s replica=%d rows=%d", config.name, res.index, len(res.frame))

    summary: Dict[str, Any] = {
        "name": config.name,
        "kind": config.kind,
        "seed": config.seed,
        "replicas": config.replicas,
        "config_sha256": config.fingerprint(),
        "per_replica": [r.summary for r in results],
    }
    if config.kind == "rl":
        summary["value"] = mean_std(r.summary.get("value_mean", math.nan) for r in results)
    if config.kind == "structure":
        summary["p_to_g_ratio"] = mean_std(r.summary.get("p_to_g_ratio", math.nan) for r in results)
    if config.kind == "equivalence":
        summary["max_mean_gap"] = max(r.summary["max_mean_gap"] for r in results)
        summary["max_var_gap"] = max(r.summary["max_var_gap"] for r in results)

    tables = {"replicas": pd.DataFrame([_flat(r.summary) for r in results])}
    for r in results:
        for name, table in r.extra.items():
            tables[f"{name}_{r.index}"] = table
    summary_path = write_summary(summary, out / "summary.json")
    xlsx_path = write_summary_xlsx(summary, out / "summary.xlsx", tables)
    logger.info("event=run_done name=%s out=%s", config.name, out)
    return RunArtifacts(out, metrics_paths, summary_path, xlsx_path, summary)


def _flat(summary: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in summary.items() if not isinstance(v, (dict, list, tuple))}
