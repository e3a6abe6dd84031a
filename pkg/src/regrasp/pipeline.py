"""End-to-end experiment: demos, classifier, BC, fine-tuning, evaluation.

Used by the acceptance harness and handy for scripted sweeps; the CLI
exposes the same stages one command at a time.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as C
from .bc import BcConfig, actor_spec, pretrain
from .classifier import ClassifierReport, build_dataset, train_classifier
from .env import EnvConfig, collect_demos, collect_failures
from .replay import DualBuffer
from .rl import RlHyperparams, init_learner
from .training import EvalReport, FinetuneSchedule, evaluate, run_single_process

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    seed: int
    bc_eval: EvalReport
    ft_eval: EvalReport
    metrics: list[dict]
    episodes: list[dict]
    classifier_report: ClassifierReport | None = None
    seconds: float = 0.0
    evals_during: list[tuple[int, float, float | None]] = field(default_factory=list)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([m["lambda"] for m in self.metrics])


def run_pipeline(seed: int, reset_mode: str = "random", reward: str = "classifier",
                 hp: RlHyperparams = RlHyperparams(), env_steps: int = 6000, n_demos: int = 30,
                 n_failures: int = 30, bc: BcConfig | None = None, eval_trials: int = 100,
                 env_config: EnvConfig = EnvConfig(), updates_per_step: int = 1,
                 param_refresh_interval: int = 50, eval_every: int = 0,
                 expert_noise: float = 0.1) -> PipelineResult:
    t0 = time.perf_counter()
    demos = collect_demos(n_demos, reset_mode, seed, env_config, noise=expert_noise)
    bc = dataclasses.replace(bc or BcConfig(), seed=seed)
    spec = actor_spec()
    bc_params, _ = pretrain(demos, bc, spec)
    bc_eval = evaluate(bc_params, spec, eval_trials, reset_mode, env_config=env_config)

    classifier, report = None, None
    if reward == "classifier":
        frames, _ = build_dataset(demos + collect_failures(n_failures, reset_mode, seed, env_config))
        classifier, report = train_classifier(frames, seed=seed)

    state = init_learner(bc_params, spec, hp, seed)
    buffers = DualBuffer()
    buffers.seed_demos(demos)
    chunk = eval_every if eval_every > 0 else env_steps
    metrics, actor, evals = [], None, []
    done = 0
    while done < env_steps:
        step = min(chunk, env_steps - done)
        sched = FinetuneSchedule(env_steps=step, updates_per_step=updates_per_step,
                                 param_refresh_interval=param_refresh_interval, reset_mode=reset_mode,
                                 reward=reward, seed=seed)
        res = run_single_process(state, buffers, hp, sched, env_config, classifier, actor=actor)
        actor = res.actor
        metrics += res.metrics
        done += step
        if eval_every and done < env_steps:
            r = evaluate(state.actor, spec, eval_trials, reset_mode, env_config=env_config)
            evals.append((done, r.success_rate, r.mean_ct))
            log.info("seed %d step %d: SR %.1f CT %s", seed, done, r.success_rate, r.mean_ct)
    ft_eval = evaluate(state.actor, spec, eval_trials, reset_mode, env_config=env_config)
    return PipelineResult(seed, bc_eval, ft_eval, metrics, actor.episode_log if actor else [], report,
                          time.perf_counter() - t0, evals)


def run_configured(cfg: dict, seed: int | None = None, changes: dict | None = None) -> PipelineResult:
    """``run_pipeline`` with every knob read from a parsed config; ``changes`` override config keys."""
    cfg = C.load_config(None, {**cfg, **(changes or {})})
    C.validate(cfg)
    seed = cfg["seed"] if seed is None else seed
    return run_pipeline(seed, cfg["env.reset_mode"], cfg["rl.reward"], C.rl_hyperparams(cfg), cfg["rl.env_steps"],
                        cfg["demos.count"], cfg["demos.failures"], C.bc_config(cfg), cfg["eval.trials"],
                        C.env_config(cfg), cfg["rl.updates_per_step"], cfg["dist.param_refresh_interval"],
                        expert_noise=cfg["demos.expert_noise"])


def lambda_shape(lambdas, window_frac: float = 0.1) -> dict:
    """Rise and final level of a BC-weight curve, on windows of 10% of its length."""
    lam = np.asarray(lambdas, dtype=float)
    w = max(1, int(round(window_frac * len(lam))))
    if len(lam) < 2 * w:
        return {"initial": float("nan"), "peak": float("nan"), "final": float("nan"), "rise": float("nan")}
    roll = np.convolve(lam, np.ones(w) / w, mode="valid")
    initial, final, peak = float(roll[0]), float(roll[-1]), float(roll.max())
    return {"initial": initial, "peak": peak, "final": final, "rise": peak - initial}
