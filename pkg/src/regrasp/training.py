"""Fused single-process fine-tuning loop and policy evaluation.

The fused trainer is the reference the distributed harness is checked
against: one env step, then ``updates_per_step`` learner iterations, with the
acting policy refreshed from the learner every ``param_refresh_interval``
updates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierModel, predict_reward
from .diffnet import MlpSpec, ParamVector, forward, sample_policy
from .env import EnvConfig, Episode, EnvState, Transition, reset, run_episode, step
from .replay import DualBuffer
from .rl import LearnerState, RlHyperparams, learner_iteration
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneSchedule:
    env_steps: int = 6000
    updates_per_step: int = 1
    param_refresh_interval: int = 50
    exploration: str = "stochastic"
    reset_mode: str = "random"
    reward: str = "classifier"
    seed: int = 0

    def __post_init__(self):
        if self.env_steps < 0 or self.updates_per_step < 0 or self.param_refresh_interval < 1:
            raise ValueError("schedule counts must be non-negative and the refresh interval positive")
        if self.exploration not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown exploration mode {self.exploration!r}")
        if self.reward not in ("oracle", "classifier"):
            raise ValueError(f"unknown reward mode {self.reward!r}")


def act(params: ParamVector, spec: MlpSpec, obs, seed: int, stochastic: bool = True) -> np.ndarray:
    out = sample_policy(params, spec, obs, noise_seed=seed, deterministic=not stochastic)
    return out.sampled_action


class ActorSide:
    """Environment-facing half of training: acting, reward detection, episode bookkeeping.

    Shared by the fused trainer and the distributed actor so both produce the
    same transition stream for the same seeds.
    """

    def __init__(self, spec: MlpSpec, params: ParamVector, schedule: FinetuneSchedule,
                 env_config: EnvConfig = EnvConfig(), classifier: ClassifierModel | None = None):
        if schedule.reward == "classifier" and classifier is None:
            raise ValueError("classifier reward mode needs a trained classifier")
        self.spec, self.params, self.schedule = spec, params, schedule
        self.env_config, self.classifier = env_config, classifier
        self.snapshot_id = 0
        self.env_steps = 0
        self.episode_index = 0
        self.episode = Episode()
        self.episode_log: list[dict] = []
        self._reset()

    def _reset(self):
        self.state, self.obs = reset(derive_seed(self.schedule.seed, self.episode_index, 17),
                                     self.schedule.reset_mode, self.env_config)
        self.episode = Episode()

    @classmethod
    def restore(cls, spec: MlpSpec, schedule: FinetuneSchedule, fields: dict,
                env_config: EnvConfig = EnvConfig(), classifier: ClassifierModel | None = None) -> "ActorSide":
        """Rebuild from ``checkpoint.actor_side_fields`` output."""
        side = cls(spec, fields["params"], schedule, env_config, classifier)
        side.state, side.obs = fields["env_state"], fields["obs"]
        side.env_steps, side.episode_index = fields["env_steps"], fields["episode_index"]
        side.snapshot_id, side.episode_log = fields["snapshot_id"], list(fields["episode_log"])
        side.episode = fields["episode"]
        return side

    def set_params(self, params: ParamVector, snapshot_id: int):
        if snapshot_id < self.snapshot_id:
            return
        self.params, self.snapshot_id = params, snapshot_id

    def tick(self) -> tuple[Transition, Episode | None]:
        """One control step; returns the transition and the finished episode, if any."""
        s = self.schedule
        a = act(self.params, self.spec, self.obs, derive_seed(s.seed, self.env_steps, 23),
                s.exploration == "stochastic")
        state, next_obs, env_r, env_done = step(self.state, a, self.env_config)
        if s.reward == "classifier":
            r = float(predict_reward(self.classifier, next_obs))
        else:
            r = env_r
        terminal = r == 1.0
        t = Transition(self.obs, a, r, next_obs, terminal)
        self.episode.transitions.append(t)
        self.env_steps += 1
        self.state, self.obs = state, next_obs
        finished = None
        if terminal or env_done:
            ep = self.episode
            if terminal:
                ep.success, ep.success_frame = True, len(ep.transitions) - 1
            self.episode_log.append({"env_steps": self.env_steps, "detected_success": terminal,
                                     "true_success": bool(state.success), "length": len(ep)})
            finished = ep
            self.episode_index += 1
            self._reset()
        return t, finished


@dataclass
class RunResult:
    state: LearnerState
    metrics: list[dict] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)
    snapshot_ids: list[int] = field(default_factory=list)


def run_single_process(state: LearnerState, buffers: DualBuffer, hp: RlHyperparams,
                       schedule: FinetuneSchedule, env_config: EnvConfig = EnvConfig(),
                       classifier: ClassifierModel | None = None, actor: ActorSide | None = None,
                       on_metrics=None) -> RunResult:
    """Interleave env steps and learner iterations on one thread.

    Passing a previously returned ``actor`` (with the matching state and
    buffers) continues a run exactly where it stopped.
    """
    if actor is None:
        actor = ActorSide(state.actor_spec, state.actor.copy(), schedule, env_config, classifier)
    result = RunResult(state)
    start = actor.env_steps
    while actor.env_steps < start + schedule.env_steps:
        t, finished = actor.tick()
        buffers.push_online(t)
        if finished is not None and finished.success:
            buffers.promote_episode(finished)
        if not buffers.ready(hp.N):
            continue
        for _ in range(schedule.updates_per_step):
            row = learner_iteration(state, buffers, hp, schedule.seed, actor.env_steps)
            result.metrics.append(row)
            if on_metrics is not None:
                on_metrics(row)
            if state.update_count % schedule.param_refresh_interval == 0:
                sid = state.update_count // schedule.param_refresh_interval
                actor.set_params(state.actor.copy(), sid)
                result.snapshot_ids.append(sid)
    result.episodes = actor.episode_log
    result.actor = actor
    return result


# --- evaluation -------------------------------------------------------------------


@dataclass
class EvalReport:
    trials: int
    success_rate: float
    mean_ct: float | None
    records: list[dict]

    def summary(self) -> dict:
        return {"trials": self.trials, "success_rate": self.success_rate,
                "mean_ct": "NA" if self.mean_ct is None else self.mean_ct}


def evaluate(params: ParamVector, spec: MlpSpec, trials: int = 100, reset_mode: str = "random",
             seed: int = 12345, env_config: EnvConfig = EnvConfig()) -> EvalReport:
    """Deterministic-action rollouts on fresh seeds; CT counts steps up to the success step."""
    if trials < 1:
        raise ValueError("evaluation needs at least one trial")

    def policy(state: EnvState, obs):
        out = forward(params, spec, obs)
        return np.tanh(out[:spec.output_dim // 2])

    records = []
    for i in range(trials):
        ep = run_episode(policy, derive_seed(seed, i, 31), reset_mode, env_config)
        records.append({"trial": i, "success": ep.success, "ct": ep.cycle_time, "length": len(ep)})
    wins = [r["ct"] for r in records if r["success"]]
    return EvalReport(trials, 100.0 * len(wins) / trials, float(np.mean(wins)) if wins else None, records)
