"""Regularized off-policy actor-critic fine-tuning.

An ensemble of critics is regressed onto subset-min bootstrapped targets
several times per actor step. The actor maximizes ensemble-mean value plus
an entropy bonus, minus an imitation penalty on demo states whose weight
``beta * lambda`` adapts to how often the critics still prefer the frozen
pretrained policy over the current one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .diffnet import (LOG_STD_MAX, LOG_STD_MIN, AdamState, MlpSpec, NonFiniteError, ParamVector,
                      adam_step, backward, forward, init_params, squashed_log_prob)
from .env import ACT_DIM, OBS_DIM
from .replay import DEMO, ONLINE, Batch, DualBuffer
from .seeding import rng_for

@dataclass(frozen=True)
class RlHyperparams:
    gamma: float = 0.99
    alpha: float = 0.05
    beta: float = 1.0
    rho: float = 0.995
    E: int = 10
    Z: int = 2
    G: int = 4
    N: int = 256
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    objective: str = "alg1"
    use_bc_term: bool = True
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.E < 1 or self.Z not in (1, 2) or self.Z > self.E:
            raise ValueError("need E >= 1 and Z in {1, 2} with Z <= E")
        if self.G < 1:
            raise ValueError("UTD ratio G must be >= 1")
        if self.N < 2 or self.N % 2:
            raise ValueError("batch size N must be a positive even number")
        if self.objective not in ("alg1", "eq2"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def critic_spec(self) -> MlpSpec:
        return MlpSpec(OBS_DIM + ACT_DIM, self.hidden, 1, self.activation)


@dataclass
class LearnerState:
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: ParamVector
    pretrained_actor: ParamVector
    critics: list[ParamVector]
    targets: list[ParamVector]
    actor_opt: AdamState
    critic_opts: list[AdamState]
    update_count: int = 0
    last_lambda: float = 0.0
    extra: dict = field(default_factory=dict)

    def copy(self) -> "LearnerState":
        return LearnerState(self.actor_spec, self.critic_spec, self.actor.copy(),
                            self.pretrained_actor, [c.copy() for c in self.critics],
                            [t.copy() for t in self.targets], self.actor_opt.copy(),
                            [o.copy() for o in self.critic_opts], self.update_count,
                            self.last_lambda, dict(self.extra))


def init_learner(pretrained: ParamVector, actor_spec: MlpSpec, hp: RlHyperparams,
                 seed: int) -> LearnerState:
    """Fresh critics (targets equal to critics), actor starting at the pretrained weights."""
    cspec = hp.critic_spec()
    critics = [init_params(cspec, int(rng_for(seed, 11, i).integers(2 ** 31))) for i in range(hp.E)]
    frozen = pretrained.copy()
    frozen.values.setflags(write=False)
    return LearnerState(
        actor_spec=actor_spec, critic_spec=cspec,
        actor=pretrained.copy(), pretrained_actor=frozen,
        critics=critics, targets=[c.copy() for c in critics],
        actor_opt=AdamState.fresh(len(pretrained), hp.actor_lr),
        critic_opts=[AdamState.fresh(len(c), hp.critic_lr) for c in critics],
    )


def q_value(critic: ParamVector, spec: MlpSpec, obs, action) -> np.ndarray:
    return forward(critic, spec, np.concatenate([obs, action], axis=-1))[..., 0]


def mean_action(actor: ParamVector, spec: MlpSpec, obs) -> np.ndarray:
    out = forward(actor, spec, obs)
    return np.tanh(out[..., :out.shape[-1] // 2])


def compute_target(state: LearnerState, batch: Batch, hp: RlHyperparams, seed,
                   subset=None, noise=None) -> np.ndarray:
    """Subset-min bootstrapped regression target, masked at terminal transitions."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if subset is None:
        subset = rng.choice(hp.E, size=hp.Z, replace=False)
    if noise is None:
        noise = rng.standard_normal((len(batch), ACT_DIM))
    out = forward(state.actor, state.actor_spec, batch.next_obs)
    d = ACT_DIM
    log_std = np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
    next_action = np.tanh(out[:, :d] + np.exp(log_std) * noise)
    q = np.min([q_value(state.targets[i], state.critic_spec, batch.next_obs, next_action)
                for i in subset], axis=0)
    return batch.reward + hp.gamma * (1.0 - batch.done) * q


def critic_loss_and_grad(critic: ParamVector, spec: MlpSpec, batch: Batch, y: np.ndarray):
    x = np.concatenate([batch.obs, batch.action], axis=1)
    q, cache = forward(critic, spec, x, return_cache=True)
    err = y - q[:, 0]
    loss = float(np.mean(err * err))
    grad, _ = backward(critic, spec, x, (-2.0 * err / len(err))[:, None], cache=cache)
    return loss, grad


def critic_update(state: LearnerState, batch: Batch, y: np.ndarray, hp: RlHyperparams) -> list[float]:
    """One optimizer step per critic on the shared targets ``y`` (in place)."""
    losses = []
    for i in range(hp.E):
        loss, grad = critic_loss_and_grad(state.critics[i], state.critic_spec, batch, y)
        if not np.isfinite(loss):
            raise NonFiniteError(f"critic {i} loss is non-finite")
        state.critics[i], state.critic_opts[i] = adam_step(state.critic_opts[i], state.critics[i], grad)
        losses.append(loss)
    return losses


def target_ema_update(state: LearnerState, hp: RlHyperparams):
    for i, (tgt, cur) in enumerate(zip(state.targets, state.critics)):
        state.targets[i] = tgt.with_values(hp.rho * tgt.values + (1.0 - hp.rho) * cur.values)


def lambda_indicators(state: LearnerState, obs) -> np.ndarray:
    """Boolean matrix (batch, E): critic i strictly prefers the pretrained action."""
    a_pre = mean_action(state.pretrained_actor, state.actor_spec, obs)
    a_cur = mean_action(state.actor, state.actor_spec, obs)
    cols = [q_value(c, state.critic_spec, obs, a_pre) > q_value(c, state.critic_spec, obs, a_cur)
            for c in state.critics]
    return np.stack(cols, axis=1)


def lambda_from_indicators(ind) -> Fraction:
    ind = np.asarray(ind, dtype=bool)
    return Fraction(int(ind.sum()), ind.size)


def compute_lambda(state: LearnerState, online_obs, hp: RlHyperparams | None = None) -> float:
    """Fraction of (state, critic) pairs ranking the pretrained policy above the current one."""
    return float(lambda_from_indicators(lambda_indicators(state, online_obs)))


@dataclass
class ActorTerms:
    q_term: float
    entropy_term: float
    bc_term: float
    lam: float
    objective: float


def actor_objective(state: LearnerState, batch: Batch, lam: float, hp: RlHyperparams,
                    noise: np.ndarray, actor: ParamVector | None = None):
    """Objective to maximize and its gradient w.r.t. the actor parameters.

    ``noise`` fixes the reparameterized samples; ``lam`` is a constant here.
    """
    actor = state.actor if actor is None else actor
    spec, d, n = state.actor_spec, ACT_DIM, len(batch)
    out, cache = forward(actor, spec, batch.obs, return_cache=True)
    mean, raw_ls = out[:, :d], out[:, d:]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * noise
    a = np.tanh(u)
    log_prob = squashed_log_prob(mean, log_std, noise)

    q_weight = (1.0 - lam) if hp.objective == "eq2" else 1.0
    x = np.concatenate([batch.obs, a], axis=1)
    q_sum = np.zeros(n)
    dq_da = np.zeros((n, d))
    for c in state.critics:
        q, ccache = forward(c, state.critic_spec, x, return_cache=True)
        q_sum += q[:, 0]
        _, gx = backward(c, state.critic_spec, x, np.full((n, 1), 1.0 / (hp.E * n)), cache=ccache)
        dq_da += gx[:, OBS_DIM:]
    q_term = float(np.mean(q_sum / hp.E))
    entropy_term = float(-hp.alpha * np.mean(log_prob))

    # d/du of the objective, sampling noise held fixed
    dj_du = q_weight * dq_da * (1.0 - a * a) - (hp.alpha / n) * 2.0 * a
    dj_dmean = dj_du
    dj_dls = dj_du * std * noise + hp.alpha / n
    dj_dls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), dj_dls, 0.0)

    bc_term = 0.0
    if hp.use_bc_term:
        demo = batch.source == DEMO
        n_demo = int(demo.sum())
        if n_demo:
            pi = np.tanh(mean[demo])
            err = batch.action[demo] - pi
            bc_term = float(np.mean(np.sum(err * err, axis=1)))
            w = hp.beta * lam
            dj_dmean = dj_dmean.copy()
            dj_dmean[demo] += w * 2.0 * err * (1.0 - pi * pi) / n_demo
    weight = hp.beta * lam
    objective = q_weight * q_term + entropy_term - weight * bc_term

    g_out = -np.concatenate([dj_dmean, dj_dls], axis=1)
    grad, _ = backward(actor, spec, batch.obs, g_out, cache=cache)
    return ActorTerms(q_term, entropy_term, bc_term, lam, objective), grad


def actor_update(state: LearnerState, batch: Batch, hp: RlHyperparams, seed, lam: float | None = None):
    """Lambda on the online half, one ascent step on the full batch (in place)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if lam is None:
        lam = compute_lambda(state, batch.obs[batch.source == ONLINE], hp)
    noise = rng.standard_normal((len(batch), ACT_DIM))
    terms, grad = actor_objective(state, batch, lam, hp, noise)
    if not np.isfinite(terms.objective):
        raise NonFiniteError("actor objective is non-finite")
    state.actor, state.actor_opt = adam_step(state.actor_opt, state.actor, grad)
    state.last_lambda = lam
    return terms


METRIC_FIELDS = ("update_count", "critic_loss_mean", "actor_Q_term", "entropy_term",
                 "bc_term", "lambda", "env_steps")


def learner_iteration(state: LearnerState, buffers: DualBuffer, hp: RlHyperparams, seed: int,
                      env_steps: int = 0) -> dict:
    """G critic passes followed by one actor step; mutates ``state``."""
    rng = rng_for(seed, state.update_count, 5)
    critic_losses = []
    for _ in range(hp.G):
        batch = buffers.sample_symmetric(hp.N, rng)
        y = compute_target(state, batch, hp, rng)
        critic_losses.extend(critic_update(state, batch, y, hp))
        target_ema_update(state, hp)
    batch = buffers.sample_symmetric(hp.N, rng)
    terms = actor_update(state, batch, hp, rng)
    state.update_count += 1
    return {"update_count": state.update_count,
            "critic_loss_mean": float(np.mean(critic_losses)),
            "actor_Q_term": terms.q_term, "entropy_term": terms.entropy_term,
            "bc_term": terms.bc_term, "lambda": terms.lam, "env_steps": env_steps}
