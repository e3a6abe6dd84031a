"""Behavior-cloning pretraining of the policy mean head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import AdamState, MlpSpec, NonFiniteError, ParamVector, adam_step, backward, forward, init_params
from .env import ACT_DIM, OBS_DIM, Episode

INITIAL_LOG_STD = -1.0


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("BcConfig fields must be positive")


def actor_spec(hidden=(64, 64), activation="relu") -> MlpSpec:
    return MlpSpec(OBS_DIM, tuple(hidden), 2 * ACT_DIM, activation)


def init_actor(spec: MlpSpec, seed: int, log_std: float = INITIAL_LOG_STD) -> ParamVector:
    """Fresh actor whose log-std outputs are the constant ``log_std``."""
    params = init_params(spec, seed)
    W, b = list(params.layers())[-1]
    d = spec.output_dim // 2
    W[d:] = 0.0
    b[d:] = log_std
    return params


def bc_loss(actor: ParamVector, spec: MlpSpec, obs, expert_actions):
    """Mean squared distance between expert actions and the squashed mean.

    Returns ``(loss, grad)``; the log-std head receives no gradient.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    target = np.atleast_2d(np.asarray(expert_actions, dtype=np.float64))
    if len(obs) == 0:
        raise ValueError("empty batch")
    out, cache = forward(actor, spec, obs, return_cache=True)
    d = spec.output_dim // 2
    pi = np.tanh(out[:, :d])
    err = target - pi
    loss = float(np.mean(np.sum(err * err, axis=1)))
    g = np.zeros_like(out)
    g[:, :d] = -2.0 * err * (1.0 - pi * pi) / len(obs)
    grad, _ = backward(actor, spec, obs, g, cache=cache)
    return loss, grad


def demo_arrays(demos: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.array([t.obs for ep in demos for t in ep.transitions])
    act = np.array([t.action for ep in demos for t in ep.transitions])
    return obs, act


def pretrain(demos: list[Episode], config: BcConfig = BcConfig(),
             spec: MlpSpec | None = None) -> tuple[ParamVector, list[float]]:
    """Fit the actor mean to the demonstrations; returns params and per-epoch loss."""
    if not demos:
        raise ValueError("pretrain needs at least one demonstration")
    spec = spec or actor_spec()
    obs, act = demo_arrays(demos)
    rng = np.random.default_rng(config.seed)
    params = init_actor(spec, config.seed)
    opt = AdamState.fresh(len(params), config.learning_rate)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(obs))
        total = 0.0
        for start in range(0, len(obs), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = bc_loss(params, spec, obs[idx], act[idx])
            if not np.isfinite(loss):
                raise NonFiniteError("behavior-cloning loss became non-finite")
            params, opt = adam_step(opt, params, grad)
            total += loss * len(idx)
        losses.append(total / len(obs))
    return params, losses
