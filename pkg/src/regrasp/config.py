"""Flat ``key = value`` run configuration.

Keys are grouped by prefix (``env.``, ``demos.``, ``classifier.``, ``bc.``,
``rl.``, ``dist.``, ``eval.``) plus a top-level ``seed``. Unknown keys are
errors; missing keys take the defaults below. Blank lines and ``#``
comments are ignored.
"""
from __future__ import annotations

from pathlib import Path

from .bc import BcConfig
from .distributed import ActorConfig
from .env import EnvConfig
from .rl import RlHyperparams
from .training import FinetuneSchedule


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # environment
    "env.reset_mode": "random",
    "env.horizon": 100,
    "env.max_step": 0.05,
    "env.reach_radius": 0.06,
    "env.close_threshold": 0.3,
    "env.drop_threshold": 0.5,
    "env.lift_height": 0.15,
    "env.lift_increment": 0.05,
    "env.obs_noise": 0.01,
    # demonstrations and failure rollouts
    "demos.count": 30,
    "demos.failures": 30,
    "demos.expert_noise": 0.1,
    # reward classifier
    "classifier.epochs": 200,
    "classifier.hidden": (32, 32),
    "classifier.learning_rate": 1e-3,
    "classifier.batch_size": 256,
    "classifier.threshold": 0.9,
    "classifier.class_balance": True,
    # behavior cloning
    "bc.epochs": 200,
    "bc.batch_size": 256,
    "bc.learning_rate": 3e-4,
    "bc.hidden": (64, 64),
    # fine-tuning
    "rl.gamma": 0.99,
    "rl.alpha": 0.05,
    "rl.beta": 1.0,
    "rl.rho": 0.995,
    "rl.E": 10,
    "rl.Z": 2,
    "rl.G": 4,
    "rl.N": 256,
    "rl.critic_lr": 3e-4,
    "rl.actor_lr": 3e-4,
    "rl.objective": "alg1",
    "rl.use_bc_term": True,
    "rl.hidden": (64, 64),
    "rl.activation": "relu",
    "rl.env_steps": 6000,
    "rl.updates_per_step": 1,
    "rl.reward": "classifier",
    "rl.exploration": "stochastic",
    "rl.online_capacity": 100_000,
    "rl.checkpoint_every": 1000,
    # actor-learner harness
    "dist.mode": "single",
    "dist.lockstep": False,
    "dist.control_period": 0.02,
    "dist.param_refresh_interval": 50,
    "dist.queue_capacity": 10_000,
    "dist.heartbeat_interval": 1.0,
    "dist.heartbeat_timeout": 5.0,
    "dist.host": "127.0.0.1",
    "dist.port": 0,
    # evaluation
    "eval.trials": 100,
    "eval.seed": 12345,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def parse_config(text: str, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = parse_config(Path(path).read_text()) if path else dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return cfg


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in DEFAULTS)


# --- typed views -------------------------------------------------------------------


def env_config(cfg: dict) -> EnvConfig:
    return EnvConfig(horizon=cfg["env.horizon"], max_step=cfg["env.max_step"],
                     reach_radius=cfg["env.reach_radius"], close_threshold=cfg["env.close_threshold"],
                     drop_threshold=cfg["env.drop_threshold"], lift_height=cfg["env.lift_height"],
                     lift_increment=cfg["env.lift_increment"], obs_noise=cfg["env.obs_noise"])


def bc_config(cfg: dict) -> BcConfig:
    return BcConfig(epochs=cfg["bc.epochs"], batch_size=cfg["bc.batch_size"],
                    learning_rate=cfg["bc.learning_rate"], seed=cfg["seed"])


def rl_hyperparams(cfg: dict) -> RlHyperparams:
    return RlHyperparams(gamma=cfg["rl.gamma"], alpha=cfg["rl.alpha"], beta=cfg["rl.beta"], rho=cfg["rl.rho"],
                         E=cfg["rl.E"], Z=cfg["rl.Z"], G=cfg["rl.G"], N=cfg["rl.N"],
                         critic_lr=cfg["rl.critic_lr"], actor_lr=cfg["rl.actor_lr"],
                         objective=cfg["rl.objective"], use_bc_term=cfg["rl.use_bc_term"],
                         hidden=cfg["rl.hidden"], activation=cfg["rl.activation"])


def schedule(cfg: dict) -> FinetuneSchedule:
    return FinetuneSchedule(env_steps=cfg["rl.env_steps"], updates_per_step=cfg["rl.updates_per_step"],
                            param_refresh_interval=cfg["dist.param_refresh_interval"],
                            exploration=cfg["rl.exploration"], reset_mode=cfg["env.reset_mode"],
                            reward=cfg["rl.reward"], seed=cfg["seed"])


def actor_config(cfg: dict) -> ActorConfig:
    return ActorConfig(control_period=cfg["dist.control_period"],
                       param_refresh_interval=cfg["dist.param_refresh_interval"],
                       exploration=cfg["rl.exploration"], queue_capacity=cfg["dist.queue_capacity"],
                       heartbeat_interval=cfg["dist.heartbeat_interval"],
                       heartbeat_timeout=cfg["dist.heartbeat_timeout"])


def validate(cfg: dict):
    """Build every typed view once so bad values fail before any work starts."""
    for build in (env_config, bc_config, rl_hyperparams, schedule, actor_config):
        try:
            build(cfg)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if cfg["env.reset_mode"] not in ("fixed", "random"):
        raise ConfigError(f"env.reset_mode must be fixed or random, got {cfg['env.reset_mode']!r}")
    if cfg["dist.mode"] not in ("single", "distributed"):
        raise ConfigError(f"dist.mode must be single or distributed, got {cfg['dist.mode']!r}")
    if cfg["eval.trials"] < 1:
        raise ConfigError("eval.trials must be >= 1")
    if cfg["demos.count"] < 1:
        raise ConfigError("demos.count must be >= 1")
