"""Planar grasp-and-lift simulator, scripted expert and episode files.

The hand moves in the square [-1, 1]^2, opens and closes a single aperture
and must close on the object, then lift it by retreating toward home. Reward
is 1 on the step the object reaches lift height and 0 everywhere else.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .seeding import derive_seed, rng_for

OBS_DIM = 7
ACT_DIM = 3

EPISODE_MAGIC = b"RGEP"
EPISODE_VERSION = 1
_TOL = 1e-9  # absorbs rounding in repeated 0.05 aperture steps


class EpisodeDoneError(RuntimeError):
    pass


class ExpertFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 100
    max_step: float = 0.05
    reach_radius: float = 0.06
    close_threshold: float = 0.3
    drop_threshold: float = 0.5
    lift_height: float = 0.15
    lift_increment: float = 0.05
    obs_noise: float = 0.01
    home: tuple[float, float] = (-0.8, -0.8)
    fixed_obj: tuple[float, float] = (0.3, 0.2)
    obj_low: float = 0.0
    obj_high: float = 0.6


@dataclass(frozen=True)
class EnvState:
    ee_pos: tuple[float, float]
    aperture: float
    obj_pos: tuple[float, float]
    obj_height: float = 0.0
    grasped: bool = False
    step_index: int = 0
    done: bool = False
    success: bool = False
    seed: int = 0


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (np.array_equal(self.obs, other.obs) and np.array_equal(self.action, other.action)
                and self.reward == other.reward and np.array_equal(self.next_obs, other.next_obs)
                and bool(self.done) == bool(other.done))

    def is_valid(self) -> bool:
        return (self.obs.shape == (OBS_DIM,) and self.next_obs.shape == (OBS_DIM,)
                and self.action.shape == (ACT_DIM,) and self.reward in (0.0, 1.0)
                and bool(np.all(np.isfinite(self.obs))) and bool(np.all(np.isfinite(self.next_obs)))
                and bool(np.all(np.isfinite(self.action))))


@dataclass
class Episode:
    transitions: list[Transition] = field(default_factory=list)
    success: bool = False
    success_frame: int | None = None

    def __len__(self):
        return len(self.transitions)

    @property
    def cycle_time(self) -> int | None:
        return self.success_frame + 1 if self.success else None


def observe(state: EnvState, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Observation with uniform sensor noise on the object position.

    Noise is a pure function of (episode seed, step index).
    """
    nu = rng_for(state.seed, state.step_index, 7).uniform(-config.obs_noise, config.obs_noise, 2) \
        if config.obs_noise > 0 else np.zeros(2)
    return np.array([state.ee_pos[0], state.ee_pos[1], state.aperture,
                     state.obj_pos[0] + nu[0], state.obj_pos[1] + nu[1],
                     state.obj_height, 1.0 if state.grasped else 0.0])


def reset(seed: int, reset_mode: str = "fixed", config: EnvConfig = EnvConfig()):
    if reset_mode == "fixed":
        obj = tuple(config.fixed_obj)
    elif reset_mode == "random":
        xy = rng_for(seed, 1).uniform(config.obj_low, config.obj_high, 2)
        obj = (float(xy[0]), float(xy[1]))
    else:
        raise ValueError(f"unknown reset mode {reset_mode!r}")
    state = EnvState(ee_pos=tuple(config.home), aperture=1.0, obj_pos=obj, seed=int(seed))
    return state, observe(state, config)


def step(state: EnvState, action, config: EnvConfig = EnvConfig()):
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode; reset first")
    if state.step_index >= config.horizon:
        raise EpisodeDoneError("step() called past the horizon")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if a.shape != (ACT_DIM,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be {ACT_DIM} finite reals, got {action!r}")

    ee = np.array(state.ee_pos)
    move = config.max_step * a[:2]
    new_ee = np.clip(ee + move, -1.0, 1.0)
    aperture = float(np.clip(state.aperture + config.max_step * a[2], 0.0, 1.0))
    grasped, height, obj = state.grasped, state.obj_height, np.array(state.obj_pos)

    if grasped and aperture > config.drop_threshold:
        grasped, height = False, 0.0
    if grasped:
        obj = new_ee.copy()
    elif aperture < config.close_threshold + _TOL and np.linalg.norm(new_ee - obj) < config.reach_radius:
        grasped = True
    if grasped and float(np.dot(move, np.array(config.home) - ee)) > 0.0:
        height += config.lift_increment

    success = grasped and height >= config.lift_height
    t = state.step_index + 1
    done = success or t >= config.horizon
    new_state = EnvState(ee_pos=(float(new_ee[0]), float(new_ee[1])), aperture=aperture,
                         obj_pos=(float(obj[0]), float(obj[1])), obj_height=float(height),
                         grasped=bool(grasped), step_index=t, done=done, success=success,
                         seed=state.seed)
    return new_state, observe(new_state, config), (1.0 if success else 0.0), done


def scripted_expert(state: EnvState, noise_seed: int | None = None, noise: float = 0.1,
                    config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Reach, close, lift; uniform exploration noise on every component."""
    ee = np.array(state.ee_pos)
    obj = np.array(state.obj_pos)
    if state.grasped:
        d = np.array(config.home) - ee
        a = np.array([*(d / max(np.linalg.norm(d), 1e-9)), -1.0])
    else:
        d = obj - ee
        dist = np.linalg.norm(d)
        if dist < config.reach_radius:
            # stay centred on the object while the hand closes
            corr = d / config.max_step
            n = np.linalg.norm(corr)
            a = np.array([*(corr / n if n > 1.0 else corr), -1.0])
        else:
            a = np.array([*(d / dist), 1.0])
    if noise > 0:
        a = a + np.random.default_rng(noise_seed).uniform(-noise, noise, ACT_DIM)
    return np.clip(a, -1.0, 1.0)


Policy = Callable[[EnvState, np.ndarray], np.ndarray]


def run_episode(policy: Policy, seed: int, reset_mode: str = "fixed",
                config: EnvConfig = EnvConfig()) -> Episode:
    """Roll out ``policy(state, obs) -> action`` until done; annotate success."""
    state, obs = reset(seed, reset_mode, config)
    ep = Episode()
    while not state.done:
        action = np.clip(np.asarray(policy(state, obs), dtype=np.float64), -1.0, 1.0)
        state, next_obs, r, done = step(state, action, config)
        ep.transitions.append(Transition(obs, action, r, next_obs, bool(r == 1.0)))
        obs = next_obs
    if state.success:
        ep.success, ep.success_frame = True, len(ep.transitions) - 1
    return ep


def expert_policy(seed: int, noise: float = 0.1, config: EnvConfig = EnvConfig()) -> Policy:
    def policy(state, obs):
        return scripted_expert(state, derive_seed(seed, state.step_index), noise, config)
    return policy


def collect_demos(n: int, reset_mode: str = "random", seed: int = 0,
                  config: EnvConfig = EnvConfig(), noise: float = 0.1) -> list[Episode]:
    if n < 1:
        raise ValueError("need at least one demonstration")
    demos, failures, k = [], 0, 0
    while len(demos) < n:
        ep_seed = derive_seed(seed, k, 101)
        ep = run_episode(expert_policy(ep_seed, noise, config), ep_seed, reset_mode, config)
        k += 1
        if ep.success:
            demos.append(ep)
            failures = 0
        else:
            failures += 1
            if failures >= 10 * n:
                raise ExpertFailedError(f"expert failed {failures} consecutive attempts")
    return demos


def failure_policy(seed: int, config: EnvConfig = EnvConfig()) -> Policy:
    """A rollout policy that does not finish the task.

    Cycles by seed through random flailing, reaching without closing, and
    grasping then letting go part-way through the lift.
    """
    mode = seed % 3

    def policy(state, obs):
        rng = np.random.default_rng(derive_seed(seed, state.step_index))
        if mode == 0:
            return rng.uniform(-1.0, 1.0, ACT_DIM)
        a = scripted_expert(state, derive_seed(seed, state.step_index, 1), 0.1, config)
        if mode == 1 or (state.grasped and state.obj_height >= config.lift_height - 2 * config.lift_increment):
            a[2] = 1.0
            if mode == 2:
                a[:2] = 0.0
        return a
    return policy


def collect_failures(n: int, reset_mode: str = "random", seed: int = 0,
                     config: EnvConfig = EnvConfig()) -> list[Episode]:
    """Unsuccessful rollouts, used as negatives for the success classifier."""
    out, k = [], 0
    while len(out) < n:
        ep_seed = derive_seed(seed, k, 202)
        ep = run_episode(failure_policy(k, config), ep_seed, reset_mode, config)
        k += 1
        if not ep.success:
            out.append(ep)
        if k > 10 * n + 10:
            raise ExpertFailedError("could not produce failed rollouts")
    return out


# --- episode file ------------------------------------------------------------------

_HDR = struct.Struct("<4sHI")
_EP_HDR = struct.Struct("<BiI")
_TRANSITION = struct.Struct("<7d3dd7dB")
TRANSITION_SIZE = _TRANSITION.size


def pack_transition(t: Transition) -> bytes:
    return _TRANSITION.pack(*t.obs, *t.action, float(t.reward), *t.next_obs, 1 if t.done else 0)


def unpack_transition(buf, offset: int = 0) -> Transition:
    v = _TRANSITION.unpack_from(buf, offset)
    return Transition(np.array(v[0:7]), np.array(v[7:10]), v[10], np.array(v[11:18]), bool(v[18]))


def episodes_to_bytes(episodes: Iterable[Episode]) -> bytes:
    episodes = list(episodes)
    out = [_HDR.pack(EPISODE_MAGIC, EPISODE_VERSION, len(episodes))]
    for ep in episodes:
        sf = -1 if ep.success_frame is None else ep.success_frame
        out.append(_EP_HDR.pack(1 if ep.success else 0, sf, len(ep.transitions)))
        out.extend(pack_transition(t) for t in ep.transitions)
    return b"".join(out)


def episodes_from_bytes(buf: bytes) -> list[Episode]:
    if len(buf) < _HDR.size:
        raise ValueError(f"episode file truncated at byte {len(buf)}")
    magic, version, count = _HDR.unpack_from(buf, 0)
    if magic != EPISODE_MAGIC:
        raise ValueError("not an episode file (bad magic)")
    if version != EPISODE_VERSION:
        raise ValueError(f"unsupported episode file version {version}")
    pos, episodes = _HDR.size, []
    for _ in range(count):
        if len(buf) < pos + _EP_HDR.size:
            raise ValueError(f"episode file truncated at byte {len(buf)}")
        succ, sf, n = _EP_HDR.unpack_from(buf, pos)
        pos += _EP_HDR.size
        if len(buf) < pos + n * TRANSITION_SIZE:
            raise ValueError(f"episode file truncated at byte {len(buf)}")
        ts = [unpack_transition(buf, pos + j * TRANSITION_SIZE) for j in range(n)]
        pos += n * TRANSITION_SIZE
        episodes.append(Episode(ts, bool(succ), None if sf < 0 else sf))
    return episodes


def save_episodes(path, episodes: Iterable[Episode]):
    with open(path, "wb") as f:
        f.write(episodes_to_bytes(episodes))


def load_episodes(path) -> list[Episode]:
    with open(path, "rb") as f:
        return episodes_from_bytes(f.read())


def with_state(state: EnvState, **changes) -> EnvState:
    return replace(state, **changes)
