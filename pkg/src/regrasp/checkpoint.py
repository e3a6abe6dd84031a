"""Full training checkpoints: learner, replay buffers and the acting side.

Layout: ``RGCK`` magic, u16 version, u32 manifest length, a JSON manifest,
then the blobs it lists back to back. Parameter vectors and Adam moments are
stored as diffnet snapshots; buffers and the in-progress episode use the
episode-file encoding. All randomness in training is derived from
(seed, counter) pairs, so counters are all that is needed to resume.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffnet import AdamState, MlpSpec, ParamVector, parse_snapshot, snapshot_bytes
from .env import EnvState, Episode, episodes_from_bytes, episodes_to_bytes
from .replay import DualBuffer
from .rl import LearnerState

MAGIC = b"RGCK"
VERSION = 1


class _Writer:
    def __init__(self):
        self.blobs: list[bytes] = []
        self.index: dict[str, list[int]] = {}
        self.pos = 0

    def add(self, name: str, data: bytes):
        self.index[name] = [self.pos, len(data)]
        self.blobs.append(data)
        self.pos += len(data)

    def add_params(self, name: str, p: ParamVector):
        self.add(name, snapshot_bytes(p))

    def add_adam(self, name: str, opt: AdamState, like: ParamVector) -> dict:
        self.add_params(name + ".m", like.with_values(opt.first_moment))
        self.add_params(name + ".v", like.with_values(opt.second_moment))
        return {"step_count": opt.step_count, "learning_rate": opt.learning_rate,
                "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon}


def _spec_dict(spec: MlpSpec) -> dict:
    return {"input_dim": spec.input_dim, "hidden_dims": list(spec.hidden_dims),
            "output_dim": spec.output_dim, "activation": spec.activation}


def checkpoint_bytes(state: LearnerState, buffers: DualBuffer, actor=None, extra: dict | None = None) -> bytes:
    """Serialize learner + buffers (+ an optional ``ActorSide``)."""
    w = _Writer()
    w.add_params("actor", state.actor)
    w.add_params("pretrained", state.pretrained_actor)
    opts = {"actor": w.add_adam("opt.actor", state.actor_opt, state.actor)}
    for i, (c, t, o) in enumerate(zip(state.critics, state.targets, state.critic_opts)):
        w.add_params(f"critic.{i}", c)
        w.add_params(f"target.{i}", t)
        opts[f"critic.{i}"] = w.add_adam(f"opt.critic.{i}", o, c)
    w.add("buffers", episodes_to_bytes(buffers.to_episodes()))
    manifest = {
        "actor_spec": _spec_dict(state.actor_spec), "critic_spec": _spec_dict(state.critic_spec),
        "n_critics": len(state.critics), "update_count": state.update_count,
        "last_lambda": state.last_lambda, "optimizers": opts,
        "online_capacity": buffers.online_capacity, "extra": extra or {},
    }
    if actor is not None:
        w.add_params("acting_params", actor.params)
        w.add("episode", episodes_to_bytes([actor.episode]))
        s = actor.state
        manifest["actor_side"] = {
            "env_state": {"ee_pos": list(s.ee_pos), "aperture": s.aperture, "obj_pos": list(s.obj_pos),
                          "obj_height": s.obj_height, "grasped": s.grasped, "step_index": s.step_index,
                          "done": s.done, "success": s.success, "seed": s.seed},
            "obs": [float(v) for v in actor.obs],
            "env_steps": actor.env_steps, "episode_index": actor.episode_index,
            "snapshot_id": actor.snapshot_id, "episode_log": actor.episode_log,
        }
    manifest["blobs"] = w.index
    head = json.dumps(manifest).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(head)) + head + b"".join(w.blobs)


def parse_checkpoint(buf: bytes) -> tuple[LearnerState, DualBuffer, dict]:
    """Inverse of :func:`checkpoint_bytes`.

    Returns (learner state, buffers, manifest); the manifest's ``actor_side``
    entry plus the ``acting_params`` / ``episode`` blobs (under
    ``manifest["_blobs"]``) feed :meth:`ActorSide.restore`.
    """
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if len(buf) < 10 + n:
        raise ValueError(f"checkpoint truncated at byte {len(buf)}")
    manifest = json.loads(buf[10:10 + n])
    base = 10 + n

    def blob(name) -> bytes:
        off, size = manifest["blobs"][name]
        if len(buf) < base + off + size:
            raise ValueError(f"checkpoint truncated at byte {len(buf)}")
        return buf[base + off: base + off + size]

    def params(name) -> ParamVector:
        return parse_snapshot(blob(name))[0]

    def adam(name, meta) -> AdamState:
        return AdamState(params(name + ".m").values, params(name + ".v").values, **meta)

    opts = manifest["optimizers"]
    E = manifest["n_critics"]
    frozen = params("pretrained")
    frozen.values.setflags(write=False)
    state = LearnerState(
        actor_spec=MlpSpec(**manifest["actor_spec"]), critic_spec=MlpSpec(**manifest["critic_spec"]),
        actor=params("actor"), pretrained_actor=frozen,
        critics=[params(f"critic.{i}") for i in range(E)],
        targets=[params(f"target.{i}") for i in range(E)],
        actor_opt=adam("opt.actor", opts["actor"]),
        critic_opts=[adam(f"opt.critic.{i}", opts[f"critic.{i}"]) for i in range(E)],
        update_count=manifest["update_count"], last_lambda=manifest["last_lambda"],
    )
    buffers = DualBuffer.from_episodes(episodes_from_bytes(blob("buffers")), manifest["online_capacity"])
    if "actor_side" in manifest:
        manifest["_blobs"] = {"acting_params": params("acting_params"),
                              "episode": episodes_from_bytes(blob("episode"))[0]}
    return state, buffers, manifest


def save_checkpoint(path, state: LearnerState, buffers: DualBuffer, actor=None, extra: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(state, buffers, actor, extra))


def load_checkpoint(path) -> tuple[LearnerState, DualBuffer, dict]:
    return parse_checkpoint(Path(path).read_bytes())


def actor_side_fields(manifest: dict) -> dict:
    """Decoded acting-side fields from a parsed manifest, ready for ``ActorSide.restore``."""
    a = manifest["actor_side"]
    es = dict(a["env_state"])
    es["ee_pos"], es["obj_pos"] = tuple(es["ee_pos"]), tuple(es["obj_pos"])
    return {"env_state": EnvState(**es), "obs": np.array(a["obs"]), "env_steps": a["env_steps"],
            "episode_index": a["episode_index"], "snapshot_id": a["snapshot_id"],
            "episode_log": a["episode_log"], "params": manifest["_blobs"]["acting_params"],
            "episode": manifest["_blobs"]["episode"]}
