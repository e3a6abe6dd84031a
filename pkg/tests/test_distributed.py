import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regrasp.bc import BcConfig, actor_spec, pretrain
from regrasp.checkpoint import actor_side_fields, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from regrasp.diffnet import MlpSpec, init_params, snapshot_bytes
from regrasp.distributed import (EPISODE_END, HEARTBEAT, PARAM_SNAPSHOT, TRANSITION, ActorConfig, ActorNode,
                                 EpisodeEnd, FrameError, FrameReader, Heartbeat, LearnerNode, ParamSnapshot,
                                 TransitionMsg, p95, parse_frame, run_distributed, serialize_frame)
from regrasp.env import Transition, collect_demos
from regrasp.replay import DualBuffer
from regrasp.rl import RlHyperparams, init_learner
from regrasp.training import ActorSide, FinetuneSchedule, run_single_process

HP = RlHyperparams(E=2, N=32, G=2, hidden=(16, 16))
SPEC = actor_spec((16, 16))


@pytest.fixture(scope="module")
def setup():
    demos = collect_demos(3, "random", 0)
    bc, _ = pretrain(demos, BcConfig(epochs=20), SPEC)
    return demos, bc


def fresh(setup, hp=HP):
    demos, bc = setup
    buf = DualBuffer()
    buf.seed_demos(demos)
    return init_learner(bc, SPEC, hp, 0), buf


def same_state(a, b):
    return (a.actor.values.tobytes() == b.actor.values.tobytes()
            and all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a.critics, b.critics))
            and all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a.targets, b.targets))
            and a.update_count == b.update_count)


# --- framing ----------------------------------------------------------------------


def random_message(rng: np.random.Generator):
    kind = int(rng.integers(1, 5))
    if kind == TRANSITION:
        t = Transition(rng.normal(size=7), rng.uniform(-1, 1, 3), float(rng.integers(0, 2)),
                       rng.normal(size=7), bool(rng.integers(0, 2)))
        return TransitionMsg(int(rng.integers(0, 2 ** 32)), t)
    if kind == EPISODE_END:
        length = int(rng.integers(1, 101))
        ok = bool(rng.integers(0, 2))
        return EpisodeEnd(int(rng.integers(0, 2 ** 32)), ok, length, int(rng.integers(0, length)) if ok else None)
    if kind == PARAM_SNAPSHOT:
        spec = MlpSpec(int(rng.integers(1, 5)), (int(rng.integers(1, 5)),), int(rng.integers(1, 5)))
        p = init_params(spec, int(rng.integers(0, 1000)))
        p.values[:] = rng.normal(size=p.values.size)
        return ParamSnapshot(int(rng.integers(0, 2 ** 63)), p)
    return Heartbeat(None if rng.integers(0, 2) else int(rng.integers(0, 2 ** 63)))


def test_roundtrip_10k_random_frames():
    rng = np.random.default_rng(0)
    stream = bytearray()
    sent = []
    for _ in range(10_000):
        m = random_message(rng)
        frame = serialize_frame(m)
        back, end = parse_frame(frame)
        assert back == m and end == len(frame)
        assert struct.unpack_from("<I", frame)[0] == len(frame) - 5
        stream += frame
        sent.append(m)
    # the same frames arriving in arbitrary chunks
    reader, got, pos = FrameReader(), [], 0
    while pos < len(stream):
        step = int(rng.integers(1, 4000))
        got += reader.feed(bytes(stream[pos:pos + step]))
        pos += step
    assert got == sent and not reader.errors


def test_empty_heartbeat_is_valid():
    frame = struct.pack("<IB", 0, HEARTBEAT)
    assert parse_frame(frame) == (Heartbeat(), 5)


def _transition_frame():
    return serialize_frame(TransitionMsg(3, Transition(np.zeros(7), np.zeros(3), 0.0, np.zeros(7), False)))


def test_truncated_payload_reports_offset():
    frame = struct.pack("<IB", 100, HEARTBEAT) + bytes(90)
    with pytest.raises(FrameError) as e:
        parse_frame(frame)
    assert e.value.offset == 90 and "offset 90" in str(e.value)


# (corruption of a valid TRANSITION frame, error section, error offset)
MALFORMED = [
    (lambda f: f[:3], "header", 3),
    (lambda f: f[:5] + f[5:50], "payload", 45),
    (lambda f: f[:4] + bytes([9]) + f[5:], "header", 4),
    (lambda f: struct.pack("<IB", 148, TRANSITION) + f[5:-1], "payload", 148),
    (lambda f: struct.pack("<IB", 150, TRANSITION) + f[5:] + b"\0", "payload", 149),
    (lambda f: f[:-1] + b"\x02", "payload", 148),
    (lambda f: f[:5 + 4] + struct.pack("<d", np.nan) + f[5 + 12:], "payload", 4),
    (lambda f: f[:5 + 84] + struct.pack("<d", 0.5) + f[5 + 92:], "payload", 84),
    (lambda f: struct.pack("<IB", 2 ** 31, TRANSITION), "header", 0),
]


@pytest.mark.parametrize("build, section, offset", MALFORMED)
def test_malformed_transition_frames(build, section, offset):
    with pytest.raises(FrameError) as e:
        parse_frame(build(_transition_frame()))
    assert (e.value.section, e.value.offset) == (section, offset)


def test_malformed_other_frames():
    snap = serialize_frame(ParamSnapshot(7, init_params(MlpSpec(2, (3,), 1), 0)))
    with pytest.raises(FrameError):
        parse_frame(snap[:5] + b"XXXX" + snap[9:])
    with pytest.raises(FrameError):
        parse_frame(struct.pack("<IB", len(snap) - 5 - 8, PARAM_SNAPSHOT) + snap[5:-8])
    with pytest.raises(FrameError):
        parse_frame(struct.pack("<IB", 3, HEARTBEAT) + b"abc")
    with pytest.raises(FrameError):
        parse_frame(struct.pack("<IB", 13, EPISODE_END) + struct.pack("<IBiI", 1, 1, 10, 5))
    with pytest.raises(FrameError):
        parse_frame(struct.pack("<IB", 13, EPISODE_END) + struct.pack("<IBiI", 1, 7, -1, 5))


def test_reader_skips_bad_frame_and_continues():
    good = serialize_frame(Heartbeat(1))
    bad = struct.pack("<IB", 3, HEARTBEAT) + b"abc"
    r = FrameReader()
    assert r.feed(good + bad + good) == [Heartbeat(1), Heartbeat(1)]
    assert len(r.errors) == 1


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_random_bytes_never_crash(data):
    try:
        parse_frame(data)
    except FrameError:
        pass


# --- actor / learner wiring -------------------------------------------------------


def test_lockstep_matches_single_process(setup):
    sched = FinetuneSchedule(env_steps=300, reward="oracle", param_refresh_interval=7, updates_per_step=2)
    s1, b1 = fresh(setup)
    r1 = run_single_process(s1, b1, HP, sched)
    s2, b2 = fresh(setup)
    r2 = run_distributed(s2, b2, HP, sched, lockstep=True)
    assert s1.update_count > 100
    assert same_state(s1, s2)
    assert r1.metrics == r2.metrics and r1.snapshot_ids == r2.snapshot_ids
    assert r1.episodes == r2.episodes
    ids = r2.actor_node.observed_snapshot_ids
    assert ids == sorted(ids) and ids[0] == 0


def test_refresh_spacing_and_promotion(setup):
    sched = FinetuneSchedule(env_steps=400, reward="oracle", param_refresh_interval=50, updates_per_step=1)
    s, b = fresh(setup)
    demo_before = b.demo_size
    r = run_distributed(s, b, HP, sched, lockstep=True)
    n = s.update_count
    assert r.snapshot_ids == list(range(1, n // 50 + 1))
    wins = [e for e in r.learner_node.episode_log if e["detected_success"]]
    assert b.demo_size == demo_before + sum(e["length"] for e in wins)


def test_gating_before_minimum_fill(setup):
    hp = RlHyperparams(E=2, N=512, G=1, hidden=(16, 16))
    sched = FinetuneSchedule(env_steps=100, reward="oracle")
    s, b = fresh(setup, hp)
    r = run_distributed(s, b, hp, sched, lockstep=True)
    assert s.update_count == 0 and r.metrics == [] and b.online_size == 100


def test_free_running_transport_is_transparent(setup):
    sched = FinetuneSchedule(env_steps=150, reward="oracle")
    s, b = fresh(setup)
    emitted = []
    orig = ActorNode.emit

    def spy(self, msg):
        if isinstance(msg, TransitionMsg):
            emitted.append(msg.transition)
        orig(self, msg)

    ActorNode.emit = spy
    try:
        r = run_distributed(s, b, HP, sched, lockstep=False, actor_config=ActorConfig(control_period=0.002))
    finally:
        ActorNode.emit = orig
    assert r.actor_node.dropped == 0
    assert b.online_transitions() == emitted and len(emitted) == 150


def test_drop_oldest_overflow(setup):
    _, bc = setup
    a, l = socket.socketpair()
    side = ActorSide(SPEC, bc, FinetuneSchedule(reward="oracle"))
    node = ActorNode(side, a, ActorConfig(queue_capacity=5))
    for k in range(12):
        node.emit(Heartbeat(k))
    assert node.dropped == 7
    node.start()
    node.close()
    got = FrameReader().feed(l.recv(1 << 16))
    assert got == [Heartbeat(k) for k in range(7, 12)]
    l.close()


def test_control_rate_survives_learner_stall(setup):
    s, b = fresh(setup)
    sched = FinetuneSchedule(env_steps=0, reward="oracle")
    a_sock, l_sock = socket.socketpair()
    learner = LearnerNode(s, b, HP, sched, l_sock)
    side = ActorSide(SPEC, s.actor.copy(), sched)
    actor = ActorNode(side, a_sock, ActorConfig(control_period=0.02))
    th = threading.Thread(target=learner.run, daemon=True)
    actor.start()
    th.start()
    actor.wait_for_initial_snapshot()
    actor.run(150)
    idle = actor.tick_periods()[1:]
    updates_before = s.update_count
    learner.pause(10.0)
    n0 = len(actor.tick_times)
    actor.run(500)
    stalled = np.diff(actor.tick_times[n0:])
    actor.close()
    learner.stop_event.set()
    th.join(5)
    l_sock.close()
    assert updates_before > 0
    assert p95(stalled) <= 1.1 * p95(idle), (p95(idle), p95(stalled))
    assert actor.dropped == 0


# --- checkpoints ------------------------------------------------------------------


def test_checkpoint_restore_continues_identically(setup, tmp_path):
    sched = FinetuneSchedule(env_steps=150, reward="oracle", param_refresh_interval=10)
    whole_s, whole_b = fresh(setup)
    run_single_process(whole_s, whole_b, HP, FinetuneSchedule(env_steps=300, reward="oracle",
                                                               param_refresh_interval=10))
    s, b = fresh(setup)
    first = run_single_process(s, b, HP, sched)
    save_checkpoint(tmp_path / "ck.bin", s, b, first.actor)
    run_single_process(s, b, HP, sched, actor=first.actor)
    assert same_state(s, whole_s)

    rs, rb, manifest = load_checkpoint(tmp_path / "ck.bin")
    side = ActorSide.restore(rs.actor_spec, sched, actor_side_fields(manifest))
    run_single_process(rs, rb, HP, sched, actor=side)
    assert same_state(rs, whole_s)
    assert all(x.first_moment.tobytes() == y.first_moment.tobytes() for x, y in zip(rs.critic_opts, s.critic_opts))
    assert rb.online_transitions() == b.online_transitions()


def test_checkpoint_rejects_garbage(setup):
    s, b = fresh(setup)
    buf = checkpoint_bytes(s, b)
    with pytest.raises(ValueError):
        parse_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(ValueError):
        parse_checkpoint(buf[:-10])
