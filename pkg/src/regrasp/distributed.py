"""Actor and learner running in separate execution contexts over a framed byte stream.

Frames are ``u32 payload length | u8 type | payload``, little-endian. The
actor never waits on the learner in free-running mode: outgoing frames go to
a bounded drop-oldest queue drained by a sender thread, and parameter
snapshots are picked up from a slot filled by a receiver thread. In lockstep
mode each env step is followed by a heartbeat that the learner answers only
after running its updates, which reproduces the fused trainer exactly.
"""
from __future__ import annotations

import logging
import math
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierModel
from .diffnet import ParamVector, parse_snapshot, snapshot_bytes
from .env import TRANSITION_SIZE, EnvConfig, Episode, Transition, pack_transition, unpack_transition
from .replay import DualBuffer
from .rl import LearnerState, RlHyperparams, learner_iteration
from .training import ActorSide, FinetuneSchedule, RunResult

log = logging.getLogger(__name__)

TRANSITION, EPISODE_END, PARAM_SNAPSHOT, HEARTBEAT = 1, 2, 3, 4
MSG_TYPES = (TRANSITION, EPISODE_END, PARAM_SNAPSHOT, HEARTBEAT)
MAX_PAYLOAD = 64 * 1024 * 1024

_HEADER = struct.Struct("<IB")
_EID = struct.Struct("<I")
_EPISODE_END = struct.Struct("<IBiI")
_SNAP_ID = struct.Struct("<Q")
_SEQ = struct.Struct("<Q")


class FrameError(ValueError):
    """Malformed frame. ``offset`` counts bytes from the start of ``section`` ("header" or "payload")."""

    def __init__(self, message: str, offset: int, section: str = "payload"):
        super().__init__(f"{message} at {section} offset {offset}")
        self.offset = offset
        self.section = section


# --- messages ---------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionMsg:
    episode_id: int
    transition: Transition

    msg_type = TRANSITION


@dataclass(frozen=True)
class EpisodeEnd:
    episode_id: int
    success: bool
    length: int
    success_frame: int | None = None

    msg_type = EPISODE_END


@dataclass(eq=False)
class ParamSnapshot:
    snapshot_id: int
    params: ParamVector

    msg_type = PARAM_SNAPSHOT

    def __eq__(self, other):
        return (isinstance(other, ParamSnapshot) and self.snapshot_id == other.snapshot_id
                and self.params.layout == other.params.layout
                and self.params.values.tobytes() == other.params.values.tobytes())


@dataclass(frozen=True)
class Heartbeat:
    seq: int | None = None

    msg_type = HEARTBEAT


Message = TransitionMsg | EpisodeEnd | ParamSnapshot | Heartbeat


def _payload(msg: Message) -> bytes:
    if isinstance(msg, TransitionMsg):
        return _EID.pack(msg.episode_id) + pack_transition(msg.transition)
    if isinstance(msg, EpisodeEnd):
        sf = -1 if msg.success_frame is None else msg.success_frame
        return _EPISODE_END.pack(msg.episode_id, int(msg.success), sf, msg.length)
    if isinstance(msg, ParamSnapshot):
        return snapshot_bytes(msg.params) + _SNAP_ID.pack(msg.snapshot_id)
    if isinstance(msg, Heartbeat):
        return b"" if msg.seq is None else _SEQ.pack(msg.seq)
    raise TypeError(f"cannot serialize {type(msg).__name__}")


def serialize_frame(msg: Message) -> bytes:
    body = _payload(msg)
    return _HEADER.pack(len(body), msg.msg_type) + body


def _expect_size(payload: bytes, size: int):
    if len(payload) != size:
        raise FrameError(f"length mismatch: expected {size} payload bytes, declared {len(payload)}",
                         min(size, len(payload)))


def _parse_payload(kind: int, payload: bytes) -> Message:
    if kind == TRANSITION:
        _expect_size(payload, _EID.size + TRANSITION_SIZE)
        (eid,) = _EID.unpack_from(payload)
        if payload[-1] not in (0, 1):
            raise FrameError("done flag must be 0 or 1", len(payload) - 1)
        t = unpack_transition(payload, _EID.size)
        values = np.concatenate([t.obs, t.action, [t.reward], t.next_obs])
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise FrameError("non-finite transition field", _EID.size + 8 * int(bad[0]))
        if t.reward not in (0.0, 1.0):
            raise FrameError("reward must be 0 or 1", _EID.size + 80)
        return TransitionMsg(eid, t)
    if kind == EPISODE_END:
        _expect_size(payload, _EPISODE_END.size)
        eid, success, sf, length = _EPISODE_END.unpack(payload)
        if success not in (0, 1):
            raise FrameError("success flag must be 0 or 1", 4)
        if success and not 0 <= sf < length:
            raise FrameError("success frame outside the episode", 5)
        return EpisodeEnd(eid, bool(success), length, sf if success else None)
    if kind == PARAM_SNAPSHOT:
        try:
            params, end = parse_snapshot(payload)
        except ValueError as e:
            raise FrameError(f"bad snapshot ({e})", 0) from e
        _expect_size(payload[end:], _SNAP_ID.size)
        (sid,) = _SNAP_ID.unpack_from(payload, end)
        return ParamSnapshot(sid, params)
    if kind == HEARTBEAT:
        if len(payload) == 0:
            return Heartbeat()
        _expect_size(payload, _SEQ.size)
        return Heartbeat(_SEQ.unpack(payload)[0])
    raise FrameError(f"unknown message type {kind}", 4, "header")


def parse_frame(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode the frame starting at ``offset``; returns (message, end offset)."""
    avail = len(buf) - offset
    if avail < _HEADER.size:
        raise FrameError("truncated header", max(avail, 0), "header")
    length, kind = _HEADER.unpack_from(buf, offset)
    if kind not in MSG_TYPES:
        raise FrameError(f"unknown message type {kind}", 4, "header")
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared length {length} exceeds limit", 0, "header")
    start = offset + _HEADER.size
    if len(buf) - start < length:
        raise FrameError(f"truncated frame: declared length {length}", len(buf) - start)
    return _parse_payload(kind, bytes(buf[start:start + length])), start + length


class FrameReader:
    """Incremental decoder for a byte stream.

    Complete but malformed frames are skipped and recorded in ``errors``; an
    unparseable header (unknown type, absurd length) poisons the stream.
    """

    def __init__(self):
        self._buf = bytearray()
        self.errors: list[FrameError] = []

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out, pos = [], 0
        while len(self._buf) - pos >= _HEADER.size:
            length, kind = _HEADER.unpack_from(self._buf, pos)
            if kind not in MSG_TYPES or length > MAX_PAYLOAD:
                del self._buf[:pos]
                parse_frame(self._buf)  # raises with the header position
            end = pos + _HEADER.size + length
            if end > len(self._buf):
                break
            try:
                msg, _ = parse_frame(self._buf, pos)
                out.append(msg)
            except FrameError as e:
                log.warning("dropping malformed frame: %s", e)
                self.errors.append(e)
            pos = end
        del self._buf[:pos]
        return out


# --- actor ------------------------------------------------------------------------


@dataclass(frozen=True)
class ActorConfig:
    control_period: float = 0.02
    param_refresh_interval: int = 50
    exploration: str = "stochastic"
    queue_capacity: int = 10_000
    heartbeat_interval: float = 1.0
    heartbeat_timeout: float = 5.0

    def __post_init__(self):
        if self.control_period <= 0 or self.param_refresh_interval < 1 or self.queue_capacity < 1:
            raise ValueError("control period, refresh interval and queue capacity must be positive")
        if self.exploration not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown exploration mode {self.exploration!r}")


class ActorNode:
    """Drives an :class:`ActorSide` at a fixed control period and streams its transitions.

    ``connect`` (optional) is a zero-argument callable returning a fresh socket;
    it is used to re-establish a lost connection while frames stay queued.
    """

    def __init__(self, side: ActorSide, sock: socket.socket, config: ActorConfig = ActorConfig(),
                 lockstep: bool = False, connect=None):
        self.side, self.sock, self.config = side, sock, config
        self.lockstep, self.connect = lockstep, connect
        self.dropped = 0
        self.heartbeat_timeouts = 0
        self.tick_times: list[float] = []
        self.observed_snapshot_ids: list[int] = []
        self.sent_frames = 0
        self._outbox: deque[bytes] = deque()
        self._cv = threading.Condition()
        self._slot: ParamSnapshot | None = None
        self._slot_lock = threading.Lock()
        self._acks: deque[int] = deque()
        self._ack_cv = threading.Condition()
        self._stop = threading.Event()
        self._closed = threading.Event()
        self._last_heard = time.monotonic()
        self._reader = FrameReader()
        self._threads = [threading.Thread(target=self._send_loop, daemon=True, name="actor-send"),
                         threading.Thread(target=self._recv_loop, daemon=True, name="actor-recv")]

    # outgoing
    def emit(self, msg: Message):
        frame = serialize_frame(msg)
        with self._cv:
            if len(self._outbox) >= self.config.queue_capacity:
                self._outbox.popleft()
                self.dropped += 1
            self._outbox.append(frame)
            self._cv.notify()

    def _send_loop(self):
        while True:
            with self._cv:
                while not self._outbox and not self._stop.is_set():
                    self._cv.wait(0.1)
                if not self._outbox and self._stop.is_set():
                    return
                frame = self._outbox[0]
            try:
                self.sock.sendall(frame)
            except OSError as e:
                if self._stop.is_set() and self.connect is None:
                    return
                self._reconnect(e)
                continue
            with self._cv:
                if self._outbox and self._outbox[0] is frame:
                    self._outbox.popleft()
                self.sent_frames += 1

    def _reconnect(self, err):
        if self.connect is None:
            log.error("actor link lost (%s); no reconnect available", err)
            self._stop.set()
            return
        log.warning("actor link lost (%s); reconnecting", err)
        while not self._closed.is_set():
            try:
                self.sock = self.connect()
                self._reader = FrameReader()
                self._last_heard = time.monotonic()
                return
            except OSError:
                time.sleep(0.2)

    # incoming
    def _recv_loop(self):
        while not self._closed.is_set():
            sock = self.sock
            try:
                ready, _, _ = select.select([sock], [], [], 0.1)
                if not ready:
                    self._check_heartbeat()
                    continue
                data = sock.recv(1 << 16)
            except (OSError, ValueError):
                data = b""
            if not data:
                if self.connect is None or self._closed.is_set():
                    self._closed.set()
                    with self._ack_cv:
                        self._ack_cv.notify_all()
                    return
                time.sleep(0.1)
                continue
            try:
                msgs = self._reader.feed(data)
            except FrameError as e:
                log.error("unrecoverable stream error from learner: %s", e)
                self._closed.set()
                return
            self._last_heard = time.monotonic()
            for m in msgs:
                if isinstance(m, ParamSnapshot):
                    with self._slot_lock:
                        if self._slot is None or m.snapshot_id >= self._slot.snapshot_id:
                            self._slot = m
                elif isinstance(m, Heartbeat) and m.seq is not None:
                    with self._ack_cv:
                        self._acks.append(m.seq)
                        self._ack_cv.notify_all()

    def _check_heartbeat(self):
        if self.lockstep:
            return
        if time.monotonic() - self._last_heard > self.config.heartbeat_timeout:
            self.heartbeat_timeouts += 1
            self._last_heard = time.monotonic()
            log.warning("no heartbeat from learner for %.1f s", self.config.heartbeat_timeout)

    def _apply_latest_snapshot(self):
        with self._slot_lock:
            snap = self._slot
        if snap is not None and snap.snapshot_id >= self.side.snapshot_id and snap.params is not self.side.params:
            self.side.set_params(snap.params, snap.snapshot_id)
            self.observed_snapshot_ids.append(snap.snapshot_id)

    def _wait_ack(self, seq: int, timeout: float | None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._ack_cv:
            while True:
                while self._acks:
                    if self._acks.popleft() == seq:
                        return True
                if self._closed.is_set():
                    return False
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return False
                self._ack_cv.wait(0.5 if left is None else min(left, 0.5))

    def wait_for_initial_snapshot(self, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        while True:
            with self._slot_lock:
                if self._slot is not None:
                    break
            if self._closed.is_set() or time.monotonic() > deadline:
                raise ConnectionError("no initial policy snapshot from learner")
            time.sleep(0.001)
        self._apply_latest_snapshot()

    def start(self):
        for th in self._threads:
            th.start()

    def run(self, env_steps: int, stop: threading.Event | None = None, ack_timeout: float | None = 60.0):
        """Run ``env_steps`` control ticks (or until ``stop``)."""
        period = self.config.control_period
        next_beat = time.monotonic() + self.config.heartbeat_interval
        deadline = time.perf_counter()
        for _ in range(env_steps):
            if (stop is not None and stop.is_set()) or self._stop.is_set():
                break
            self._apply_latest_snapshot()
            self.tick_times.append(time.perf_counter())
            eid = self.side.episode_index
            t, finished = self.side.tick()
            self.emit(TransitionMsg(eid, t))
            if finished is not None:
                self.emit(EpisodeEnd(eid, finished.success, len(finished), finished.success_frame))
            if self.lockstep:
                seq = self.side.env_steps
                self.emit(Heartbeat(seq))
                if not self._wait_ack(seq, ack_timeout):
                    raise ConnectionError(f"learner did not acknowledge step {seq}")
                continue
            now = time.monotonic()
            if now >= next_beat:
                self.emit(Heartbeat())
                next_beat = now + self.config.heartbeat_interval
            deadline += period
            delay = deadline - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            else:
                deadline = time.perf_counter()
        self._apply_latest_snapshot()

    def close(self, flush_timeout: float = 10.0):
        end = time.monotonic() + flush_timeout
        while self._outbox and time.monotonic() < end and not self._stop.is_set():
            time.sleep(0.005)
        self._stop.set()
        with self._cv:
            self._cv.notify_all()
        self._threads[0].join(timeout=1.0)
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._closed.set()
        self._threads[1].join(timeout=1.0)
        self.sock.close()

    def tick_periods(self) -> np.ndarray:
        return np.diff(np.asarray(self.tick_times))


# --- learner ----------------------------------------------------------------------


class LearnerNode:
    """Ingests actor frames into the replay buffers, trains, and publishes snapshots.

    Ingestion and training share one thread, so the buffer sees a single
    writer-then-reader sequence. ``on_error`` is called with the learner
    state before an rl_core exception propagates (used to checkpoint).
    """

    def __init__(self, state: LearnerState, buffers: DualBuffer, hp: RlHyperparams,
                 schedule: FinetuneSchedule, sock: socket.socket, lockstep: bool = False,
                 max_updates: int | None = None, heartbeat_interval: float = 1.0,
                 on_metrics=None, on_error=None):
        self.state, self.buffers, self.hp, self.schedule = state, buffers, hp, schedule
        self.sock, self.lockstep, self.max_updates = sock, lockstep, max_updates
        self.heartbeat_interval = heartbeat_interval
        self.on_metrics, self.on_error = on_metrics, on_error
        self.metrics: list[dict] = []
        self.snapshot_ids: list[int] = []
        self.episode_log: list[dict] = []
        self.env_steps = 0
        self.frames_in = 0
        self.malformed = 0
        self.incomplete_episodes = 0
        self._pending: dict[int, list[Transition]] = {}
        self._reader = FrameReader()
        self._pause_until = 0.0
        self._eof = False
        self.stop_event = threading.Event()

    def pause(self, seconds: float):
        """Stop reading and training for ``seconds`` (stall injection)."""
        self._pause_until = time.monotonic() + seconds

    def _send(self, msg: Message):
        self.sock.sendall(serialize_frame(msg))

    def _ingest(self, msg: Message):
        if isinstance(msg, TransitionMsg):
            self.buffers.push_online(msg.transition)
            self._pending.setdefault(msg.episode_id, []).append(msg.transition)
            self.env_steps += 1
        elif isinstance(msg, EpisodeEnd):
            trans = self._pending.pop(msg.episode_id, [])
            self.episode_log.append({"env_steps": self.env_steps, "detected_success": msg.success,
                                     "length": msg.length})
            if not msg.success:
                return
            if len(trans) != msg.length:
                self.incomplete_episodes += 1
                log.warning("episode %d arrived with %d of %d transitions; not promoted",
                            msg.episode_id, len(trans), msg.length)
                return
            self.buffers.promote_episode(Episode(trans, True, msg.success_frame))

    def _read(self, timeout: float) -> list[Message]:
        try:
            ready, _, _ = select.select([self.sock], [], [], timeout)
        except (OSError, ValueError):
            self._eof = True
            return []
        if not ready:
            return []
        try:
            data = self.sock.recv(1 << 16)
        except OSError:
            data = b""
        if not data:
            self._eof = True
            return []
        n_err = len(self._reader.errors)
        msgs = self._reader.feed(data)
        self.malformed += len(self._reader.errors) - n_err
        self.frames_in += len(msgs)
        return msgs

    def _train_once(self):
        try:
            row = learner_iteration(self.state, self.buffers, self.hp, self.schedule.seed, self.env_steps)
        except Exception:
            if self.on_error is not None:
                self.on_error(self.state, self.buffers)
            raise
        self.metrics.append(row)
        if self.on_metrics is not None:
            self.on_metrics(row)
        interval = self.schedule.param_refresh_interval
        if self.state.update_count % interval == 0:
            sid = self.state.update_count // interval
            self._send(ParamSnapshot(sid, self.state.actor.copy()))
            self.snapshot_ids.append(sid)

    def _done(self) -> bool:
        return (self.stop_event.is_set() or self._eof
                or (self.max_updates is not None and self.state.update_count >= self.max_updates))

    def run(self):
        self._send(ParamSnapshot(0, self.state.actor.copy()))
        next_beat = time.monotonic() + self.heartbeat_interval
        while not self._done():
            if self.lockstep:
                for m in self._read(0.5):
                    if isinstance(m, Heartbeat) and m.seq is not None:
                        if self.buffers.ready(self.hp.N):
                            for _ in range(self.schedule.updates_per_step):
                                self._train_once()
                        self._send(Heartbeat(m.seq))
                    else:
                        self._ingest(m)
                continue
            now = time.monotonic()
            if now < self._pause_until:
                time.sleep(min(0.05, self._pause_until - now))
                continue
            ready = self.buffers.ready(self.hp.N)
            for m in self._read(0.0 if ready else 0.05):
                self._ingest(m)
            if now >= next_beat:
                self._send(Heartbeat())
                next_beat = now + self.heartbeat_interval
            if self.buffers.ready(self.hp.N):
                self._train_once()


def run_distributed(state: LearnerState, buffers: DualBuffer, hp: RlHyperparams,
                    schedule: FinetuneSchedule, env_config: EnvConfig = EnvConfig(),
                    classifier: ClassifierModel | None = None, lockstep: bool = True,
                    actor_config: ActorConfig | None = None, max_updates: int | None = None,
                    on_metrics=None, on_error=None) -> RunResult:
    """Actor on the calling thread, learner on a second thread, linked by a socket pair.

    With ``lockstep`` the result matches :func:`training.run_single_process`
    bit for bit; without it the actor free-runs at its control period.
    """
    actor_config = actor_config or ActorConfig(param_refresh_interval=schedule.param_refresh_interval,
                                               exploration=schedule.exploration)
    a_sock, l_sock = socket.socketpair()
    learner = LearnerNode(state, buffers, hp, schedule, l_sock, lockstep, max_updates,
                          on_metrics=on_metrics, on_error=on_error)
    side = ActorSide(state.actor_spec, state.actor.copy(), schedule, env_config, classifier)
    actor = ActorNode(side, a_sock, actor_config, lockstep)
    errors: list[BaseException] = []

    def learner_main():
        try:
            learner.run()
        except BaseException as e:  # surfaced on the calling thread
            errors.append(e)
        finally:
            l_sock.close()

    th = threading.Thread(target=learner_main, name="learner", daemon=True)
    actor.start()
    th.start()
    try:
        actor.wait_for_initial_snapshot()
        actor.run(schedule.env_steps)
    finally:
        actor.close()
        th.join(timeout=60.0)
    if errors:
        raise errors[0]
    result = RunResult(state, learner.metrics, side.episode_log, learner.snapshot_ids)
    result.actor = side
    result.actor_node, result.learner_node = actor, learner
    return result


def p95(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.percentile(values, 95)) if values.size else math.nan


# --- two-process mode -------------------------------------------------------------


def _actor_process_main(address, spec, schedule: FinetuneSchedule, env_config: EnvConfig,
                        classifier, actor_config: ActorConfig, lockstep: bool, placeholder: ParamVector):
    logging.basicConfig(level=logging.WARNING)

    def connect():
        return socket.create_connection(address, timeout=10.0)

    sock = connect()
    side = ActorSide(spec, placeholder, schedule, env_config, classifier)
    node = ActorNode(side, sock, actor_config, lockstep, connect=None if lockstep else connect)
    node.start()
    node.wait_for_initial_snapshot()
    node.run(schedule.env_steps)
    node.close()
    if node.dropped:
        log.warning("actor dropped %d frames on queue overflow", node.dropped)


def run_distributed_processes(state: LearnerState, buffers: DualBuffer, hp: RlHyperparams,
                              schedule: FinetuneSchedule, env_config: EnvConfig = EnvConfig(),
                              classifier: ClassifierModel | None = None,
                              actor_config: ActorConfig | None = None, lockstep: bool = False,
                              host: str = "127.0.0.1", port: int = 0,
                              on_metrics=None, on_error=None) -> RunResult:
    """Learner in this process, actor in a child process, linked over TCP.

    A dropped connection is re-accepted while the actor process is alive.
    """
    import multiprocessing as mp

    actor_config = actor_config or ActorConfig(param_refresh_interval=schedule.param_refresh_interval,
                                               exploration=schedule.exploration)
    listener = socket.create_server((host, port))
    address = listener.getsockname()[:2]
    ctx = mp.get_context("spawn")
    proc = ctx.Process(target=_actor_process_main, name="regrasp-actor",
                       args=(address, state.actor_spec, schedule, env_config, classifier, actor_config,
                             lockstep, state.actor.copy()))
    proc.start()
    listener.settimeout(60.0)
    conn, _ = listener.accept()
    learner = LearnerNode(state, buffers, hp, schedule, conn, lockstep, on_metrics=on_metrics,
                          on_error=on_error, heartbeat_interval=actor_config.heartbeat_interval)
    try:
        while True:
            learner.run()
            if not learner._eof or not proc.is_alive():
                break
            # connection lost while the actor lives on: wait for it to reconnect
            proc.join(0.5)
            if not proc.is_alive():
                break
            listener.settimeout(actor_config.heartbeat_timeout)
            try:
                conn, _ = listener.accept()
            except OSError:
                break
            learner.sock, learner._eof, learner._reader = conn, False, FrameReader()
    finally:
        proc.join(timeout=30.0)
        if proc.is_alive():
            proc.terminate()
        listener.close()
        learner.sock.close()
    if proc.exitcode not in (0, None):
        raise RuntimeError(f"actor process exited with code {proc.exitcode}")
    return RunResult(state, learner.metrics, learner.episode_log, learner.snapshot_ids)
