"""Online ring buffer plus append-only demo store, sampled half-and-half."""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .env import ACT_DIM, OBS_DIM, Episode, Transition

ONLINE, DEMO = 0, 1


class UnderfilledBufferError(RuntimeError):
    pass


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.reward)

    def subset(self, mask) -> "Batch":
        return Batch(self.obs[mask], self.action[mask], self.reward[mask],
                     self.next_obs[mask], self.done[mask], self.source[mask])

    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[i].copy(), self.action[i].copy(), float(self.reward[i]),
                           self.next_obs[i].copy(), bool(self.done[i])) for i in range(len(self))]


class _Store:
    """Column arrays holding transitions; ``capacity=None`` grows without bound."""

    def __init__(self, capacity: int | None = None, initial: int = 1024):
        self.capacity = capacity
        n = capacity if capacity is not None else initial
        self._alloc(n)
        self.size = 0
        self.head = 0  # next write slot when bounded

    def _alloc(self, n):
        self.obs = np.zeros((n, OBS_DIM))
        self.action = np.zeros((n, ACT_DIM))
        self.reward = np.zeros(n)
        self.next_obs = np.zeros((n, OBS_DIM))
        self.done = np.zeros(n, dtype=bool)

    def _grow(self):
        old = (self.obs, self.action, self.reward, self.next_obs, self.done)
        self._alloc(2 * len(self.reward))
        for new, prev in zip((self.obs, self.action, self.reward, self.next_obs, self.done), old):
            new[:len(prev)] = prev

    def append(self, t: Transition):
        if self.capacity is None:
            if self.size == len(self.reward):
                self._grow()
            i = self.size
            self.size += 1
        else:
            i = self.head
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        self.obs[i], self.action[i], self.reward[i] = t.obs, t.action, t.reward
        self.next_obs[i], self.done[i] = t.next_obs, t.done

    def slots(self, logical) -> np.ndarray:
        """Map logical positions (0 = oldest) to storage slots."""
        logical = np.asarray(logical)
        if self.capacity is None or self.size < self.capacity:
            return logical
        return (logical + self.head) % self.capacity

    def ordered_indices(self) -> np.ndarray:
        return self.slots(np.arange(self.size))

    def take(self, idx, source: int) -> Batch:
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
                     self.done[idx], np.full(len(idx), source, dtype=np.int8))


class DualBuffer:
    """Online FIFO ring of capacity ``online_capacity`` and an unbounded demo store.

    One writer and one reader may use the buffer concurrently; every public
    method holds the internal lock so samples never see half-written rows.
    """

    def __init__(self, online_capacity: int = 100_000):
        if online_capacity < 1:
            raise ValueError("online capacity must be positive")
        self.online_capacity = online_capacity
        self.online = _Store(online_capacity)
        self.demo = _Store(None)
        self._lock = threading.Lock()

    @property
    def online_size(self) -> int:
        return self.online.size

    @property
    def demo_size(self) -> int:
        return self.demo.size

    def push_online(self, t: Transition):
        if not t.is_valid():
            raise ValueError("invalid transition")
        with self._lock:
            self.online.append(t)

    def seed_demos(self, episodes: list[Episode]):
        with self._lock:
            for ep in episodes:
                for t in ep.transitions:
                    self.demo.append(t)

    def promote_episode(self, episode: Episode):
        if not episode.success:
            raise ValueError("only successful episodes can be promoted to the demo buffer")
        if not all(t.is_valid() for t in episode.transitions):
            raise ValueError("episode contains invalid transitions")
        with self._lock:
            for t in episode.transitions:
                self.demo.append(t)

    def ready(self, n: int) -> bool:
        return self.online.size >= n // 2 and self.demo.size >= n // 2

    def sample_symmetric(self, n: int, seed, min_fill: int | None = None) -> Batch:
        """``n/2`` uniform draws with replacement from each buffer, online first.

        Each buffer must hold at least ``min_fill`` items (default ``n/2``).
        """
        if n < 2 or n % 2:
            raise ValueError(f"batch size must be a positive even number, got {n}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        half = n // 2
        with self._lock:
            need = half if min_fill is None else max(1, min_fill)
            if self.online.size < need or self.demo.size < need:
                raise UnderfilledBufferError(
                    f"collect more data before updating: online={self.online.size}, "
                    f"demo={self.demo.size}, need {need} each")
            on = self.online.take(self.online.slots(rng.integers(0, self.online.size, half)), ONLINE)
            de = self.demo.take(rng.integers(0, self.demo.size, half), DEMO)
        return Batch(*(np.concatenate([a, b]) for a, b in zip(
            (on.obs, on.action, on.reward, on.next_obs, on.done, on.source),
            (de.obs, de.action, de.reward, de.next_obs, de.done, de.source))))

    def online_transitions(self) -> list[Transition]:
        with self._lock:
            return self.online.take(self.online.ordered_indices(), ONLINE).transitions()

    def demo_transitions(self) -> list[Transition]:
        with self._lock:
            return self.demo.take(np.arange(self.demo.size), DEMO).transitions()

    # checkpointing goes through the episode file format: one pseudo-episode per store
    def to_episodes(self) -> list[Episode]:
        return [Episode(self.online_transitions()), Episode(self.demo_transitions())]

    @classmethod
    def from_episodes(cls, episodes: list[Episode], online_capacity: int = 100_000) -> "DualBuffer":
        if len(episodes) != 2:
            raise ValueError("buffer checkpoint must hold exactly two episodes (online, demo)")
        buf = cls(online_capacity)
        for t in episodes[0].transitions:
            buf.online.append(t)
        for t in episodes[1].transitions:
            buf.demo.append(t)
        return buf
