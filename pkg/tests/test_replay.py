import threading

import numpy as np
import pytest
from scipy.stats import chisquare

from regrasp.env import Episode, Transition, collect_demos
from regrasp.replay import DEMO, ONLINE, DualBuffer, UnderfilledBufferError


def tr(k: float, reward=0.0, done=False) -> Transition:
    return Transition(np.full(7, k), np.zeros(3), reward, np.full(7, k + 0.5), done)


def test_push_evicts_oldest():
    buf = DualBuffer(online_capacity=5)
    for k in range(6):
        buf.push_online(tr(k))
    assert buf.online_size == 5
    assert [t.obs[0] for t in buf.online_transitions()] == [1, 2, 3, 4, 5]


def test_push_then_sample_contains_item():
    buf = DualBuffer()
    buf.push_online(tr(42))
    buf.seed_demos([Episode([tr(1)], True, 0)])
    b = buf.sample_symmetric(2, 0)
    assert b.obs[0, 0] == 42 and b.source.tolist() == [ONLINE, DEMO]


def test_eviction_order_matches_shadow_list():
    rng = np.random.default_rng(0)
    cap = 37
    buf, shadow = DualBuffer(online_capacity=cap), []
    for k in range(1000):
        v = float(rng.normal())
        buf.push_online(tr(v))
        shadow.append(v)
        shadow = shadow[-cap:]
        assert buf.online_size <= cap
    assert [t.obs[0] for t in buf.online_transitions()] == shadow


def test_invalid_transition_rejected():
    buf = DualBuffer()
    with pytest.raises(ValueError):
        buf.push_online(Transition(np.full(7, np.nan), np.zeros(3), 0.0, np.zeros(7), False))
    with pytest.raises(ValueError):
        buf.push_online(Transition(np.zeros(7), np.zeros(3), 0.5, np.zeros(7), False))


def test_promotion_counts():
    buf = DualBuffer()
    demos = collect_demos(6, "random", 3)
    buf.seed_demos(demos[:1])
    initial = buf.demo_size
    lengths = []
    for ep in demos[1:]:
        before_online = buf.online_size
        buf.promote_episode(ep)
        lengths.append(len(ep))
        assert buf.online_size == before_online
    assert buf.demo_size == initial + sum(lengths)


def test_promoting_failure_rejected():
    buf = DualBuffer()
    buf.seed_demos([Episode([tr(1)], True, 0)])
    with pytest.raises(ValueError):
        buf.promote_episode(Episode([tr(2)], False, None))
    assert buf.demo_size == 1


def test_symmetric_composition():
    buf = DualBuffer()
    for k in range(300):
        buf.push_online(tr(k))
    buf.seed_demos([Episode([tr(-k) for k in range(200)], True, 199)])
    b = buf.sample_symmetric(256, 1)
    assert len(b) == 256
    assert (b.source == ONLINE).sum() == 128 and (b.source == DEMO).sum() == 128
    assert np.all(b.obs[b.source == ONLINE, 0] >= 0) and np.all(b.obs[b.source == DEMO, 0] <= 0)


def test_degenerate_single_item():
    buf = DualBuffer()
    buf.push_online(tr(7))
    buf.seed_demos([Episode([tr(-k) for k in range(200)], True, 199)])
    with pytest.raises(UnderfilledBufferError):
        buf.sample_symmetric(256, 0)
    b = buf.sample_symmetric(256, 0, min_fill=1)
    assert np.all(b.obs[b.source == ONLINE, 0] == 7) and (b.source == ONLINE).sum() == 128


def test_underfilled_and_odd_batch():
    buf = DualBuffer()
    with pytest.raises(UnderfilledBufferError, match="collect more data"):
        buf.sample_symmetric(4, 0)
    with pytest.raises(ValueError):
        buf.sample_symmetric(3, 0)


def test_uniformity_chi_square():
    buf = DualBuffer()
    for k in range(10):
        buf.push_online(tr(k))
    buf.seed_demos([Episode([tr(-k) for k in range(10)], True, 9)])
    rng = np.random.default_rng(123)
    counts = np.zeros(10)
    for _ in range(10):
        b = buf.sample_symmetric(20_000, rng, min_fill=1)
        counts += np.bincount(b.obs[b.source == ONLINE, 0].astype(int), minlength=10)
    assert counts.sum() == 100_000
    assert chisquare(counts).pvalue > 0.01


def test_ring_sampling_survives_checkpoint():
    buf = DualBuffer(online_capacity=8)
    for k in range(13):
        buf.push_online(tr(k))
    buf.seed_demos([Episode([tr(-k) for k in range(10)], True, 9)])
    back = DualBuffer.from_episodes(buf.to_episodes(), online_capacity=8)
    a, b = buf.sample_symmetric(8, 5), back.sample_symmetric(8, 5)
    assert np.array_equal(a.obs, b.obs) and np.array_equal(a.source, b.source)


def test_concurrent_writer_reader():
    buf = DualBuffer(online_capacity=500)
    buf.seed_demos([Episode([tr(-1.0)] * 64, True, 63)])
    for k in range(64):
        buf.push_online(tr(float(k)))
    stop = threading.Event()

    def writer():
        k = 64
        while not stop.is_set():
            buf.push_online(tr(float(k)))
            k += 1

    th = threading.Thread(target=writer)
    th.start()
    try:
        for s in range(300):
            b = buf.sample_symmetric(64, s)
            on = b.subset(b.source == ONLINE)
            # every row is internally consistent: next_obs = obs + 0.5 everywhere
            assert np.array_equal(on.next_obs, on.obs + 0.5)
            assert np.all(on.obs == on.obs[:, :1])
    finally:
        stop.set()
        th.join()
    assert buf.online_size <= 500
