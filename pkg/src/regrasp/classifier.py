"""Binary success detector trained on annotated rollouts; used as the RL reward."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .diffnet import (AdamState, MlpSpec, NonFiniteError, ParamVector, adam_step, backward, forward,
                      init_params, parse_snapshot, snapshot_bytes)
from .env import OBS_DIM, Episode

DEFAULT_THRESHOLD = 0.9


class NoPositivesError(ValueError):
    pass


@dataclass
class LabeledFrame:
    observation: np.ndarray
    label: int
    episode: int = 0


@dataclass
class ClassifierModel:
    spec: MlpSpec
    params: ParamVector
    decision_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie in (0, 1)")

    def to_bytes(self) -> bytes:
        return snapshot_bytes(self.params) + struct.pack("<d", self.decision_threshold)

    @classmethod
    def from_bytes(cls, buf: bytes, activation: str = "relu") -> "ClassifierModel":
        params, end = parse_snapshot(buf)
        if len(buf) < end + 8:
            raise ValueError(f"model file truncated at byte {len(buf)}")
        (threshold,) = struct.unpack_from("<d", buf, end)
        shapes = [s for s, _ in params.layout]
        spec = MlpSpec(shapes[0][1], tuple(o for o, _ in shapes[:-1]), shapes[-1][0], activation)
        return cls(spec, params, threshold)


@dataclass
class ClassifierReport:
    accuracy: float
    fpr: float
    fnr: float
    n_train: int
    n_test: int

    def csv_row(self) -> str:
        return f"{self.accuracy:.6f},{self.fpr:.6f},{self.fnr:.6f},{self.n_train},{self.n_test}"


CSV_HEADER = "accuracy,fpr,fnr,n_train,n_test"


def build_dataset(episodes: list[Episode]) -> tuple[list[LabeledFrame], dict]:
    """One frame per transition (its resulting observation), positive from the success frame on."""
    frames = []
    for k, ep in enumerate(episodes):
        for i, t in enumerate(ep.transitions):
            label = int(ep.success_frame is not None and i >= ep.success_frame)
            frames.append(LabeledFrame(np.asarray(t.next_obs, dtype=np.float64), label, k))
    counts = {0: sum(f.label == 0 for f in frames), 1: sum(f.label == 1 for f in frames)}
    if counts[1] == 0:
        raise NoPositivesError("no success frames found; need at least one successful episode")
    return frames, counts


def _arrays(frames):
    return (np.array([f.observation for f in frames]).reshape(-1, OBS_DIM),
            np.array([f.label for f in frames], dtype=np.float64))


def logits(model: ClassifierModel, obs) -> np.ndarray:
    return forward(model.params, model.spec, obs)[..., 0]


def predict_proba(model: ClassifierModel, obs) -> np.ndarray:
    z = logits(model, obs)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict_reward(model: ClassifierModel, observation) -> int:
    return int(predict_proba(model, observation) > model.decision_threshold)


def rates(model: ClassifierModel, obs, labels) -> tuple[float, float, float]:
    """(accuracy, false-positive rate, false-negative rate)."""
    pred = (predict_proba(model, obs) > model.decision_threshold).astype(int)
    labels = np.asarray(labels).astype(int)
    neg, pos = labels == 0, labels == 1
    acc = float(np.mean(pred == labels))
    fpr = float(np.mean(pred[neg] == 1)) if neg.any() else 0.0
    fnr = float(np.mean(pred[pos] == 0)) if pos.any() else 0.0
    return acc, fpr, fnr


def split_by_episode(frames: list[LabeledFrame], seed: int, test_fraction: float = 0.2):
    """Whole episodes go to one side; both sides keep at least one positive when possible."""
    ids = sorted({f.episode for f in frames})
    pos_ids = sorted({f.episode for f in frames if f.label == 1})
    neg_ids = [i for i in ids if i not in set(pos_ids)]
    rng = np.random.default_rng(seed)
    test = set()
    for group in (pos_ids, neg_ids):
        group = list(rng.permutation(group))
        k = int(round(test_fraction * len(group)))
        if len(group) > 1:
            k = min(max(k, 1), len(group) - 1)
        test.update(int(g) for g in group[:k])
    train = [f for f in frames if f.episode not in test]
    held = [f for f in frames if f.episode in test]
    return train, held


def train_classifier(frames: list[LabeledFrame], seed: int = 0, epochs: int = 200,
                     class_balance: bool = True, hidden=(32, 32), learning_rate: float = 1e-3,
                     batch_size: int = 256, threshold: float = DEFAULT_THRESHOLD):
    """Weighted logistic regression through a small MLP; returns (model, held-out report)."""
    train, held = split_by_episode(frames, seed)
    x, y = _arrays(train)
    if y.sum() == 0 or y.sum() == len(y):
        raise ValueError("training split needs both classes")
    spec = MlpSpec(OBS_DIM, tuple(hidden), 1, "relu")
    params = init_params(spec, seed)
    opt = AdamState.fresh(len(params), learning_rate)
    w_pos = (len(y) - y.sum()) / y.sum() if class_balance else 1.0
    weights = np.where(y == 1, w_pos, 1.0)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            z, cache = forward(params, spec, x[idx], return_cache=True)
            z = z[:, 0]
            # weighted binary cross-entropy on logits
            loss = float(np.sum(weights[idx] * (np.logaddexp(0.0, z) - y[idx] * z)) / len(idx))
            if not np.isfinite(loss):
                raise NonFiniteError("classifier loss became non-finite")
            p = 0.5 * (1.0 + np.tanh(0.5 * z))
            g = (weights[idx] * (p - y[idx]) / len(idx))[:, None]
            grad, _ = backward(params, spec, x[idx], g, cache=cache)
            params, opt = adam_step(opt, params, grad)
    model = ClassifierModel(spec, params, threshold)
    if held:
        hx, hy = _arrays(held)
        acc, fpr, fnr = rates(model, hx, hy)
    else:
        acc = fpr = fnr = float("nan")
    return model, ClassifierReport(acc, fpr, fnr, len(train), len(held))


def save_model(path, model: ClassifierModel):
    with open(path, "wb") as f:
        f.write(model.to_bytes())


def load_model(path) -> ClassifierModel:
    with open(path, "rb") as f:
        return ClassifierModel.from_bytes(f.read())
