"""Small fully connected networks with hand-written backprop.

Everything works on float64 numpy arrays. Inputs may be a single vector of
shape ``(d,)`` or a batch of shape ``(B, d)``; outputs follow the same rank.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

SNAPSHOT_MAGIC = b"RGNP"
SNAPSHOT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if min(self.dims) < 1:
            raise ValueError(f"all layer sizes must be >= 1, got {self.dims}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        d = self.dims
        return [(d[i + 1], d[i]) for i in range(len(d) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass
class ParamVector:
    """Flat parameter store.

    ``layout`` holds one ``((out, in), offset)`` entry per layer. A layer's
    block is the row-major weight matrix followed by its bias.
    """

    values: np.ndarray
    layout: list[tuple[tuple[int, int], int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = 0
        for (o, i), off in self.layout:
            if off != expected:
                raise ShapeError(f"layout not contiguous at offset {off}, expected {expected}")
            expected += o * i + o
        if expected != self.values.size:
            raise ShapeError(f"layout covers {expected} values but vector has {self.values.size}")

    def layers(self):
        """Yield ``(W, b)`` views into ``values``."""
        for (o, i), off in self.layout:
            W = self.values[off:off + o * i].reshape(o, i)
            b = self.values[off + o * i:off + o * i + o]
            yield W, b

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, list(self.layout))

    def __len__(self):
        return self.values.size


def layout_for(spec: MlpSpec) -> list[tuple[tuple[int, int], int]]:
    layout, off = [], 0
    for o, i in spec.layer_shapes:
        layout.append(((o, i), off))
        off += o * i + o
    return layout


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layout = layout_for(spec)
    values = np.zeros(spec.n_params)
    for (o, i), off in layout:
        bound = 1.0 / np.sqrt(i)
        values[off:off + o * i] = rng.uniform(-bound, bound, size=o * i)
    return ParamVector(values, layout)


def _check(params: ParamVector, spec: MlpSpec):
    if [s for s, _ in params.layout] != spec.layer_shapes:
        raise ShapeError("parameter layout does not match network spec")


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def forward(params: ParamVector, spec: MlpSpec, x, return_cache: bool = False):
    _check(params, spec)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim or x.ndim not in (1, 2):
        raise ShapeError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    single = x.ndim == 1
    h = x[None, :] if single else x
    cache = [(h, None)]
    layers = list(params.layers())
    for k, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if k < len(layers) - 1:
            h = _act(z, spec.activation)
            cache.append((h, z))
        else:
            h = z
    out = h[0] if single else h
    if return_cache:
        return out, cache
    return out


def backward(params: ParamVector, spec: MlpSpec, x, output_grad, cache=None):
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input.

    For a batch the parameter gradient is summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if cache is None:
        _, cache = forward(params, spec, x, return_cache=True)
    single = x.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != (cache[0][0].shape[0], spec.output_dim):
        raise ShapeError(f"output_grad shape {np.shape(output_grad)} does not match network output")
    grad = np.empty_like(params.values)
    layers = list(params.layers())
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        (o, i), off = params.layout[k]
        h_in = cache[k][0]
        grad[off:off + o * i] = (g.T @ h_in).ravel()
        grad[off + o * i:off + o * i + o] = g.sum(axis=0)
        g = g @ W
        if k > 0:
            h, z = cache[k]
            g = g * _act_grad(z, h, spec.activation)
    return grad, (g[0] if single else g)


# --- squashed Gaussian policy head -------------------------------------------------


@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    sampled_action: np.ndarray
    log_prob: np.ndarray | float | None = None
    noise: np.ndarray | None = field(default=None, repr=False)


def log1m_tanh_sq(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def split_head(out: np.ndarray):
    d = out.shape[-1] // 2
    mean = out[..., :d]
    log_std = np.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def squashed_log_prob(mean, log_std, noise):
    """Log-density of tanh(mean + std * noise), summed over the action dims."""
    u = mean + np.exp(log_std) * noise
    lp = -0.5 * noise ** 2 - log_std - _HALF_LOG_2PI - log1m_tanh_sq(u)
    return lp.sum(axis=-1)


def sample_policy(actor: ParamVector, spec: MlpSpec, state, noise_seed: int | None = None,
                  deterministic: bool = False, noise: np.ndarray | None = None) -> GaussianPolicyOutput:
    out = forward(actor, spec, state)
    if out.shape[-1] % 2:
        raise ShapeError("actor head must emit 2 * action_dim values")
    mean, log_std = split_head(out)
    if deterministic:
        return GaussianPolicyOutput(mean, log_std, np.tanh(mean))
    if noise is None:
        noise = np.random.default_rng(noise_seed).standard_normal(mean.shape)
    u = mean + np.exp(log_std) * noise
    return GaussianPolicyOutput(mean, log_std, np.tanh(u),
                                squashed_log_prob(mean, log_std, noise), noise)


# --- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, learning_rate: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.learning_rate, self.beta1, self.beta2, self.epsilon)


def adam_step(state: AdamState, params: ParamVector, grads) -> tuple[ParamVector, AdamState]:
    """Return new (params, state); the inputs are left untouched."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ShapeError("gradient, parameter and moment shapes differ")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return params.with_values(new_values), new_state


# --- snapshot container ------------------------------------------------------------


def snapshot_bytes(params: ParamVector) -> bytes:
    head = [SNAPSHOT_MAGIC, struct.pack("<HI", SNAPSHOT_VERSION, len(params.layout))]
    for (o, i), _ in params.layout:
        head.append(struct.pack("<II", o, i))
    return b"".join(head) + params.values.astype("<f8").tobytes()


def parse_snapshot(buf: bytes, offset: int = 0) -> tuple[ParamVector, int]:
    """Decode one snapshot starting at ``offset``; returns (params, end offset)."""
    mv = memoryview(buf)
    if len(buf) - offset < 10:
        raise ValueError(f"snapshot truncated at byte {len(buf)}")
    if bytes(mv[offset:offset + 4]) != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic at byte {offset}")
    version, n_layers = struct.unpack_from("<HI", buf, offset + 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    pos = offset + 10
    if len(buf) < pos + 8 * n_layers:
        raise ValueError(f"snapshot truncated at byte {len(buf)}")
    layout, n = [], 0
    for _ in range(n_layers):
        o, i = struct.unpack_from("<II", buf, pos)
        pos += 8
        layout.append(((o, i), n))
        n += o * i + o
    end = pos + 8 * n
    if len(buf) < end:
        raise ValueError(f"snapshot truncated at byte {len(buf)}")
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return ParamVector(values, layout), end


def save_snapshot(path, params: ParamVector, trailer: bytes = b""):
    with open(path, "wb") as f:
        f.write(snapshot_bytes(params) + trailer)


def load_snapshot(path) -> tuple[ParamVector, bytes]:
    with open(path, "rb") as f:
        buf = f.read()
    params, end = parse_snapshot(buf)
    return params, buf[end:]
