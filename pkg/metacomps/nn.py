"""
Dense feed-forward networks with exact reverse-mode gradients.

Parameters live in one flat float64 vector per network (ParamVector). Layer i
occupies W_i (fan_out x fan_in, row-major) followed by b_i. Every function here
is pure: inputs are never mutated and equal inputs give bitwise-equal outputs.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Sequence, Tuple

import numpy as np

from .errors import NumericalAbort

Activation = Literal["tanh", "identity"]

LOG_2PI = math.log(2.0 * math.pi)
PARAM_MAGIC = b"CMPSPRM1"
_ACTIVATION_CODES = {"tanh": 0, "identity": 1}

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a dense network. Hidden layers use `activation`, the output layer is linear."""
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    activation: Activation = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"All layer dims must be >= 1, got {dims}")
        if self.activation not in _ACTIVATION_CODES:
            raise ValueError(f"Unknown activation: {self.activation}")
        # Linear (hidden-free) nets only make sense without a nonlinearity.
        if not self.hidden_dims and self.activation != "identity":
            raise ValueError("A tanh network needs at least one hidden layer")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass
class ParamVector:
    values: np.ndarray
    spec: MlpSpec

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.spec.param_count:
            raise ValueError(
                f"Parameter vector length {self.values.size} does not match "
                f"spec parameter count {self.spec.param_count}"
            )
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise NumericalAbort(f"Non-finite parameter at index {int(bad[0])}")

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        out = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            w = self.values[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = self.values[offset:offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.spec)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec)


def zero_params(spec: MlpSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.param_count), spec)


def _as_batch(params: ParamVector, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"Input dimension mismatch: expected {params.spec.input_dim}, got {x.shape[-1]}"
        )
    return x, single


def _trace(params: ParamVector, x: np.ndarray) -> List[np.ndarray]:
    """Forward pass keeping every layer's input for the backward pass."""
    layers = params.layers()
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1 and params.spec.activation == "tanh":
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """
    Evaluate the network on one input vector or a (batch, input_dim) array.

    Returns a vector of length output_dim (or a (batch, output_dim) array).
    """
    batch, single = _as_batch(params, x)
    out = _trace(params, batch)[-1]
    return out[0] if single else out


def backward(params: ParamVector, x: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """
    Exact gradient of sum_batch(upstream_grad . forward(params, x)) w.r.t. params.

    Args:
        params: Network parameters
        x: One input vector or a (batch, input_dim) array
        upstream_grad: Matching output-shaped gradient

    Returns:
        Flat gradient with the same layout as params.values
    """
    batch, single = _as_batch(params, x)
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        delta = delta[None, :]
    if delta.shape != (batch.shape[0], params.spec.output_dim):
        raise ValueError(
            f"Upstream gradient shape mismatch: expected {(batch.shape[0], params.spec.output_dim)}, "
            f"got {delta.shape}"
        )
    layers = params.layers()
    acts = _trace(params, batch)
    grads: List[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ acts[i]).ravel())
        if i > 0:
            delta = delta @ w
            if params.spec.activation == "tanh":
                delta = delta * (1.0 - acts[i] ** 2)
    return np.concatenate(grads[::-1])


@dataclass
class GaussianPolicyHead:
    """Diagonal Gaussian policy: mean from an MLP, state-independent log std."""
    mean_net: ParamVector
    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.log_std = np.asarray(self.log_std, dtype=np.float64).reshape(-1)
        if self.log_std.size != self.mean_net.spec.output_dim:
            raise ValueError(
                f"log_std has {self.log_std.size} entries, expected {self.mean_net.spec.output_dim}"
            )

    @property
    def state_dim(self) -> int:
        return self.mean_net.spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.spec.output_dim

    @property
    def size(self) -> int:
        return self.mean_net.spec.param_count + self.action_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mean_net.values, self.log_std])

    def with_vector(self, vec: np.ndarray) -> "GaussianPolicyHead":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"Policy vector length {vec.size} does not match {self.size}")
        n = self.mean_net.spec.param_count
        return GaussianPolicyHead(ParamVector(vec[:n].copy(), self.mean_net.spec), vec[n:].copy())

    def copy(self) -> "GaussianPolicyHead":
        return GaussianPolicyHead(self.mean_net.copy(), self.log_std.copy())


def init_policy(state_dim: int, action_dim: int, hidden_dims: Sequence[int],
                init_std: float, rng: np.random.Generator) -> GaussianPolicyHead:
    spec = MlpSpec(state_dim, tuple(hidden_dims), action_dim)
    return GaussianPolicyHead(init_params(spec, rng), np.full(action_dim, math.log(init_std)))


def _checked_std(policy: GaussianPolicyHead) -> np.ndarray:
    sigma = np.exp(policy.log_std)
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0.0):
        raise NumericalAbort(f"Policy std is not finite and positive: {sigma}")
    return sigma


def log_prob(policy: GaussianPolicyHead, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Log-density of action(s) under the policy at state(s); scalar for a single pair."""
    sigma = _checked_std(policy)
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != policy.action_dim:
        raise ValueError(f"Action dimension mismatch: expected {policy.action_dim}, got {action.shape[-1]}")
    mu = forward(policy.mean_net, state)
    z = (action - mu) / sigma
    return np.sum(-0.5 * z ** 2 - policy.log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob_grad(policy: GaussianPolicyHead, states: np.ndarray, actions: np.ndarray,
                  weights: np.ndarray) -> np.ndarray:
    """Gradient of sum_i weights[i] * log pi(a_i | s_i) w.r.t. the flat policy vector."""
    sigma = _checked_std(policy)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    mu = forward(policy.mean_net, states)
    z = (actions - mu) / sigma
    g_mean = backward(policy.mean_net, states, weights * z / sigma)
    g_log_std = np.sum(weights * (z ** 2 - 1.0), axis=0)
    return np.concatenate([g_mean, g_log_std])


def sample_action(policy: GaussianPolicyHead, state: np.ndarray,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw action = mu(state) + std * xi and return it with its log-probability."""
    mu = forward(policy.mean_net, state)
    xi = rng.standard_normal(mu.shape)
    action = mu + policy.std * xi
    return action, log_prob(policy, state, action)


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(0, np.zeros(size), np.zeros(size))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step. Returns new params and moments."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != grad.shape:
        raise ValueError(f"Adam shape mismatch: params {params.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericalAbort(f"Non-finite gradient at index {int(bad[0])}")
    beta1, beta2 = betas
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(t, m, v)


def params_to_bytes(params: ParamVector) -> bytes:
    spec = params.spec
    hidden = spec.hidden_dims
    header = PARAM_MAGIC + struct.pack(
        "<IIII", spec.input_dim, spec.output_dim, _ACTIVATION_CODES[spec.activation], len(hidden)
    )
    header += struct.pack(f"<{len(hidden)}I", *hidden)
    header += struct.pack("<Q", params.values.size)
    return header + params.values.astype("<f8").tobytes()


def params_from_bytes(blob: bytes, offset: int = 0) -> Tuple[ParamVector, int]:
    """Decode one ParamVector starting at offset; returns it and the offset past it."""
    if blob[offset:offset + 8] != PARAM_MAGIC:
        raise ValueError("Not a parameter blob (bad magic header)")
    offset += 8
    input_dim, output_dim, act_code, n_hidden = struct.unpack_from("<IIII", blob, offset)
    offset += 16
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, offset)
    offset += 4 * n_hidden
    (n,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    activation = {code: name for name, code in _ACTIVATION_CODES.items()}[act_code]
    spec = MlpSpec(input_dim, tuple(hidden), output_dim, activation)
    values = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
    return ParamVector(values, spec), offset + 8 * n


def save_params(params: ParamVector, path: Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: Path) -> ParamVector:
    params, _ = params_from_bytes(Path(path).read_bytes())
    return params


def save_policy(policy: GaussianPolicyHead, path: Path) -> None:
    blob = params_to_bytes(policy.mean_net)
    blob += struct.pack("<Q", policy.log_std.size) + policy.log_std.astype("<f8").tobytes()
    Path(path).write_bytes(blob)
    logger.debug(f"Saved policy checkpoint: {path}")


def load_policy(path: Path) -> GaussianPolicyHead:
    blob = Path(path).read_bytes()
    mean_net, offset = params_from_bytes(blob)
    (n,) = struct.unpack_from("<Q", blob, offset)
    log_std = np.frombuffer(blob, dtype="<f8", count=n, offset=offset + 8).astype(np.float64)
    return GaussianPolicyHead(mean_net, log_std)
