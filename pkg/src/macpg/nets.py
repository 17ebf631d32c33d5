"""Small fully connected networks with hand-written backprop.

Parameters live in one flat float64 vector (:class:`ParamVector`); each layer
owns a weight block of shape (fan_in, fan_out) followed by a bias block.
Forward passes accept a single observation (d,) or a stack (B, d); gradients
from a stacked pass are summed over the stack.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh")
HEADS = ("softmax", "linear")
LEAK = 0.3
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    head: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"all layer sizes must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def n_params(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], d["output_dim"], tuple(d.get("hidden", ())),
                   d.get("activation", "relu"), d.get("head", "softmax"))


def make_layout(spec: MlpSpec) -> tuple[tuple[str, int, int, tuple[int, ...]], ...]:
    """(name, start, stop, shape) for every block, partitioning [0, n_params)."""
    layout = []
    pos = 0
    s = spec.sizes
    for i in range(len(s) - 1):
        for name, shape in ((f"W{i}", (s[i], s[i + 1])), (f"b{i}", (s[i + 1],))):
            n = int(np.prod(shape))
            layout.append((name, pos, pos + n, shape))
            pos += n
    return tuple(layout)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple = field(repr=False)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamVector":
        return cls(np.zeros(spec.n_params()), make_layout(spec))

    def __len__(self) -> int:
        return len(self.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def layers(self, values: np.ndarray | None = None):
        """Yield (W, b) views into ``values`` (defaults to self.values)."""
        v = self.values if values is None else values
        blocks = [v[start:stop].reshape(shape) for _, start, stop, shape in self.layout]
        return list(zip(blocks[0::2], blocks[1::2]))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Fan-in scaled uniform init: He for ReLU-family hidden layers, Xavier otherwise."""
    p = ParamVector.zeros(spec)
    layers = p.layers()
    for i, (W, _) in enumerate(layers):
        fan_in, fan_out = W.shape
        last = i == len(layers) - 1
        if not last and spec.activation in ("relu", "leaky_relu"):
            gain = 2.0 if spec.activation == "relu" else 2.0 / (1.0 + LEAK**2)
            limit = np.sqrt(3.0 * gain / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return p


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAK * z)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAK)
    return 1.0 - h * h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Cache:
    """Activations saved by :func:`forward` for exact backprop."""

    params_id: int
    inputs: list
    pre: list
    output: np.ndarray
    probs: np.ndarray | None
    single: bool


def forward(spec: MlpSpec, params: ParamVector, x) -> tuple[np.ndarray, Cache]:
    """Network output (probabilities for a softmax head, raw values otherwise)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got shape {x.shape}")
    if len(params) != spec.n_params():
        raise ValueError(f"param vector has {len(params)} entries, spec needs {spec.n_params()}")
    layers = params.layers()
    inputs, pre = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if i == len(layers) - 1 else _act(spec.activation, z)
    probs = softmax(h) if spec.head == "softmax" else None
    out = probs if probs is not None else h
    cache = Cache(id(params.values), inputs, pre, h, probs, single)
    return (out[0] if single else out), cache


def forward_policy(spec: MlpSpec, params: ParamVector, x) -> tuple[np.ndarray, Cache]:
    if spec.head != "softmax":
        raise ValueError("forward_policy needs a softmax head")
    return forward(spec, params, x)


def forward_q(spec: MlpSpec, params: ParamVector, x) -> tuple[np.ndarray, Cache]:
    if spec.head != "linear":
        raise ValueError("forward_q needs a linear head")
    return forward(spec, params, x)


def backprop_raw(spec: MlpSpec, params: ParamVector, cache: Cache, grad_out) -> np.ndarray:
    """Gradient w.r.t. params of sum(raw_output * grad_out); raw output = logits or Q."""
    if cache.params_id != id(params.values):
        raise ValueError("cache was produced with a different parameter vector")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {cache.pre[-1].shape}")
    grad = np.zeros(len(params))
    glayers = params.layers(grad)
    layers = params.layers()
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[i]
        gW[...] = cache.inputs[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[i][0].T
            z = cache.pre[i - 1]
            g = g * _act_grad(spec.activation, z, cache.inputs[i])
    return grad


def backprop(spec: MlpSpec, params: ParamVector, cache: Cache, output_gradient) -> np.ndarray:
    """Gradient w.r.t. params of sum(output * output_gradient).

    For a softmax head ``output`` is the probability vector, so the incoming
    gradient is pulled back through the softmax Jacobian first.
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    if spec.head == "softmax":
        p = cache.probs[0] if cache.single else cache.probs
        g = p * (g - (p * g).sum(axis=-1, keepdims=True))
    return backprop_raw(spec, params, cache, g)


def log_prob_grad(spec: MlpSpec, params: ParamVector, x, action: int) -> np.ndarray:
    """grad log pi(action | x) via the logits identity (e_a - pi)."""
    p, cache = forward_policy(spec, params, x)
    coeff = -p.copy()
    coeff[action] += 1.0
    return backprop_raw(spec, params, cache, coeff)


class PolicyNet:
    """Softmax policy bundled with its parameters."""

    def __init__(self, spec: MlpSpec, params: ParamVector):
        if spec.head != "softmax":
            raise ValueError("policy network needs a softmax head")
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator) -> "PolicyNet":
        return cls(spec, init_params(spec, rng))

    @property
    def n_actions(self) -> int:
        return self.spec.output_dim

    def probs(self, states) -> tuple[np.ndarray, Cache]:
        return forward(self.spec, self.params, states)

    def backward_logits(self, cache: Cache, dlogits) -> np.ndarray:
        return backprop_raw(self.spec, self.params, cache, dlogits)


class CriticNet:
    """Q-network with one linear output per action."""

    def __init__(self, spec: MlpSpec, params: ParamVector):
        if spec.head != "linear":
            raise ValueError("critic network needs a linear head")
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator) -> "CriticNet":
        return cls(spec, init_params(spec, rng))

    def q_values(self, states) -> np.ndarray:
        return forward(self.spec, self.params, states)[0]

    def forward(self, states) -> tuple[np.ndarray, Cache]:
        return forward(self.spec, self.params, states)

    def backward(self, cache: Cache, grad_out) -> np.ndarray:
        return backprop_raw(self.spec, self.params, cache, grad_out)


def save_checkpoint(path, spec: MlpSpec, params: ParamVector, extra: dict | None = None) -> None:
    """Structured-text checkpoint; values stored as raw little-endian float64 (base64)."""
    doc = {
        "format": "macpg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "n_params": len(params),
        "values_f64le_b64": base64.b64encode(params.values.astype("<f8").tobytes()).decode(),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[MlpSpec, ParamVector]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "macpg-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} macpg checkpoint")
    spec = MlpSpec.from_dict(doc["spec"])
    values = np.frombuffer(base64.b64decode(doc["values_f64le_b64"]), dtype="<f8").astype(np.float64)
    if len(values) != spec.n_params() or len(values) != doc["n_params"]:
        raise ValueError(f"{path}: parameter count does not match spec")
    return spec, ParamVector(values, make_layout(spec))
