"""First-order update rules over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMIZERS = ("sgd", "rmsprop", "adam", "adadelta")
LEARNING_RATES = (1e-4, 2.5e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2)

RMSPROP_DECAY, RMSPROP_EPS = 0.99, 1e-8
ADAM_BETAS, ADAM_EPS = (0.9, 0.999), 1e-8
ADADELTA_RHO, ADADELTA_EPS = 0.95, 1e-6


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    n_params: int
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not self.buffers:
            names = {"sgd": (), "rmsprop": ("sq",), "adam": ("m", "v"),
                     "adadelta": ("sq", "delta_sq")}[self.kind]
            self.buffers = {n: np.zeros(self.n_params) for n in names}


def optimizer_step(state: OptimizerState, params: np.ndarray, gradient: np.ndarray,
                   direction: str = "ascend") -> tuple[np.ndarray, OptimizerState]:
    """Apply one update and return new params; ``state`` buffers are updated in place.

    ``direction='ascend'`` climbs the gradient (policy objective),
    ``'descend'`` goes down it (critic loss).
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.shape or g.shape != (state.n_params,):
        raise ValueError(f"gradient shape {g.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NonFiniteGradient(
            f"{len(bad)} non-finite gradient entries (first at index {bad[0]}: {g[bad[0]]})"
        )
    if direction == "descend":
        g = -g
    elif direction != "ascend":
        raise ValueError(f"direction must be 'ascend' or 'descend', got {direction!r}")

    lr = state.learning_rate
    b = state.buffers
    state.step += 1
    if state.kind == "sgd":
        delta = lr * g
    elif state.kind == "rmsprop":
        b["sq"] *= RMSPROP_DECAY
        b["sq"] += (1 - RMSPROP_DECAY) * g * g
        delta = lr * g / (np.sqrt(b["sq"]) + RMSPROP_EPS)
    elif state.kind == "adam":
        b1, b2 = ADAM_BETAS
        b["m"] *= b1
        b["m"] += (1 - b1) * g
        b["v"] *= b2
        b["v"] += (1 - b2) * g * g
        m_hat = b["m"] / (1 - b1**state.step)
        v_hat = b["v"] / (1 - b2**state.step)
        delta = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    else:
        rho, eps = ADADELTA_RHO, ADADELTA_EPS
        b["sq"] *= rho
        b["sq"] += (1 - rho) * g * g
        unit = np.sqrt(b["delta_sq"] + eps) / np.sqrt(b["sq"] + eps) * g
        b["delta_sq"] *= rho
        b["delta_sq"] += (1 - rho) * unit * unit
        delta = lr * unit
    return params + delta, state
