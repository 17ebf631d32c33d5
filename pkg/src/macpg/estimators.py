"""Policy-gradient estimators.

Every estimator is expressed as a per-sample gradient with respect to the
policy's *logits*; the policy object then pulls those coefficients back to
its parameters. For a softmax policy

    grad log pi(a|s) = J_s^T (e_a - pi(.|s))
    sum_a grad pi(a|s) Qhat(s, a) = J_s^T [pi(.|s) * (Qhat(s, .) - Vhat(s))]

where J_s is the logits Jacobian and Vhat(s) = sum_a pi(a|s) Qhat(s, a). The
second form is the mean actor-critic (MAC) term; it touches no sampled action
and stays finite when some probabilities underflow to zero.

All estimators average over the batch (divide by |D|) unless explicit
per-sample ``weights`` are supplied, in which case the weighted sum is
returned as-is.

A policy object must provide ``probs(states) -> (probs[B, A], cache)`` and
``backward_logits(cache, dlogits[B, A]) -> flat gradient``. A critic must
provide ``q_values(states) -> [B, A]``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .mdp import Trajectory, compute_returns


class EstimatorKind(str, Enum):
    REINFORCE = "REINFORCE"
    ADV_REINFORCE = "ADV_REINFORCE"
    AC = "AC"
    ADV_AC = "ADV_AC"
    MAC = "MAC"

    @property
    def needs_critic(self) -> bool:
        return self in (EstimatorKind.AC, EstimatorKind.ADV_AC, EstimatorKind.MAC)

    @classmethod
    def parse(cls, name) -> "EstimatorKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_")
        aliases = {"ADV_REINFORCE": "ADV_REINFORCE", "ADVANTAGE_REINFORCE": "ADV_REINFORCE",
                   "ACTOR_CRITIC": "AC", "ADVANTAGE_AC": "ADV_AC", "A2C": "ADV_AC"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True, eq=False)
class Batch:
    """Flat (state, action, return) entries plus the trajectories they came from."""

    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    trajectories: tuple = ()

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], discount: float) -> "Batch":
        if not trajectories:
            raise ValueError("need at least one trajectory")
        states = np.concatenate([t.states for t in trajectories])
        actions = np.concatenate([t.actions for t in trajectories])
        returns = np.concatenate([compute_returns(t, discount) for t in trajectories])
        return cls(states, actions, returns, tuple(trajectories))


class RunningBaseline:
    """Scalar baseline: mean of the last ``window`` episode returns, 0 before any."""

    def __init__(self, window: int = 20):
        self.window = window
        self._buf: deque = deque(maxlen=window)

    @property
    def value(self) -> float:
        return float(np.mean(self._buf)) if self._buf else 0.0

    def update(self, episode_return: float) -> None:
        self._buf.append(float(episode_return))


# -- per-sample logit coefficients ------------------------------------------------

def score_coefficients(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """e_a - pi, i.e. grad of log pi(a|s) w.r.t. the logits."""
    coeff = -probs
    np.put_along_axis(coeff, actions[..., None],
                      np.take_along_axis(coeff, actions[..., None], axis=-1) + 1.0, axis=-1)
    return coeff


def state_values(probs: np.ndarray, q: np.ndarray) -> np.ndarray:
    return (probs * q).sum(axis=-1)


def logit_coefficients(kind: EstimatorKind, probs, actions=None, q=None, returns=None,
                       baseline: float = 0.0) -> np.ndarray:
    """Per-sample gradient w.r.t. logits for estimator ``kind`` (no batch averaging).

    Shapes broadcast over leading dims: probs/q are (..., A), actions/returns (...).
    """
    kind = EstimatorKind.parse(kind)
    probs = np.asarray(probs, dtype=np.float64)
    if kind is EstimatorKind.MAC:
        q = np.asarray(q, dtype=np.float64)
        return probs * (q - state_values(probs, q)[..., None])
    score = score_coefficients(probs, np.asarray(actions))
    if kind is EstimatorKind.REINFORCE:
        weight = np.asarray(returns, dtype=np.float64)
    elif kind is EstimatorKind.ADV_REINFORCE:
        weight = np.asarray(returns, dtype=np.float64) - baseline
    else:
        q = np.asarray(q, dtype=np.float64)
        weight = np.take_along_axis(q, np.asarray(actions)[..., None], axis=-1)[..., 0]
        if kind is EstimatorKind.ADV_AC:
            weight = weight - state_values(probs, q)
    return weight[..., None] * score


def _reduce(policy, cache, coeff: np.ndarray, weights) -> np.ndarray:
    n = coeff.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if weights is None:
        coeff = coeff / n
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"weights must have shape ({n},), got {w.shape}")
        coeff = coeff * w[:, None]
    return policy.backward_logits(cache, coeff)


def grad_reinforce(batch: Batch, policy, weights=None) -> np.ndarray:
    probs, cache = policy.probs(batch.states)
    coeff = logit_coefficients(EstimatorKind.REINFORCE, probs, batch.actions, returns=batch.returns)
    return _reduce(policy, cache, coeff, weights)


def grad_adv_reinforce(batch: Batch, policy, baseline: float, weights=None) -> np.ndarray:
    if not np.isfinite(baseline):
        raise ValueError(f"baseline must be finite, got {baseline}")
    probs, cache = policy.probs(batch.states)
    coeff = logit_coefficients(EstimatorKind.ADV_REINFORCE, probs, batch.actions,
                               returns=batch.returns, baseline=baseline)
    return _reduce(policy, cache, coeff, weights)


def grad_ac(batch: Batch, policy, critic, weights=None) -> np.ndarray:
    probs, cache = policy.probs(batch.states)
    coeff = logit_coefficients(EstimatorKind.AC, probs, batch.actions,
                               q=critic.q_values(batch.states))
    return _reduce(policy, cache, coeff, weights)


def grad_adv_ac(batch: Batch, policy, critic, weights=None) -> np.ndarray:
    probs, cache = policy.probs(batch.states)
    coeff = logit_coefficients(EstimatorKind.ADV_AC, probs, batch.actions,
                               q=critic.q_values(batch.states))
    return _reduce(policy, cache, coeff, weights)


def grad_mac(states, policy, critic, weights=None) -> np.ndarray:
    """Mean actor-critic gradient; consumes states only."""
    probs, cache = policy.probs(states)
    coeff = logit_coefficients(EstimatorKind.MAC, probs, q=critic.q_values(states))
    return _reduce(policy, cache, coeff, weights)


def estimate(kind, batch: Batch, policy, critic=None, baseline: float = 0.0,
             weights=None) -> np.ndarray:
    """Dispatch to the estimator named by ``kind``."""
    kind = EstimatorKind.parse(kind)
    if kind.needs_critic and critic is None:
        raise ValueError(f"{kind.value} needs a critic")
    if kind is EstimatorKind.REINFORCE:
        return grad_reinforce(batch, policy, weights)
    if kind is EstimatorKind.ADV_REINFORCE:
        return grad_adv_reinforce(batch, policy, baseline, weights)
    if kind is EstimatorKind.AC:
        return grad_ac(batch, policy, critic, weights)
    if kind is EstimatorKind.ADV_AC:
        return grad_adv_ac(batch, policy, critic, weights)
    return grad_mac(batch.states, policy, critic, weights)
