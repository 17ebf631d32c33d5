"""Finite MDPs, trajectories and discounted returns.

Reward convention: ``Trajectory.rewards[t]`` is the reward received *after*
taking ``actions[t]`` in ``states[t]`` (r_{t+1} in the usual notation), so
``G_t = rewards[t] + gamma * G_{t+1}`` with ``G_T = 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12
SCHEMA_VERSION = 1


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Exact finite MDP.

    ``transition[s, a, s']`` is Pr(s' | s, a) and ``reward[s, a]`` the expected
    immediate reward. Arrays are copied and made read-only on construction.
    Construction does not validate; use :func:`validate_mdp`.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    start_state: int = 0
    terminal: np.ndarray | None = None

    def __post_init__(self):
        T = _frozen(self.transition, np.float64)
        R = _frozen(self.reward, np.float64)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transition must be [S, A, S], got shape {T.shape}")
        if R.shape != T.shape[:2]:
            raise ValueError(f"reward shape {R.shape} does not match transition {T.shape[:2]}")
        term = np.zeros(T.shape[0], dtype=bool) if self.terminal is None else self.terminal
        term = _frozen(term, bool)
        if term.shape != (T.shape[0],):
            raise ValueError("terminal flags must have one entry per state")
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "start_state", int(self.start_state))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "schema": "tabular-mdp",
            "version": SCHEMA_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "start_state": self.start_state,
            "terminal": [int(s) for s in np.flatnonzero(self.terminal)],
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        if doc.get("schema", "tabular-mdp") != "tabular-mdp":
            raise ValueError(f"not a tabular-mdp document: {doc.get('schema')!r}")
        if int(doc.get("version", SCHEMA_VERSION)) != SCHEMA_VERSION:
            raise ValueError(f"unsupported tabular-mdp version {doc.get('version')}")
        n_s, n_a = int(doc["n_states"]), int(doc["n_actions"])
        T = np.asarray(doc["transition"], dtype=np.float64)
        R = np.asarray(doc["reward"], dtype=np.float64)
        if T.shape != (n_s, n_a, n_s) or R.shape != (n_s, n_a):
            raise ValueError(
                f"declared sizes ({n_s}, {n_a}) disagree with arrays {T.shape}, {R.shape}"
            )
        terminal = np.zeros(n_s, dtype=bool)
        terminal[list(doc.get("terminal", []))] = True
        return cls(T, R, doc["discount"], doc.get("start_state", 0), terminal)


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1) + "\n")


def load_mdp(path) -> TabularMdp:
    return TabularMdp.from_dict(json.loads(Path(path).read_text()))


def validate_mdp(mdp: TabularMdp) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    if not 0.0 <= mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount!r} outside [0, 1)")
    if not 0 <= mdp.start_state < mdp.n_states:
        problems.append(f"start_state {mdp.start_state} outside [0, {mdp.n_states})")
    T = mdp.transition
    for s, a in zip(*np.nonzero((T < 0).any(axis=2))):
        problems.append(f"negative transition probability at (s={s}, a={a})")
    sums = T.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        problems.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}")
    if not np.all(np.isfinite(mdp.reward)):
        problems.append("non-finite reward entries")
    for s in np.flatnonzero(mdp.terminal):
        if not np.all(T[s, :, s] == 1.0):
            problems.append(f"terminal state {s} does not self-loop with probability 1")
        if np.any(mdp.reward[s] != 0.0):
            problems.append(f"terminal state {s} has nonzero reward")
    return problems


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode. ``states`` is (T,) int for tabular envs or (T, d) float."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool = True
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, copy=True)
        if states.dtype.kind == "f":
            states = states.astype(np.float64)
        states.setflags(write=False)
        actions = _frozen(self.actions, np.int64)
        rewards = _frozen(self.rewards, np.float64)
        if len(actions) == 0:
            raise ValueError("trajectory must contain at least one step")
        if not (len(states) == len(actions) == len(rewards)):
            raise ValueError(
                f"length mismatch: {len(states)} states, {len(actions)} actions, "
                f"{len(rewards)} rewards"
            )
        if actions.min() < 0:
            raise ValueError("negative action index")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def undiscounted_return(self) -> float:
        return float(self.rewards.sum())

    def check_actions(self, n_actions: int) -> None:
        if self.actions.max() >= n_actions:
            raise ValueError(f"action {self.actions.max()} outside [0, {n_actions})")

    @classmethod
    def from_steps(cls, steps: Sequence[tuple], terminated: bool = True) -> "Trajectory":
        if not steps:
            raise ValueError("trajectory must contain at least one step")
        states, actions, rewards = zip(*steps)
        return cls(np.asarray(states), np.asarray(actions), np.asarray(rewards), terminated)


def compute_returns(traj: Trajectory | Sequence[float], discount: float) -> np.ndarray:
    """Discounted returns G_t for every step, by backward recursion.

    Accepts a :class:`Trajectory` or a bare reward sequence. Truncated
    trajectories get no bootstrap: the return after the last step is 0.
    """
    if not 0.0 <= discount < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {discount}")
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) == 0:
        raise ValueError("need a non-empty 1-d reward sequence")
    out = np.empty_like(rewards, dtype=np.float64)
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + discount * g
        out[t] = g
    return out
