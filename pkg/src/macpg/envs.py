"""CartPole and small tabular environments.

Environments are stateless with respect to the simulated state: ``reset``
returns a state and ``step(state, action)`` returns ``(next_state, reward,
done)``. Stochastic environments draw from the generator seeded by the most
recent ``reset(seed)``. Step caps are enforced by the episode loop via
``max_steps``.
"""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from .mdp import TabularMdp, load_mdp

# CartPole-v0/v1 constants from the Gym reference implementation.
GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLEMASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
THETA_LIMIT = 12 * 2 * math.pi / 360
X_LIMIT = 2.4
CARTPOLE_MAX_STEPS = 200


def cartpole_dynamics(state, action: int):
    """One Euler step. Returns (x, x_dot, theta, theta_dot, done)."""
    x, x_dot, theta, theta_dot = state
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
    thetaacc = (GRAVITY * sintheta - costheta * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * costheta * costheta / TOTAL_MASS)
    )
    xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
    x = x + TAU * x_dot
    x_dot = x_dot + TAU * xacc
    theta = theta + TAU * theta_dot
    theta_dot = theta_dot + TAU * thetaacc
    done = x < -X_LIMIT or x > X_LIMIT or theta < -THETA_LIMIT or theta > THETA_LIMIT
    return x, x_dot, theta, theta_dot, done


class CartPole:
    """Pole balancing; +1 reward on every step, including the one that fails."""

    kind = "cartpole"
    n_actions = 2
    obs_dim = 4
    is_tabular = False

    def __init__(self, max_steps: int = CARTPOLE_MAX_STEPS):
        self.max_steps = max_steps
        self.rng = np.random.default_rng()

    def reset(self, seed=None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        return self.rng.uniform(-0.05, 0.05, size=4)

    def step(self, state, action: int):
        if action not in (0, 1):
            raise ValueError(f"CartPole action must be 0 or 1, got {action}")
        *nxt, done = cartpole_dynamics(state, action)
        return np.array(nxt), 1.0, done

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    @staticmethod
    def is_live(state) -> bool:
        x, _, theta, _ = state
        return abs(x) <= X_LIMIT and abs(theta) <= THETA_LIMIT

    def describe(self) -> dict:
        return {"kind": self.kind, "max_steps": self.max_steps}


class TabularEnv:
    """Simulator for a :class:`TabularMdp`; reward on a step is R[s, a]."""

    is_tabular = True

    def __init__(self, mdp: TabularMdp, max_steps: int = 200, kind: str = "tabular",
                 params: dict | None = None):
        self.mdp = mdp
        self.max_steps = max_steps
        self.kind = kind
        self.params = dict(params or {})
        self.rng = np.random.default_rng()
        self._cdf = np.cumsum(mdp.transition, axis=2)

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def obs_dim(self) -> int:
        return self.mdp.n_states

    def reset(self, seed=None) -> int:
        self.rng = np.random.default_rng(seed)
        return self.mdp.start_state

    def step(self, state: int, action: int):
        if not 0 <= action < self.mdp.n_actions:
            raise ValueError(f"action {action} outside [0, {self.mdp.n_actions})")
        cdf = self._cdf[state, action]
        nxt = min(int(np.searchsorted(cdf, self.rng.random(), side="right")), len(cdf) - 1)
        return nxt, float(self.mdp.reward[state, action]), bool(self.mdp.terminal[nxt])

    def observe(self, state: int) -> np.ndarray:
        obs = np.zeros(self.mdp.n_states)
        obs[state] = 1.0
        return obs

    def describe(self) -> dict:
        return {"kind": self.kind, "max_steps": self.max_steps, **self.params}


def chain_mdp(n: int = 5, slip: float = 0.1, discount: float = 0.9,
              goal_reward: float = 1.0) -> TabularMdp:
    """Corridor 0 .. n-1 with absorbing goal n-1; action 0 = left, 1 = right.

    A move succeeds with probability 1 - slip, otherwise the agent stays put.
    Moving right from n-2 pays the expected goal reward (1 - slip) * goal_reward;
    all other rewards are 0, so Q(s, right) > Q(s, left) in every live state.
    """
    if n < 2:
        raise ValueError("chain needs at least 2 states")
    T = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    goal = n - 1
    for s in range(goal):
        for a, target in ((0, max(s - 1, 0)), (1, s + 1)):
            T[s, a, target] += 1.0 - slip
            T[s, a, s] += slip
        R[s, 1] = (1.0 - slip) * goal_reward if s + 1 == goal else 0.0
    T[goal, :, goal] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    return TabularMdp(T, R, discount, 0, terminal)


def gridworld_mdp(width: int = 3, height: int = 3, walls=(), goal=None, start=(0, 0),
                  discount: float = 0.9, goal_reward: float = 1.0) -> tuple[TabularMdp, list]:
    """Deterministic grid; actions up/down/left/right. Moves into walls or the
    border leave the agent in place. Returns (mdp, cells) where ``cells[i]``
    is the (x, y) cell of state i; walls are not states."""
    walls = {tuple(w) for w in walls}
    goal = (width - 1, height - 1) if goal is None else tuple(goal)
    cells = [(x, y) for y in range(height) for x in range(width) if (x, y) not in walls]
    index = {c: i for i, c in enumerate(cells)}
    if goal not in index or tuple(start) not in index:
        raise ValueError("goal and start must be free cells")
    n = len(cells)
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    T = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    g = index[goal]
    for (x, y), s in index.items():
        for a, (dx, dy) in enumerate(moves):
            if s == g:
                T[s, a, s] = 1.0
                continue
            target = index.get((x + dx, y + dy), s)
            T[s, a, target] = 1.0
            if target == g:
                R[s, a] = goal_reward
    terminal = np.zeros(n, dtype=bool)
    terminal[g] = True
    return TabularMdp(T, R, discount, index[tuple(start)], terminal), cells


def reference_chain() -> TabularMdp:
    """The 5-state, 2-action, gamma=0.9 chain shipped as ``data/chain5.json``."""
    with resources.as_file(resources.files("macpg") / "data" / "chain5.json") as path:
        return load_mdp(path)


def make_env(kind: str = "cartpole", **params):
    kind = kind.lower()
    if kind == "cartpole":
        return CartPole(**params)
    if kind == "chain":
        max_steps = params.pop("max_steps", 200)
        n = params.get("n", 5)
        return TabularEnv(chain_mdp(**params), max_steps, "chain", {"n": n, **params})
    if kind == "gridworld":
        max_steps = params.pop("max_steps", 200)
        mdp, _ = gridworld_mdp(**params)
        return TabularEnv(mdp, max_steps, "gridworld", params)
    if kind == "mdp":
        max_steps = params.pop("max_steps", 200)
        return TabularEnv(load_mdp(params["path"]), max_steps, "mdp", params)
    raise ValueError(f"unknown environment kind {kind!r}")


def as_tabular(env) -> TabularMdp:
    if not getattr(env, "is_tabular", False):
        raise TypeError(f"{type(env).__name__} has no exact tabular model")
    return env.mdp
