"""Exact tabular oracles and the Monte-Carlo bias/variance harness.

Occupancies, values and the true policy gradient are obtained by dense LU
solves (``numpy.linalg.solve``); intended for MDPs up to ~200 states.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorKind, logit_coefficients
from .mdp import TabularMdp, validate_mdp
from .nets import softmax

MAX_ORACLE_STATES = 200
ROW_TOL = 1e-12


class TabularPolicy:
    """Per-state action distribution, optionally a row-wise softmax of a logit table.

    Implements the policy protocol used by :mod:`macpg.estimators`: states are
    integer indices and the gradient is taken w.r.t. the flattened logit table.
    """

    def __init__(self, action_probs, logits=None):
        p = np.array(action_probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("action_probs must be [n_states, n_actions]")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("each policy row must be a probability distribution")
        self.action_probs = p
        self.logits = None if logits is None else np.array(logits, dtype=np.float64)
        if self.logits is not None and self.logits.shape != p.shape:
            raise ValueError("logit table shape must match probabilities")

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(softmax(logits), logits)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls.from_logits(np.zeros((n_states, n_actions)))

    @property
    def n_states(self) -> int:
        return self.action_probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.action_probs.shape[1]

    @property
    def is_parameterized(self) -> bool:
        return self.logits is not None

    def probs(self, states):
        states = np.asarray(states, dtype=np.int64)
        return self.action_probs[states], states

    def backward_logits(self, cache, dlogits) -> np.ndarray:
        grad = np.zeros_like(self.action_probs)
        np.add.at(grad, cache, np.asarray(dlogits, dtype=np.float64))
        return grad.ravel()


class QTable:
    """Fixed Q-value table usable wherever a critic is expected."""

    def __init__(self, values):
        self.values = np.array(values, dtype=np.float64)

    def q_values(self, states) -> np.ndarray:
        return self.values[np.asarray(states, dtype=np.int64)]


@dataclass
class OracleSolution:
    d_pi: np.ndarray
    v_pi: np.ndarray
    q_pi: np.ndarray
    exact_gradient: np.ndarray | None


def _check(mdp: TabularMdp, policy: TabularPolicy) -> None:
    problems = validate_mdp(mdp)
    if problems:
        raise ValueError("invalid MDP: " + "; ".join(problems))
    if policy.action_probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.action_probs.shape} does not fit MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    if mdp.n_states > MAX_ORACLE_STATES:
        raise ValueError(f"oracle mode is limited to {MAX_ORACLE_STATES} states")


def state_transition_matrix(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    return np.einsum("sa,sat->st", policy.action_probs, mdp.transition)


def solve_occupancy(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Discounted occupancy d(s) = sum_t gamma^t Pr(s_t = s); sums to 1/(1-gamma)."""
    _check(mdp, policy)
    P = state_transition_matrix(mdp, policy)
    e0 = np.zeros(mdp.n_states)
    e0[mdp.start_state] = 1.0
    try:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P.T, e0)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"occupancy system is singular: {exc}") from exc


def solve_q(mdp: TabularMdp, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Exact (V, Q) from the Bellman linear system."""
    _check(mdp, policy)
    P = state_transition_matrix(mdp, policy)
    r_pi = (policy.action_probs * mdp.reward).sum(axis=1)
    try:
        v = np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P, r_pi)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"Bellman system is singular: {exc}") from exc
    q = mdp.reward + mdp.discount * mdp.transition @ v
    return v, q


def objective(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """J = V(s0)."""
    return float(solve_q(mdp, policy)[0][mdp.start_state])


def softmax_policy_gradient(d_pi, probs, q) -> np.ndarray:
    """sum_s d(s) sum_a grad pi(a|s) q(s,a) for a tabular softmax, flattened [S*A]."""
    v = (probs * q).sum(axis=1, keepdims=True)
    return (d_pi[:, None] * probs * (q - v)).ravel()


def exact_policy_gradient(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    if not policy.is_parameterized:
        raise ValueError("exact_policy_gradient needs a softmax-parameterized policy")
    d = solve_occupancy(mdp, policy)
    _, q = solve_q(mdp, policy)
    return softmax_policy_gradient(d, policy.action_probs, q)


def solve(mdp: TabularMdp, policy: TabularPolicy) -> OracleSolution:
    d = solve_occupancy(mdp, policy)
    v, q = solve_q(mdp, policy)
    grad = softmax_policy_gradient(d, policy.action_probs, q) if policy.is_parameterized else None
    return OracleSolution(d, v, q, grad)


# -- streaming moments --------------------------------------------------------------

@dataclass
class Moments:
    """Count/mean/M2 accumulator supporting exact pairwise merges (Chan et al.)."""

    n: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        x = np.asarray(x, dtype=np.float64)
        mu = x.mean(axis=0)
        return cls(len(x), mu, ((x - mu) ** 2).sum(axis=0))

    def merge(self, other: "Moments") -> "Moments":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def variance(self):
        return self.m2 / (self.n - 1)


@dataclass
class EstimatorStats:
    estimator_kind: EstimatorKind
    n_batches: int
    batch_size: int
    mean: np.ndarray
    variance: np.ndarray
    reference: np.ndarray
    seed: int
    sampling: str = "exact"
    scale: float = 1.0
    variance_se: np.ndarray = field(default=None, repr=False)
    total_variance_se: float = float("nan")

    @property
    def mean_se(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n_batches)

    @property
    def bias(self) -> np.ndarray:
        return self.mean - self.reference

    @property
    def total_variance(self) -> float:
        return float(self.variance.sum())


CSV_COLUMNS = ("estimator", "component", "mean", "variance", "reference",
               "n_batches", "batch_size", "seed")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def stats_to_csv(stats_list, extra_columns: dict | None = None) -> str:
    """CSV text for one or more :class:`EstimatorStats` (17 significant digits)."""
    extra_columns = extra_columns or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CSV_COLUMNS) + list(extra_columns))
    for st in stats_list:
        for i in range(len(st.mean)):
            w.writerow([st.estimator_kind.value, i, fmt(st.mean[i]), fmt(st.variance[i]),
                        fmt(st.reference[i]), st.n_batches, st.batch_size, st.seed]
                       + [str(v) for v in extra_columns.values()])
    return buf.getvalue()


# -- Monte-Carlo harness ------------------------------------------------------------

def _sample_actions(rng, probs_rows: np.ndarray) -> np.ndarray:
    u = rng.random(probs_rows.shape[:-1])
    cdf = np.cumsum(probs_rows, axis=-1)
    a = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(a, probs_rows.shape[-1] - 1)


def _sample_next(rng, mdp: TabularMdp, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return _sample_actions(rng, mdp.transition[s, a])


def _mc_returns(rng, mdp, policy, s, a, horizon_tol=1e-10, max_steps=10_000):
    """One Monte-Carlo discounted return per (s, a) pair, truncated once gamma^k < tol."""
    g = mdp.reward[s, a].copy()
    disc = 1.0
    alive = ~mdp.terminal[s]
    for _ in range(max_steps):
        disc *= mdp.discount
        if disc < horizon_tol or not alive.any():
            break
        s = _sample_next(rng, mdp, s, a)
        a = _sample_actions(rng, policy.action_probs[s])
        alive &= ~mdp.terminal[s]
        g += disc * np.where(alive, mdp.reward[s, a], 0.0)
    return g


def _streams(rng, mdp, policy, n_streams, length, need_returns, max_episode_steps):
    """Undiscounted on-policy visitation: ``n_streams`` independent streams of
    back-to-back episodes from s0, each yielding ``length`` (s, a[, G]) entries."""
    S = np.full(n_streams, mdp.start_state, dtype=np.int64)
    ep_t = np.zeros(n_streams, dtype=np.int64)
    states, actions, rewards, ends = [], [], [], []
    open_ep = np.ones(n_streams, dtype=bool)  # stream still inside an episode needing returns
    t = 0
    while t < length or (need_returns and open_ep.any()):
        a = _sample_actions(rng, policy.action_probs[S])
        nxt = _sample_next(rng, mdp, S, a)
        ep_t += 1
        end = mdp.terminal[nxt] | (ep_t >= max_episode_steps)
        states.append(S)
        actions.append(a)
        rewards.append(mdp.reward[S, a])
        ends.append(end)
        t += 1
        if t >= length:
            open_ep &= ~end
        S = np.where(end, mdp.start_state, nxt)
        ep_t = np.where(end, 0, ep_t)
    states = np.stack(states, axis=1)[:, :length]
    actions = np.stack(actions, axis=1)[:, :length]
    if not need_returns:
        return states, actions, None
    R = np.stack(rewards, axis=1)
    E = np.stack(ends, axis=1)
    G = np.zeros_like(R)
    g = np.zeros(n_streams)
    for k in range(R.shape[1] - 1, -1, -1):
        g = R[:, k] + mdp.discount * np.where(E[:, k], 0.0, g)
        G[:, k] = g
    return states, actions, G[:, :length]


def batch_estimates(kind, mdp, policy, q_hat, states, actions, returns=None,
                    baseline=0.0) -> np.ndarray:
    """Estimator value for each of many tabular batches: states/actions are (n, |D|)."""
    n, D = states.shape
    probs = policy.action_probs[states]
    coeff = logit_coefficients(kind, probs, actions, q=np.asarray(q_hat)[states],
                               returns=returns, baseline=baseline) / D
    S, A = mdp.n_states, mdp.n_actions
    idx = (np.arange(n)[:, None] * S + states).ravel()
    out = np.empty((n, S, A))
    for a in range(A):
        out[:, :, a] = np.bincount(idx, weights=coeff[..., a].ravel(), minlength=n * S).reshape(n, S)
    return out.reshape(n, S * A)


def measure_estimator(mdp: TabularMdp, policy: TabularPolicy, q_hat, kind, batch_size: int,
                      n_batches: int, seed: int, sampling: str = "exact",
                      baseline: float = 0.0, n_chunks: int = 100, workers: int = 1,
                      max_episode_steps: int = 1000) -> EstimatorStats:
    """Mean and per-component variance of an estimator over independent batches.

    ``sampling='exact'`` draws batch states i.i.d. from the normalized discounted
    occupancy and scales every estimate by sum(d) = 1/(1-gamma), so the mean
    targets the true gradient. ``sampling='trajectory'`` takes consecutive
    on-policy steps from episodes started at s0 (no discounting, no scaling).

    Batches are processed in chunks with seeds spawned from ``seed``; the
    merged result is independent of ``workers``. States are drawn before
    actions, so runs that share a seed see the same states for every kind.
    """
    kind = EstimatorKind.parse(kind)
    if n_batches < 2:
        raise ValueError("need at least 2 batches for a variance estimate")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if sampling not in ("exact", "trajectory"):
        raise ValueError(f"unknown sampling mode {sampling!r}")
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if q_hat.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"q_hat must be [{mdp.n_states}, {mdp.n_actions}]")
    d = solve_occupancy(mdp, policy)
    reference = softmax_policy_gradient(d, policy.action_probs, solve_q(mdp, policy)[1])
    state_p = np.clip(d, 0.0, None)
    mass = state_p.sum()
    state_p = state_p / mass
    scale = mass if sampling == "exact" else 1.0
    need_returns = kind in (EstimatorKind.REINFORCE, EstimatorKind.ADV_REINFORCE)

    n_chunks = max(1, min(n_chunks, n_batches // 2))
    sizes = [len(c) for c in np.array_split(np.arange(n_batches), n_chunks)]
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)

    def run_chunk(i):
        rng = np.random.Generator(np.random.PCG64(seeds[i]))
        n = sizes[i]
        if sampling == "exact":
            s = rng.choice(mdp.n_states, size=(n, batch_size), p=state_p)
            a = _sample_actions(rng, policy.action_probs[s])
            G = _mc_returns(rng, mdp, policy, s.ravel(), a.ravel()).reshape(s.shape) \
                if need_returns else None
        else:
            s, a, G = _streams(rng, mdp, policy, n, batch_size, need_returns, max_episode_steps)
        est = scale * batch_estimates(kind, mdp, policy, q_hat, s, a, G, baseline)
        return Moments.of(est)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run_chunk, range(n_chunks)))
    else:
        parts = [run_chunk(i) for i in range(n_chunks)]

    total = Moments()
    for p in parts:
        total = total.merge(p)
    chunk_vars = np.array([p.variance for p in parts if p.n >= 2])
    if len(chunk_vars) >= 2:
        k = len(chunk_vars)
        var_se = chunk_vars.std(axis=0, ddof=1) / np.sqrt(k)
        tot_se = float(chunk_vars.sum(axis=1).std(ddof=1) / np.sqrt(k))
    else:
        var_se = np.full(len(reference), np.nan)
        tot_se = float("nan")
    return EstimatorStats(kind, n_batches, batch_size, np.asarray(total.mean),
                          np.asarray(total.variance), reference, seed, sampling, float(scale),
                          var_se, tot_se)


# -- Jensen step, per state --------------------------------------------------------

@dataclass
class JensenReport:
    component: int
    x: np.ndarray            # X(s, a)
    y: np.ndarray            # Y(s) = E_a X(s, a)
    second_moment: np.ndarray  # E_a X(s, a)^2
    margin: np.ndarray       # second_moment - y**2
    strict: np.ndarray       # row non-degenerate and X varies over supported actions

    @property
    def ok(self) -> bool:
        return bool(np.all(self.margin >= -1e-12))


def jensen_margin(probs_row, x_row) -> tuple[float, float, float]:
    """(E[X^2], E[X]^2, margin) for one state's action distribution."""
    p = np.asarray(probs_row, dtype=np.float64)
    x = np.asarray(x_row, dtype=np.float64)
    second = float((p * x * x).sum())
    y = float((p * x).sum())
    return second, y * y, second - y * y


def xy_decomposition(policy: TabularPolicy, q_hat, component_index: int):
    """X(s,a) = d/dtheta_i log pi(a|s) * Qhat(s,a) and Y(s) = sum_a pi(a|s) X(s,a)."""
    S, A = policy.action_probs.shape
    if not 0 <= component_index < S * A:
        raise ValueError(f"component index {component_index} outside [0, {S * A})")
    si, bi = divmod(component_index, A)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    x = np.zeros((S, A))
    # d log pi(a|s_i) / d theta[s_i, b_i] = 1[a == b_i] - pi(b_i | s_i)
    x[si] = ((np.arange(A) == bi).astype(float) - policy.action_probs[si, bi]) * q_hat[si]
    y = (policy.action_probs * x).sum(axis=1)
    return x, y


def jensen_check(mdp: TabularMdp, policy: TabularPolicy, q_hat, component_index: int) -> JensenReport:
    _check(mdp, policy)
    x, y = xy_decomposition(policy, q_hat, component_index)
    p = policy.action_probs
    second = (p * x * x).sum(axis=1)
    margin = second - y * y
    support = p > 0
    x_min = np.where(support, x, np.inf).min(axis=1)
    x_max = np.where(support, x, -np.inf).max(axis=1)
    strict = (support.sum(axis=1) > 1) & (x_max > x_min)
    return JensenReport(component_index, x, y, second, margin, strict)
