"""Training loops: rollouts, Monte-Carlo critic fitting, interleaved actor updates."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .envs import CartPole, make_env
from .estimators import Batch, EstimatorKind, RunningBaseline, estimate
from .mdp import Trajectory
from .nets import CriticNet, MlpSpec, PolicyNet, save_checkpoint
from .optim import (ADADELTA_EPS, ADADELTA_RHO, ADAM_BETAS, ADAM_EPS, RMSPROP_DECAY, RMSPROP_EPS,
                    NonFiniteGradient, OptimizerState, optimizer_step)

log = logging.getLogger(__name__)

PARAM_LIMIT = 1e6
EPISODE_CSV_COLUMNS = ("episode", "return", "entropy", "grad_norm")

# optimizer kind -> (kernel code, (decay1, decay2, eps)); buffer order follows OptimizerState
_OPT_KERNEL_ARGS = {
    "sgd": (0, (0.0, 0.0, 0.0)),
    "rmsprop": (1, (RMSPROP_DECAY, 0.0, RMSPROP_EPS)),
    "adam": (2, (ADAM_BETAS[0], ADAM_BETAS[1], ADAM_EPS)),
    "adadelta": (3, (ADADELTA_RHO, 0.0, ADADELTA_EPS)),
}


class Diverged(RuntimeError):
    pass


@dataclass
class NetConfig:
    hidden: tuple = (50,)
    activation: str = "relu"
    optimizer: str = "adam"
    learning_rate: float = 5e-3

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


@dataclass
class TrainConfig:
    env: dict = field(default_factory=lambda: {"kind": "cartpole"})
    estimator: str = "MAC"
    policy: NetConfig = field(default_factory=lambda: NetConfig(optimizer="rmsprop",
                                                                learning_rate=1e-3))
    critic: NetConfig | None = field(default_factory=NetConfig)
    discount: float = 0.99
    episodes_per_iteration: int = 1
    critic_updates: int = 5
    critic_batch_size: int = 64
    critic_history: int = 10
    actor_updates: int = 1
    total_episodes: int = 1000
    baseline_window: int = 20
    eval_every: int = 0
    eval_episodes: int = 10
    seed: int = 0

    def __post_init__(self):
        self.estimator = EstimatorKind.parse(self.estimator).value
        if isinstance(self.policy, dict):
            self.policy = NetConfig(**self.policy)
        if isinstance(self.critic, dict):
            self.critic = NetConfig(**self.critic)
        kind = EstimatorKind(self.estimator)
        if not kind.needs_critic:
            self.critic = None
        elif self.critic is None:
            raise ValueError(f"estimator {kind.value} needs a critic configuration")
        if self.episodes_per_iteration < 1 or self.total_episodes < 1:
            raise ValueError("episode counts must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")

    @property
    def kind(self) -> EstimatorKind:
        return EstimatorKind(self.estimator)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("policy", "critic"):
            if d[k] is not None:
                d[k]["hidden"] = list(d[k]["hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class RunRecord:
    config: dict
    returns: np.ndarray                 # undiscounted, one per episode
    episode_entropy: np.ndarray
    episode_grad_norm: np.ndarray
    iteration_grad_norm: list
    iteration_entropy: list
    iteration_critic_loss: list
    policy: PolicyNet
    critic: CriticNet | None
    evaluations: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""

    @property
    def n_episodes(self) -> int:
        return len(self.returns)

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPISODE_CSV_COLUMNS)
        for i in range(self.n_episodes):
            w.writerow([i, repr(float(self.returns[i])), repr(float(self.episode_entropy[i])),
                        repr(float(self.episode_grad_norm[i]))])
        return buf.getvalue()

    def stem(self) -> str:
        env = self.config["env"].get("kind", "env")
        return f"{self.config['estimator']}_{env}_seed{self.config['seed']}"

    def save(self, out_dir) -> dict:
        """Write config snapshot, per-episode CSV and policy checkpoint; return paths."""
        from .io import atomic_write_text

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.stem()
        paths = {
            "config": out / f"{stem}.config.json",
            "episodes": out / f"{stem}.episodes.csv",
            "policy": out / f"{stem}.policy.json",
        }
        snapshot = {"config": self.config, "failed": self.failed, "failure": self.failure,
                    "evaluations": self.evaluations}
        atomic_write_text(paths["config"], json.dumps(snapshot, indent=1, sort_keys=True) + "\n")
        atomic_write_text(paths["episodes"], self.episodes_csv())
        save_checkpoint(paths["policy"], self.policy.spec, self.policy.params)
        if self.critic is not None:
            paths["critic"] = out / f"{stem}.critic.json"
            save_checkpoint(paths["critic"], self.critic.spec, self.critic.params)
        return paths


# -- rollouts ---------------------------------------------------------------------

def _episode_rng(rng: np.random.Generator, max_steps: int):
    return int(rng.integers(2**63)), rng.random(max_steps)


def run_episode(env, policy: PolicyNet, rng: np.random.Generator) -> Trajectory:
    """One on-policy episode. Consumes the generator identically on every backend."""
    env_seed, uniforms = _episode_rng(rng, env.max_steps)
    state = env.reset(env_seed)
    if isinstance(env, CartPole):
        obs, actions, terminated = kernels.cartpole_rollout(
            policy.params.values, np.asarray(policy.spec.sizes), policy.spec.activation,
            np.asarray(state, dtype=np.float64), uniforms, env.max_steps)
        return Trajectory(obs, actions, np.ones(len(actions)), terminated)
    states, actions, rewards = [], [], []
    terminated = False
    for t in range(env.max_steps):
        p, _ = policy.probs(env.observe(state))
        a = min(int(np.searchsorted(np.cumsum(p), uniforms[t], side="right")), len(p) - 1)
        nxt, r, done = env.step(state, a)
        states.append(state)
        actions.append(a)
        rewards.append(r)
        state = nxt
        if done:
            terminated = True
            break
    return Trajectory(np.asarray(states), np.asarray(actions), np.asarray(rewards), terminated)


def observations(env, traj: Trajectory) -> np.ndarray:
    """Network inputs for every step of ``traj``."""
    if traj.states.ndim == 2:
        return traj.states
    return np.stack([env.observe(s) for s in traj.states])


def collect_episodes(env, policy: PolicyNet, n: int, seed) -> list[Trajectory]:
    """``n`` on-policy episodes; ``seed`` may be an int or a Generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [run_episode(env, policy, rng) for _ in range(n)]


# -- critic -------------------------------------------------------------------------

def fit_critic(critic: CriticNet, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray,
               opt: OptimizerState, n_updates: int, rng: np.random.Generator,
               batch_size: int | None = None, backend: str | None = None) -> list[float]:
    """Regress Q(s_t, a_t) on ``targets`` with squared loss, ``n_updates`` passes.

    Each pass shuffles the data into minibatches (full batch when
    ``batch_size`` is None) and takes one optimizer step per minibatch.
    Returns the mean loss of each pass (measured before its updates).
    The parameter vector and optimizer buffers are updated in place.
    """
    n = len(actions)
    if n == 0:
        raise ValueError("no data to fit")
    bs = n if not batch_size else min(batch_size, n)
    code, hyper = _OPT_KERNEL_ARGS[opt.kind]
    names = list(opt.buffers)
    buf1 = opt.buffers[names[0]] if names else np.zeros(0)
    buf2 = opt.buffers[names[1]] if len(names) > 1 else np.zeros(0)
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.int64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    sizes = np.asarray(critic.spec.sizes, dtype=np.int64)
    losses = []
    for _ in range(n_updates):
        order = rng.permutation(n)
        total, opt.step = kernels.critic_pass(
            critic.params.values, sizes, critic.spec.activation, obs, actions, targets, order,
            bs, code, opt.learning_rate, opt.step, buf1, buf2, hyper, backend=backend)
        if not np.isfinite(total) or not np.all(np.isfinite(critic.params.values)):
            raise Diverged(f"critic regression became non-finite (loss {total})")
        losses.append(total / n)
    return losses


# -- main loop ----------------------------------------------------------------------

class _Critic:
    """Adapter giving a CriticNet the ``q_values`` protocol over observations."""

    def __init__(self, net):
        self.net = net

    def q_values(self, obs):
        return self.net.q_values(obs)


def _entropy(probs: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=-1)
    return float(np.mean(h))


def build_networks(config: TrainConfig, env, rng: np.random.Generator):
    pc = config.policy
    policy = PolicyNet.create(
        MlpSpec(env.obs_dim, env.n_actions, pc.hidden, pc.activation, "softmax"), rng)
    critic = None
    if config.critic is not None:
        cc = config.critic
        critic = CriticNet.create(
            MlpSpec(env.obs_dim, env.n_actions, cc.hidden, cc.activation, "linear"), rng)
    return policy, critic


def train(config: TrainConfig, env=None, policy: PolicyNet | None = None,
          critic: CriticNet | None = None) -> RunRecord:
    """Generalized-policy-iteration loop.

    Per iteration: collect ``episodes_per_iteration`` episodes, refit the
    critic on the last ``critic_history`` episodes (when the estimator uses
    one), then take ``actor_updates`` ascent steps with the estimator. The
    MAC path hands only the state list to the estimator.
    """
    kind = config.kind
    env = env or make_env(**config.env)
    root = np.random.SeedSequence(config.seed)
    init_rng, roll_rng, fit_rng, eval_rng = (np.random.default_rng(s) for s in root.spawn(4))
    if policy is None or (kind.needs_critic and critic is None):
        p0, c0 = build_networks(config, env, init_rng)
        policy = policy or p0
        critic = critic or c0
    if not kind.needs_critic:
        critic = None
    p_opt = OptimizerState(config.policy.optimizer, config.policy.learning_rate, len(policy.params))
    c_opt = (OptimizerState(config.critic.optimizer, config.critic.learning_rate, len(critic.params))
             if critic is not None else None)
    baseline = RunningBaseline(config.baseline_window)
    history: list = []

    returns, ep_entropy, ep_gnorm = [], [], []
    it_gnorm, it_entropy, it_loss, evaluations = [], [], [], []
    failed, failure = False, ""
    episodes_done = 0
    try:
        while episodes_done < config.total_episodes:
            n = min(config.episodes_per_iteration, config.total_episodes - episodes_done)
            trajs = collect_episodes(env, policy, n, roll_rng)
            obs = [observations(env, t) for t in trajs]
            batch = Batch.from_trajectories(trajs, config.discount)
            batch = Batch(np.concatenate(obs), batch.actions, batch.returns, batch.trajectories)

            loss = float("nan")
            if critic is not None:
                history.extend(zip(obs, trajs, np.split(batch.returns,
                                                        np.cumsum([len(t) for t in trajs])[:-1])))
                history = history[-config.critic_history:]
                h_obs = np.concatenate([h[0] for h in history])
                h_act = np.concatenate([h[1].actions for h in history])
                h_ret = np.concatenate([h[2] for h in history])
                losses = fit_critic(critic, h_obs, h_act, h_ret, c_opt, config.critic_updates,
                                    fit_rng, config.critic_batch_size)
                loss = losses[-1] if losses else float("nan")

            gnorm = 0.0
            for _ in range(config.actor_updates):
                if kind is EstimatorKind.MAC:
                    grad = estimate(kind, Batch(batch.states, np.zeros(0, dtype=np.int64),
                                                np.zeros(0)), policy, _Critic(critic))
                else:
                    grad = estimate(kind, batch, policy,
                                    _Critic(critic) if critic is not None else None,
                                    baseline=baseline.value)
                gnorm = float(np.linalg.norm(grad))
                values, _ = optimizer_step(p_opt, policy.params.values, grad, "ascend")
                policy.params = policy.params.like(values)
                if np.max(np.abs(values)) > PARAM_LIMIT:
                    raise Diverged(f"policy parameter magnitude exceeded {PARAM_LIMIT:g}")
            if critic is not None and np.max(np.abs(critic.params.values)) > PARAM_LIMIT:
                raise Diverged(f"critic parameter magnitude exceeded {PARAM_LIMIT:g}")

            probs, _ = policy.probs(batch.states)
            ent = _entropy(probs)
            for t in trajs:
                returns.append(t.undiscounted_return)
                baseline.update(t.undiscounted_return)
                ep_entropy.append(ent)
                ep_gnorm.append(gnorm)
            it_gnorm.append(gnorm)
            it_entropy.append(ent)
            it_loss.append(loss)
            episodes_done += n
            if config.eval_every and episodes_done % config.eval_every == 0:
                m, se = evaluate(policy, env, config.eval_episodes, eval_rng)
                evaluations.append({"episode": episodes_done, "mean": m, "stderr": se})
    except (Diverged, NonFiniteGradient, FloatingPointError) as exc:
        failed, failure = True, f"{type(exc).__name__}: {exc}"
        log.warning("run %s seed %s aborted: %s", config.estimator, config.seed, failure)

    return RunRecord(config.to_dict(), np.asarray(returns, dtype=np.float64),
                     np.asarray(ep_entropy), np.asarray(ep_gnorm), it_gnorm, it_entropy,
                     it_loss, policy, critic, evaluations, failed, failure)


def evaluate(policy: PolicyNet, env, n_episodes: int, seed) -> tuple[float, float]:
    """Mean and standard error of undiscounted returns, acting by sampling from pi."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    scores = np.array([t.undiscounted_return for t in collect_episodes(env, policy, n_episodes, seed)])
    se = float(scores.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(scores.mean()), se
