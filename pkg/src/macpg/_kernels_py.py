"""Pure-Python/numpy rollout kernel; reference semantics for ``_kernels.pyx``."""

import math

import numpy as np

from .envs import cartpole_dynamics

RELU, LEAKY_RELU, TANH = 0, 1, 2
LEAK = 0.3


def mlp_probs(params, sizes, activation, x):
    """Softmax output of the flat-parameter MLP for a single input vector."""
    pos = 0
    h = x
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        h = h @ W + b
        if i < n_layers - 1:
            if activation == RELU:
                h = np.maximum(h, 0.0)
            elif activation == LEAKY_RELU:
                h = np.where(h > 0, h, LEAK * h)
            else:
                h = np.tanh(h)
    e = np.exp(h - h.max())
    return e / e.sum()


def sample_index(probs, u):
    cum = 0.0
    last = len(probs) - 1
    for a in range(last):
        cum += probs[a]
        if u < cum:
            return a
    return last


def cartpole_rollout(params, sizes, activation, init_state, uniforms, max_steps):
    """Run one CartPole episode under an MLP softmax policy.

    Action t is the smallest index whose cumulative probability exceeds
    ``uniforms[t]``. Returns (observations[T, 4], actions[T], terminated).
    """
    params = np.asarray(params, dtype=np.float64)
    obs = np.empty((max_steps, 4))
    actions = np.empty(max_steps, dtype=np.int64)
    state = tuple(float(v) for v in init_state)
    terminated = False
    t = 0
    while t < max_steps:
        obs[t] = state
        a = sample_index(mlp_probs(params, sizes, activation, obs[t]), uniforms[t])
        actions[t] = a
        *nxt, done = cartpole_dynamics(state, a)
        state = tuple(nxt)
        t += 1
        if done:
            terminated = True
            break
    return obs[:t].copy(), actions[:t].copy(), terminated


SGD, RMSPROP, ADAM, ADADELTA = 0, 1, 2, 3


def _layers(params, sizes):
    pos = 0
    out = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        out.append((W, params[pos:pos + fan_out]))
        pos += fan_out
    return out


def critic_pass(params, sizes, activation, obs, actions, targets, order, batch_size,
                optimizer, lr, step, buf1, buf2, hyper):
    """One pass of minibatch steps on 0.5 * mean((Q(s, a) - target)^2).

    ``order`` is the shuffled sample order; consecutive slices of
    ``batch_size`` form the minibatches. The loss of each minibatch is
    measured before its update. ``params``, ``buf1`` and ``buf2`` are
    updated in place; ``hyper`` holds (decay1, decay2, eps) for the chosen
    optimizer code. Returns (summed per-sample loss, new step count).
    """
    h1, h2, h3 = hyper
    sizes = [int(s) for s in sizes]
    n_layers = len(sizes) - 1
    grad = np.zeros_like(params)
    loss_sum = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        nb = len(idx)
        layers = _layers(params, sizes)
        hs, zs = [obs[idx]], []
        for i, (W, b) in enumerate(layers):
            z = hs[-1] @ W + b
            zs.append(z)
            if i < n_layers - 1:
                if activation == RELU:
                    z = np.maximum(z, 0.0)
                elif activation == LEAKY_RELU:
                    z = np.where(z > 0, z, LEAK * z)
                else:
                    z = np.tanh(z)
            hs.append(z)
        rows = np.arange(nb)
        err = hs[-1][rows, actions[idx]] - targets[idx]
        loss_sum += float(np.sum(0.5 * err * err))
        delta = np.zeros_like(hs[-1])
        delta[rows, actions[idx]] = err / nb
        glayers = _layers(grad, sizes)
        for i in range(n_layers - 1, -1, -1):
            gW, gb = glayers[i]
            gW[...] = hs[i].T @ delta
            gb[...] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ layers[i][0].T
                if activation == RELU:
                    delta = delta * (zs[i - 1] > 0)
                elif activation == LEAKY_RELU:
                    delta = delta * np.where(zs[i - 1] > 0, 1.0, LEAK)
                else:
                    delta = delta * (1.0 - hs[i] * hs[i])
        step += 1
        g = -grad
        if optimizer == SGD:
            params += lr * g
        elif optimizer == RMSPROP:
            buf1 *= h1
            buf1 += (1 - h1) * g * g
            params += lr * g / (np.sqrt(buf1) + h3)
        elif optimizer == ADAM:
            buf1 *= h1
            buf1 += (1 - h1) * g
            buf2 *= h2
            buf2 += (1 - h2) * g * g
            params += lr * (buf1 / (1 - h1**step)) / (np.sqrt(buf2 / (1 - h2**step)) + h3)
        else:
            buf1 *= h1
            buf1 += (1 - h1) * g * g
            unit = np.sqrt(buf2 + h3) / np.sqrt(buf1 + h3) * g
            buf2 *= h1
            buf2 += (1 - h1) * unit * unit
            params += lr * unit
    return loss_sum, step
