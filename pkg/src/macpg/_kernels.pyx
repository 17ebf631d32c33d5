# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CartPole rollout kernel; mirrors ``_kernels_py`` step for step."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, tanh, exp, pi, sqrt

cnp.import_array()

cdef double GRAVITY = 9.8
cdef double POLE_MASS = 0.1
cdef double TOTAL_MASS = 1.0 + 0.1
cdef double HALF_LENGTH = 0.5
cdef double POLEMASS_LENGTH = 0.1 * 0.5
cdef double FORCE_MAG = 10.0
cdef double TAU = 0.02
cdef double THETA_LIMIT = 12 * 2 * pi / 360
cdef double X_LIMIT = 2.4
cdef double LEAK = 0.3


cdef int _sample_action(const double[::1] params, const long long[::1] sizes, int activation,
                        double[::1] buf_a, double[::1] buf_b, double u) noexcept nogil:
    cdef Py_ssize_t n_layers = sizes.shape[0] - 1
    cdef Py_ssize_t pos = 0, i, j, k, fan_in, fan_out
    cdef double acc, mx, total, cum
    cdef double[::1] src = buf_a
    cdef double[::1] dst = buf_b
    cdef double[::1] tmp
    for i in range(n_layers):
        fan_in = sizes[i]
        fan_out = sizes[i + 1]
        for k in range(fan_out):
            dst[k] = 0.0
        for j in range(fan_in):
            acc = src[j]
            for k in range(fan_out):
                dst[k] += acc * params[pos + j * fan_out + k]
        pos += fan_in * fan_out
        for k in range(fan_out):
            dst[k] += params[pos + k]
            if i < n_layers - 1:
                if activation == 0:
                    if dst[k] < 0.0:
                        dst[k] = 0.0
                elif activation == 1:
                    if not dst[k] > 0.0:
                        dst[k] = LEAK * dst[k]
                else:
                    dst[k] = tanh(dst[k])
        pos += fan_out
        tmp = src
        src = dst
        dst = tmp
    fan_out = sizes[n_layers]
    mx = src[0]
    for k in range(1, fan_out):
        if src[k] > mx:
            mx = src[k]
    total = 0.0
    for k in range(fan_out):
        dst[k] = exp(src[k] - mx)
        total += dst[k]
    cum = 0.0
    for k in range(fan_out - 1):
        cum += dst[k] / total
        if u < cum:
            return <int>k
    return <int>(fan_out - 1)


def cartpole_rollout(params, sizes, int activation, init_state, uniforms, int max_steps):
    """Run one CartPole episode under an MLP softmax policy (see ``_kernels_py``)."""
    cdef const double[::1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef const long long[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef const double[::1] us = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t width = max(sz)
    cdef double[::1] buf_a = np.zeros(width)
    cdef double[::1] buf_b = np.zeros(width)
    obs_arr = np.empty((max_steps, 4))
    act_arr = np.empty(max_steps, dtype=np.int64)
    cdef double[:, ::1] obs = obs_arr
    cdef long long[::1] acts = act_arr
    cdef double x = init_state[0], x_dot = init_state[1]
    cdef double theta = init_state[2], theta_dot = init_state[3]
    cdef double force, costheta, sintheta, temp, thetaacc, xacc
    cdef int a
    cdef Py_ssize_t t = 0
    cdef bint terminated = False
    with nogil:
        while t < max_steps:
            obs[t, 0] = x
            obs[t, 1] = x_dot
            obs[t, 2] = theta
            obs[t, 3] = theta_dot
            buf_a[0] = x
            buf_a[1] = x_dot
            buf_a[2] = theta
            buf_a[3] = theta_dot
            a = _sample_action(p, sz, activation, buf_a, buf_b, us[t])
            acts[t] = a
            force = FORCE_MAG if a == 1 else -FORCE_MAG
            costheta = cos(theta)
            sintheta = sin(theta)
            temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
            thetaacc = (GRAVITY * sintheta - costheta * temp) / (
                HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * costheta * costheta / TOTAL_MASS))
            xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
            x = x + TAU * x_dot
            x_dot = x_dot + TAU * xacc
            theta = theta + TAU * theta_dot
            theta_dot = theta_dot + TAU * thetaacc
            t += 1
            if x < -X_LIMIT or x > X_LIMIT or theta < -THETA_LIMIT or theta > THETA_LIMIT:
                terminated = True
                break
    return obs_arr[:t].copy(), act_arr[:t].copy(), bool(terminated)


cdef inline double _activate(double z, int activation) noexcept nogil:
    if activation == 0:
        return z if z > 0.0 else 0.0
    if activation == 1:
        return z if z > 0.0 else LEAK * z
    return tanh(z)


cdef inline double _activate_grad(double z, double h, int activation) noexcept nogil:
    if activation == 0:
        return 1.0 if z > 0.0 else 0.0
    if activation == 1:
        return 1.0 if z > 0.0 else LEAK
    return 1.0 - h * h


def critic_pass(double[::1] params, sizes, int activation, obs, actions, targets, order,
                Py_ssize_t batch_size, int optimizer, double lr, long long step,
                double[::1] buf1, double[::1] buf2, hyper):
    """One shuffled pass of squared-loss minibatch steps on a linear-head MLP (see ``_kernels_py``).

    Updates ``params``, ``buf1`` and ``buf2`` in place. Returns (summed loss, step).
    """
    cdef const long long[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef const double[:, ::1] X = np.ascontiguousarray(obs, dtype=np.float64)
    cdef const long long[::1] A = np.ascontiguousarray(actions, dtype=np.int64)
    cdef const double[::1] Y = np.ascontiguousarray(targets, dtype=np.float64)
    cdef const long long[::1] idx = np.ascontiguousarray(order, dtype=np.int64)
    cdef double h1 = hyper[0], h2 = hyper[1], h3 = hyper[2]
    cdef Py_ssize_t n_layers = sz.shape[0] - 1
    cdef Py_ssize_t n = idx.shape[0], n_params = params.shape[0]
    cdef Py_ssize_t total = 0, width = 0, i
    for i in range(n_layers + 1):
        total += sz[i]
        if sz[i] > width:
            width = sz[i]
    cdef double[::1] hs = np.zeros(total)
    cdef double[::1] zs = np.zeros(total)
    cdef double[::1] d_a = np.zeros(width)
    cdef double[::1] d_b = np.zeros(width)
    cdef double[::1] grad = np.zeros(n_params)
    cdef long long[::1] hoff = np.zeros(n_layers + 1, dtype=np.int64)
    cdef long long[::1] poff = np.zeros(n_layers + 1, dtype=np.int64)
    for i in range(n_layers):
        hoff[i + 1] = hoff[i] + sz[i]
        poff[i + 1] = poff[i] + sz[i] * sz[i + 1] + sz[i + 1]
    cdef Py_ssize_t start, stop, r, s, j, k, fan_in, fan_out, w0, b0, act
    cdef double loss_sum = 0.0, err, acc, g, nb, unit, c1, c2
    cdef double* P = &params[0]
    cdef double* G = &grad[0]
    cdef double* H = &hs[0]
    cdef double* Z = &zs[0]
    cdef double* delta
    cdef double* nxt
    cdef double* tmp
    cdef double* hin
    cdef double* zout
    cdef const double* wrow
    cdef double* grow
    with nogil:
        start = 0
        while start < n:
            stop = start + batch_size if start + batch_size < n else n
            nb = <double>(stop - start)
            for k in range(n_params):
                G[k] = 0.0
            for r in range(start, stop):
                s = idx[r]
                act = A[s]
                for j in range(sz[0]):
                    H[j] = X[s, j]
                # hidden layers; the output layer only needs the taken action's column
                for i in range(n_layers):
                    fan_in = sz[i]
                    fan_out = sz[i + 1]
                    w0 = poff[i]
                    b0 = w0 + fan_in * fan_out
                    hin = H + hoff[i]
                    zout = Z + hoff[i + 1]
                    if i == n_layers - 1:
                        acc = P[b0 + act]
                        for j in range(fan_in):
                            acc += hin[j] * P[w0 + j * fan_out + act]
                        zout[act] = acc
                        H[hoff[i + 1] + act] = acc
                        break
                    for k in range(fan_out):
                        zout[k] = P[b0 + k]
                    for j in range(fan_in):
                        acc = hin[j]
                        if acc == 0.0:
                            continue
                        wrow = P + w0 + j * fan_out
                        for k in range(fan_out):
                            zout[k] += acc * wrow[k]
                    for k in range(fan_out):
                        H[hoff[i + 1] + k] = _activate(zout[k], activation)
                err = H[hoff[n_layers] + act] - Y[s]
                loss_sum += 0.5 * err * err
                g = err / nb
                # output layer: only column ``act`` receives gradient
                fan_in = sz[n_layers - 1]
                fan_out = sz[n_layers]
                w0 = poff[n_layers - 1]
                b0 = w0 + fan_in * fan_out
                hin = H + hoff[n_layers - 1]
                G[b0 + act] += g
                for j in range(fan_in):
                    G[w0 + j * fan_out + act] += hin[j] * g
                delta = &d_a[0]
                nxt = &d_b[0]
                if n_layers > 1:
                    for j in range(fan_in):
                        unit = _activate_grad(Z[hoff[n_layers - 1] + j], hin[j], activation)
                        delta[j] = P[w0 + j * fan_out + act] * g * unit
                for i in range(n_layers - 2, -1, -1):
                    fan_in = sz[i]
                    fan_out = sz[i + 1]
                    w0 = poff[i]
                    b0 = w0 + fan_in * fan_out
                    hin = H + hoff[i]
                    for k in range(fan_out):
                        G[b0 + k] += delta[k]
                    for j in range(fan_in):
                        acc = hin[j]
                        if acc == 0.0:
                            continue
                        grow = G + w0 + j * fan_out
                        for k in range(fan_out):
                            grow[k] += acc * delta[k]
                    if i > 0:
                        for j in range(fan_in):
                            unit = _activate_grad(Z[hoff[i] + j], hin[j], activation)
                            if unit == 0.0:
                                nxt[j] = 0.0
                                continue
                            acc = 0.0
                            wrow = P + w0 + j * fan_out
                            for k in range(fan_out):
                                acc += wrow[k] * delta[k]
                            nxt[j] = acc * unit
                        tmp = delta
                        delta = nxt
                        nxt = tmp
            step += 1
            if optimizer == 2:
                c1 = 1.0 - h1 ** step
                c2 = 1.0 - h2 ** step
            for k in range(n_params):
                g = -G[k]
                if optimizer == 0:
                    params[k] += lr * g
                elif optimizer == 1:
                    buf1[k] = h1 * buf1[k] + (1.0 - h1) * g * g
                    params[k] += lr * g / (sqrt(buf1[k]) + h3)
                elif optimizer == 2:
                    buf1[k] = h1 * buf1[k] + (1.0 - h1) * g
                    buf2[k] = h2 * buf2[k] + (1.0 - h2) * g * g
                    params[k] += lr * (buf1[k] / c1) / (sqrt(buf2[k] / c2) + h3)
                else:
                    buf1[k] = h1 * buf1[k] + (1.0 - h1) * g * g
                    unit = sqrt(buf2[k] + h3) / sqrt(buf1[k] + h3) * g
                    buf2[k] = h1 * buf2[k] + (1.0 - h1) * unit * unit
                    params[k] += lr * unit
            start = stop
    return loss_sum, step
