"""Rollout kernel selection: compiled extension when built, numpy fallback otherwise.

Set ``MACPG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

ACTIVATION_CODES = {"relu": _kernels_py.RELU, "leaky_relu": _kernels_py.LEAKY_RELU,
                    "tanh": _kernels_py.TANH}

python_impl = _kernels_py
compiled_impl = None
if not os.environ.get("MACPG_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_impl
    except ImportError:
        compiled_impl = None

impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if impl is compiled_impl else "python"


def cartpole_rollout(params, sizes, activation, init_state, uniforms, max_steps, backend=None):
    mod = {"cython": compiled_impl, "python": python_impl, None: impl}[backend]
    if mod is None:
        raise RuntimeError("compiled kernel not available; build with `pip install -e .`")
    code = ACTIVATION_CODES[activation] if isinstance(activation, str) else int(activation)
    return mod.cartpole_rollout(params, sizes, code, init_state, uniforms, max_steps)


def critic_pass(params, sizes, activation, obs, actions, targets, order, batch_size,
                optimizer, lr, step, buf1, buf2, hyper, backend=None):
    """One minibatch pass of critic regression; see ``_kernels_py.critic_pass``."""
    mod = {"cython": compiled_impl, "python": python_impl, None: impl}[backend]
    if mod is None:
        raise RuntimeError("compiled kernel not available; build with `pip install -e .`")
    code = ACTIVATION_CODES[activation] if isinstance(activation, str) else int(activation)
    return mod.critic_pass(params, sizes, code, obs, actions, targets, order, int(batch_size),
                           int(optimizer), float(lr), int(step), buf1, buf2, tuple(hyper))
