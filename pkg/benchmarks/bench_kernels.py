"""Compare the compiled and numpy kernels on CartPole rollouts and critic passes.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]

Both backends consume the same pre-drawn uniforms, so rollouts must match
exactly; the critic pass must agree to rounding. The script checks this before
timing and prints microseconds per environment step and milliseconds per
critic pass for each backend.
"""

import argparse
import time

import numpy as np

from macpg import kernels
from macpg.nets import CriticNet, MlpSpec, PolicyNet


def time_rollouts(backend, policy, starts, uniforms):
    steps = 0
    t0 = time.perf_counter()
    for s, u in zip(starts, uniforms):
        obs, _, _ = kernels.cartpole_rollout(policy.params.values, np.asarray(policy.spec.sizes),
                                             policy.spec.activation, s, u, len(u), backend=backend)
        steps += len(obs)
    return (time.perf_counter() - t0) / steps * 1e6, steps


def time_critic(backend, critic, data, repeats):
    obs, acts, targets = data
    values = critic.params.values.copy()
    m, v = np.zeros_like(values), np.zeros_like(values)
    order = np.random.default_rng(0).permutation(len(acts))
    t0 = time.perf_counter()
    for _ in range(repeats):
        kernels.critic_pass(values, np.asarray(critic.spec.sizes), critic.spec.activation, obs,
                            acts, targets, order, 64, 2, 1e-3, 0, m, v, (0.9, 0.999, 1e-8),
                            backend=backend)
    return (time.perf_counter() - t0) / repeats * 1e3, values


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=50)
    args = ap.parse_args()
    if kernels.compiled_impl is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    policy = PolicyNet.create(MlpSpec(4, 2, (args.hidden,)), rng)
    starts = rng.uniform(-0.05, 0.05, size=(args.repeats * 5, 4))
    uniforms = rng.random((len(starts), 200))
    for s, u in zip(starts[:5], uniforms[:5]):
        a = kernels.cartpole_rollout(policy.params.values, np.asarray(policy.spec.sizes), "relu",
                                     s, u, 200, backend="python")
        b = kernels.cartpole_rollout(policy.params.values, np.asarray(policy.spec.sizes), "relu",
                                     s, u, 200, backend="cython")
        assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0]), "rollouts differ"

    critic = CriticNet.create(MlpSpec(4, 2, (args.hidden,), head="linear"), rng)
    n = 2000
    data = (rng.normal(size=(n, 4)), rng.integers(0, 2, n), rng.normal(size=n))

    print(f"policy/critic hidden width {args.hidden}")
    rows = {}
    for backend in ("python", "cython"):
        us, steps = time_rollouts(backend, policy, starts, uniforms)
        ms, values = time_critic(backend, critic, data, args.repeats)
        rows[backend] = (us, ms, values)
        print(f"{backend:>7}: rollout {us:8.2f} us/step ({steps} steps)   "
              f"critic pass {ms:8.3f} ms ({n} samples, batch 64)")
    diff = np.max(np.abs(rows["python"][2] - rows["cython"][2]))
    print(f"speedup: rollout x{rows['python'][0] / rows['cython'][0]:.1f}, "
          f"critic x{rows['python'][1] / rows['cython'][1]:.1f}; "
          f"critic parameter difference after {args.repeats} passes {diff:.1e}")


if __name__ == "__main__":
    main()
