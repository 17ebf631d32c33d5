import numpy as np

from macpg.mdp import TabularMdp


def random_mdp(rng: np.random.Generator, max_states=8, max_actions=4, max_gamma=0.95,
               with_terminal=True) -> TabularMdp:
    n_s = int(rng.integers(1, max_states + 1))
    n_a = int(rng.integers(1, max_actions + 1))
    T = rng.random((n_s, n_a, n_s)) ** 3
    T /= T.sum(axis=2, keepdims=True)
    R = rng.normal(size=(n_s, n_a))
    terminal = np.zeros(n_s, dtype=bool)
    if with_terminal and n_s > 1 and rng.random() < 0.5:
        g = n_s - 1
        terminal[g] = True
        T[g] = 0.0
        T[g, :, g] = 1.0
        R[g] = 0.0
    return TabularMdp(T, R, float(rng.uniform(0, max_gamma)), int(rng.integers(n_s)), terminal)


# Lines printed by tests/test_acceptance.py, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
