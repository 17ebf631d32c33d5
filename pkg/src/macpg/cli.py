"""Command-line entry point: ``macpg <command> [--config FILE] [--out DIR] ...``.

Commands
  train           train one config for each seed and save the run records
  bench           several estimators x several trials, summary table + curves
  variance-study  estimator variance on a tabular MDP across policy entropy levels
  bias-study      estimator means against the exact gradient for a grid of critics
  sweep           hyperparameter grid, ranked by late-training return
  plot            SVG learning curves from saved per-episode CSVs

Exit codes: 0 success, 2 bad config or input, 3 some runs diverged
(their partial results are still written), 4 file system error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .envs import as_tabular, make_env, reference_chain
from .estimators import EstimatorKind
from .io import atomic_write_text
from .mdp import load_mdp
from .oracle import (TabularPolicy, fmt, jensen_check, measure_estimator, solve_q,
                     stats_to_csv)
from .plotting import learning_curve_svg, moving_average
from .trainer import EPISODE_CSV_COLUMNS, TrainConfig, train

log = logging.getLogger("macpg")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUT_ENV_VAR = "MACPG_OUT"
DEFAULT_OUT = "macpg-out"
FINAL_FRACTION = 0.1
SCHEMA_VERSION = 1

DEFAULT_CONFIGS = {
    "train": "train.json",
    "bench": "cartpole_bench.json",
    "variance-study": "variance_study.json",
    "bias-study": "bias_study.json",
    "sweep": "sweep.json",
}


class ConfigError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    """``"0-3,7"`` -> [0, 1, 2, 3, 7]."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise ConfigError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def load_config(command: str, path) -> dict:
    if path is None:
        text = (resources.files("macpg") / "data" / DEFAULT_CONFIGS[command]).read_text()
    else:
        text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg.pop("schema", None)
    cfg.pop("version", None)
    cfg.pop("comment", None)
    return cfg


def output_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT)


def write_manifest(out: Path, command: str, config: dict, seeds, extra=None) -> None:
    doc = {"schema": "macpg-manifest", "version": SCHEMA_VERSION, "command": command,
           "config": config, "seeds": list(seeds), "kernel_backend": kernels.BACKEND}
    doc.update(extra or {})
    atomic_write_text(out / "manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def final_window(n_episodes: int) -> int:
    return max(1, math.ceil(FINAL_FRACTION * n_episodes))


def _train_config(base: dict, **overrides) -> TrainConfig:
    d = copy.deepcopy(base)
    d.update(overrides)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _run_one(cfg_dict: dict):
    return train(TrainConfig.from_dict(cfg_dict))


def run_trials(configs: list[TrainConfig], workers: int) -> list:
    """Train every config; results come back in input order regardless of ``workers``."""
    dicts = [c.to_dict() for c in configs]
    if workers > 1 and len(dicts) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_one, dicts))
    return [_run_one(d) for d in dicts]


# -- train / bench / sweep ---------------------------------------------------------

def cmd_train(args, cfg: dict) -> int:
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.get("seed", 0)]
    configs = [_train_config(cfg, seed=s) for s in seeds]
    out = output_dir(args.out)
    records = run_trials(configs, args.workers)
    for rec in records:
        rec.save(out)
        log.info("%s: mean return %.2f over %d episodes%s", rec.stem(), rec.returns.mean(),
                 rec.n_episodes, " (diverged)" if rec.failed else "")
    write_manifest(out, "train", configs[0].to_dict(), seeds)
    return EXIT_DIVERGED if any(r.failed for r in records) else EXIT_OK


def curve_csv(records) -> str:
    """Per-episode cross-trial mean and stderr over the trials that reached that episode."""
    n = max(r.n_episodes for r in records)
    rows = []
    for i in range(n):
        vals = [r.returns[i] for r in records if r.n_episodes > i]
        m, se = mean_stderr(vals)
        rows.append([i, fmt(m), fmt(se), len(vals)])
    return rows_to_csv(("episode", "mean", "stderr", "n_trials"), rows)


def summarize(records) -> dict:
    complete = [r for r in records if not r.failed]
    m, se = mean_stderr([r.returns.mean() for r in complete])
    fm, fse = mean_stderr([r.returns[-final_window(r.n_episodes):].mean() for r in complete])
    return {"n_trials": len(records), "n_failed": len(records) - len(complete),
            "mean": m, "stderr": se, "final_mean": fm, "final_stderr": fse}


SUMMARY_COLUMNS = ("estimator", "env", "n_trials", "n_failed", "mean_return", "stderr",
                   "final10_mean", "final10_stderr")


def cmd_bench(args, cfg: dict) -> int:
    try:
        estimators = [EstimatorKind.parse(e).value for e in cfg["estimators"]]
        base = cfg["base"]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bench config needs 'estimators' and 'base': {exc}") from exc
    if len(estimators) < 1:
        raise ConfigError("bench needs at least one estimator")
    seeds = parse_seeds(args.seeds) if args.seeds else list(range(int(cfg.get("trials", 20))))
    configs = [_train_config(base, estimator=e, seed=s) for e in estimators for s in seeds]
    out = output_dir(args.out)
    records = run_trials(configs, args.workers)
    env_kind = configs[0].env.get("kind", "env")
    rows, text = [], []
    for j, est in enumerate(estimators):
        recs = records[j * len(seeds):(j + 1) * len(seeds)]
        for r in recs:
            r.save(out / "runs")
        atomic_write_text(out / "curves" / f"{est}_{env_kind}.csv", curve_csv(recs))
        s = summarize(recs)
        rows.append([est, env_kind, s["n_trials"], s["n_failed"], fmt(s["mean"]), fmt(s["stderr"]),
                     fmt(s["final_mean"]), fmt(s["final_stderr"])])
        flag = f"  ({s['n_failed']} of {s['n_trials']} trials diverged)" if s["n_failed"] else ""
        text.append(f"| {est} | {s['mean']:.1f} ± {s['stderr']:.1f} |{flag}")
    atomic_write_text(out / "summary.csv", rows_to_csv(SUMMARY_COLUMNS, rows))
    table = [f"{env_kind}: mean return over all trials and episodes ± stderr across trials", "",
             "| estimator | return |", "|---|---|"] + text
    atomic_write_text(out / "summary.md", "\n".join(table) + "\n")
    write_manifest(out, "bench", cfg, seeds)
    print("\n".join(table))
    return EXIT_DIVERGED if any(r.failed for r in records) else EXIT_OK


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


SWEEP_COLUMNS = ("rank", "cell", "params", "n_trials", "n_failed", "final10_mean",
                 "final10_stderr", "mean_return", "stderr")


def cmd_sweep(args, cfg: dict) -> int:
    try:
        base, grid = cfg["base"], cfg["grid"]
    except KeyError as exc:
        raise ConfigError(f"sweep config needs 'base' and 'grid': missing {exc}") from exc
    if not isinstance(grid, dict) or not grid or not all(isinstance(v, list) and v
                                                         for v in grid.values()):
        raise ConfigError("sweep grid must map parameter names to nonempty lists")
    keys = sorted(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    seeds = parse_seeds(args.seeds) if args.seeds else list(range(int(cfg.get("trials", 10))))
    configs = []
    for cell in cells:
        d = copy.deepcopy(base)
        for k, v in cell.items():
            _set_dotted(d, k, v)
        configs.extend(_train_config(d, seed=s) for s in seeds)
    out = output_dir(args.out)
    records = run_trials(configs, args.workers)
    results = []
    for i, cell in enumerate(cells):
        recs = records[i * len(seeds):(i + 1) * len(seeds)]
        for r in recs:
            r.save(out / "cells" / f"cell{i:03d}")
        results.append((i, cell, summarize(recs)))
    ranked = sorted(results, key=lambda t: (-np.nan_to_num(t[2]["final_mean"], nan=-np.inf), t[0]))
    rows = [[rank + 1, i, json.dumps(cell, sort_keys=True), s["n_trials"], s["n_failed"],
             fmt(s["final_mean"]), fmt(s["final_stderr"]), fmt(s["mean"]), fmt(s["stderr"])]
            for rank, (i, cell, s) in enumerate(ranked)]
    atomic_write_text(out / "ranking.csv", rows_to_csv(SWEEP_COLUMNS, rows))
    write_manifest(out, "sweep", cfg, seeds, {"cells": cells})
    for r in rows[:5]:
        print(f"#{r[0]} cell {r[1]} {r[2]}: final-10% return {float(r[5]):.1f} ± {float(r[6]):.1f}")
    return EXIT_DIVERGED if any(r.failed for r in records) else EXIT_OK


# -- tabular studies ----------------------------------------------------------------

def study_mdp(cfg: dict):
    spec = cfg.get("mdp")
    if spec is None or spec == "chain5":
        return reference_chain()
    if isinstance(spec, str):
        return load_mdp(spec)
    if isinstance(spec, dict):
        try:
            return as_tabular(make_env(**spec))
        except TypeError as exc:
            raise ConfigError(f"studies need a tabular environment: {exc}") from exc
    raise ConfigError("'mdp' must be null, 'chain5', a file path or an env spec")


def mixed_policy(mdp, level: float) -> TabularPolicy:
    """(1 - level) * greedy-on-Q^uniform + level * uniform; level 0 is deterministic."""
    if not 0.0 <= level <= 1.0:
        raise ConfigError(f"entropy level {level} outside [0, 1]")
    S, A = mdp.n_states, mdp.n_actions
    q = solve_q(mdp, TabularPolicy.uniform(S, A))[1]
    greedy = np.eye(A)[q.argmax(axis=1)]
    return TabularPolicy((1.0 - level) * greedy + level / A)


def _entropy_rows(p: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.mean(-np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)))


def cmd_variance_study(args, cfg: dict) -> int:
    mdp = study_mdp(cfg)
    estimators = [EstimatorKind.parse(e) for e in cfg.get("estimators", ["AC", "MAC"])]
    levels = [float(x) for x in cfg.get("levels", [0.0, 0.25, 0.5, 0.75, 1.0])]
    batch_size = int(cfg.get("batch_size", 16))
    n_batches = int(cfg.get("n_batches", 100_000))
    sampling = cfg.get("sampling", "exact")
    seeds = parse_seeds(args.seeds) if args.seeds else [int(cfg.get("seed", 0))]
    out = output_dir(args.out)

    stat_text, totals, jensen_rows = [], [], []
    for level in levels:
        policy = mixed_policy(mdp, level)
        q = solve_q(mdp, policy)[1]
        reports = [jensen_check(mdp, policy, q, c) for c in range(mdp.n_states * mdp.n_actions)]
        strict = any(bool(np.any(r.strict)) for r in reports)
        for r in reports:
            for s in range(mdp.n_states):
                jensen_rows.append([fmt(level), r.component, s, fmt(r.second_moment[s]),
                                    fmt(r.y[s] ** 2), fmt(r.margin[s]), int(r.strict[s])])
        for seed in seeds:
            stats = [measure_estimator(mdp, policy, q, k, batch_size, n_batches, seed, sampling,
                                       workers=args.workers) for k in estimators]
            text = stats_to_csv(stats, {"level": fmt(level), "sampling": sampling})
            stat_text.append(text if not stat_text else text.split("\n", 1)[1])
            ref = next((s for s in stats if s.estimator_kind is EstimatorKind.AC), None)
            for st in stats:
                reduction = (1 - st.total_variance / ref.total_variance
                             if ref is not None and ref.total_variance > 0 else float("nan"))
                totals.append([fmt(level), fmt(_entropy_rows(policy.action_probs)),
                               st.estimator_kind.value, seed, n_batches, batch_size,
                               fmt(st.total_variance), fmt(st.total_variance_se),
                               fmt(reduction), int(strict)])
    atomic_write_text(out / "variance.csv", "".join(stat_text))
    atomic_write_text(out / "variance_totals.csv", rows_to_csv(
        ("level", "entropy", "estimator", "seed", "n_batches", "batch_size", "total_variance",
         "total_variance_se", "reduction_vs_AC", "jensen_strict"), totals))
    atomic_write_text(out / "jensen.csv", rows_to_csv(
        ("level", "component", "state", "second_moment", "mean_squared", "margin", "strict"),
        jensen_rows))
    write_manifest(out, "variance-study", cfg, seeds)
    for row in totals:
        print(f"level {row[0]:>5} {row[2]:<7} total variance {float(row[6]):.6g} "
              f"(se {float(row[7]):.2g}) reduction vs AC {float(row[8]):.3f}")
    return EXIT_OK


def study_policy(cfg: dict, mdp) -> TabularPolicy:
    spec = cfg.get("policy", {"kind": "uniform"})
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    if kind == "random_logits":
        rng = np.random.default_rng(spec.get("seed", 0))
        return TabularPolicy.from_logits(spec.get("scale", 1.0)
                                         * rng.normal(size=(mdp.n_states, mdp.n_actions)))
    if kind == "mixed":
        return mixed_policy(mdp, float(spec.get("level", 1.0)))
    raise ConfigError(f"unknown policy kind {kind!r}")


BIAS_COLUMNS = ("cell", "noise", "shift", "estimator", "seed", "n_batches", "batch_size",
                "bias_norm", "max_abs_bias_over_se", "mean_se_norm")
DIFF_COLUMNS = ("cell", "noise", "shift", "component", "ac_minus_mac", "combined_se", "ci_low",
                "ci_high", "within_4se")


def cmd_bias_study(args, cfg: dict) -> int:
    mdp = study_mdp(cfg)
    policy = study_policy(cfg, mdp)
    estimators = [EstimatorKind.parse(e) for e in cfg.get("estimators", ["AC", "MAC"])]
    noise = [float(x) for x in cfg.get("noise", [0.0, 0.1, 0.5])]
    shifts = [float(x) for x in cfg.get("shifts", [0.0, 1.0])]
    batch_size = int(cfg.get("batch_size", 16))
    n_batches = int(cfg.get("n_batches", 20_000))
    seeds = parse_seeds(args.seeds) if args.seeds else [int(cfg.get("seed", 0))]
    out = output_dir(args.out)
    q_true = solve_q(mdp, policy)[1]
    noise_rng = np.random.default_rng(int(cfg.get("noise_seed", 0)))
    perturb = noise_rng.normal(size=q_true.shape)

    stat_text, rows, diffs = [], [], []
    for cell, (sigma, shift) in enumerate(itertools.product(noise, shifts)):
        q_hat = q_true + sigma * perturb + shift
        for seed in seeds:
            stats = {k: measure_estimator(mdp, policy, q_hat, k, batch_size, n_batches, seed,
                                          workers=args.workers) for k in estimators}
            text = stats_to_csv(stats.values(), {"cell": cell, "noise": fmt(sigma),
                                                 "shift": fmt(shift)})
            stat_text.append(text if not stat_text else text.split("\n", 1)[1])
            for k, st in stats.items():
                with np.errstate(divide="ignore", invalid="ignore"):
                    z = np.where(st.mean_se > 0, np.abs(st.bias) / st.mean_se,
                                 np.where(np.abs(st.bias) > 0, np.inf, 0.0))
                rows.append([cell, fmt(sigma), fmt(shift), k.value, seed, n_batches, batch_size,
                             fmt(float(np.linalg.norm(st.bias))), fmt(float(z.max())),
                             fmt(float(np.linalg.norm(st.mean_se)))])
            ac, mac = stats.get(EstimatorKind.AC), stats.get(EstimatorKind.MAC)
            if ac is not None and mac is not None:
                se = np.hypot(ac.mean_se, mac.mean_se)
                d = ac.mean - mac.mean
                for c in range(len(d)):
                    diffs.append([cell, fmt(sigma), fmt(shift), c, fmt(d[c]), fmt(se[c]),
                                  fmt(d[c] - 1.96 * se[c]), fmt(d[c] + 1.96 * se[c]),
                                  int(abs(d[c]) <= 4 * se[c])])
    atomic_write_text(out / "bias_components.csv", "".join(stat_text))
    atomic_write_text(out / "bias.csv", rows_to_csv(BIAS_COLUMNS, rows))
    atomic_write_text(out / "bias_differences.csv", rows_to_csv(DIFF_COLUMNS, diffs))
    write_manifest(out, "bias-study", cfg, seeds)
    for r in rows:
        print(f"cell {r[0]} noise {float(r[1]):g} shift {float(r[2]):g} {r[3]:<13} "
              f"|bias| {float(r[7]):.4g}")
    return EXIT_OK


# -- plot --------------------------------------------------------------------------

KNOWN_ESTIMATORS = sorted((k.value for k in EstimatorKind), key=len, reverse=True)


def read_episode_csvs(run_dir: Path) -> dict:
    """{env: {estimator: [returns per trial]}} from ``*.episodes.csv`` files."""
    files = sorted(run_dir.rglob("*.episodes.csv"))
    if not files:
        raise FileNotFoundError(f"no *.episodes.csv files under {run_dir}")
    groups: dict = {}
    for f in files:
        stem = f.name[:-len(".episodes.csv")]
        head, _, seed = stem.rpartition("_seed")
        est = next((k for k in KNOWN_ESTIMATORS if head.startswith(k + "_")), None)
        if est is None or not seed.isdigit():
            raise ConfigError(f"unexpected run file name {f.name}")
        env = head[len(est) + 1:]
        with open(f, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != EPISODE_CSV_COLUMNS:
                raise ConfigError(f"{f.name}: expected columns {EPISODE_CSV_COLUMNS}, got {header}")
            returns = [float(row[1]) for row in reader]
        if not returns:
            raise ConfigError(f"{f.name} has no episodes")
        groups.setdefault(env, {}).setdefault(est, []).append(np.array(returns))
    return groups


def cmd_plot(args, cfg: dict) -> int:
    run_dir = Path(args.runs)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    out = Path(args.out) if args.out else run_dir / "plots"
    groups = read_episode_csvs(run_dir)
    for env, by_est in sorted(groups.items()):
        series = {}
        for est, trials in by_est.items():
            lengths = {len(t) for t in trials}
            if len(lengths) != 1:
                raise ConfigError(f"{est} on {env}: trials have different lengths {sorted(lengths)}")
            arr = np.vstack(trials)
            if args.smooth > 1:
                arr = np.vstack([moving_average(t, args.smooth) for t in arr])
            mean = arr.mean(axis=0)
            se = arr.std(axis=0, ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else None
            series[f"{est} (n={len(arr)})"] = (mean, se)
        title = f"{env}: mean return across trials"
        if args.smooth > 1:
            title += f" (trailing mean over {args.smooth} episodes)"
        path = out / f"learning_curves_{env}.svg"
        atomic_write_text(path, learning_curve_svg(series, title))
        print(path)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "bench": cmd_bench, "variance-study": cmd_variance_study,
            "bias-study": cmd_bias_study, "sweep": cmd_sweep, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="macpg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (defaults to the shipped one)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./{DEFAULT_OUT})")
        sp.add_argument("--seeds", help="seed list such as 0-19 or 1,4,9")
        sp.add_argument("--workers", type=int, default=1, help="parallel trials or sampling chunks")
        sp.add_argument("--format", choices=["csv"], default="csv")
        if name == "plot":
            sp.add_argument("--runs", required=True, help="directory holding *.episodes.csv files")
            sp.add_argument("--smooth", type=int, default=1,
                            help="trailing moving-average window (1 = raw per-episode means)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = {} if args.command == "plot" else load_config(args.command, args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"macpg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"macpg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
