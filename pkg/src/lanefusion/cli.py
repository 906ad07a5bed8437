"""Command-line front end.

Subcommands: train, eval, sweep, compare, plot, export-scenes. Exit codes:
0 success, 1 usage or config error, 2 run failure.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import TrainingDiverged, load_agent
from .fusion import rule_recommendation, scene_to_text
from .harness import (ExperimentConfig, RunFailure, SCHEMES, apply_scheme,
                      compare_schemes, config_from_dict, eval_agent,
                      load_config, read_metrics, resolve_output_dir, run_grid,
                      episode_seed, sweep_hv_counts, train_run)
from .plots import render_plot
from .sim import ACTION_NAMES, Action, ConfigError, observe, reset, step


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lanefusion",
                     description="Two-lane overtaking RL with advisor fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, action="append",
                       help="run seed; repeatable")
        p.add_argument("--episodes", type=int, help="override episode count")
        p.add_argument("--out", help="output directory (else $LANEFUSION_OUT, else ./runs)")
        p.add_argument("--advisor", choices=["rule", "none", "bridge", "replay"],
                       help="override advisor kind")
        p.add_argument("--bridge-cmd",
                       help="command line of an external advisor process")

    p_train = sub.add_parser("train", help="train one scheme (or several)")
    common(p_train)
    p_train.add_argument("--scheme", action="append", choices=sorted(SCHEMES),
                         help="scheme to run; repeatable (default d3qn+advisor)")
    p_train.add_argument("--workers", type=int, default=1,
                         help="parallel training processes")

    p_eval = sub.add_parser("eval", help="greedy evaluation of a finished run")
    p_eval.add_argument("--run", required=True,
                        help="run directory holding agent.npz and manifest.json")
    p_eval.add_argument("--episodes", type=int, help="evaluation episode count")
    p_eval.add_argument("--seed", type=int, default=0)

    p_sweep = sub.add_parser("sweep", help="vehicle-count sweep")
    common(p_sweep)
    p_sweep.add_argument("--counts", type=_int_list,
                         help="comma-separated human vehicle counts")
    p_sweep.add_argument("--scheme", action="append", choices=sorted(SCHEMES))
    p_sweep.add_argument("--sweep-mode", choices=["retrain", "transfer"],
                         default="retrain")

    p_cmp = sub.add_parser("compare", help="cross-scheme report from finished runs")
    p_cmp.add_argument("runs", nargs="+", help="run directories")
    p_cmp.add_argument("--out", required=True, help="report output directory")
    p_cmp.add_argument("--window", type=int, default=200,
                       help="final episodes averaged per run")
    p_cmp.add_argument("--smooth", type=int, default=50,
                       help="plot smoothing window")

    p_plot = sub.add_parser("plot", help="render a metric column from metrics.csv files")
    p_plot.add_argument("metrics", nargs="+", help="metrics.csv paths")
    p_plot.add_argument("--out", required=True, help="SVG output path")
    p_plot.add_argument("--column", default="return_env")
    p_plot.add_argument("--labels", help="comma-separated legend labels")
    p_plot.add_argument("--smooth", type=int, default=50)

    p_exp = sub.add_parser("export-scenes",
                           help="emit JSON-lines scene samples for external advisors")
    p_exp.add_argument("--count", type=int, default=1000)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out", help="output path (default stdout)")
    p_exp.add_argument("--config", help="JSON config file")
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "episodes", None):
        config = replace(config, episodes=args.episodes)
    if getattr(args, "seed", None):
        config = replace(config, seeds=list(args.seed))
    if getattr(args, "out", None):
        config = replace(config, output_dir=args.out)
    fusion = config.fusion
    if getattr(args, "bridge_cmd", None):
        fusion = replace(fusion, bridge_cmd=shlex.split(args.bridge_cmd),
                         advisor="bridge")
    if getattr(args, "advisor", None):
        fusion = replace(fusion, advisor=args.advisor)
    config = replace(config, fusion=fusion)
    config.validate()
    return config


def _progress(scheme, seed, done, record):
    print(f"[{scheme} seed={seed}] episode {done}: "
          f"return_env={record.return_env:.1f} steps={record.steps} "
          f"loss={record.loss_mean:.4f}", flush=True)


def _cmd_train(args) -> int:
    config = _load(args)
    schemes = args.scheme or ["d3qn+advisor"]
    if args.workers > 1 and (len(schemes) * len(config.seeds)) > 1:
        results = run_grid(config, schemes, config.seeds, max_workers=args.workers)
    else:
        results = [train_run(config, scheme, seed, progress=_progress)
                   for scheme in schemes for seed in config.seeds]
    for art in results:
        final = art.records[-1].return_env if art.records else float("nan")
        print(f"done {art.scheme} seed={art.seed}: {len(art.records)} episodes, "
              f"final return_env={final:.1f} -> {art.run_dir}")
    return 0


def _cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    config = config_from_dict(manifest["config"])
    run_cfg = apply_scheme(config, manifest["scheme"])
    agent = load_agent(run_dir / "agent.npz", run_cfg.agent, seed=args.seed)
    episodes = args.episodes or config.eval_episodes
    returns = eval_agent(agent, run_cfg.sim, episodes, args.seed)
    summary = {"run": str(run_dir), "episodes": episodes,
               "mean_return_env": float(np.mean(returns)),
               "std_return_env": float(np.std(returns)),
               "min_return_env": float(np.min(returns)),
               "max_return_env": float(np.max(returns))}
    (run_dir / "eval.json").write_text(json.dumps(summary, indent=2) + "\n",
                                       encoding="utf-8")
    print(f"{manifest['scheme']} seed={manifest['seed']}: "
          f"mean={summary['mean_return_env']:.2f} "
          f"std={summary['std_return_env']:.2f} over {episodes} episodes")
    return 0


def _cmd_sweep(args) -> int:
    config = _load(args)
    rows = sweep_hv_counts(config, counts=args.counts,
                           schemes=args.scheme or ["d3qn+advisor"],
                           seeds=config.seeds, mode=args.sweep_mode)
    failed = [r for r in rows if r["error"]]
    for row in rows:
        mean = "n/a" if row["mean_return"] is None else f"{row['mean_return']:.2f}"
        note = f"  [{row['error']}]" if row["error"] else ""
        print(f"{row['scheme']} count={row['count']}: mean={mean}{note}")
    out_root = Path(resolve_output_dir(config)) / "sweep"
    print(f"sweep table -> {out_root / 'sweep.csv'}")
    return 2 if failed else 0


def _cmd_compare(args) -> int:
    report = compare_schemes(args.runs, args.out, window=args.window,
                             smoothing_window=args.smooth)
    for scheme in sorted(report["means"], key=report["means"].get, reverse=True):
        print(f"{scheme}: {report['means'][scheme]:.3f}")
    for pair in sorted(report["gains"]):
        print(f"{pair}: {report['gains'][pair]:+.2f}%")
    print(f"report -> {report['report_md']}")
    return 0


def _cmd_plot(args) -> int:
    labels = (args.labels.split(",") if args.labels
              else [str(Path(p).parent.name or p) for p in args.metrics])
    series = []
    for path in args.metrics:
        records = read_metrics(path)
        if not records:
            raise RunFailure(f"{path}: no episodes recorded")
        if not hasattr(records[0], args.column):
            raise UsageError(f"unknown metric column {args.column!r}")
        series.append([getattr(r, args.column) or 0.0 for r in records])
    out = render_plot(series, labels, args.out, ylabel=args.column,
                      smoothing_window=args.smooth)
    print(f"figure -> {out}")
    return 0


def export_scenes(config: ExperimentConfig, count: int, seed: int, fh) -> None:
    """Write `count` JSON-lines scene samples: the observation vector, its
    text rendering, and the built-in rule recommendation for parity checks.
    States are drawn by resetting and rolling a random number of random
    actions, skipping terminal states."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        state = reset(config.sim, seed=episode_seed(seed, i))
        for _ in range(int(rng.integers(0, 40))):
            result = step(state, Action(int(rng.integers(0, 6))), config.sim)
            if result.done:
                break
            state = result.next_state
        obs = observe(state, config.sim)
        rec = rule_recommendation(obs, config.sim)
        line = json.dumps({
            "id": i,
            "obs": [float(x) for x in obs],
            "scene_text": scene_to_text(state, config.sim),
            "rule_action": ACTION_NAMES[rec.action],
            "rule_confidence": rec.confidence,
        }, ensure_ascii=False)
        fh.write(line + "\n")


def _cmd_export_scenes(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            export_scenes(config, args.count, args.seed, fh)
        print(f"{args.count} scenes -> {args.out}", file=sys.stderr)
    else:
        export_scenes(config, args.count, args.seed, sys.stdout)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
    "plot": _cmd_plot,
    "export-scenes": _cmd_export_scenes,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunFailure, TrainingDiverged, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
