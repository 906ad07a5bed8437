"""Experiment harness: seeded training runs, scheme comparisons, and the
human-vehicle-count sweep, with CSV metrics and SVG figures per run.

Directory layout per run: <output_dir>/<scheme>/seed-<n>/ holding
metrics.csv, agent.npz, feedback.jsonl (advisor runs), and manifest.json.
The manifest records the base config and its hash; a (config, seed) pair
fully determines the metrics bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agents import Agent, AgentConfig, ReplayBuffer, Transition, TrainingDiverged, save_agent
from .fusion import FusionConfig, FusionEngine
from .plots import moving_average, render_plot
from .sim import Action, ConfigError, DoneReason, SimConfig, observe, reset, step

#: scheme name -> (agent kind, advisor enabled)
SCHEMES = {
    "d3qn+advisor": ("d3qn", True),
    "ddqn+advisor": ("ddqn", True),
    "dqn+advisor": ("dqn", True),
    "d3qn-no-advisor": ("d3qn", False),
}

METRICS_COLUMNS = ("episode", "return_env", "return_shaped", "steps", "collided",
                   "lane_changes", "aborted_changes", "consistency_rate",
                   "epsilon_or_noise", "loss_mean")

DEFAULT_SWEEP_COUNTS = (5, 15, 25, 35, 45, 55, 65)

#: entropy tag separating evaluation episode streams from training ones
_EVAL_STREAM = 0xE7A1


class RunFailure(RuntimeError):
    """A training or evaluation run aborted; details in the failure manifest."""


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    episodes: int = 3000
    eval_every: int = 50
    eval_episodes: int = 100
    smoothing_window: int = 50
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None

    def validate(self) -> None:
        for section, label in (("sim", "sim"), ("agent", "agent"),
                               ("fusion", "advisor")):
            try:
                getattr(self, section).validate()
            except ConfigError as exc:
                raise ConfigError(_prefix_key(section, label, str(exc))) from None
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.smoothing_window < 1:
            raise ConfigError("smoothing_window must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")


def _prefix_key(section: str, label: str, message: str) -> str:
    first = message.split(" ", 1)[0]
    known = {f.name for f in fields({"sim": SimConfig, "agent": AgentConfig,
                                     "fusion": FusionConfig}[section])}
    if first in known:
        return f"{label}.{message}"
    return f"{label}: {message}"


_TOP_LEVEL_KEYS = ("episodes", "eval_every", "eval_episodes", "smoothing_window",
                   "seeds", "output_dir")


def config_from_dict(obj: dict) -> ExperimentConfig:
    """Strict assembly: unknown keys are rejected with their full path. The
    advisor section spells the advisor kind as "kind"."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    config = ExperimentConfig()
    sections = {"sim": SimConfig, "agent": AgentConfig, "advisor": FusionConfig}
    for key, value in obj.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a JSON object")
            attr = "fusion" if key == "advisor" else key
            base = getattr(config, attr)
            valid = {f.name for f in fields(base)}
            updates = {}
            for sub, subval in value.items():
                name = "advisor" if (key == "advisor" and sub == "kind") else sub
                if name not in valid or (key == "advisor" and sub == "advisor"):
                    raise ConfigError(f"unknown key {key}.{sub}")
                updates[name] = subval
            setattr(config, attr, replace(base, **updates))
        elif key in _TOP_LEVEL_KEYS:
            setattr(config, key, obj[key])
        else:
            raise ConfigError(f"unknown key {key}")
    config.validate()
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    def section(dc) -> dict:
        return {f.name: getattr(dc, f.name) for f in fields(dc)}

    advisor = section(config.fusion)
    advisor = {("kind" if k == "advisor" else k): v for k, v in advisor.items()}
    out = {"sim": section(config.sim), "agent": section(config.agent),
           "advisor": advisor}
    for key in _TOP_LEVEL_KEYS:
        value = getattr(config, key)
        if key == "output_dir" and value is None:
            continue
        out[key] = value
    return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return config_from_dict(obj)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def apply_scheme(config: ExperimentConfig, scheme: str) -> ExperimentConfig:
    """Specialize the base config for one named scheme. Advisor schemes keep
    the configured advisor kind (rule unless overridden) and train on the
    shaped reward; the no-advisor scheme disables fusion entirely."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}")
    kind, advised = SCHEMES[scheme]
    agent = replace(config.agent, kind=kind, use_shaped_reward=advised)
    advisor_kind = (config.fusion.advisor if config.fusion.advisor != "none"
                    else "rule") if advised else "none"
    fusion = replace(config.fusion, advisor=advisor_kind)
    return replace(config, agent=agent, fusion=fusion)


def resolve_output_dir(config: ExperimentConfig) -> str:
    return config.output_dir or os.environ.get("LANEFUSION_OUT") or "runs"


def episode_seed(seed: int, episode: int, stream: int = 0) -> int:
    entropy = [seed, episode] if stream == 0 else [seed, stream, episode]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class EpisodeRecord:
    episode: int
    return_env: float
    return_shaped: float
    steps: int
    collided: int
    lane_changes: int
    aborted_changes: int
    consistency_rate: float | None
    epsilon_or_noise: float
    loss_mean: float


@dataclass
class RunArtifacts:
    scheme: str
    seed: int
    run_dir: str
    metrics_path: str
    checkpoint_path: str
    manifest_path: str
    feedback_path: str | None
    status: str
    records: list


def write_metrics(path, records: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow([
                r.episode, r.return_env, r.return_shaped, r.steps, r.collided,
                r.lane_changes, r.aborted_changes,
                "" if r.consistency_rate is None else r.consistency_rate,
                r.epsilon_or_noise, r.loss_mean,
            ])


def read_metrics(path) -> list:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise RunFailure(f"{path}: unexpected metrics header")
        for row in reader:
            records.append(EpisodeRecord(
                episode=int(row["episode"]),
                return_env=float(row["return_env"]),
                return_shaped=float(row["return_shaped"]),
                steps=int(row["steps"]),
                collided=int(row["collided"]),
                lane_changes=int(row["lane_changes"]),
                aborted_changes=int(row["aborted_changes"]),
                consistency_rate=(None if row["consistency_rate"] == ""
                                  else float(row["consistency_rate"])),
                epsilon_or_noise=float(row["epsilon_or_noise"]),
                loss_mean=float(row["loss_mean"]),
            ))
    return records


def train_run(config: ExperimentConfig, scheme: str, seed: int,
              progress=None) -> RunArtifacts:
    """Full training loop for one (scheme, seed) cell; persists metrics,
    checkpoint, feedback log, and a manifest. A diverging run still writes
    its partial artifacts plus a failure manifest, then raises RunFailure."""
    config.validate()
    run_cfg = apply_scheme(config, scheme)
    out_root = resolve_output_dir(config)
    run_dir = Path(out_root) / scheme / f"seed-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    advised = run_cfg.fusion.advisor != "none"
    feedback_path = run_dir / "feedback.jsonl" if advised else None
    engine = (FusionEngine(run_cfg.fusion, run_cfg.sim, feedback_path)
              if advised else None)
    agent = Agent(run_cfg.agent, seed=seed)
    buffer = ReplayBuffer()
    records: list[EpisodeRecord] = []
    status, error = "completed", None
    t0 = time.time()
    try:
        total_steps = 0
        for episode in range(config.episodes):
            frac = episode / config.episodes
            exploration = agent.exploration_level(frac)
            state = reset(run_cfg.sim, seed=episode_seed(seed, episode))
            ret_env = ret_shaped = 0.0
            steps = lane_changes = aborted = 0
            collided = False
            ep_losses = []
            while True:
                obs = observe(state, run_cfg.sim)
                rec = engine.recommend(state, obs) if engine else None
                bias = engine.selection_bias(rec) if engine else None
                action = agent.select_action(obs, frac, bias)
                result = step(state, action, run_cfg.sim)
                bonus = 0.0
                if engine:
                    bonus, _ = engine.observe_step(episode, steps, state, obs,
                                                   action, rec)
                r_env = result.reward.env_total
                next_obs = observe(result.next_state, run_cfg.sim)
                # every ending is stored terminal: the observation has no
                # progress feature, so bootstrapping through the step cap
                # leaves safe policies with no anchored target anywhere
                # and the value scale drifts without bound
                buffer.add(Transition(obs, action, r_env, r_env + bonus,
                                      next_obs, result.done))
                total_steps += 1
                if total_steps % run_cfg.agent.train_every == 0:
                    loss = agent.train_step(buffer)
                    if loss is not None:
                        ep_losses.append(float(loss))
                ret_env += r_env
                ret_shaped += r_env + bonus
                steps += 1
                if action in (Action.TURN_LEFT, Action.TURN_RIGHT):
                    if result.aborted_lane_change:
                        aborted += 1
                    else:
                        lane_changes += 1
                state = result.next_state
                if result.done:
                    collided = result.done_reason == DoneReason.COLLISION
                    break
            rate = engine.episode_stats.rate if engine else None
            if engine:
                engine.end_episode(episode, ret_env)
            records.append(EpisodeRecord(
                episode=episode, return_env=ret_env, return_shaped=ret_shaped,
                steps=steps, collided=int(collided), lane_changes=lane_changes,
                aborted_changes=aborted, consistency_rate=rate,
                epsilon_or_noise=float(exploration),
                loss_mean=float(np.mean(ep_losses)) if ep_losses else 0.0,
            ))
            if progress is not None and (episode + 1) % config.eval_every == 0:
                progress(scheme, seed, episode + 1, records[-1])
    except TrainingDiverged as exc:
        status, error = "failed", str(exc)
    finally:
        if engine:
            engine.close()

    metrics_path = run_dir / "metrics.csv"
    checkpoint_path = run_dir / "agent.npz"
    write_metrics(metrics_path, records)
    save_agent(checkpoint_path, agent, buffer)
    manifest = {
        "scheme": scheme,
        "seed": seed,
        "status": status,
        "error": error,
        "episodes_completed": len(records),
        "config": config_to_dict(config),
        "config_sha256": config_hash(config),
        "elapsed_s": round(time.time() - t0, 3),
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    artifacts = RunArtifacts(
        scheme=scheme, seed=seed, run_dir=str(run_dir),
        metrics_path=str(metrics_path), checkpoint_path=str(checkpoint_path),
        manifest_path=str(manifest_path),
        feedback_path=str(feedback_path) if feedback_path else None,
        status=status, records=records)
    if status != "completed":
        raise RunFailure(f"{scheme}/seed-{seed}: {error}")
    return artifacts


def eval_agent(agent: Agent, sim_config: SimConfig, episodes: int,
               seed: int) -> list:
    """Greedy zero-noise rollouts; returns the per-episode environment
    returns. No advisor, no exploration, no learning."""
    returns = []
    for ep in range(episodes):
        state = reset(sim_config, seed=episode_seed(seed, ep, stream=_EVAL_STREAM))
        total = 0.0
        while True:
            obs = observe(state, sim_config)
            result = step(state, agent.greedy_action(obs), sim_config)
            total += result.reward.env_total
            state = result.next_state
            if result.done:
                break
        returns.append(total)
    return returns


def _train_cell(args):
    config, scheme, seed = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    return train_run(config, scheme, seed)


def run_grid(config: ExperimentConfig, schemes, seeds, max_workers=None) -> list:
    """Train every (scheme, seed) cell; cells are independent, so they run in
    a process pool when more than one worker is available."""
    cells = [(config, scheme, seed) for scheme in schemes for seed in seeds]
    if max_workers is None:
        max_workers = os.cpu_count() or 1
    if max_workers <= 1 or len(cells) <= 1:
        return [_train_cell(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_train_cell, cells))


def sweep_hv_counts(config: ExperimentConfig, counts=None, schemes=("d3qn+advisor",),
                    seeds=None, mode: str = "retrain", max_workers=1) -> list:
    """Vehicle-count sweep: train (or reuse one transfer policy) per count,
    then score each cell with greedy evaluation episodes.

    Returns one row per (scheme, count) with pooled mean/std of evaluation
    returns across seeds; per-cell failures are recorded, not raised.
    """
    if mode not in ("retrain", "transfer"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    counts = list(counts if counts is not None else DEFAULT_SWEEP_COUNTS)
    seeds = list(seeds if seeds is not None else config.seeds)
    out_root = Path(resolve_output_dir(config)) / "sweep"
    rows = []
    for scheme in schemes:
        transfer_agents = {}
        if mode == "transfer":
            for seed in seeds:
                try:
                    base_cfg = replace(config, output_dir=str(out_root / "transfer-base"))
                    art = train_run(base_cfg, scheme, seed)
                    transfer_agents[seed] = _load_checkpoint(art, config, scheme, seed)
                except Exception as exc:
                    transfer_agents[seed] = exc
        for count in counts:
            cell_returns = []
            cell_error = None
            for seed in seeds:
                sim_cfg = replace(config.sim, human_count=count)
                try:
                    if mode == "retrain":
                        cell_cfg = replace(config, sim=sim_cfg,
                                           output_dir=str(out_root / f"count-{count}"))
                        art = train_run(cell_cfg, scheme, seed)
                        agent = _load_checkpoint(art, config, scheme, seed)
                    else:
                        agent = transfer_agents[seed]
                        if isinstance(agent, Exception):
                            raise agent
                    cell_returns.extend(eval_agent(agent, sim_cfg,
                                                   config.eval_episodes, seed))
                except Exception as exc:
                    cell_error = f"{type(exc).__name__}: {exc}"
            rows.append({
                "scheme": scheme,
                "count": count,
                "mean_return": float(np.mean(cell_returns)) if cell_returns else None,
                "std_return": float(np.std(cell_returns)) if cell_returns else None,
                "eval_episodes": len(cell_returns),
                "error": cell_error,
            })
    out_root.mkdir(parents=True, exist_ok=True)
    csv_path = out_root / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "count", "mean_return", "std_return",
                         "eval_episodes", "error"])
        for row in rows:
            writer.writerow([row["scheme"], row["count"],
                             "" if row["mean_return"] is None else row["mean_return"],
                             "" if row["std_return"] is None else row["std_return"],
                             row["eval_episodes"], row["error"] or ""])
    for scheme in schemes:
        pts = [(r["count"], r["mean_return"]) for r in rows
               if r["scheme"] == scheme and r["mean_return"] is not None]
        if pts:
            render_plot([[m for _, m in pts]], [scheme],
                        out_root / f"sweep-{scheme}.svg",
                        xlabel="human vehicles", ylabel="mean eval return",
                        xs=[[c for c, _ in pts]])
    return rows


def _load_checkpoint(artifacts: RunArtifacts, config: ExperimentConfig,
                     scheme: str, seed: int) -> Agent:
    from .agents import load_agent

    run_cfg = apply_scheme(config, scheme)
    return load_agent(artifacts.checkpoint_path, run_cfg.agent, seed)


def compare_schemes(run_dirs, out_dir, window: int = 200,
                    smoothing_window: int = 50) -> dict:
    """Cross-scheme report over completed runs: final-window training means,
    pairwise percentage gains, and a smoothed convergence plot."""
    groups: dict[str, list] = {}
    hashes = set()
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        if manifest["status"] != "completed":
            raise RunFailure(f"{run_dir}: run did not complete")
        # seeds and output_dir are run identity, not experiment identity;
        # runs trained by separate invocations must still compare
        identity = {k: v for k, v in manifest["config"].items()
                    if k not in ("seeds", "output_dir")}
        hashes.add(json.dumps(identity, sort_keys=True))
        records = read_metrics(run_dir / "metrics.csv")
        groups.setdefault(manifest["scheme"], []).append(records)
    if len(hashes) > 1:
        raise ConfigError("runs built from different base configs cannot be compared")
    for scheme, runs in groups.items():
        if len(runs) < 2:
            raise ConfigError(f"need at least 2 runs per scheme, {scheme} has {len(runs)}")

    means = {}
    spreads = {}
    for scheme, runs in groups.items():
        finals = [float(np.mean([r.return_env for r in records[-window:]]))
                  for records in runs]
        means[scheme] = float(np.mean(finals))
        spreads[scheme] = float(np.std(finals))
    gains = {}
    for a in means:
        for b in means:
            if a != b:
                gains[f"{a} vs {b}"] = 100.0 * (means[a] - means[b]) / abs(means[b])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "mean_return_env", "std_across_seeds",
                         "runs", "window"])
        for scheme in sorted(means):
            writer.writerow([scheme, means[scheme], spreads[scheme],
                             len(groups[scheme]), window])
    lines = ["# Scheme comparison", "",
             f"Mean environment return over the final {window} episodes, "
             f"averaged across seeds.", "",
             "| scheme | mean return | std | runs |",
             "| --- | --- | --- | --- |"]
    for scheme in sorted(means, key=means.get, reverse=True):
        lines.append(f"| {scheme} | {means[scheme]:.3f} | {spreads[scheme]:.3f} "
                     f"| {len(groups[scheme])} |")
    lines += ["", "## Pairwise gains", ""]
    for pair in sorted(gains):
        lines.append(f"- {pair}: {gains[pair]:+.2f}%")
    (out_dir / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    series, labels = [], []
    for scheme in sorted(groups):
        runs = groups[scheme]
        length = min(len(records) for records in runs)
        stacked = np.array([[r.return_env for r in records[:length]]
                            for records in runs])
        series.append(stacked.mean(axis=0))
        labels.append(scheme)
    plot_path = render_plot(series, labels, out_dir / "convergence.svg",
                            xlabel="episode", ylabel="return (env)",
                            smoothing_window=smoothing_window)
    return {"means": means, "spreads": spreads, "gains": gains,
            "report_md": str(out_dir / "report.md"),
            "report_csv": str(out_dir / "report.csv"),
            "plot": plot_path}
