"""Advisor abstraction and the consistency-fusion pipeline.

An advisor looks at the current scene and recommends one of the six driving
actions. The fusion layer compares every executed action against that
recommendation, pays a shaping bonus on agreement, logs a feedback sample on
disagreement, and periodically distills the feedback into per-bucket rule
overrides. Advisors come in four kinds: the built-in rule advisor, a file
replay, an external bridge process, and none (fusion disabled).

The rule advisor reads only the normalized observation vector, never the
raw scene, so an out-of-process advisor receiving the same vector can
reproduce its output exactly.
"""

from __future__ import annotations

import json
import logging
import os
import select
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .sim import ACTION_FROM_NAME, ACTION_NAMES, Action, ConfigError, SceneState, SimConfig

log = logging.getLogger(__name__)

ADVISOR_KINDS = ("rule", "replay", "bridge", "none")
FUSION_MODES = ("shaping", "q-bias")
OVERRIDE_CONFIDENCE = 0.8


class Outcome(Enum):
    AGREE = "agree"
    DISAGREE = "disagree"
    NO_ADVICE = "no_advice"


@dataclass
class AdvisorRecommendation:
    action: int
    confidence: float
    rationale: str = ""
    latency_ms: float = 0.0


@dataclass
class FeedbackSample:
    obs: np.ndarray
    scene_text: str
    executed: int
    recommended: int
    episode: int
    step: int
    episode_return_env: float | None = None


@dataclass
class ConsistencyStats:
    agreements: int = 0
    disagreements: int = 0

    @property
    def rate(self) -> float | None:
        total = self.agreements + self.disagreements
        return self.agreements / total if total else None


@dataclass
class FusionConfig:
    advisor: str = "rule"
    delta_a: float = 1.0
    confidence_threshold: float = 0.5
    mode: str = "shaping"
    q_bias: float = 1.0
    bridge_deadline_ms: float = 50.0
    adapt_threshold: int = 3
    adapt_every: int = 50
    replay_path: str | None = None
    bridge_cmd: list[str] | None = None

    def validate(self) -> None:
        if self.advisor not in ADVISOR_KINDS:
            raise ConfigError(f"unknown advisor kind {self.advisor!r}")
        if self.delta_a < 0:
            raise ConfigError("delta_a must be >= 0")
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0, 1]")
        if self.adapt_threshold < 1:
            raise ConfigError("adapt_threshold must be >= 1")
        if self.advisor == "replay" and not self.replay_path:
            raise ConfigError("replay advisor needs replay_path")
        if self.advisor == "bridge" and not self.bridge_cmd:
            raise ConfigError("bridge advisor needs bridge_cmd")


def scene_to_text(state: SceneState, config: SimConfig) -> str:
    """Deterministic one-line English description of the scene: ego state,
    the four nearest neighbors with gaps and relative speeds, road bounds."""
    from .sim import neighbor_encoding

    ego = state.ego
    lane_name = "right" if ego.lane == 0 else "left"
    parts = [
        f"Ego drives at {ego.speed:.1f} m/s in the {lane_name} lane, "
        f"{ego.pos:.1f} m along a {config.road_length:.0f} m two-lane road."
    ]

    def describe(gap, dv, where):
        if dv < 0:
            motion = f"{-dv:.1f} m/s slower"
        elif dv > 0:
            motion = f"{dv:.1f} m/s faster"
        else:
            motion = "at the same speed"
        return f"Vehicle {gap:.1f} m {where}, {motion}."

    slg, slv, sfg, sfv = neighbor_encoding(state, ego.lane, config)
    olg, olv, ofg, ofv = neighbor_encoding(state, 1 - ego.lane, config)
    sr = config.sensor_range
    parts.append(describe(slg, slv, "ahead in the ego lane")
                 if slg < sr else "There is no vehicle ahead in the ego lane.")
    parts.append(describe(sfg, sfv, "behind in the ego lane")
                 if sfg < sr else "No vehicle behind in the ego lane.")
    parts.append(describe(olg, olv, "ahead in the other lane")
                 if olg < sr else "No vehicle ahead in the other lane.")
    parts.append(describe(ofg, ofv, "behind in the other lane")
                 if ofg < sr else "No vehicle behind in the other lane.")
    return " ".join(parts)


def bucket_of(obs, config: SimConfig) -> tuple[int, int, int]:
    """Discretized-state key: (ego lane, speed tercile over the target range,
    same-lane leader gap bucket {<20 m, 20-50 m, >50 m or none})."""
    obs = np.asarray(obs, dtype=float)
    lane = int(round(obs[1]))
    speed = obs[0] * config.speed_cap
    width = (config.v_max_target - config.v_min_target) / 3.0
    tercile = int(min(2, max(0, (speed - config.v_min_target) // width)))
    gap = obs[2] * config.sensor_range
    gap_bucket = 0 if gap < 20.0 else (1 if gap <= 50.0 else 2)
    return lane, tercile, gap_bucket


def _lane_change_safe_from_obs(obs, config: SimConfig) -> bool:
    """Mirror of the simulator's safety predicate, computed from the other
    lane's observation slots. Gap clamping at the sensor range cannot flip
    the verdict because the closing speed never exceeds the speed cap."""
    front_gap = obs[6] * config.sensor_range
    rear_gap = obs[8] * config.sensor_range
    if front_gap < config.safe_gap or rear_gap < config.safe_gap:
        return False
    closing = obs[9] * config.speed_cap
    if closing > 0 and rear_gap / closing < config.rear_ttc_min:
        return False
    return True


def rule_recommendation(obs, config: SimConfig,
                        overrides: dict | None = None) -> AdvisorRecommendation:
    """Deterministic heuristic advisor over the observation vector.

    Precedence: bucket override, overtake a slow leader when the other lane
    is clear, drift back to the rightmost lane, accelerate on open road,
    otherwise hold speed.
    """
    obs = np.asarray(obs, dtype=float)
    if overrides:
        key = bucket_of(obs, config)
        if key in overrides:
            return AdvisorRecommendation(overrides[key], OVERRIDE_CONFIDENCE,
                                         "feedback override for this situation")
    lane = int(round(obs[1]))
    speed = obs[0] * config.speed_cap
    leader_gap = obs[2] * config.sensor_range
    leader_dv = obs[3] * config.speed_cap
    other_safe = _lane_change_safe_from_obs(obs, config)

    if leader_gap < 50.0 and leader_dv <= -3.0 and other_safe:
        action = Action.TURN_LEFT if lane == 0 else Action.TURN_RIGHT
        return AdvisorRecommendation(action, 0.9,
                                     "slow vehicle ahead and the other lane is clear")
    if lane == 1 and other_safe and obs[7] >= 0.0:
        return AdvisorRecommendation(Action.TURN_RIGHT, 0.6,
                                     "prefer the rightmost lane when it is free")
    if speed < config.v_max_target and leader_gap >= 50.0:
        return AdvisorRecommendation(Action.ACCELERATE, 0.7,
                                     "road ahead is clear, below target speed")
    return AdvisorRecommendation(Action.MAINTAIN, 0.5, "hold the current speed")


class RuleAdvisor:
    """In-process advisor; owns the override table adapted from feedback."""

    def __init__(self, sim_config: SimConfig):
        self.sim_config = sim_config
        self.overrides: dict[tuple[int, int, int], int] = {}

    def recommend(self, state, obs) -> AdvisorRecommendation:
        return rule_recommendation(obs, self.sim_config, self.overrides)

    def close(self) -> None:
        pass


class ReplayAdvisor:
    """Plays back recommendations from a JSON-lines file, one per call."""

    def __init__(self, path):
        self._items = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self._items.append(json.loads(line))
        self._next = 0

    def recommend(self, state, obs) -> AdvisorRecommendation | None:
        if self._next >= len(self._items):
            return None
        item = self._items[self._next]
        self._next += 1
        action = ACTION_FROM_NAME.get(item.get("action"))
        if action is None:
            return None
        return AdvisorRecommendation(action, float(item.get("confidence", 1.0)),
                                     item.get("rationale", ""))

    def close(self) -> None:
        pass


class _LineChannel:
    """Deadline-bounded line reader over a pipe file descriptor."""

    def __init__(self, stream):
        self.fd = stream.fileno()
        self.buf = b""

    def read_line(self, deadline_s: float) -> bytes | None:
        end = time.monotonic() + deadline_s
        while b"\n" not in self.buf:
            remain = end - time.monotonic()
            if remain <= 0:
                return None
            ready, _, _ = select.select([self.fd], [], [], remain)
            if not ready:
                return None
            chunk = os.read(self.fd, 65536)
            if not chunk:
                return None
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line


class BridgeAdvisor:
    """Talks to an external advisor process over newline-delimited JSON.

    Every request carries a strictly increasing id; responses arrive in
    order. A request that misses the deadline degrades to no-advice and the
    stale response is discarded when it eventually lands.
    """

    def __init__(self, cmd: list[str], sim_config: SimConfig,
                 deadline_ms: float = 50.0):
        self.sim_config = sim_config
        self.deadline_ms = deadline_ms
        self.proc = subprocess.Popen(cmd, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)
        self.chan = _LineChannel(self.proc.stdout)
        self.next_id = 0

    def _request(self, payload: dict, deadline_ms: float) -> dict | None:
        rid = self.next_id
        self.next_id += 1
        line = json.dumps({"id": rid, **payload}) + "\n"
        try:
            self.proc.stdin.write(line.encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            log.warning("bridge write failed: %s", exc)
            return None
        end = time.monotonic() + deadline_ms / 1000.0
        while True:
            remain = end - time.monotonic()
            raw = self.chan.read_line(max(remain, 0.0))
            if raw is None:
                log.warning("bridge request %d missed the %.0f ms deadline",
                            rid, deadline_ms)
                return None
            try:
                resp = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                log.warning("bridge sent unparseable response: %s", exc)
                return None
            if resp.get("id") == rid:
                return resp
            # stale answer to a request that already timed out
            if isinstance(resp.get("id"), int) and resp["id"] < rid:
                continue
            log.warning("bridge response id %r does not match request %d",
                        resp.get("id"), rid)
            return None

    def recommend(self, state, obs) -> AdvisorRecommendation | None:
        t0 = time.monotonic()
        resp = self._request({
            "kind": "recommend",
            "scene_text": scene_to_text(state, self.sim_config),
            "obs": [float(x) for x in np.asarray(obs, dtype=float)],
        }, self.deadline_ms)
        if resp is None:
            return None
        if "error" in resp:
            log.warning("bridge error: %s", resp["error"])
            return None
        action = ACTION_FROM_NAME.get(resp.get("action"))
        if action is None:
            log.warning("bridge returned unknown action %r", resp.get("action"))
            return None
        confidence = min(1.0, max(0.0, float(resp.get("confidence", 1.0))))
        return AdvisorRecommendation(action, confidence,
                                     resp.get("rationale", ""),
                                     latency_ms=(time.monotonic() - t0) * 1000.0)

    def send_feedback(self, sample_obj: dict) -> None:
        # ack matters only for pacing; a miss is already logged
        self._request({"kind": "feedback", "sample": sample_obj},
                      self.deadline_ms)

    def close(self) -> None:
        try:
            self._request({"kind": "shutdown"}, self.deadline_ms)
            self.proc.stdin.close()
            self.proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            self.proc.kill()


def make_advisor(fusion_config: FusionConfig, sim_config: SimConfig):
    kind = fusion_config.advisor
    if kind == "none":
        return None
    if kind == "rule":
        return RuleAdvisor(sim_config)
    if kind == "replay":
        return ReplayAdvisor(fusion_config.replay_path)
    if kind == "bridge":
        return BridgeAdvisor(fusion_config.bridge_cmd, sim_config,
                             fusion_config.bridge_deadline_ms)
    raise ConfigError(f"unknown advisor kind {kind!r}")


def compare_actions(executed: int, rec: AdvisorRecommendation | None,
                    confidence_threshold: float = 0.5) -> Outcome:
    if rec is None or rec.confidence < confidence_threshold:
        return Outcome.NO_ADVICE
    return Outcome.AGREE if int(executed) == int(rec.action) else Outcome.DISAGREE


def consistency_bonus(outcome: Outcome, delta_a: float) -> float:
    if delta_a < 0:
        raise ConfigError("delta_a must be >= 0")
    return delta_a if outcome is Outcome.AGREE else 0.0


def serialize_sample(sample: FeedbackSample) -> str:
    return json.dumps({
        "episode": sample.episode,
        "step": sample.step,
        "obs": [float(x) for x in np.asarray(sample.obs, dtype=float)],
        "scene_text": sample.scene_text,
        "executed": ACTION_NAMES[sample.executed],
        "recommended": ACTION_NAMES[sample.recommended],
        "return_env": sample.episode_return_env,
    })


def parse_sample_line(line: str) -> FeedbackSample:
    obj = json.loads(line)
    return FeedbackSample(
        obs=np.array(obj["obs"], dtype=float),
        scene_text=obj["scene_text"],
        executed=ACTION_FROM_NAME[obj["executed"]],
        recommended=ACTION_FROM_NAME[obj["recommended"]],
        episode=int(obj["episode"]),
        step=int(obj["step"]),
        episode_return_env=obj["return_env"],
    )


class FeedbackLog:
    """Disagreement log. Samples buffer until the episode return is known,
    then flush as JSON lines; the full sample list stays available in memory
    for advisor adaptation."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.pending: list[FeedbackSample] = []
        self.samples: list[FeedbackSample] = []
        self.lines_written = 0

    def record(self, sample: FeedbackSample) -> None:
        self.pending.append(sample)

    def end_episode(self, return_env: float) -> list[FeedbackSample]:
        flushed = self.pending
        self.pending = []
        for sample in flushed:
            sample.episode_return_env = return_env
            if self._fh is not None:
                self._fh.write(serialize_sample(sample) + "\n")
            self.lines_written += 1
        if self._fh is not None and flushed:
            self._fh.flush()
        self.samples.extend(flushed)
        return flushed

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def adapt_overrides(samples: list[FeedbackSample], baseline_return: float | None,
                    config: SimConfig, adapt_threshold: int = 3) -> dict:
    """Distill feedback into bucket overrides.

    A bucket earns an override when at least adapt_threshold of its samples
    agree on the executed action and those samples' mean episode return
    beats the baseline (mean return of episodes where the advisor was
    followed at least once). No baseline yet means no overrides.
    """
    if baseline_return is None:
        return {}
    grouped: dict[tuple, dict[int, list[float]]] = {}
    for s in samples:
        if s.episode_return_env is None:
            continue
        key = bucket_of(s.obs, config)
        grouped.setdefault(key, {}).setdefault(s.executed, []).append(
            s.episode_return_env)
    table = {}
    for key, by_action in grouped.items():
        # most frequent qualifying action; ties resolve to the lowest index
        best = None
        for action in sorted(by_action):
            returns = by_action[action]
            if len(returns) < adapt_threshold:
                continue
            if sum(returns) / len(returns) <= baseline_return:
                continue
            if best is None or len(returns) > len(by_action[best]):
                best = action
        if best is not None:
            table[key] = best
    return table


class FusionEngine:
    """Per-run fusion state: advisor, outcome counters, feedback log, and
    the adaptation loop. One instance per training run."""

    def __init__(self, fusion_config: FusionConfig, sim_config: SimConfig,
                 feedback_path=None):
        fusion_config.validate()
        self.config = fusion_config
        self.sim_config = sim_config
        self.advisor = make_advisor(fusion_config, sim_config)
        self.stats = ConsistencyStats()
        self.episode_stats = ConsistencyStats()
        self.feedback = FeedbackLog(feedback_path) if self.advisor else None
        self.agree_episode_returns: list[float] = []
        self._episode_had_agree = False

    @property
    def enabled(self) -> bool:
        return self.advisor is not None

    def recommend(self, state, obs) -> AdvisorRecommendation | None:
        if self.advisor is None:
            return None
        return self.advisor.recommend(state, obs)

    def selection_bias(self, rec: AdvisorRecommendation | None):
        """Q-bias coupling: a vector added to the Q-values during action
        selection only; zero unless the mode asks for it."""
        if self.config.mode != "q-bias" or rec is None:
            return None
        if rec.confidence < self.config.confidence_threshold:
            return None
        bias = np.zeros(len(Action))
        bias[rec.action] = self.config.q_bias
        return bias

    def observe_step(self, episode: int, step: int, state, obs, executed: int,
                     rec: AdvisorRecommendation | None) -> tuple[float, Outcome]:
        """Classify the executed action against the recommendation; returns
        (shaping bonus, outcome). Never touches the environment reward."""
        outcome = compare_actions(executed, rec, self.config.confidence_threshold)
        if outcome is Outcome.AGREE:
            self.stats.agreements += 1
            self.episode_stats.agreements += 1
            self._episode_had_agree = True
        elif outcome is Outcome.DISAGREE:
            self.stats.disagreements += 1
            self.episode_stats.disagreements += 1
            self.feedback.record(FeedbackSample(
                obs=np.array(obs, dtype=float), scene_text=scene_to_text(state, self.sim_config),
                executed=int(executed), recommended=int(rec.action),
                episode=episode, step=step))
        bonus = 0.0
        if self.config.mode == "shaping":
            bonus = consistency_bonus(outcome, self.config.delta_a)
        return bonus, outcome

    def end_episode(self, episode: int, return_env: float) -> None:
        if self.feedback is None:
            return
        flushed = self.feedback.end_episode(return_env)
        if isinstance(self.advisor, BridgeAdvisor):
            for sample in flushed:
                self.advisor.send_feedback(json.loads(serialize_sample(sample)))
        if self._episode_had_agree:
            self.agree_episode_returns.append(return_env)
        self._episode_had_agree = False
        self.episode_stats = ConsistencyStats()
        every = self.config.adapt_every
        if every and (episode + 1) % every == 0:
            self.adapt_now()

    def adapt_now(self) -> None:
        if not isinstance(self.advisor, RuleAdvisor):
            return
        baseline = (sum(self.agree_episode_returns) / len(self.agree_episode_returns)
                    if self.agree_episode_returns else None)
        self.advisor.overrides = adapt_overrides(
            self.feedback.samples, baseline, self.sim_config,
            self.config.adapt_threshold)

    def close(self) -> None:
        if self.feedback is not None:
            self.feedback.close()
        if self.advisor is not None:
            self.advisor.close()
