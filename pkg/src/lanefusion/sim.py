"""Two-lane highway lane-change environment.

A deterministic microscopic simulator: one controlled ego vehicle with a
six-action discrete interface, surrounded by IDM-controlled human drivers
that keep their lane. Rewards combine a collision penalty, a normalized
speed term, a lane-change bonus past slower leaders, and a rightmost-lane
comfort bonus.

Conventions used throughout:

* lane 0 is the rightmost lane, lane 1 the left lane;
* longitudinal positions are meters from the road start, increasing in the
  driving direction;
* a "gap" is always bumper-to-bumper: center distance minus vehicle length.
  Two vehicles in the same lane collide when their center distance is below
  one vehicle length, i.e. when the gap is negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid simulator configuration."""


class PlacementError(RuntimeError):
    """Random vehicle placement failed; the road is too dense."""


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    STRAIGHT = 2
    ACCELERATE = 3
    DECELERATE = 4
    MAINTAIN = 5


#: Canonical wire names, index-aligned with the Action encoding.
ACTION_NAMES = ("TURN_LEFT", "TURN_RIGHT", "STRAIGHT", "ACCELERATE", "DECELERATE", "MAINTAIN")

ACTION_FROM_NAME = {name: Action(i) for i, name in enumerate(ACTION_NAMES)}

#: Observation vector length: ego speed, ego lane, then (gap, relative speed)
#: for same-lane leader/follower and other-lane leader/follower.
OBS_DIM = 10


@dataclass
class SimConfig:
    road_length: float = 3000.0
    lane_count: int = 2
    lane_width: float = 3.5
    human_count: int = 35
    dt: float = 0.25
    max_steps: int = 300
    v_min_target: float = 20.0
    v_max_target: float = 30.0
    accel_mag: float = 2.0
    vehicle_length: float = 5.0
    sensor_range: float = 100.0
    safe_gap: float = 10.0
    rear_ttc_min: float = 2.0
    # a lane change only earns delta2 when it answers a genuinely slow
    # leader: closer than overtake_gap and at least overtake_dv slower
    overtake_gap: float = 50.0
    overtake_dv: float = 3.0
    delta1: float = -15.0
    delta2: float = 10.0
    delta3: float = 2.0
    speed_cap: float = 33.0
    # Granting the rightmost-lane bonus every step is the default reading;
    # set False to grant it only once, at episode end.
    comfort_per_step: bool = True

    def validate(self) -> None:
        if self.road_length <= 0:
            raise ConfigError("road_length must be positive")
        if self.lane_count != 2:
            raise ConfigError("only two-lane roads are supported")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not (self.v_min_target < self.v_max_target <= self.speed_cap):
            raise ConfigError("need v_min_target < v_max_target <= speed_cap")
        if self.delta1 >= 0:
            raise ConfigError("delta1 must be negative")
        if self.delta2 <= 0:
            raise ConfigError("delta2 must be positive")
        if self.overtake_gap <= 0 or self.overtake_dv < 0:
            raise ConfigError("need overtake_gap > 0 and overtake_dv >= 0")
        if self.delta3 < 0:
            raise ConfigError("delta3 must be non-negative")
        if self.human_count < 0:
            raise ConfigError("human_count must be non-negative")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")


@dataclass
class VehicleKinematics:
    id: int
    pos: float
    lane: int
    speed: float
    is_ego: bool = False
    desired_speed: float = 0.0


@dataclass
class SceneState:
    ego: VehicleKinematics
    humans: list[VehicleKinematics]
    step: int
    rng: np.random.Generator = field(repr=False, default=None)

    def rng_state(self):
        return self.rng.bit_generator.state if self.rng is not None else None


class DoneReason(IntEnum):
    NONE = 0
    COLLISION = 1
    ROAD_END = 2
    MAX_STEPS = 3


@dataclass
class RewardBreakdown:
    safety: float
    efficiency_speed: float
    efficiency_lane_change: float
    comfort: float
    shaping_bonus: float = 0.0

    @property
    def env_total(self) -> float:
        return self.safety + self.efficiency_speed + self.efficiency_lane_change + self.comfort


@dataclass
class StepResult:
    next_state: SceneState
    reward: RewardBreakdown
    done: bool
    done_reason: DoneReason
    aborted_lane_change: bool = False


# IDM parameters for the human drivers (Treiber's standard values).
IDM_MAX_ACCEL = 1.5
IDM_COMFORT_DECEL = 2.0
IDM_JAM_DISTANCE = 2.0
IDM_HEADWAY = 1.5
IDM_EXPONENT = 4
IDM_ACCEL_BOUNDS = (-6.0, 1.5)

HUMAN_SPEED_RANGE = (18.0, 26.0)
PLACEMENT_MIN_POS = 50.0
MAX_PLACEMENT_ATTEMPTS = 10_000


def idm_acceleration(gap: float, ego_speed: float, leader_speed: float,
                     desired_speed: float) -> float:
    """Longitudinal acceleration of a human driver.

    ``gap`` is the bumper gap to the leader; pass ``math.inf`` when there is
    no leader. Output is clamped to IDM_ACCEL_BOUNDS.
    """
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = IDM_JAM_DISTANCE + max(
            0.0,
            ego_speed * IDM_HEADWAY
            + ego_speed * (ego_speed - leader_speed)
            / (2.0 * math.sqrt(IDM_MAX_ACCEL * IDM_COMFORT_DECEL)),
        )
        interaction = (s_star / gap) ** 2
    acc = IDM_MAX_ACCEL * (1.0 - (ego_speed / desired_speed) ** IDM_EXPONENT - interaction)
    lo, hi = IDM_ACCEL_BOUNDS
    return max(lo, min(hi, acc))


def vehicles_collide(a: VehicleKinematics, b: VehicleKinematics, vehicle_length: float) -> bool:
    return a.lane == b.lane and abs(a.pos - b.pos) < vehicle_length


def reset(config: SimConfig, seed: int) -> SceneState:
    """Build the initial scene: ego at the road start, humans scattered ahead.

    Humans are placed uniformly over [50 m, road_length] on uniformly random
    lanes, rejection-resampled so that same-lane pairs keep at least two
    vehicle lengths of center distance. The same seed always yields the same
    scene, field for field.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    ego = VehicleKinematics(id=0, pos=0.0, lane=0, speed=config.v_min_target, is_ego=True)

    humans: list[VehicleKinematics] = []
    min_sep = 2.0 * config.vehicle_length
    attempts = 0
    for i in range(config.human_count):
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise PlacementError(
                    f"could not place {config.human_count} vehicles on a "
                    f"{config.road_length:.0f} m road after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            lane = int(rng.integers(0, config.lane_count))
            pos = float(rng.uniform(PLACEMENT_MIN_POS, config.road_length))
            if all(abs(pos - h.pos) >= min_sep for h in humans if h.lane == lane):
                break
        desired = float(rng.uniform(*HUMAN_SPEED_RANGE))
        humans.append(VehicleKinematics(id=i + 1, pos=pos, lane=lane,
                                        speed=desired, desired_speed=desired))
    return SceneState(ego=ego, humans=humans, step=0, rng=rng)


def _leader_of(pos: float, lane: int, others: list[VehicleKinematics]) -> Optional[VehicleKinematics]:
    best = None
    for v in others:
        if v.lane == lane and v.pos > pos and (best is None or v.pos < best.pos):
            best = v
    return best


def _follower_of(pos: float, lane: int, others: list[VehicleKinematics]) -> Optional[VehicleKinematics]:
    best = None
    for v in others:
        if v.lane == lane and v.pos <= pos and (best is None or v.pos > best.pos):
            best = v
    return best


def _gap(front_pos: float, rear_pos: float, vehicle_length: float) -> float:
    return (front_pos - rear_pos) - vehicle_length


def lane_change_safe(state: SceneState, target_lane: int, config: SimConfig) -> bool:
    """Safety predicate for an instantaneous move of the ego into target_lane.

    Requires both the front and rear bumper gaps in the target lane to be at
    least ``safe_gap``, and the rear vehicle to be no faster than the ego or
    far enough that its time-to-collision exceeds ``rear_ttc_min``.
    """
    ego = state.ego
    leader = _leader_of(ego.pos, target_lane, state.humans)
    if leader is not None and _gap(leader.pos, ego.pos, config.vehicle_length) < config.safe_gap:
        return False
    rear = _follower_of(ego.pos, target_lane, state.humans)
    if rear is not None:
        rear_gap = _gap(ego.pos, rear.pos, config.vehicle_length)
        if rear_gap < config.safe_gap:
            return False
        closing = rear.speed - ego.speed
        if closing > 0 and rear_gap / closing < config.rear_ttc_min:
            return False
    return True


def compute_reward(prev: SceneState, action: Action, result_state: SceneState,
                   aborted: bool, collided: bool, config: SimConfig) -> RewardBreakdown:
    """Three-term reward: safety + (speed + lane-change) efficiency + comfort.

    The lane-change bonus requires an executed (non-aborted) lateral move
    answering a slow leader in the pre-change lane: closer than overtake_gap
    and at least overtake_dv slower than ego. Anything looser lets a policy
    farm the bonus by oscillating between lanes inside ordinary traffic. The
    speed term normalizes the post-step ego speed over the target range.
    """
    safety = config.delta1 if collided else 0.0

    span = config.v_max_target - config.v_min_target
    eff_speed = (result_state.ego.speed - config.v_min_target) / span
    eff_speed = max(0.0, min(1.0, eff_speed))
    # single-precision grid: keeps reward totals short enough in the
    # significand that adding a dyadic shaping bonus round-trips exactly
    eff_speed = float(np.float32(eff_speed))

    eff_lane = 0.0
    if action in (Action.TURN_LEFT, Action.TURN_RIGHT) and not aborted:
        leader = _leader_of(prev.ego.pos, prev.ego.lane, prev.humans)
        if leader is not None:
            gap = _gap(leader.pos, prev.ego.pos, config.vehicle_length)
            if (gap < config.overtake_gap
                    and leader.speed - prev.ego.speed <= -config.overtake_dv):
                eff_lane = config.delta2

    comfort = config.delta3 if result_state.ego.lane == 0 else 0.0
    return RewardBreakdown(safety=safety, efficiency_speed=eff_speed,
                           efficiency_lane_change=eff_lane, comfort=comfort)


def step(state: SceneState, action: Action, config: SimConfig) -> StepResult:
    """Advance the scene one tick under the given ego action.

    Order of operations: ego speed/lane update (lane moves are instantaneous
    and only executed when lane_change_safe holds, otherwise treated as
    Straight and flagged aborted), then IDM accelerations for every human
    against the post-move ego, then all positions integrate with the updated
    speeds. Collision, road end, and step-limit checks follow integration.
    """
    action = Action(action)
    prev = state
    ego = replace(state.ego)

    aborted = False
    if action == Action.ACCELERATE:
        ego.speed = min(config.speed_cap, ego.speed + config.accel_mag * config.dt)
    elif action == Action.DECELERATE:
        ego.speed = max(0.0, ego.speed - config.accel_mag * config.dt)
    elif action in (Action.TURN_LEFT, Action.TURN_RIGHT):
        target = ego.lane + (1 if action == Action.TURN_LEFT else -1)
        if 0 <= target < config.lane_count and lane_change_safe(state, target, config):
            ego.lane = target
        else:
            aborted = True
    # STRAIGHT and MAINTAIN leave speed and lane untouched.

    # Humans react to current positions/speeds, with the ego already in its
    # new lane; speeds update before positions (semi-implicit Euler).
    vehicles = [ego] + state.humans
    new_humans: list[VehicleKinematics] = []
    for h in state.humans:
        leader = None
        for v in vehicles:
            if v is h or v.lane != h.lane or v.pos <= h.pos:
                continue
            if leader is None or v.pos < leader.pos:
                leader = v
        if leader is None:
            acc = idm_acceleration(math.inf, h.speed, 0.0, h.desired_speed)
        else:
            gap = _gap(leader.pos, h.pos, config.vehicle_length)
            acc = idm_acceleration(max(gap, 1e-3), h.speed, leader.speed, h.desired_speed)
        speed = max(0.0, min(config.speed_cap, h.speed + acc * config.dt))
        new_humans.append(replace(h, speed=speed))

    ego.pos = ego.pos + ego.speed * config.dt
    for h in new_humans:
        h.pos = h.pos + h.speed * config.dt

    next_state = SceneState(ego=ego, humans=new_humans, step=state.step + 1, rng=state.rng)

    collided = any(vehicles_collide(ego, h, config.vehicle_length) for h in new_humans)
    if collided:
        done_reason = DoneReason.COLLISION
    elif ego.pos >= config.road_length:
        done_reason = DoneReason.ROAD_END
    elif next_state.step >= config.max_steps:
        done_reason = DoneReason.MAX_STEPS
    else:
        done_reason = DoneReason.NONE

    reward = compute_reward(prev, action, next_state, aborted, collided, config)
    return StepResult(next_state=next_state, reward=reward,
                      done=done_reason != DoneReason.NONE, done_reason=done_reason,
                      aborted_lane_change=aborted)


def neighbor_encoding(state: SceneState, lane: int, config: SimConfig) -> tuple[float, float, float, float]:
    """(leader gap, leader rel speed, follower gap, follower rel speed) for a lane.

    Gaps are clamped to [0, sensor_range]; relative speeds are raw. Missing
    vehicles encode as (sensor_range, 0.0).
    """
    ego = state.ego
    leader = _leader_of(ego.pos, lane, state.humans)
    follower = _follower_of(ego.pos, lane, state.humans)
    if leader is None:
        lg, lv = config.sensor_range, 0.0
    else:
        lg = max(0.0, min(config.sensor_range, _gap(leader.pos, ego.pos, config.vehicle_length)))
        lv = leader.speed - ego.speed
    if follower is None:
        fg, fv = config.sensor_range, 0.0
    else:
        fg = max(0.0, min(config.sensor_range, _gap(ego.pos, follower.pos, config.vehicle_length)))
        fv = follower.speed - ego.speed
    return lg, lv, fg, fv


def observe(state: SceneState, config: SimConfig) -> np.ndarray:
    """Normalized 10-dim feature vector; every entry lies in [-1, 1].

    Layout: [ego speed / cap, ego lane, same-lane (leader gap, leader dv),
    same-lane (follower gap, follower dv), other-lane leader pair,
    other-lane follower pair], gaps scaled by sensor range and relative
    speeds by the speed cap, both clamped.
    """
    ego = state.ego
    other = 1 - ego.lane
    slg, slv, sfg, sfv = neighbor_encoding(state, ego.lane, config)
    olg, olv, ofg, ofv = neighbor_encoding(state, other, config)

    def rel(dv: float) -> float:
        return max(-1.0, min(1.0, dv / config.speed_cap))

    sr = config.sensor_range
    return np.array([
        ego.speed / config.speed_cap,
        float(ego.lane),
        slg / sr, rel(slv),
        sfg / sr, rel(sfv),
        olg / sr, rel(olv),
        ofg / sr, rel(ofv),
    ])
