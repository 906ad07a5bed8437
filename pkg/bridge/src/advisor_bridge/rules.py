"""Deterministic recommendation rules over the driving observation vector.

This is an independent reimplementation of the in-process rule advisor that
ships with the lanefusion package, kept free of any lanefusion import so the
two can be checked against each other. The observation layout is the wire
contract:

    0  ego speed / speed cap
    1  ego lane (0 = rightmost, 1 = leftmost)
    2  same-lane leader gap / sensor range      (1.0 when absent)
    3  same-lane leader relative speed / cap    (negative = slower)
    4  same-lane follower gap / sensor range
    5  same-lane follower relative speed / cap
    6  other-lane leader gap / sensor range
    7  other-lane leader relative speed / cap
    8  other-lane follower gap / sensor range
    9  other-lane follower relative speed / cap (positive = closing)

All constants below mirror the simulator defaults; they are duplicated on
purpose so the bridge stands alone.
"""

from typing import NamedTuple

ACTION_NAMES = ("TURN_LEFT", "TURN_RIGHT", "STRAIGHT", "ACCELERATE",
                "DECELERATE", "MAINTAIN")
TURN_LEFT, TURN_RIGHT, STRAIGHT, ACCELERATE, DECELERATE, MAINTAIN = range(6)

SPEED_CAP = 33.0
SENSOR_RANGE = 100.0
V_MIN_TARGET = 20.0
V_MAX_TARGET = 30.0
SAFE_GAP = 10.0
REAR_TTC_MIN = 2.0
OVERRIDE_CONFIDENCE = 0.8

OBS_SIZE = 10


class Recommendation(NamedTuple):
    action: str
    confidence: float
    rationale: str


def check_obs(obs) -> str | None:
    """Return a problem description for a malformed observation, else None."""
    if not isinstance(obs, (list, tuple)):
        return "obs must be a list of numbers"
    if len(obs) < OBS_SIZE:
        return f"obs needs at least {OBS_SIZE} values, got {len(obs)}"
    for i, x in enumerate(obs):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            return f"obs[{i}] is not a number"
    return None


def bucket_of(obs) -> tuple[int, int, int]:
    """Discretized-state key: (lane, speed tercile over the target range,
    same-lane leader gap bucket {<20 m, 20-50 m, >50 m or none})."""
    lane = int(round(obs[1]))
    speed = obs[0] * SPEED_CAP
    width = (V_MAX_TARGET - V_MIN_TARGET) / 3.0
    tercile = int(min(2, max(0, (speed - V_MIN_TARGET) // width)))
    gap = obs[2] * SENSOR_RANGE
    gap_bucket = 0 if gap < 20.0 else (1 if gap <= 50.0 else 2)
    return lane, tercile, gap_bucket


def lane_change_safe(obs) -> bool:
    """Safety predicate for moving into the other lane, from the other
    lane's observation slots: both gaps clear, rear time-to-collision ok."""
    front_gap = obs[6] * SENSOR_RANGE
    rear_gap = obs[8] * SENSOR_RANGE
    if front_gap < SAFE_GAP or rear_gap < SAFE_GAP:
        return False
    closing = obs[9] * SPEED_CAP
    if closing > 0 and rear_gap / closing < REAR_TTC_MIN:
        return False
    return True


def recommend(obs, overrides: dict | None = None) -> Recommendation:
    """Recommend an action for one observation.

    Precedence: bucket override, overtake a slow leader when the other lane
    is clear, drift back to the rightmost lane, accelerate on open road,
    otherwise hold speed.
    """
    if overrides:
        key = bucket_of(obs)
        if key in overrides:
            return Recommendation(ACTION_NAMES[overrides[key]],
                                  OVERRIDE_CONFIDENCE,
                                  "feedback override for this situation")
    lane = int(round(obs[1]))
    speed = obs[0] * SPEED_CAP
    leader_gap = obs[2] * SENSOR_RANGE
    leader_dv = obs[3] * SPEED_CAP
    other_safe = lane_change_safe(obs)

    if leader_gap < 50.0 and leader_dv <= -3.0 and other_safe:
        action = TURN_LEFT if lane == 0 else TURN_RIGHT
        return Recommendation(ACTION_NAMES[action], 0.9,
                              "slow vehicle ahead and the other lane is clear")
    if lane == 1 and other_safe and obs[7] >= 0.0:
        return Recommendation(ACTION_NAMES[TURN_RIGHT], 0.6,
                              "prefer the rightmost lane when it is free")
    if speed < V_MAX_TARGET and leader_gap >= 50.0:
        return Recommendation(ACTION_NAMES[ACCELERATE], 0.7,
                              "road ahead is clear, below target speed")
    return Recommendation(ACTION_NAMES[MAINTAIN], 0.5, "hold the current speed")
