"""World stepping, event detection, and reward.

The controlled vehicle picks one longitudinal acceleration per step from a
fixed bin set; lateral motion is deterministic pure-pursuit tracking of the
route polyline. Background agents replay their scripted tracks. Stepping is a
pure function of (scene, action, scenario), so rollouts are reproducible and
parallelizable without shared state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import (
    EGO_EXTENT,
    STOP_SPEED,
    STOP_ZONE,
    AgentState,
    EgoState,
    SceneState,
    wrap_angle,
)
from .scenarios import ScenarioSpec, agents_at

ACCEL_BINS = (-4.0, -2.0, -0.5, 0.0, 1.0, 2.0)
N_BINS = len(ACCEL_BINS)
V_MAX = 15.0
OFF_ROAD_LATERAL = 2.5

LOOKAHEAD_MIN = 3.0
LOOKAHEAD_GAIN = 0.5
MAX_CURVATURE = 0.5

EV_COLLISION = "collision"
EV_OFF_ROAD = "off_road"
EV_RED_LIGHT = "ran_red_light"
EV_STOP_LINE = "skipped_stop_line"


class LifecycleError(RuntimeError):
    """step() was called on a scene whose episode is already over."""


@dataclass(frozen=True)
class DrivingAction:
    """Index into ACCEL_BINS; steering is implicit route-following."""

    accel_bin: int

    def __post_init__(self):
        if not 0 <= self.accel_bin < N_BINS:
            raise ValueError(f"accel_bin must be in [0, {N_BINS - 1}]")

    @property
    def accel(self) -> float:
        return ACCEL_BINS[self.accel_bin]


@dataclass(frozen=True)
class StepOutcome:
    next_scene: SceneState
    reward: float
    events: frozenset[str]
    done: bool


@dataclass(frozen=True)
class RewardWeights:
    """Per-step reward r = progress*dx - penalties - jerk*|da|.

    The collision penalty dominates everything a scenario can earn, so any
    relevance model trained on this reward must keep conflict agents visible.
    """

    progress: float = 1.0    # per meter
    collision: float = 100.0
    off_road: float = 20.0
    red_light: float = 20.0
    stop_line: float = 10.0
    jerk: float = 0.5        # per m/s^2 of accel change


DEFAULT_REWARD_WEIGHTS = RewardWeights()


# ---------------------------------------------------------------------------
# collision geometry (separating-axis test on oriented rectangles)

def obb_corners(cx: float, cy: float, heading: float, length: float,
                width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    u = np.array([c, s])
    v = np.array([-s, c])
    center = np.array([cx, cy])
    return np.stack([
        center + hl * u + hw * v,
        center + hl * u - hw * v,
        center - hl * u - hw * v,
        center - hl * u + hw * v,
    ])


def _proj_interval(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = corners @ axis
    return float(p.min()), float(p.max())


def obb_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Closed-set intersection: rectangles touching at an edge or corner count."""
    axes = (a[1] - a[0], a[3] - a[0], b[1] - b[0], b[3] - b[0])
    for axis in axes:
        n = np.array([-axis[1], axis[0]])
        amin, amax = _proj_interval(a, n)
        bmin, bmax = _proj_interval(b, n)
        if amax < bmin or bmax < amin:
            return False
    return True


def _ego_corners(ego: EgoState) -> np.ndarray:
    return obb_corners(ego.position[0], ego.position[1], ego.heading,
                       EGO_EXTENT[0], EGO_EXTENT[1])


def detect_collision(scene: SceneState) -> bool:
    """True iff the ego rectangle intersects any existing agent rectangle.

    Masking never reaches this function: physics sees every agent.
    """
    ego = scene.ego
    ego_c = _ego_corners(ego)
    ego_r = 0.5 * math.hypot(*EGO_EXTENT)
    for a in scene.agents:
        if not a.exists:
            continue
        d = math.hypot(a.position[0] - ego.position[0], a.position[1] - ego.position[1])
        if d > ego_r + 0.5 * math.hypot(*a.extent):
            continue
        if obb_intersect(ego_c, obb_corners(a.position[0], a.position[1], a.heading,
                                            a.extent[0], a.extent[1])):
            return True
    return False


# ---------------------------------------------------------------------------
# infractions and reward

def detect_infractions(prev: SceneState, next_scene: SceneState) -> frozenset[str]:
    """Rule events over one transition.

    Red-light crossings use the phase at the start of the step; stop lines
    count as satisfied if the vehicle was essentially stopped within the
    stop zone before the line.
    """
    events = set()
    p0 = prev.ego.route_progress
    p1 = next_scene.ego.route_progress
    route = prev.route

    for light in route.traffic_lights:
        if p0 < light.position <= p1 and light.phase_at(prev.time) == "red":
            events.add(EV_RED_LIGHT)

    for s in route.stop_lines:
        if p0 < s <= p1 and next_scene.ego.last_stop_progress < s - STOP_ZONE:
            events.add(EV_STOP_LINE)

    _, lateral = route.project(next_scene.ego.position)
    if abs(lateral) > OFF_ROAD_LATERAL:
        events.add(EV_OFF_ROAD)

    return frozenset(events)


def compute_reward(prev: SceneState, next_scene: SceneState, events: frozenset,
                   weights: RewardWeights = DEFAULT_REWARD_WEIGHTS) -> float:
    dx = next_scene.ego.route_progress - prev.ego.route_progress
    da = next_scene.ego.last_accel - prev.ego.last_accel
    r = weights.progress * dx - weights.jerk * abs(da)
    if EV_COLLISION in events:
        r -= weights.collision
    if EV_OFF_ROAD in events:
        r -= weights.off_road
    if EV_RED_LIGHT in events:
        r -= weights.red_light
    if EV_STOP_LINE in events:
        r -= weights.stop_line
    return r


def step(scene: SceneState, action: DrivingAction, spec: ScenarioSpec,
         weights: RewardWeights = DEFAULT_REWARD_WEIGHTS) -> StepOutcome:
    """Advance the world by dt. Raises LifecycleError on a finished episode."""
    if scene.time_index >= spec.horizon:
        raise LifecycleError("episode already reached its horizon")
    if detect_collision(scene):
        raise LifecycleError("episode already ended in a collision")

    ego = scene.ego
    accel = action.accel
    new_speed = min(max(ego.speed + accel * scene.dt, 0.0), V_MAX)
    ds = new_speed * scene.dt
    new_progress = ego.route_progress + ds

    x, y = ego.position
    heading = ego.heading
    if ds > 0.0:
        route = scene.route
        look = max(LOOKAHEAD_MIN, LOOKAHEAD_GAIN * new_speed)
        target = route.point_at(min(new_progress + look, route.total_length()))
        dxw, dyw = float(target[0]) - x, float(target[1]) - y
        dist = math.hypot(dxw, dyw)
        if dist > 1e-9:
            alpha = wrap_angle(math.atan2(dyw, dxw) - heading)
            curvature = 2.0 * math.sin(alpha) / dist
            curvature = min(max(curvature, -MAX_CURVATURE), MAX_CURVATURE)
        else:
            curvature = 0.0
        mid = heading + 0.5 * curvature * ds
        x += ds * math.cos(mid)
        y += ds * math.sin(mid)
        heading = wrap_angle(heading + curvature * ds)

    new_ego = EgoState(
        position=(x, y),
        heading=heading,
        speed=new_speed,
        route_progress=new_progress,
        last_stop_progress=(new_progress if new_speed < STOP_SPEED
                            else ego.last_stop_progress),
        last_accel=accel,
    )
    next_scene = SceneState(
        ego=new_ego,
        agents=agents_at(spec, scene.time_index + 1),
        route=scene.route,
        time_index=scene.time_index + 1,
        dt=scene.dt,
    )

    events = set(detect_infractions(scene, next_scene))
    collided = detect_collision(next_scene)
    if collided:
        events.add(EV_COLLISION)
    events = frozenset(events)

    reward = compute_reward(scene, next_scene, events, weights)
    done = collided or next_scene.time_index >= spec.horizon
    return StepOutcome(next_scene=next_scene, reward=reward, events=events, done=done)


# ---------------------------------------------------------------------------
# comfort scoring

@dataclass(frozen=True)
class ComfortSpec:
    """Bounds and weights for the four motion aspects of the comfort score.

    Each aspect is the trace mean of an absolute quantity divided by its
    bound; the score is 1 minus their weighted average, clamped to [0, 1].
    """

    accel_bound: float = 4.0       # m/s^2
    lat_accel_bound: float = 3.0   # m/s^2
    jerk_bound: float = 8.0        # m/s^3
    lat_jerk_bound: float = 6.0    # m/s^3
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)


DEFAULT_COMFORT = ComfortSpec()


def comfort_score(trace: list[DrivingAction], dt: float,
                  speeds=None, curvatures=None,
                  spec: ComfortSpec = DEFAULT_COMFORT) -> float:
    """Smoothness of a rollout in [0, 1]; 1 means constant zero acceleration.

    speeds/curvatures (per step, same length as trace) enable the lateral
    terms; without them the trace is treated as straight-line driving.
    """
    if len(trace) == 0:
        raise ValueError("comfort_score needs a non-empty trace")
    long_acc = np.array([a.accel for a in trace], dtype=np.float64)
    if speeds is not None and curvatures is not None:
        speeds = np.asarray(speeds, dtype=np.float64)
        curvatures = np.asarray(curvatures, dtype=np.float64)
        if speeds.shape != long_acc.shape or curvatures.shape != long_acc.shape:
            raise ValueError("speeds/curvatures must match the trace length")
        lat_acc = curvatures * speeds * speeds
    else:
        lat_acc = np.zeros_like(long_acc)

    def mean_abs(x: np.ndarray) -> float:
        return float(np.mean(np.abs(x))) if x.size else 0.0

    long_jerk = np.diff(long_acc) / dt
    lat_jerk = np.diff(lat_acc) / dt
    aspects = (
        mean_abs(long_acc) / spec.accel_bound,
        mean_abs(lat_acc) / spec.lat_accel_bound,
        mean_abs(long_jerk) / spec.jerk_bound,
        mean_abs(lat_jerk) / spec.lat_jerk_bound,
    )
    w = spec.weights
    penalty = sum(wi * ai for wi, ai in zip(w, aspects)) / sum(w)
    return float(min(max(1.0 - penalty, 0.0), 1.0))


def trace_record(scene: SceneState, action: DrivingAction,
                 outcome: StepOutcome) -> dict:
    """One JSON-serializable rollout-trace record: the pre-step scene digest,
    the action taken, and the resulting reward and events."""
    return {
        "digest": scene.digest(),
        "accel": action.accel,
        "reward": outcome.reward,
        "events": sorted(outcome.events),
        "done": outcome.done,
    }
