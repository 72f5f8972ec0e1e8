"""Domain types and featurization for the 2D driving world.

Conventions: distances in meters, angles in radians, speeds in m/s. The world
frame is a fixed plane; the ego frame has +x pointing forward and +y to the
left of the controlled vehicle. Scenes hold a fixed number of agent slots
(N_MAX); slots with exists=False are inert: they take part in no physics,
produce all-zero feature rows and are skipped by every consumer.

All types are immutable value objects after construction and safe to share
across workers. Feature arrays are marked read-only to enforce this.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

N_MAX = 32
DT = 0.2
DEFAULT_HORIZON = 50

# Per-slot feature layout: rel pos (2), rel vel (2), cos/sin of relative
# heading (2), extent (2), kind one-hot (3), exists flag (1).
AGENT_FEATURE_DIM = 12
FEAT_EXISTS_COL = 11

# Ego feature layout: speed, distance to next unsatisfied stop line, distance
# to next currently-red light, signed lateral offset, heading error.
EGO_FEATURE_DIM = 5

ROUTE_POINTS = 16
ROUTE_SPAN = 50.0
SENTINEL_DISTANCE = 1000.0

STOP_ZONE = 2.0    # m before a stop line within which a stop satisfies it
STOP_SPEED = 0.1   # m/s below which the vehicle counts as stopped
EGO_EXTENT = (4.8, 2.0)  # (length, width) of the controlled vehicle


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


KIND_ORDER = (AgentKind.VEHICLE, AgentKind.PEDESTRIAN, AgentKind.CYCLIST)


class InvalidSampleError(ValueError):
    """A selection index refers to an agent slot that does not exist."""


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class AgentState:
    """One surrounding agent, stored in the world frame."""

    id: int
    kind: AgentKind
    position: tuple[float, float]
    heading: float
    speed: float
    extent: tuple[float, float]  # (length, width)
    exists: bool = True

    def __post_init__(self):
        if self.exists:
            if self.speed < 0.0:
                raise ValueError(f"agent {self.id}: speed must be >= 0")
            if self.extent[0] <= 0.0 or self.extent[1] <= 0.0:
                raise ValueError(f"agent {self.id}: extent components must be > 0")

    def velocity(self) -> tuple[float, float]:
        return (self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))


EMPTY_SLOT = AgentState(
    id=-1, kind=AgentKind.VEHICLE, position=(0.0, 0.0), heading=0.0,
    speed=0.0, extent=(1.0, 1.0), exists=False,
)


@dataclass(frozen=True)
class EgoState:
    """Controlled vehicle state.

    last_stop_progress and last_accel are bookkeeping the simulator carries
    forward so that the stop-line rule and the jerk penalty can be evaluated
    from two consecutive states alone.
    """

    position: tuple[float, float]
    heading: float
    speed: float
    route_progress: float
    last_stop_progress: float = -1.0e9
    last_accel: float = 0.0

    def __post_init__(self):
        if self.speed < 0.0:
            raise ValueError("ego speed must be >= 0 (reversing is excluded)")

    def velocity(self) -> tuple[float, float]:
        return (self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))


@dataclass(frozen=True)
class TrafficLight:
    """One signal on the route; the phase schedule cycles forever."""

    position: float  # arclength along the route
    phases: tuple[tuple[str, float], ...]  # (phase, duration s), phase in {red, green}

    def __post_init__(self):
        if not self.phases:
            raise ValueError("traffic light needs at least one phase")
        for phase, duration in self.phases:
            if phase not in ("red", "green"):
                raise ValueError(f"unknown phase {phase!r}")
            if duration <= 0.0:
                raise ValueError("phase duration must be > 0")

    def phase_at(self, t: float) -> str:
        total = sum(d for _, d in self.phases)
        t = t % total
        for phase, duration in self.phases:
            if t < duration:
                return phase
            t -= duration
        return self.phases[-1][0]


@dataclass(frozen=True)
class RouteSpec:
    """The ego route: a polyline plus longitudinal markers."""

    waypoints: np.ndarray  # (P, 2) float64
    target_speed: float
    stop_lines: tuple[float, ...] = ()
    traffic_lights: tuple[TrafficLight, ...] = ()
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 2:
            raise ValueError("waypoints must be an (>=2, 2) array")
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise ValueError("consecutive waypoints must be distinct")
        wp.setflags(write=False)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        cum.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "_cum", cum)
        total = float(cum[-1])
        for s in self.stop_lines:
            if not 0.0 <= s <= total:
                raise ValueError(f"stop line at {s} outside [0, {total}]")
        for light in self.traffic_lights:
            if not 0.0 <= light.position <= total:
                raise ValueError(f"traffic light at {light.position} outside [0, {total}]")

    def total_length(self) -> float:
        return float(self._cum[-1])

    def _segment(self, s: float) -> tuple[int, float]:
        s = min(max(s, 0.0), self.total_length())
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._cum) - 2)
        seg_len = self._cum[i + 1] - self._cum[i]
        return i, (s - self._cum[i]) / seg_len

    def point_at(self, s: float) -> np.ndarray:
        i, t = self._segment(s)
        return (1.0 - t) * self.waypoints[i] + t * self.waypoints[i + 1]

    def heading_at(self, s: float) -> float:
        i, _ = self._segment(s)
        d = self.waypoints[i + 1] - self.waypoints[i]
        return math.atan2(d[1], d[0])

    def project(self, point) -> tuple[float, float]:
        """Project a world point onto the polyline.

        Returns (arclength of nearest point, signed lateral offset); the
        offset is positive on the left of the route direction.
        """
        p = np.asarray(point, dtype=np.float64)
        a = self.waypoints[:-1]
        b = self.waypoints[1:]
        d = b - a
        seg_len2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
        nearest = a + t[:, None] * d
        dist2 = np.einsum("ij,ij->i", p - nearest, p - nearest)
        i = int(np.argmin(dist2))
        s = float(self._cum[i] + t[i] * math.sqrt(seg_len2[i]))
        tangent = d[i] / math.sqrt(seg_len2[i])
        rel = p - nearest[i]
        lateral = float(tangent[0] * rel[1] - tangent[1] * rel[0])
        return s, lateral

    def resample_ahead(self, s0: float, span: float = ROUTE_SPAN,
                       n: int = ROUTE_POINTS) -> np.ndarray:
        """n points at uniform arclength spacing over [s0, s0+span], clamped
        to the route end."""
        ss = s0 + np.linspace(0.0, span, n)
        return np.stack([self.point_at(float(s)) for s in ss])


@dataclass(frozen=True)
class SceneState:
    """Full simulator state at one timestep."""

    ego: EgoState
    agents: tuple[AgentState, ...]  # exactly N_MAX slots
    route: RouteSpec
    time_index: int = 0
    dt: float = DT

    def __post_init__(self):
        if len(self.agents) != N_MAX:
            raise ValueError(f"agents must have exactly {N_MAX} slots")
        ids = [a.id for a in self.agents if a.exists]
        if len(ids) != len(set(ids)):
            raise ValueError("existing agent ids must be unique")

    @property
    def time(self) -> float:
        return self.time_index * self.dt

    def existing_indices(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.agents) if a.exists)

    def digest(self) -> str:
        """Content hash over the exact numeric state; used in trace exports."""
        h = hashlib.sha256()
        ego = self.ego
        h.update(np.array(
            [ego.position[0], ego.position[1], ego.heading, ego.speed,
             ego.route_progress, ego.last_stop_progress, ego.last_accel,
             float(self.time_index), self.dt], dtype=np.float64).tobytes())
        for a in self.agents:
            h.update(np.array(
                [float(a.id), float(KIND_ORDER.index(a.kind)), a.position[0],
                 a.position[1], a.heading, a.speed, a.extent[0], a.extent[1],
                 1.0 if a.exists else 0.0], dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class KSample:
    """An ordered selection of distinct agent slot indices (the mask action)."""

    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(self.indices) == 0:
            raise ValueError("a k-sample holds at least one index")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("k-sample indices must be distinct")

    @property
    def k(self) -> int:
        return len(self.indices)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SceneFeatures:
    """Fixed-shape ego-frame featurization of a scene.

    agent: (N_MAX, AGENT_FEATURE_DIM), rows of non-existing slots all zero.
    ego:   (EGO_FEATURE_DIM,)
    route: (ROUTE_POINTS, 2) polyline ahead of the ego, ego frame.
    """

    agent: np.ndarray
    ego: np.ndarray
    route: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "agent", _readonly(self.agent))
        object.__setattr__(self, "ego", _readonly(self.ego))
        object.__setattr__(self, "route", _readonly(self.route))
        if self.agent.shape != (N_MAX, AGENT_FEATURE_DIM):
            raise ValueError("agent features must be (N_MAX, AGENT_FEATURE_DIM)")
        if self.ego.shape != (EGO_FEATURE_DIM,):
            raise ValueError("ego features must be (EGO_FEATURE_DIM,)")
        if self.route.shape != (ROUTE_POINTS, 2):
            raise ValueError("route features must be (ROUTE_POINTS, 2)")
        if not (np.isfinite(self.agent).all() and np.isfinite(self.ego).all()
                and np.isfinite(self.route).all()):
            raise ValueError("features must be finite")

    @property
    def exists_mask(self) -> np.ndarray:
        return self.agent[:, FEAT_EXISTS_COL] > 0.5


def _to_ego(rot_c: float, rot_s: float, vx: float, vy: float) -> tuple[float, float]:
    # rotate a world vector into the ego frame (x forward, y left)
    return (rot_c * vx + rot_s * vy, -rot_s * vx + rot_c * vy)


def next_stop_line_distance(scene: SceneState) -> float:
    """Distance to the next stop line the ego has not yet satisfied.

    A line is satisfied once the vehicle has been essentially stopped within
    STOP_ZONE meters before it. Returns SENTINEL_DISTANCE when none apply.
    """
    ego = scene.ego
    best = SENTINEL_DISTANCE
    for s in scene.route.stop_lines:
        if s < ego.route_progress:
            continue
        if ego.last_stop_progress >= s - STOP_ZONE:
            continue
        best = min(best, s - ego.route_progress)
    return best


def next_red_light_distance(scene: SceneState) -> float:
    """Distance to the next light ahead that is red right now, else sentinel."""
    ego = scene.ego
    best = SENTINEL_DISTANCE
    for light in scene.route.traffic_lights:
        if light.position < ego.route_progress:
            continue
        if light.phase_at(scene.time) != "red":
            continue
        best = min(best, light.position - ego.route_progress)
    return best


def to_ego_frame(scene: SceneState) -> SceneFeatures:
    """Rigid-body featurization of a scene into the ego frame.

    Deterministic and total on valid scenes; the exists mask is preserved and
    rows of non-existing slots are exactly zero.
    """
    ego = scene.ego
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    ex, ey = ego.position
    evx, evy = ego.velocity()

    agent = np.zeros((N_MAX, AGENT_FEATURE_DIM), dtype=np.float64)
    for i, a in enumerate(scene.agents):
        if not a.exists:
            continue
        px, py = _to_ego(c, s, a.position[0] - ex, a.position[1] - ey)
        avx, avy = a.velocity()
        vx, vy = _to_ego(c, s, avx - evx, avy - evy)
        dh = a.heading - ego.heading
        row = agent[i]
        row[0], row[1] = px, py
        row[2], row[3] = vx, vy
        row[4], row[5] = math.cos(dh), math.sin(dh)
        row[6], row[7] = a.extent
        row[8 + KIND_ORDER.index(a.kind)] = 1.0
        row[FEAT_EXISTS_COL] = 1.0

    s_proj, lateral = scene.route.project(ego.position)
    heading_err = wrap_angle(ego.heading - scene.route.heading_at(s_proj))
    ego_feat = np.array(
        [ego.speed,
         next_stop_line_distance(scene),
         next_red_light_distance(scene),
         lateral,
         heading_err], dtype=np.float64)

    pts = scene.route.resample_ahead(ego.route_progress)
    rel = pts - np.array([ex, ey])
    route_feat = np.stack(
        [c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)

    return SceneFeatures(agent=agent, ego=ego_feat, route=route_feat)


def mask_agents(features: SceneFeatures, sample) -> SceneFeatures:
    """Zero every agent slot not in the sample; keep selected slots bitwise.

    sample is a KSample or a plain sequence of slot indices (an empty
    sequence zeroes every slot). Masking is idempotent and raises
    InvalidSampleError if any index points at a slot whose exists flag is 0.
    """
    indices = sample.indices if isinstance(sample, KSample) else tuple(sample)
    exists = features.exists_mask
    keep = np.zeros(N_MAX, dtype=bool)
    for i in indices:
        i = int(i)
        if not 0 <= i < N_MAX:
            raise InvalidSampleError(f"slot index {i} out of range")
        if not exists[i]:
            raise InvalidSampleError(f"slot {i} does not exist")
        keep[i] = True
    agent = np.where(keep[:, None], features.agent, 0.0)
    return SceneFeatures(agent=agent, ego=features.ego, route=features.route)
