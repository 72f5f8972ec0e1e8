"""Seeded scenario generation.

A scenario is a route plus fully precomputed (open-loop) agent tracks: the
background agents never react to the controlled vehicle, so a scenario is a
pure function of (seed, template, n_agents) and any rollout through it is
reproducible. Templates cover the situations the relevance model has to tell
apart: a crossing pedestrian ahead, a vehicle cutting across an intersection,
a queue leader braking to a stop line, and a mixed block with a traffic
light. Every template also plants agents that are irrelevant by construction
(parked cars, a pedestrian walking away behind the start) so that proximity
alone is a misleading relevance signal.

Track convention: entry t of a track is the agent state at time t*dt, and
positions integrate forward-Euler with the speed stored at t. Agents despawn
(exists=0) once they are more than DESPAWN_RADIUS from the route polyline and
never respawn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import rng_for
from .scene import (
    DEFAULT_HORIZON,
    DT,
    EMPTY_SLOT,
    N_MAX,
    AgentKind,
    AgentState,
    EgoState,
    RouteSpec,
    SceneState,
    TrafficLight,
)

TEMPLATES = ("straight_crosswalk", "four_way_intersection", "stop_line_queue", "mixed_urban")

DESPAWN_RADIUS = 100.0

# track columns
TRK_X, TRK_Y, TRK_H, TRK_V, TRK_EXISTS = range(5)

VEHICLE_EXTENT = (4.6, 1.9)
CYCLIST_EXTENT = (1.8, 0.6)
PED_EXTENT = (0.5, 0.5)


class ConfigurationError(ValueError):
    """Scenario request outside the supported parameter ranges."""


def canonical_dumps(obj) -> str:
    """Canonical JSON: sorted keys, no whitespace, shortest-round-trip floats.

    Equal objects always serialize to identical bytes, which is what the
    determinism checks compare.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class ScenarioSpec:
    """A fully materialized scenario.

    tracks has shape (n_agents, horizon, 5) with columns x, y, heading,
    speed, exists; exactly `horizon` entries per agent (t = 0..horizon-1).
    """

    seed: int
    template: str
    n_agents: int
    horizon: int
    dt: float
    route: RouteSpec
    ego_start: EgoState
    agent_kinds: tuple[AgentKind, ...]
    agent_extents: tuple[tuple[float, float], ...]
    tracks: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.tracks, dtype=np.float64)
        if t.shape != (self.n_agents, self.horizon, 5):
            raise ValueError("tracks must be (n_agents, horizon, 5)")
        t.setflags(write=False)
        object.__setattr__(self, "tracks", t)
        if len(self.agent_kinds) != self.n_agents or len(self.agent_extents) != self.n_agents:
            raise ValueError("per-agent metadata must match n_agents")


def scripted_step(spec: ScenarioSpec, agent_index: int, t: int) -> AgentState:
    """Agent slot state at step t, straight from the precomputed track."""
    if not 0 <= agent_index < spec.n_agents:
        raise IndexError(f"agent index {agent_index} out of range")
    if not 0 <= t < spec.horizon:
        raise IndexError(f"step {t} outside horizon {spec.horizon}")
    row = spec.tracks[agent_index, t]
    return AgentState(
        id=agent_index,
        kind=spec.agent_kinds[agent_index],
        position=(float(row[TRK_X]), float(row[TRK_Y])),
        heading=float(row[TRK_H]),
        speed=float(row[TRK_V]),
        extent=spec.agent_extents[agent_index],
        exists=bool(row[TRK_EXISTS] > 0.5),
    )


def agents_at(spec: ScenarioSpec, t: int) -> tuple[AgentState, ...]:
    """All N_MAX slots at step t; slots beyond n_agents are empty.

    Steps at or past the end of the tracks hold the final entry, which only
    matters for the terminal state of a full-length rollout.
    """
    tt = min(t, spec.horizon - 1)
    slots = [scripted_step(spec, i, tt) for i in range(spec.n_agents)]
    slots.extend([EMPTY_SLOT] * (N_MAX - spec.n_agents))
    return tuple(slots)


def initial_scene(spec: ScenarioSpec) -> SceneState:
    return SceneState(ego=spec.ego_start, agents=agents_at(spec, 0),
                      route=spec.route, time_index=0, dt=spec.dt)


# ---------------------------------------------------------------------------
# track construction helpers

def _route_point(route: RouteSpec, s: float, lat: float) -> tuple[float, float, float]:
    """World (x, y, tangent heading) of the point at arclength s, offset lat
    to the left of the route."""
    p = route.point_at(s)
    h = route.heading_at(s)
    x = float(p[0] - lat * math.sin(h))
    y = float(p[1] + lat * math.cos(h))
    return x, y, h


def _integrate(x0: float, y0: float, heading: float, speeds: np.ndarray,
               horizon: int) -> np.ndarray:
    """Forward-Euler track along a fixed heading; speeds has `horizon` entries."""
    trk = np.zeros((horizon, 5), dtype=np.float64)
    x, y = x0, y0
    c, s = math.cos(heading), math.sin(heading)
    for t in range(horizon):
        v = float(speeds[t])
        trk[t] = (x, y, heading, v, 1.0)
        x += v * DT * c
        y += v * DT * s
    return trk


def _const_speed(v: float, horizon: int) -> np.ndarray:
    return np.full(horizon, v, dtype=np.float64)


def _delayed_speed(v: float, delay_s: float, horizon: int) -> np.ndarray:
    speeds = np.full(horizon, v, dtype=np.float64)
    speeds[: max(0, int(round(delay_s / DT)))] = 0.0
    return speeds


def _apply_despawn(route: RouteSpec, trk: np.ndarray) -> None:
    gone = False
    for t in range(trk.shape[0]):
        if not gone:
            s, _ = route.project((trk[t, TRK_X], trk[t, TRK_Y]))
            p = route.point_at(s)
            d = math.hypot(trk[t, TRK_X] - p[0], trk[t, TRK_Y] - p[1])
            if d > DESPAWN_RADIUS:
                gone = True
        if gone:
            trk[t, TRK_EXISTS] = 0.0


@dataclass
class _Plan:
    kind: AgentKind
    extent: tuple[float, float]
    track: np.ndarray


def _crossing_plan(route: RouteSpec, s_cross: float, from_right: bool, speed: float,
                   delay_s: float, start_gap: float, kind: AgentKind,
                   extent: tuple[float, float], horizon: int) -> _Plan:
    """An agent that cuts straight across the route at arclength s_cross.

    start_gap is its initial distance from the centerline on the approach
    side; after the delay it walks/drives through and keeps going.
    """
    sign = -1.0 if from_right else 1.0
    x, y, h = _route_point(route, s_cross, sign * start_gap)
    heading = h + (math.pi / 2.0 if from_right else -math.pi / 2.0)
    trk = _integrate(x, y, heading, _delayed_speed(speed, delay_s, horizon), horizon)
    return _Plan(kind, extent, trk)


def _parked_plan(route: RouteSpec, s: float, lat: float, horizon: int) -> _Plan:
    x, y, h = _route_point(route, s, lat)
    trk = _integrate(x, y, h, _const_speed(0.0, horizon), horizon)
    return _Plan(AgentKind.VEHICLE, VEHICLE_EXTENT, trk)


def _walker_plan(route: RouteSpec, s: float, lat: float, speed: float, forward: bool,
                 horizon: int) -> _Plan:
    x, y, h = _route_point(route, s, lat)
    heading = h if forward else h + math.pi
    trk = _integrate(x, y, heading, _const_speed(speed, horizon), horizon)
    return _Plan(AgentKind.PEDESTRIAN, PED_EXTENT, trk)


def _cyclist_plan(route: RouteSpec, s: float, lat: float, speed: float,
                  horizon: int) -> _Plan:
    x, y, h = _route_point(route, s, lat)
    trk = _integrate(x, y, h, _const_speed(speed, horizon), horizon)
    return _Plan(AgentKind.CYCLIST, CYCLIST_EXTENT, trk)


def _behind_plan(route: RouteSpec, rng: np.random.Generator, horizon: int) -> _Plan:
    """Pedestrian behind the start, walking away: irrelevant by construction."""
    back = rng.uniform(5.0, 12.0)
    lat = float(rng.choice((-1.0, 1.0))) * rng.uniform(2.0, 4.0)
    speed = rng.uniform(1.2, 1.6)
    x, y, h = _route_point(route, 0.0, lat)
    heading = h + math.pi
    x += back * math.cos(heading)
    y += back * math.sin(heading)
    trk = _integrate(x, y, heading, _const_speed(speed, horizon), horizon)
    return _Plan(AgentKind.PEDESTRIAN, PED_EXTENT, trk)


def _filler_plan(route: RouteSpec, rng: np.random.Generator, index: int,
                 horizon: int) -> _Plan:
    """Background agents that never enter the route corridor."""
    side = float(rng.choice((-1.0, 1.0)))
    s = rng.uniform(5.0, min(150.0, route.total_length() - 5.0))
    which = index % 3
    if which == 0:
        return _parked_plan(route, s, side * rng.uniform(3.4, 4.6), horizon)
    if which == 1:
        return _walker_plan(route, s, side * rng.uniform(3.4, 5.0),
                            rng.uniform(1.0, 1.8), bool(rng.integers(0, 2)), horizon)
    return _cyclist_plan(route, s, side * rng.uniform(3.2, 4.2),
                         rng.uniform(3.5, 5.0), horizon)


# Routes are long enough that the 50 m feature window never runs off the end
# within a full-horizon rollout at the speed cap (150 m + 50 m < 210 m).
_ROUTE_LENGTH = 210.0


def _straight_route(target_speed: float, stop_lines=(), lights=()) -> RouteSpec:
    n = 43
    wp = np.stack([np.linspace(0.0, _ROUTE_LENGTH, n), np.zeros(n)], axis=1)
    return RouteSpec(waypoints=wp, target_speed=target_speed,
                     stop_lines=tuple(stop_lines), traffic_lights=tuple(lights))


def _curved_route(target_speed: float, amplitude: float, lights=()) -> RouteSpec:
    x = np.linspace(0.0, _ROUTE_LENGTH, 43)
    y = amplitude * np.sin(2.0 * math.pi * x / 120.0)
    return RouteSpec(waypoints=np.stack([x, y], axis=1), target_speed=target_speed,
                     traffic_lights=tuple(lights))


def _mandatory_crosswalk(rng, horizon):
    v_star = rng.uniform(8.0, 12.0)
    route = _straight_route(v_star)
    s_cw = rng.uniform(35.0, 55.0)
    v_ped = rng.uniform(1.2, 1.6)
    t_meet = s_cw / v_star
    gap = v_ped * t_meet * rng.uniform(0.85, 1.05)
    gap = min(max(gap, 3.5), 14.0)
    delay = 0.0
    plans = [
        _crossing_plan(route, s_cw, True, v_ped, delay, gap,
                       AgentKind.PEDESTRIAN, PED_EXTENT, horizon),
        None,  # behind ped, filled by caller
        _parked_plan(route, s_cw - rng.uniform(8.0, 16.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
        _parked_plan(route, s_cw - rng.uniform(18.0, 26.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
    ]
    return route, v_star, plans


def _mandatory_four_way(rng, horizon):
    v_star = rng.uniform(8.0, 12.0)
    s_int = rng.uniform(28.0, 40.0)
    s_line = s_int - 5.0
    route = _straight_route(v_star, stop_lines=(s_line,))
    v_c = rng.uniform(6.0, 9.0)
    # Aim the crosser at the moment the ego, having stopped at the line,
    # re-enters the intersection: cruise to the braking zone, a comfortable
    # braking tail, a beat at rest, then the launch across the last 6 m.
    t_cross = max(s_line - 25.0, 0.0) / v_star + 4.0 + 0.6 + 2.5
    t_hit = t_cross + rng.uniform(-0.7, 0.7)
    from_right = bool(rng.integers(0, 2))
    plans = [
        _crossing_plan(route, s_int, from_right, v_c, 0.0, v_c * t_hit,
                       AgentKind.VEHICLE, VEHICLE_EXTENT, horizon),
        None,
        _parked_plan(route, s_line - rng.uniform(2.0, 7.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
        _parked_plan(route, s_int + rng.uniform(4.0, 9.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
    ]
    return route, v_star, plans


def _lead_vehicle_plan(route: RouteSpec, s0: float, v0: float, s_stop: float,
                       horizon: int) -> _Plan:
    """In-lane leader that brakes at 2 m/s^2 so it stops at s_stop."""
    decel = 2.0
    trk = np.zeros((horizon, 5), dtype=np.float64)
    s, v = s0, v0
    for t in range(horizon):
        x, y, h = _route_point(route, s, 0.0)
        trk[t] = (x, y, h, v, 1.0)
        s += v * DT
        if s + v * v / (2.0 * decel) >= s_stop:
            v = max(0.0, v - decel * DT)
    return _Plan(AgentKind.VEHICLE, VEHICLE_EXTENT, trk)


def _mandatory_queue(rng, horizon):
    v_star = rng.uniform(8.0, 12.0)
    s_q = rng.uniform(55.0, 70.0)
    route = _straight_route(v_star, stop_lines=(s_q,))
    s_lead = rng.uniform(15.0, 25.0)
    v_lead = rng.uniform(4.0, 6.0)
    gap = rng.uniform(5.0, 7.0)
    plans = [
        _lead_vehicle_plan(route, s_lead, v_lead, s_q - gap, horizon),
        None,
        _walker_plan(route, rng.uniform(6.0, 15.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.3, 4.5),
                     rng.uniform(1.1, 1.7), bool(rng.integers(0, 2)), horizon),
        _walker_plan(route, rng.uniform(6.0, 15.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.3, 4.5),
                     rng.uniform(1.1, 1.7), bool(rng.integers(0, 2)), horizon),
    ]
    return route, v_star, plans


def _mandatory_mixed(rng, horizon):
    v_star = rng.uniform(8.0, 11.0)
    amplitude = rng.uniform(0.0, 2.5)
    s_tl = rng.uniform(35.0, 50.0)
    # red must begin while the ego can still stop with the comfort profile:
    # leave braking distance v*^2/(2*2) plus the stop offset plus slack
    slack = rng.uniform(3.0, 9.0)
    green_pre = max(0.2, (s_tl - v_star * v_star / 4.0 - 1.0 - slack) / v_star)
    red = rng.uniform(4.0, 6.5)
    light = TrafficLight(position=s_tl, phases=(("green", green_pre), ("red", red),
                                                ("green", 600.0)))
    route = _curved_route(v_star, amplitude, lights=(light,))
    v_ped = rng.uniform(1.2, 1.6)
    gap = rng.uniform(5.0, 8.0)
    # timed to be in the lane shortly after the light turns green, while advance
    # warning is too short for proximity alone to flag the pedestrian early
    t_enter = green_pre + red + rng.uniform(0.5, 2.0)
    delay = max(0.0, t_enter - gap / v_ped)
    plans = [
        _crossing_plan(route, s_tl + rng.uniform(2.0, 5.0), bool(rng.integers(0, 2)),
                       v_ped, delay, gap, AgentKind.PEDESTRIAN, PED_EXTENT, horizon),
        None,
        _parked_plan(route, s_tl - rng.uniform(2.0, 7.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
        _parked_plan(route, s_tl + rng.uniform(5.0, 10.0),
                     float(rng.choice((-1.0, 1.0))) * rng.uniform(3.4, 4.4), horizon),
    ]
    return route, v_star, plans


_TEMPLATE_BUILDERS: dict[str, Callable] = {
    "straight_crosswalk": _mandatory_crosswalk,
    "four_way_intersection": _mandatory_four_way,
    "stop_line_queue": _mandatory_queue,
    "mixed_urban": _mandatory_mixed,
}


def generate(seed: int, template: str, n_agents: int,
             horizon: int = DEFAULT_HORIZON) -> ScenarioSpec:
    """Materialize a scenario; bit-identical for identical arguments.

    Draw order from the seeded stream is fixed: route and mandatory agents
    first, then the behind-walker, then fillers in slot order.
    """
    if template not in TEMPLATES:
        raise ConfigurationError(f"unknown template {template!r}")
    if not 4 <= n_agents <= N_MAX:
        raise ConfigurationError(f"n_agents must be in [4, {N_MAX}], got {n_agents}")
    if horizon < 2:
        raise ConfigurationError("horizon must be at least 2")
    rng = rng_for("scenario", template, int(seed), int(n_agents))

    route, v_star, plans = _TEMPLATE_BUILDERS[template](rng, horizon)
    plans[1] = _behind_plan(route, rng, horizon)
    for i in range(len(plans), n_agents):
        plans.append(_filler_plan(route, rng, i, horizon))

    ego0 = EgoState(
        position=(float(route.point_at(0.0)[0]), float(route.point_at(0.0)[1])),
        heading=route.heading_at(0.0),
        speed=v_star * rng.uniform(0.8, 1.0),
        route_progress=0.0,
    )

    tracks = np.stack([p.track for p in plans])
    for i in range(n_agents):
        _apply_despawn(route, tracks[i])

    return ScenarioSpec(
        seed=int(seed), template=template, n_agents=int(n_agents), horizon=int(horizon),
        dt=DT, route=route, ego_start=ego0,
        agent_kinds=tuple(p.kind for p in plans),
        agent_extents=tuple(p.extent for p in plans),
        tracks=tracks,
    )


# ---------------------------------------------------------------------------
# JSON round trip

def scenario_to_json(spec: ScenarioSpec) -> dict:
    return {
        "schema": "rdar.scenario/1",
        "seed": spec.seed,
        "template": spec.template,
        "n_agents": spec.n_agents,
        "horizon": spec.horizon,
        "dt": spec.dt,
        "route": {
            "waypoints": spec.route.waypoints.tolist(),
            "target_speed": spec.route.target_speed,
            "stop_lines": list(spec.route.stop_lines),
            "traffic_lights": [
                {"position": tl.position, "phases": [[p, d] for p, d in tl.phases]}
                for tl in spec.route.traffic_lights
            ],
        },
        "ego": {
            "position": list(spec.ego_start.position),
            "heading": spec.ego_start.heading,
            "speed": spec.ego_start.speed,
            "route_progress": spec.ego_start.route_progress,
        },
        "agents": [
            {
                "id": i,
                "kind": spec.agent_kinds[i].value,
                "extent": list(spec.agent_extents[i]),
                "track": spec.tracks[i].tolist(),
            }
            for i in range(spec.n_agents)
        ],
    }


def scenario_from_json(data: dict) -> ScenarioSpec:
    if data.get("schema") != "rdar.scenario/1":
        raise ValueError(f"unsupported scenario schema {data.get('schema')!r}")
    route = RouteSpec(
        waypoints=np.asarray(data["route"]["waypoints"], dtype=np.float64),
        target_speed=float(data["route"]["target_speed"]),
        stop_lines=tuple(float(s) for s in data["route"]["stop_lines"]),
        traffic_lights=tuple(
            TrafficLight(position=float(tl["position"]),
                         phases=tuple((str(p), float(d)) for p, d in tl["phases"]))
            for tl in data["route"]["traffic_lights"]
        ),
    )
    ego = EgoState(
        position=tuple(float(v) for v in data["ego"]["position"]),
        heading=float(data["ego"]["heading"]),
        speed=float(data["ego"]["speed"]),
        route_progress=float(data["ego"]["route_progress"]),
    )
    agents = data["agents"]
    return ScenarioSpec(
        seed=int(data["seed"]), template=str(data["template"]),
        n_agents=int(data["n_agents"]), horizon=int(data["horizon"]),
        dt=float(data["dt"]), route=route, ego_start=ego,
        agent_kinds=tuple(AgentKind(a["kind"]) for a in agents),
        agent_extents=tuple((float(a["extent"][0]), float(a["extent"][1])) for a in agents),
        tracks=np.asarray([a["track"] for a in agents], dtype=np.float64),
    )


def scenario_bytes(spec: ScenarioSpec) -> bytes:
    """Canonical serialized form; equality of scenarios = equality of bytes."""
    return canonical_dumps(scenario_to_json(spec)).encode("utf-8")
