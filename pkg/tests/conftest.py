"""Shared fixtures and independent oracles used across the test suite.

Oracles here are deliberately written from first principles (enumeration,
brute-force geometry, direct arithmetic) rather than calling back into the
implementation under test.
"""
import itertools
import math

import numpy as np
import pytest

from rdar.scene import (AGENT_FEATURE_DIM, EMPTY_SLOT, N_MAX, AgentKind,
                        AgentState, EgoState, RouteSpec, SceneFeatures,
                        SceneState, TrafficLight)
from rdar.scenarios import DT, ScenarioSpec


def straight_route(target_speed=10.0, length=210.0, stop_lines=(), lights=()):
    n = int(length // 5) + 1
    pts = np.stack([np.linspace(0.0, length, n), np.zeros(n)], axis=1)
    return RouteSpec(waypoints=pts, target_speed=target_speed,
                     stop_lines=tuple(stop_lines), traffic_lights=tuple(lights))


def make_agent(slot_id=0, kind=AgentKind.VEHICLE, position=(0.0, 0.0),
               heading=0.0, speed=0.0, extent=(4.6, 1.9), exists=True):
    return AgentState(id=slot_id, kind=kind, position=tuple(position),
                      heading=heading, speed=speed, extent=tuple(extent),
                      exists=exists)


def make_scene(agents=(), ego=None, route=None, time_index=0):
    route = route or straight_route()
    ego = ego or EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0,
                          route_progress=0.0)
    slots = list(agents) + [EMPTY_SLOT] * (N_MAX - len(agents))
    return SceneState(ego=ego, agents=tuple(slots), route=route,
                      time_index=time_index, dt=DT)


def make_spec(tracks, kinds, extents, route=None, ego=None, horizon=None,
              seed=0, template="straight_crosswalk"):
    """Hand-built scenario around explicit per-agent tracks.

    tracks: (n_agents, horizon, 5) array of x, y, heading, speed, exists.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    n_agents, hor = tracks.shape[0], tracks.shape[1]
    route = route or straight_route()
    ego = ego or EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0,
                          route_progress=0.0)
    return ScenarioSpec(seed=seed, template=template, n_agents=n_agents,
                        horizon=horizon or hor, dt=DT, route=route,
                        ego_start=ego, agent_kinds=tuple(kinds),
                        agent_extents=tuple(extents), tracks=tracks)


def parked_track(x, y, horizon, heading=0.0):
    t = np.zeros((horizon, 5))
    t[:, 0], t[:, 1], t[:, 2], t[:, 4] = x, y, heading, 1.0
    return t


def moving_track(x0, y0, heading, speed, horizon, dt=DT):
    t = np.zeros((horizon, 5))
    steps = np.arange(horizon)
    t[:, 0] = x0 + math.cos(heading) * speed * dt * steps
    t[:, 1] = y0 + math.sin(heading) * speed * dt * steps
    t[:, 2] = heading
    t[:, 3] = speed
    t[:, 4] = 1.0
    return t


# --- independent geometry oracle ---------------------------------------------

def rect_corners_oracle(cx, cy, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    out = []
    for dx, dy in ((length / 2, width / 2), (length / 2, -width / 2),
                   (-length / 2, -width / 2), (-length / 2, width / 2)):
        out.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return out


def _point_in_rect(p, corners):
    # half-plane test against each edge of the convex quad (closed set);
    # winding-agnostic: inside iff no two edge crosses have opposite sign
    pos = neg = False
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        cross = (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)
        if cross > 1e-12:
            pos = True
        elif cross < -1e-12:
            neg = True
    return not (pos and neg)


def _segments_intersect(p1, p2, p3, p4):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-12:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and
                min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    for a, b, c in ((p1, p2, p3), (p1, p2, p4), (p3, p4, p1), (p3, p4, p2)):
        if orient(a, b, c) == 0 and on_seg(a, b, c):
            return True
    return False


def rects_intersect_oracle(ca, cb):
    """Convex quad intersection from first principles: corner containment in
    either direction, or any pair of edges crossing."""
    if any(_point_in_rect(p, cb) for p in ca):
        return True
    if any(_point_in_rect(p, ca) for p in cb):
        return True
    for i in range(4):
        for j in range(4):
            if _segments_intersect(ca[i], ca[(i + 1) % 4],
                                   cb[j], cb[(j + 1) % 4]):
                return True
    return False


# --- enumeration oracle for the sequential sampling law -----------------------

def ordered_sample_prob_oracle(probs, sample):
    """Direct product form: prod p_a / (1 - sum of already-drawn)."""
    drawn = 0.0
    out = 1.0
    for a in sample:
        out *= probs[a] / (1.0 - drawn)
        drawn += probs[a]
    return out


def enumerate_ordered_samples(slots, k):
    return list(itertools.permutations(slots, k))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
