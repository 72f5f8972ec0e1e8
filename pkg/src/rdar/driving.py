"""Frozen rule-based driving policy.

Consumes (possibly masked) scene features and produces a categorical
distribution over the acceleration bins. Three rules combine into per-bin
utilities:

  1. speed tracking: penalize |next speed - effective target|, where the
     effective target is capped by a comfortable-braking profile toward the
     nearest unsatisfied stop line or red light;
  2. conflict caution: every visible agent is rolled out at constant velocity
     for 3 s; agents whose predicted path enters the route corridor while the
     ego would be nearby penalize non-braking bins, more strongly the sooner
     the encounter;
  3. softmax with a fixed temperature turns utilities into probabilities.

The policy has no trainable parameters and depends only on feature rows whose
exists flag is set, which is what makes agent masking well-defined: zeroed
slots are invisible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import FEAT_EXISTS_COL, ROUTE_POINTS, SceneFeatures
from .simulator import ACCEL_BINS, N_BINS, V_MAX, DrivingAction
from .scene import DT

CRUISE_SPEED = 10.0       # fallback target when the route's is not supplied
SOFTMAX_TEMPERATURE = 0.5
CONFLICT_HORIZON = 3.0    # s of constant-velocity prediction
CORRIDOR_HALF_WIDTH = 2.5
LONGITUDINAL_GATE = 6.0   # m of along-route slack for an encounter
COMFORT_BRAKE = 2.0       # m/s^2 used for the stop-line approach profile
STOP_OFFSET = 1.0         # aim to be stationary this far before the line
W_TRACK = 1.0
W_CONFLICT = 8.0

_TAU_GRID = np.arange(16, dtype=np.float64) * DT  # 0.0 .. 3.0 inclusive
_BINS = np.array(ACCEL_BINS, dtype=np.float64)
_GAIN = (_BINS - _BINS[0]) / (_BINS[-1] - _BINS[0])  # 0 at hardest brake, 1 at max accel


@dataclass(frozen=True)
class ActionDistribution:
    """Categorical distribution over the acceleration bins."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if p.shape != (N_BINS,):
            raise ValueError(f"probs must have shape ({N_BINS},)")
        if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("probs must be non-negative and sum to 1")

    def argmax_bin(self) -> int:
        # np.argmax returns the first maximum; bins are ordered from the
        # strongest brake upward, so ties resolve toward braking.
        return int(np.argmax(self.probs))


def _project_extended_many(pts: np.ndarray, queries: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Project query points onto the polyline, extending the first and last
    segments to infinity so points beyond either end get extrapolated
    arclength instead of clamping onto the endpoints.

    Returns per-query (arclength, signed lateral offset), positive left.
    Each query is independent: dropping rows never changes the others.
    """
    a = pts[:-1]
    d = pts[1:] - a
    lens = np.sqrt(np.einsum("ij,ij->i", d, d))
    ok = lens > 1e-12
    if not ok.any():
        diff = queries - pts[0]
        return np.zeros(len(queries)), np.hypot(diff[:, 0], diff[:, 1])
    a, d, lens = a[ok], d[ok], lens[ok]
    rel = queries[:, None, :] - a[None, :, :]
    t = np.einsum("qij,ij->qi", rel, d) / (lens * lens)
    t_cl = np.clip(t, 0.0, 1.0)
    t_cl[:, 0] = np.minimum(t[:, 0], 1.0)            # extend backwards
    t_cl[:, -1] = np.maximum(t_cl[:, -1], t[:, -1])  # extend forwards
    nearest = a[None, :, :] + t_cl[:, :, None] * d[None, :, :]
    diff = queries[:, None, :] - nearest
    dist2 = np.einsum("qij,qij->qi", diff, diff)
    i = np.argmin(dist2, axis=1)
    q = np.arange(len(queries))
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    s = cum[i] + t_cl[q, i] * lens[i]
    tangent = d[i] / lens[i, None]
    rel_i = diff[q, i]
    lat = tangent[:, 0] * rel_i[:, 1] - tangent[:, 1] * rel_i[:, 0]
    return s, lat


def _project_extended(pts: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    s, lat = _project_extended_many(pts, np.asarray(p, dtype=np.float64)[None, :])
    return float(s[0]), float(lat[0])


def find_conflicts(features: SceneFeatures) -> list[tuple[int, float]]:
    """(slot, imminence) for every visible agent predicted to encounter the
    ego within the conflict horizon; imminence is 1 at an immediate
    encounter and decays linearly to 0 at the horizon.

    An encounter at lookahead tau requires the agent inside the route
    corridor and the constant-speed ego within the longitudinal gate of it.
    Agents with zero imminence are not reported, so an agent that never
    conflicts has exactly no influence on the policy.
    """
    v_ego = float(features.ego[0])
    slots = np.flatnonzero(features.agent[:, FEAT_EXISTS_COL] > 0.5)
    if slots.size == 0:
        return []
    p0 = features.agent[slots, :2]
    vel = features.agent[slots, 2:4].copy()
    vel[:, 0] += v_ego  # absolute velocity in the ego frame
    n_tau = _TAU_GRID.size
    pred = p0[:, None, :] + vel[:, None, :] * _TAU_GRID[None, :, None]
    s, lat = _project_extended_many(features.route, pred.reshape(-1, 2))
    s = s.reshape(slots.size, n_tau)
    lat = lat.reshape(slots.size, n_tau)
    hits = ((np.abs(lat) <= CORRIDOR_HALF_WIDTH)
            & (np.abs(v_ego * _TAU_GRID[None, :] - s) <= LONGITUDINAL_GATE))
    out: list[tuple[int, float]] = []
    for row, slot in enumerate(slots):
        if not hits[row].any():
            continue
        ttc = float(_TAU_GRID[int(np.argmax(hits[row]))])  # first qualifying tau
        imminence = max(0.0, 1.0 - ttc / CONFLICT_HORIZON)
        if imminence > 0.0:
            out.append((int(slot), imminence))
    return out


def effective_target_speed(features: SceneFeatures, target_speed: float) -> float:
    """Cruise target capped by a comfortable braking profile toward the
    nearest unsatisfied stop line or currently-red light."""
    d = min(float(features.ego[1]), float(features.ego[2]))
    d_eff = max(d - STOP_OFFSET, 0.0)
    v_cap = math.sqrt(2.0 * COMFORT_BRAKE * d_eff)
    return min(target_speed, v_cap, V_MAX)


def utilities(features: SceneFeatures, target_speed: float = CRUISE_SPEED) -> np.ndarray:
    """Per-bin rule utilities (higher is better)."""
    v = float(features.ego[0])
    v_next = np.clip(v + _BINS * DT, 0.0, V_MAX)
    v_eff = effective_target_speed(features, target_speed)
    u = -W_TRACK * np.abs(v_next - v_eff)
    pressure = 0.0
    for _, imminence in find_conflicts(features):
        pressure += imminence
    if pressure > 0.0:
        u = u - W_CONFLICT * pressure * _GAIN
    return u


def policy_distribution(features: SceneFeatures,
                        target_speed: float = CRUISE_SPEED) -> ActionDistribution:
    u = utilities(features, target_speed) / SOFTMAX_TEMPERATURE
    u = u - u.max()
    e = np.exp(u)
    return ActionDistribution(probs=e / e.sum())


def act(features: SceneFeatures, target_speed: float = CRUISE_SPEED) -> DrivingAction:
    """Deterministic closed-loop action: argmax bin, ties toward braking."""
    return DrivingAction(policy_distribution(features, target_speed).argmax_bin())
