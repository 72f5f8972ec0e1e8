"""Simulator: kinematics, collision geometry, infractions, reward, comfort."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdar.scene import EMPTY_SLOT, EgoState, SceneState, TrafficLight
from rdar.simulator import (
    ACCEL_BINS,
    EV_COLLISION,
    EV_OFF_ROAD,
    EV_RED_LIGHT,
    EV_STOP_LINE,
    V_MAX,
    DrivingAction,
    LifecycleError,
    RewardWeights,
    comfort_score,
    compute_reward,
    detect_collision,
    detect_infractions,
    obb_corners,
    obb_intersect,
    step,
    trace_record,
)

from conftest import (
    make_agent,
    make_scene,
    make_spec,
    moving_track,
    parked_track,
    rect_corners_oracle,
    rects_intersect_oracle,
    straight_route,
)

DT = 0.2

BIN_OF = {a: i for i, a in enumerate(ACCEL_BINS)}
HOLD = DrivingAction(BIN_OF[0.0])
FULL_BRAKE = DrivingAction(BIN_OF[-4.0])
FULL_ACCEL = DrivingAction(BIN_OF[2.0])


def _empty_spec(horizon=50, route=None, ego=None):
    trk = parked_track(1000.0, 1000.0, horizon)  # far away, never interacts
    return make_spec(trk[None], ["vehicle"], [(4.6, 1.9)], route=route,
                     ego=ego, horizon=horizon)


def _spec_kinds(*kinds):
    from rdar.scene import AgentKind
    return [AgentKind(k) for k in kinds]


class TestDrivingAction:
    def test_bin_bounds(self):
        for i in range(len(ACCEL_BINS)):
            assert DrivingAction(i).accel == ACCEL_BINS[i]
        with pytest.raises(ValueError):
            DrivingAction(-1)
        with pytest.raises(ValueError):
            DrivingAction(len(ACCEL_BINS))


class TestKinematics:
    def test_rest_state_stays_put(self):
        ego = EgoState(position=(3.0, 0.0), heading=0.0, speed=0.0, route_progress=3.0)
        spec = _empty_spec(ego=ego)
        out = step(make_scene(ego=ego), HOLD, spec)
        assert out.next_scene.ego.speed == 0.0
        assert out.next_scene.ego.route_progress == 3.0
        assert out.next_scene.ego.position == (3.0, 0.0)

    def test_accelerate_from_ten(self):
        # v' = 10 + 2*0.2 = 10.4, ds = 10.4*0.2 = 2.08
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0, route_progress=0.0)
        spec = _empty_spec(ego=ego)
        out = step(make_scene(ego=ego), FULL_ACCEL, spec)
        assert out.next_scene.ego.speed == pytest.approx(10.4, abs=1e-12)
        assert out.next_scene.ego.route_progress == pytest.approx(2.08, abs=1e-12)

    def test_speed_clamped_to_vmax(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=14.9, route_progress=0.0)
        out = step(make_scene(ego=ego), FULL_ACCEL, _empty_spec(ego=ego))
        assert out.next_scene.ego.speed == V_MAX

    def test_speed_clamped_to_zero(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=0.5, route_progress=0.0)
        out = step(make_scene(ego=ego), FULL_BRAKE, _empty_spec(ego=ego))
        assert out.next_scene.ego.speed == 0.0
        assert out.next_scene.ego.route_progress == 0.0

    def test_straight_route_position_advances_along_x(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0, route_progress=0.0)
        out = step(make_scene(ego=ego), HOLD, _empty_spec(ego=ego))
        assert out.next_scene.ego.position[0] == pytest.approx(2.0, abs=1e-9)
        assert out.next_scene.ego.position[1] == pytest.approx(0.0, abs=1e-9)

    def test_step_is_deterministic(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.05, speed=9.0, route_progress=0.0)
        scene = make_scene(ego=ego)
        spec = _empty_spec(ego=ego)
        a = step(scene, HOLD, spec)
        b = step(scene, HOLD, spec)
        assert a.next_scene.digest() == b.next_scene.digest()
        assert a.reward == b.reward and a.events == b.events and a.done == b.done

    def test_time_index_and_agents_advance(self):
        trk = moving_track(30.0, 5.0, math.pi, 2.0, 50)
        spec = make_spec(trk[None], _spec_kinds("vehicle"), [(4.6, 1.9)])
        scene = make_scene(agents=[make_agent(position=(30.0, 5.0), speed=2.0,
                                              heading=math.pi)])
        out = step(scene, HOLD, spec)
        assert out.next_scene.time_index == 1
        assert out.next_scene.agents[0].position[0] == pytest.approx(30.0 - 0.4)


class TestCollisionGeometry:
    def test_far_agent_no_collision(self):
        scene = make_scene(agents=[make_agent(position=(50.0, 0.0))])
        assert not detect_collision(scene)

    def test_coincident_rectangles_collide(self):
        scene = make_scene(agents=[make_agent(position=(0.0, 0.0))])
        assert detect_collision(scene)

    def test_edge_touch_counts(self):
        # ego (4.8 long) at origin, agent (4.6 long) sharing the x = 2.4 edge
        a = obb_corners(0.0, 0.0, 0.0, 4.8, 2.0)
        b = obb_corners(2.4 + 2.3, 0.0, 0.0, 4.6, 1.9)
        assert obb_intersect(a, b)
        # pulled apart by a hair: no contact
        c = obb_corners(2.4 + 2.3 + 1e-6, 0.0, 0.0, 4.6, 1.9)
        assert not obb_intersect(a, c)

    def test_corners_match_oracle(self):
        got = obb_corners(1.0, -2.0, 0.7, 4.0, 2.0)
        want = rect_corners_oracle(1.0, -2.0, 0.7, 4.0, 2.0)
        # same corner set regardless of ordering
        got_set = sorted(map(tuple, np.round(got, 9)))
        want_set = sorted(tuple(round(v, 9) for v in c) for c in want)
        assert got_set == want_set

    rect = st.tuples(
        st.floats(-10, 10), st.floats(-10, 10),
        st.floats(-math.pi, math.pi),
        st.floats(0.5, 6.0), st.floats(0.5, 3.0),
    )

    @given(rect, rect)
    @settings(max_examples=300, deadline=None)
    def test_sat_agrees_with_oracle(self, ra, rb):
        ca, cb = obb_corners(*ra), obb_corners(*rb)
        assert obb_intersect(ca, cb) == rects_intersect_oracle(
            rect_corners_oracle(*ra), rect_corners_oracle(*rb))

    @given(rect, rect)
    @settings(max_examples=150, deadline=None)
    def test_sat_symmetric(self, ra, rb):
        ca, cb = obb_corners(*ra), obb_corners(*rb)
        assert obb_intersect(ca, cb) == obb_intersect(cb, ca)

    @given(rect, rect, st.floats(-20, 20), st.floats(-20, 20),
           st.floats(-math.pi, math.pi))
    @settings(max_examples=150, deadline=None)
    def test_sat_rigid_transform_invariant(self, ra, rb, tx, ty, rot):
        def moved(r):
            x, y, h, ln, w = r
            c, s = math.cos(rot), math.sin(rot)
            return (c * x - s * y + tx, s * x + c * y + ty, h + rot, ln, w)

        before = obb_intersect(obb_corners(*ra), obb_corners(*rb))
        after = obb_intersect(obb_corners(*moved(ra)), obb_corners(*moved(rb)))
        assert before == after

    def test_collision_ends_episode(self):
        # pedestrian standing on the route 3.5 m ahead: first step drives into it
        trk = parked_track(3.5, 0.0, 50)
        spec = make_spec(trk[None], _spec_kinds("pedestrian"), [(0.5, 0.5)])
        scene = make_scene(agents=[make_agent(kind=spec.agent_kinds[0],
                                              position=(3.5, 0.0), extent=(0.5, 0.5))])
        out = step(scene, HOLD, spec)
        assert EV_COLLISION in out.events
        assert out.done
        with pytest.raises(LifecycleError):
            step(out.next_scene, HOLD, spec)


class TestInfractions:
    def _cross(self, progress0, progress1, speed=10.0, lights=(), stop_lines=(),
               last_stop=-1e9, lateral=0.0):
        route = straight_route(stop_lines=stop_lines, lights=lights)
        prev = make_scene(ego=EgoState(position=(progress0, 0.0), heading=0.0,
                                       speed=speed, route_progress=progress0),
                          route=route)
        nxt = make_scene(ego=EgoState(position=(progress1, lateral), heading=0.0,
                                      speed=speed, route_progress=progress1,
                                      last_stop_progress=last_stop),
                         route=route, time_index=1)
        return detect_infractions(prev, nxt)

    def test_green_light_crossing_ok(self):
        light = TrafficLight(position=10.0, phases=(("green", 1000.0),))
        assert self._cross(9.0, 11.0, lights=(light,)) == frozenset()

    def test_red_light_crossing_flagged(self):
        light = TrafficLight(position=10.0, phases=(("red", 1000.0),))
        assert EV_RED_LIGHT in self._cross(9.0, 11.0, lights=(light,))

    def test_stop_line_skipped_at_speed(self):
        events = self._cross(9.0, 10.6, speed=8.0, stop_lines=(10.0,))
        assert EV_STOP_LINE in events

    def test_stop_line_satisfied_by_prior_stop(self):
        events = self._cross(9.0, 10.6, speed=8.0, stop_lines=(10.0,),
                             last_stop=9.5)
        assert EV_STOP_LINE not in events

    def test_stop_too_far_back_does_not_satisfy(self):
        # stopped 3 m before the line, outside the 2 m stop zone
        events = self._cross(9.0, 10.6, speed=8.0, stop_lines=(10.0,),
                             last_stop=7.0)
        assert EV_STOP_LINE in events

    def test_lateral_three_meters_is_off_road(self):
        assert EV_OFF_ROAD in self._cross(0.0, 2.0, lateral=3.0)

    def test_lateral_two_meters_is_on_road(self):
        assert EV_OFF_ROAD not in self._cross(0.0, 2.0, lateral=2.0)


class TestReward:
    def _pair(self, dx=0.0, accel0=0.0, accel1=0.0):
        prev = make_scene(ego=EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0,
                                       route_progress=0.0, last_accel=accel0))
        nxt = make_scene(ego=EgoState(position=(dx, 0.0), heading=0.0, speed=10.0,
                                      route_progress=dx, last_accel=accel1),
                         time_index=1)
        return prev, nxt

    def test_null_step_zero(self):
        prev, nxt = self._pair()
        assert compute_reward(prev, nxt, frozenset()) == 0.0

    def test_progress_only(self):
        prev, nxt = self._pair(dx=2.0)
        assert compute_reward(prev, nxt, frozenset()) == pytest.approx(2.0)

    def test_collision_penalty(self):
        prev, nxt = self._pair(dx=1.0)
        assert compute_reward(prev, nxt, frozenset({EV_COLLISION})) == pytest.approx(-99.0)

    def test_jerk_penalty(self):
        prev, nxt = self._pair(dx=2.0, accel0=0.0, accel1=-2.0)
        assert compute_reward(prev, nxt, frozenset()) == pytest.approx(2.0 - 0.5 * 2.0)

    def test_all_events_stack(self):
        prev, nxt = self._pair(dx=1.0)
        ev = frozenset({EV_COLLISION, EV_OFF_ROAD, EV_RED_LIGHT, EV_STOP_LINE})
        assert compute_reward(prev, nxt, ev) == pytest.approx(1.0 - 150.0)

    @given(
        dx=st.floats(0.0, V_MAX * DT),
        a0=st.sampled_from(ACCEL_BINS),
        a1=st.sampled_from(ACCEL_BINS),
        ev=st.sets(st.sampled_from([EV_COLLISION, EV_OFF_ROAD, EV_RED_LIGHT,
                                    EV_STOP_LINE])),
    )
    @settings(max_examples=200, deadline=None)
    def test_reward_bound(self, dx, a0, a1, ev):
        w = RewardWeights()
        prev, nxt = self._pair(dx=dx, accel0=a0, accel1=a1)
        r = compute_reward(prev, nxt, frozenset(ev))
        bound = (w.progress * V_MAX * DT + w.collision + w.off_road
                 + w.red_light + w.stop_line + w.jerk * 8.0)
        assert abs(r) <= bound


class TestLifecycle:
    def test_step_past_horizon_raises(self):
        spec = _empty_spec(horizon=5)
        scene = make_scene(time_index=5)
        with pytest.raises(LifecycleError):
            step(scene, HOLD, spec)

    def test_done_iff_horizon_or_collision(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=5.0, route_progress=0.0)
        spec = _empty_spec(horizon=6, ego=ego)
        scene = make_scene(ego=ego)
        for t in range(6):
            out = step(scene, HOLD, spec)
            assert out.done == (t == 5)
            assert (EV_COLLISION in out.events) is False
            scene = out.next_scene

    def test_progress_never_decreases_speed_never_negative(self):
        # closed loop under the frozen driver across all templates
        from rdar.driving import act
        from rdar.scene import to_ego_frame
        from rdar.scenarios import TEMPLATES, generate, initial_scene

        for i, template in enumerate(TEMPLATES):
            spec = generate(410 + i, template, 8, horizon=40)
            scene = initial_scene(spec)
            prev = scene.ego.route_progress
            for _ in range(40):
                action = act(to_ego_frame(scene), spec.route.target_speed)
                out = step(scene, action, spec)
                scene = out.next_scene
                assert scene.ego.speed >= 0.0
                assert scene.ego.route_progress >= prev
                prev = scene.ego.route_progress
                if out.done:
                    break


class TestComfort:
    def test_all_zero_is_one(self):
        assert comfort_score([HOLD] * 10, DT) == 1.0

    def test_constant_full_brake(self):
        # mean |a| = 4 at bound 4, no jerk, no lateral: 1 - 1/4
        assert comfort_score([FULL_BRAKE] * 10, DT) == pytest.approx(0.75)

    def test_hand_computed_three_step(self):
        # accels [1, -2, 0]: mean|a|=1 -> 0.25/4; jerks [-15, 10]: mean 12.5 -> (12.5/8)/4
        trace = [DrivingAction(BIN_OF[1.0]), DrivingAction(BIN_OF[-2.0]), HOLD]
        assert comfort_score(trace, DT) == pytest.approx(0.546875, abs=1e-12)

    def test_braking_less_comfortable_than_coasting(self):
        assert comfort_score([FULL_BRAKE] * 5, DT) < comfort_score([HOLD] * 5, DT)

    def test_lateral_terms(self):
        # constant curvature 0.1 at 5 m/s: lat accel 2.5, no jerk of either kind
        n = 8
        got = comfort_score([HOLD] * n, DT, speeds=[5.0] * n, curvatures=[0.1] * n)
        assert got == pytest.approx(1.0 - (2.5 / 3.0) / 4.0)

    def test_empty_trace_rejected(self):
        with pytest.raises(ValueError):
            comfort_score([], DT)

    def test_mismatched_lateral_inputs_rejected(self):
        with pytest.raises(ValueError):
            comfort_score([HOLD] * 4, DT, speeds=[1.0] * 3, curvatures=[0.0] * 4)

    def test_score_clamped_to_zero(self):
        # alternating extremes drive the weighted mean past 1
        trace = [FULL_BRAKE, FULL_ACCEL] * 10
        assert comfort_score(trace, DT) == 0.0


class TestTraceRecord:
    def test_record_round_trips_through_json(self):
        ego = EgoState(position=(0.0, 0.0), heading=0.0, speed=10.0, route_progress=0.0)
        spec = _empty_spec(ego=ego)
        scene = make_scene(ego=ego)
        out = step(scene, FULL_ACCEL, spec)
        rec = trace_record(scene, FULL_ACCEL, out)
        assert rec["digest"] == scene.digest()
        assert rec["accel"] == 2.0
        assert rec["events"] == sorted(out.events)
        assert rec["done"] is out.done
        assert json.loads(json.dumps(rec)) == rec
