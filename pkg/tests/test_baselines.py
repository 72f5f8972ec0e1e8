"""Tests for the reference selectors and leave-one-out attribution.

The Jensen-Shannon values are checked against a 50-digit mpmath oracle and
its closed-form extremes; closest-k against an independent sort; random-k
against exact uniformity of ordered samples.
"""
import math

import mpmath
import numpy as np
import pytest

from rdar.baselines import (
    attribution_scores,
    attribution_topk,
    closest_k,
    js_divergence,
    random_k,
)
from rdar.driving import policy_distribution
from rdar.rng import rng_for
from rdar.scene import N_MAX, AgentKind, mask_agents, to_ego_frame

from conftest import make_agent, make_scene


def _feats(agents):
    return to_ego_frame(make_scene(agents))


def _spread_agents(n, seed=0):
    rng = rng_for("baseline-scene", seed)
    out = []
    for i in range(n):
        out.append(make_agent(slot_id=i,
                              position=(float(rng.uniform(-60, 60)),
                                        float(rng.uniform(-30, 30))),
                              heading=float(rng.uniform(-math.pi, math.pi)),
                              speed=float(rng.uniform(0, 12))))
    return out


class TestClosestK:
    def test_matches_independent_sort(self):
        for seed in range(8):
            feats = _feats(_spread_agents(9, seed))
            got = closest_k(feats, 4).indices
            rel = feats.agent[:9, :2]
            expected = sorted(range(9),
                              key=lambda i: (math.hypot(rel[i, 0], rel[i, 1]), i))
            assert list(got) == expected[:4]

    def test_distance_ties_break_by_slot(self):
        feats = _feats([make_agent(slot_id=0, position=(0.0, 5.0)),
                        make_agent(slot_id=1, position=(5.0, 0.0)),
                        make_agent(slot_id=2, position=(3.0, 0.0))])
        assert closest_k(feats, 3).indices == (2, 0, 1)

    def test_selected_distances_non_decreasing(self):
        feats = _feats(_spread_agents(12, 3))
        sample = closest_k(feats, 6)
        rel = feats.agent[list(sample.indices), :2]
        d = np.hypot(rel[:, 0], rel[:, 1])
        assert np.all(np.diff(d) >= 0)

    def test_absent_slots_ignored(self):
        feats = _feats([make_agent(slot_id=0, position=(1.0, 0.0), exists=False),
                        make_agent(slot_id=1, position=(40.0, 0.0))])
        assert closest_k(feats, 1).indices == (1,)

    def test_accepts_raw_scene(self):
        scene = make_scene(_spread_agents(5, 4))
        assert closest_k(scene, 2).indices == closest_k(to_ego_frame(scene), 2).indices

    @pytest.mark.parametrize("k", [0, -1, 6])
    def test_k_out_of_range_rejected(self, k):
        with pytest.raises(ValueError):
            closest_k(_feats(_spread_agents(5, 1)), k)


class TestRandomK:
    def test_single_draw_uniform(self):
        feats = _feats(_spread_agents(3, 0))
        rng = rng_for("random-k", 0)
        counts = np.zeros(3)
        n = 30_000
        for _ in range(n):
            counts[random_k(feats, 1, rng).indices[0]] += 1
        np.testing.assert_allclose(counts / n, 1 / 3, atol=0.01)

    def test_ordered_pairs_uniform(self):
        feats = _feats(_spread_agents(3, 1))
        rng = rng_for("random-k", 1)
        counts = {}
        n = 60_000
        for _ in range(n):
            pair = random_k(feats, 2, rng).indices
            counts[pair] = counts.get(pair, 0) + 1
        assert set(counts) == {(a, b) for a in range(3) for b in range(3)
                               if a != b}
        for c in counts.values():
            assert abs(c / n - 1 / 6) < 0.01

    def test_only_existing_slots(self):
        feats = _feats([make_agent(slot_id=0, position=(5.0, 5.0), exists=False),
                        make_agent(slot_id=1, position=(9.0, 3.0)),
                        make_agent(slot_id=2, position=(-4.0, 1.0))])
        rng = rng_for("random-k", 2)
        seen = set()
        for _ in range(200):
            seen.update(random_k(feats, 2, rng).indices)
        assert seen == {1, 2}

    def test_deterministic_under_same_key(self):
        feats = _feats(_spread_agents(6, 2))
        a = [random_k(feats, 3, rng_for("rk", 7)).indices for _ in range(1)]
        b = [random_k(feats, 3, rng_for("rk", 7)).indices for _ in range(1)]
        assert a == b

    def test_k_out_of_range_rejected(self):
        feats = _feats(_spread_agents(4, 5))
        with pytest.raises(ValueError):
            random_k(feats, 5, rng_for("rk", 0))


class TestJSDivergence:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.5, 0.3])
        assert js_divergence(p, p) == 0.0

    def test_disjoint_support_is_ln2(self):
        assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(
            math.log(2), rel=1e-15)

    def test_matches_mpmath_oracle(self):
        p = (0.5, 0.5)
        q = (0.9, 0.1)
        with mpmath.workdps(50):
            mp, mq = [mpmath.mpf(x) for x in p], [mpmath.mpf(x) for x in q]
            m = [(a + b) / 2 for a, b in zip(mp, mq)]
            kl_p = sum(a * mpmath.log(a / c) for a, c in zip(mp, m))
            kl_q = sum(b * mpmath.log(b / c) for b, c in zip(mq, m))
            expected = float((kl_p + kl_q) / 2)
        assert js_divergence(p, q) == pytest.approx(expected, rel=1e-14)

    def test_symmetric(self):
        rng = rng_for("js", 0)
        for _ in range(30):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            assert js_divergence(p, q) == js_divergence(q, p)

    def test_bounds(self):
        rng = rng_for("js", 1)
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            q = rng.dirichlet(np.ones(4))
            v = js_divergence(p, q)
            assert -1e-15 <= v <= math.log(2) + 1e-12

    def test_partial_zero_support_finite(self):
        v = js_divergence([0.0, 1.0], [0.5, 0.5])
        kl_q = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        kl_p = math.log(1.0 / 0.75)
        assert v == pytest.approx(0.5 * kl_p + 0.5 * kl_q, rel=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            js_divergence([0.5, 0.5], [0.3, 0.3, 0.4])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            js_divergence([-0.1, 1.1], [0.5, 0.5])


def _conflict_scene():
    """A pedestrian crossing right in front plus a parked car well off the
    corridor: removing the first changes braking, removing the second cannot."""
    ped = make_agent(slot_id=0, kind=AgentKind.PEDESTRIAN,
                     position=(8.0, 0.5), heading=-math.pi / 2, speed=1.4,
                     extent=(0.5, 0.5))
    parked = make_agent(slot_id=1, position=(20.0, 8.0), speed=0.0)
    return make_scene([ped, parked])


class TestAttribution:
    def test_irrelevant_agent_scores_exactly_zero(self):
        scores, _ = attribution_scores(to_ego_frame(_conflict_scene()))
        assert scores[0] > 0.0
        assert scores[1] == 0.0

    def test_absent_slots_score_zero(self):
        scores, _ = attribution_scores(to_ego_frame(_conflict_scene()))
        assert np.all(scores[2:] == 0.0)
        assert scores.shape == (N_MAX,)

    def test_evaluation_count_is_present_plus_one(self):
        for n in (1, 5, 12):
            feats = _feats(_spread_agents(n, n))
            _, n_evals = attribution_scores(feats)
            assert n_evals == n + 1

    def test_matches_manual_leave_one_out(self):
        feats = _feats(_spread_agents(7, 9))
        scores, _ = attribution_scores(feats, target_speed=10.0)
        base = policy_distribution(feats, 10.0)
        for i in range(7):
            rest = [j for j in range(7) if j != i]
            reduced = policy_distribution(mask_agents(feats, rest), 10.0)
            expected = (0.0 if np.array_equal(reduced.probs, base.probs)
                        else js_divergence(base.probs, reduced.probs))
            assert scores[i] == pytest.approx(expected, rel=1e-14, abs=0.0)

    def test_topk_orders_by_score_descending(self):
        feats = to_ego_frame(_conflict_scene())
        sample, n_evals = attribution_topk(feats, 2)
        assert sample.indices == (0, 1)
        assert n_evals == 3

    def test_topk_ties_break_by_slot(self):
        # two parked agents far off the corridor both score exactly zero
        feats = _feats([make_agent(slot_id=0, position=(30.0, 9.0)),
                        make_agent(slot_id=1, position=(25.0, -9.0))])
        sample, _ = attribution_topk(feats, 2)
        assert sample.indices == (0, 1)

    def test_accepts_raw_scene(self):
        scene = _conflict_scene()
        s1, _ = attribution_scores(scene)
        s2, _ = attribution_scores(to_ego_frame(scene))
        np.testing.assert_array_equal(s1, s2)

    def test_k_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            attribution_topk(to_ego_frame(_conflict_scene()), 3)
