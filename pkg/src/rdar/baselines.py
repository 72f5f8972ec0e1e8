"""Reference agent-selection strategies to compare the learned scores against.

closest_k ranks by Euclidean distance in the ego frame. random_k draws a
uniform ordered sample. Attribution scores each agent by how much removing
it alone shifts the frozen driver's action distribution (Jensen-Shannon
divergence), which costs one policy evaluation per present agent plus one
for the reference; the exact count is returned so callers can account for it.
"""
from __future__ import annotations

import numpy as np

from .driving import CRUISE_SPEED, policy_distribution
from .scene import KSample, SceneFeatures, SceneState, mask_agents, to_ego_frame


def _as_features(x) -> SceneFeatures:
    """Selectors work in the ego frame; accept a raw scene for convenience
    (rigid transforms preserve the distances the selectors rank by)."""
    return to_ego_frame(x) if isinstance(x, SceneState) else x


def _existing_slots(features: SceneFeatures) -> np.ndarray:
    return np.flatnonzero(features.exists_mask)


def _check_k(k: int, n_existing: int) -> None:
    if not 1 <= k <= n_existing:
        raise ValueError(f"k={k} outside [1, {n_existing}]")


def closest_k(features: SceneFeatures, k: int) -> KSample:
    """Slots of the k nearest existing agents, ascending distance, distance
    ties broken by ascending slot index."""
    features = _as_features(features)
    slots = _existing_slots(features)
    _check_k(k, slots.size)
    rel = features.agent[slots, :2]
    dist = np.hypot(rel[:, 0], rel[:, 1])
    order = np.argsort(dist, kind="stable")
    return KSample(indices=tuple(int(s) for s in slots[order[:k]]))


def random_k(features: SceneFeatures, k: int, rng: np.random.Generator) -> KSample:
    """Uniform ordered sample of k existing slots without replacement."""
    features = _as_features(features)
    slots = _existing_slots(features)
    _check_k(k, slots.size)
    perm = rng.permutation(slots.size)
    return KSample(indices=tuple(int(slots[i]) for i in perm[:k]))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in natural log, bounded by ln 2.

    Zero probabilities contribute nothing (0 log 0 = 0).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have matching shapes")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("probabilities must be non-negative")
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        nz = a > 0.0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def attribution_scores(features: SceneFeatures,
                       target_speed: float = CRUISE_SPEED
                       ) -> tuple[np.ndarray, int]:
    """Leave-one-out influence of each agent on the driving distribution.

    Returns per-slot scores (0.0 for absent slots and for agents whose
    removal leaves the distribution bit-identical) and the number of policy
    evaluations consumed, always N_present + 1.
    """
    features = _as_features(features)
    slots = _existing_slots(features)
    scores = np.zeros(features.agent.shape[0])
    base = policy_distribution(features, target_speed)
    n_evals = 1
    for s in slots:
        rest = [int(t) for t in slots if t != s]
        reduced = mask_agents(features, rest)
        dist = policy_distribution(reduced, target_speed)
        n_evals += 1
        if np.array_equal(dist.probs, base.probs):
            continue  # removal changed nothing, score exactly zero
        scores[s] = js_divergence(base.probs, dist.probs)
    return scores, n_evals


def attribution_topk(features: SceneFeatures, k: int,
                     target_speed: float = CRUISE_SPEED
                     ) -> tuple[KSample, int]:
    """Top-k by attribution score, descending, ties by ascending slot index."""
    features = _as_features(features)
    slots = _existing_slots(features)
    _check_k(k, slots.size)
    scores, n_evals = attribution_scores(features, target_speed)
    order = np.argsort(-scores[slots], kind="stable")
    return KSample(indices=tuple(int(s) for s in slots[order[:k]])), n_evals
