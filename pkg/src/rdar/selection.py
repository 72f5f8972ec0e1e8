"""Sampling mathematics over relevance logits.

Covers the full selection lifecycle: softmax over existing slots, ordered
sampling without replacement via Gumbel top-k, the likelihood of an ordered
sample under sequential renormalization,

    P(a) = prod_i  p_{a_i} / (1 - sum_{j<i} p_{a_j}),

its log-space form with gradient (what the policy loss differentiates), and
greedy deployment selection. The Gumbel construction and the sequential
product define the same law; the test suite enforces the equivalence by
enumeration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ScoreVector
from .scene import KSample, N_MAX


class DegenerateDistributionError(ValueError):
    """Sequential renormalization hit a non-positive denominator."""


@dataclass(frozen=True)
class SelectionDistribution:
    """Categorical distribution over agent slots; non-existing slots are
    exactly zero."""

    probs: np.ndarray
    exists: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float64)
        ex = np.ascontiguousarray(self.exists, dtype=bool)
        if p.shape != (N_MAX,) or ex.shape != (N_MAX,):
            raise ValueError("probs and exists must have shape (N_MAX,)")
        if np.any(p < 0.0):
            raise ValueError("probs must be non-negative")
        if np.any(p[~ex] != 0.0):
            raise ValueError("non-existing slots must have probability exactly 0")
        if ex.any() and abs(float(p[ex].sum()) - 1.0) > 1e-12:
            raise ValueError("existing probabilities must sum to 1")
        p.setflags(write=False)
        ex.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "exists", ex)


def softmax_scores(scores: ScoreVector) -> SelectionDistribution:
    """Max-subtracted softmax over existing slots only."""
    ex = scores.exists
    if not ex.any():
        raise ValueError("softmax needs at least one existing slot")
    z = scores.logits[ex]
    z = z - z.max()
    e = np.exp(z)
    p = np.zeros(N_MAX)
    p[ex] = e / e.sum()
    return SelectionDistribution(probs=p, exists=ex)


def _validate_sample(exists: np.ndarray, sample: KSample) -> None:
    for i in sample.indices:
        if not 0 <= i < N_MAX or not exists[i]:
            raise ValueError(f"sample index {i} does not refer to an existing slot")


def sample_probability(dist: SelectionDistribution, sample: KSample) -> float:
    """Probability of drawing the ordered sample without replacement."""
    _validate_sample(dist.exists, sample)
    prob = 1.0
    drawn = 0.0
    for i in sample.indices:
        denom = 1.0 - drawn
        if denom <= 0.0:
            raise DegenerateDistributionError(
                "renormalization denominator is not positive")
        prob *= dist.probs[i] / denom
        drawn += dist.probs[i]
    return float(prob)


def log_likelihood(dist: SelectionDistribution, sample: KSample) -> float:
    """log of sample_probability, computed in log space.

    Denominators are accumulated as sums over the remaining slots rather
    than 1 minus the drawn mass, which keeps them positive and well
    conditioned for peaked distributions.
    """
    _validate_sample(dist.exists, sample)
    remaining = set(int(i) for i in np.flatnonzero(dist.exists))
    total = 0.0
    for i in sample.indices:
        denom = math.fsum(dist.probs[j] for j in sorted(remaining))
        if denom <= 0.0 or dist.probs[i] <= 0.0:
            raise DegenerateDistributionError(
                "renormalization denominator is not positive")
        total += math.log(dist.probs[i]) - math.log(denom)
        remaining.discard(int(i))
    return float(total)


def _logsumexp(x: np.ndarray) -> float:
    m = float(x.max())
    return m + math.log(float(np.exp(x - m).sum()))


def log_likelihood_and_grad(scores: ScoreVector, sample: KSample
                            ) -> tuple[float, np.ndarray]:
    """Ordered-sample log-likelihood directly from logits, plus its exact
    gradient with respect to the logits.

    Each draw contributes phi_{a_i} - logsumexp over the not-yet-drawn
    existing slots; the gradient is the indicator of the drawn slot minus
    the renormalized softmax over that remaining set.
    """
    ex = scores.exists
    _validate_sample(ex, sample)
    phi = scores.logits
    remaining = list(np.flatnonzero(ex))
    total = 0.0
    grad = np.zeros(N_MAX)
    for a in sample.indices:
        idx = np.array(remaining, dtype=int)
        lse = _logsumexp(phi[idx])
        total += float(phi[a]) - lse
        soft = np.exp(phi[idx] - lse)
        grad[idx] -= soft
        grad[a] += 1.0
        remaining.remove(a)
    return total, grad


def gumbel_topk_batch(scores: ScoreVector, k: int, rng: np.random.Generator,
                      n: int) -> np.ndarray:
    """n independent ordered samples without replacement as an (n, k) slot
    array: perturb logits with Gumbel noise, take the k largest in
    decreasing order of the perturbed value.

    Uniform draws are consumed row by row in ascending slot-index order, so
    one batch of n equals n single draws from the same rng state.
    """
    ex = scores.exists
    idx = np.flatnonzero(ex)
    if not 1 <= k <= idx.size:
        raise ValueError(f"k={k} outside [1, {idx.size}] existing slots")
    u = rng.uniform(0.0, 1.0, size=(n, idx.size))
    g = scores.logits[idx][None, :] - np.log(-np.log(u))
    order = np.argsort(-g, axis=1, kind="stable")[:, :k]
    return idx[order]


def gumbel_topk(scores: ScoreVector, k: int, rng: np.random.Generator) -> KSample:
    """One ordered sample without replacement; see gumbel_topk_batch."""
    row = gumbel_topk_batch(scores, k, rng, 1)[0]
    return KSample(indices=tuple(int(s) for s in row))


def greedy_topk(scores: ScoreVector, k: int) -> KSample:
    """Deployment selection: the k largest logits, no sampling; ties broken
    by ascending slot index."""
    ex = scores.exists
    idx = np.flatnonzero(ex)
    if not 1 <= k <= idx.size:
        raise ValueError(f"k={k} outside [1, {idx.size}] existing slots")
    order = np.argsort(-scores.logits[idx], kind="stable")[:k]
    return KSample(indices=tuple(int(idx[j]) for j in order))
