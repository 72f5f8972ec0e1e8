"""Closed-loop evaluation: run a selector as a per-step agent filter in front
of the frozen driver and aggregate safety/comfort/progress metrics.

Selectors: "rdar" (greedy top-k of the learned scores, no sampling),
"closest", "random", "attribution", and "none" (no filtering, k treated as
infinite). Progress is reported relative to the no-filter run of the same
scenario, because synthetic scenarios have no human log to compare against.

Per-scenario records keep per-step cost counters (driving-policy evaluations
spent by the selector and scoring-model forwards) so the complexity claims
are checkable: attribution pays N_present + 1 policy evaluations per step,
the learned scorer exactly one forward, closest/random none.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import model as model_mod
from .baselines import attribution_topk, closest_k, random_k
from .driving import act as driving_act
from .model import ModelParams
from .rng import rng_for
from .scene import SceneState, mask_agents, to_ego_frame, wrap_angle
from .scenarios import TEMPLATES, ScenarioSpec, generate, initial_scene
from .selection import greedy_topk
from .simulator import (DEFAULT_REWARD_WEIGHTS, EV_COLLISION, EV_OFF_ROAD,
                        EV_RED_LIGHT, EV_STOP_LINE, comfort_score, step,
                        trace_record)

SELECTORS = ("rdar", "closest", "random", "attribution", "none")
EVAL_SEED_BASE = 1_000_000  # scenario seeds at or above this are held out

_CSV_HEADER = ("selector,k,n_scenarios,collisions_pct,offroad_pct,"
               "traffic_light_pct,stop_line_pct,comfort,progress_ratio")


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    selector: str
    k: float                     # number of kept agents; math.inf for "none"
    n_scenarios: int
    collisions_pct: float
    offroad_pct: float
    traffic_light_pct: float
    stop_line_pct: float
    comfort: float
    progress_ratio: float

    def __post_init__(self):
        for f in ("collisions_pct", "offroad_pct", "traffic_light_pct",
                  "stop_line_pct"):
            v = getattr(self, f)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{f} must be a percentage in [0, 100]")
        if not 0.0 <= self.comfort <= 1.0:
            raise ValueError("comfort must lie in [0, 1]")
        if self.progress_ratio < 0.0:
            raise ValueError("progress_ratio must be non-negative")


@dataclass(frozen=True)
class ScenarioResult:
    """Everything one scenario rollout produced, before aggregation."""

    template: str
    seed: int
    collided: bool
    offroad: bool
    ran_red_light: bool
    skipped_stop_line: bool
    comfort: float
    progress: float
    actions: tuple[int, ...]           # accel bin per step
    selections: tuple[tuple[int, ...], ...]
    n_present: tuple[int, ...]         # existing agents per step
    driving_evals: tuple[int, ...]     # selector-side policy evaluations
    model_forwards: tuple[int, ...]    # scoring forwards per step
    final_digest: str
    trace: tuple[dict, ...]


def _select(selector: str, feats, k_t: int, params, rng):
    """One selection step: (sample or None, driving evals, model forwards)."""
    if selector == "none":
        return None, 0, 0
    if selector == "rdar":
        scores, _, _ = model_mod.forward(params, feats)
        return greedy_topk(scores, k_t), 0, 1
    if selector == "closest":
        return closest_k(feats, k_t), 0, 0
    if selector == "random":
        return random_k(feats, k_t, rng), 0, 0
    if selector == "attribution":
        sample, n_evals = attribution_topk(feats, k_t)
        return sample, n_evals, 0
    raise EvaluationError(f"unknown selector {selector!r}")


def evaluate_scenario(spec: ScenarioSpec, selector: str, k,
                      params: ModelParams | None = None,
                      selector_seed: int = 0,
                      weights=DEFAULT_REWARD_WEIGHTS) -> ScenarioResult:
    """Roll one scenario to completion under a selector filter."""
    if selector not in SELECTORS:
        raise EvaluationError(f"unknown selector {selector!r}")
    if selector == "rdar" and params is None:
        raise EvaluationError("rdar selector needs model parameters")
    if selector != "none" and not (k == math.inf or k >= 1):
        raise ValueError("k must be >= 1 (or infinite for selector=none)")
    rng = rng_for("eval-random", selector_seed, spec.template, spec.seed)

    scene = initial_scene(spec)
    taken, speeds, curvatures = [], [], []
    actions, selections, n_present = [], [], []
    driving_evals, model_forwards = [], []
    events_seen: set[str] = set()
    trace = []
    while True:
        feats = to_ego_frame(scene)
        n_exist = int(feats.exists_mask.sum())
        k_t = n_exist if k == math.inf else min(int(k), n_exist)
        sample, d_evals, m_fwd = _select(selector, feats, k_t, params, rng)
        masked = feats if sample is None else mask_agents(feats, sample)
        action = driving_act(masked, spec.route.target_speed)
        outcome = step(scene, action, spec, weights)
        next_ego = outcome.next_scene.ego

        taken.append(action)
        speeds.append(next_ego.speed)
        ds = next_ego.route_progress - scene.ego.route_progress
        dh = wrap_angle(next_ego.heading - scene.ego.heading)
        curvatures.append(dh / ds if ds > 1e-9 else 0.0)
        actions.append(action.accel_bin)
        selections.append(tuple(sample.indices) if sample is not None else ())
        n_present.append(n_exist)
        driving_evals.append(d_evals)
        model_forwards.append(m_fwd)
        events_seen.update(outcome.events)
        trace.append(trace_record(scene, action, outcome))

        scene = outcome.next_scene
        if outcome.done:
            break

    comfort = comfort_score(taken, spec.dt, speeds=np.array(speeds),
                            curvatures=np.array(curvatures))
    return ScenarioResult(
        template=spec.template, seed=spec.seed,
        collided=EV_COLLISION in events_seen,
        offroad=EV_OFF_ROAD in events_seen,
        ran_red_light=EV_RED_LIGHT in events_seen,
        skipped_stop_line=EV_STOP_LINE in events_seen,
        comfort=comfort, progress=scene.ego.route_progress,
        actions=tuple(actions), selections=tuple(selections),
        n_present=tuple(n_present), driving_evals=tuple(driving_evals),
        model_forwards=tuple(model_forwards),
        final_digest=scene.digest(), trace=tuple(trace))


def held_out_corpus(per_template: int = 500,
                    templates: tuple[str, ...] = TEMPLATES,
                    horizon: int = 50) -> list[ScenarioSpec]:
    """The fixed evaluation corpus: held-out seeds, agent counts drawn from
    a corpus-owned stream so they never overlap training draws."""
    corpus = []
    for template in templates:
        for i in range(per_template):
            seed = EVAL_SEED_BASE + i
            n_agents = int(rng_for("eval-corpus", template, seed).integers(6, 15))
            corpus.append(generate(seed, template, n_agents, horizon=horizon))
    return corpus


def run_scenarios(corpus: list[ScenarioSpec], selector: str, k,
                  params: ModelParams | None = None, selector_seed: int = 0,
                  workers: int = 1) -> list[ScenarioResult]:
    """Per-scenario results in corpus order, independent of worker count."""
    if workers <= 1:
        return [evaluate_scenario(s, selector, k, params, selector_seed)
                for s in corpus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(evaluate_scenario, s, selector, k, params,
                            selector_seed) for s in corpus]
        return [f.result() for f in futs]


def aggregate(results: list[ScenarioResult], selector: str, k,
              reference: list[ScenarioResult] | None = None) -> MetricsReport:
    """Reduce per-scenario results to a MetricsReport.

    reference supplies the no-filter run of the same corpus (same order) for
    the progress ratio; omit it for selector=none, whose ratio is exactly 1.
    """
    if not results:
        raise ValueError("no results to aggregate")
    n = len(results)
    if reference is None:
        ratios = [1.0] * n
    else:
        if len(reference) != n:
            raise ValueError("reference length mismatch")
        ratios = [r.progress / ref.progress if ref.progress > 0.0 else 1.0
                  for r, ref in zip(results, reference)]
    return MetricsReport(
        selector=selector, k=k, n_scenarios=n,
        collisions_pct=100.0 * sum(r.collided for r in results) / n,
        offroad_pct=100.0 * sum(r.offroad for r in results) / n,
        traffic_light_pct=100.0 * sum(r.ran_red_light for r in results) / n,
        stop_line_pct=100.0 * sum(r.skipped_stop_line for r in results) / n,
        comfort=float(np.mean([r.comfort for r in results])),
        progress_ratio=float(np.mean(ratios)))


def run_closed_loop(selector: str, k, corpus: list[ScenarioSpec],
                    params: ModelParams | None = None, selector_seed: int = 0,
                    workers: int = 1,
                    reference: list[ScenarioResult] | None = None
                    ) -> MetricsReport:
    """Evaluate one selector/k cell over a corpus."""
    results = run_scenarios(corpus, selector, k, params, selector_seed, workers)
    if selector == "none":
        reference = None
    elif reference is None:
        reference = run_scenarios(corpus, "none", math.inf, None, selector_seed,
                                  workers)
    return aggregate(results, selector, k, reference)


def k_sweep(selectors: list[str], k_values: list[int],
            corpus: list[ScenarioSpec], params: ModelParams | None = None,
            selector_seed: int = 0, workers: int = 1) -> list[MetricsReport]:
    """Cartesian product of selectors and k values, one report per cell.

    selector=none ignores k and contributes a single row with k infinite.
    The no-filter reference is computed once and shared by every cell.
    """
    reference = run_scenarios(corpus, "none", math.inf, None, selector_seed,
                              workers)
    reports = []
    for selector in selectors:
        if selector == "none":
            reports.append(aggregate(reference, "none", math.inf))
            continue
        for k in k_values:
            results = run_scenarios(corpus, selector, k, params, selector_seed,
                                    workers)
            reports.append(aggregate(results, selector, k, reference))
    return reports


def _fmt_k(k) -> str:
    return "inf" if k == math.inf else str(int(k))


def metrics_to_csv(reports: list[MetricsReport]) -> str:
    lines = [_CSV_HEADER]
    for r in reports:
        lines.append(",".join([
            r.selector, _fmt_k(r.k), str(r.n_scenarios),
            repr(r.collisions_pct), repr(r.offroad_pct),
            repr(r.traffic_light_pct), repr(r.stop_line_pct),
            repr(r.comfort), repr(r.progress_ratio)]))
    return "\n".join(lines) + "\n"


def metrics_from_csv(text: str) -> list[MetricsReport]:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError("unexpected CSV header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 9:
            raise ValueError(f"malformed CSV row: {ln!r}")
        k = math.inf if parts[1] == "inf" else int(parts[1])
        out.append(MetricsReport(
            selector=parts[0], k=k, n_scenarios=int(parts[2]),
            collisions_pct=float(parts[3]), offroad_pct=float(parts[4]),
            traffic_light_pct=float(parts[5]), stop_line_pct=float(parts[6]),
            comfort=float(parts[7]), progress_ratio=float(parts[8])))
    return out


def metrics_to_json_obj(reports: list[MetricsReport]) -> list[dict]:
    out = []
    for r in reports:
        d = {f.name: getattr(r, f.name) for f in fields(MetricsReport)}
        d["k"] = _fmt_k(r.k)
        out.append(d)
    return out


# --- relevance visualization -------------------------------------------------

_LOW_COLOR = (173, 216, 230)   # light blue
_HIGH_COLOR = (255, 0, 0)      # red


def _lerp_color(t: float) -> str:
    c = [round(lo + t * (hi - lo)) for lo, hi in zip(_LOW_COLOR, _HIGH_COLOR)]
    return f"rgb({c[0]},{c[1]},{c[2]})"


def _poly(points) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in points)


def render_relevance_svg(scene: SceneState, scores, k: int) -> str:
    """Top-down scene drawing with relevance dots over the k best-scored
    agents. Ego is black, other agents gray; dot colors interpolate linearly
    from light blue (lowest score among the selected) to red (highest).
    Output bytes are a pure function of the inputs.
    """
    from .simulator import obb_corners  # local import avoids a cycle at load

    sample = greedy_topk(scores, k)
    sel = list(sample.indices)
    sel_scores = [float(scores.logits[i]) for i in sel]
    lo, hi = min(sel_scores), max(sel_scores)
    span = hi - lo

    pts = [tuple(w) for w in scene.route.waypoints]
    xs = [p[0] for p in pts] + [scene.ego.position[0]]
    ys = [p[1] for p in pts] + [scene.ego.position[1]]
    for a in scene.agents:
        if a.exists:
            xs.append(a.position[0])
            ys.append(a.position[1])
    margin = 8.0
    x0, x1 = min(xs) - margin, max(xs) + margin
    y0, y1 = min(ys) - margin, max(ys) + margin
    w, h = x1 - x0, y1 - y0

    def fy(y: float) -> float:  # svg y grows downward
        return y1 - (y - y0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2f} {h:.2f}" '
        f'width="{w * 6:.0f}" height="{h * 6:.0f}">',
        f'<rect x="0" y="0" width="{w:.2f}" height="{h:.2f}" fill="#f4f4f4"/>',
        '<polyline points="'
        + _poly((p[0] - x0, fy(p[1]) - 0.0) for p in pts)
        + '" fill="none" stroke="#888888" stroke-width="0.6" stroke-dasharray="2,1.2"/>',
    ]
    for s_line in scene.route.stop_lines:
        p = scene.route.point_at(s_line)
        hd = scene.route.heading_at(s_line)
        nx, ny = -math.sin(hd), math.cos(hd)
        a = (p[0] - 2.5 * nx - x0, fy(p[1] - 2.5 * ny))
        b = (p[0] + 2.5 * nx - x0, fy(p[1] + 2.5 * ny))
        parts.append(f'<line x1="{a[0]:.2f}" y1="{a[1]:.2f}" x2="{b[0]:.2f}" '
                     f'y2="{b[1]:.2f}" stroke="#cc4444" stroke-width="0.5"/>')

    for slot, agent in enumerate(scene.agents):
        if not agent.exists:
            continue
        corners = obb_corners(agent.position[0], agent.position[1],
                              agent.heading, agent.extent[0], agent.extent[1])
        parts.append('<polygon points="'
                     + _poly((c[0] - x0, fy(c[1])) for c in corners)
                     + '" fill="#9a9a9a" stroke="#555555" stroke-width="0.15"/>')

    ego = scene.ego
    corners = obb_corners(ego.position[0], ego.position[1], ego.heading,
                          4.8, 2.0)
    parts.append('<polygon points="'
                 + _poly((c[0] - x0, fy(c[1])) for c in corners)
                 + '" fill="#000000"/>')

    for slot, sc in zip(sel, sel_scores):
        t = 1.0 if span == 0.0 else (sc - lo) / span
        agent = scene.agents[slot]
        parts.append(
            f'<circle class="relevance-dot" cx="{agent.position[0] - x0:.2f}" '
            f'cy="{fy(agent.position[1]):.2f}" r="1.1" '
            f'fill="{_lerp_color(t)}" stroke="#222222" stroke-width="0.1"/>')

    # color-scale legend, bottom-left
    steps = 12
    bar_w, bar_h = 2.2, 1.2
    bx, by = 2.0, h - 3.5
    for i in range(steps):
        t = i / (steps - 1)
        parts.append(f'<rect x="{bx + i * bar_w:.2f}" y="{by:.2f}" '
                     f'width="{bar_w:.2f}" height="{bar_h:.2f}" '
                     f'fill="{_lerp_color(t)}"/>')
    parts.append(f'<text x="{bx:.2f}" y="{by - 0.6:.2f}" font-size="1.6" '
                 f'fill="#222222">relevance: low to high</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
