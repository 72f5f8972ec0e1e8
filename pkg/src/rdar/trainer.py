"""Off-policy actor-critic training of the relevance model.

Actors roll the full loop (score -> Gumbel top-k -> mask -> frozen driver ->
simulator) under a parameter snapshot and record the sample log-likelihood as
the behavior policy mu. The learner recomputes likelihoods and values under
the current parameters, applies V-trace corrections, and descends a
four-component loss:

    total = policy + lambda_c * critic + lambda_e * entropy_term
                   + lambda_s * smoothing

where the policy term is -rho_t * log pi(a_t|s_t) * A_t with clipped
importance ratio rho_t and advantage A_t held constant, the critic is a
squared error to the V-trace targets, the entropy term is the negative
entropy of the selection distribution (minimizing the total maximizes
entropy), and smoothing penalizes squared score changes of the same agent
across consecutive steps. Loss terms of non-existing slots are masked.

Two execution modes: a deterministic synchronous mode (one actor, snapshot
refreshed every update, importance ratios exactly 1) and a threaded
asynchronous mode with a bounded trajectory queue.
"""
from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import selection as sel
from .driving import act as driving_act
from .model import ModelParams, ModelTape, NumericError, ScoreVector
from .rng import rng_for
from .scene import DEFAULT_HORIZON, KSample, N_MAX, SceneFeatures, mask_agents, to_ego_frame
from .scenarios import TEMPLATES, ScenarioSpec, generate, initial_scene
from .simulator import DEFAULT_REWARD_WEIGHTS, EV_COLLISION, RewardWeights, step

TRAIN_SEED_SPAN = 1_000_000  # scenario seeds < this are the training pool


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 2e-5
    lambda_critic: float = 0.1
    lambda_entropy: float = 0.2
    lambda_smooth: float = 0.05
    discount: float = 0.95
    rho_bar: float = 1.0
    c_bar: float = 1.0
    rollout_length: int = DEFAULT_HORIZON
    batch_size: int = 8
    total_steps: int = 8000          # learner updates
    k_min: int = 1
    k_max: int = N_MAX
    architecture: str = "full_scene"
    seed: int = 0
    smooth_on_probs: bool = False    # smoothing on probabilities instead of logits
    n_actors: int = 1
    synchronous: bool = True
    checkpoint_every: int = 2000
    queue_capacity: int = 16
    queue_timeout_s: float = 120.0
    templates: tuple[str, ...] = TEMPLATES
    n_agents_min: int = 6
    n_agents_max: int = 14

    def __post_init__(self):
        if min(self.lambda_critic, self.lambda_entropy, self.lambda_smooth) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not self.rho_bar >= self.c_bar > 0.0:
            raise ValueError("need rho_bar >= c_bar > 0")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if not 1 <= self.k_min <= self.k_max <= N_MAX:
            raise ValueError("need 1 <= k_min <= k_max <= N_max")
        if self.architecture not in model_mod.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.batch_size < 1 or self.total_steps < 1 or self.n_actors < 1:
            raise ValueError("batch_size, total_steps, n_actors must be >= 1")
        if not 4 <= self.n_agents_min <= self.n_agents_max <= N_MAX:
            raise ValueError("agent count range must lie in [4, N_max]")
        for t in self.templates:
            if t not in TEMPLATES:
                raise ValueError(f"unknown template {t!r}")


@dataclass(frozen=True)
class Transition:
    """One step of a rollout, recorded under the behavior snapshot."""

    features: SceneFeatures          # unmasked scene, the scoring model input
    sample: KSample
    behavior_log_likelihood: float   # mu(a_t|s_t), Gumbel top-k law
    reward: float
    value_estimate: float            # V under the behavior snapshot
    done: bool
    k_used: int
    scores_behavior: ScoreVector
    agent_ids: tuple[int, ...]       # per-slot persistent id, -1 when absent
    events: frozenset = frozenset()  # simulator events at this step

    def __post_init__(self):
        if self.behavior_log_likelihood > 1e-12:
            raise ValueError("log-likelihood must be <= 0")
        if not (np.isfinite(self.reward) and np.isfinite(self.value_estimate)
                and np.isfinite(self.behavior_log_likelihood)):
            raise ValueError("transition fields must be finite")


@dataclass(frozen=True)
class VTraceOutputs:
    value_targets: np.ndarray
    advantages: np.ndarray
    rhos: np.ndarray

    def __post_init__(self):
        for name in ("value_targets", "advantages", "rhos"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(a).all():
                raise ValueError(f"{name} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def randomize_k(rng: np.random.Generator, existing_count: int,
                config: TrainerConfig) -> int:
    """k ~ Uniform{k_min, ..., min(k_max, existing_count)}, once per scenario."""
    if existing_count < 1:
        raise ValueError("need at least one existing agent")
    hi = min(config.k_max, existing_count)
    lo = min(config.k_min, hi)
    return int(rng.integers(lo, hi + 1))


def collect_rollout(params: ModelParams, spec: ScenarioSpec, k: int,
                    rng: np.random.Generator,
                    weights: RewardWeights = DEFAULT_REWARD_WEIGHTS
                    ) -> list[Transition]:
    """Roll one episode under a fixed parameter snapshot.

    k is clamped per step to the existing-agent count (agents may despawn).
    """
    scene = initial_scene(spec)
    out: list[Transition] = []
    while True:
        feats = to_ego_frame(scene)
        score, value, _ = model_mod.forward(params, feats)
        n_exist = score.existing_count
        if n_exist == 0:
            raise RuntimeError("scenario produced a scene with no agents")
        k_t = min(k, n_exist)
        sample = sel.gumbel_topk(score, k_t, rng)
        log_mu, _ = sel.log_likelihood_and_grad(score, sample)
        masked = mask_agents(feats, sample)
        action = driving_act(masked, spec.route.target_speed)
        outcome = step(scene, action, spec, weights)
        out.append(Transition(
            features=feats, sample=sample,
            behavior_log_likelihood=min(log_mu, 0.0),
            reward=outcome.reward, value_estimate=value.v, done=outcome.done,
            k_used=k_t, scores_behavior=score,
            agent_ids=tuple(a.id if a.exists else -1 for a in scene.agents),
            events=outcome.events))
        scene = outcome.next_scene
        if outcome.done:
            return out


def _forward_all(params: ModelParams, traj: list[Transition]
                 ) -> tuple[list[ScoreVector], np.ndarray, list[ModelTape]]:
    scores, values, tapes = [], [], []
    for tr in traj:
        s, v, tape = model_mod.forward(params, tr.features)
        scores.append(s)
        values.append(v.v)
        tapes.append(tape)
    return scores, np.array(values), tapes


def vtrace(traj: list[Transition], params: ModelParams,
           rho_bar: float = 1.0, c_bar: float = 1.0,
           discount: float = 0.95) -> VTraceOutputs:
    """Clipped importance-weighted value targets and advantages.

    Backward recursion with bootstrap value 0 at the terminal state:
        delta_t = rho_t (r_t + g V_{t+1} - V_t)
        x_t     = delta_t + g c_t x_{t+1}
        v_t     = V_t + x_t
        A_t     = rho_t (r_t + g v_{t+1} - V_t)
    """
    if not traj:
        raise ValueError("vtrace needs a non-empty trajectory")
    T = len(traj)
    values = np.empty(T)
    log_pi = np.empty(T)
    for t, tr in enumerate(traj):
        score, value, _ = model_mod.forward(params, tr.features)
        values[t] = value.v
        log_pi[t], _ = sel.log_likelihood_and_grad(score, tr.sample)
    log_mu = np.array([tr.behavior_log_likelihood for tr in traj])
    d = log_pi - log_mu
    if not np.isfinite(d).all():
        raise NumericError("non-finite importance ratio")
    rhos = np.exp(np.minimum(d, np.log(rho_bar)))
    cs = np.exp(np.minimum(d, np.log(c_bar)))
    rewards = np.array([tr.reward for tr in traj])

    v_next = np.concatenate([values[1:], [0.0]])  # bootstrap 0 at terminal
    deltas = rhos * (rewards + discount * v_next - values)
    x = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + discount * cs[t] * acc
        x[t] = acc
    v_targets = values + x
    v_targets_next = np.concatenate([v_targets[1:], [0.0]])
    advantages = rhos * (rewards + discount * v_targets_next - values)
    return VTraceOutputs(value_targets=v_targets, advantages=advantages, rhos=rhos)


@dataclass(frozen=True)
class LossReport:
    total: float
    policy: float
    critic: float
    entropy: float
    smoothing: float


def _entropy_term(p_exist: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative entropy sum p log p over existing slots and its gradient with
    respect to the existing logits."""
    logp = np.log(p_exist)
    neg_h = float((p_exist * logp).sum())
    grad = p_exist * (logp - neg_h)
    return neg_h, grad


def compute_losses(batch: list[tuple[list[Transition], VTraceOutputs]],
                   params: ModelParams, config: TrainerConfig
                   ) -> tuple[LossReport, np.ndarray]:
    """Loss components and the exact parameter gradient of the total.

    V-trace outputs enter as constants: no gradient flows through rho_t,
    advantages, or value targets. Smoothing pairs logits of the same agent
    id across consecutive steps; agents absent at either step are skipped.
    """
    n_steps = sum(len(traj) for traj, _ in batch)
    if n_steps == 0:
        raise ValueError("empty batch")
    n_pairs = sum(max(len(traj) - 1, 0) for traj, _ in batch)

    policy_sum = 0.0
    critic_sum = 0.0
    entropy_sum = 0.0
    smooth_sum = 0.0
    grad = np.zeros(params.vector.size)

    for traj, vt in batch:
        scores, values, tapes = _forward_all(params, traj)
        T = len(traj)
        dlogits = [np.zeros(N_MAX) for _ in range(T)]
        dvalues = np.zeros(T)

        for t, tr in enumerate(traj):
            ex = scores[t].exists
            log_pi, g_ll = sel.log_likelihood_and_grad(scores[t], tr.sample)
            rho, adv = float(vt.rhos[t]), float(vt.advantages[t])
            policy_sum += -rho * log_pi * adv
            dlogits[t] += (-rho * adv / n_steps) * g_ll

            err = values[t] - vt.value_targets[t]
            critic_sum += err * err
            dvalues[t] += config.lambda_critic * 2.0 * err / n_steps

            p = sel.softmax_scores(scores[t]).probs[ex]
            neg_h, g_h = _entropy_term(p)
            entropy_sum += neg_h
            full = np.zeros(N_MAX)
            full[ex] = g_h
            dlogits[t] += (config.lambda_entropy / n_steps) * full

        if n_pairs > 0:
            for t in range(1, T):
                prev, cur = traj[t - 1], traj[t]
                slot_prev = {aid: i for i, aid in enumerate(prev.agent_ids) if aid >= 0}
                common = [(slot_prev[aid], i)
                          for i, aid in enumerate(cur.agent_ids)
                          if aid >= 0 and aid in slot_prev]
                if not common:
                    continue
                ip = np.array([c[0] for c in common])
                ic = np.array([c[1] for c in common])
                if config.smooth_on_probs:
                    pp = sel.softmax_scores(scores[t - 1]).probs
                    pc = sel.softmax_scores(scores[t]).probs
                    diff = pc[ic] - pp[ip]
                    smooth_sum += float((diff * diff).sum())
                    gp = np.zeros(N_MAX)
                    gc = np.zeros(N_MAX)
                    gp[ip] = -2.0 * diff
                    gc[ic] = 2.0 * diff
                    for s_vec, g_out, tgt in ((scores[t - 1], gp, t - 1),
                                              (scores[t], gc, t)):
                        ex = s_vec.exists
                        pr = sel.softmax_scores(s_vec).probs[ex]
                        ge = g_out[ex]
                        back = pr * (ge - float((pr * ge).sum()))
                        full = np.zeros(N_MAX)
                        full[ex] = back
                        dlogits[tgt] += (config.lambda_smooth / n_pairs) * full
                else:
                    phi_p = scores[t - 1].logits
                    phi_c = scores[t].logits
                    diff = phi_c[ic] - phi_p[ip]
                    smooth_sum += float((diff * diff).sum())
                    scale = config.lambda_smooth / n_pairs
                    np.add.at(dlogits[t], ic, scale * 2.0 * diff)
                    np.add.at(dlogits[t - 1], ip, scale * -2.0 * diff)

        for t in range(T):
            grad += tapes[t].backward(dlogits[t], dvalues[t])

    policy = policy_sum / n_steps
    critic = critic_sum / n_steps
    entropy = entropy_sum / n_steps
    smoothing = smooth_sum / n_pairs if n_pairs > 0 else 0.0
    total = (policy + config.lambda_critic * critic
             + config.lambda_entropy * entropy + config.lambda_smooth * smoothing)
    report = LossReport(total=total, policy=policy, critic=critic,
                        entropy=entropy, smoothing=smoothing)
    for name, val in (("policy", policy), ("critic", critic),
                      ("entropy", entropy), ("smoothing", smoothing)):
        if not np.isfinite(val):
            raise NumericError(f"non-finite {name} loss")
    return report, grad


class AdamOptimizer:
    """Adaptive-moment estimation with the standard decay constants."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, vector: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return vector - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class TrainingError(RuntimeError):
    """Training infrastructure failure (e.g. starved trajectory queue)."""


@dataclass
class TrainResult:
    final_params: ModelParams
    checkpoint_paths: list[Path]
    log_path: Path
    updates: int


def _scenario_stream(config: TrainerConfig, actor_id: int):
    """Infinite deterministic stream of (spec, rollout rng, k) per episode."""
    pick = rng_for("train-scenarios", config.seed, actor_id)
    episode = 0
    while True:
        template = config.templates[int(pick.integers(0, len(config.templates)))]
        n_agents = int(pick.integers(config.n_agents_min, config.n_agents_max + 1))
        scen_seed = int(pick.integers(0, TRAIN_SEED_SPAN))
        spec = generate(scen_seed, template, n_agents, horizon=config.rollout_length)
        rng = rng_for("rollout", config.seed, actor_id, episode)
        n_start = int(spec.tracks[:, 0, 4].sum())  # existing flags at t=0
        k = randomize_k(rng, n_start, config)
        episode += 1
        yield spec, rng, k


def _episode_stats(traj: list[Transition]) -> tuple[float, bool]:
    total_reward = float(sum(tr.reward for tr in traj))
    collided = any(EV_COLLISION in tr.events for tr in traj)
    return total_reward, collided


def train(config: TrainerConfig, out_dir) -> TrainResult:
    """Run the full training loop; writes checkpoints and a JSONL loss log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"
    params = model_mod.init_params(config.seed, config.architecture)
    optimizer = AdamOptimizer(params.vector.size, config.learning_rate)
    checkpoints: list[Path] = []

    if config.synchronous:
        if config.n_actors != 1:
            raise ValueError("synchronous mode requires exactly one actor")
        episodes = _collect_sync(config, lambda: params)
    else:
        episodes = _collect_async(config, lambda: params)

    def save(tag: str) -> Path:
        path = out_dir / f"checkpoint_{tag}.bin"
        model_mod.save_checkpoint(params, path)
        checkpoints.append(path)
        return path

    update = 0
    with open(log_path, "w") as log_f:
        try:
            while update < config.total_steps:
                batch = []
                rewards, collisions, rho_vals = [], [], []
                for _ in range(config.batch_size):
                    traj = next(episodes)
                    vt = vtrace(traj, params, config.rho_bar, config.c_bar,
                                config.discount)
                    batch.append((traj, vt))
                    r, c = _episode_stats(traj)
                    rewards.append(r)
                    collisions.append(c)
                    rho_vals.append(float(vt.rhos.mean()))
                report, grad = compute_losses(batch, params, config)
                new_vec = optimizer.step(params.vector, grad)
                if not np.isfinite(new_vec).all():
                    save("last_good")
                    raise NumericError("non-finite parameter update; "
                                       "last good checkpoint retained")
                params = ModelParams(arch=config.architecture, vector=new_vec)
                update += 1
                log_f.write(json.dumps({
                    "update": update,
                    "total": report.total,
                    "policy": report.policy,
                    "critic": report.critic,
                    "entropy": report.entropy,
                    "smoothing": report.smoothing,
                    "mean_episode_reward": float(np.mean(rewards)),
                    "collision_rate": float(np.mean(collisions)),
                    "rho_mean": float(np.mean(rho_vals)),
                }, sort_keys=True) + "\n")
                if config.checkpoint_every and update % config.checkpoint_every == 0:
                    save(f"{update:06d}")
        finally:
            if hasattr(episodes, "close"):
                episodes.close()

    final = save("final")
    return TrainResult(final_params=params, checkpoint_paths=checkpoints,
                       log_path=log_path, updates=update)


def _collect_sync(config: TrainerConfig, params_ref):
    """Synchronous episode source: always uses the latest parameters."""
    stream = _scenario_stream(config, actor_id=0)

    def gen():
        while True:
            spec, rng, k = next(stream)
            yield collect_rollout(params_ref(), spec, k, rng)

    return gen()


def _collect_async(config: TrainerConfig, params_ref):
    """Threaded actors feeding a bounded queue; snapshots may be stale, which
    is exactly the off-policyness V-trace corrects."""
    q: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
    stop = threading.Event()
    errors: list[BaseException] = []

    def actor(actor_id: int):
        stream = _scenario_stream(config, actor_id)
        try:
            while not stop.is_set():
                spec, rng, k = next(stream)
                traj = collect_rollout(params_ref(), spec, k, rng)
                while not stop.is_set():
                    try:
                        q.put(traj, timeout=0.5)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # surfaced by the learner
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=actor, args=(a,), daemon=True)
               for a in range(config.n_actors)]
    for t in threads:
        t.start()

    def gen():
        try:
            while True:
                try:
                    traj = q.get(timeout=config.queue_timeout_s)
                except queue.Empty:
                    if errors:
                        raise TrainingError("actor failed") from errors[0]
                    raise TrainingError(
                        f"trajectory queue starved for {config.queue_timeout_s}s")
                yield traj
        finally:
            stop.set()
            for t in threads:
                t.join(timeout=5.0)

    return gen()
