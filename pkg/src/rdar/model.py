"""Relevance scoring model: per-agent logits plus a scalar value estimate.

Three encoder variants of increasing context:

  agent_features  per-slot projection -> shared per-slot scoring head; slot i
                  sees only slot i.
  agent_encoder   adds one masked single-head self-attention block over agent
                  slots (residual + MLP) before the scoring head.
  full_scene      agent_encoder plus ego and route tokens inside the
                  attention, a latent scene embedding (masked mean over all
                  tokens), and a cross-attention block from agent tokens to
                  that latent before scoring.

The value head is identical across variants: masked mean over the final
agent tokens, concatenated with the raw ego features, through a 2-layer MLP.
All computation runs on the autodiff tape so one forward yields exact
reverse-mode gradients. Slots with exists=0 contribute nothing: their feature
rows are zero by construction, they are masked out of attention keys,
pooling, and the returned logits.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import rng_for
from .scene import (
    AGENT_FEATURE_DIM,
    EGO_FEATURE_DIM,
    N_MAX,
    ROUTE_POINTS,
    SceneFeatures,
)

HIDDEN = 32
ARCHITECTURES = ("agent_features", "agent_encoder", "full_scene")

_ATTN_SCALE = 1.0 / np.sqrt(HIDDEN)

# fixed input scaling so pre-activations are O(1): raw features carry meters
# and m/s (positions to +-100, sentinel distances 1000) which would saturate
# the tanh tokens into exact +-1 and sever the gradient entirely
_AGENT_SCALE = np.array([1 / 50.0, 1 / 50.0,   # relative position
                         1 / 15.0, 1 / 15.0,   # relative velocity
                         1.0, 1.0,             # heading cos/sin
                         1 / 5.0, 1 / 5.0,     # extent
                         1.0, 1.0, 1.0,        # kind one-hot
                         1.0])                 # exists
_ROUTE_SCALE = 1 / 50.0


def _scaled_ego(ego: np.ndarray) -> np.ndarray:
    # distances squash through tanh so the no-stop-ahead sentinel maps to 1
    return np.array([ego[0] / 15.0,
                     np.tanh(ego[1] / 50.0),
                     np.tanh(ego[2] / 50.0),
                     ego[3] / 2.5,
                     ego[4]])


class NumericError(RuntimeError):
    """A non-finite activation appeared; the message names the layer."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or mismatched checkpoint file."""


def _block_layout(prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}_wq", (HIDDEN, HIDDEN)), (f"{prefix}_bq", (HIDDEN,)),
        (f"{prefix}_wk", (HIDDEN, HIDDEN)), (f"{prefix}_bk", (HIDDEN,)),
        (f"{prefix}_wv", (HIDDEN, HIDDEN)), (f"{prefix}_bv", (HIDDEN,)),
        (f"{prefix}_wo", (HIDDEN, HIDDEN)), (f"{prefix}_bo", (HIDDEN,)),
        (f"{prefix}_m1w", (HIDDEN, HIDDEN)), (f"{prefix}_m1b", (HIDDEN,)),
        (f"{prefix}_m2w", (HIDDEN, HIDDEN)), (f"{prefix}_m2b", (HIDDEN,)),
    ]


def layout_for(arch: str) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table defining the flat parameter vector."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    layout = [("proj_w", (AGENT_FEATURE_DIM, HIDDEN)), ("proj_b", (HIDDEN,))]
    if arch in ("agent_encoder", "full_scene"):
        layout += _block_layout("sa")
    if arch == "full_scene":
        layout += [
            ("ego_w", (EGO_FEATURE_DIM, HIDDEN)), ("ego_b", (HIDDEN,)),
            ("route_w", (2 * ROUTE_POINTS, HIDDEN)), ("route_b", (HIDDEN,)),
        ]
        layout += _block_layout("ca")
    layout += [
        ("head_w1", (HIDDEN, HIDDEN)), ("head_b1", (HIDDEN,)),
        ("head_w2", (HIDDEN, 1)), ("head_b2", (1,)),
        ("val_w1", (HIDDEN + EGO_FEATURE_DIM, HIDDEN)), ("val_b1", (HIDDEN,)),
        ("val_w2", (HIDDEN, 1)), ("val_b2", (1,)),
    ]
    return layout


def _offsets(arch: str) -> list[tuple[str, tuple[int, ...], int, int]]:
    out = []
    lo = 0
    for name, shape in layout_for(arch):
        n = int(np.prod(shape))
        out.append((name, shape, lo, lo + n))
        lo += n
    return out


_OFFSET_CACHE = {a: _offsets(a) for a in ARCHITECTURES}


def param_count(arch: str) -> int:
    return _OFFSET_CACHE[arch][-1][3]


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector tagged with its architecture."""

    arch: str
    vector: np.ndarray

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.shape != (param_count(self.arch),):
            raise ValueError(
                f"{self.arch} needs {param_count(self.arch)} parameters, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def named(self, name: str) -> np.ndarray:
        for n, shape, lo, hi in _OFFSET_CACHE[self.arch]:
            if n == name:
                return self.vector[lo:hi].reshape(shape)
        raise KeyError(name)


@dataclass(frozen=True)
class ScoreVector:
    """Per-slot relevance logits; non-existing slots hold 0 and are ignored
    by every consumer."""

    logits: np.ndarray
    exists: np.ndarray

    def __post_init__(self):
        lg = np.ascontiguousarray(self.logits, dtype=np.float64)
        ex = np.ascontiguousarray(self.exists, dtype=bool)
        if lg.shape != (N_MAX,) or ex.shape != (N_MAX,):
            raise ValueError("logits and exists must have shape (N_MAX,)")
        if not np.isfinite(lg).all():
            raise ValueError("logits must be finite")
        lg.setflags(write=False)
        ex.setflags(write=False)
        object.__setattr__(self, "logits", lg)
        object.__setattr__(self, "exists", ex)

    @property
    def existing_count(self) -> int:
        return int(self.exists.sum())


@dataclass(frozen=True)
class ValueEstimate:
    v: float

    def __post_init__(self):
        if not np.isfinite(self.v):
            raise ValueError("value estimate must be finite")


class ModelTape:
    """Forward-pass record: backward(dlogits, dvalue) -> flat gradient."""

    def __init__(self, arch: str, tape: ad.Tape, param_vars: dict,
                 logits_var, value_var, n_params: int):
        self.arch = arch
        self._tape = tape
        self._param_vars = param_vars
        self._logits_var = logits_var
        self._value_var = value_var
        self._n_params = n_params
        self._spent = False

    def backward(self, dlogits: np.ndarray, dvalue: float) -> np.ndarray:
        if self._spent:
            raise RuntimeError("tape already consumed; run a fresh forward")
        self._spent = True
        g = np.zeros(self._n_params)
        if self._logits_var is not None:
            self._logits_var.seed(np.asarray(dlogits, dtype=np.float64).reshape(N_MAX, 1))
            self._value_var.seed(np.array([[float(dvalue)]]))
            self._tape.backward()
            for name, shape, lo, hi in _OFFSET_CACHE[self.arch]:
                pv = self._param_vars[name]
                if pv.grad is not None:
                    g[lo:hi] = pv.grad.reshape(-1)
        return g


def _check(name: str, var: ad.Var) -> None:
    if not np.isfinite(var.value).all():
        raise NumericError(f"non-finite activation in layer {name!r}")


def _attention_block(x: ad.Var, valid: np.ndarray, p: dict, prefix: str) -> ad.Var:
    """Single-head self-attention (keys/values masked to valid tokens),
    residual, then a residual tanh MLP."""
    q = ad.add(ad.matmul(x, p[f"{prefix}_wq"]), p[f"{prefix}_bq"])
    k = ad.add(ad.matmul(x, p[f"{prefix}_wk"]), p[f"{prefix}_bk"])
    v = ad.add(ad.matmul(x, p[f"{prefix}_wv"]), p[f"{prefix}_bv"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), _ATTN_SCALE)
    att = ad.masked_softmax(scores, valid)
    gathered = ad.add(ad.matmul(ad.matmul(att, v), p[f"{prefix}_wo"]), p[f"{prefix}_bo"])
    x = ad.add(x, gathered)
    h = ad.tanh(ad.add(ad.matmul(x, p[f"{prefix}_m1w"]), p[f"{prefix}_m1b"]))
    x = ad.add(x, ad.add(ad.matmul(h, p[f"{prefix}_m2w"]), p[f"{prefix}_m2b"]))
    _check(prefix, x)
    return x


def forward(params: ModelParams, features: SceneFeatures
            ) -> tuple[ScoreVector, ValueEstimate, ModelTape]:
    """Score every agent slot and estimate the state value.

    Returns the activation tape; call tape.backward(dlogits, dvalue) for the
    parameter gradient of dlogits . logits + dvalue * value.
    """
    exists = features.exists_mask
    n_params = param_count(params.arch)
    if not exists.any():
        empty = ModelTape(params.arch, ad.Tape(), {}, None, None, n_params)
        return (ScoreVector(logits=np.zeros(N_MAX), exists=exists),
                ValueEstimate(v=0.0), empty)

    tape = ad.Tape()
    p = {name: ad.Var(params.vector[lo:hi].reshape(shape), tape)
         for name, shape, lo, hi in _OFFSET_CACHE[params.arch]}

    agent_in = features.agent * _AGENT_SCALE
    ego_in = _scaled_ego(features.ego)
    mask_col = exists.astype(np.float64)[:, None]
    tokens = ad.tanh(ad.add(ad.matmul(agent_in, p["proj_w"]), p["proj_b"]))
    tokens = ad.mul_const(tokens, mask_col)
    _check("projection", tokens)

    if params.arch == "agent_features":
        agent_tokens = tokens
    elif params.arch == "agent_encoder":
        agent_tokens = _attention_block(tokens, exists, p, "sa")
    else:
        ego_tok = ad.tanh(ad.add(ad.matmul(ego_in[None, :], p["ego_w"]),
                                 p["ego_b"]))
        route_tok = ad.tanh(ad.add(
            ad.matmul(features.route.reshape(1, -1) * _ROUTE_SCALE, p["route_w"]),
            p["route_b"]))
        stack = ad.concat_rows([tokens, ego_tok, route_tok])
        valid = np.concatenate([exists, [True, True]])
        stack = _attention_block(stack, valid, p, "sa")
        latent = ad.masked_mean_rows(stack, valid)
        agents = ad.slice_rows(stack, 0, N_MAX)
        q = ad.add(ad.matmul(agents, p["ca_wq"]), p["ca_bq"])
        k = ad.add(ad.matmul(latent, p["ca_wk"]), p["ca_bk"])
        v = ad.add(ad.matmul(latent, p["ca_wv"]), p["ca_bv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), _ATTN_SCALE)
        att = ad.masked_softmax(scores, np.array([True]))
        gathered = ad.add(ad.matmul(ad.matmul(att, v), p["ca_wo"]), p["ca_bo"])
        agents = ad.add(agents, gathered)
        h = ad.tanh(ad.add(ad.matmul(agents, p["ca_m1w"]), p["ca_m1b"]))
        agent_tokens = ad.add(agents, ad.add(ad.matmul(h, p["ca_m2w"]), p["ca_m2b"]))
        _check("cross_attention", agent_tokens)

    h = ad.tanh(ad.add(ad.matmul(agent_tokens, p["head_w1"]), p["head_b1"]))
    logits = ad.add(ad.matmul(h, p["head_w2"]), p["head_b2"])
    logits = ad.mul_const(logits, mask_col)
    _check("scoring_head", logits)

    pooled = ad.masked_mean_rows(agent_tokens, exists)
    vh = ad.concat_cols([pooled, ego_in[None, :]])
    vh = ad.tanh(ad.add(ad.matmul(vh, p["val_w1"]), p["val_b1"]))
    value = ad.add(ad.matmul(vh, p["val_w2"]), p["val_b2"])
    _check("value_head", value)

    score = ScoreVector(logits=logits.value[:, 0].copy(), exists=exists)
    estimate = ValueEstimate(v=float(value.value[0, 0]))
    mt = ModelTape(params.arch, tape, p, logits, value, n_params)
    return score, estimate, mt


def init_params(seed: int, arch: str) -> ModelParams:
    """Deterministic init: weights ~ N(0, 1/fan_in), biases 0, and a
    zero-initialized final scoring layer so initial logits are uniform."""
    rng = rng_for("model-init", arch, int(seed))
    chunks = []
    for name, shape in layout_for(arch):
        if name in ("head_w2", "head_b2") or len(shape) == 1:
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[0]
            chunks.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), int(np.prod(shape))))
    return ModelParams(arch=arch, vector=np.concatenate(chunks))


# ---------------------------------------------------------------------------
# checkpoint I/O: RDAR magic, version, arch tag, params, trailing CRC32

_MAGIC = b"RDAR"
_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    arch_b = params.arch.encode("ascii")
    body = (_MAGIC + struct.pack("<II", _VERSION, len(arch_b)) + arch_b
            + struct.pack("<Q", params.vector.size)
            + params.vector.astype("<f8").tobytes())
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", crc))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 8 + 8 + 4:
        raise CheckpointError("file too short to be a checkpoint")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    if body[:4] != _MAGIC:
        raise CheckpointError("bad magic bytes")
    version, arch_len = struct.unpack("<II", body[4:12])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = body[12:12 + arch_len].decode("ascii")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture tag {arch!r}")
    (count,) = struct.unpack("<Q", body[12 + arch_len:20 + arch_len])
    raw = body[20 + arch_len:]
    if count != param_count(arch) or len(raw) != 8 * count:
        raise CheckpointError("parameter count does not match architecture layout")
    vec = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ModelParams(arch=arch, vector=vec)
