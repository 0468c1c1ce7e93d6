"""History collector: linear observation encoders feeding a GRU and an action head.

Trained by behaviour cloning with full-episode backpropagation through time.
Once trained its weights stay frozen; its per-step action distribution is the
teacher signal for fused targets and its hidden state is part of the student
input.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .gridworld import GOAL_CATEGORIES, N_ACTIONS, PATCH_SIZE, VIEW_DIM, Observation
from .nn import Adam, clip_global_norm, soft_cross_entropy, softmax, uniform_init

log = logging.getLogger(__name__)

# input blocks in concatenation order: (name, raw width)
BLOCKS = (
    ("patch", PATCH_SIZE * PATCH_SIZE),
    ("gps", 2),
    ("compass", 1),
    ("prev", N_ACTIONS + 1),  # slot 6 encodes "no previous action"
    ("goal", len(GOAL_CATEGORIES)),
    ("view", VIEW_DIM),
    ("range", 8),
)
# thermometer code of the goal range: stopping hinges on a sharp cut at the
# success radius, which a raw metre value makes hard to learn
RANGE_THRESHOLDS_M = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0)
RAW_DIM = sum(w for _, w in BLOCKS)
DEFAULT_EMBED = {"patch": 64, "gps": 8, "compass": 8, "prev": 8, "goal": 8, "view": 16, "range": 8}
GATES = ("z", "r", "h")


def raw_features(obs: Observation) -> np.ndarray:
    x = np.zeros(RAW_DIM)
    n = PATCH_SIZE * PATCH_SIZE
    x[:n] = obs.patch
    x[n : n + 2] = obs.gps
    x[n + 2] = obs.compass
    o = n + 3
    x[o + (N_ACTIONS if obs.prev_action is None else obs.prev_action)] = 1.0
    o += N_ACTIONS + 1
    x[o + obs.goal] = 1.0
    o += len(GOAL_CATEGORIES)
    x[o : o + VIEW_DIM] = obs.view
    if obs.view[0] > 0:
        x[o + VIEW_DIM :] = obs.view[3] <= np.asarray(RANGE_THRESHOLDS_M)
    return x


def raw_matrix(observations: Iterable[Observation]) -> np.ndarray:
    rows = [raw_features(o) for o in observations]
    return np.array(rows).reshape(len(rows), RAW_DIM)


@dataclass
class PolicyParams:
    tensors: dict[str, np.ndarray]

    @property
    def hidden(self) -> int:
        return self.tensors["gru.b_z"].shape[0]

    @property
    def embed_dims(self) -> dict[str, int]:
        return {name: self.tensors[f"emb_{name}.W"].shape[0] for name, _ in BLOCKS}

    @property
    def feature_dim(self) -> int:
        return sum(self.embed_dims.values())

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()})

    def to_bytes(self) -> bytes:
        return params_to_bytes(self.tensors)


def expected_shapes(embed: dict[str, int], hidden: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, width in BLOCKS:
        shapes[f"emb_{name}.W"] = (embed[name], width)
        shapes[f"emb_{name}.b"] = (embed[name],)
    d = sum(embed[name] for name, _ in BLOCKS)
    for g in GATES:
        shapes[f"gru.W_{g}"] = (hidden, d)
        shapes[f"gru.U_{g}"] = (hidden, hidden)
        shapes[f"gru.b_{g}"] = (hidden,)
    shapes["head.W"] = (N_ACTIONS, hidden)
    shapes["head.b"] = (N_ACTIONS,)
    return shapes


def init_params(seed: int = 0, hidden: int = 64, embed: dict[str, int] | None = None) -> PolicyParams:
    embed = {**DEFAULT_EMBED, **(embed or {})}
    rng = np.random.default_rng(seed)
    shapes = expected_shapes(embed, hidden)
    tensors = {}
    for name, shape in shapes.items():
        weight = shape if len(shape) == 2 else shapes[name.replace(".b", ".W")]
        tensors[name] = uniform_init(rng, shape, weight[1])
    return PolicyParams(tensors)


def validate(params: PolicyParams) -> None:
    t = params.tensors
    for key in ("gru.b_z",) + tuple(f"emb_{n}.W" for n, _ in BLOCKS):
        if key not in t:
            raise ValueError(f"missing tensor {key!r}")
    want = expected_shapes(params.embed_dims, params.hidden)
    for name, shape in want.items():
        if name not in t:
            raise ValueError(f"missing tensor {name!r}")
        if t[name].shape != shape:
            raise ValueError(f"tensor {name!r} has shape {t[name].shape}, expected {shape}")
        if not np.all(np.isfinite(t[name])):
            raise ValueError(f"tensor {name!r} has non-finite values")
    extra = set(t) - set(want)
    if extra:
        raise ValueError(f"unexpected tensors {sorted(extra)}")


# ---------------------------------------------------------------------------
# single-step inference
# ---------------------------------------------------------------------------


def encode(params: PolicyParams, obs: Observation) -> np.ndarray:
    t = params.tensors
    raw = raw_features(obs)
    parts, o = [], 0
    for name, width in BLOCKS:
        parts.append(t[f"emb_{name}.W"] @ raw[o : o + width] + t[f"emb_{name}.b"])
        o += width
    return np.concatenate(parts)


def _sigmoid(v):
    with np.errstate(over="ignore"):  # exp overflow saturates to 0, which is right
        return 1.0 / (1.0 + np.exp(-v))


def gru_step(params: PolicyParams, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    t = params.tensors
    z = _sigmoid(t["gru.W_z"] @ x + t["gru.U_z"] @ h + t["gru.b_z"])
    r = _sigmoid(t["gru.W_r"] @ x + t["gru.U_r"] @ h + t["gru.b_r"])
    cand = np.tanh(t["gru.W_h"] @ x + t["gru.U_h"] @ (r * h) + t["gru.b_h"])
    return (1.0 - z) * h + z * cand


def zero_state(params: PolicyParams) -> np.ndarray:
    return np.zeros(params.hidden)


def head(params: PolicyParams, h: np.ndarray) -> np.ndarray:
    return params.tensors["head.W"] @ h + params.tensors["head.b"]


def forward_step(params: PolicyParams, state: np.ndarray, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    """One observation in, (action distribution, new hidden state) out."""
    h = gru_step(params, encode(params, obs), state)
    return softmax(head(params, h)), h


# ---------------------------------------------------------------------------
# packed sequence forward/backward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Episodes packed end to end; ``offsets`` marks their boundaries."""

    raw: np.ndarray  # (T, RAW_DIM)
    targets: np.ndarray  # (T, 6) target distributions
    offsets: np.ndarray  # (n_episodes + 1,) int64

    @classmethod
    def from_sequences(cls, seqs: Sequence[tuple[np.ndarray, np.ndarray]]) -> "Batch":
        lens = [len(r) for r, _ in seqs]
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        raw = np.concatenate([r for r, _ in seqs]) if seqs else np.zeros((0, RAW_DIM))
        tg = np.concatenate([y for _, y in seqs]) if seqs else np.zeros((0, N_ACTIONS))
        return cls(raw, tg, offsets)

    @property
    def n_steps(self) -> int:
        return self.raw.shape[0]


def _embed_matrix(params: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    t = params.tensors
    dims = params.embed_dims
    e_mat = np.zeros((params.feature_dim, RAW_DIM))
    e_bias = np.zeros(params.feature_dim)
    r = c = 0
    for name, width in BLOCKS:
        d = dims[name]
        e_mat[r : r + d, c : c + width] = t[f"emb_{name}.W"]
        e_bias[r : r + d] = t[f"emb_{name}.b"]
        r += d
        c += width
    return e_mat, e_bias


def sequence_forward(params: PolicyParams, raw: np.ndarray, offsets: np.ndarray):
    """Hidden states for packed episodes plus the caches needed by backward."""
    t = params.tensors
    hd = params.hidden
    e_mat, e_bias = _embed_matrix(params)
    x = raw @ e_mat.T + e_bias
    w = np.concatenate([t[f"gru.W_{g}"] for g in GATES])
    b = np.concatenate([t[f"gru.b_{g}"] for g in GATES])
    ax = (x @ w.T + b).reshape(-1, 3, hd)
    u = np.stack([t[f"gru.U_{g}"] for g in GATES])
    hs, hprev, zs, rs, cs = kernels.gru_forward(np.ascontiguousarray(ax), u, offsets)
    return hs, (x, w, u, hprev, zs, rs, cs)


def loss_and_grads(params: PolicyParams, batch: Batch, need_grads: bool = True):
    """Mean per-step cross-entropy against ``batch.targets`` and its gradient."""
    t = params.tensors
    hs, (x, w, u, hprev, zs, rs, cs) = sequence_forward(params, batch.raw, batch.offsets)
    logits = hs @ t["head.W"].T + t["head.b"]
    loss, dlogits = soft_cross_entropy(logits, batch.targets)
    if not need_grads:
        return loss, None
    g = {}
    g["head.W"] = dlogits.T @ hs
    g["head.b"] = dlogits.sum(axis=0)
    dhs = dlogits @ t["head.W"]
    dax, du = kernels.gru_backward(np.ascontiguousarray(dhs), hprev, zs, rs, cs, u, batch.offsets)
    dax = dax.reshape(-1, 3 * params.hidden)
    dw = dax.T @ x
    db = dax.sum(axis=0)
    hd = params.hidden
    for i, gate in enumerate(GATES):
        g[f"gru.W_{gate}"] = dw[i * hd : (i + 1) * hd]
        g[f"gru.b_{gate}"] = db[i * hd : (i + 1) * hd]
        g[f"gru.U_{gate}"] = du[i]
    dx = dax @ w
    r = c = 0
    dims = params.embed_dims
    for name, width in BLOCKS:
        d = dims[name]
        g[f"emb_{name}.W"] = dx[:, r : r + d].T @ batch.raw[:, c : c + width]
        g[f"emb_{name}.b"] = dx[:, r : r + d].sum(axis=0)
        r += d
        c += width
    return loss, g


def run_states(params: PolicyParams, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Post-step hidden states and action distributions for one episode."""
    offsets = np.array([0, raw.shape[0]], dtype=np.int64)
    hs, _ = sequence_forward(params, raw, offsets)
    t = params.tensors
    return hs, softmax(hs @ t["head.W"].T + t["head.b"])


# ---------------------------------------------------------------------------
# behaviour cloning
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    epochs: int = 40
    batch_episodes: int = 8
    hidden: int = 64
    clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    embed: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EMBED))

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be at least 1")


def onehot(actions: Sequence[int]) -> np.ndarray:
    y = np.zeros((len(actions), N_ACTIONS))
    y[np.arange(len(actions)), list(actions)] = 1.0
    return y


def demo_sequences(corpus) -> list[tuple[np.ndarray, np.ndarray]]:
    """(raw inputs, one-hot actions) per demonstration record."""
    return [
        (raw_matrix(s.observation for s in rec.steps), onehot([s.action for s in rec.steps]))
        for rec in corpus
        if len(rec.steps)
    ]


class TrainingDiverged(FloatingPointError):
    pass


def train_bc(corpus, config: TrainConfig, init: PolicyParams | None = None):
    """Behaviour cloning; returns (params, per-epoch mean training loss)."""
    seqs = demo_sequences(corpus)
    if not seqs:
        raise ValueError("empty demonstration corpus")
    params = init.copy() if init is not None else init_params(config.seed, config.hidden, config.embed)
    opt = Adam(params.tensors, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), config.batch_episodes)):
            batch = Batch.from_sequences([seqs[i] for i in order[start : start + config.batch_episodes]])
            loss, grads = loss_and_grads(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            clip_global_norm(grads, config.clip_norm)
            opt.step(params.tensors, grads)
            total += loss * batch.n_steps
            count += batch.n_steps
        curve.append(total / count)
        log.info("bc epoch %d loss %.4f", epoch, curve[-1])
    return params, curve


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def finite_difference(loss_fn, tensors: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of every tensor."""
    out = {}
    for name, arr in tensors.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * step)
        out[name] = g
    return out


def reference_loss(tensors: dict[str, np.ndarray], batch: Batch, dtype=np.longdouble) -> float:
    """Plain loop forward of the BC loss in ``dtype``; used to refine tiny differences."""
    t = {k: np.asarray(v, dtype=dtype) for k, v in tensors.items()}
    raw = batch.raw.astype(dtype)
    parts = []
    c = 0
    for name, width in BLOCKS:
        parts.append(raw[:, c : c + width] @ t[f"emb_{name}.W"].T + t[f"emb_{name}.b"])
        c += width
    x = np.concatenate(parts, axis=1)
    one = dtype(1)
    total = dtype(0)
    for e in range(len(batch.offsets) - 1):
        h = np.zeros(t["gru.b_z"].shape[0], dtype=dtype)
        for k in range(batch.offsets[e], batch.offsets[e + 1]):
            xk = x[k]
            z = one / (one + np.exp(-(t["gru.W_z"] @ xk + t["gru.U_z"] @ h + t["gru.b_z"])))
            r = one / (one + np.exp(-(t["gru.W_r"] @ xk + t["gru.U_r"] @ h + t["gru.b_r"])))
            cand = np.tanh(t["gru.W_h"] @ xk + t["gru.U_h"] @ (r * h) + t["gru.b_h"])
            h = (one - z) * h + z * cand
            logits = t["head.W"] @ h + t["head.b"]
            m = logits.max()
            logp = logits - m - np.log(np.exp(logits - m).sum())
            total -= (batch.targets[k].astype(dtype) * logp).sum()
    return total / dtype(batch.n_steps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: list[str]
    refined: int = 0  # entries re-evaluated in extended precision


# below this magnitude a double-precision difference quotient is dominated by
# forward-pass roundoff (about 1e-11 absolute at step 1e-5)
REFINE_BELOW = 1e-6


def grad_check(params: PolicyParams, corpus, step: float = 1e-5) -> GradCheckReport:
    """Compare BPTT gradients of the BC loss with central finite differences."""
    seqs = demo_sequences(corpus) if not isinstance(corpus, Batch) else None
    batch = corpus if isinstance(corpus, Batch) else Batch.from_sequences(seqs)
    n_eps = len(batch.offsets) - 1
    lens = np.diff(batch.offsets)
    if n_eps == 0 or batch.n_steps == 0 or (lens == 0).any():
        raise ValueError("grad_check needs 1-3 non-empty episodes")
    if n_eps > 3 or lens.max() > 10:
        raise ValueError("grad_check batch is limited to 3 episodes of at most 10 steps")
    p = params.copy()
    _, analytic = loss_and_grads(p, batch)
    numeric = finite_difference(lambda: loss_and_grads(p, batch, need_grads=False)[0], p.tensors, step)
    refined = 0
    for name, arr in p.tensors.items():
        flat, num = arr.reshape(-1), numeric[name].reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in np.flatnonzero(np.maximum(np.abs(num), np.abs(ana)) < REFINE_BELOW):
            if num[i] == 0.0 and ana[i] == 0.0:
                continue  # parameter never touches the loss
            orig = flat[i]
            hi = np.longdouble(orig) + np.longdouble(step)
            lo = np.longdouble(orig) - np.longdouble(step)
            tp = {k: v.astype(np.longdouble) for k, v in p.tensors.items()}
            tp[name].reshape(-1)[i] = hi
            lp = reference_loss(tp, batch)
            tp[name].reshape(-1)[i] = lo
            lm = reference_loss(tp, batch)
            num[i] = float((lp - lm) / (hi - lo))
            refined += 1
    per = {k: float(relative_error(analytic[k], numeric[k]).max()) for k in p.tensors}
    return GradCheckReport(max(per.values()), per, sorted(per), refined)


# ---------------------------------------------------------------------------
# binary parameter files
# ---------------------------------------------------------------------------

MAGIC = b"NVF1"
FORMAT_VERSION = 1


class ParamFormatError(ValueError):
    pass


def params_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def tensors_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ParamFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ParamFormatError(f"unsupported format version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(data):
                raise ParamFormatError(f"tensor {name!r}: payload truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise ParamFormatError(f"truncated parameter file: {exc}") from exc
    if pos != len(data):
        raise ParamFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save_params(params: PolicyParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params.to_bytes())


def load_params(path) -> PolicyParams:
    with open(path, "rb") as fh:
        params = PolicyParams(tensors_from_bytes(fh.read()))
    validate(params)
    return params
