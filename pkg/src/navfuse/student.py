"""Student policy: an MLP trained on fused targets, plus its ablation modes.

Input per step is the frozen history policy's encoder features, its hidden
state, its action distribution and the goal one-hot.  Three target modes exist:

* ``fused``        soft cross-entropy against collision-masked fused targets
* ``fused_nomask`` the same without the collision mask
* ``direct``       one-hot cross-entropy against the demonstrated action
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import histpolicy as hp
from .fusion import TargetRecord
from .gridworld import GOAL_CATEGORIES, N_ACTIONS, Observation
from .nn import Adam, soft_cross_entropy, softmax, uniform_init

log = logging.getLogger(__name__)

TARGET_MODES = ("fused", "direct", "fused_nomask")
WIDTH = 128
LAYERS = ("l1", "l2", "out")


def input_dim(hist: hp.PolicyParams) -> int:
    return hist.feature_dim + hist.hidden + N_ACTIONS + len(GOAL_CATEGORIES)


@dataclass
class StudentParams:
    tensors: dict[str, np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.tensors["l1.W"].shape[1]

    def copy(self) -> "StudentParams":
        return StudentParams({k: v.copy() for k, v in self.tensors.items()})

    def to_bytes(self) -> bytes:
        return hp.params_to_bytes(self.tensors)


def init_student(n_in: int, seed: int = 0, width: int = WIDTH) -> StudentParams:
    rng = np.random.default_rng([seed, 3])
    t = {}
    for name, (fan_in, fan_out) in zip(LAYERS, ((n_in, width), (width, width), (width, N_ACTIONS))):
        t[f"{name}.W"] = uniform_init(rng, (fan_out, fan_in), fan_in)
        t[f"{name}.b"] = uniform_init(rng, (fan_out,), fan_in)
    return StudentParams(t)


def validate_student(params: StudentParams, hist: hp.PolicyParams | None = None) -> None:
    t = params.tensors
    names = [f"{n}.{k}" for n in LAYERS for k in ("W", "b")]
    missing = [n for n in names if n not in t]
    if missing:
        raise ValueError(f"missing tensors {missing}")
    width = t["l1.W"].shape[0]
    want = {
        "l1.W": (width, t["l1.W"].shape[1]), "l1.b": (width,),
        "l2.W": (width, width), "l2.b": (width,),
        "out.W": (N_ACTIONS, width), "out.b": (N_ACTIONS,),
    }
    for name, shape in want.items():
        if t[name].shape != shape:
            raise ValueError(f"tensor {name!r} has shape {t[name].shape}, expected {shape}")
        if not np.isfinite(t[name]).all():
            raise ValueError(f"tensor {name!r} has non-finite values")
    if hist is not None and params.input_dim != input_dim(hist):
        raise ValueError(f"student expects {params.input_dim} inputs, history policy provides {input_dim(hist)}")


def student_inputs(features, hist_state, p_sota, goal) -> np.ndarray:
    """Row(s) of [features, hidden state, p_sota, goal one-hot]."""
    features = np.atleast_2d(features)
    goal = np.atleast_1d(np.asarray(goal, dtype=np.int64))
    g = np.zeros((goal.size, len(GOAL_CATEGORIES)))
    g[np.arange(goal.size), goal] = 1.0
    return np.concatenate([features, np.atleast_2d(hist_state), np.atleast_2d(p_sota), g], axis=1)


def mlp_logits(params: StudentParams, x: np.ndarray) -> np.ndarray:
    t = params.tensors
    a1 = np.tanh(x @ t["l1.W"].T + t["l1.b"])
    a2 = np.tanh(a1 @ t["l2.W"].T + t["l2.b"])
    return a2 @ t["out.W"].T + t["out.b"]


def student_forward(params: StudentParams, hist: hp.PolicyParams, obs: Observation, hist_state, p_sota) -> np.ndarray:
    x = student_inputs(hp.encode(hist, obs), hist_state, p_sota, obs.goal)
    return softmax(mlp_logits(params, x))[0]


def loss_and_grads(params: StudentParams, x: np.ndarray, targets: np.ndarray, need_grads: bool = True):
    t = params.tensors
    a1 = np.tanh(x @ t["l1.W"].T + t["l1.b"])
    a2 = np.tanh(a1 @ t["l2.W"].T + t["l2.b"])
    logits = a2 @ t["out.W"].T + t["out.b"]
    loss, dlogits = soft_cross_entropy(logits, targets)
    if not need_grads:
        return loss, None
    g = {"out.W": dlogits.T @ a2, "out.b": dlogits.sum(axis=0)}
    d2 = (dlogits @ t["out.W"]) * (1.0 - a2 * a2)
    g["l2.W"], g["l2.b"] = d2.T @ a1, d2.sum(axis=0)
    d1 = (d2 @ t["l2.W"]) * (1.0 - a1 * a1)
    g["l1.W"], g["l1.b"] = d1.T @ x, d1.sum(axis=0)
    return loss, g


@dataclass(frozen=True)
class StudentTrainConfig:
    target_mode: str = "fused"
    learning_rate: float = 1e-3
    iterations: int = 20_000
    batch_size: int = 6
    seed: int = 0
    width: int = WIDTH

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0 or self.iterations < 0:
            raise ValueError("learning_rate must be positive and iterations non-negative")


class StudentDiverged(FloatingPointError):
    pass


def _episodes(records: Sequence[TargetRecord]) -> "OrderedDict[str, list[TargetRecord]]":
    groups: OrderedDict[str, list[TargetRecord]] = OrderedDict()
    for r in records:
        groups.setdefault(r.episode_id, []).append(r)
    for eid, rs in groups.items():
        if [r.t for r in rs] != list(range(len(rs))):
            raise ValueError(f"episode {eid}: target records are not a contiguous 0..T-1 sequence")
    return groups


def design_matrix(records: Sequence[TargetRecord], hist: hp.PolicyParams, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Student inputs and training targets for every record, in record order."""
    xs, ys = [], []
    for rs in _episodes(records).values():
        raw = hp.raw_matrix(r.step.observation for r in rs)
        offsets = np.array([0, len(rs)], dtype=np.int64)
        hs, (feats, *_) = hp.sequence_forward(hist, raw, offsets)
        p = np.array([r.p_sota for r in rs])
        xs.append(student_inputs(feats, hs, p, [r.step.observation.goal for r in rs]))
        if mode == "direct":
            ys.append(hp.onehot([r.step.action for r in rs]))
        else:
            ys.append(np.array([r.target for r in rs]))
    if not xs:
        raise ValueError("empty target dataset")
    return np.concatenate(xs), np.concatenate(ys)


def batch_schedule(n: int, config: StudentTrainConfig) -> np.ndarray:
    """(iterations, batch_size) indices drawn uniformly with replacement."""
    rng = np.random.default_rng([config.seed, 2])
    return rng.integers(0, n, size=(config.iterations, config.batch_size))


def train_student(
    records: Sequence[TargetRecord], hist: hp.PolicyParams, config: StudentTrainConfig = StudentTrainConfig()
) -> tuple[StudentParams, list[float]]:
    """Adam on uniformly sampled minibatches; returns params and the per-iteration loss."""
    if config.target_mode == "fused_nomask" and any(r.colliding for r in records):
        raise ValueError("fused_nomask training needs targets built without the collision mask")
    frozen = hist.to_bytes()
    x, y = design_matrix(records, hist, config.target_mode)
    params = init_student(x.shape[1], config.seed, config.width)
    opt = Adam(params.tensors, config.learning_rate)
    curve = []
    for it, idx in enumerate(batch_schedule(len(x), config)):
        loss, grads = loss_and_grads(params, x[idx], y[idx])
        if not math.isfinite(loss):
            raise StudentDiverged(f"non-finite loss at iteration {it}")
        opt.step(params.tensors, grads)
        curve.append(loss)
        if (it + 1) % 5000 == 0:
            log.info("student %s iteration %d loss %.4f", config.target_mode, it + 1, float(np.mean(curve[-5000:])))
    if hist.to_bytes() != frozen:
        raise RuntimeError("history policy parameters changed during student training")
    return params, curve


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def reference_loss(tensors: dict[str, np.ndarray], x: np.ndarray, targets: np.ndarray, dtype=np.longdouble) -> float:
    t = {k: np.asarray(v, dtype=dtype) for k, v in tensors.items()}
    total = dtype(0)
    for xi, yi in zip(x.astype(dtype), targets.astype(dtype)):
        a1 = np.tanh(t["l1.W"] @ xi + t["l1.b"])
        a2 = np.tanh(t["l2.W"] @ a1 + t["l2.b"])
        z = t["out.W"] @ a2 + t["out.b"]
        m = z.max()
        total -= (yi * (z - m - np.log(np.exp(z - m).sum()))).sum()
    return total / dtype(len(x))


def grad_check(params: StudentParams, x: np.ndarray, targets: np.ndarray, step: float = 1e-5) -> hp.GradCheckReport:
    """Analytic MLP gradients against central differences (tiny ones refined in extended precision)."""
    p = params.copy()
    _, analytic = loss_and_grads(p, x, targets)
    numeric = hp.finite_difference(lambda: loss_and_grads(p, x, targets, need_grads=False)[0], p.tensors, step)
    refined = 0
    for name, arr in p.tensors.items():
        flat, num, ana = arr.reshape(-1), numeric[name].reshape(-1), analytic[name].reshape(-1)
        for i in np.flatnonzero(np.maximum(np.abs(num), np.abs(ana)) < hp.REFINE_BELOW):
            if num[i] == 0.0 and ana[i] == 0.0:
                continue
            tp = {k: v.astype(np.longdouble) for k, v in p.tensors.items()}
            hi = np.longdouble(flat[i]) + np.longdouble(step)
            lo = np.longdouble(flat[i]) - np.longdouble(step)
            tp[name].reshape(-1)[i] = hi
            lp = reference_loss(tp, x, targets)
            tp[name].reshape(-1)[i] = lo
            lm = reference_loss(tp, x, targets)
            num[i] = float((lp - lm) / (hi - lo))
            refined += 1
    per = {k: float(hp.relative_error(analytic[k], numeric[k]).max()) for k in p.tensors}
    return hp.GradCheckReport(max(per.values()), per, sorted(per), refined)


def save_student(params: StudentParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params.to_bytes())


def load_student(path) -> StudentParams:
    with open(path, "rb") as fh:
        params = StudentParams(hp.tensors_from_bytes(fh.read()))
    validate_student(params)
    return params
