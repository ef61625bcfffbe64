"""RotatE scoring, self-adversarial negative sampling loss and Adam training.

Entities are complex vectors stored as ``(num_entities, 2*d)`` reals (real
parts first, imaginary parts second).  Relations are stored as phases so that
every relation coordinate has unit modulus by construction.  Losses and
gradients are accumulated in float64; trained parameters are stored as
float32, which is also the checkpoint format.
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .kg import KnowledgeGraph

__all__ = [
    "RotateParams",
    "TrainConfig",
    "NegativeBatch",
    "NegativeSampler",
    "Gradients",
    "EpochRecord",
    "TrainingError",
    "init_params",
    "score",
    "distances",
    "negative_batch",
    "positive_loss_term",
    "total_loss",
    "Adam",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_history",
]

MAX_REJECTIONS = 100

_CKPT_MAGIC = b"ROTC"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIId")

_PHASE_HI32 = np.nextafter(np.float32(np.pi), np.float32(0))
_PHASE_LO32 = np.nextafter(np.float32(-np.pi), np.float32(0))


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class RotateParams:
    entity: np.ndarray  # (E, 2d)
    phase: np.ndarray  # (R, d)
    gamma: float

    def __post_init__(self):
        if self.entity.ndim != 2 or self.entity.shape[1] % 2:
            raise ValueError("entity embeddings must be (E, 2d)")
        if self.phase.ndim != 2 or self.phase.shape[1] * 2 != self.entity.shape[1]:
            raise ValueError("phase array must be (R, d) matching the entity dimension")
        if not self.gamma > 0:
            raise ValueError("margin must be positive")

    @property
    def dim(self) -> int:
        return self.phase.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.phase.shape[0]

    def copy(self) -> "RotateParams":
        return RotateParams(self.entity.copy(), self.phase.copy(), self.gamma)

    def astype(self, dtype) -> "RotateParams":
        return RotateParams(self.entity.astype(dtype), self.phase.astype(dtype), self.gamma)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 256
    batch_size: int = 512
    learning_rate: float = 0.004
    margin: float = 9.0
    adversarial_temperature: float = 0.34
    negatives: int = 33
    epochs: int = 200
    loss_mode: str = "weighted"
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "batch_size", "negatives", "epochs"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "margin", "adversarial_temperature"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive")
        if self.loss_mode not in ("weighted", "standard"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _wrap_phase(phase: np.ndarray) -> np.ndarray:
    wrapped = np.mod(phase.astype(np.float64) + np.pi, 2 * np.pi) - np.pi
    if phase.dtype == np.float32:
        return np.clip(wrapped.astype(np.float32), _PHASE_LO32, _PHASE_HI32)
    return wrapped


def init_params(num_entities: int, num_relations: int, dim: int, gamma: float, seed: int, dtype=np.float32) -> RotateParams:
    """Uniform init: entity parts in ``±(gamma+2)/dim``, phases in ``[-pi, pi)``."""
    if num_entities <= 0 or num_relations <= 0 or dim <= 0:
        raise ValueError("counts and dim must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = (gamma + 2.0) / dim
    ent = rng.uniform(-bound, bound, size=(num_entities, 2 * dim))
    phase = rng.uniform(-np.pi, np.pi, size=(num_relations, dim))
    return RotateParams(ent.astype(dtype), _wrap_phase(phase.astype(dtype)), float(gamma))


def _modulus(params: RotateParams, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-coordinate ``|h * e^{i theta} - t|``, shape ``(..., d)``."""
    d = params.dim
    hv = params.entity[h].astype(np.float64)
    tv = params.entity[t].astype(np.float64)
    th = params.phase[r].astype(np.float64)
    a, b = hv[..., :d], hv[..., d:]
    c, s = np.cos(th), np.sin(th)
    u = a * c - b * s - tv[..., :d]
    v = a * s + b * c - tv[..., d:]
    return np.sqrt(u * u + v * v)


def _check_ids(params: RotateParams, h, r, t):
    for arr, n, what in ((h, params.num_entities, "entity"), (t, params.num_entities, "entity"), (r, params.num_relations, "relation")):
        if np.size(arr) and (np.min(arr) < 0 or np.max(arr) >= n):
            raise IndexError(f"{what} id out of range")


def distances(params: RotateParams, triples: np.ndarray) -> np.ndarray:
    """Sum over coordinates of ``|h * e^{i theta} - t|`` for ``(..., 3)`` id triples."""
    tr = np.asarray(triples, dtype=np.int64)
    h, r, t = tr[..., 0], tr[..., 1], tr[..., 2]
    _check_ids(params, h, r, t)
    return _modulus(params, h, r, t).sum(axis=-1)


def score(params: RotateParams, triple) -> float | np.ndarray:
    """``margin - distance``; higher means more plausible."""
    tr = np.asarray(triple, dtype=np.int64)
    out = params.gamma - distances(params, tr)
    return float(out) if tr.ndim == 1 else out


class NegativeBatch(NamedTuple):
    """Corruptions of each positive: ``triples`` is ``(B, n, 3)``; ``head_side`` marks head replacement."""

    triples: np.ndarray
    head_side: np.ndarray


def _keys(triples: np.ndarray, num_entities: int, num_relations: int) -> np.ndarray:
    return (triples[..., 0] * num_relations + triples[..., 1]) * num_entities + triples[..., 2]


class NegativeSampler:
    """Uniform head-or-tail corruption with rejection of known triples.

    The replacement is drawn uniformly from entities other than the one being
    replaced.  A draw reproducing a known triple is redrawn, up to
    ``MAX_REJECTIONS`` attempts, after which the last draw is kept.
    """

    def __init__(self, known: np.ndarray, num_entities: int, num_relations: int):
        if num_entities < 2:
            raise ValueError("corruption needs at least two entities")
        self.num_entities = num_entities
        self.num_relations = num_relations
        self._known = np.unique(_keys(np.asarray(known, dtype=np.int64).reshape(-1, 3), num_entities, num_relations))

    def is_known(self, triples: np.ndarray) -> np.ndarray:
        keys = _keys(triples, self.num_entities, self.num_relations)
        if len(self._known) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._known, keys)
        pos = np.minimum(pos, len(self._known) - 1)
        return self._known[pos] == keys

    def _draw(self, rng: np.random.Generator, original: np.ndarray) -> np.ndarray:
        repl = rng.integers(0, self.num_entities - 1, size=original.shape)
        return repl + (repl >= original)

    def sample(self, positives: np.ndarray, n: int, rng: np.random.Generator) -> NegativeBatch:
        if n < 1:
            raise ValueError("need at least one negative per positive")
        pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
        head_side = rng.random((len(pos), n)) < 0.5
        neg = np.repeat(pos[:, None, :], n, axis=1)
        slot = np.where(head_side, 0, 2)
        original = np.take_along_axis(neg, slot[..., None], axis=2)[..., 0]
        repl = self._draw(rng, original)
        rows, cols = np.indices(slot.shape)
        neg[rows, cols, slot] = repl
        todo = self.is_known(neg)
        for _ in range(MAX_REJECTIONS - 1):
            if not todo.any():
                break
            bi, ni = np.nonzero(todo)
            neg[bi, ni, slot[bi, ni]] = self._draw(rng, original[bi, ni])
            todo[bi, ni] = self.is_known(neg[bi, ni])
        return NegativeBatch(neg, head_side)


def negative_batch(graph: KnowledgeGraph, positives: np.ndarray, n: int, seed: int) -> NegativeBatch:
    sampler = NegativeSampler(graph.triples, graph.num_entities, graph.num_relations)
    return sampler.sample(positives, n, np.random.Generator(np.random.PCG64(seed)))


@dataclass
class Gradients:
    """Sparse gradient: rows of the entity / phase tables and their values."""

    entity_rows: np.ndarray
    entity: np.ndarray
    phase_rows: np.ndarray
    phase: np.ndarray

    def dense(self, params: RotateParams) -> tuple[np.ndarray, np.ndarray]:
        ge = np.zeros(params.entity.shape, dtype=np.float64)
        gp = np.zeros(params.phase.shape, dtype=np.float64)
        ge[self.entity_rows] = self.entity
        gp[self.phase_rows] = self.phase
        return ge, gp


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


@njit(cache=True)
def _distance_kernel(ent, cos, sin, h, r, t):
    M = h.shape[0]
    d = cos.shape[1]
    out = np.empty(M, dtype=np.float64)
    for i in range(M):
        hi, ri, ti = h[i], r[i], t[i]
        acc = 0.0
        for j in range(d):
            a = np.float64(ent[hi, j])
            b = np.float64(ent[hi, d + j])
            c = cos[ri, j]
            s = sin[ri, j]
            u = a * c - b * s - ent[ti, j]
            v = a * s + b * c - ent[ti, d + j]
            acc += math.sqrt(u * u + v * v)
        out[i] = acc
    return out


@njit(cache=True)
def _gradient_kernel(ent, cos, sin, h, r, t, g_dist, h_row, r_row, t_row, g_ent, g_phase):
    # rows are visited in order so the float accumulation order is fixed
    M = h.shape[0]
    d = cos.shape[1]
    for i in range(M):
        gd = g_dist[i]
        if gd == 0.0:
            continue
        hi, ri, ti = h[i], r[i], t[i]
        hr, rr, tr = h_row[i], r_row[i], t_row[i]
        for j in range(d):
            a = np.float64(ent[hi, j])
            b = np.float64(ent[hi, d + j])
            c = cos[ri, j]
            s = sin[ri, j]
            re = a * c - b * s
            im = a * s + b * c
            u = re - ent[ti, j]
            v = im - ent[ti, d + j]
            m = math.sqrt(u * u + v * v)
            if m == 0.0:
                continue
            gu = gd * u / m
            gv = gd * v / m
            g_ent[hr, j] += gu * c + gv * s
            g_ent[hr, d + j] += gv * c - gu * s
            g_ent[tr, j] -= gu
            g_ent[tr, d + j] -= gv
            g_phase[rr, j] += gv * re - gu * im


def _trig(params: RotateParams) -> tuple[np.ndarray, np.ndarray]:
    ph = params.phase.astype(np.float64)
    return np.cos(ph), np.sin(ph)


def _loss_and_grad(
    params: RotateParams,
    positives: np.ndarray,
    negatives: np.ndarray,
    weights: np.ndarray,
    alpha: float,
) -> tuple[float, np.ndarray, Gradients]:
    """Weighted self-adversarial loss over a batch; returns (total, per-positive terms, gradients)."""
    gamma = params.gamma
    B, n = negatives.shape[:2]
    tri = np.concatenate([positives[:, None, :], negatives], axis=1).reshape(-1, 3)  # (B*(1+n), 3)
    h, r, t = (np.ascontiguousarray(tri[:, k]) for k in range(3))
    _check_ids(params, h, r, t)
    cos, sin = _trig(params)
    ent = np.ascontiguousarray(params.entity)
    dist = _distance_kernel(ent, cos, sin, h, r, t).reshape(B, 1 + n)
    d_pos, d_neg = dist[:, 0], dist[:, 1:]

    logits = alpha * (gamma - d_neg)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)

    terms = _softplus(d_pos - gamma) + (p * _softplus(gamma - d_neg)).sum(axis=1)
    total = float(np.dot(weights, terms))

    g_dist = np.empty_like(dist)
    g_dist[:, 0] = weights * _sigmoid(d_pos - gamma)
    g_dist[:, 1:] = -weights[:, None] * p * _sigmoid(gamma - d_neg)

    ent_rows, ent_inv = np.unique(np.concatenate([h, t]), return_inverse=True)
    ph_rows, ph_inv = np.unique(r, return_inverse=True)
    g_ent = np.zeros((len(ent_rows), ent.shape[1]), dtype=np.float64)
    g_ph = np.zeros((len(ph_rows), params.dim), dtype=np.float64)
    M = len(h)
    _gradient_kernel(ent, cos, sin, h, r, t, g_dist.ravel(), ent_inv[:M], ph_inv, ent_inv[M:], g_ent, g_ph)
    return total, terms, Gradients(ent_rows, g_ent, ph_rows, g_ph)


def positive_loss_term(params: RotateParams, positive, negatives, alpha: float) -> tuple[float, Gradients]:
    """Self-adversarial loss of one positive against its negatives.

    The softmax weights over negatives are treated as constants when
    differentiating.
    """
    pos = np.asarray(positive, dtype=np.int64).reshape(1, 3)
    neg = np.asarray(negatives, dtype=np.int64).reshape(1, -1, 3)
    if neg.shape[1] == 0:
        raise ValueError("at least one negative is required")
    total, _, grads = _loss_and_grad(params, pos, neg, np.ones(1), alpha)
    return total, grads


def total_loss(
    params: RotateParams,
    positives: np.ndarray,
    negatives: np.ndarray,
    weights: np.ndarray | None,
    config: TrainConfig,
) -> tuple[float, Gradients]:
    """Sum of per-positive terms, link terms scaled by their weight.

    ``weights`` holds one value per positive (1 for domain and general
    triples); ``loss_mode="standard"`` ignores it and uses 1 everywhere.
    """
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(negatives, dtype=np.int64)
    if weights is None:
        w = np.ones(len(pos))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(pos),):
            raise ValueError("one weight per positive required")
        if np.any(~(w > 0)) or np.any(w > 1):
            raise ValueError("weights must lie in (0, 1]")
    if config.loss_mode == "standard":
        w = np.ones(len(pos))
    total, _, grads = _loss_and_grad(params, pos, neg, w, config.adversarial_temperature)
    return total, grads


class Adam:
    """Dense Adam over the entity and phase tables."""

    def __init__(self, params: RotateParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(params.entity.shape), np.zeros(params.phase.shape)]
        self.v = [np.zeros(params.entity.shape), np.zeros(params.phase.shape)]

    def step(self, params: RotateParams, grads: Gradients) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (rows, g, name) in enumerate(((grads.entity_rows, grads.entity, "entity"), (grads.phase_rows, grads.phase, "phase"))):
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            v *= self.beta2
            m[rows] += (1.0 - self.beta1) * g
            v[rows] += (1.0 - self.beta2) * (g * g)
            table = getattr(params, name)
            update = table.astype(np.float64) - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if name == "phase":
                update = _wrap_phase(update)
            table[...] = update


class EpochRecord(NamedTuple):
    epoch: int
    mean_loss: float
    seconds: float


def train(
    graph,
    config: TrainConfig,
    weights: np.ndarray | None = None,
    params: RotateParams | None = None,
) -> tuple[RotateParams, list[EpochRecord]]:
    """Train RotatE with Adam on every triple of ``graph``.

    ``graph`` is a KnowledgeGraph or a LinkedGraph; for the latter the link
    weights are taken from the graph unless ``weights`` is given.
    """
    if hasattr(graph, "link_mask"):
        if weights is None:
            weights = graph.weights
        graph = graph.graph
    triples = graph.triples
    n = len(triples)
    if n == 0:
        raise ValueError("nothing to train on")
    w_all = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w_all.shape != (n,):
        raise ValueError("one weight per training triple required")

    if params is None:
        params = init_params(graph.num_entities, graph.num_relations, config.dim, config.margin, config.seed)
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    sampler = NegativeSampler(triples, graph.num_entities, graph.num_relations)
    opt = Adam(params, config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            pos = triples[idx]
            neg = sampler.sample(pos, config.negatives, rng).triples
            loss, grads = total_loss(params, pos, neg, w_all[idx], config)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(params, grads)
            epoch_loss += loss
        history.append(EpochRecord(epoch, epoch_loss / n, time.perf_counter() - t0))
    return params, history


def save_checkpoint(path: str | Path, params: RotateParams) -> None:
    """Header (magic, version, |E|, |R|, d, margin) then float32 entities and phases."""
    E, R, d = params.num_entities, params.num_relations, params.dim
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, E, R, d, params.gamma))
        f.write(np.ascontiguousarray(params.entity, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(params.phase, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> RotateParams:
    data = Path(path).read_bytes()
    magic, version, E, R, d, gamma = _CKPT_HEADER.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    ent = np.frombuffer(data, dtype="<f4", count=E * 2 * d, offset=off).reshape(E, 2 * d)
    off += ent.nbytes
    ph = np.frombuffer(data, dtype="<f4", count=R * d, offset=off).reshape(R, d)
    return RotateParams(ent.astype(np.float32), ph.astype(np.float32), gamma)


def write_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    lines = ["epoch\tmean_loss\tseconds\n"]
    lines += [f"{h.epoch}\t{h.mean_loss!r}\t{h.seconds:.6f}\n" for h in history]
    Path(path).write_text("".join(lines))
