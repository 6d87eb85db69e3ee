"""Two-block recurrent time-mixing model (the coarse-stage teacher).

Each block projects frames to keys and values, mixes them through an
elementwise recurrence with a per-channel decaying memory, layer-normalizes
the result and adds it back to its input::

    K = X W_K^T,  V = X W_V^T
    R_1 = 0,  R_{t+1} = lam * R_t + k_t * v_t,  lam = sigmoid(decay)
    T_t = sigmoid(k_t * v_t + R_t)
    Y = X + LayerNorm(T)

Frame scores come from a linear head and a sigmoid; the video score is the
mean of the top ceil(topk_fraction * n) frame scores.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptyInputError, ParameterError, ShapeError, TrainingDataError
from .numerics import (
    bce_grad,
    bce_loss,
    layer_norm,
    layer_norm_backward,
    logit,
    matmul,
    sigmoid,
)

BLOCK_PARAMS = ("w_k", "w_v", "decay", "gamma", "beta")


@dataclass
class TimeMixerParams:
    w_k: np.ndarray
    w_v: np.ndarray
    decay: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    norm_mode: str = "center"

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, norm_mode: str = "center"):
        s = 1.0 / math.sqrt(d)
        return cls(
            w_k=rng.normal(0.0, s, (d, d)),
            w_v=rng.normal(0.0, s, (d, d)),
            decay=np.zeros(d),
            gamma=np.ones(d),
            beta=np.zeros(d),
            norm_mode=norm_mode,
        )

    @property
    def dim(self) -> int:
        return self.w_k.shape[0]

    @property
    def lam(self) -> np.ndarray:
        return sigmoid(self.decay)

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in BLOCK_PARAMS}

    def copy(self) -> "TimeMixerParams":
        return TimeMixerParams(
            *(getattr(self, n).copy() for n in BLOCK_PARAMS), eps=self.eps, norm_mode=self.norm_mode
        )


# ---------------------------------------------------------------------------
# single-block operations
# ---------------------------------------------------------------------------


def kv_project(x, params: TimeMixerParams, partitions: int = 1):
    """Keys and values ``(X W_K^T, X W_V^T)``; bit-identical for any partition count."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ShapeError(f"features of shape {x.shape} do not match model dim {params.dim}")
    if partitions < 1:
        raise ParameterError("partitions must be >= 1")
    return (
        matmul(x, params.w_k.T, partitions),
        matmul(x, params.w_v.T, partitions),
    )


def _check_kv(k, v):
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if k.shape != v.shape or k.ndim != 2:
        raise ShapeError(f"key shape {k.shape} != value shape {v.shape}")
    return k, v


def time_mix_states(k, v, lam, chunk_length: int | None = None, state=None, out=None):
    """Run the recurrence; returns ``(T, states, final_state)``.

    Long sequences are processed ``chunk_length`` frames at a time with the
    memory carried between chunks, which gives the same numbers as one pass.
    ``out`` may supply preallocated ``(T, states)`` buffers.
    """
    k, v = _check_kv(k, v)
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    n, d = k.shape
    if lam.shape != (d,):
        raise ShapeError(f"decay vector length {lam.shape} != feature dim {d}")
    if out is None:
        out_t, states = np.empty((n, d)), np.empty((n, d))
    else:
        out_t, states = out
        if out_t.shape != (n, d) or states.shape != (n, d):
            raise ShapeError(f"output buffers must have shape {(n, d)}")
    r = np.zeros(d) if state is None else np.array(state, dtype=np.float64)
    step = n if not chunk_length else chunk_length
    for s in range(0, n, max(step, 1)):
        e = min(s + step, n)
        r = _kernels.mix_forward(k[s:e], v[s:e], lam, r, out_t[s:e], states[s:e])
    return out_t, states, r


def time_mix(k, v, params: TimeMixerParams, chunk_length: int | None = None) -> np.ndarray:
    return time_mix_states(k, v, params.lam, chunk_length)[0]


def time_mix_backward(d_t, k, v, t_out, states, params: TimeMixerParams):
    """Gradients of the time-mix output w.r.t. keys, values and decay logits."""
    k, v = _check_kv(k, v)
    lam = params.lam
    d_a = np.ascontiguousarray(np.asarray(d_t) * t_out * (1.0 - t_out))
    d_k = np.empty_like(k)
    d_v = np.empty_like(v)
    d_lam = np.zeros(k.shape[1])
    _kernels.mix_backward(d_a, k, v, lam, states, np.zeros(k.shape[1]), d_k, d_v, d_lam)
    return d_k, d_v, d_lam * lam * (1.0 - lam)


@dataclass
class BlockCache:
    x: np.ndarray
    k: np.ndarray
    v: np.ndarray
    t: np.ndarray
    states: np.ndarray


def block_forward(x, params: TimeMixerParams, partitions: int = 1, chunk_length: int | None = 256):
    """``Y = X + LayerNorm(time_mix(kv_project(X)))``; returns ``(Y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    k, v = kv_project(x, params, partitions)
    t, states, _ = time_mix_states(k, v, params.lam, chunk_length)
    y = x + layer_norm(t, params.gamma, params.beta, params.eps, params.norm_mode)
    return y, BlockCache(x, k, v, t, states)


def block_backward(dy, cache: BlockCache, params: TimeMixerParams):
    """Returns ``(dx, grads)`` with grads keyed like :data:`BLOCK_PARAMS`."""
    dy = np.asarray(dy, dtype=np.float64)
    d_t, d_gamma, d_beta = layer_norm_backward(
        dy, cache.t, params.gamma, params.eps, params.norm_mode
    )
    d_k, d_v, d_decay = time_mix_backward(d_t, cache.k, cache.v, cache.t, cache.states, params)
    dx = dy + matmul(d_k, params.w_k) + matmul(d_v, params.w_v)
    grads = {
        "w_k": matmul(d_k.T, cache.x),
        "w_v": matmul(d_v.T, cache.x),
        "decay": d_decay,
        "gamma": d_gamma,
        "beta": d_beta,
    }
    return dx, grads


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class EnhancedRwkv:
    blocks: list
    head_w: np.ndarray | None = None
    head_b: np.ndarray = field(default_factory=lambda: np.zeros(1))
    topk_fraction: float = 1.0 / 16.0
    chunk_length: int = 256
    partitions: int = 1

    def __post_init__(self):
        if len(self.blocks) != 2:
            raise ParameterError(f"model needs exactly two blocks, got {len(self.blocks)}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ParameterError("topk_fraction must lie in (0, 1]")
        self.head_b = np.asarray(self.head_b, dtype=np.float64).reshape(1)

    @classmethod
    def init(cls, d: int, seed: int = 0, with_head: bool = True, norm_mode: str = "center", **kw):
        rng = np.random.default_rng(seed)
        blocks = [TimeMixerParams.init(d, rng, norm_mode) for _ in range(2)]
        head = rng.normal(0.0, 1.0 / math.sqrt(d), d) if with_head else None
        return cls(blocks, head, np.zeros(1), **kw)

    @property
    def dim(self) -> int:
        return self.blocks[0].dim

    def parameters(self) -> dict:
        """Flat name -> array mapping; arrays are the live parameter storage."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.arrays().items():
                out[f"block{i}.{name}"] = arr
        if self.head_w is not None:
            out["head_w"] = self.head_w
            out["head_b"] = self.head_b
        return out

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "EnhancedRwkv":
        return EnhancedRwkv(
            [b.copy() for b in self.blocks],
            None if self.head_w is None else self.head_w.copy(),
            self.head_b.copy(),
            self.topk_fraction,
            self.chunk_length,
            self.partitions,
        )

    def features(self, x):
        """Run both blocks; returns ``(H, caches)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptyInputError("feature sequence must be a non-empty n x d matrix")
        caches = []
        h = x
        for blk in self.blocks:
            h, c = block_forward(h, blk, self.partitions, self.chunk_length)
            caches.append(c)
        return h, caches

    def features_backward(self, dh, caches):
        grads = {}
        for i in (1, 0):
            dh, g = block_backward(dh, caches[i], self.blocks[i])
            for name, arr in g.items():
                grads[f"block{i}.{name}"] = arr
        return dh, grads

    def topk_count(self, n: int) -> int:
        return max(1, min(n, math.ceil(self.topk_fraction * n - 1e-12)))


def topk_mean(scores, k: int):
    """Mean of the k largest scores and the indices used (stable on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.argsort(-scores, kind="stable")[:k]
    return float(scores[idx].mean()), idx


def _forward_scores(model: EnhancedRwkv, x):
    if model.head_w is None:
        raise ParameterError("model has no classifier head")
    h, caches = model.features(x)
    z = h @ model.head_w + model.head_b[0]
    s = sigmoid(z)
    k = model.topk_count(len(s))
    vs, idx = topk_mean(s, k)
    return h, caches, s, vs, idx


def video_score(model: EnhancedRwkv, x):
    """Returns ``(frame_scores, video_score)``."""
    _, _, s, vs, _ = _forward_scores(model, x)
    return s, vs


def video_logit(model: EnhancedRwkv, x) -> float:
    """Log-odds of the video score, used as the teacher logit for distillation."""
    return float(logit(video_score(model, x)[1]))


def video_loss_and_grad(model: EnhancedRwkv, x, label: float, weight: float = 1.0):
    """BCE of one video's score and the parameter gradients, both scaled by ``weight``."""
    h, caches, s, vs, idx = _forward_scores(model, x)
    loss = bce_loss([vs], [label])
    d_vs = float(bce_grad([vs], [label])[0]) * weight
    d_s = np.zeros_like(s)
    d_s[idx] = d_vs / len(idx)
    d_z = d_s * s * (1.0 - s)
    grads = {"head_w": h.T @ d_z, "head_b": np.array([d_z.sum()])}
    dh = np.outer(d_z, model.head_w)
    _, g = model.features_backward(dh, caches)
    grads.update(g)
    return loss * weight, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    chunk_length: int = 256
    topk_fraction: float = 1.0 / 16.0
    partitions: int = 1
    norm_mode: str = "center"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    for name, arr in params.items():
        arr -= lr * grads[name]


def _validate_labels(labels):
    uniq = set(int(y) for y in labels)
    if not uniq <= {0, 1}:
        raise TrainingDataError(f"labels must be 0/1, got {sorted(uniq)}")
    if len(uniq) < 2:
        raise TrainingDataError("training data must contain both normal and anomalous videos")


def train_afed(dataset, cfg: TrainConfig, model: EnhancedRwkv | None = None):
    """Minibatch SGD on video-level BCE. ``dataset`` is a list of ``(features, label)``.

    Returns ``(model, loss_history)`` with one mean batch loss per epoch.
    """
    if not dataset:
        raise TrainingDataError("empty training set")
    _validate_labels([y for _, y in dataset])
    d = np.asarray(dataset[0][0]).shape[1]
    if model is None:
        model = EnhancedRwkv.init(
            d,
            seed=cfg.seed,
            topk_fraction=cfg.topk_fraction,
            chunk_length=cfg.chunk_length,
            partitions=cfg.partitions,
            norm_mode=cfg.norm_mode,
        )
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = None
            for i in batch:
                x, y = dataset[i]
                loss, g = video_loss_and_grad(model, x, float(y), 1.0 / len(batch))
                total += loss * len(batch)
                if acc is None:
                    acc = g
                else:
                    for name in acc:
                        acc[name] = acc[name] + g[name]
            sgd_step(params, acc, cfg.learning_rate)
        history.append(total / len(dataset))
    return model, history


# ---------------------------------------------------------------------------
# complexity measurement
# ---------------------------------------------------------------------------


def _time_call(fn, reps: int, min_time: float = 0.02) -> float:
    fn()
    number = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - t0 >= min_time or number >= 1 << 16:
            break
        number *= 2
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        samples.append((time.perf_counter() - t0) / number)
    # interference from other processes only ever adds time
    return float(np.min(samples))


def complexity_probe(model: EnhancedRwkv, sizes, reps: int = 5, seed: int = 0):
    """Best-of-``reps`` wall time of one time-mix pass for each length in ``sizes``.

    Output buffers are allocated once per size so the timings measure the
    recurrence rather than fresh-page faults of large allocations.
    """
    sizes = list(sizes)
    if any(n <= 0 for n in sizes):
        raise EmptyInputError("sequence lengths must be positive")
    if reps < 5:
        raise ParameterError("at least five repetitions per size")
    rng = np.random.default_rng(seed)
    blk = model.blocks[0]
    out = []
    for n in sizes:
        k = rng.normal(size=(n, blk.dim))
        v = rng.normal(size=(n, blk.dim))
        bufs = (np.empty((n, blk.dim)), np.empty((n, blk.dim)))
        lam = blk.lam
        out.append(
            _time_call(lambda: time_mix_states(k, v, lam, model.chunk_length, out=bufs), reps)
        )
    return out


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
