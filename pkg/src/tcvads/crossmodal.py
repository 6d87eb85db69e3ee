"""Fine-grained stage: class prompts, text/video aggregation and the
video-to-class similarity classifier.

Each class owns a prompt made of caption tokens, its label tokens and a block
of learnable vectors. Caption and label tokens come from a frozen embedding
provider; only the learnable vectors, the text mixer and the video mixer are
trained. A video is classified by a temperature softmax over its cosine
similarity to every class text feature.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    MissingEmbeddingError,
    ParameterError,
    ShapeError,
    TrainingDataError,
)
from .formats import ClassSet, read_features
from .numerics import PROB_CLAMP, cosine_grad, cosine_similarity, softmax_temp
from .timemixer import EnhancedRwkv

MAX_PROMPT_TOKENS = 77
DEFAULT_LEARNABLE = 40
CAPTION_TEMPLATE = "a video of {label}"


def tokenize(text: str) -> tuple:
    return tuple(text.split())


# ---------------------------------------------------------------------------
# prompts and embedding providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTriplet:
    clip_tokens: tuple
    label_tokens: tuple
    learnable_count: int
    max_total: int = MAX_PROMPT_TOKENS

    @property
    def frozen_tokens(self) -> tuple:
        return self.clip_tokens + self.label_tokens

    def __len__(self) -> int:
        return len(self.clip_tokens) + len(self.label_tokens) + self.learnable_count


def assemble_prompt(clip_tokens, label_tokens, learnable_count: int = DEFAULT_LEARNABLE, max_total: int = MAX_PROMPT_TOKENS):
    """Order ``[clip | label | learnable]``; overflow trims the caption tail."""
    clip_tokens = tuple(clip_tokens)
    label_tokens = tuple(label_tokens)
    if learnable_count < 0:
        raise ParameterError("learnable_count must be non-negative")
    if not label_tokens:
        raise ParameterError("label tokens must be non-empty")
    room = max_total - len(label_tokens) - learnable_count
    if room < 0:
        raise ConfigurationError(
            f"{len(label_tokens)} label + {learnable_count} learnable tokens exceed the cap of {max_total}"
        )
    return PromptTriplet(clip_tokens[:room], label_tokens, learnable_count, max_total)


class SyntheticEmbeddingProvider:
    """Deterministic token vectors seeded by ``(seed, crc32(token))``."""

    mode = "synthetic"

    def __init__(self, dim: int, seed: int = 0, scale: float = 1.0):
        if dim < 1:
            raise ParameterError("embedding dim must be positive")
        self.dim = dim
        self.seed = seed
        self.scale = scale

    def embed(self, token: str) -> np.ndarray:
        key = zlib.crc32(str(token).encode("utf-8"))
        rng = np.random.default_rng([self.seed, key])
        return self.scale * rng.normal(size=self.dim)

    def embed_tokens(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in tokens])


class FileEmbeddingProvider:
    """Token vectors looked up in a precomputed table."""

    mode = "file"

    def __init__(self, table: dict):
        if not table:
            raise EmptyInputError("embedding table is empty")
        dims = {np.asarray(v).shape for v in table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ShapeError("embedding table needs equal-length 1-D vectors")
        self.table = {str(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.dim = next(iter(dims))[0]

    @classmethod
    def from_files(cls, vocab_path, features_path) -> "FileEmbeddingProvider":
        """Row i of the feature file embeds token i of the JSON vocabulary."""
        vocab = json.loads(Path(vocab_path).read_text())
        rows = read_features(features_path)
        if len(vocab) != rows.shape[0]:
            raise ShapeError(f"{len(vocab)} vocabulary tokens vs {rows.shape[0]} embedding rows")
        return cls(dict(zip(vocab, rows)))

    def embed(self, token: str) -> np.ndarray:
        try:
            return self.table[token]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for token {token!r}") from None

    def embed_tokens(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in tokens])


def encode_text(provider, triplet: PromptTriplet, learnable) -> np.ndarray:
    """Token-embedding sequence: provider vectors followed by the learnable rows."""
    learnable = np.asarray(learnable, dtype=np.float64)
    if learnable.shape != (triplet.learnable_count, provider.dim):
        raise ShapeError(
            f"learnable block {learnable.shape} != ({triplet.learnable_count}, {provider.dim})"
        )
    return np.concatenate([provider.embed_tokens(triplet.frozen_tokens), learnable])


def encode_text_backward(d_seq, triplet: PromptTriplet):
    """Split a sequence gradient; the frozen provider rows get exactly zero."""
    d_seq = np.asarray(d_seq, dtype=np.float64)
    n_frozen = len(triplet.frozen_tokens)
    frozen = np.zeros_like(d_seq[:n_frozen])
    return frozen, d_seq[n_frozen:].copy()


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class FineGrainedModel:
    labels: tuple
    normal: str | None
    provider: object
    text_mixer: EnhancedRwkv
    video_mixer: EnhancedRwkv
    prompts: np.ndarray  # (n_classes, learnable, d)
    tau: float = 0.07
    delta: float = 0.5
    lambda1: float = 5e-4
    lambda2: float = 6e-4
    alpha: float = 1.2
    beta_w: float = 0.8
    triplets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ParameterError("delta must lie in [0, 1]")
        if self.alpha < 0 or self.beta_w < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.text_mixer.head_w is not None or self.video_mixer.head_w is not None:
            raise ParameterError("fine-stage mixers must not carry a classifier head")
        if self.prompts.shape[:1] != (len(self.labels),) or self.prompts.shape[2] != self.dim:
            raise ShapeError(f"prompt block {self.prompts.shape} does not fit the class set")
        if self.provider.dim != self.dim:
            raise ShapeError(f"provider dim {self.provider.dim} != model dim {self.dim}")
        if not self.triplets:
            self.triplets = {
                c: assemble_prompt(
                    tokenize(CAPTION_TEMPLATE.format(label=c)), tokenize(c), self.prompts.shape[1]
                )
                for c in self.labels
            }
        self._frozen = {c: self.provider.embed_tokens(t.frozen_tokens) for c, t in self.triplets.items()}

    @classmethod
    def init(
        cls,
        d: int,
        classes: ClassSet = ClassSet(),
        seed: int = 0,
        provider=None,
        learnable: int = DEFAULT_LEARNABLE,
        prompt_scale: float = 0.02,
        partitions: int = 1,
        chunk_length: int = 256,
        **hyper,
    ) -> "FineGrainedModel":
        rng = np.random.default_rng([seed, 2])
        provider = provider or SyntheticEmbeddingProvider(d, seed)
        mixers = [
            EnhancedRwkv.init(d, seed=s, with_head=False, partitions=partitions, chunk_length=chunk_length)
            for s in (int(rng.integers(2**31)), int(rng.integers(2**31)))
        ]
        # every class starts from the same context block and diverges in training
        context = prompt_scale * rng.normal(size=(learnable, d))
        prompts = np.repeat(context[None], len(classes.labels), axis=0)
        return cls(classes.labels, classes.normal, provider, mixers[0], mixers[1], prompts, **hyper)

    @property
    def dim(self) -> int:
        return self.text_mixer.dim

    @property
    def anomalies(self) -> tuple:
        return tuple(c for c in self.labels if c != self.normal)

    def text_parameters(self) -> dict:
        return {f"text.{k}": v for k, v in self.text_mixer.parameters().items()}

    def video_parameters(self) -> dict:
        return {f"video.{k}": v for k, v in self.video_mixer.parameters().items()}

    def parameters(self) -> dict:
        out = {"prompts": self.prompts}
        out.update(self.text_parameters())
        out.update(self.video_parameters())
        return out

    def align_names(self) -> tuple:
        return tuple(self.parameters())

    def contrast_names(self) -> tuple:
        return ("prompts",) + tuple(self.text_parameters())

    def copy(self) -> "FineGrainedModel":
        return FineGrainedModel(
            self.labels, self.normal, self.provider, self.text_mixer.copy(), self.video_mixer.copy(),
            self.prompts.copy(), self.tau, self.delta, self.lambda1, self.lambda2, self.alpha,
            self.beta_w, dict(self.triplets),
        )

    def text_sequence(self, c: str) -> np.ndarray:
        i = self.labels.index(c)
        return np.concatenate([self._frozen[c], self.prompts[i]])


def class_text_feature(model: FineGrainedModel, c: str) -> np.ndarray:
    if c not in model.labels:
        raise ParameterError(f"unknown class {c!r}")
    h, _ = model.text_mixer.features(model.text_sequence(c))
    return h.mean(axis=0)


def video_feature(model: FineGrainedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("video needs at least one frame")
    h, _ = model.video_mixer.features(x)
    return h.mean(axis=0)


def similarity_matrix(video_feats, text_feats) -> np.ndarray:
    return np.array([[cosine_similarity(v, t) for t in text_feats] for v in video_feats])


def predict(row, tau: float = 0.07) -> np.ndarray:
    return softmax_temp(row, tau)


def classify(model: FineGrainedModel, x, text_feats=None):
    """Returns ``(probabilities, argmax class)`` for one video."""
    if text_feats is None:
        text_feats = [class_text_feature(model, c) for c in model.labels]
    row = similarity_matrix([video_feature(model, x)], text_feats)[0]
    p = predict(row, model.tau)
    return p, model.labels[int(np.argmax(p))]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def squared_norm(params) -> float:
    arrays = params.values() if isinstance(params, dict) else params
    return math.fsum(float(np.sum(np.square(a))) for a in arrays)


def align_loss(p_rows, labels_onehot, lambda1: float = 0.0, theta_params=()) -> float:
    """Summed cross-entropy of class probabilities plus ``lambda1 * ||theta||^2``."""
    p = np.atleast_2d(np.asarray(p_rows, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels_onehot, dtype=np.float64))
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} vs labels {y.shape}")
    ce = -float(np.sum(y * np.log(np.clip(p, PROB_CLAMP, 1.0))))
    return ce + lambda1 * squared_norm(theta_params)


def contrast_loss(t_n, t_a, delta: float = 0.5, lambda2: float = 0.0, theta_params=()) -> float:
    """Hinge on normal-vs-anomaly text cosines above the margin, plus ``lambda2 * ||theta||^2``."""
    hinge = math.fsum(max(0.0, cosine_similarity(t_n, t) - delta) for t in t_a)
    return hinge + lambda2 * squared_norm(theta_params)


def contrast_grad(t_n, t_a, delta: float = 0.5):
    """Hinge-part gradients w.r.t. ``t_n`` and each ``t_a``; zero at or below the margin."""
    t_n = np.asarray(t_n, dtype=np.float64)
    d_n = np.zeros_like(t_n)
    d_a = []
    for t in t_a:
        if cosine_similarity(t_n, t) > delta:
            gn, ga = cosine_grad(t_n, t)
            d_n += gn
            d_a.append(ga)
        else:
            d_a.append(np.zeros_like(t_n))
    return d_n, d_a


def total_fine_loss(l_align: float, l_contrast: float, alpha: float = 1.2, beta_w: float = 0.8) -> float:
    return alpha * l_align + beta_w * l_contrast


@dataclass
class FineLoss:
    total: float
    align: float
    contrast: float


def fine_loss_and_grad(model: FineGrainedModel, batch, with_grad: bool = True):
    """Total loss on ``batch`` (list of ``(features, class_name)``) and parameter gradients."""
    if model.normal is None or model.normal not in model.labels:
        raise TrainingDataError("contrastive loss needs a normal class")
    if not batch:
        raise TrainingDataError("empty batch")
    labels = model.labels
    params = model.parameters()
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    text_out = {}
    for c in labels:
        h, caches = model.text_mixer.features(model.text_sequence(c))
        text_out[c] = (h, caches)
    t_feats = {c: text_out[c][0].mean(axis=0) for c in labels}
    d_text = {c: np.zeros(model.dim) for c in labels}

    ce_terms = []
    video_parts = []
    for x, c in batch:
        if c not in labels:
            raise TrainingDataError(f"class {c!r} not in the model's class set")
        h, caches = model.video_mixer.features(x)
        v = h.mean(axis=0)
        s = np.array([cosine_similarity(v, t_feats[k]) for k in labels])
        p = softmax_temp(s, model.tau)
        yi = labels.index(c)
        py = max(float(p[yi]), PROB_CLAMP)
        ce_terms.append(-math.log(py))
        if with_grad and p[yi] > PROB_CLAMP:
            ds = p.copy()
            ds[yi] -= 1.0
            ds *= model.alpha / model.tau
            dv = np.zeros(model.dim)
            for j, k in enumerate(labels):
                gv, gt = cosine_grad(v, t_feats[k])
                dv += ds[j] * gv
                d_text[k] += ds[j] * gt
            video_parts.append((dv, h.shape[0], caches))

    anomalies = model.anomalies
    hinge = contrast_loss(t_feats[model.normal], [t_feats[a] for a in anomalies], model.delta)
    align_reg = squared_norm(params)
    contrast_reg = squared_norm({k: params[k] for k in model.contrast_names()})
    l_align = math.fsum(ce_terms) + model.lambda1 * align_reg
    l_contrast = hinge + model.lambda2 * contrast_reg
    loss = FineLoss(total_fine_loss(l_align, l_contrast, model.alpha, model.beta_w), l_align, l_contrast)
    if not with_grad:
        return loss, None

    dn, da = contrast_grad(t_feats[model.normal], [t_feats[a] for a in anomalies], model.delta)
    d_text[model.normal] += model.beta_w * dn
    for a, g in zip(anomalies, da):
        d_text[a] += model.beta_w * g

    for dv, n, caches in video_parts:
        _, g = model.video_mixer.features_backward(np.broadcast_to(dv / n, (n, model.dim)), caches)
        for k, arr in g.items():
            grads[f"video.{k}"] += arr
    for i, c in enumerate(labels):
        h, caches = text_out[c]
        n = h.shape[0]
        d_seq, g = model.text_mixer.features_backward(np.broadcast_to(d_text[c] / n, (n, model.dim)), caches)
        for k, arr in g.items():
            grads[f"text.{k}"] += arr
        _, d_learn = encode_text_backward(d_seq, model.triplets[c])
        grads["prompts"][i] += d_learn

    for k in model.align_names():
        grads[k] += model.alpha * model.lambda1 * 2.0 * params[k]
    for k in model.contrast_names():
        grads[k] += model.beta_w * model.lambda2 * 2.0 * params[k]
    return loss, grads


def max_normal_cosine(model: FineGrainedModel) -> float:
    """Largest cosine between the normal class text feature and any anomaly class."""
    t_n = class_text_feature(model, model.normal)
    return max(cosine_similarity(t_n, class_text_feature(model, a)) for a in model.anomalies)


@dataclass
class FineConfig:
    learning_rate: float = 0.01
    epochs: int = 15
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


def train_fine(dataset, model: FineGrainedModel, cfg: FineConfig = FineConfig()):
    """Minibatch gradient descent on the weighted alignment + contrastive loss.

    ``dataset`` is a list of ``(features, class_name)``. The model is updated in
    place and returned with the per-epoch mean loss per video.
    """
    if not dataset:
        raise TrainingDataError("empty training set")
    if model.normal is None or model.normal not in model.labels:
        raise TrainingDataError("class set lacks a normal class; contrastive loss undefined")
    if len(model.labels) < 2:
        raise TrainingDataError("need at least two classes")
    unknown = sorted({c for _, c in dataset} - set(model.labels))
    if unknown:
        raise TrainingDataError(f"classes {unknown} not in the model's class set")
    rng = np.random.default_rng(cfg.seed + 3)
    params = model.parameters()
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = fine_loss_and_grad(model, batch)
            total += loss.total
            for k, arr in params.items():
                arr -= cfg.learning_rate * grads[k] / len(batch)
        history.append(total / len(dataset))
    return model, history


def accuracy(model: FineGrainedModel, dataset) -> float:
    text_feats = [class_text_feature(model, c) for c in model.labels]
    hits = [classify(model, x, text_feats)[1] == c for x, c in dataset]
    return sum(hits) / len(hits)
