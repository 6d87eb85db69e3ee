"""TCVT checkpoint codecs for the teacher, the student and the fine-stage model."""

from __future__ import annotations

import numpy as np

from .crossmodal import FineGrainedModel, SyntheticEmbeddingProvider
from .distill import STUDENT_PARAMS, QacmStudent
from .errors import FormatError
from .formats import ClassSet, read_tcvt, write_tcvt
from .numerics import LAYER_NORM_MODES
from .timemixer import BLOCK_PARAMS, EnhancedRwkv, TimeMixerParams

TEACHER_TAG = "AFED"
STUDENT_TAG = "QACM"
FINE_TAG = "FINE"

_MIXER_BLOCKS = 2 * len(BLOCK_PARAMS) + 1  # two blocks + per-block (eps) meta


def _mixer_arrays(model: EnhancedRwkv) -> list:
    out = []
    for blk in model.blocks:
        out.extend(getattr(blk, n) for n in BLOCK_PARAMS)
    out.append(np.array([model.blocks[0].eps, model.topk_fraction]))
    return out


def _mixer_from(arrays, norm_mode: str, chunk_length: int, partitions: int, head_w=None, head_b=None):
    k = len(BLOCK_PARAMS)
    eps, topk = (float(v) for v in arrays[2 * k])
    blocks = [
        TimeMixerParams(*(np.array(a) for a in arrays[i * k : (i + 1) * k]), eps=eps, norm_mode=norm_mode)
        for i in range(2)
    ]
    return EnhancedRwkv(
        blocks,
        head_w,
        np.zeros(1) if head_b is None else head_b,
        topk_fraction=topk,
        chunk_length=chunk_length,
        partitions=partitions,
    )


def _mode_index(model: EnhancedRwkv) -> int:
    return LAYER_NORM_MODES.index(model.blocks[0].norm_mode)


def _mode_name(i: int) -> str:
    if not 0 <= i < len(LAYER_NORM_MODES):
        raise FormatError(f"unknown layer-norm mode index {i}")
    return LAYER_NORM_MODES[i]


def save_teacher(path, model: EnhancedRwkv) -> None:
    if model.head_w is None:
        raise FormatError("teacher checkpoint needs a classifier head")
    dims = [model.dim, model.chunk_length, _mode_index(model)]
    write_tcvt(path, TEACHER_TAG, dims, _mixer_arrays(model) + [model.head_w, model.head_b])


def load_teacher(path, partitions: int = 1) -> EnhancedRwkv:
    _, dims, blocks = read_tcvt(path, TEACHER_TAG)
    if len(dims) != 3 or len(blocks) != _MIXER_BLOCKS + 2:
        raise FormatError("malformed teacher checkpoint")
    return _mixer_from(blocks[:-2], _mode_name(dims[2]), dims[1], partitions, blocks[-2], blocks[-1])


def save_student(path, student: QacmStudent) -> None:
    write_tcvt(path, STUDENT_TAG, [student.dim, student.hidden], [getattr(student, n) for n in STUDENT_PARAMS])


def load_student(path) -> QacmStudent:
    _, dims, blocks = read_tcvt(path, STUDENT_TAG)
    if len(dims) != 2 or len(blocks) != len(STUDENT_PARAMS):
        raise FormatError("malformed student checkpoint")
    student = QacmStudent(*blocks)
    if (student.dim, student.hidden) != tuple(dims):
        raise FormatError("student checkpoint dims disagree with its weights")
    return student


def save_fine(path, model: FineGrainedModel) -> None:
    synthetic = isinstance(model.provider, SyntheticEmbeddingProvider)
    dims = [
        model.dim,
        model.prompts.shape[1],
        len(model.labels),
        model.text_mixer.chunk_length,
        _mode_index(model.text_mixer),
        int(synthetic),
        model.provider.seed if synthetic else 0,
    ]
    hyper = np.array(
        [model.tau, model.delta, model.lambda1, model.lambda2, model.alpha, model.beta_w,
         model.provider.scale if synthetic else 0.0]
    )
    blocks = [model.prompts] + _mixer_arrays(model.text_mixer) + _mixer_arrays(model.video_mixer) + [hyper]
    write_tcvt(path, FINE_TAG, dims, blocks)


def load_fine(path, classes: ClassSet, provider=None, partitions: int = 1) -> FineGrainedModel:
    """Rebuild the fine model; file-backed embeddings must be supplied as ``provider``."""
    _, dims, blocks = read_tcvt(path, FINE_TAG)
    if len(dims) != 7 or len(blocks) != 2 * _MIXER_BLOCKS + 2:
        raise FormatError("malformed fine-stage checkpoint")
    d, _, n_classes, chunk, mode, synthetic, pseed = dims
    if n_classes != len(classes.labels):
        raise FormatError(f"checkpoint has {n_classes} classes, class set has {len(classes.labels)}")
    tau, delta, l1, l2, alpha, beta_w, scale = (float(v) for v in blocks[-1])
    if provider is None:
        if not synthetic:
            raise FormatError("checkpoint was trained with file-backed embeddings; pass the provider")
        provider = SyntheticEmbeddingProvider(d, pseed, scale)
    mode_name = _mode_name(mode)
    text = _mixer_from(blocks[1 : 1 + _MIXER_BLOCKS], mode_name, chunk, partitions)
    video = _mixer_from(blocks[1 + _MIXER_BLOCKS : 1 + 2 * _MIXER_BLOCKS], mode_name, chunk, partitions)
    return FineGrainedModel(
        classes.labels, classes.normal, provider, text, video, np.array(blocks[0]),
        tau, delta, l1, l2, alpha, beta_w,
    )
