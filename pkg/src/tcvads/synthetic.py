"""Seeded synthetic feature videos standing in for real surveillance datasets.

Normal videos are noise around a shared base signature. An anomalous video
adds its class direction over one contiguous burst of frames; the burst is
recorded as frame labels and as a ground-truth temporal span.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .formats import ClassSet, ManifestEntry, write_features, write_manifest


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos_per_class: int = 14
    frames: int = 64
    d: int = 32
    burst_length: int = 16
    separation: float = 3.0
    noise: float = 0.5
    seed: int = 7
    train_per_class: int = 10

    def __post_init__(self):
        if self.separation <= 0:
            raise ParameterError("separation must be positive")
        if not 0 < self.burst_length <= self.frames:
            raise ParameterError("burst_length must lie in [1, frames]")
        if not 0 < self.train_per_class <= self.n_videos_per_class:
            raise ParameterError("train_per_class must lie in [1, n_videos_per_class]")


@dataclass
class Video:
    id: str
    features: np.ndarray
    video_label: int
    class_name: str
    frame_labels: list
    frame_spans: list
    split: str


def class_directions(spec: SyntheticSpec, classes: ClassSet):
    """Base signature and one unit direction per anomaly class, all orthonormal."""
    rng = np.random.default_rng([spec.seed, 0])
    m = len(classes.anomalies)
    if m + 1 > spec.d:
        raise ParameterError(f"d={spec.d} too small for {m} class directions")
    q, _ = np.linalg.qr(rng.normal(size=(spec.d, m + 1)))
    base = q[:, 0]
    return base, {c: q[:, i + 1] for i, c in enumerate(classes.anomalies)}


def gen_videos(spec: SyntheticSpec = SyntheticSpec(), classes: ClassSet = ClassSet()) -> list:
    """Generate all videos in memory; feature values are float32-representable."""
    base, dirs = class_directions(spec, classes)
    rng = np.random.default_rng([spec.seed, 1])
    videos = []
    for c in classes.labels:
        for i in range(spec.n_videos_per_class):
            x = base + spec.noise * rng.normal(size=(spec.frames, spec.d))
            labels = [0] * spec.frames
            spans = []
            start = int(rng.integers(0, spec.frames - spec.burst_length + 1))
            if c != classes.normal:
                end = start + spec.burst_length
                x[start:end] += spec.separation * dirs[c]
                labels[start:end] = [1] * spec.burst_length
                spans = [[start, end, c]]
            split = "train" if i < spec.train_per_class else "test"
            vid = f"{c.replace(' ', '_')}_{i:03d}"
            videos.append(
                Video(
                    vid,
                    x.astype(np.float32).astype(np.float64),
                    int(c != classes.normal),
                    c,
                    labels,
                    spans,
                    split,
                )
            )
    return videos


def gen_synthetic(out_dir, spec: SyntheticSpec = SyntheticSpec(), classes: ClassSet = ClassSet()):
    """Write ``features/*.vfea``, ``manifest.jsonl`` and ``classes.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    videos = gen_videos(spec, classes)
    entries = []
    for v in videos:
        rel = f"features/{v.id}.vfea"
        write_features(out_dir / rel, v.features)
        entries.append(
            ManifestEntry(
                v.id, rel, v.video_label, v.class_name, v.frame_labels, v.frame_spans or None,
                split=v.split,
            )
        )
    write_manifest(out_dir / "manifest.jsonl", entries)
    (out_dir / "classes.json").write_text(classes.to_json() + "\n")
    return entries
