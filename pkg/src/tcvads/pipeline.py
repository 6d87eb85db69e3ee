"""Run configuration, stage commands, two-stage inference and reporting.

Every stage reads its inputs from a data directory (``manifest.jsonl``,
``classes.json``, ``features/``) and writes fixed-name artifacts into an
output directory.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoints
from .crossmodal import FineConfig, FineGrainedModel, classify, class_text_feature, train_fine
from .distill import (
    BoConfig,
    DistillConfig,
    QacmStudent,
    TraceRow,
    dataset_soft_loss,
    distill,
    optimize_temperature,
    student_forward,
    teacher_logits_for,
    train_student,
)
from .errors import ConfigurationError, CoverageError, FormatError, UndefinedMetricError
from .formats import ClassSet, ManifestEntry, read_features, read_manifest, resolve
from .metrics import (
    DEFAULT_IOU_THRESHOLDS,
    TemporalSegment,
    ano_auc,
    average_precision,
    map_at_iou,
    roc_auc,
    segments_from_scores,
)
from .numerics import sigmoid
from .synthetic import SyntheticSpec, gen_synthetic
from .timemixer import TrainConfig, train_afed

MODEL_FILE = "model.tcvt"
STUDENT_FILE = "student.tcvt"
FINE_FILE = "fine.tcvt"
REPORT_FILE = "report.json"
TRACE_FILE = "bo_trace.csv"
PREDICTIONS_FILE = "predictions.jsonl"


@dataclass
class FineModelConfig:
    tau: float = 0.07
    delta: float = 0.5
    lambda1: float = 5e-4
    lambda2: float = 6e-4
    alpha: float = 1.2
    beta_w: float = 0.8
    learnable: int = 40
    prompt_scale: float = 0.02


@dataclass
class SaliencyConfig:
    in_channels: int = 3
    mid_channels: int = 4
    out_channels: int = 4
    kernel_size: int = 3
    frames: int = 4
    height: int = 8
    width: int = 8
    output_channel: int = 0


@dataclass
class RunConfig:
    seed: int = 7
    theta_gate: float = 0.5
    frame_threshold: float = 0.5
    partitions: int = 1
    ano_auc_restrict: bool = True
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    bo: BoConfig = field(default_factory=BoConfig)
    fine: FineConfig = field(default_factory=FineConfig)
    fine_model: FineModelConfig = field(default_factory=FineModelConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)

    def __post_init__(self):
        if not 0.0 <= self.theta_gate <= 1.0:
            raise ConfigurationError(f"theta_gate must lie in [0, 1], got {self.theta_gate}")
        if self.partitions < 1:
            raise ConfigurationError("partitions must be >= 1")
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)

    def with_overrides(self, seed: int | None = None, partitions: int | None = None) -> "RunConfig":
        """Apply ``--seed`` / ``--partitions``; the seed drives data and every stage."""
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(
                cfg,
                seed=seed,
                synthetic=dataclasses.replace(cfg.synthetic, seed=seed),
                teacher=dataclasses.replace(cfg.teacher, seed=seed),
                distill=dataclasses.replace(cfg.distill, seed=seed),
                fine=dataclasses.replace(cfg.fine, seed=seed),
            )
        if partitions is not None:
            cfg = dataclasses.replace(
                cfg, partitions=partitions, teacher=dataclasses.replace(cfg.teacher, partitions=partitions)
            )
        return cfg

    @classmethod
    def default(cls) -> "RunConfig":
        return cls().with_overrides(seed=cls.seed)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        base = cls.default()
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            current = getattr(base, key)
            if dataclasses.is_dataclass(current):
                if not isinstance(value, dict):
                    raise ConfigurationError(f"config section {key!r} must be an object")
                sub_known = {f.name for f in dataclasses.fields(current)}
                bad = sorted(set(value) - sub_known)
                if bad:
                    raise ConfigurationError(f"unknown keys {bad} in config section {key!r}")
                try:
                    kwargs[key] = dataclasses.replace(current, **value)
                except (TypeError, ValueError) as exc:
                    raise ConfigurationError(f"config section {key!r}: {exc}") from None
            else:
                kwargs[key] = value
        try:
            return dataclasses.replace(base, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    classes: ClassSet
    entries: list

    def features(self, entry: ManifestEntry) -> np.ndarray:
        return read_features(resolve(entry, self.root))

    def select(self, split: str | None) -> list:
        if split is None:
            return list(self.entries)
        return [e for e in self.entries if e.split in (None, split)]


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    classes_path = root / "classes.json"
    classes = ClassSet.from_json(classes_path.read_text()) if classes_path.exists() else ClassSet()
    entries = read_manifest(root / "manifest.jsonl", classes=classes)
    if not entries:
        raise FormatError(f"manifest under {root} has no entries")
    return Dataset(root, classes, entries)


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, 1):
            w.writerow([i, repr(float(loss))])


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "T", "loss", "EI_at_proposal"])
        for row in trace:
            w.writerow([row.iteration, repr(row.t), repr(row.loss), repr(row.ei)])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TraceRow(int(r["iteration"]), float(r["T"]), float(r["loss"]), float(r["EI_at_proposal"]))
        for r in rows
    ]


# ---------------------------------------------------------------------------
# stage commands
# ---------------------------------------------------------------------------


def gen_synth_command(cfg: RunConfig, out_dir) -> list:
    return gen_synthetic(out_dir, cfg.synthetic)


def _labelled(ds: Dataset, split: str | None = "train"):
    entries = ds.select(split)
    return [(ds.features(e), e.video_label) for e in entries]


def train_coarse_command(cfg: RunConfig, data_dir, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    model, history = train_afed(_labelled(ds), cfg.teacher)
    checkpoints.save_teacher(out / MODEL_FILE, model)
    write_history(out / "teacher_loss.csv", history)
    return model, history


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"{what} not found at {path}")
    return path


def distill_command(cfg: RunConfig, data_dir, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher = checkpoints.load_teacher(_require(out / MODEL_FILE, "teacher checkpoint"), cfg.partitions)
    ds = load_dataset(data_dir)
    result = distill(teacher, _labelled(ds), cfg.distill, cfg.bo)
    checkpoints.save_student(out / STUDENT_FILE, result.student)
    write_trace(out / TRACE_FILE, result.trace)
    write_history(out / "student_loss.csv", result.history)
    return result


def bo_trace_command(cfg: RunConfig, data_dir, out_dir):
    """Temperature search alone; writes the trace without training a final student."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher = checkpoints.load_teacher(_require(out / MODEL_FILE, "teacher checkpoint"), cfg.partitions)
    data = _labelled(load_dataset(data_dir))
    t_logits = teacher_logits_for(teacher, data)

    def probe(temp):
        st, _ = train_student(data, cfg.distill, t_logits, temp, epochs=cfg.distill.probe_epochs)
        return dataset_soft_loss(st, data, t_logits, temp)

    t_opt, trace = optimize_temperature(probe, cfg.bo)
    write_trace(out / TRACE_FILE, trace)
    return t_opt, trace


def fine_model_from(cfg: RunConfig, classes: ClassSet, d: int) -> FineGrainedModel:
    fm = cfg.fine_model
    return FineGrainedModel.init(
        d,
        classes,
        seed=cfg.fine.seed,
        learnable=fm.learnable,
        prompt_scale=fm.prompt_scale,
        partitions=cfg.partitions,
        tau=fm.tau,
        delta=fm.delta,
        lambda1=fm.lambda1,
        lambda2=fm.lambda2,
        alpha=fm.alpha,
        beta_w=fm.beta_w,
    )


def anomalous_training_set(ds: Dataset, split: str | None = "train") -> list:
    return [(ds.features(e), e.class_name) for e in ds.select(split) if e.video_label == 1]


def train_fine_command(cfg: RunConfig, data_dir, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    data = anomalous_training_set(ds)
    if not data:
        raise ConfigurationError("no anomalous training videos for the fine stage")
    model = fine_model_from(cfg, ds.classes, data[0][0].shape[1])
    model, history = train_fine(data, model, cfg.fine)
    checkpoints.save_fine(out / FINE_FILE, model)
    write_history(out / "fine_loss.csv", history)
    return model, history


# ---------------------------------------------------------------------------
# two-stage inference
# ---------------------------------------------------------------------------


@dataclass
class StageReport:
    coarse_score: float
    frame_scores: np.ndarray
    verdict: str  # "normal" or "anomalous"
    fine_ran: bool
    probabilities: np.ndarray | None = None
    predicted_class: str | None = None


class TwoStage:
    """Coarse gate followed by fine classification; counts fine-stage calls."""

    def __init__(self, student: QacmStudent, fine: FineGrainedModel | None, theta_gate: float):
        if not 0.0 <= theta_gate <= 1.0:
            raise ConfigurationError(f"theta_gate must lie in [0, 1], got {theta_gate}")
        self.student = student
        self.fine = fine
        self.theta_gate = theta_gate
        self.fine_calls = 0
        self._lock = threading.Lock()
        self._text_feats = None

    def _text(self):
        with self._lock:
            if self._text_feats is None:
                self._text_feats = [class_text_feature(self.fine, c) for c in self.fine.labels]
            return self._text_feats

    def run(self, x) -> StageReport:
        z, frame_logits = student_forward(self.student, x)
        score = float(sigmoid(z))
        frames = sigmoid(frame_logits)
        if score < self.theta_gate:
            return StageReport(score, frames, "normal", False)
        if self.fine is None:
            raise ConfigurationError("coarse gate opened but no fine-stage model is loaded")
        with self._lock:
            self.fine_calls += 1
        p, c = classify(self.fine, x, self._text())
        return StageReport(score, frames, "anomalous", True, p, c)


def run_two_stage(theta_gate: float, student: QacmStudent, fine: FineGrainedModel | None, x) -> StageReport:
    return TwoStage(student, fine, theta_gate).run(x)


def predict_entries(stage: TwoStage, ds: Dataset, entries, workers: int = 1) -> list:
    """Prediction records in manifest order regardless of completion order."""

    def one(e):
        r = stage.run(ds.features(e))
        rec = {
            "id": e.id,
            "score": r.coarse_score,
            "frame_scores": [float(v) for v in r.frame_scores],
            "verdict": r.verdict,
            "fine_ran": r.fine_ran,
            "class": r.predicted_class,
        }
        if r.probabilities is not None:
            rec["probabilities"] = dict(zip(stage.fine.labels, map(float, r.probabilities)))
        return rec

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, entries))
    return [one(e) for e in entries]


def write_predictions(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_predictions(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if "id" not in rec or "score" not in rec:
            raise FormatError(f"{path}:{lineno}: prediction needs 'id' and 'score'")
        out[str(rec["id"])] = rec
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _safe(metric, *args, **kw):
    try:
        return metric(*args, **kw)
    except UndefinedMetricError:
        return None


def eval_command(entries, predictions: dict, cfg: RunConfig | None = None, normal: str = "normal") -> dict:
    """Metric report: video-level AP/AUC, frame-level Ano-AUC and temporal mAP."""
    cfg = cfg or RunConfig.default()
    missing = [e.id for e in entries if e.id not in predictions]
    if missing:
        raise CoverageError(f"no prediction for {len(missing)} entries: {', '.join(missing)}")
    scores = [float(predictions[e.id]["score"]) for e in entries]
    labels = [e.video_label for e in entries]
    report = {
        "ap": _safe(average_precision, scores, labels),
        "auc": _safe(roc_auc, scores, labels),
        "ano_auc": None,
        "map_at_iou": None,
    }

    framed = [e for e in entries if e.frame_labels is not None]
    if framed:
        f_scores, f_labels, f_video = [], [], []
        pred_segs, gt_segs = [], []
        for e in framed:
            rec = predictions[e.id]
            fs = rec.get("frame_scores")
            if fs is None or len(fs) != len(e.frame_labels):
                raise CoverageError(f"entry {e.id}: frame scores missing or of the wrong length")
            f_scores.extend(fs)
            f_labels.extend(e.frame_labels)
            f_video.extend([e.video_label] * len(fs))
            for start, end, c in e.frame_spans or []:
                gt_segs.append(TemporalSegment(int(start), int(end), c, 1.0, e.id))
            c = rec.get("class")
            if c is not None and c != normal:
                pred_segs.extend(
                    segments_from_scores(fs, [c] * len(fs), cfg.frame_threshold, video=e.id)
                )
        report["ano_auc"] = _safe(ano_auc, f_scores, f_labels, f_video, cfg.ano_auc_restrict)
        if gt_segs:
            m = map_at_iou(pred_segs, gt_segs, cfg.iou_thresholds)
            report["map_at_iou"] = {("avg" if k == "avg" else repr(k)): v for k, v in m.items()}
    return report


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def run_command(cfg: RunConfig, data_dir, out_dir, split: str | None = "test", fine_optional: bool = True):
    """Two-stage inference over a split, then the metric report."""
    out = Path(out_dir)
    ds = load_dataset(data_dir)
    student = checkpoints.load_student(_require(out / STUDENT_FILE, "student checkpoint"))
    fine_path = out / FINE_FILE
    fine = None
    if fine_path.exists():
        fine = checkpoints.load_fine(fine_path, ds.classes, partitions=cfg.partitions)
    elif not fine_optional:
        raise ConfigurationError(f"fine-stage checkpoint not found at {fine_path}")
    stage = TwoStage(student, fine, cfg.theta_gate)
    entries = ds.select(split)
    records = predict_entries(stage, ds, entries, cfg.partitions)
    write_predictions(out / PREDICTIONS_FILE, records)
    report = eval_command(entries, {r["id"]: r for r in records}, cfg, ds.classes.normal)
    write_report(out / REPORT_FILE, report)
    return report, stage.fine_calls


def full_pipeline(cfg: RunConfig, work_dir) -> dict:
    """gen-synth, train-coarse, distill, train-fine and run, all under ``work_dir``."""
    work = Path(work_dir)
    data = work / "data"
    gen_synth_command(cfg, data)
    train_coarse_command(cfg, data, work)
    distill_command(cfg, data, work)
    train_fine_command(cfg, data, work)
    report, _ = run_command(cfg, data, work)
    return report
