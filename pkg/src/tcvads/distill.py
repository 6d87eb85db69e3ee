"""Knowledge distillation into a three-layer temporal CNN, with the
distillation temperature chosen by Gaussian-process Bayesian optimization.

The teacher's video score p is turned into two-class logits ``[0, logit(p)]``;
the student emits ``[0, z]`` from its own video logit z. The hard loss is
BCE on the student's probability, the soft loss the temperature-scaled KL
divergence between the two distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import (
    EvaluationError,
    NumericalError,
    ParameterError,
    SequenceTooShortError,
    TrainingDataError,
)
from .numerics import bce_loss, kl_soft_grad, kl_soft_loss, logit, relu, sigmoid

KERNEL_WIDTH = 3

# ---------------------------------------------------------------------------
# student network
# ---------------------------------------------------------------------------

STUDENT_PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3", "head_w", "head_b")


@dataclass
class QacmStudent:
    w1: np.ndarray  # (h, d, 3)
    b1: np.ndarray
    w2: np.ndarray  # (h, h, 3)
    b2: np.ndarray
    w3: np.ndarray  # (h, h, 3)
    b3: np.ndarray
    head_w: np.ndarray  # (h,)
    head_b: np.ndarray  # (1,)

    @classmethod
    def init(cls, d: int, hidden: int = 16, seed: int = 0) -> "QacmStudent":
        rng = np.random.default_rng(seed)

        def conv(c_in):
            return rng.normal(0.0, math.sqrt(2.0 / (c_in * KERNEL_WIDTH)), (hidden, c_in, KERNEL_WIDTH))

        return cls(
            conv(d), np.zeros(hidden),
            conv(hidden), np.zeros(hidden),
            conv(hidden), np.zeros(hidden),
            rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden), np.zeros(1),
        )

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in STUDENT_PARAMS}

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "QacmStudent":
        return QacmStudent(*(getattr(self, n).copy() for n in STUDENT_PARAMS))

    def layers(self):
        return ((self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3))


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # same-padded correlation over time: z[t,o] = sum_{c,j} w[o,c,j] x[t+j-1,c] + b[o]
    n = x.shape[0]
    xp = np.pad(x, ((1, 1), (0, 0)))
    z = np.broadcast_to(b, (n, w.shape[0])).copy()
    for j in range(KERNEL_WIDTH):
        z += xp[j : j + n] @ w[:, :, j].T
    return z


def _conv1d_backward(dz: np.ndarray, x: np.ndarray, w: np.ndarray):
    n = x.shape[0]
    xp = np.pad(x, ((1, 1), (0, 0)))
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for j in range(KERNEL_WIDTH):
        dw[:, :, j] = dz.T @ xp[j : j + n]
        dxp[j : j + n] += dz @ w[:, :, j]
    return dxp[1:-1], dw, dz.sum(axis=0)


def _student_cache(student: QacmStudent, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != student.dim:
        raise ParameterError(f"features of shape {x.shape} do not match student dim {student.dim}")
    if x.shape[0] < KERNEL_WIDTH:
        raise SequenceTooShortError(
            f"student needs at least {KERNEL_WIDTH} frames, got {x.shape[0]}"
        )
    acts = [x]
    pres = []
    for w, b in student.layers():
        z = _conv1d(acts[-1], w, b)
        pres.append(z)
        acts.append(relu(z))
    pooled = acts[-1].mean(axis=0)
    return acts, pres, pooled


def student_forward(student: QacmStudent, x):
    """Returns ``(video_logit, frame_logits)``; the video logit reads the time-pooled features."""
    acts, _, pooled = _student_cache(student, x)
    head_b = student.head_b[0]
    return float(pooled @ student.head_w + head_b), acts[-1] @ student.head_w + head_b


def student_backward(student: QacmStudent, x, d_logit: float) -> dict:
    """Parameter gradients given dL/d(video logit)."""
    acts, pres, pooled = _student_cache(student, x)
    grads = {"head_w": pooled * d_logit, "head_b": np.array([d_logit])}
    n = acts[0].shape[0]
    da = np.broadcast_to(student.head_w * d_logit / n, acts[-1].shape)
    for i in (2, 1, 0):
        w, _ = student.layers()[i]
        dz = da * (pres[i] > 0)
        da, dw, db = _conv1d_backward(dz, acts[i], w)
        grads[f"w{i + 1}"] = dw
        grads[f"b{i + 1}"] = db
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def hard_loss(student_probs, labels) -> float:
    return bce_loss(student_probs, labels)


def total_distill_loss(hard: float, soft: float, lam: float) -> float:
    return hard + lam * soft


def binary_logits(z) -> np.ndarray:
    """Two-class logit rows ``[0, z]`` whose softmax is ``[1 - sigmoid(z), sigmoid(z)]``."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    return np.stack([np.zeros_like(z), z], axis=1)


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------


def se_kernel(a, b, sigma_f2: float, length: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[None, :]
    return sigma_f2 * np.exp(-((a - b) ** 2) / (2.0 * length**2))


@dataclass
class GpModel:
    t_obs: np.ndarray
    y_obs: np.ndarray
    sigma_f2: float
    length: float
    noise2: float
    y_mean: float
    chol: np.ndarray
    alpha: np.ndarray

    def log_marginal_likelihood(self) -> float:
        yc = self.y_obs - self.y_mean
        return float(
            -0.5 * yc @ self.alpha
            - np.log(np.diag(self.chol)).sum()
            - 0.5 * len(yc) * math.log(2 * math.pi)
        )


def gp_fit(t_obs, y_obs, sigma_f2: float = 1.0, length: float = 0.75, noise2: float = 1e-6) -> GpModel:
    """Condition a zero-mean GP on mean-centred observations."""
    t = np.asarray(t_obs, dtype=np.float64).ravel()
    y = np.asarray(y_obs, dtype=np.float64).ravel()
    if t.size == 0 or t.size != y.size:
        raise ParameterError("need at least one (T, loss) observation with matching lengths")
    if sigma_f2 <= 0 or length <= 0 or noise2 < 0:
        raise ParameterError("kernel hyperparameters must be positive")
    y_mean = float(y.mean())
    gram = se_kernel(t, t, sigma_f2, length)
    jitter = noise2
    while True:
        try:
            chol = np.linalg.cholesky(gram + jitter * np.eye(t.size))
            break
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10)
            if jitter > 1e-3:
                raise NumericalError("Gram matrix not positive definite even with 1e-3 jitter") from None
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y - y_mean))
    return GpModel(t, y, sigma_f2, length, jitter, y_mean, chol, alpha)


def gp_posterior(model: GpModel, t_star):
    """Posterior mean and latent-function variance at ``t_star`` (scalar or array)."""
    ts = np.atleast_1d(np.asarray(t_star, dtype=np.float64))
    ks = se_kernel(model.t_obs, ts, model.sigma_f2, model.length)
    mu = model.y_mean + ks.T @ model.alpha
    v = np.linalg.solve(model.chol, ks)
    var = np.maximum(model.sigma_f2 - (v * v).sum(axis=0), 0.0)
    if np.ndim(t_star) == 0:
        return float(mu[0]), float(var[0])
    return mu, var


def select_hyperparameters(t_obs, y_obs, noise2: float = 1e-6, grid=(0.25, 0.5, 1.0, 2.0)):
    """Best (sigma_f2, length) on a small grid by log marginal likelihood."""
    best = None
    for sf in grid:
        for ln in grid:
            m = gp_fit(t_obs, y_obs, sf, ln, noise2)
            score = m.log_marginal_likelihood()
            if best is None or score > best[0]:
                best = (score, sf, ln)
    return best[1], best[2]


def ei_closed_form(mu, sigma, f_best):
    """Expected improvement below ``f_best`` for a normal predictive."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    gain = f_best - mu
    safe = np.where(sigma > 0, sigma, 1.0)
    z = gain / safe
    ei = gain * ndtr(z) + safe * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return np.maximum(np.where(sigma > 0, ei, np.maximum(gain, 0.0)), 0.0)


def expected_improvement(model: GpModel, t, f_best: float):
    mu, var = gp_posterior(model, t)
    ei = ei_closed_form(mu, np.sqrt(var), f_best)
    return float(ei) if np.ndim(t) == 0 else ei


# ---------------------------------------------------------------------------
# Bayesian optimization
# ---------------------------------------------------------------------------


@dataclass
class BoConfig:
    t_min: float = 0.5
    t_max: float = 5.0
    n_init: int = 5
    n_iter: int = 30
    grid_size: int = 256
    sigma_f2: float = 1.0
    length: float = 0.75
    noise2: float = 1e-6
    select_hyperparameters: bool = False

    def __post_init__(self):
        if self.t_min <= 0 or self.t_max <= self.t_min:
            raise ParameterError("need 0 < t_min < t_max")
        if self.n_init < 2:
            raise ParameterError("n_init must be >= 2")
        if self.n_iter < 0 or self.grid_size < 2:
            raise ParameterError("n_iter >= 0 and grid_size >= 2 required")

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.grid_size)


def argmax_smallest(values: np.ndarray, rel_tol: float = 1e-9) -> int:
    """Index of the maximum; near-ties resolve to the smallest index."""
    top = float(np.max(values))
    tol = rel_tol * max(abs(top), 1e-300)
    return int(np.nonzero(values >= top - tol)[0][0])


def propose_next(model: GpModel, config: BoConfig, f_best: float, exclude=()) -> float:
    """Grid point with the largest EI; ties go to the smaller temperature and an
    all-zero EI falls back to the point nearest the middle of the range."""
    grid = config.grid()
    ei = expected_improvement(model, grid, f_best)
    for t in exclude:
        ei[np.isclose(grid, t, rtol=0, atol=1e-12)] = -np.inf
    if not np.any(ei > 0):
        mid = 0.5 * (config.t_min + config.t_max)
        return float(grid[int(np.argmin(np.abs(grid - mid)))])
    return float(grid[argmax_smallest(ei)])


@dataclass
class TraceRow:
    iteration: int
    t: float
    loss: float
    ei: float  # EI at proposal time; NaN for initial design points


def optimize_temperature(loss_fn, bo: BoConfig = BoConfig()):
    """Minimize ``loss_fn`` over [t_min, t_max]; returns ``(t_opt, trace)``.

    Runs ``n_init`` evenly spaced evaluations and then ``n_iter`` EI proposals.
    Non-finite evaluations are recorded in the trace but not fed to the GP.
    """
    trace = []
    good_t, good_y, bad_t = [], [], []

    def evaluate(t, ei):
        y = float(loss_fn(t))
        trace.append(TraceRow(len(trace), t, y, ei))
        if math.isfinite(y):
            good_t.append(t)
            good_y.append(y)
        else:
            bad_t.append(t)

    for t in np.linspace(bo.t_min, bo.t_max, bo.n_init):
        evaluate(float(t), float("nan"))
    for _ in range(bo.n_iter):
        if not good_t:
            raise EvaluationError("loss function returned no finite values")
        sf, ln = (
            select_hyperparameters(good_t, good_y, bo.noise2)
            if bo.select_hyperparameters
            else (bo.sigma_f2, bo.length)
        )
        model = gp_fit(good_t, good_y, sf, ln, bo.noise2)
        f_best = min(good_y)
        t_next = propose_next(model, bo, f_best, exclude=bad_t)
        evaluate(t_next, expected_improvement(model, t_next, f_best))
    if not good_t:
        raise EvaluationError("loss function returned no finite values")
    best = int(np.argmin(good_y))
    return good_t[best], trace


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    lam: float = 0.5
    epochs: int = 30
    learning_rate: float = 0.2
    batch_size: int = 8
    seed: int = 0
    hidden: int = 16
    probe_epochs: int = 5

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if self.epochs < 1 or self.probe_epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")


def student_losses(student: QacmStudent, x, label: float, teacher_logit: float | None, temp: float | None):
    """Per-video (hard, soft, d_logit_hard, d_logit_soft)."""
    z, _ = student_forward(student, x)
    p = float(sigmoid(z))
    hard = bce_loss([p], [label])
    d_hard = p - label
    if teacher_logit is None:
        return hard, 0.0, d_hard, 0.0
    t_row = binary_logits(teacher_logit)
    s_row = binary_logits(z)
    soft = kl_soft_loss(t_row, s_row, temp)
    d_soft = float(kl_soft_grad(t_row, s_row, temp)[0, 1])
    return hard, soft, d_hard, d_soft


def train_student(
    dataset,
    cfg: DistillConfig,
    teacher_logits=None,
    temp: float | None = None,
    epochs: int | None = None,
    student: QacmStudent | None = None,
):
    """Minibatch SGD on mean hard loss + lam * mean soft loss.

    Without ``teacher_logits`` this is plain supervised BCE training. Returns
    ``(student, history)`` where history holds one mean total loss per epoch.
    """
    if not dataset:
        raise TrainingDataError("empty training set")
    d = np.asarray(dataset[0][0]).shape[1]
    student = student or QacmStudent.init(d, cfg.hidden, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    params = student.parameters()
    history = []
    for _ in range(epochs or cfg.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = {name: np.zeros_like(arr) for name, arr in params.items()}
            for i in batch:
                x, y = dataset[i]
                tl = None if teacher_logits is None else teacher_logits[i]
                hard, soft, dh, ds = student_losses(student, x, float(y), tl, temp)
                total += total_distill_loss(hard, soft, cfg.lam)
                d_logit = total_distill_loss(dh, ds, cfg.lam) / len(batch)
                for name, g in student_backward(student, x, d_logit).items():
                    acc[name] += g
            for name, arr in params.items():
                arr -= cfg.learning_rate * acc[name]
        history.append(total / len(dataset))
    return student, history


def dataset_soft_loss(student: QacmStudent, dataset, teacher_logits, temp: float) -> float:
    """Summed soft loss over the dataset."""
    z = np.array([student_forward(student, x)[0] for x, _ in dataset])
    return kl_soft_loss(binary_logits(teacher_logits), binary_logits(z), temp)


def teacher_logits_for(teacher, dataset) -> np.ndarray:
    from .timemixer import video_score

    return np.array([float(logit(video_score(teacher, x)[1])) for x, _ in dataset])


@dataclass
class DistillResult:
    student: QacmStudent
    t_opt: float
    history: list
    trace: list = field(default_factory=list)


def distill(teacher, dataset, cfg: DistillConfig = DistillConfig(), bo: BoConfig = BoConfig()) -> DistillResult:
    """Pick the temperature by BO over short training probes, then train the
    student on hard + lam * soft at that temperature."""
    if not dataset:
        raise TrainingDataError("empty distillation set")
    t_logits = teacher_logits_for(teacher, dataset)

    def probe(temp):
        st, _ = train_student(dataset, cfg, t_logits, temp, epochs=cfg.probe_epochs)
        return dataset_soft_loss(st, dataset, t_logits, temp)

    t_opt, trace = optimize_temperature(probe, bo)
    student, history = train_student(dataset, cfg, t_logits, t_opt)
    return DistillResult(student, t_opt, history, trace)
