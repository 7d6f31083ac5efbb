"""Lifelong test-time adaptation engine and baselines.

The self-training methods (``petal``, ``cotta``) keep a student model and an
exponential-moving-average teacher. Each batch: the teacher emits pseudo-label
probability rows (averaged over randomized augmentations when the frozen
source model is unconfident on the input), the student takes one optimizer
step on a cross-entropy objective (``petal`` adds a source-posterior
log-density anchor weighted by alpha), the teacher is EMA-updated, and a
subset of student parameters is restored to the source values, chosen either
at random or as the coordinates with the smallest squared loss gradient.

Baselines behind the same step interface: ``source`` (no adaptation),
``bn_adapt`` (batch-statistics refresh only), ``pseudo_label`` (hard
self-labels, BN affine parameters only), ``tent`` (entropy minimization, BN
affine parameters only).

All per-batch predictions are emitted before the update that uses that
batch's gradient; evaluation is strictly online.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    backward,
    gaussian_log_density,
    soft_cross_entropy,
    softmax,
    softmax_entropy_mean,
    weighted_sum,
)
from .metrics import MetricAccumulator, MetricSummary, per_sample_scores
from .model import FlatParams, MlpClassifier, bn_affine_filter, param_mask
from .streams import IMAGE_SIDE, StreamSchedule, SyntheticDataset, _box_blur, stream_batches
from .swag import SwagDiagPosterior, one_hot

Array = np.ndarray

ADAPT_METHODS = ("petal", "cotta")
BASELINE_METHODS = ("source", "bn_adapt", "pseudo_label", "tent")
RESTORE_MODES = ("none", "stochastic", "fim")

# winner of the regularizer-weight grid on the held-out tuning corruption
DEFAULT_ALPHA = 1e-6


class NonFiniteLossError(RuntimeError):
    """The adaptation objective left the finite range; the run must abort."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AugmentParams:
    """Magnitudes for the randomized input augmentations (zero disables one)."""

    brightness: float = 0.1
    contrast: float = 0.2
    max_shift_px: float = 1.0
    max_rot_deg: float = 10.0
    blur_prob: float = 0.3
    flip_prob: float = 0.5
    noise_std: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PetalConfig:
    """Knobs of the adaptation step.

    ``tau`` is deliberately not range-checked here: values outside [0, 1]
    force the augmentation gate fully open or closed, which tests rely on.
    """

    method: str = "petal"
    k_aug: int = 32
    tau: float = 0.72
    alpha: float = DEFAULT_ALPHA
    pi: float = 0.999
    eta: float = 1e-3
    restore: str = "fim"
    rho: float = 0.01
    delta: float = 0.03
    optimizer: str = "adam"
    predict_from: str = "teacher"
    reset_optimizer_state: bool = False
    tent_online: bool = False
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self) -> None:
        if self.method not in ADAPT_METHODS + BASELINE_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.restore not in RESTORE_MODES:
            raise ValueError(f"unknown restore mode {self.restore!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.predict_from not in ("teacher", "student"):
            raise ValueError(f"unknown predict_from {self.predict_from!r}")
        if self.k_aug < 1:
            raise ValueError("k_aug must be >= 1")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must be in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must be in [0, 1]")
        if self.eta < 0.0 or self.alpha < 0.0:
            raise ValueError("eta and alpha must be non-negative")


# ---------------------------------------------------------------------------
# augmentation


def _affine_batch(images: Array, dx: Array, dy: Array, theta: Array) -> Array:
    """Per-sample rotation + shift with bilinear resampling, replicate border."""
    b, side, _ = images.shape
    center = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    rr = rows[None] - center
    cc = cols[None] - center
    cos = np.cos(theta)[:, None, None]
    sin = np.sin(theta)[:, None, None]
    src_r = cos * rr + sin * cc + center - dy[:, None, None]
    src_c = -sin * rr + cos * cc + center - dx[:, None, None]
    src_r = np.clip(src_r, 0.0, side - 1.0)
    src_c = np.clip(src_c, 0.0, side - 1.0)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, side - 1)
    c1 = np.minimum(c0 + 1, side - 1)
    fr = src_r - r0
    fc = src_c - c0
    bidx = np.arange(b)[:, None, None]
    top = images[bidx, r0, c0] * (1.0 - fc) + images[bidx, r0, c1] * fc
    bottom = images[bidx, r1, c0] * (1.0 - fc) + images[bidx, r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def augment(images: Array, rng: np.random.Generator, params: AugmentParams | None = None) -> Array:
    """One randomized draw of the augmentation pipeline, clipped to [0, 1].

    Accepts (B, 64) or (B, 8, 8); the output matches the input shape. With all
    magnitudes zero the input comes back bit-identical.
    """
    if params is None:
        params = AugmentParams()
    shape_in = images.shape
    if images.ndim == 2:
        if images.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
            raise ValueError("flattened images must have 64 columns")
        batch = images.reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    elif images.ndim == 3:
        batch = images
    else:
        raise ValueError("augment expects (B, 64) or (B, 8, 8)")
    out = batch.astype(np.float64)  # astype copies, so the input stays intact
    b = out.shape[0]
    changed = False
    if params.contrast:
        factors = rng.uniform(1.0 - params.contrast, 1.0 + params.contrast, b)
        out = 0.5 + factors[:, None, None] * (out - 0.5)
        changed = True
    if params.brightness:
        out = out + rng.uniform(-params.brightness, params.brightness, b)[:, None, None]
        changed = True
    if params.max_shift_px or params.max_rot_deg:
        dx = rng.uniform(-params.max_shift_px, params.max_shift_px, b)
        dy = rng.uniform(-params.max_shift_px, params.max_shift_px, b)
        theta = np.deg2rad(rng.uniform(-params.max_rot_deg, params.max_rot_deg, b))
        out = _affine_batch(out, dx, dy, theta)
        changed = True
    if params.blur_prob:
        flags = rng.random(b) < params.blur_prob
        if flags.any():
            out[flags] = _box_blur(out[flags], 3, 1)
        changed = True
    if params.flip_prob:
        flags = rng.random(b) < params.flip_prob
        out[flags] = out[flags, :, ::-1]
        changed = True
    if params.noise_std:
        out = out + rng.normal(0.0, params.noise_std, out.shape)
        changed = True
    if changed:
        out = np.clip(out, 0.0, 1.0)
    return out.reshape(shape_in)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class AdamState:
    m: Array
    v: Array
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim))


def adam_delta(opt: AdamState, grad: Array, lr: float) -> Array:
    """Advance the Adam moments and return the step to subtract."""
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad**2
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    return lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# ---------------------------------------------------------------------------
# state


@dataclass(eq=False)
class AdaptState:
    student: MlpClassifier
    teacher: MlpClassifier
    source_model: MlpClassifier  # frozen, eval BN; used for the confidence gate
    source: FlatParams  # theta_0, the restore target
    step: int
    opt: AdamState
    rng_augment: np.random.Generator
    rng_restore: np.random.Generator


def init_adapt_state(
    source_model: MlpClassifier,
    posterior: SwagDiagPosterior,
    cfg: PetalConfig,
    *,
    seed: int | None = None,
    rng_augment: np.random.Generator | None = None,
    rng_restore: np.random.Generator | None = None,
) -> AdaptState:
    """Student and teacher both start from the posterior mode."""
    student = source_model.clone()
    student.load(posterior.map_params())
    gate = student.clone()
    gate.set_bn_mode("eval")
    teacher = student.clone()
    teacher.set_bn_mode("train")
    student.set_bn_mode("eval" if cfg.method == "source" else "train")
    if rng_augment is None or rng_restore is None:
        children = np.random.SeedSequence(0 if seed is None else seed).spawn(2)
        if rng_augment is None:
            rng_augment = np.random.Generator(np.random.PCG64(children[0]))
        if rng_restore is None:
            rng_restore = np.random.Generator(np.random.PCG64(children[1]))
    theta0 = student.flatten()
    return AdaptState(
        student=student,
        teacher=teacher,
        source_model=gate,
        source=theta0,
        step=0,
        opt=AdamState.zeros(theta0.dim),
        rng_augment=rng_augment,
        rng_restore=rng_restore,
    )


# ---------------------------------------------------------------------------
# step report


@dataclass(eq=False)
class StepReport:
    predictions: Array  # (B, C) probability rows, emitted online
    restored: int
    loss: float
    wall_time: float

    def __post_init__(self) -> None:
        rows = self.predictions
        if rows.ndim != 2 or (np.abs(rows.sum(axis=1) - 1.0) > 1e-6).any() or (rows < 0).any():
            raise ValueError("prediction rows must be probability distributions")


# ---------------------------------------------------------------------------
# pseudo-labels and losses


def _teacher_probs(model: MlpClassifier, batches: Sequence[Array]) -> list[Array]:
    # batch-statistics normalization without touching the teacher's buffers,
    # so the K forwards are pure and may run on threads
    def run(batch: Array) -> Array:
        return softmax(model.forward(batch, update_stats=False)).data

    workers = int(os.environ.get("PETAL_THREADS", "1") or "1")
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, batches))
    return [run(batch) for batch in batches]


def teacher_pseudo_label(state: AdaptState, images: Array, cfg: PetalConfig) -> Array:
    """Per-sample soft pseudo-labels from the teacher.

    When the frozen source model's max softmax probability on a sample is
    below tau, that sample's label is the teacher's prediction averaged over
    k_aug augmentation draws; otherwise it is the direct teacher prediction.
    """
    source_probs = softmax(state.source_model.forward(images)).data
    confidence = source_probs.max(axis=1)
    direct = softmax(state.teacher.forward(images, update_stats=False)).data
    needs_averaging = confidence < cfg.tau
    if not needs_averaging.any():
        return direct
    draws = [augment(images, state.rng_augment, cfg.augment) for _ in range(cfg.k_aug)]
    total = np.zeros_like(direct)
    for probs in _teacher_probs(state.teacher, draws):
        total += probs
    averaged = total / cfg.k_aug
    return np.where(needs_averaging[:, None], averaged, direct)


def petal_loss(
    state: AdaptState,
    images: Array,
    pseudo: Array,
    posterior: SwagDiagPosterior,
    cfg: PetalConfig,
    tape: Tape,
):
    """Minimization objective: cross-entropy to the pseudo-labels minus
    alpha times the source-posterior log-density of the student parameters.

    The student forward runs in train-BN mode and adapts its statistics.
    Returns (loss node, parameter tensors by name, student logits).
    """
    logits, wrapped = state.student.taped_forward(images, tape)
    ce = soft_cross_entropy(Tensor(pseudo), logits, tape)
    if cfg.alpha == 0.0:
        return ce, wrapped, logits
    names = state.student.param_names
    if posterior.mu.names != names:
        raise ValueError("posterior layout does not match the student registry")
    log_q = gaussian_log_density(
        [wrapped[n] for n in names],
        [posterior.mu.slice(n) for n in names],
        [posterior.sigma2.slice(n) for n in names],
        tape,
    )
    loss = weighted_sum([(1.0, ce), (-cfg.alpha, log_q)], tape=tape)
    return loss, wrapped, logits


def ema_update(teacher: MlpClassifier, student: MlpClassifier, pi: float) -> None:
    """theta' <- pi * theta' + (1 - pi) * theta over trainables; the teacher's
    BN running statistics are replaced by the student's."""
    if teacher.param_names != student.param_names:
        raise ValueError("teacher/student registry mismatch")
    for name in teacher.param_names:
        teacher.params[name] = pi * teacher.params[name] + (1.0 - pi) * student.params[name]
    teacher.stats = {i: s.copy() for i, s in student.stats.items()}


# ---------------------------------------------------------------------------
# restoration


def fim_diag(grad: Array) -> Array:
    """Diagonal of grad grad^T: the elementwise square."""
    return np.asarray(grad, dtype=np.float64) ** 2


def fim_mask(fim: Array, delta: float) -> Array:
    """Select exactly floor(delta * D) coordinates with the smallest values;
    ties break toward the lower index."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    dim = fim.size
    keep = int(math.floor(delta * dim))
    mask = np.zeros(dim, dtype=bool)
    if keep:
        order = np.argsort(fim, kind="stable")
        mask[order[:keep]] = True
    return mask


def stochastic_mask(dim: int, rho: float, rng: np.random.Generator) -> Array:
    """I.i.d. Bernoulli(rho) mask from the restore stream."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    return rng.random(dim) < rho


def restore(theta: FlatParams, theta0: FlatParams, mask: Array) -> FlatParams:
    """mask selects coordinates reset to theta0; the rest keep theta."""
    if theta.dim != theta0.dim or mask.shape != (theta.dim,):
        raise ValueError("restore dimension mismatch")
    return theta.with_values(np.where(mask, theta0.values, theta.values))


def _apply_restore(state: AdaptState, grad_vec: Array, cfg: PetalConfig) -> int:
    if cfg.restore == "none":
        return 0
    if cfg.restore == "fim":
        mask = fim_mask(fim_diag(grad_vec), cfg.delta)
    else:
        mask = stochastic_mask(grad_vec.size, cfg.rho, state.rng_restore)
    flat = state.student.flatten()
    state.student.load(restore(flat, state.source, mask))
    if cfg.reset_optimizer_state:
        state.opt.m[mask] = 0.0
        state.opt.v[mask] = 0.0
    return int(mask.sum())


# ---------------------------------------------------------------------------
# adaptation steps


def _grad_vector(model: MlpClassifier, wrapped: dict, grads: dict) -> Array:
    blocks = []
    for name in model.param_names:
        g = grads.get(wrapped[name])
        blocks.append(g.ravel() if g is not None else np.zeros(model.params[name].size))
    return np.concatenate(blocks)


def _descend(state: AdaptState, grad_vec: Array, cfg: PetalConfig) -> None:
    flat = state.student.flatten()
    if cfg.optimizer == "adam":
        delta = adam_delta(state.opt, grad_vec, cfg.eta)
    else:
        delta = cfg.eta * grad_vec
    state.student.load(flat.with_values(flat.values - delta))


def _check_finite_loss(value: float, state: AdaptState, what: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{what} became non-finite at step {state.step}")


def _petal_step(state: AdaptState, images: Array, posterior: SwagDiagPosterior, cfg: PetalConfig) -> StepReport:
    start = time.perf_counter()
    tape = Tape()
    try:
        pseudo = teacher_pseudo_label(state, images, cfg)
        loss, wrapped, logits = petal_loss(state, images, pseudo, posterior, cfg, tape)
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"non-finite forward at step {state.step}: {exc}") from exc
    loss_value = loss.item()
    _check_finite_loss(loss_value, state, "adaptation loss")
    grad_vec = _grad_vector(state.student, wrapped, backward(loss, tape))
    _descend(state, grad_vec, cfg)
    ema_update(state.teacher, state.student, cfg.pi)
    restored = _apply_restore(state, grad_vec, cfg)
    state.step += 1
    preds = pseudo if cfg.predict_from == "teacher" else softmax(logits).data
    return StepReport(preds, restored, loss_value, time.perf_counter() - start)


def _cotta_step(state: AdaptState, images: Array, cfg: PetalConfig) -> StepReport:
    # student-teacher cross-entropy only; no posterior anchor
    start = time.perf_counter()
    tape = Tape()
    try:
        pseudo = teacher_pseudo_label(state, images, cfg)
        logits, wrapped = state.student.taped_forward(images, tape)
        loss = soft_cross_entropy(Tensor(pseudo), logits, tape)
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"non-finite forward at step {state.step}: {exc}") from exc
    loss_value = loss.item()
    _check_finite_loss(loss_value, state, "adaptation loss")
    grad_vec = _grad_vector(state.student, wrapped, backward(loss, tape))
    _descend(state, grad_vec, cfg)
    ema_update(state.teacher, state.student, cfg.pi)
    restored = _apply_restore(state, grad_vec, cfg)
    state.step += 1
    preds = pseudo if cfg.predict_from == "teacher" else softmax(logits).data
    return StepReport(preds, restored, loss_value, time.perf_counter() - start)


def adapt_step(
    state: AdaptState,
    images: Array,
    posterior: SwagDiagPosterior,
    cfg: PetalConfig,
) -> StepReport:
    """One online self-training step; predictions are computed before the
    update that uses this batch's gradient."""
    if cfg.method == "petal":
        return _petal_step(state, images, posterior, cfg)
    if cfg.method == "cotta":
        return _cotta_step(state, images, cfg)
    raise ValueError(f"adapt_step does not handle method {cfg.method!r}")


def baseline_step(state: AdaptState, images: Array, cfg: PetalConfig) -> StepReport:
    """One step of a comparison baseline."""
    start = time.perf_counter()
    if cfg.method == "source":
        preds = softmax(state.student.forward(images)).data
        state.step += 1
        return StepReport(preds, 0, float("nan"), time.perf_counter() - start)
    if cfg.method == "bn_adapt":
        preds = softmax(state.student.forward(images, update_stats=True)).data
        state.step += 1
        return StepReport(preds, 0, float("nan"), time.perf_counter() - start)
    if cfg.method in ("tent", "pseudo_label"):
        tape = Tape()
        try:
            logits, wrapped = state.student.taped_forward(images, tape)
            preds = softmax(logits).data
            if cfg.method == "tent":
                loss = softmax_entropy_mean(logits, tape)
            else:
                hard = one_hot(preds.argmax(axis=1), preds.shape[1])
                loss = soft_cross_entropy(Tensor(hard), logits, tape)
        except FloatingPointError as exc:
            raise NonFiniteLossError(f"non-finite forward at step {state.step}: {exc}") from exc
        loss_value = loss.item()
        _check_finite_loss(loss_value, state, f"{cfg.method} loss")
        grad_vec = _grad_vector(state.student, wrapped, backward(loss, tape))
        grad_vec[~param_mask(state.source, bn_affine_filter)] = 0.0
        _descend(state, grad_vec, cfg)
        state.step += 1
        return StepReport(preds, 0, loss_value, time.perf_counter() - start)
    raise ValueError(f"unknown baseline method {cfg.method!r}")


# ---------------------------------------------------------------------------
# full runs


@dataclass(eq=False)
class SegmentResult:
    segment: int
    kind: str
    severity: int
    count: int
    error: float
    nll: float
    brier: float
    restored_mean: float


@dataclass(eq=False)
class RunReport:
    seed: int
    method: str
    config: dict
    schedule: dict
    segments: list[SegmentResult]
    overall: dict | None
    rows: list[dict]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "method": self.method,
            "config": self.config,
            "schedule": self.schedule,
            "segments": [vars(s) for s in self.segments],
            "overall": self.overall,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def rows_to_csv(self) -> str:
        lines = ["step,segment,error,nll,brier,loss,restored"]
        for row in self.rows:
            lines.append(
                f"{row['step']},{row['segment']},{row['error']!r},{row['nll']!r},"
                f"{row['brier']!r},{row['loss']!r},{row['restored']}"
            )
        return "\n".join(lines) + "\n"


def _schedule_document(schedule: StreamSchedule) -> dict:
    try:
        return schedule.to_document()
    except ValueError:
        return {
            "segments": [
                {"kind": spec.kind, "severity": spec.severity, "batches": count}
                for spec, count in schedule.segments
            ],
            "batch_size": schedule.batch_size,
        }


def _reset_to_source(state: AdaptState) -> None:
    state.student.load(state.source)
    state.student.stats = {i: s.copy() for i, s in state.source_model.stats.items()}
    state.opt = AdamState.zeros(state.source.dim)


def run_lifelong(
    schedule: StreamSchedule,
    dataset: SyntheticDataset,
    posterior: SwagDiagPosterior,
    source_model: MlpClassifier,
    cfg: PetalConfig,
    seed: int,
) -> tuple[RunReport, AdaptState]:
    """Stream every scheduled batch through the configured method.

    Segment boundaries are never used to reset state, except under the
    oracle-assisted ``tent_online`` flag which re-initializes the adapting
    model whenever the segment id changes.
    """
    stream_ss, augment_ss, restore_ss = np.random.SeedSequence(seed).spawn(3)
    state = init_adapt_state(
        source_model,
        posterior,
        cfg,
        rng_augment=np.random.Generator(np.random.PCG64(augment_ss)),
        rng_restore=np.random.Generator(np.random.PCG64(restore_ss)),
    )
    stream_rng = np.random.Generator(np.random.PCG64(stream_ss))
    acc = MetricAccumulator()
    rows: list[dict] = []
    restored_by_segment: dict[int, list[int]] = {}
    previous_segment: int | None = None
    for batch, labels in stream_batches(schedule, dataset, stream_rng):
        if (
            cfg.tent_online
            and previous_segment is not None
            and batch.segment != previous_segment
        ):
            _reset_to_source(state)
        previous_segment = batch.segment
        if cfg.method in ADAPT_METHODS:
            report = adapt_step(state, batch.images, posterior, cfg)
        else:
            report = baseline_step(state, batch.images, cfg)
        err, nll_values, brier_values = per_sample_scores(report.predictions, labels)
        acc.update(batch.segment, report.predictions, labels)
        rows.append(
            {
                "step": len(rows),
                "segment": batch.segment,
                "error": 100.0 * float(err.mean()),
                "nll": float(nll_values.mean()),
                "brier": float(brier_values.mean()),
                "loss": report.loss,
                "restored": report.restored,
            }
        )
        restored_by_segment.setdefault(batch.segment, []).append(report.restored)
    segments = []
    for segment_id, (spec, _) in enumerate(schedule.segments):
        if segment_id not in restored_by_segment:
            continue
        summary = acc.segment_summary(segment_id)
        segments.append(
            SegmentResult(
                segment=segment_id,
                kind=spec.kind,
                severity=spec.severity,
                count=summary.count,
                error=summary.error,
                nll=summary.nll,
                brier=summary.brier,
                restored_mean=float(np.mean(restored_by_segment[segment_id])),
            )
        )
    overall = None
    if acc.count:
        total = acc.overall()
        overall = {
            "count": total.count,
            "error": total.error,
            "nll": total.nll,
            "brier": total.brier,
            "restored_mean": float(np.mean([r["restored"] for r in rows])),
        }
    report = RunReport(
        seed=seed,
        method=cfg.method,
        config=asdict(cfg),
        schedule=_schedule_document(schedule),
        segments=segments,
        overall=overall,
        rows=rows,
    )
    return report, state


def evaluate_model(model: MlpClassifier, images: Array, labels: Array) -> MetricSummary:
    """Offline eval-mode metrics of a model on a labeled set."""
    flat = images.reshape(images.shape[0], -1)
    mode = model.bn_mode
    model.set_bn_mode("eval")
    preds = softmax(model.forward(flat)).data
    model.set_bn_mode(mode)
    err, nll_values, brier_values = per_sample_scores(preds, labels)
    return MetricSummary(
        count=labels.size,
        error=100.0 * float(err.mean()),
        nll=float(nll_values.mean()),
        brier=float(brier_values.mean()),
    )
