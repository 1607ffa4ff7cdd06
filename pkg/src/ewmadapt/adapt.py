"""Iterative self-training adaptation of a window detector across domains.

The loop: train a detector on the labeled source domain, freeze it, then
repeatedly (1) auto-annotate high-confidence detections on unlabeled
target images as pseudo-positives, (2) draw matching negatives from the
source domain, (3) run SGD on the combined gated-supervised +
distribution-regularizer loss, and (4) score the model on a held-out
labeled target split. Five method variants cover the ablation grid from
source-only to the full mixed + multiply-layer-regularizer recipe.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import no_grad, softmax_probs
from .evaluation import best_f1_point, iou, nms, pr_curve
from .losses import (
    BatchPair,
    LossConfig,
    RegularizerSite,
    SampleBatch,
    center_diagnostic,
    classification_supervised_loss,
    combined_loss,
    confidence_gate,
    mmd_ewm,
    supervised_loss,
)
from .network import ConfigError, ModelWeights
from .synthdata import extract_all_windows, window_origins


def derived_rng(*keys):
    """Deterministic generator from a tuple of integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


class MethodVariant(enum.Enum):
    """The five compared training recipes."""

    SOURCE_ONLY = "source_only"
    TARGET_ONLY = "target_only"
    TARGET_PLUS_EWM = "target_plus_ewm"
    MIXED_PLUS_FV = "mixed_plus_fv"
    MIXED_PLUS_EWM = "mixed_plus_ewm"

    @property
    def uses_negatives(self):
        return self in (MethodVariant.MIXED_PLUS_FV, MethodVariant.MIXED_PLUS_EWM)

    @property
    def regularizer_site(self):
        if self in (MethodVariant.TARGET_PLUS_EWM, MethodVariant.MIXED_PLUS_EWM):
            return RegularizerSite.EWM
        if self is MethodVariant.MIXED_PLUS_FV:
            return RegularizerSite.FEATURE_VECTOR
        return RegularizerSite.NONE


@dataclass
class AdaptConfig:
    n_iterations: int = 8
    tau_annotate: float = 0.8
    tau_gate: float = 0.8
    alpha: float = 0.8
    method: MethodVariant = MethodVariant.MIXED_PLUS_EWM
    steps_per_iteration: int = 40
    batch_size: int = 32
    learning_rate: float = 0.002
    seed: int = 0
    target_images_per_iter: int = 100
    source_images_per_iter: int = 1000
    window_size: int = 8
    stride: int = 4
    nms_iou: float = 0.3
    n_thresholds: int = 101

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigError(f"n_iterations must be >= 1, got {self.n_iterations}")
        for name in ("tau_annotate", "tau_gate"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        for name in (
            "steps_per_iteration",
            "batch_size",
            "target_images_per_iter",
            "source_images_per_iter",
            "window_size",
            "stride",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class IterationRecord:
    iteration: int
    n_pseudo: int
    pseudo_precision: float  # nan when no pseudo-labels exist
    precision: float
    recall: float
    f1: float
    loss_s: float
    loss_u: float
    flagged: bool = False  # no trainable signal this iteration


HISTORY_COLUMNS = [
    "iteration",
    "n_pseudo",
    "pseudo_precision",
    "precision",
    "recall",
    "f1",
    "loss_s",
    "loss_u",
]


def write_history_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.iteration,
                    r.n_pseudo,
                    "" if math.isnan(r.pseudo_precision) else f"{r.pseudo_precision:.6f}",
                    f"{r.precision:.6f}",
                    f"{r.recall:.6f}",
                    f"{r.f1:.6f}",
                    f"{r.loss_s:.6f}",
                    f"{r.loss_u:.6f}",
                ]
            )


# ---------------------------------------------------------------------------
# detection sweep


@dataclass
class WindowDetection:
    """One window's prediction lifted to image coordinates."""

    box: tuple  # (x, y, w, h) in image pixels
    confidence: float
    origin: tuple  # window origin (x0, y0)
    window_pixels: np.ndarray  # flattened input that produced it
    box_window: tuple  # (x, y, w, h) in window-normalized coords
    image_index: int


def detect_images(model, images, window_size=8, stride=4, nms_iou=0.3):
    """Sweep every window of every image, then NMS per image.

    Returns one detection list per image, ordered by the NMS keep order.
    """
    if not images:
        return []
    h, w = images[0].shape
    origins = window_origins(w, window_size, stride)
    windows = []
    for img in images:
        for x0, y0 in origins:
            windows.append(img[y0 : y0 + window_size, x0 : x0 + window_size].reshape(-1))
    x = np.stack(windows)
    with no_grad():
        out = model.forward(x)
    conf = out.conf.data[:, 0]
    box = out.box.data
    per_image = []
    k = 0
    for i in range(len(images)):
        dets = []
        for x0, y0 in origins:
            bx, by, bw, bh = box[k]
            dets.append(
                WindowDetection(
                    box=(x0 + bx * window_size, y0 + by * window_size, bw * window_size, bh * window_size),
                    confidence=float(conf[k]),
                    origin=(x0, y0),
                    window_pixels=x[k],
                    box_window=(float(bx), float(by), float(bw), float(bh)),
                    image_index=i,
                )
            )
            k += 1
        per_image.append(nms(dets, nms_iou))
    return per_image


@dataclass
class PseudoLabel:
    """Auto-annotated positive: the window that fired, its own prediction as target."""

    pixels: np.ndarray
    box_target: tuple  # window-normalized
    label: int
    confidence: float
    image_index: int
    image_box: tuple  # detection box in image coordinates


def auto_annotate(model, images, tau_annotate, window_size=8, stride=4, nms_iou=0.3):
    """Detections with confidence >= tau_annotate become positive samples."""
    pseudo = []
    for dets in detect_images(model, images, window_size, stride, nms_iou):
        for d in dets:
            if d.confidence >= tau_annotate:
                pseudo.append(
                    PseudoLabel(
                        pixels=d.window_pixels,
                        box_target=d.box_window,
                        label=1,
                        confidence=d.confidence,
                        image_index=d.image_index,
                        image_box=d.box,
                    )
                )
    return pseudo


def pseudo_label_correctness(pseudo, scenes):
    """True/False per pseudo-label: does its box match a hidden GT (IoU >= 0.5)?"""
    flags = []
    for p in pseudo:
        gts = [a.box for a in scenes[p.image_index].annotations if a.label == 1]
        flags.append(any(iou(p.image_box, g) >= 0.5 for g in gts))
    return flags


def pseudo_label_precision(pseudo, scenes):
    if not pseudo:
        return float("nan")
    flags = pseudo_label_correctness(pseudo, scenes)
    return float(sum(flags)) / len(flags)


def sample_negatives(source_dataset, count, rng, window_size=8, stride=4, pool=None):
    """Uniform sample of negative source windows, without replacement.

    ``pool`` short-circuits re-extraction when the caller already holds
    the negative windows. Oversampling falls back to replacement with a
    warning.
    """
    if pool is None:
        pool = [s for s in extract_all_windows(source_dataset, window_size, stride) if s.label == 0]
    if count == 0:
        return []
    if count > len(pool):
        warnings.warn(
            f"requested {count} negatives but only {len(pool)} available; sampling with replacement"
        )
        idx = rng.choice(len(pool), size=count, replace=True)
    else:
        idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in idx]


# ---------------------------------------------------------------------------
# source training


def train_source(model, source_dataset, epochs, cfg):
    """Supervised training on the labeled source domain; returns the frozen snapshot.

    Minibatches are balanced half positive / half negative windows. The
    per-epoch mean batch loss is returned alongside the weight snapshot.
    """
    windows = extract_all_windows(source_dataset, cfg.window_size, cfg.stride)
    pos = [s for s in windows if s.label == 1]
    neg = [s for s in windows if s.label == 0]
    if not pos or not neg:
        raise ConfigError("source dataset yields no positive or no negative windows")
    loss_cfg = LossConfig(alpha=cfg.alpha, tau_gate=cfg.tau_gate, regularizer_site=RegularizerSite.NONE)
    half = max(1, cfg.batch_size // 2)
    steps_per_epoch = max(1, math.ceil(len(pos) / half))
    epoch_losses = []
    for epoch in range(epochs):
        rng = derived_rng(cfg.seed, 6, epoch)
        order = rng.permutation(len(pos))
        losses = []
        for step in range(steps_per_epoch):
            take = order[step * half : (step + 1) * half]
            if len(take) == 0:
                take = order[:half]
            pos_batch = _positives_to_batch([pos[i] for i in take])
            neg_idx = rng.choice(len(neg), size=half, replace=len(neg) < half)
            neg_batch = _windows_to_neg_batch([neg[i] for i in neg_idx])
            loss = supervised_loss(pos_batch, neg_batch, model, loss_cfg)
            _sgd_step(model, loss, cfg.learning_rate)
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
    return ModelWeights.from_model(model), epoch_losses


def _positives_to_batch(samples):
    if not samples:
        return None
    return SampleBatch(
        x=np.stack([s.pixels for s in samples]),
        labels=np.ones(len(samples), dtype=np.int64),
        boxes=np.stack([np.asarray(s.box_target) for s in samples]),
        confidences=np.array([getattr(s, "confidence", None) or 1.0 for s in samples]),
    )


def _windows_to_neg_batch(samples):
    if not samples:
        return None
    return SampleBatch(
        x=np.stack([s.pixels for s in samples]),
        labels=np.zeros(len(samples), dtype=np.int64),
    )


def _sgd_step(model, loss, lr):
    model.zero_grad()
    loss.backward()
    for p in model.parameters():
        if p.grad is not None:
            p.data = p.data - lr * p.grad


# ---------------------------------------------------------------------------
# the adaptation loop


@dataclass
class AdaptDatasets:
    """Labeled source, unlabeled target pool, held-out labeled target eval."""

    source: object
    target_pool: object
    target_eval: object


@dataclass
class _LoopContext:
    """Window pools precomputed once per run."""

    target_pixels: list
    eval_pixels: list
    eval_gt: list
    neg_pool: list
    ref_x: np.ndarray
    src_pos_x: np.ndarray


def _build_context(bundle, cfg):
    src_windows = extract_all_windows(bundle.source, cfg.window_size, cfg.stride)
    neg_pool = [s for s in src_windows if s.label == 0]
    pos = [s for s in src_windows if s.label == 1]
    ref_x = np.stack([s.pixels for s in src_windows]) if src_windows else np.zeros((0, cfg.window_size**2))
    return _LoopContext(
        target_pixels=[s.pixels for s in bundle.target_pool.scenes],
        eval_pixels=[s.pixels for s in bundle.target_eval.scenes],
        eval_gt=[[a.box for a in s.annotations if a.label == 1] for s in bundle.target_eval.scenes],
        neg_pool=neg_pool,
        ref_x=ref_x,
        src_pos_x=np.stack([s.pixels for s in pos]) if pos else np.zeros((0, cfg.window_size**2)),
    )


def _evaluate(model, ctx, cfg, voc_strict=False):
    dets = detect_images(model, ctx.eval_pixels, cfg.window_size, cfg.stride, cfg.nms_iou)
    curve = pr_curve(dets, ctx.eval_gt, cfg.n_thresholds, voc_strict=voc_strict)
    return curve, best_f1_point(curve)


def _select_iteration_images(ctx, cfg, iteration):
    n = len(ctx.target_pixels)
    if cfg.target_images_per_iter >= n:
        return ctx.target_pixels, list(range(n))
    rng = derived_rng(cfg.seed, 10, iteration)
    idx = sorted(rng.choice(n, size=cfg.target_images_per_iter, replace=False))
    return [ctx.target_pixels[i] for i in idx], idx


def adapt_iteration(model, source_model, ctx, cfg, iteration, pool_scenes):
    """One pass of auto-annotation, negative sampling, and SGD updates."""
    images, image_idx = _select_iteration_images(ctx, cfg, iteration)
    pseudo = auto_annotate(
        model, images, cfg.tau_annotate, cfg.window_size, cfg.stride, cfg.nms_iou
    )
    # lift image indices back to pool indices for precision measurement
    for p in pseudo:
        p.image_index = image_idx[p.image_index]
    n_pseudo = len(pseudo)
    p_precision = pseudo_label_precision(pseudo, pool_scenes)

    negatives = sample_negatives(
        None, n_pseudo, derived_rng(cfg.seed, 11, iteration), pool=ctx.neg_pool
    ) if cfg.method.uses_negatives else []

    loss_cfg = LossConfig(
        alpha=cfg.alpha, tau_gate=cfg.tau_gate, regularizer_site=cfg.method.regularizer_site
    )
    flagged = n_pseudo == 0
    loss_s_sum, loss_u_sum, steps_run = 0.0, 0.0, 0
    if not flagged:
        for step in range(cfg.steps_per_iteration):
            t_idx = derived_rng(cfg.seed, 12, iteration, step).choice(
                n_pseudo, size=min(cfg.batch_size, n_pseudo), replace=False
            )
            pair = BatchPair(target_batch=_positives_to_batch([pseudo[i] for i in t_idx]))
            if negatives:
                n_idx = derived_rng(cfg.seed, 13, iteration, step).choice(
                    len(negatives), size=min(cfg.batch_size, len(negatives)), replace=False
                )
                pair.source_neg_batch = _windows_to_neg_batch([negatives[i] for i in n_idx])
            r_idx = derived_rng(cfg.seed, 14, iteration, step).choice(
                len(ctx.ref_x), size=min(cfg.batch_size, len(ctx.ref_x)), replace=False
            )
            pair.source_ref_x = ctx.ref_x[r_idx]
            total, l_s, l_u = combined_loss(pair, model, source_model, loss_cfg, return_parts=True)
            _sgd_step(model, total, cfg.learning_rate)
            loss_s_sum += l_s
            loss_u_sum += l_u
            steps_run += 1

    _, best = _evaluate(model, ctx, cfg)
    record = IterationRecord(
        iteration=iteration,
        n_pseudo=n_pseudo,
        pseudo_precision=p_precision,
        precision=best.precision,
        recall=best.recall,
        f1=best.f1,
        loss_s=loss_s_sum / steps_run if steps_run else 0.0,
        loss_u=loss_u_sum / steps_run if steps_run else 0.0,
        flagged=flagged,
    )
    return record, pseudo


@dataclass
class AdaptResult:
    records: list
    final_weights: ModelWeights
    final_curve: list
    last_pseudo: list = field(default_factory=list)
    center_rows: list | None = None


def run_adaptation(cfg, bundle, source_weights, out_dir=None):
    """Run the full iterative loop for cfg.method; optionally persist artifacts.

    With ``out_dir`` set, writes ``history.csv`` and ``final_model.weights``
    there. The evaluation best-F1 point per iteration lands in the history.
    """
    ctx = _build_context(bundle, cfg)
    source_model = source_weights.build_model(requires_grad=False)
    records = []

    if cfg.method is MethodVariant.SOURCE_ONLY:
        model = source_weights.build_model()
        curve, best = _evaluate(model, ctx, cfg)
        for i in range(cfg.n_iterations):
            records.append(
                IterationRecord(
                    iteration=i,
                    n_pseudo=0,
                    pseudo_precision=float("nan"),
                    precision=best.precision,
                    recall=best.recall,
                    f1=best.f1,
                    loss_s=0.0,
                    loss_u=0.0,
                )
            )
        result = AdaptResult(records, ModelWeights.from_model(model), curve)
    else:
        model = source_weights.build_model()
        pseudo = []
        for i in range(cfg.n_iterations):
            record, pseudo = adapt_iteration(model, source_model, ctx, cfg, i, bundle.target_pool.scenes)
            records.append(record)
        curve, _ = _evaluate(model, ctx, cfg)
        result = AdaptResult(records, ModelWeights.from_model(model), curve, last_pseudo=pseudo)
        result.center_rows = _diagnostic_rows(model, source_model, ctx, pseudo, bundle.target_pool.scenes)

    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        write_history_csv(records, os.path.join(out_dir, "history.csv"))
        from .network import save_weights

        save_weights(result.final_weights, os.path.join(out_dir, "final_model.weights"))
    return result


def _diagnostic_rows(model, source_model, ctx, pseudo, pool_scenes):
    """Multiply-layer center distances for true vs false pseudo-labels.

    The source reference is the positive-window activations through the
    frozen source model: pseudo-labels claim to be positives, so they are
    compared against the source positive-class representation.
    """
    if not pseudo or len(ctx.src_pos_x) == 0:
        return None
    flags = pseudo_label_correctness(pseudo, pool_scenes)
    x = np.stack([p.pixels for p in pseudo])
    with no_grad():
        m_all = model.forward(x).ewm.data
        m_src = source_model.forward(ctx.src_pos_x).ewm.data
    true_mask = np.array(flags, dtype=bool)
    m_true = m_all[true_mask]
    m_false = m_all[~true_mask]
    return center_diagnostic(m_true, m_false, m_src)


# ---------------------------------------------------------------------------
# classification analog


@dataclass
class ClassificationDatasets:
    source: object  # LabeledSet
    target_pool_x: np.ndarray  # unlabeled
    target_eval: object  # LabeledSet
    target_labeled: object = None  # LabeledSet with k examples per class (supervised setting)
    target_pool_y: np.ndarray = None  # hidden labels, only for pseudo-label diagnostics


@dataclass
class ClassificationRecord:
    iteration: int
    n_pseudo: int
    pseudo_accuracy: float
    accuracy: float
    loss_s: float
    loss_u: float


def train_source_classifier(model, labeled, epochs, cfg):
    """Summed cross-entropy SGD over the labeled source set."""
    n = len(labeled.x)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    epoch_losses = []
    for epoch in range(epochs):
        rng = derived_rng(cfg.seed, 20, epoch)
        order = rng.permutation(n)
        losses = []
        for step in range(steps_per_epoch):
            take = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(take) == 0:
                continue
            loss = classification_supervised_loss(
                model.forward(labeled.x[take]).logits, labeled.y[take]
            )
            _sgd_step(model, loss, cfg.learning_rate)
            losses.append(loss.item() / len(take))
        epoch_losses.append(float(np.mean(losses)))
    return ModelWeights.from_model(model), epoch_losses


def run_classification_adaptation(cfg, bundle, source_weights, supervised=False):
    """Self-training with argmax pseudo-labels plus the multiply-layer regularizer.

    In the supervised setting the k labeled target examples join every
    step's training batch; otherwise adaptation sees no target labels.
    """
    from .evaluation import classification_accuracy

    model = source_weights.build_model()
    source_model = source_weights.build_model(requires_grad=False)
    loss_cfg = LossConfig(alpha=cfg.alpha, tau_gate=cfg.tau_gate, regularizer_site=RegularizerSite.EWM)
    records = []
    pool_x = bundle.target_pool_x
    for i in range(cfg.n_iterations):
        with no_grad():
            probs = softmax_probs(model.forward(pool_x).logits.data)
        conf = probs.max(axis=1)
        cls = probs.argmax(axis=1)
        keep = np.flatnonzero(conf >= cfg.tau_annotate)
        n_pseudo = len(keep)
        loss_s_sum, loss_u_sum, steps_run = 0.0, 0.0, 0
        trainable = n_pseudo > 0 or (supervised and bundle.target_labeled is not None)
        if trainable:
            for step in range(cfg.steps_per_iteration):
                loss = None
                m_target = None
                if n_pseudo:
                    t_idx = keep[
                        derived_rng(cfg.seed, 21, i, step).choice(
                            n_pseudo, size=min(cfg.batch_size, n_pseudo), replace=False
                        )
                    ]
                    gates = np.array(
                        [confidence_gate(c, cfg.tau_gate) for c in conf[t_idx]], dtype=np.float64
                    )
                    out_t = model.forward(pool_x[t_idx])
                    loss = classification_supervised_loss(out_t.logits, cls[t_idx], gates)
                    m_target = out_t.ewm
                if supervised and bundle.target_labeled is not None:
                    lab = bundle.target_labeled
                    sup = classification_supervised_loss(model.forward(lab.x).logits, lab.y)
                    loss = sup if loss is None else loss + sup
                l_u = 0.0
                if m_target is not None:
                    r_idx = derived_rng(cfg.seed, 22, i, step).choice(
                        len(bundle.source.x), size=min(cfg.batch_size, len(bundle.source.x)), replace=False
                    )
                    with no_grad():
                        ref = source_model.forward(bundle.source.x[r_idx])
                    reg = mmd_ewm(m_target, ref.ewm.data)
                    l_u = reg.item()
                    loss = loss + loss_cfg.alpha * reg
                loss_s_sum += loss.item() - loss_cfg.alpha * l_u
                loss_u_sum += l_u
                steps_run += 1
                _sgd_step(model, loss, cfg.learning_rate)
        pseudo_acc = float("nan")
        if n_pseudo and bundle.target_pool_y is not None:
            pseudo_acc = float(np.mean(cls[keep] == bundle.target_pool_y[keep]))
        records.append(
            ClassificationRecord(
                iteration=i,
                n_pseudo=n_pseudo,
                pseudo_accuracy=pseudo_acc,
                accuracy=classification_accuracy(model, bundle.target_eval.x, bundle.target_eval.y),
                loss_s=loss_s_sum / steps_run if steps_run else 0.0,
                loss_u=loss_u_sum / steps_run if steps_run else 0.0,
            )
        )
    return records, ModelWeights.from_model(model)
