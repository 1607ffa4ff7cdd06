"""Loss algebra for the adaptation loop.

The supervised part sums, over auto-annotated target positives passing a
confidence gate, an L1 box term plus a binary cross-entropy confidence
term, and adds ungated cross-entropy for source negatives. The
unsupervised part penalizes the squared distance between per-batch mean
activations of the adapting stream and the frozen reference stream,
taken either at the element-wise multiply layer (averaged over output
dimensions) or at the last feature vector. Both are combined as
supervised + alpha * unsupervised, evaluated per mini-batch.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .autograd import (
    ContractError,
    DimensionError,
    Tensor,
    binary_cross_entropy,
    ewmul,
    l1,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax_cross_entropy,
    sub,
)


class RegularizerSite(enum.Enum):
    NONE = "none"
    EWM = "ewm"
    FEATURE_VECTOR = "feature_vector"


@dataclass
class LossConfig:
    alpha: float = 0.8
    tau_gate: float = 0.8
    regularizer_site: RegularizerSite = RegularizerSite.EWM

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.tau_gate < 1.0:
            raise ValueError(f"tau_gate must be in (0, 1), got {self.tau_gate}")


@dataclass
class SampleBatch:
    """Training windows as dense arrays; boxes/confidences may be absent."""

    x: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in {0, 1}
    boxes: np.ndarray | None = None  # (n, 4) window-normalized, positives only
    confidences: np.ndarray | None = None  # (n,) auto-annotation confidence

    def __len__(self):
        return len(self.x)


def batch_from_windows(samples, input_dim):
    """Stack WindowSamples into a SampleBatch (empty list allowed)."""
    if not samples:
        return SampleBatch(
            x=np.zeros((0, input_dim)),
            labels=np.zeros(0, dtype=np.int64),
            boxes=np.zeros((0, 4)),
            confidences=np.zeros(0),
        )
    x = np.stack([s.pixels for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    boxes = np.stack(
        [s.box_target if s.box_target is not None else (0.0, 0.0, 1.0, 1.0) for s in samples]
    )
    conf = np.array(
        [s.confidence if getattr(s, "confidence", None) is not None else 1.0 for s in samples]
    )
    return SampleBatch(x=x, labels=labels, boxes=boxes, confidences=conf)


@dataclass
class BatchPair:
    """One optimization step's worth of streams.

    ``source_ref_x`` always flows through the frozen reference model under
    no_grad, so its activations can never receive gradients.
    """

    target_batch: SampleBatch | None = None
    source_neg_batch: SampleBatch | None = None
    source_ref_x: np.ndarray | None = None


def confidence_gate(c, tau):
    """Step function on auto-annotation confidence; ties pass."""
    return 1 if c >= tau else 0


def _positive_terms(out, batch, tau_gate):
    """Per-sample gated (R + C) sum over auto-annotated positives."""
    if batch is None or len(batch) == 0:
        return Tensor(0.0)
    if not np.all(batch.labels == 1):
        raise ContractError("target batch must contain only positive (label 1) samples")
    if batch.confidences is None:
        raise ContractError("target batch needs auto-annotation confidences")
    gates = np.array([confidence_gate(c, tau_gate) for c in batch.confidences], dtype=np.float64)
    conf = reshape(out.conf, (len(batch),))
    c_term = binary_cross_entropy(conf, np.ones(len(batch)), reduction="none")
    r_term = reduce_mean(l1(out.box, batch.boxes, reduction="none"), axis=1)
    return reduce_sum(ewmul(Tensor(gates), c_term + r_term))


def _negative_terms(out, batch):
    """Ungated confidence term for source negatives; box term is zero."""
    if batch is None or len(batch) == 0:
        return Tensor(0.0)
    if not np.all(batch.labels == 0):
        raise ContractError("negative batch must contain only label-0 samples")
    conf = reshape(out.conf, (len(batch),))
    return reduce_sum(binary_cross_entropy(conf, np.zeros(len(batch)), reduction="none"))


def supervised_loss(target_batch, source_neg_batch, model, cfg):
    """Gated detection loss over one target batch plus one negative batch."""
    total = Tensor(0.0)
    if target_batch is not None and len(target_batch):
        total = total + _positive_terms(model.forward(target_batch.x), target_batch, cfg.tau_gate)
    if source_neg_batch is not None and len(source_neg_batch):
        total = total + _negative_terms(model.forward(source_neg_batch.x), source_neg_batch)
    return total


def classification_supervised_loss(logits, classes, gates=None):
    """Summed cross-entropy, optionally gated per sample."""
    per_sample = softmax_cross_entropy(logits, classes, reduction="none")
    if gates is not None:
        per_sample = ewmul(Tensor(np.asarray(gates, dtype=np.float64)), per_sample)
    return reduce_sum(per_sample)


def _source_side(arr):
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
    return data


def mmd_ewm(m_target, m_source):
    """Squared distance between batch-mean multiply-layer activations.

    m_target: (bt, no, nd) through the adapting model (graph-connected);
    m_source: (bs, no, nd) through the frozen reference (constant).
    Returns (1/no) * sum_o ||mean_t[o] - mean_s[o]||^2; gradients reach
    only the target side.
    """
    src = _source_side(m_source)
    if m_target.data.ndim != 3 or src.ndim != 3:
        raise DimensionError(
            f"mmd_ewm expects (batch, out, dim) activations, got {m_target.data.shape} and {src.shape}"
        )
    if len(m_target.data) == 0 or len(src) == 0:
        raise ContractError("mmd_ewm: both batches must be non-empty")
    if m_target.data.shape[1:] != src.shape[1:]:
        raise DimensionError(
            f"mmd_ewm: activation dims differ, {m_target.data.shape[1:]} vs {src.shape[1:]}"
        )
    no = m_target.data.shape[1]
    diff = sub(reduce_mean(m_target, axis=0), Tensor(src.mean(axis=0)))
    return reduce_sum(ewmul(diff, diff)) * (1.0 / no)


def mmd_fv(f_target, f_source):
    """Squared distance between batch-mean feature vectors (single output dim)."""
    src = _source_side(f_source)
    if f_target.data.ndim != 2 or src.ndim != 2:
        raise DimensionError(
            f"mmd_fv expects (batch, dim) activations, got {f_target.data.shape} and {src.shape}"
        )
    if len(f_target.data) == 0 or len(src) == 0:
        raise ContractError("mmd_fv: both batches must be non-empty")
    if f_target.data.shape[1] != src.shape[1]:
        raise DimensionError(f"mmd_fv: feature dims differ, {f_target.data.shape[1]} vs {src.shape[1]}")
    diff = sub(reduce_mean(f_target, axis=0), Tensor(src.mean(axis=0)))
    return reduce_sum(ewmul(diff, diff))


def combined_loss(batch_pair, model, source_model, cfg, return_parts=False):
    """supervised + alpha * unsupervised for one step's batches.

    The regularizer compares the target-positive batch through ``model``
    against the reference batch through ``source_model`` (frozen, run
    under no_grad). When the target batch is empty the regularizer has no
    target-side distribution and is skipped.
    """
    tb = batch_pair.target_batch
    out_t = model.forward(tb.x) if tb is not None and len(tb) else None
    loss_s = Tensor(0.0)
    if out_t is not None:
        loss_s = loss_s + _positive_terms(out_t, tb, cfg.tau_gate)
    nb = batch_pair.source_neg_batch
    if nb is not None and len(nb):
        loss_s = loss_s + _negative_terms(model.forward(nb.x), nb)

    loss_u = None
    if cfg.regularizer_site is not RegularizerSite.NONE and out_t is not None:
        if batch_pair.source_ref_x is None or len(batch_pair.source_ref_x) == 0:
            raise ContractError("regularizer needs a source reference batch")
        with no_grad():
            ref = source_model.forward(batch_pair.source_ref_x)
        if cfg.regularizer_site is RegularizerSite.EWM:
            loss_u = mmd_ewm(out_t.ewm, ref.ewm.data)
        else:
            loss_u = mmd_fv(out_t.features, ref.features.data)

    total = loss_s if loss_u is None else loss_s + cfg.alpha * loss_u
    if return_parts:
        return total, loss_s.item(), (loss_u.item() if loss_u is not None else 0.0)
    return total


def center_diagnostic(m_true, m_false, m_source):
    """Per-output-dim distances from pseudo-label centers to the source center.

    Returns one row (dim_index, dist_true, dist_false) per output dim;
    a distance is None when its split is empty.
    """
    src = np.asarray(m_source, dtype=np.float64)
    if src.ndim != 3 or len(src) == 0:
        raise ContractError("center_diagnostic needs a non-empty (batch, out, dim) source batch")
    c_src = src.mean(axis=0)

    def center(arr):
        a = np.asarray(arr, dtype=np.float64)
        return a.mean(axis=0) if a.ndim == 3 and len(a) else None

    c_true, c_false = center(m_true), center(m_false)
    rows = []
    for o in range(c_src.shape[0]):
        d_true = float(np.linalg.norm(c_true[o] - c_src[o])) if c_true is not None else None
        d_false = float(np.linalg.norm(c_false[o] - c_src[o])) if c_false is not None else None
        rows.append((o, d_true, d_false))
    return rows


def write_center_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim_index", "dist_true", "dist_false"])
        for o, d_true, d_false in rows:
            w.writerow(
                [o, "" if d_true is None else f"{d_true:.6f}", "" if d_false is None else f"{d_false:.6f}"]
            )
