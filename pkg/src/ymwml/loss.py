"""Class-weighted exponential segmentation loss and a cross-entropy baseline.

Per pixel with true class i the loss is

    L = lambda_i * beta1 * exp(-p_i) + beta2 * exp(sum_{j != i} p_j)

where p is the per-pixel softmax over class logits and lambda_k = exp(-cr_k)
down-weights classes by their dataset rate cr_k, so rare classes keep weight
close to 1.  The off-class mass is summed explicitly over j != i rather than
taken as 1 - p_i, so the formula stays honest for unnormalized inputs.

The batch loss is registered as a single tape operator with an analytic
gradient; a composed variant built from primitive ops exists purely as a
cross-check of that gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, apply_op, ew, exp, reduce, register_op, softmax


@dataclass
class WmeParams:
    beta1: float = 2.0
    beta2: float = 1.0

    def validate(self) -> "WmeParams":
        # Training requires strictly positive scales; the raw loss functions
        # accept zero so degenerate cases stay inspectable.
        if self.beta1 <= 0.0 or self.beta2 <= 0.0:
            raise ConfigError(f"beta1/beta2 must be > 0, got {self.beta1}, {self.beta2}")
        return self


@dataclass
class ClassWeights:
    """Per-class rates and their exponential-decay weights lambda = exp(-cr)."""

    cr: np.ndarray
    lam: np.ndarray

    @staticmethod
    def from_rates(cr) -> "ClassWeights":
        cr = np.asarray(cr, dtype=np.float64)
        if cr.ndim != 1 or cr.size < 2:
            raise ShapeError(f"class rates must be a vector of >= 2 entries, got shape {cr.shape}")
        if np.any(cr < 0.0):
            raise ConfigError("class rates must be non-negative")
        if abs(float(cr.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"class rates must sum to 1, got {float(cr.sum()):.12g}")
        return ClassWeights(cr=cr, lam=np.exp(-cr))

    @staticmethod
    def uniform(num_classes: int) -> "ClassWeights":
        """Ablation weights: every lambda pinned to 1 (rate weighting disabled)."""
        return ClassWeights(cr=np.zeros(num_classes), lam=np.ones(num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.lam.shape[0])


def lambda_of_rate(cr):
    """The weight law lambda(cr) = exp(-cr) applied elementwise."""
    return np.exp(-np.asarray(cr, dtype=np.float64))


def compute_class_rates(masks, num_classes: int) -> ClassWeights:
    """Pixel fraction per class over one or many integer masks."""
    if isinstance(masks, np.ndarray):
        masks = [masks]
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for m in masks:
        m = np.asarray(m)
        if not np.issubdtype(m.dtype, np.integer):
            raise DataError(f"masks must be integer arrays, got dtype {m.dtype}")
        if m.size == 0:
            continue
        if m.min() < 0 or m.max() >= num_classes:
            raise DataError(
                f"mask value {int(m.min()) if m.min() < 0 else int(m.max())} outside [0, {num_classes})"
            )
        counts += np.bincount(m.ravel(), minlength=num_classes)
        total += m.size
    if total == 0:
        raise DataError("cannot compute class rates from zero pixels")
    return ClassWeights.from_rates(counts / total)


def wme_pixel_loss(probs, true_class: int, weights: ClassWeights, params: WmeParams):
    """Loss for a single pixel; returns (loss, rare_term, spread_term)."""
    p = np.asarray(probs, dtype=np.float64)
    k = weights.num_classes
    if p.shape != (k,):
        raise ShapeError(f"probability vector has shape {p.shape}, expected ({k},)")
    if not (0 <= true_class < k):
        raise ShapeError(f"true class {true_class} outside [0, {k})")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ConfigError("probabilities must lie in [0, 1]")
    off = 0.0
    for j in range(k):
        if j != true_class:
            off += p[j]
    t1 = weights.lam[true_class] * params.beta1 * math.exp(-p[true_class])
    t2 = params.beta2 * math.exp(off)
    return t1 + t2, t1, t2


@register_op("wme_loss")
def _op_wme_loss(z, mask=None, lam=None, beta1=2.0, beta2=1.0, reduction="sum"):
    if z.ndim != 4:
        raise ShapeError(f"loss expects [N, K, H, W] logits, got {z.shape}")
    n, k, h, w = z.shape
    if lam.shape != (k,):
        raise ShapeError(f"{k} logit classes vs {lam.shape[0]} class weights")
    if mask.shape != (n, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
    if mask.min() < 0 or mask.max() >= k:
        raise ShapeError(f"mask class {int(mask.max())} outside [0, {k})")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, mask[:, None], 1.0, axis=1)
    pi = np.take_along_axis(p, mask[:, None], axis=1)[:, 0]
    off = (p * (1.0 - onehot)).sum(axis=1)
    lam_pix = lam[mask]
    t1 = lam_pix * beta1 * np.exp(-pi)
    t2 = beta2 * np.exp(off)
    total = (t1 + t2).sum()
    npix = n * h * w
    out = total if reduction == "sum" else total / npix

    def bw(g):
        # dL/dp_i = -t1, dL/dp_j = t2; chain through the softmax.
        gp = t2[:, None] * (1.0 - onehot) - t1[:, None] * onehot
        dz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        coef = float(np.asarray(g).ravel()[0])
        if reduction != "sum":
            coef /= npix
        return (dz * coef,)

    return np.asarray(out), bw


def wme_batch_loss(
    logits: Tensor,
    masks: np.ndarray,
    weights: ClassWeights,
    params: WmeParams,
    reduction: str = "sum",
) -> Tensor:
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be 'sum' or 'mean', got '{reduction}'")
    return apply_op(
        "wme_loss",
        (logits,),
        mask=np.asarray(masks),
        lam=weights.lam,
        beta1=params.beta1,
        beta2=params.beta2,
        reduction=reduction,
    )


def wme_batch_loss_composed(
    logits: Tensor,
    masks: np.ndarray,
    weights: ClassWeights,
    params: WmeParams,
    reduction: str = "sum",
) -> Tensor:
    """Same value as wme_batch_loss but built from primitive tape ops."""
    n, k, h, w = logits.shape
    masks = np.asarray(masks)
    onehot = np.zeros((n, k, h, w))
    np.put_along_axis(onehot, masks[:, None], 1.0, axis=1)
    hot = Tensor(onehot)
    cold = Tensor(1.0 - onehot)
    lam_pix = Tensor(weights.lam[masks][:, None])  # [N, 1, H, W]

    p = softmax(logits, axis=1)
    pi = reduce(ew("mul", p, hot), axes=(1,), mode="sum", keepdims=True)
    off = reduce(ew("mul", p, cold), axes=(1,), mode="sum", keepdims=True)
    t1 = ew("mul", ew("mul", exp(ew("mul", pi, -1.0)), lam_pix), params.beta1)
    t2 = ew("mul", exp(off), params.beta2)
    total = reduce(t1 + t2, axes=None, mode="sum")
    if reduction == "mean":
        total = ew("div", total, float(n * h * w))
    return total


@register_op("cross_entropy")
def _op_cross_entropy(z, mask=None, reduction="sum"):
    if z.ndim != 4:
        raise ShapeError(f"loss expects [N, K, H, W] logits, got {z.shape}")
    n, k, h, w = z.shape
    if mask.shape != (n, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
    if mask.min() < 0 or mask.max() >= k:
        raise ShapeError(f"mask class {int(mask.max())} outside [0, {k})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    zt = np.take_along_axis(z, mask[:, None], axis=1)[:, 0]
    total = (lse - zt).sum()
    npix = n * h * w
    out = total if reduction == "sum" else total / npix

    def bw(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        np.put_along_axis(p, mask[:, None], np.take_along_axis(p, mask[:, None], axis=1) - 1.0, axis=1)
        coef = float(np.asarray(g).ravel()[0])
        if reduction != "sum":
            coef /= npix
        return (p * coef,)

    return np.asarray(out), bw


def cross_entropy_baseline(logits: Tensor, masks: np.ndarray, reduction: str = "sum") -> Tensor:
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be 'sum' or 'mean', got '{reduction}'")
    return apply_op("cross_entropy", (logits,), mask=np.asarray(masks), reduction=reduction)


# --- one-dimensional curve diagnostics -----------------------------------------


@dataclass
class CurvePoint:
    p: float
    loss: float
    dloss: float
    d2loss: float


def curve_loss_value(lam_i: float, params: WmeParams, p: float) -> float:
    """Pixel loss along the true-class axis with off-class mass at 1 - p."""
    return lam_i * params.beta1 * math.exp(-p) + params.beta2 * math.exp(1.0 - p)


def loss_curve(weights: ClassWeights, class_index: int, params: WmeParams, grid=None) -> list[CurvePoint]:
    if not (0 <= class_index < weights.num_classes):
        raise ShapeError(f"class index {class_index} outside [0, {weights.num_classes})")
    if grid is None:
        grid = [i / 100.0 for i in range(1, 100)]
    pts = []
    lam_i = float(weights.lam[class_index])
    for p in grid:
        p = float(p)
        if not (0.0 < p < 1.0):
            raise ConfigError(f"curve grid point {p} outside (0, 1)")
        t1 = lam_i * params.beta1 * math.exp(-p)
        t2 = params.beta2 * math.exp(1.0 - p)
        pts.append(CurvePoint(p=p, loss=t1 + t2, dloss=-t1 - t2, d2loss=t1 + t2))
    return pts


def write_loss_curve_csv(points: list[CurvePoint], path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("p,loss,dloss,d2loss\n")
        for pt in points:
            f.write(f"{pt.p:.12g},{pt.loss:.12g},{pt.dloss:.12g},{pt.d2loss:.12g}\n")


def write_loss_terms_csv(weights: ClassWeights, class_index: int, params: WmeParams, path, grid=None):
    """Companion table splitting the curve into its rare and spread terms."""
    if grid is None:
        grid = [i / 100.0 for i in range(1, 100)]
    lam_i = float(weights.lam[class_index])
    with open(path, "w", encoding="utf-8") as f:
        f.write("p,t1,t2\n")
        for p in grid:
            t1 = lam_i * params.beta1 * math.exp(-float(p))
            t2 = params.beta2 * math.exp(1.0 - float(p))
            f.write(f"{float(p):.12g},{t1:.12g},{t2:.12g}\n")
