"""Loss components for descriptor learning.

Three trainable terms: a hinge triplet loss on squared Euclidean
distances, a quantization penalty pulling activations toward {0, 1},
and a bit-balance penalty pushing each bit's mean activation toward 0.5.
A rotation-invariance loss (positive pairs only) serves as the ablation
baseline. Every operation returns both the scalar and its gradient with
respect to the feature rows.

The bit-balance term is optimized through a relaxed per-bit mean computed
from clamp(F, 0, 1); the hard-bit value, whose gradient is zero almost
everywhere, is reported alongside for monitoring.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

BIN_THRESHOLD = 0.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("triplet margin must be > 0")


@dataclass(frozen=True)
class LossReport:
    l_total: float
    l_triplet: float
    l_quant: float
    l_entropy: float
    l_entropy_binary: float


def euclidean_sq(x, y):
    """Squared Euclidean distance sum_i (x_i - y_i)^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(d @ d)


def triplet_loss(fa, fp, fn, config):
    """Hinge loss max{0, m + ||fa-fp||^2 - ||fa-fn||^2} and its gradients."""
    fa = np.asarray(fa, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    fn = np.asarray(fn, dtype=np.float64)
    if not (fa.shape == fp.shape == fn.shape):
        raise ShapeError("triplet feature vectors must share one shape")
    value = config.margin + euclidean_sq(fa, fp) - euclidean_sq(fa, fn)
    if value > 0:
        return value, (2 * (fn - fp), -2 * (fa - fp), 2 * (fa - fn))
    zero = np.zeros_like(fa)
    return 0.0, (zero, zero.copy(), zero.copy())


def quantization_loss(features):
    """Mean squared gap between features and their thresholded bits.

    The bits are treated as constants for the gradient (the threshold step
    is not differentiable).
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite features in quantization loss")
    n = f.shape[0]
    b = (f > BIN_THRESHOLD).astype(np.float64)
    gap = f - b
    loss = float(np.sum(gap * gap)) / n
    return loss, (2.0 / n) * gap


def entropy_loss(features):
    """Per-bit balance penalty sum_m (mu_m - 0.5)^2.

    mu is the relaxed column mean of clamp(F, 0, 1); gradients flow only
    where 0 < F < 1. Also returns the hard-bit variant of the loss.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = f.shape[0]
    if n == 0:
        raise UsageError("entropy loss needs a non-empty batch")
    clamped = np.clip(f, 0.0, 1.0)
    mu = clamped.mean(axis=0)
    dev = mu - 0.5
    loss = float(dev @ dev)
    inside = (f > 0.0) & (f < 1.0)
    grads = inside * ((2.0 / n) * dev)
    mu_hard = (f > BIN_THRESHOLD).mean(axis=0)
    loss_binary = float(np.sum((mu_hard - 0.5) ** 2))
    return loss, grads, loss_binary


def rotation_invariance_loss(fa, fp):
    """Squared distance between an image's features and its rotation's."""
    fa = np.asarray(fa, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if fa.shape != fp.shape:
        raise ShapeError("feature vectors must share one shape")
    d = fa - fp
    return float(d @ d), (2 * d, -2 * d)


def combined_loss(fa, fp, fn, weights, config):
    """Weighted total over a batch of triplets.

    The triplet term is averaged over triplets; quantization and balance
    terms are computed over all 3T feature rows. Returns a LossReport and
    per-row gradients (ga, gp, gn).
    """
    fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
    fp = np.atleast_2d(np.asarray(fp, dtype=np.float64))
    fn = np.atleast_2d(np.asarray(fn, dtype=np.float64))
    if not (fa.shape == fp.shape == fn.shape):
        raise ShapeError("anchor/positive/negative batches must share one shape")
    t = fa.shape[0]

    d_ap = np.sum((fa - fp) ** 2, axis=1)
    d_an = np.sum((fa - fn) ** 2, axis=1)
    hinge = config.margin + d_ap - d_an
    active = hinge > 0
    l_triplet = float(np.sum(np.maximum(hinge, 0.0))) / t

    ga = np.zeros_like(fa)
    gp = np.zeros_like(fp)
    gn = np.zeros_like(fn)
    scale = active[:, None] * (2.0 / t)
    ga += scale * (fn - fp)
    gp += scale * (fp - fa)
    gn += scale * (fa - fn)

    stacked = np.concatenate([fa, fp, fn], axis=0)
    l_quant, g_quant = quantization_loss(stacked)
    l_entropy, g_entropy, l_entropy_binary = entropy_loss(stacked)

    g_rows = weights.beta * g_quant + weights.gamma * g_entropy
    ga = weights.alpha * ga + g_rows[:t]
    gp = weights.alpha * gp + g_rows[t : 2 * t]
    gn = weights.alpha * gn + g_rows[2 * t :]

    l_total = weights.alpha * l_triplet + weights.beta * l_quant + weights.gamma * l_entropy
    report = LossReport(l_total, l_triplet, l_quant, l_entropy, l_entropy_binary)
    return report, (ga, gp, gn)
