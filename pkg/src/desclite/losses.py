"""Training losses with exact gradients with respect to the embedding batch.

Every function returns a LossValue whose `grad` is the derivative of the
scalar value with respect to the differentiated input:

  reconstruction_loss    -> grad w.r.t. the reconstructed batch
  distance_loss          -> grad w.r.t. the projected batch
  triplet_loss_hardest   -> grad w.r.t. vstack([anchors, positives]) (2N x d)
  softmax_cross_entropy  -> grad w.r.t. the logits
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_matrix, pairwise_distance_matrix

_TINY = 1e-12


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def reconstruction_loss(inputs, outputs) -> LossValue:
    """Mean L2 distance between input rows and reconstructed rows."""
    x = as_matrix(inputs, "inputs")
    y = as_matrix(outputs, "outputs")
    if x.shape != y.shape:
        raise ShapeError(f"reconstruction_loss: shapes differ, {x.shape} vs {y.shape}")
    n = len(x)
    if n == 0:
        raise ConfigError("reconstruction_loss: empty batch")
    diff = y - x
    norms = np.linalg.norm(diff, axis=1)
    value = float(norms.mean())
    safe = np.where(norms < _TINY, 1.0, norms)
    grad = diff / (n * safe[:, None])
    grad[norms < _TINY] = 0.0
    return LossValue(value, grad)


def distance_loss(x, x_hat) -> LossValue:
    """Discrepancy between pairwise distances before and after projection.

    Value is sqrt(sum over ordered pairs i != j of (d_ij - dhat_ij)^2)
    divided by N(N-1); the divisor sits outside the square root. Row counts
    must match; dimensions may differ.
    """
    x = as_matrix(x, "x")
    xh = as_matrix(x_hat, "x_hat")
    if len(x) != len(xh):
        raise ShapeError(f"distance_loss: row counts differ, {len(x)} vs {len(xh)}")
    n = len(x)
    if n < 2:
        raise ConfigError("distance_loss: need at least 2 rows")
    dx = pairwise_distance_matrix(x, x)
    dh = pairwise_distance_matrix(xh, xh)
    diff = dh - dx
    s = float((diff * diff).sum())  # diagonal contributes zero
    coeff = 1.0 / (n * (n - 1))
    value = coeff * np.sqrt(s)
    if s < _TINY * _TINY:
        return LossValue(float(value), np.zeros_like(xh))
    ratio = np.where(dh < _TINY, 0.0, diff / np.where(dh < _TINY, 1.0, dh))
    np.fill_diagonal(ratio, 0.0)
    row_sum = ratio.sum(axis=1)
    grad = (2.0 * coeff / np.sqrt(s)) * (row_sum[:, None] * xh - ratio @ xh)
    return LossValue(float(value), grad)


def triplet_loss_hardest(anchors_emb, positives_emb, margin: float) -> LossValue:
    """Triplet margin loss with hardest-within-batch negative mining.

    Row i of the two inputs is a projected (anchor, positive) embedding pair
    of one class. The negative for pair i is the closest non-matching
    embedding in either direction of the anchor-positive distance matrix:
    min(min_{j!=i} D[i][j], min_{j!=i} D[j][i]); distance ties resolve to the
    smallest index, and row-direction wins an exact row/column tie.

    The gradient stacks d/d(anchors) on top of d/d(positives) -> (2N, d).
    """
    a = as_matrix(anchors_emb, "anchors_emb")
    p = as_matrix(positives_emb, "positives_emb")
    if a.shape != p.shape:
        raise ShapeError(f"triplet_loss_hardest: shapes differ, {a.shape} vs {p.shape}")
    n = len(a)
    if n < 2:
        raise ConfigError("triplet_loss_hardest: need at least 2 pairs to mine negatives")
    dist = pairwise_distance_matrix(a, p)
    pos = np.diag(dist).copy()
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    row_idx = masked.argmin(axis=1)
    row_val = masked[np.arange(n), row_idx]
    col_idx = masked.argmin(axis=0)
    col_val = masked[col_idx, np.arange(n)]
    use_row = row_val <= col_val
    hardest = np.where(use_row, row_val, col_val)

    terms = margin + pos - hardest
    active = terms > 0.0
    value = float(np.maximum(terms, 0.0).mean())

    ga = np.zeros_like(a)
    gp = np.zeros_like(p)
    inv_n = 1.0 / n
    for i in np.flatnonzero(active):
        if pos[i] > _TINY:
            u = (a[i] - p[i]) / pos[i] * inv_n
            ga[i] += u
            gp[i] -= u
        if use_row[i]:
            j = row_idx[i]
            d = row_val[i]
            if d > _TINY:
                v = (a[i] - p[j]) / d * inv_n
                ga[i] -= v
                gp[j] += v
        else:
            j = col_idx[i]
            d = col_val[i]
            if d > _TINY:
                v = (a[j] - p[i]) / d * inv_n
                ga[j] -= v
                gp[i] += v
    return LossValue(value, np.vstack([ga, gp]))


def softmax_cross_entropy(logits, targets) -> LossValue:
    """Mean negative log softmax probability of the target class."""
    z = as_matrix(logits, "logits")
    t = np.asarray(targets, dtype=np.int64)
    n, classes = z.shape
    if t.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {t.shape}")
    if n == 0:
        raise ConfigError("softmax_cross_entropy: empty batch")
    if t.min() < 0 or t.max() >= classes:
        raise ConfigError(
            f"targets out of range [0, {classes}): [{t.min()}, {t.max()}]"
        )
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    value = float(-log_prob[np.arange(n), t].mean())
    grad = expz / denom
    grad[np.arange(n), t] -= 1.0
    return LossValue(value, grad / n)


def combine(main: LossValue, aux: LossValue, weight: float) -> LossValue:
    """Weighted sum of two losses sharing a differentiated input."""
    if main.grad.shape != aux.grad.shape:
        raise ShapeError(
            f"combine: gradient shapes differ, {main.grad.shape} vs {aux.grad.shape}"
        )
    return LossValue(main.value + weight * aux.value, main.grad + weight * aux.grad)
