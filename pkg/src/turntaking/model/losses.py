"""Focal loss (soft targets) and binary cross-entropy, with gradients w.r.t. logits."""
from __future__ import annotations

import numpy as np


def _log_sigmoid(z):
    # log(sigmoid(z)) without overflow
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25):
    """Two-sided focal loss extended to soft targets ``y`` in [0, 1].

    ``-[alpha*y*(1-p)**gamma*log(p) + (1-alpha)*(1-y)*p**gamma*log(1-p)]``,
    elementwise.  With ``gamma=0, alpha=0.5`` this is half the binary
    cross-entropy.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)) or not np.all(np.isfinite(p)):
        raise ValueError("focal_loss needs probabilities strictly inside (0, 1)")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("targets must lie in [0, 1]")
    out = -(alpha * y * (1 - p) ** gamma * np.log(p)
            + (1 - alpha) * (1 - y) * p ** gamma * np.log1p(-p))
    return out if out.ndim else float(out)


def focal_loss_logits(z, y, gamma: float = 2.0, alpha: float = 0.25):
    """Elementwise focal loss on logits and its derivative d loss / d z."""
    z = np.asarray(z, dtype=np.float64)
    p = sigmoid(z)
    q = 1.0 - p
    logp = _log_sigmoid(z)
    logq = _log_sigmoid(-z)
    pos = alpha * y
    neg = (1 - alpha) * (1 - y)
    qg = q ** gamma
    pg = p ** gamma
    loss = -(pos * qg * logp + neg * pg * logq)
    # d/dz of the two terms, using dp/dz = p*q
    d_pos = pos * (qg * q - gamma * qg * p * logp)
    d_neg = neg * (gamma * pg * q * logq - pg * p)
    return loss, -(d_pos + d_neg)


def bce_logits(z, y):
    z = np.asarray(z, dtype=np.float64)
    loss = np.logaddexp(0.0, z) - y * z
    return loss, sigmoid(z) - y


def bce(p, y):
    p = np.asarray(p, dtype=np.float64)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))
