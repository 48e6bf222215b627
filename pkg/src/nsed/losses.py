"""Loss terms shared by the two tasks.

Every function returns per-pair values; callers sum them over a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import dp
from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    w_em: float = 1.0
    w_nll: float = 1.0
    w_bce: float = 1.0
    w_nonmatch: float = 1.0
    w_interp: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{f.name} must be a non-negative number, got {value}")


def bce_from_log_alpha(log_alpha, labels):
    """Binary cross-entropy of ``alpha = exp(log_alpha)`` against 0/1 labels.

    Returns ``(loss, dloss/dlog_alpha)`` per pair.
    """
    log_alpha = np.minimum(np.asarray(log_alpha, dtype=np.float64), 0.0)
    labels = np.asarray(labels, dtype=np.float64)
    # log(1 - alpha), kept finite when alpha rounds to one
    log_rest = np.log(-np.expm1(np.minimum(log_alpha, -1e-12)))
    loss = -labels * log_alpha - (1 - labels) * log_rest
    grad = -labels + (1 - labels) * np.exp(log_alpha - log_rest)
    return loss, grad


def diagonal_weights(shape, src_len, tgt_len, normalize=False):
    """``|i - j|`` (or ``|i/n - j/m|``) inside each pair's grid, zero outside."""
    batch, rows, cols = shape
    i = np.arange(rows)[None, :, None].astype(np.float64)
    j = np.arange(cols)[None, None, :].astype(np.float64)
    n = np.asarray(src_len, dtype=np.float64)[:, None, None]
    m = np.asarray(tgt_len, dtype=np.float64)[:, None, None]
    if normalize:
        w = np.abs(i / np.maximum(n, 1) - j / np.maximum(m, 1))
    else:
        w = np.abs(i - j) + np.zeros((batch, 1, 1))
    return np.where((i <= n) & (j <= m), w, 0.0)


def interpretability_loss(alpha, src_len, tgt_len, compensate=False, normalize=False):
    """Diagonal penalty ``sum_ij |i - j| * alpha[i, j]`` per pair.

    With ``compensate`` the term ``-log alpha[n, m]`` is added, which keeps
    the model from shrinking all probabilities to lower the penalty.
    """
    w = diagonal_weights(alpha.shape, src_len, tgt_len, normalize)
    with np.errstate(under="ignore"):
        penalty = (w * np.exp(alpha)).sum(axis=(1, 2))
    if compensate:
        penalty = penalty - alpha[np.arange(alpha.shape[0]), src_len, tgt_len]
    return penalty


def interpretability_edge_grad(edges: dp.OpEdges, alpha, normalize=False):
    """Gradient of the summed diagonal penalty w.r.t. the edge log-probabilities."""
    w = diagonal_weights(alpha.shape, edges.src_len, edges.tgt_len, normalize)
    with np.errstate(divide="ignore"):
        return np.exp(dp.edge_flow(edges, alpha, dp.adjoint(edges, np.log(w))))
