"""String-pair matching: score by alpha[n, m], classify by a tuned threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dp
from .errors import DataError
from .losses import LossWeights, bce_from_log_alpha, interpretability_edge_grad, interpretability_loss
from .metrics import binary_f1
from .model import EditModel, PairBatch


@dataclass
class LossResult:
    total: float
    components: dict
    grads: dict
    size: int


def log_scores(model: EditModel, sources, targets, batch_size: int = 256) -> np.ndarray:
    """``log alpha[n, m]`` for every pair."""
    out = []
    for start in range(0, len(sources), batch_size):
        batch = model.make_batch(sources[start:start + batch_size], targets[start:start + batch_size])
        edges = model.grid(batch).edges()
        out.append(dp.log_likelihood(dp.forward(edges), edges))
    return np.concatenate(out) if out else np.zeros(0)


def score_pair(model: EditModel, source, target) -> float:
    """Probability ``alpha[n, m]`` that ``source`` and ``target`` match."""
    return float(np.exp(log_scores(model, [source], [target])[0]))


def nonmatch_nll(grid, labels):
    """Per-pair mean over cells of ``-log P(non-match)`` for negative pairs.

    Returns ``(loss, dloss/dlog_probs)``; the origin cell is excluded because no
    operation enters it.
    """
    mask = grid.cell_mask().copy()
    mask[:, 0, 0] = False
    count = np.maximum(mask.sum(axis=(1, 2)), 1)
    negative = (np.asarray(labels) == 0).astype(np.float64)
    scale = negative / count
    k = grid.offsets["nonmatch"]
    logp = grid.log_probs[..., k]
    loss = -(np.where(mask, logp, 0.0).sum(axis=(1, 2))) * scale
    dlogp = np.zeros_like(grid.log_probs)
    dlogp[..., k] = -(mask * scale[:, None, None])
    return loss, dlogp


def matching_loss(model: EditModel, batch: PairBatch, weights: LossWeights,
                  normalize_interp: bool = False, want_grads: bool = True, expected=None) -> LossResult:
    """Summed composite loss over the batch and its parameter gradients.

    EM loss on positive pairs, binary cross-entropy of alpha[n, m] on all
    pairs, non-match NLL on negative pairs and the diagonal penalty.
    """
    if len(batch) == 0:
        raise DataError("empty batch")
    if batch.labels is None:
        raise DataError("matching needs labelled pairs")
    labels = batch.labels
    fwd = model.forward(batch)
    grid = fwd.grid
    edges = grid.edges()
    alpha = dp.forward(edges)
    log_alpha = dp.log_likelihood(alpha, edges)
    beta = dp.backward(edges)

    em, expected = dp.em_loss(edges, alpha, beta, expected=expected)
    em = em * labels
    bce, dbce = bce_from_log_alpha(log_alpha, labels)
    nm, dnm = nonmatch_nll(grid, labels)
    interp = interpretability_loss(alpha, edges.src_len, edges.tgt_len, normalize=normalize_interp)
    components = {"em": float(em.sum()), "bce": float(bce.sum()), "nonmatch": float(nm.sum()),
                  "interp": float(interp.sum())}
    total = (weights.w_em * components["em"] + weights.w_bce * components["bce"]
             + weights.w_nonmatch * components["nonmatch"] + weights.w_interp * components["interp"])

    grads = None
    if want_grads:
        edge_grad = -weights.w_em * expected * labels[:, None, None, None]
        if weights.w_bce:
            seed = np.zeros_like(alpha)
            seed[np.arange(len(batch)), edges.src_len, edges.tgt_len] = weights.w_bce * dbce
            edge_grad = edge_grad + dp.alpha_vjp(edges, alpha, seed)
        if weights.w_interp:
            edge_grad = edge_grad + weights.w_interp * interpretability_edge_grad(edges, alpha, normalize_interp)
        dlogp = grid.scatter(edge_grad) + weights.w_nonmatch * dnm
        grads = model.backward(fwd, dlogp)
    return LossResult(total, components, grads, len(batch))


def tune_threshold(scores, labels) -> float:
    """Score threshold maximising F1 of ``score >= threshold``.

    Candidates are the observed scores; ties go to the larger threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise DataError("threshold tuning needs both positive and negative examples")
    best, best_f1 = None, -1.0
    for threshold in np.unique(scores)[::-1]:
        f1 = binary_f1(scores >= threshold, labels)
        if f1 > best_f1:
            best, best_f1 = float(threshold), f1
    return best


def classify(log_score, log_threshold) -> np.ndarray:
    return np.asarray(log_score) >= log_threshold
