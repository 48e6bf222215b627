"""Evaluation metrics."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two symbol sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _group(references):
    if isinstance(references, str):
        references = [references]
    if not references:
        raise DataError("empty reference")
    return references


def cer(hypothesis, references) -> float:
    """Edit distance over reference length, for the closest reference.

    ``references`` is either a single string or a list of alternative
    references, each a string or a list of tokens.
    """
    references = _group(references)
    best = np.inf
    for ref in references:
        if len(ref) == 0:
            raise DataError("empty reference")
        best = min(best, levenshtein(hypothesis, ref) / len(ref))
    return float(best)


def corpus_cer(hypotheses, reference_groups) -> float:
    """Mean per-item CER."""
    if not hypotheses:
        raise DataError("no items to score")
    return float(np.mean([cer(h, refs) for h, refs in zip(hypotheses, reference_groups)]))


def wer(hypotheses, reference_groups) -> float:
    """Fraction of items that match none of their references exactly."""
    if not hypotheses:
        raise DataError("no items to score")
    wrong = 0
    for hyp, refs in zip(hypotheses, reference_groups):
        refs = _group(refs)
        wrong += not any(list(hyp) == list(r) for r in refs)
    return wrong / len(hypotheses)


def prf(correct: int, predicted: int, reference: int) -> tuple[float, float, float]:
    precision = correct / predicted if predicted else 0.0
    recall = correct / reference if reference else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def alignment_f1(predicted, reference) -> float:
    """F1 between two link sets, or micro-averaged over lists of link sets."""
    if isinstance(predicted, (set, frozenset)):
        predicted, reference = [predicted], [reference]
    correct = sum(len(set(p) & set(r)) for p, r in zip(predicted, reference))
    n_pred = sum(len(p) for p in predicted)
    n_ref = sum(len(r) for r in reference)
    return prf(correct, n_pred, n_ref)[2]


def binary_f1(predictions, labels) -> float:
    """F1 of the positive class; 0 when nothing is predicted positive."""
    predictions = np.asarray(predictions).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int((predictions & labels).sum())
    return prf(tp, int(predictions.sum()), int(labels.sum()))[2]
