"""Memoryless statistical edit distance trained with expectation-maximisation.

One multinomial covers every delete, insert and substitute event. It is kept
as a ``(S+1, T+1)`` matrix: ``[s, t]`` substitutes s by t, ``[s, T]``
deletes s, ``[S, t]`` inserts t and ``[S, T]`` is unused (always zero).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dp
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class OperationTable:
    matrix: np.ndarray

    @property
    def n_src(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def n_tgt(self) -> int:
        return self.matrix.shape[1] - 1

    @property
    def delete(self):
        return self.matrix[:-1, -1]

    @property
    def insert(self):
        return self.matrix[-1, :-1]

    @property
    def subst(self):
        return self.matrix[:-1, :-1]

    @classmethod
    def uniform(cls, n_src, n_tgt, src_symbols=None, tgt_symbols=None) -> "OperationTable":
        """Uniform over the events of the given symbols (all symbols by default)."""
        src = np.zeros(n_src, dtype=bool)
        tgt = np.zeros(n_tgt, dtype=bool)
        src[list(range(n_src)) if src_symbols is None else list(src_symbols)] = True
        tgt[list(range(n_tgt)) if tgt_symbols is None else list(tgt_symbols)] = True
        matrix = np.zeros((n_src + 1, n_tgt + 1))
        matrix[:-1, :-1] = src[:, None] & tgt[None, :]
        matrix[:-1, -1] = src
        matrix[-1, :-1] = tgt
        return cls(matrix / matrix.sum())

    def edges(self, sources, targets) -> dp.OpEdges:
        """Constant-per-event operation grid for a batch of pairs."""
        n = np.array([len(s) for s in sources])
        m = np.array([len(t) for t in targets])
        rows, cols = n.max(initial=0) + 1, m.max(initial=0) + 1
        src = np.zeros((len(sources), rows), dtype=np.int64)
        tgt = np.zeros((len(sources), cols), dtype=np.int64)
        for b, (s, t) in enumerate(zip(sources, targets)):
            src[b, 1:len(s) + 1] = s
            tgt[b, 1:len(t) + 1] = t
        with np.errstate(divide="ignore"):
            log = np.log(self.matrix)
        delete = np.broadcast_to(log[src, -1][:, :, None], (len(sources), rows, cols))
        insert = np.broadcast_to(log[-1, tgt][:, None, :], (len(sources), rows, cols))
        subst = log[src[:, :, None], tgt[:, None, :]]
        return dp.OpEdges.build(delete, insert, subst, n, m), src, tgt

    def log_scores(self, sources, targets, batch_size: int = 512) -> np.ndarray:
        out = []
        for start in range(0, len(sources), batch_size):
            edges, _, _ = self.edges(sources[start:start + batch_size], targets[start:start + batch_size])
            out.append(dp.log_likelihood(dp.forward(edges), edges))
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class EStepResult:
    counts: np.ndarray
    log_likelihood: float
    skipped: int


def e_step(table: OperationTable, sources, targets, batch_size: int = 512) -> EStepResult:
    """Expected event counts and corpus log-likelihood."""
    if len(sources) == 0:
        raise DataError("empty corpus")
    counts = np.zeros_like(table.matrix)
    total, skipped = 0.0, 0
    for start in range(0, len(sources), batch_size):
        edges, src, tgt = table.edges(sources[start:start + batch_size], targets[start:start + batch_size])
        alpha, beta = dp.forward(edges), dp.backward(edges)
        log_z = dp.log_likelihood(alpha, edges)
        ok = np.isfinite(log_z)
        skipped += int((~ok).sum())
        total += float(log_z[ok].sum())
        post = np.exp(dp.posteriors(edges, alpha, beta)) * ok[:, None, None, None]
        batch, rows, cols = edges.shape
        s_idx = np.broadcast_to(src[:, :, None], (batch, rows, cols))
        t_idx = np.broadcast_to(tgt[:, None, :], (batch, rows, cols))
        np.add.at(counts, (s_idx, -1), post[..., dp.DEL])
        np.add.at(counts, (-1, t_idx), post[..., dp.INS])
        np.add.at(counts, (s_idx, t_idx), post[..., dp.SUB])
    counts[-1, -1] = 0.0
    if skipped:
        logger.warning("e-step skipped %d pairs with zero probability", skipped)
    return EStepResult(counts, total, skipped)


def m_step(counts, smoothing: float = 0.0) -> OperationTable:
    """Normalise counts (plus ``smoothing`` per event) into a table."""
    counts = np.array(counts, dtype=np.float64)
    if smoothing:
        counts = counts + smoothing
        counts[-1, -1] = 0.0
    total = counts.sum()
    if not total > 0:
        raise DataError("all expected counts are zero")
    return OperationTable(counts / total)


@dataclass
class EMResult:
    table: OperationTable
    trace: list = field(default_factory=list)


def train_em(sources, targets, iterations: int = 20, tol: float = 1e-6, table: OperationTable | None = None,
             n_src: int | None = None, n_tgt: int | None = None, smoothing: float = 0.0) -> EMResult:
    """Alternate e-step and m-step; ``trace`` has the log-likelihood before each m-step."""
    if iterations < 1:
        raise DataError("iterations must be at least 1")
    if table is None:
        n_src = n_src or 1 + max((max(s, default=0) for s in sources), default=0)
        n_tgt = n_tgt or 1 + max((max(t, default=0) for t in targets), default=0)
        table = OperationTable.uniform(n_src, n_tgt, {x for s in sources for x in s}, {x for t in targets for x in t})
    trace = []
    for _ in range(iterations):
        result = e_step(table, sources, targets)
        trace.append(result.log_likelihood)
        table = m_step(result.counts, smoothing)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
    return EMResult(table, trace)
