"""Dynamic programs over per-cell edit-operation probabilities.

Every table here is a batched log-space array of shape ``(B, N + 1, M + 1)``
where ``N`` and ``M`` are the longest source and target in the batch. Cell
``(i, j)`` stands for the prefix pair ``s[:i]``, ``t[:j]``; cells beyond a
pair's own lengths hold ``-inf``.

The programs only see :class:`OpEdges`: for every cell, the log-probability
of the single delete, insert and substitute operation that can enter it given
the symbols actually present. How those numbers were produced (a neural
network, a static multinomial table, a test fixture) does not matter here.
Anti-diagonals are swept in a vectorised fashion so one Python iteration
handles a whole diagonal of a whole batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

NEG_INF = -np.inf

# order of the trailing axis in every per-operation array of this module
OPS = ("del", "ins", "sub")
DEL, INS, SUB = 0, 1, 2


@lru_cache(maxsize=1024)
def _diagonal(rows: int, cols: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(max(0, k - cols + 1), min(k, rows - 1) + 1)
    return i, k - i


def _logsumexp(*terms: np.ndarray) -> np.ndarray:
    out = terms[0]
    for term in terms[1:]:
        out = np.logaddexp(out, term)
    return out


@dataclass(frozen=True)
class OpEdges:
    """Log-probabilities of the operations entering each cell.

    ``delete[b, i, j]`` is log P(delete s_i) on the edge (i-1, j) -> (i, j),
    ``insert[b, i, j]`` is log P(insert t_j) on (i, j-1) -> (i, j) and
    ``subst[b, i, j]`` is log P(substitute s_i -> t_j) on (i-1, j-1) -> (i, j).
    Use :meth:`build` to construct; it applies the structural ``-inf`` mask.
    """

    delete: np.ndarray
    insert: np.ndarray
    subst: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray

    @classmethod
    def build(cls, delete, insert, subst, src_len=None, tgt_len=None) -> "OpEdges":
        arrays = [np.array(a, dtype=np.float64) for a in (delete, insert, subst)]
        if arrays[0].ndim == 2:
            arrays = [a[None] for a in arrays]
        shape = arrays[0].shape
        if any(a.shape != shape for a in arrays) or len(shape) != 3:
            raise ConfigError(f"operation tables disagree in shape: {[a.shape for a in arrays]}")
        batch, rows, cols = shape
        src_len = np.full(batch, rows - 1) if src_len is None else np.atleast_1d(np.asarray(src_len))
        tgt_len = np.full(batch, cols - 1) if tgt_len is None else np.atleast_1d(np.asarray(tgt_len))
        if src_len.shape != (batch,) or tgt_len.shape != (batch,):
            raise ConfigError("one source and one target length per batch item expected")
        if (src_len > rows - 1).any() or (tgt_len > cols - 1).any() or (src_len < 0).any() or (tgt_len < 0).any():
            raise ConfigError(
                f"lengths {src_len.tolist()}/{tgt_len.tolist()} do not fit a grid of {rows}x{cols} cells")

        i = np.arange(rows)[None, :, None]
        j = np.arange(cols)[None, None, :]
        inside = (i <= src_len[:, None, None]) & (j <= tgt_len[:, None, None])
        delete, insert, subst = arrays
        delete = np.where(inside & (i > 0), delete, NEG_INF)
        insert = np.where(inside & (j > 0), insert, NEG_INF)
        subst = np.where(inside & (i > 0) & (j > 0), subst, NEG_INF)
        return cls(delete, insert, subst, src_len.astype(np.int64), tgt_len.astype(np.int64))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.delete.shape

    def stacked(self) -> np.ndarray:
        """``(B, N+1, M+1, 3)`` array in :data:`OPS` order."""
        return np.stack([self.delete, self.insert, self.subst], axis=-1)

    def __getitem__(self, index) -> "OpEdges":
        """Select a sub-batch (keeps the batch axis)."""
        index = np.atleast_1d(np.arange(self.shape[0])[index])
        return OpEdges(self.delete[index], self.insert[index], self.subst[index],
                       self.src_len[index], self.tgt_len[index])


def forward(edges: OpEdges) -> np.ndarray:
    """Log prefix-pair probabilities alpha, ``(B, N+1, M+1)``."""
    batch, rows, cols = edges.shape
    # shifted by one cell so that out-of-grid predecessors read -inf
    table = np.full((batch, rows + 1, cols + 1), NEG_INF)
    table[:, 1, 1] = 0.0
    for k in range(1, rows + cols - 1):
        i, j = _diagonal(rows, cols, k)
        table[:, i + 1, j + 1] = _logsumexp(
            table[:, i + 1, j] + edges.insert[:, i, j],
            table[:, i, j + 1] + edges.delete[:, i, j],
            table[:, i, j] + edges.subst[:, i, j],
        )
    return table[:, 1:, 1:].copy()


def adjoint(edges: OpEdges, log_seed: np.ndarray) -> np.ndarray:
    """Reverse sweep accumulating non-negative seeds along successor edges.

    Returns ``log a`` with ``a[i, j] = seed[i, j] + sum over successors
    (k, l) of a[k, l] * P(edge (i, j) -> (k, l))``. With the seed being one at
    ``(n, m)`` this is the backward table beta; with ``seed = dL/d alpha`` it
    is the total derivative of ``L`` with respect to ``alpha[i, j]``.
    """
    batch, rows, cols = edges.shape
    pad = ((0, 0), (0, 1), (0, 1))
    ins = np.pad(edges.insert, pad, constant_values=NEG_INF)
    dele = np.pad(edges.delete, pad, constant_values=NEG_INF)
    sub = np.pad(edges.subst, pad, constant_values=NEG_INF)
    table = np.full((batch, rows + 1, cols + 1), NEG_INF)
    for k in range(rows + cols - 2, -1, -1):
        i, j = _diagonal(rows, cols, k)
        table[:, i, j] = _logsumexp(
            log_seed[:, i, j],
            table[:, i, j + 1] + ins[:, i, j + 1],
            table[:, i + 1, j] + dele[:, i + 1, j],
            table[:, i + 1, j + 1] + sub[:, i + 1, j + 1],
        )
    return table[:, :rows, :cols].copy()


def corner_seed(edges: OpEdges) -> np.ndarray:
    seed = np.full(edges.shape, NEG_INF)
    seed[np.arange(edges.shape[0]), edges.src_len, edges.tgt_len] = 0.0
    return seed


def backward(edges: OpEdges) -> np.ndarray:
    """Log suffix-pair probabilities beta; ``beta[:, 0, 0]`` equals the alpha corner."""
    return adjoint(edges, corner_seed(edges))


def log_likelihood(alpha: np.ndarray, edges: OpEdges) -> np.ndarray:
    """``log alpha[n, m]`` for every pair of the batch."""
    return alpha[np.arange(alpha.shape[0]), edges.src_len, edges.tgt_len]


def edge_flow(edges: OpEdges, alpha: np.ndarray, log_weight: np.ndarray) -> np.ndarray:
    """``log(alpha[prev] * P(edge) * weight[cell])`` for each entering edge.

    Shape ``(B, N+1, M+1, 3)`` in :data:`OPS` order.
    """
    prev_del = np.pad(alpha, ((0, 0), (1, 0), (0, 0)), constant_values=NEG_INF)[:, :-1, :]
    prev_ins = np.pad(alpha, ((0, 0), (0, 0), (1, 0)), constant_values=NEG_INF)[:, :, :-1]
    prev_sub = np.pad(alpha, ((0, 0), (1, 0), (1, 0)), constant_values=NEG_INF)[:, :-1, :-1]
    return np.stack([
        prev_del + edges.delete + log_weight,
        prev_ins + edges.insert + log_weight,
        prev_sub + edges.subst + log_weight,
    ], axis=-1)


def posteriors(edges: OpEdges, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Log posterior probability that a derivation uses each edge."""
    log_z = log_likelihood(alpha, edges)
    flow = edge_flow(edges, alpha, beta)
    with np.errstate(invalid="ignore"):
        out = flow - log_z[:, None, None, None]
    return np.where(np.isfinite(log_z)[:, None, None, None], out, NEG_INF)


def grad_log_alpha(edges: OpEdges, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Gradient of ``log alpha[n, m]`` w.r.t. the entering-edge log-probabilities.

    By the forward-backward identity d alpha[n,m] / d P = alpha[prev] * beta[cell],
    so the log-log derivative is the edge posterior. Unreachable edges get 0.
    """
    return np.exp(posteriors(edges, alpha, beta))


def alpha_vjp(edges: OpEdges, alpha: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``log alpha`` back to the entering-edge log-probabilities.

    ``grad`` is ``(B, N+1, M+1)``; the result is ``(B, N+1, M+1, 3)``. Positive
    and negative parts of the gradient run through separate log-space sweeps.
    """
    out = np.zeros(edges.shape + (3,))
    finite = np.isfinite(alpha)
    for sign in (1.0, -1.0):
        part = np.where(finite, np.maximum(sign * grad, 0.0), 0.0)
        if not part.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            log_seed = np.where(part > 0, np.log(part) - alpha, NEG_INF)
        flow = edge_flow(edges, alpha, adjoint(edges, log_seed))
        out += sign * np.exp(flow)
    return out


def plausibility_mask(edges: OpEdges) -> np.ndarray:
    """Boolean ``(B, N+1, M+1, 3)``: deletion needs i > 0, insertion j > 0,
    substitution both, all within the pair's own lengths."""
    batch, rows, cols = edges.shape
    i = np.arange(rows)[None, :, None]
    j = np.arange(cols)[None, None, :]
    inside = (i <= edges.src_len[:, None, None]) & (j <= edges.tgt_len[:, None, None])
    return np.stack([inside & (i > 0), inside & (j > 0), inside & (i > 0) & (j > 0)], axis=-1)


def em_expected(edges: OpEdges, alpha: np.ndarray, beta: np.ndarray, plausible=None):
    """Expected distribution over the operations entering each cell.

    Returns ``(q, used)``: ``q`` is ``(B, N+1, M+1, 3)`` and sums to one in every
    cell flagged in ``used``; cells with nothing plausible or reachable are all
    zero and not used.
    """
    if plausible is None:
        plausible = plausibility_mask(edges)
    flow = np.where(plausible, edge_flow(edges, alpha, beta), NEG_INF)
    norm = np.logaddexp.reduce(flow, axis=-1)
    used = np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        q = np.exp(flow - norm[..., None])
    q = np.where(used[..., None], q, 0.0)

    batch, rows, cols = edges.shape
    structural = plausible.any(axis=-1)
    skipped = int((structural & ~used).sum())
    if skipped:
        logger.debug("EM loss skipped %d cells with no reachable plausible operation", skipped)
    return q, used


def em_loss(edges: OpEdges, alpha: np.ndarray, beta: np.ndarray, plausible=None, expected=None):
    """Per-pair EM loss: sum over cells of KL(expected || predicted).

    The expected distribution has structural zeros (implausible operations and,
    for the matching head, the non-match class), so the divergence is taken from
    the expected distribution to the prediction; it only needs the predicted
    log-probabilities of the plausible operations, which are the edges. Passing
    ``expected`` reuses a fixed target (it is a constant for differentiation).

    Returns ``(loss (B,), expected (B, N+1, M+1, 3))``. The gradient of the loss
    with respect to the edge log-probabilities is ``-expected``.
    """
    if expected is None:
        expected, _ = em_expected(edges, alpha, beta, plausible)
    logp = edges.stacked()
    positive = expected > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(positive, expected * (np.log(np.where(positive, expected, 1.0)) - logp), 0.0)
    return terms.sum(axis=(1, 2, 3)), expected


@dataclass(frozen=True)
class EditOp:
    """One operation; ``(i, j)`` is the cell it enters.

    A deletion consumes source position ``i``, an insertion produces target
    position ``j`` and a substitution does both (positions are 1-based).
    """

    kind: str
    i: int
    j: int

    @property
    def source(self) -> int | None:
        return None if self.kind == "ins" else self.i

    @property
    def target(self) -> int | None:
        return None if self.kind == "del" else self.j


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...]
    log_score: float

    @property
    def score(self) -> float:
        return float(np.exp(self.log_score))

    def links(self) -> set[tuple[int, int]]:
        """Substitutions as 1-based (source, target) alignment links."""
        return {(op.i, op.j) for op in self.ops if op.kind == "sub"}

    def is_valid(self, n: int, m: int) -> bool:
        i = j = 0
        for op in self.ops:
            di, dj = {"del": (1, 0), "ins": (0, 1), "sub": (1, 1)}[op.kind]
            i, j = i + di, j + dj
            if (op.i, op.j) != (i, j):
                return False
        return (i, j) == (n, m)

    def render(self, source, target) -> list[str]:
        """Tokens ``sub(x→y)``, ``del(x)``, ``ins(y)`` for symbol sequences."""
        out = []
        for op in self.ops:
            if op.kind == "sub":
                out.append(f"sub({source[op.i - 1]}→{target[op.j - 1]})")
            elif op.kind == "del":
                out.append(f"del({source[op.i - 1]})")
            else:
                out.append(f"ins({target[op.j - 1]})")
        return out


_CODE_SUB, _CODE_DEL, _CODE_INS = 0, 1, 2


def viterbi(edges: OpEdges) -> list[EditScript]:
    """Most probable edit script of every pair (max-product forward pass).

    Ties prefer substitution, then deletion, then insertion.
    """
    batch, rows, cols = edges.shape
    table = np.full((batch, rows + 1, cols + 1), NEG_INF)
    table[:, 1, 1] = 0.0
    pointers = np.zeros((batch, rows, cols), dtype=np.int8)
    for k in range(1, rows + cols - 1):
        i, j = _diagonal(rows, cols, k)
        cand = np.stack([
            table[:, i, j] + edges.subst[:, i, j],
            table[:, i, j + 1] + edges.delete[:, i, j],
            table[:, i + 1, j] + edges.insert[:, i, j],
        ])
        best = cand.argmax(axis=0)
        table[:, i + 1, j + 1] = np.take_along_axis(cand, best[None], axis=0)[0]
        pointers[:, i, j] = best

    scripts = []
    for b in range(batch):
        i, j = int(edges.src_len[b]), int(edges.tgt_len[b])
        score = float(table[b, i + 1, j + 1])
        if not np.isfinite(score):
            scripts.append(EditScript((), score))
            continue
        ops = []
        while i > 0 or j > 0:
            code = pointers[b, i, j]
            if code == _CODE_SUB:
                ops.append(EditOp("sub", i, j))
                i, j = i - 1, j - 1
            elif code == _CODE_DEL:
                ops.append(EditOp("del", i, j))
                i -= 1
            else:
                ops.append(EditOp("ins", i, j))
                j -= 1
        scripts.append(EditScript(tuple(reversed(ops)), score))
    return scripts


def script_log_score(edges: OpEdges, ops, b: int = 0) -> float:
    """Sum of the edge log-probabilities used by ``ops`` in batch item ``b``."""
    table = {"del": edges.delete, "ins": edges.insert, "sub": edges.subst}
    return float(sum(table[op.kind][b, op.i, op.j] for op in ops))
