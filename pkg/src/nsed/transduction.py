"""String transduction: next-symbol distribution, NLL training and decoding.

The distribution of the next target symbol after a prefix of length j mixes,
over source positions i, the insertion and substitution probabilities that
the context ``c[i, j]`` assigns to each symbol, weighted by ``alpha[i, j]``
and renormalised by the total weight of the column. Substitution is not
available in the last row, where the source is exhausted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dp, nn
from .errors import ConfigError, DataError
from .losses import LossWeights, interpretability_edge_grad, interpretability_loss
from .matching import LossResult
from .model import BOS, EOS, EditModel, PairBatch

NEG_INF = -np.inf


def mixture_terms(ins, subs, src_len):
    """Per-cell log P(next = y) under the insert-or-substitute softmax.

    ``ins``/``subs`` are raw head outputs ``(..., R, C, T)``; rows at or past
    each source length lose their substitution classes. Returns
    ``(log_mix, log_p_ins, log_p_subs)``.
    """
    rows = ins.shape[1]
    last = np.arange(rows)[None, :, None, None] >= np.asarray(src_len)[:, None, None, None]
    subs = np.where(last, NEG_INF, subs)
    t = ins.shape[-1]
    joint = nn.log_softmax(np.concatenate([ins, subs], axis=-1))
    lp_ins, lp_subs = joint[..., :t], joint[..., t:]
    return np.logaddexp(lp_ins, lp_subs), lp_ins, lp_subs


def _logsumexp(x, axis):
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top, axis=axis)


def step_log_probs(log_alpha_col, log_mix_col):
    """Next-symbol log-distribution ``(B, T)`` from one alpha column ``(B, R)``
    (``-inf`` outside the source) and the per-row mixtures ``(B, R, T)``."""
    weight = _logsumexp(log_alpha_col, axis=1)
    if np.any(np.isneginf(weight)):
        raise DataError("prefix is unreachable: the whole alpha column is zero")
    return _logsumexp(log_alpha_col[:, :, None] + log_mix_col, axis=1) - weight[:, None]


def nll_loss(model: EditModel, fwd, alpha):
    """Teacher-forced next-symbol NLL per pair, divided by the source length.

    Returns ``(loss (B,), dloss/dlog_alpha (B, R, C), raw-head gradients)``.
    """
    batch = fwd.batch
    b_size, rows, cols = alpha.shape
    n, m = batch.src_len, batch.tgt_len
    ins = fwd.raw["ins"].astype(np.float64)
    subs = fwd.raw["subs"].astype(np.float64)
    log_mix, lp_ins, lp_subs = mixture_terms(ins, subs, n)

    y = np.zeros((b_size, cols), dtype=np.int64)
    width = min(cols, batch.tgt_cls.shape[1])
    y[:, :width] = batch.tgt_cls[:, :width]
    i = np.arange(rows)[None, :, None]
    j = np.arange(cols)[None, None, :]
    valid = (i <= n[:, None, None]) & (j < m[:, None, None])
    cols_valid = np.arange(cols)[None, :] < m[:, None]

    yy = np.broadcast_to(y[:, None, :, None], (b_size, rows, cols, 1))
    r = np.take_along_axis(log_mix, yy, axis=-1)[..., 0]
    a = np.where(valid, alpha, NEG_INF)
    num = _logsumexp(a + r, axis=1)
    den = _logsumexp(a, axis=1)
    with np.errstate(invalid="ignore"):
        log_p = np.where(cols_valid, num - den, 0.0)
    scale = 1.0 / np.maximum(n, 1)
    loss = -log_p.sum(axis=1) * scale

    with np.errstate(invalid="ignore"):
        pi = np.where(valid, np.exp(a + r - num[:, None, :]), 0.0)
        rho = np.where(valid, np.exp(a - den[:, None, :]), 0.0)
    s = scale[:, None, None]
    dlog_alpha = -(pi - rho) * s
    dr = (-pi * s)[..., None]
    onehot = np.zeros_like(ins)
    np.put_along_axis(onehot, yy, 1.0, axis=-1)
    with np.errstate(invalid="ignore"):
        share_ins = np.exp(lp_ins - log_mix)
        share_subs = np.where(np.isfinite(lp_subs), np.exp(lp_subs - log_mix), 0.0)
    draw = {"ins": dr * (onehot * share_ins - np.exp(lp_ins)),
            "subs": dr * (onehot * share_subs - np.exp(lp_subs))}
    return loss, dlog_alpha, draw


def transduction_loss(model: EditModel, batch: PairBatch, weights: LossWeights,
                      normalize_interp: bool = False, want_grads: bool = True, expected=None) -> LossResult:
    """Summed composite loss: EM, next-symbol NLL, ``-log alpha[n, m]`` and the
    diagonal penalty, which brings its own ``-log alpha[n, m]`` compensation."""
    if len(batch) == 0:
        raise DataError("empty batch")
    fwd = model.forward(batch)
    edges = fwd.grid.edges()
    alpha = dp.forward(edges)
    beta = dp.backward(edges)
    log_alpha = dp.log_likelihood(alpha, edges)

    em, expected = dp.em_loss(edges, alpha, beta, expected=expected)
    nll, dnll, draw = nll_loss(model, fwd, alpha)
    penalty = interpretability_loss(alpha, edges.src_len, edges.tgt_len, normalize=normalize_interp)
    components = {"em": float(em.sum()), "nll": float(nll.sum()), "neg_log_alpha": float(-log_alpha.sum()),
                  "interp": float((penalty - log_alpha).sum())}
    total = (weights.w_em * components["em"] + weights.w_nll * components["nll"]
             + weights.w_bce * components["neg_log_alpha"] + weights.w_interp * components["interp"])

    grads = None
    if want_grads:
        seed = weights.w_nll * dnll
        seed[np.arange(len(batch)), edges.src_len, edges.tgt_len] -= weights.w_bce + weights.w_interp
        edge_grad = -weights.w_em * expected + dp.alpha_vjp(edges, alpha, seed)
        if weights.w_interp:
            edge_grad = edge_grad + weights.w_interp * interpretability_edge_grad(edges, alpha, normalize_interp)
        raw = {k: weights.w_nll * v for k, v in draw.items()}
        grads = model.backward(fwd, fwd.grid.scatter(edge_grad), raw)
    return LossResult(total, components, grads, len(batch))


# ------------------------------------------------------------------ decoding


@dataclass(frozen=True)
class BeamConfig:
    beam: int = 5
    len_norm: float = 0.0
    max_len: int = 50

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigError("beam size must be at least 1")
        if self.len_norm < 0:
            raise ConfigError("length normalisation exponent must be non-negative")
        if self.max_len < 1:
            raise ConfigError("max_len must be at least 1")


@dataclass
class DecoderState:
    """A batch of partial outputs that all have the same length j.

    ``prefix`` holds target vocabulary indices without sentinels, ``log_alpha``
    the alpha column j over source rows, ``context`` the contexts ``c[:, j]``.
    """

    source: np.ndarray
    prefix: np.ndarray
    log_alpha: np.ndarray
    context: np.ndarray

    def __len__(self):
        return len(self.source)

    def select(self, index) -> "DecoderState":
        index = np.asarray(index, dtype=np.int64)
        return DecoderState(self.source[index], self.prefix[index], self.log_alpha[index], self.context[index])


class Decoder:
    """Incremental decoding of one or more source strings."""

    def __init__(self, model: EditModel, sources):
        if model.task != "transduce":
            raise ConfigError("decoding needs a transduction model")
        self.model = model
        batch = model.make_batch(sources, [[] for _ in sources])
        self.src_len = batch.src_len
        self.hs, _ = model.encode_source(batch)
        self.src_mask = model.source_mask(batch)
        self.rows = self.hs.shape[1]
        self.offsets = model.heads.offsets()

    def _contexts(self, source, prefix):
        """Contexts of the last prefix position, ``(k, R, D)``."""
        k = len(source)
        ids = np.concatenate([np.full((k, 1), BOS, dtype=np.int64), prefix], axis=1)
        ht, _ = self.model.encode_target(ids, np.full(k, prefix.shape[1]))
        ctx, _ = self.model.context.forward(self.model.params, self.hs[source], ht[:, -1:], self.src_mask[source])
        return ctx[:, :, 0]

    def _column(self, source, log_alpha_prev, ctx_prev, ctx_new, symbols):
        """Alpha column j + 1 from column j and the contexts on both sides."""
        params, heads = self.model.params, self.model.heads
        k, rows = len(source), self.rows
        bias = {op: params[heads.layers[op].b] for op in heads.sizes}

        def head(op, ctx):
            return ctx @ params[heads.layers[op].w].T + bias[op]

        def down(y, op):
            out = np.broadcast_to(bias[op], y.shape).copy()
            out[:, 1:] = y[:, :-1]
            return out

        if ctx_prev is None:
            ins = np.broadcast_to(bias["ins"], (k, rows, heads.sizes["ins"]))
            subs = np.broadcast_to(bias["subs"], (k, rows, heads.sizes["subs"]))
        else:
            ins = head("ins", ctx_prev)
            subs = down(head("subs", ctx_prev), "subs")
        dele = down(head("del", ctx_new), "del")
        logp = nn.log_softmax(np.concatenate([dele, ins, subs], axis=-1).astype(np.float64))
        lp_del = logp[..., self.offsets["del"]]
        n = self.src_len[source]
        new = np.full((k, rows), NEG_INF)
        if log_alpha_prev is None:
            base = np.full((k, rows), NEG_INF)
            base[:, 0] = 0.0
        else:
            y = np.asarray(symbols)[:, None, None] - 1
            lp_ins = np.take_along_axis(logp, self.offsets["ins"] + np.broadcast_to(y, (k, rows, 1)), -1)[..., 0]
            lp_subs = np.take_along_axis(logp, self.offsets["subs"] + np.broadcast_to(y, (k, rows, 1)), -1)[..., 0]
            shifted = np.full((k, rows), NEG_INF)
            shifted[:, 1:] = log_alpha_prev[:, :-1] + lp_subs[:, 1:]
            base = np.logaddexp(log_alpha_prev + lp_ins, shifted)
        new[:, 0] = base[:, 0]
        for i in range(1, rows):
            new[:, i] = np.logaddexp(base[:, i], new[:, i - 1] + lp_del[:, i])
        return np.where(np.arange(rows)[None, :] <= n[:, None], new, NEG_INF)

    def initial(self, source=None) -> DecoderState:
        source = np.arange(len(self.src_len)) if source is None else np.asarray(source, dtype=np.int64)
        prefix = np.zeros((len(source), 0), dtype=np.int64)
        ctx = self._contexts(source, prefix)
        log_alpha = self._column(source, None, None, ctx, None)
        return DecoderState(source, prefix, log_alpha, ctx)

    def next_log_probs(self, state: DecoderState) -> np.ndarray:
        """``(k, T)`` log-distribution over output classes (class = index - 1)."""
        raw = self.model.heads.raw(self.model.params, state.context[:, :, None], ops=("ins", "subs"))
        ins = raw["ins"].astype(np.float64)
        subs = raw["subs"].astype(np.float64)
        log_mix = mixture_terms(ins, subs, self.src_len[state.source])[0][:, :, 0]
        return step_log_probs(state.log_alpha, log_mix)

    def advance(self, state: DecoderState, symbols) -> DecoderState:
        """Append one target vocabulary index to every prefix."""
        symbols = np.asarray(symbols, dtype=np.int64)
        prefix = np.concatenate([state.prefix, symbols[:, None]], axis=1)
        ctx = self._contexts(state.source, prefix)
        log_alpha = self._column(state.source, state.log_alpha, state.context, ctx, symbols)
        return DecoderState(state.source, prefix, log_alpha, ctx)


@dataclass
class Hypothesis:
    symbols: tuple
    log_prob: float
    score: float
    finished: bool
    script: dp.EditScript | None = None


def _norm(log_prob, length, len_norm):
    return log_prob / (max(length, 1) ** len_norm) if len_norm else log_prob


def _length_cap(model: EditModel, max_len: int) -> int:
    # the target encoder sees <s> plus the output, so it bounds the output length
    return max(1, min(max_len, model.config.max_positions - 1))


def decode_greedy_batch(model: EditModel, sources, max_len: int = 50) -> list[Hypothesis]:
    """Argmax decoding of several sources in lock-step (no scripts)."""
    if not sources:
        return []
    max_len = _length_cap(model, max_len)
    decoder = Decoder(model, sources)
    state = decoder.initial()
    k = len(sources)
    outputs = [[] for _ in range(k)]
    log_prob = np.zeros(k)
    done = np.zeros(k, dtype=bool)
    for step in range(1, max_len + 1):
        lp = decoder.next_log_probs(state)
        choice = np.argmax(lp, axis=1)
        for b in np.nonzero(~done)[0]:
            log_prob[b] += lp[b, choice[b]]
            if choice[b] + 1 == EOS:
                done[b] = True
            else:
                outputs[b].append(int(choice[b]) + 1)
        if done.all() or step == max_len:
            break
        state = decoder.advance(state, np.where(done, EOS, choice + 1))
    return [Hypothesis(tuple(o), float(p), float(p), bool(d)) for o, p, d in zip(outputs, log_prob, done)]


def decode_greedy(model: EditModel, source, max_len: int = 50) -> Hypothesis:
    """Pick the most probable symbol at every step; attach the Viterbi script."""
    hyp = decode_greedy_batch(model, [source], max_len)[0]
    hyp.script = interpret(model, source, hyp.symbols)
    return hyp


def beam_search(model: EditModel, source, config: BeamConfig = BeamConfig()) -> Hypothesis:
    """Beam search ranking by ``log_prob / length ** len_norm``.

    Finished hypotheses stay in the beam and compete with open ones; the
    length counts generated symbols including ``</s>``. Hypotheses still open
    after ``max_len`` steps are truncated.
    """
    max_len = _length_cap(model, config.max_len)
    decoder = Decoder(model, [source])
    state = decoder.initial(np.zeros(1, dtype=np.int64))
    open_lp = np.zeros(1)
    finished: list[Hypothesis] = []
    for step in range(1, max_len + 1):
        lp = decoder.next_log_probs(state)
        # candidate pool: finished hypotheses first, then expansions by parent and class
        cand_score = [h.score for h in finished]
        cand = [("done", h) for h in finished]
        for parent in range(len(state)):
            top = np.argsort(-lp[parent], kind="stable")[:config.beam]
            for c in top:
                total = open_lp[parent] + lp[parent, c]
                cand.append(("open", (parent, int(c), total)))
                cand_score.append(_norm(total, step, config.len_norm))
        order = np.argsort(-np.asarray(cand_score), kind="stable")[:config.beam]
        finished, keep_parent, keep_symbol, keep_lp = [], [], [], []
        for idx in order:
            kind, item = cand[idx]
            if kind == "done":
                finished.append(item)
                continue
            parent, c, total = item
            prefix = tuple(int(x) for x in state.prefix[parent])
            if c + 1 == EOS:
                finished.append(Hypothesis(prefix, float(total), float(cand_score[idx]), True))
            else:
                keep_parent.append(parent)
                keep_symbol.append(c + 1)
                keep_lp.append(total)
        if not keep_parent:
            break
        if step == max_len:
            for parent, symbol, total in zip(keep_parent, keep_symbol, keep_lp):
                prefix = tuple(int(x) for x in state.prefix[parent]) + (symbol,)
                finished.append(Hypothesis(prefix, float(total), float(_norm(total, step, config.len_norm)), False))
            break
        state = decoder.advance(state.select(keep_parent), keep_symbol)
        open_lp = np.asarray(keep_lp)
    best = sorted(finished, key=lambda h: -h.score)[0]
    best.script = interpret(model, source, best.symbols)
    return best


def interpret(model: EditModel, source, output) -> dp.EditScript:
    """Most probable edit script turning ``source`` into ``output`` (no ``</s>``)."""
    batch = model.make_batch([source], [list(output)])
    return dp.viterbi(model.grid(batch).edges())[0]


def alpha_from_scratch(model: EditModel, source, prefix) -> np.ndarray:
    """Alpha table of ``(source, prefix)`` recomputed by the batch forward pass."""
    batch = model.make_batch([source], [list(prefix)])
    return dp.forward(model.grid(batch).edges())[0]
