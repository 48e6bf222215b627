"""The neural edit-distance model shared by the matching and transduction tasks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dp, nn
from .encoders import EncoderConfig, OperationHeads, PairContext, SequenceEncoder
from .errors import ConfigError

BOS, EOS = 0, 1
TASKS = ("match", "transduce")


@dataclass
class PairBatch:
    """Padded, integer-encoded string pairs.

    ``src_ids``/``tgt_ids`` are the encoder inputs (with sentinels), ``src_len``
    and ``tgt_len`` the string lengths n and m, ``tgt_cls[b, j-1]`` the output
    class of ``t_j`` (transduction only).
    """

    src_ids: np.ndarray
    src_len: np.ndarray
    tgt_ids: np.ndarray
    tgt_len: np.ndarray
    tgt_cls: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.src_len)


@dataclass
class OpDistributionGrid:
    """Per-cell log-distribution over all operation classes.

    ``log_probs`` is ``(B, N+1, M+1, K)``; ``gold[..., k]`` is the class index
    of the delete / insert / substitute operation that actually enters the cell
    for this pair of strings.
    """

    log_probs: np.ndarray
    gold: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray
    offsets: dict = field(default_factory=dict)

    def edges(self) -> dp.OpEdges:
        taken = np.take_along_axis(self.log_probs, self.gold, axis=-1)
        return dp.OpEdges.build(taken[..., 0], taken[..., 1], taken[..., 2], self.src_len, self.tgt_len)

    def scatter(self, edge_grad) -> np.ndarray:
        """Place per-edge gradients ``(B, R, C, 3)`` at their class positions."""
        out = np.zeros_like(self.log_probs)
        np.put_along_axis(out, self.gold, np.nan_to_num(edge_grad), axis=-1)
        return out

    def cell_mask(self) -> np.ndarray:
        rows, cols = self.log_probs.shape[1:3]
        i = np.arange(rows)[None, :, None]
        j = np.arange(cols)[None, None, :]
        return (i <= self.src_len[:, None, None]) & (j <= self.tgt_len[:, None, None])


@dataclass
class Forward:
    batch: PairBatch
    grid: OpDistributionGrid
    context: np.ndarray
    raw: dict
    caches: tuple


class EditModel:
    """Encoders, pair context and operation heads for one task.

    For matching both strings share one alphabet and one encoder, and the head
    has the four classes delete, insert, substitute and non-match. For
    transduction the target side is a causal encoder over the target alphabet
    and insertion and substitution predict the target symbol.
    """

    def __init__(self, task: str, config: EncoderConfig, src_vocab_size: int,
                 tgt_vocab_size: int | None = None, seed: int = 13, dtype=np.float32):
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        self.task, self.config, self.dtype = task, config, np.dtype(dtype)
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = src_vocab_size if task == "match" else tgt_vocab_size
        if self.tgt_vocab_size is None:
            raise ConfigError("transduction needs a target vocabulary size")
        d = config.embed_dim
        self.src_encoder = SequenceEncoder("enc.src", config, src_vocab_size)
        if task == "match":
            self.tgt_encoder = self.src_encoder
            self.context = PairContext("ctx", config.output_dim(), config.output_dim(), d)
            sizes = {"del": 1, "ins": 1, "subs": 1, "nonmatch": 1}
        else:
            self.tgt_encoder = SequenceEncoder("enc.tgt", config, self.tgt_vocab_size, causal=True)
            self.context = PairContext("ctx", config.output_dim(), config.output_dim(), d, attention=True,
                                       heads=config.heads, head_dim=config.head_dim)
            sizes = {"del": 1, "ins": self.n_target_classes, "subs": self.n_target_classes}
        self.heads = OperationHeads(self.context.out_dim, sizes)
        self.params: dict[str, np.ndarray] = {}
        self.initialize(seed)

    @property
    def n_target_classes(self) -> int:
        """Output symbols of transduction: the target alphabet without ``<s>``."""
        return self.tgt_vocab_size - 1

    def initialize(self, seed: int):
        rng = np.random.default_rng(seed)
        self.params = {}
        self.src_encoder.init(self.params, rng, self.dtype)
        if self.tgt_encoder is not self.src_encoder:
            self.tgt_encoder.init(self.params, rng, self.dtype)
        self.context.init(self.params, rng, self.dtype)
        self.heads.init(self.params, rng, self.dtype)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype) -> "EditModel":
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self

    # ----------------------------------------------------------------- batching

    def make_batch(self, sources, targets, labels=None) -> PairBatch:
        """Encode lists of symbol-index sequences (no sentinels) into a batch.

        For transduction the targets should already end with ``</s>``.
        """
        if len(sources) != len(targets):
            raise ConfigError("sources and targets differ in number")
        n = np.array([len(s) for s in sources], dtype=np.int64)
        m = np.array([len(t) for t in targets], dtype=np.int64)
        batch = len(sources)
        src_ids = np.full((batch, n.max(initial=0) + 1), EOS, dtype=np.int64)
        tgt_ids = np.full((batch, m.max(initial=0) + 1), EOS, dtype=np.int64)
        tgt_cls = np.zeros((batch, max(m.max(initial=0), 1)), dtype=np.int64)
        for b, (s, t) in enumerate(zip(sources, targets)):
            src_ids[b, :len(s)] = s
            if self.task == "match":
                tgt_ids[b, :len(t)] = t
            else:
                tgt_ids[b, 0] = BOS
                tgt_ids[b, 1:len(t) + 1] = t
                tgt_cls[b, :len(t)] = np.asarray(t, dtype=np.int64) - 1
        return PairBatch(src_ids, n, tgt_ids, m, tgt_cls,
                         None if labels is None else np.asarray(labels, dtype=np.float64))

    # ------------------------------------------------------------------ forward

    def encode_source(self, batch: PairBatch):
        return self.src_encoder.forward(self.params, batch.src_ids, batch.src_len + 1)

    def encode_target(self, tgt_ids, tgt_len):
        return self.tgt_encoder.forward(self.params, tgt_ids, np.asarray(tgt_len) + 1)

    def source_mask(self, batch: PairBatch):
        return np.arange(batch.src_ids.shape[1])[None, :] <= batch.src_len[:, None]

    def gold_classes(self, batch: PairBatch, rows: int, cols: int) -> np.ndarray:
        gold = np.zeros((len(batch), rows, cols, 3), dtype=np.int64)
        if self.task == "match":
            gold[..., 1], gold[..., 2] = 1, 2
            return gold
        offsets = self.heads.offsets()
        cls = np.zeros((len(batch), cols), dtype=np.int64)
        cls[:, 1:] = batch.tgt_cls[:, :cols - 1]
        gold[..., 0] = offsets["del"]
        gold[..., 1] = offsets["ins"] + cls[:, None, :]
        gold[..., 2] = offsets["subs"] + cls[:, None, :]
        return gold

    def forward(self, batch: PairBatch) -> Forward:
        hs, c_src = self.encode_source(batch)
        ht, c_tgt = self.encode_target(batch.tgt_ids, batch.tgt_len)
        context, c_ctx = self.context.forward(self.params, hs, ht, self.source_mask(batch))
        raw = self.heads.raw(self.params, context)
        logits = self.heads.grid_logits(self.params, context, raw).astype(np.float64)
        log_probs = nn.log_softmax(logits)
        rows, cols = log_probs.shape[1:3]
        grid = OpDistributionGrid(log_probs, self.gold_classes(batch, rows, cols),
                                  batch.src_len, batch.tgt_len, self.heads.offsets())
        return Forward(batch, grid, context, raw, (c_src, c_tgt, c_ctx))

    def grid(self, batch: PairBatch) -> OpDistributionGrid:
        return self.forward(batch).grid

    # ----------------------------------------------------------------- backward

    def backward(self, fwd: Forward, dlog_probs=None, draw=None, grads=None) -> dict:
        """Accumulate parameter gradients.

        ``dlog_probs`` is the gradient w.r.t. the grid log-probabilities and
        ``draw`` maps head names to gradients w.r.t. their unshifted outputs.
        """
        grads = self.zero_grads() if grads is None else grads
        dlogits = None
        if dlog_probs is not None:
            probs = np.exp(fwd.grid.log_probs)
            dlogits = nn.softmax_backward(dlog_probs, probs).astype(self.dtype)
        if draw is not None:
            draw = {k: v.astype(self.dtype) for k, v in draw.items()}
        dcontext = self.heads.backward(self.params, grads, fwd.context, dlogits, draw)
        c_src, c_tgt, c_ctx = fwd.caches
        dhs, dht = self.context.backward(self.params, grads, dcontext, c_ctx)
        self.tgt_encoder.backward(self.params, grads, dht, c_tgt)
        self.src_encoder.backward(self.params, grads, dhs, c_src)
        return grads
