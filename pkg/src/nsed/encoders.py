"""Symbol encoders, symbol-pair contexts and the per-cell operation heads.

Row layout used throughout:

* a source of length n is encoded from ``s_1 .. s_n </s>``; row ``a`` of
  ``h^s`` represents ``s_{a+1}`` and row ``n`` is the end sentinel;
* a non-causal target (matching) is laid out the same way;
* a causal target (transduction) is encoded from ``<s> t_1 .. t_m``, so row
  ``b`` represents ``t_b`` and sees nothing to its right.

``c[a, b] = f(h^s[a], h^t[b])``. The operation entering cell (i, j) reads the
context one step back along its own edge, so deletion at (i, j) uses
``c[i-1, j]``, insertion ``c[i, j-1]`` and substitution ``c[i-1, j-1]``.
Contexts outside the grid are zero vectors, which leaves only the head bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, LengthError, VocabularyError

KINDS = ("unigram", "cnn", "rnn")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "rnn"
    embed_dim: int = 256
    hidden_dim: int = 256
    layers: int | None = None
    kernel_width: int = 3
    heads: int = 4
    head_dim: int | None = None
    max_positions: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"encoder must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if self.layers is None:
            object.__setattr__(self, "layers", 2 if self.kind == "rnn" else 1)
        if self.head_dim is None:
            object.__setattr__(self, "head_dim", max(1, self.embed_dim // max(self.heads, 1)))
        for key in ("embed_dim", "hidden_dim", "layers", "kernel_width", "heads", "head_dim", "max_positions"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.kernel_width % 2 == 0:
            raise ConfigError("kernel_width must be odd")
        if self.kind == "rnn" and self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even for a bidirectional rnn")

    def output_dim(self) -> int:
        return self.hidden_dim if self.kind == "rnn" else self.embed_dim


class SequenceEncoder:
    """Maps padded symbol ids ``(B, L)`` to representations ``(B, L, out)``."""

    def __init__(self, name: str, config: EncoderConfig, n_symbols: int, causal: bool = False):
        self.name, self.config, self.n_symbols, self.causal = name, config, n_symbols, causal
        d = config.embed_dim
        self.embed = nn.Embedding(f"{name}.embed", n_symbols, d)
        self.position = nn.Embedding(f"{name}.position", config.max_positions, d) if config.kind != "rnn" else None
        self.blocks = []
        if config.kind == "cnn":
            for k in range(config.layers):
                self.blocks.append((nn.Conv1d(f"{name}.conv{k}", d, d, config.kernel_width, causal=causal),
                                    nn.LayerNorm(f"{name}.norm{k}", d)))
        elif config.kind == "rnn":
            width = config.hidden_dim
            n_in = d
            for k in range(config.layers):
                if causal:
                    cells = [nn.GRU(f"{name}.gru{k}", n_in, width)]
                else:
                    cells = [nn.GRU(f"{name}.gru{k}.fwd", n_in, width // 2),
                             nn.GRU(f"{name}.gru{k}.bwd", n_in, width // 2, reverse=True)]
                self.blocks.append((cells, nn.LayerNorm(f"{name}.norm{k}", width), n_in == width))
                n_in = width

    @property
    def out_dim(self) -> int:
        return self.config.output_dim()

    def init(self, params, rng, dtype):
        self.embed.init(params, rng, dtype)
        if self.position is not None:
            self.position.init(params, rng, dtype)
        for block in self.blocks:
            if self.config.kind == "cnn":
                block[0].init(params, rng, dtype)
                block[1].init(params, rng, dtype)
            else:
                for cell in block[0]:
                    cell.init(params, rng, dtype)
                block[1].init(params, rng, dtype)

    def check(self, ids):
        if ids.shape[1] > self.config.max_positions:
            raise LengthError(f"sequence of {ids.shape[1]} positions exceeds max_positions={self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_symbols):
            raise VocabularyError(f"symbol index outside vocabulary of {self.n_symbols} for {self.name}")

    def forward(self, params, ids, lengths):
        """``lengths`` counts the valid positions of each row of ``ids``."""
        ids = np.asarray(ids)
        self.check(ids)
        batch, length = ids.shape
        mask = (np.arange(length)[None, :] < np.asarray(lengths)[:, None])
        dtype = params[self.embed.name].dtype
        fmask = mask.astype(dtype)[..., None]
        x, _ = self.embed.forward(params, ids)
        positions = np.broadcast_to(np.arange(length), ids.shape)
        if self.position is not None:
            x = x + self.position.forward(params, positions)[0]
        caches = []
        for block in self.blocks:
            if self.config.kind == "cnn":
                conv, norm = block
                pre, c_conv = conv.forward(params, x * fmask)
                y, c_norm = norm.forward(params, x + nn.relu(pre))
                caches.append((pre, c_conv, c_norm))
            else:
                cells, norm, residual = block
                outs, c_cells = [], []
                for cell in cells:
                    out, c = cell.forward(params, x, fmask[..., 0])
                    outs.append(out)
                    c_cells.append(c)
                h = np.concatenate(outs, axis=-1) if len(outs) > 1 else outs[0]
                y, c_norm = norm.forward(params, x + h if residual else h)
                caches.append((c_cells, c_norm))
            x = y
        return x, (ids, positions, fmask, caches)

    def backward(self, params, grads, dy, cache):
        ids, positions, fmask, caches = cache
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            if self.config.kind == "cnn":
                conv, norm = block
                pre, c_conv, c_norm = c
                dsum = norm.backward(params, grads, dy, c_norm)
                dy = dsum + conv.backward(params, grads, nn.relu_backward(dsum, pre), c_conv) * fmask
            else:
                cells, norm, residual = block
                c_cells, c_norm = c
                dsum = norm.backward(params, grads, dy, c_norm)
                dx = dsum.copy() if residual else np.zeros(dsum.shape[:-1] + (cells[0].n_in,), dtype=dsum.dtype)
                offset = 0
                for cell, cc in zip(cells, c_cells):
                    width = cell.hidden
                    dx += cell.backward(params, grads, dsum[..., offset:offset + width], cc)
                    offset += width
                dy = dx
        self.embed.backward(params, grads, dy, ids)
        if self.position is not None:
            self.position.backward(params, grads, dy, positions)


class PairContext:
    """``c[a, b] = LN(ReLU(W_s h^s_a + W_t h^t_b + b))``, optionally followed by
    multi-head attention of ``h^t_b`` over the whole source."""

    def __init__(self, name, d_src, d_tgt, dim, attention=False, heads=4, head_dim=64):
        self.name, self.d_src, self.d_tgt, self.dim = name, d_src, d_tgt, dim
        self.w, self.b = f"{name}.proj.weight", f"{name}.proj.bias"
        self.norm = nn.LayerNorm(f"{name}.norm", dim)
        self.attention = nn.MultiHeadAttention("att", d_tgt, d_src, heads, head_dim, dim) if attention else None

    @property
    def out_dim(self) -> int:
        return 2 * self.dim if self.attention is not None else self.dim

    def init(self, params, rng, dtype):
        fan_in = self.d_src + self.d_tgt
        params[self.w] = nn.uniform_init(rng, (self.dim, fan_in), fan_in, dtype)
        params[self.b] = np.zeros(self.dim, dtype=dtype)
        self.norm.init(params, rng, dtype)
        if self.attention is not None:
            self.attention.init(params, rng, dtype)

    def forward(self, params, hs, ht, src_mask):
        w = params[self.w]
        a = hs @ w[:, :self.d_src].T
        t = ht @ w[:, self.d_src:].T + params[self.b]
        pre = a[:, :, None, :] + t[:, None, :, :]
        out, c_norm = self.norm.forward(params, nn.relu(pre))
        c_att = None
        if self.attention is not None:
            att, c_att = self.attention.forward(params, ht, hs, src_mask)
            att = np.broadcast_to(att[:, None], out.shape)
            out = np.concatenate([out, att], axis=-1)
        return out, (hs, ht, pre, c_norm, c_att)

    def backward(self, params, grads, dc, cache):
        hs, ht, pre, c_norm, c_att = cache
        dim = self.dim
        dpre = nn.relu_backward(self.norm.backward(params, grads, dc[..., :dim], c_norm), pre)
        da = dpre.sum(axis=2)
        dt = dpre.sum(axis=1)
        w = params[self.w]
        grads[self.w][:, :self.d_src] += da.reshape(-1, dim).T @ hs.reshape(-1, self.d_src)
        grads[self.w][:, self.d_src:] += dt.reshape(-1, dim).T @ ht.reshape(-1, self.d_tgt)
        grads[self.b] += dt.reshape(-1, dim).sum(axis=0)
        dhs = da @ w[:, :self.d_src]
        dht = dt @ w[:, self.d_src:]
        if self.attention is not None:
            dq, dkv = self.attention.backward(params, grads, dc[..., dim:].sum(axis=1), c_att)
            dht = dht + dq
            dhs = dhs + dkv
        return dhs, dht


# how far back along each axis an operation's context lies
SHIFTS = {"del": (1, 0), "ins": (0, 1), "subs": (1, 1), "nonmatch": (1, 1)}


def _shift(y, di, dj):
    """``out[:, i, j] = y[:, i - di, j - dj]`` with zeros where that is outside."""
    out = np.zeros_like(y)
    rows, cols = y.shape[1], y.shape[2]
    out[:, di:, dj:] = y[:, :rows - di, :cols - dj]
    return out


def _unshift(dz, di, dj):
    out = np.zeros_like(dz)
    rows, cols = dz.shape[1], dz.shape[2]
    out[:, :rows - di, :cols - dj] = dz[:, di:, dj:]
    return out


class OperationHeads:
    """Linear projections from contexts to the operation logits of every cell."""

    def __init__(self, ctx_dim, sizes):
        self.ctx_dim = ctx_dim
        self.sizes = dict(sizes)
        self.layers = {op: nn.Linear(f"head.{op}", ctx_dim, k) for op, k in self.sizes.items()}

    @property
    def n_classes(self) -> int:
        return sum(self.sizes.values())

    def offsets(self) -> dict:
        out, start = {}, 0
        for op, k in self.sizes.items():
            out[op] = start
            start += k
        return out

    def init(self, params, rng, dtype):
        for layer in self.layers.values():
            layer.init(params, rng, dtype)

    def raw(self, params, context, ops=None):
        """Unshifted head outputs ``{op: (B, R, C, k)}``."""
        ops = self.sizes if ops is None else ops
        return {op: context @ params[self.layers[op].w].T + params[self.layers[op].b] for op in ops}

    def grid_logits(self, params, context, raw=None):
        """Concatenated logits ``(B, R, C, K)`` for the operation entering each cell."""
        if raw is None:
            raw = self.raw(params, context)
        parts = []
        for op, y in raw.items():
            di, dj = SHIFTS[op]
            b = params[self.layers[op].b]
            parts.append(_shift(y - b, di, dj) + b)
        return np.concatenate(parts, axis=-1)

    def backward(self, params, grads, context, dlogits=None, draw=None):
        """Gradient w.r.t. the context from grid-logit and/or raw-output gradients."""
        offsets = self.offsets()
        dcontext = np.zeros_like(context)
        flat_ctx = context.reshape(-1, self.ctx_dim)
        for op, k in self.sizes.items():
            layer = self.layers[op]
            dy = np.zeros(context.shape[:-1] + (k,), dtype=context.dtype)
            if dlogits is not None:
                dz = dlogits[..., offsets[op]:offsets[op] + k]
                grads[layer.b] += dz.reshape(-1, k).sum(axis=0)
                dy += _unshift(dz, *SHIFTS[op])
            if draw is not None and op in draw:
                dy += draw[op]
                grads[layer.b] += draw[op].reshape(-1, k).sum(axis=0)
            grads[layer.w] += dy.reshape(-1, k).T @ flat_ctx
            dcontext += dy @ params[layer.w]
        return dcontext
