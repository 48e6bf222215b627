"""Small neural-network layers with hand-written backward passes.

Parameters live in a flat ``dict[str, np.ndarray]`` shared by the whole
model; every layer knows its own parameter names. ``forward`` returns the
output together with whatever the matching ``backward`` needs, and
``backward`` adds parameter gradients into a ``grads`` dict of the same
layout and returns the gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def log_softmax(logits, axis=-1):
    top = np.max(logits, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_backward(dlogp, probs, axis=-1):
    """Gradient w.r.t. logits given the gradient w.r.t. log-softmax outputs."""
    return dlogp - probs * dlogp.sum(axis=axis, keepdims=True)


class Linear:
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.w, self.b = f"{name}.weight", f"{name}.bias"

    def init(self, params, rng, dtype):
        params[self.w] = uniform_init(rng, (self.n_out, self.n_in), self.n_in, dtype)
        params[self.b] = np.zeros(self.n_out, dtype=dtype)

    def forward(self, params, x):
        return x @ params[self.w].T + params[self.b], x

    def backward(self, params, grads, dy, x):
        grads[self.w] += _flat(dy).T @ _flat(x)
        grads[self.b] += _flat(dy).sum(axis=0)
        return dy @ params[self.w]


class Embedding:
    def __init__(self, name, n_symbols, dim):
        self.name, self.n_symbols, self.dim = name, n_symbols, dim

    def init(self, params, rng, dtype):
        params[self.name] = rng.normal(0.0, 0.02, size=(self.n_symbols, self.dim)).astype(dtype)

    def forward(self, params, ids):
        return params[self.name][ids], ids

    def backward(self, params, grads, dy, ids):
        np.add.at(grads[self.name], ids.ravel(), _flat(dy))


class LayerNorm:
    def __init__(self, name, dim):
        self.name, self.dim = name, dim
        self.g, self.b = f"{name}.gain", f"{name}.bias"

    def init(self, params, rng, dtype):
        params[self.g] = np.ones(self.dim, dtype=dtype)
        params[self.b] = np.zeros(self.dim, dtype=dtype)

    def forward(self, params, x):
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
        xhat = (x - mu) * inv
        return xhat * params[self.g] + params[self.b], (xhat, inv)

    def backward(self, params, grads, dy, cache):
        xhat, inv = cache
        grads[self.g] += _flat(dy * xhat).sum(axis=0)
        grads[self.b] += _flat(dy).sum(axis=0)
        dxhat = dy * params[self.g]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class Conv1d:
    """Same-length 1-D convolution; ``causal`` windows end at the current position."""

    def __init__(self, name, n_in, n_out, width, causal=False):
        self.name, self.n_in, self.n_out, self.width, self.causal = name, n_in, n_out, width, causal
        self.w, self.b = f"{name}.weight", f"{name}.bias"
        self.left = width - 1 if causal else width // 2

    def init(self, params, rng, dtype):
        params[self.w] = uniform_init(rng, (self.n_out, self.width, self.n_in), self.width * self.n_in, dtype)
        params[self.b] = np.zeros(self.n_out, dtype=dtype)

    def forward(self, params, x):
        batch, length, _ = x.shape
        padded = np.pad(x, ((0, 0), (self.left, self.width - 1 - self.left), (0, 0)))
        cols = np.stack([padded[:, k:k + length] for k in range(self.width)], axis=2)
        cols = cols.reshape(batch, length, self.width * self.n_in)
        w = params[self.w].reshape(self.n_out, -1)
        return cols @ w.T + params[self.b], cols

    def backward(self, params, grads, dy, cols):
        batch, length, _ = dy.shape
        w = params[self.w].reshape(self.n_out, -1)
        grads[self.w] += (_flat(dy).T @ _flat(cols)).reshape(params[self.w].shape)
        grads[self.b] += _flat(dy).sum(axis=0)
        dcols = (dy @ w).reshape(batch, length, self.width, self.n_in)
        dpadded = np.zeros((batch, length + self.width - 1, self.n_in), dtype=dy.dtype)
        for k in range(self.width):
            dpadded[:, k:k + length] += dcols[:, :, k]
        return dpadded[:, self.left:self.left + length]


class GRU:
    """Single-direction gated recurrent layer over a padded batch.

    r = sigmoid(W_ir x + U_r h), z = sigmoid(W_iz x + U_z h),
    n = tanh(W_in x + r * (U_n h + b_hn)), h' = (1 - z) * n + z * h.
    Padded steps (mask 0) carry the state through unchanged, so a reversed
    layer starts from a zero state at each sequence's own last symbol.
    """

    def __init__(self, name, n_in, hidden, reverse=False):
        self.name, self.n_in, self.hidden, self.reverse = name, n_in, hidden, reverse
        self.w_ih, self.w_hh = f"{name}.w_ih", f"{name}.w_hh"
        self.b_ih, self.b_hh = f"{name}.b_ih", f"{name}.b_hh"

    def init(self, params, rng, dtype):
        h = self.hidden
        params[self.w_ih] = uniform_init(rng, (3 * h, self.n_in), h, dtype)
        params[self.w_hh] = uniform_init(rng, (3 * h, h), h, dtype)
        params[self.b_ih] = np.zeros(3 * h, dtype=dtype)
        params[self.b_hh] = np.zeros(3 * h, dtype=dtype)

    def forward(self, params, x, mask):
        batch, length, _ = x.shape
        h_dim = self.hidden
        xp = x @ params[self.w_ih].T + params[self.b_ih]
        w_hh, b_hh = params[self.w_hh], params[self.b_hh]
        h = np.zeros((batch, h_dim), dtype=x.dtype)
        out = np.zeros((batch, length, h_dim), dtype=x.dtype)
        steps = []
        order = range(length - 1, -1, -1) if self.reverse else range(length)
        for t in order:
            hp = h @ w_hh.T + b_hh
            r = sigmoid(xp[:, t, :h_dim] + hp[:, :h_dim])
            z = sigmoid(xp[:, t, h_dim:2 * h_dim] + hp[:, h_dim:2 * h_dim])
            n = np.tanh(xp[:, t, 2 * h_dim:] + r * hp[:, 2 * h_dim:])
            m = mask[:, t, None]
            h_new = (1 - z) * n + z * h
            steps.append((t, h, r, z, n, hp[:, 2 * h_dim:]))
            h = m * h_new + (1 - m) * h
            out[:, t] = h
        return out, (x, mask, steps)

    def backward(self, params, grads, dout, cache):
        x, mask, steps = cache
        h_dim = self.hidden
        w_hh = params[self.w_hh]
        dxp = np.zeros(x.shape[:2] + (3 * h_dim,), dtype=dout.dtype)
        dh = np.zeros((x.shape[0], h_dim), dtype=dout.dtype)
        dw_hh = np.zeros_like(w_hh)
        db_hh = np.zeros(3 * h_dim, dtype=dout.dtype)
        for t, h_prev, r, z, n, hpn in reversed(steps):
            dh = dh + dout[:, t]
            m = mask[:, t, None]
            dh_new = m * dh
            dh_prev = (1 - m) * dh + dh_new * z
            dn = dh_new * (1 - z)
            dz = dh_new * (h_prev - n)
            da_n = dn * (1 - n * n)
            dr = da_n * hpn
            da_r = dr * r * (1 - r)
            da_z = dz * z * (1 - z)
            dhp = np.concatenate([da_r, da_z, da_n * r], axis=1)
            dxp[:, t] = np.concatenate([da_r, da_z, da_n], axis=1)
            dw_hh += dhp.T @ h_prev
            db_hh += dhp.sum(axis=0)
            dh = dh_prev + dhp @ w_hh
        grads[self.w_hh] += dw_hh
        grads[self.b_hh] += db_hh
        grads[self.w_ih] += _flat(dxp).T @ _flat(x)
        grads[self.b_ih] += _flat(dxp).sum(axis=0)
        return dxp @ params[self.w_ih]


class MultiHeadAttention:
    """Scaled dot-product attention of queries over a padded key/value sequence."""

    def __init__(self, name, d_query, d_kv, heads, head_dim, d_out):
        self.name, self.heads, self.head_dim = name, heads, head_dim
        inner = heads * head_dim
        self.q = Linear(f"{name}.query", d_query, inner)
        self.k = Linear(f"{name}.key", d_kv, inner)
        self.v = Linear(f"{name}.value", d_kv, inner)
        self.o = Linear(f"{name}.output", inner, d_out)

    def init(self, params, rng, dtype):
        for layer in (self.q, self.k, self.v, self.o):
            layer.init(params, rng, dtype)

    def _split(self, x):
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        batch, heads, length, dim = x.shape
        return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * dim)

    def forward(self, params, query, kv, kv_mask):
        q, cq = self.q.forward(params, query)
        k, ck = self.k.forward(params, kv)
        v, cv = self.v.forward(params, kv)
        q, k, v = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(kv_mask[:, None, None, :], scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        mixed = self._merge(att @ v)
        out, co = self.o.forward(params, mixed)
        return out, (cq, ck, cv, co, q, k, v, att, scale)

    def backward(self, params, grads, dout, cache):
        cq, ck, cv, co, q, k, v, att, scale = cache
        dmixed = self._split(self.o.backward(params, grads, dout, co))
        datt = dmixed @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dmixed
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dquery = self.q.backward(params, grads, self._merge(dq), cq)
        dkv = self.k.backward(params, grads, self._merge(dk), ck)
        dkv = dkv + self.v.backward(params, grads, self._merge(dv), cv)
        return dquery, dkv
