"""Independent reference computations used by the tests.

Everything here is deliberately naive: explicit enumeration of every monotone
edit script, central finite differences, direct confusion-matrix counting.
"""

import itertools
import math

import numpy as np


def enumerate_scripts(n, m):
    """All monotone edit scripts from (0, 0) to (n, m) as lists of (kind, i, j)."""
    if n == 0 and m == 0:
        return [[]]
    out = []
    if m > 0:
        out += [s + [("ins", n, m)] for s in enumerate_scripts(n, m - 1)]
    if n > 0:
        out += [s + [("del", n, m)] for s in enumerate_scripts(n - 1, m)]
    if n > 0 and m > 0:
        out += [s + [("sub", n, m)] for s in enumerate_scripts(n - 1, m - 1)]
    return out


def script_logp(script, delete, insert, subst):
    tables = {"del": delete, "ins": insert, "sub": subst}
    return sum(tables[k][i, j] for k, i, j in script)


def brute_force(delete, insert, subst, n, m):
    """log alpha[n, m], best script log-score and edge posteriors by enumeration."""
    scripts = enumerate_scripts(n, m)
    logps = np.array([script_logp(s, delete, insert, subst) for s in scripts])
    log_z = np.logaddexp.reduce(logps)
    best = int(np.argmax(logps))
    post = np.zeros(delete.shape + (3,))
    index = {"del": 0, "ins": 1, "sub": 2}
    for s, lp in zip(scripts, logps):
        w = math.exp(lp - log_z)
        for k, i, j in s:
            post[i, j, index[k]] += w
    return log_z, logps[best], scripts[best], post


def prefix_alpha(delete, insert, subst, n, m):
    """Full alpha table by enumerating scripts to every prefix pair."""
    alpha = np.full((n + 1, m + 1), -np.inf)
    for i in range(n + 1):
        for j in range(m + 1):
            scripts = enumerate_scripts(i, j)
            alpha[i, j] = np.logaddexp.reduce([script_logp(s, delete, insert, subst) for s in scripts])
    return alpha


def expected_distribution(post):
    """Per-cell normalised posterior usage of entering operations (EM target)."""
    total = post.sum(axis=-1, keepdims=True)
    return np.where(total > 0, post / np.where(total > 0, total, 1.0), 0.0)


def random_edges(rng, n, m, extra_classes=1, scale=1.5):
    """Per-cell log-softmax over del/ins/sub plus extra classes; returns 3 tables."""
    logits = rng.normal(scale=scale, size=(n + 1, m + 1, 3 + extra_classes))
    logp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
    return logp[..., 0], logp[..., 1], logp[..., 2]


def finite_difference(f, x, index, h=1e-5):
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def f1_by_counting(pred, gold):
    tp = sum(1 for p, g in zip(pred, gold) if p and g)
    fp = sum(1 for p, g in zip(pred, gold) if p and not g)
    fn = sum(1 for p, g in zip(pred, gold) if not p and g)
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def all_strings(alphabet, max_len):
    for length in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=length)
