"""Independent reference implementations used by the tests."""
from __future__ import annotations

import itertools

import numpy as np

from streamfcl import ndcore as nd
from streamfcl.data import UnlabeledSample
from streamfcl.ndcore import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, stride, pad):
    """Direct loops over output positions; x is [B,H,W,C], w is [kh,kw,C,O]."""
    b, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    xp = np.zeros((b, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, ho, wo, o))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                patch = xp[n, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for q in range(o):
                    out[n, i, j, q] = np.sum(patch * w[:, :, :, q])
    return out


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(loss_fn, params: dict, num_coords: int = 100, h: float = 1e-5, seed: int = 0):
    """Compare tape gradients with central differences on random coordinates.

    ``loss_fn()`` must build and return a scalar Tensor; it is called inside a
    fresh tape for the analytic pass and outside any tape for the numeric one.
    Returns the list of relative errors.
    """
    for p in params.values():
        p.grad = None
    with nd.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: np.array(p.grad) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[k].data.size for k in names], dtype=float)
    errors = []
    for _ in range(num_coords):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[k]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = p.data[idx]
        p.data[idx] = old + h
        up = float(loss_fn().data)
        p.data[idx] = old - h
        down = float(loss_fn().data)
        p.data[idx] = old
        numeric = (up - down) / (2 * h)
        errors.append(relative_error(float(analytic[k][idx]), numeric))
    return errors


def brute_force_topn(scores, is_resident, ages, ids, n):
    """Best n-subset by exhaustive enumeration under the (score, resident, age, id) order."""
    items = list(range(len(scores)))
    if len(items) <= n:
        return set(items)

    def rank_key(i):
        return (scores[i], 1 if is_resident[i] else 0, ages[i], -ids[i])

    best = None
    for combo in itertools.combinations(items, n):
        key = sorted((rank_key(i) for i in combo), reverse=True)
        if best is None or key > best[0]:
            best = (key, set(combo))
    return best[1]


def max_min_distance_subsets(points, k):
    """All k-subsets that maximize the minimum pairwise distance."""
    best, winners = -1.0, []
    for combo in itertools.combinations(range(len(points)), k):
        d = min(np.linalg.norm(points[i] - points[j]) for i, j in itertools.combinations(combo, 2))
        if d > best + 1e-12:
            best, winners = d, [set(combo)]
        elif abs(d - best) <= 1e-12:
            winners.append(set(combo))
    return winners


class TableModel:
    """Scoring stand-in: a sample's score is looked up by the id stored in its first pixel.

    Online outputs are fixed at ``[1, 0]`` and target outputs sit at the angle
    whose cosine is ``1 - score``, so the importance score reproduces the table.
    """

    dtype = np.dtype(np.float64)

    def __init__(self, table=None):
        self.table = dict(table or {})
        self.calls: list[int] = []

    def forward_online(self, px):
        return Tensor(np.tile([1.0, 0.0], (len(px), 1)))

    def forward_target(self, px):
        ids = px.reshape(len(px), -1)[:, 0].astype(int)
        self.calls.extend(ids.tolist())
        c = np.array([1.0 - self.table[i] for i in ids])
        return Tensor(np.stack([c, np.sqrt(np.maximum(0.0, 1.0 - c * c))], axis=1))

    def encode(self, px):
        return Tensor(px.reshape(len(px), -1)[:, 1:])


def item(i, *feat):
    """A one-column image holding the id followed by optional feature values."""
    return UnlabeledSample(i, np.array([float(i), *feat]).reshape(1, -1, 1))
