"""Independent reference computations used by the tests.

Everything here is written from the defining formulas with plain Python
loops so it shares no code path with the package.
"""
import math

import numpy as np


def symmetric_gradient(p, dt=1):
    n = len(p)
    out = []
    for t in range(n):
        if t - dt >= 0 and t + dt < n:
            out.append((p[t + dt] - p[t - dt]) / (2 * dt))
        elif t - dt < 0:
            out.append((p[t + dt] - p[t]) / dt)
        else:
            out.append((p[t] - p[t - dt]) / dt)
    return out


def hawkes(events, mu, alpha, beta, t):
    return mu + sum(alpha * math.exp(-beta * (t - ti)) for ti in events if ti < t)


def iou(a, b):
    sa = set(range(a[0], a[1] + 1))
    sb = set(range(b[0], b[1] + 1))
    return len(sa & sb) / len(sa | sb)


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def gini(counts):
    tot = sum(counts)
    return 1.0 - sum((c / tot) ** 2 for c in counts)


def huber(r, delta=1.0):
    return 0.5 * r * r if abs(r) <= delta else delta * (abs(r) - 0.5 * delta)


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def reward(r2, mae, f1, t):
    return 0.4 * r2 + 0.2 * (1 - mae / 500) + 0.3 * f1 + 0.1 * (1 - t / 3600)


def ucb(q, n_i, n, c):
    return q + c * math.sqrt(math.log(n) / n_i)


def greedy_match(pred_onsets, act_onsets, tol):
    """Brute force: repeatedly take the globally closest unmatched pair."""
    pred, act = list(enumerate(pred_onsets)), list(enumerate(act_onsets))
    pairs = []
    while True:
        best = None
        for i, p in pred:
            for j, a in act:
                d = abs(p - a)
                if d <= tol and (best is None or (d, p, a) < best[0]):
                    best = ((d, p, a), i, j)
        if best is None:
            return sorted(pairs)
        _, i, j = best
        pairs.append((i, j))
        pred = [(k, v) for k, v in pred if k != i]
        act = [(k, v) for k, v in act if k != j]


def runs_merged(mask, gap_min, d_min):
    runs, start = [], None
    for i, m in enumerate(list(mask) + [False]):
        if m and start is None:
            start = i
        if not m and start is not None:
            runs.append([start, i - 1])
            start = None
    merged = []
    for r in runs:
        if merged and r[0] - merged[-1][1] - 1 < gap_min:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    return [tuple(r) for r in merged if r[1] - r[0] + 1 >= d_min]


def planted_bandit_problem(seed, n=1500, n_features=200, n_informative=10, horizons=4):
    """Features with a planted linear signal in ``n_informative`` columns."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n_features))
    cats = ["RBA", "DWT", "weather", "power", "temporal", "nonlinear"]
    categories = [cats[i % 6] for i in range(n_features)]
    informative = rng.choice(n_features, n_informative, replace=False)
    Y = np.column_stack([
        (X[:, informative] @ rng.uniform(0.5, 1.5, n_informative) + rng.normal(0, 1.0, n) > 0).astype(int)
        for _ in range(horizons)
    ])
    return X, Y, categories, set(int(i) for i in informative)


def r2(pred, actual):
    pred, actual = np.asarray(pred, float), np.asarray(actual, float)
    return 1 - np.sum((pred - actual) ** 2) / np.sum((actual - actual.mean()) ** 2)
