"""Random forest of Gini decision trees, grown level-wise across all trees.

Features are pre-binned against candidate thresholds (midpoints between
distinct values, or quantile edges when a feature has many distinct values),
so the best split of every open node in every tree is found from weighted
class histograms built with one ``bincount`` per sampled feature slot.
Bootstrap resampling is represented as per-tree integer row counts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..rba import Event, EventKind, EventSet
from ..rba import _runs


class EmptyNode(ValueError):
    pass


class SingleClass(ValueError):
    pass


class NaNInput(ValueError):
    pass


class UntrainedModel(RuntimeError):
    pass


def gini(class_counts) -> float:
    """1 - sum p_k^2 for non-negative (possibly weighted) class counts."""
    c = np.asarray(class_counts, dtype=float)
    if np.any(c < 0):
        raise ValueError("class counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise EmptyNode("no samples in node")
    p = c / total
    return float(1.0 - np.dot(p, p))


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_samples_leaf: int = 1
    max_features: str | float | int = "sqrt"  # per split
    bootstrap: bool = True
    class_weight: str | None = "balanced"
    max_bins: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def n_split_features(self, n_features: int) -> int:
        m = self.max_features
        if m == "sqrt":
            k = int(np.ceil(np.sqrt(n_features)))
        elif m in (None, "all"):
            k = n_features
        elif isinstance(m, float):
            k = int(np.ceil(m * n_features))
        else:
            k = int(m)
        return max(1, min(k, n_features))


@dataclass(frozen=True)
class TwoStageConfig:
    """Hyperparameters of the detection/type forest pair."""
    n_trees_detection: int = 100
    max_depth_detection: int = 10
    n_trees_type: int = 50
    max_depth_type: int = 8
    min_samples_leaf: int = 2
    feature_subsample: str | float = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def detection(self) -> ForestConfig:
        return ForestConfig(self.n_trees_detection, self.max_depth_detection, self.min_samples_leaf,
                            self.feature_subsample, self.bootstrap, "balanced", seed=self.seed)

    def type(self) -> ForestConfig:
        return ForestConfig(self.n_trees_type, self.max_depth_type, self.min_samples_leaf,
                            self.feature_subsample, self.bootstrap, "balanced", seed=self.seed + 1)


@dataclass
class Forest:
    classes: np.ndarray
    n_features: int
    roots: np.ndarray  # node index of each tree root
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # node x classes, weighted class frequencies (rows sum to 1)
    counts: np.ndarray  # node x classes, raw (bootstrap) sample counts
    importances: np.ndarray
    max_depth: int
    config: dict

    VERSION = 1

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def to_json(self) -> str:
        return json.dumps({
            "version": self.VERSION,
            "classes": self.classes.tolist(),
            "n_features": self.n_features,
            "roots": self.roots.tolist(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "counts": self.counts.tolist(),
            "importances": self.importances.tolist(),
            "max_depth": self.max_depth,
            "config": self.config,
        })

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        d = json.loads(text)
        if d.get("version") != cls.VERSION:
            raise ValueError(f"unsupported forest version {d.get('version')}")
        return cls(np.asarray(d["classes"]), d["n_features"], np.asarray(d["roots"], dtype=np.int64),
                   np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=float), np.asarray(d["counts"], dtype=float),
                   np.asarray(d["importances"], dtype=float), d["max_depth"], d["config"])


def _candidate_thresholds(col: np.ndarray, max_bins: int) -> np.ndarray:
    u = np.unique(col)
    if len(u) <= 1:
        return np.empty(0)
    if len(u) <= max_bins:
        return (u[:-1] + u[1:]) / 2.0
    q = np.quantile(col, np.arange(1, max_bins) / max_bins, method="lower")
    q = np.unique(q)
    return q[q < u[-1]]


def _bin(X: np.ndarray, max_bins: int):
    edges = [_candidate_thresholds(X[:, j], max_bins) for j in range(X.shape[1])]
    width = max(1, max(len(e) for e in edges) + 1)
    Xb = np.empty(X.shape, dtype=np.int32)
    for j, e in enumerate(edges):
        # bin b means "x <= edges[b]" first holds at b; x <= edges[k] iff bin <= k
        Xb[:, j] = np.searchsorted(e, X[:, j], side="left")
    return Xb, edges, width


def _class_weights(y_idx: np.ndarray, k: int, mode) -> np.ndarray:
    if mode != "balanced":
        return np.ones(k)
    counts = np.bincount(y_idx, minlength=k).astype(float)
    w = np.zeros(k)
    nz = counts > 0
    w[nz] = len(y_idx) / (k * counts[nz])
    return w


def _gini_rows(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tot = h.sum(axis=-1)
    safe = np.where(tot > 0, tot, 1.0)
    p = h / safe[..., None]
    return 1.0 - np.sum(p * p, axis=-1), tot


def _sample_features(rng, n_rows: int, n_feat: int, m: int) -> np.ndarray:
    """m distinct feature indices per row."""
    if 4 * m >= n_feat:
        return np.argsort(rng.random((n_rows, n_feat)), axis=1, kind="stable")[:, :m]
    out = rng.integers(0, n_feat, size=(n_rows, m))
    while True:
        srt = np.sort(out, axis=1)
        dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
        if len(dup) == 0:
            return out
        out[dup] = rng.integers(0, n_feat, size=(len(dup), m))


def fit_forest(features, labels, config: ForestConfig | None = None, counts=None) -> Forest:
    """Grow ``config.n_trees`` trees on ``features`` (N x F) and ``labels``.

    ``counts`` (n_trees x N) overrides the bootstrap draw; row ``i`` of tree
    ``b`` is used ``counts[b, i]`` times.
    """
    cfg = config or ForestConfig()
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise NaNInput("features contain NaN or Inf")
    y_raw = np.asarray(labels)
    if len(y_raw) != len(X):
        raise ValueError("features and labels differ in length")
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise SingleClass("need at least two classes to fit")
    n, n_feat = X.shape
    K = len(classes)
    T = cfg.n_trees
    rng = np.random.default_rng(cfg.seed)
    if counts is None:
        if cfg.bootstrap:
            counts = rng.multinomial(n, np.full(n, 1.0 / n), size=T)
        else:
            counts = np.ones((T, n), dtype=np.int64)
    counts = np.asarray(counts)
    if counts.shape != (T, n):
        raise ValueError("bootstrap counts must be n_trees x n_rows")

    Xb, edges, width = _bin(X, cfg.max_bins)
    cw = _class_weights(y, K, cfg.class_weight)
    m = cfg.n_split_features(n_feat)

    # one entry per (tree, row) with a non-zero count
    tree_of, row_of = np.nonzero(counts)
    cnt = counts[tree_of, row_of].astype(float)
    wts = cnt * cw[y[row_of]]
    y_of = y[row_of]

    feature, threshold, left, right, value, leafc = [], [], [], [], [], []
    node_of = tree_of.copy()  # roots are nodes 0..T-1
    for _ in range(T):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
    open_nodes = np.arange(T)
    n_nodes = T
    importance = np.zeros((T, n_feat))
    node_tree = list(range(T))
    node_hist = np.zeros((T, K))
    node_cnt = np.zeros((T, K))
    np.add.at(node_hist, (node_of, y_of), wts)
    np.add.at(node_cnt, (node_of, y_of), cnt)
    hist_all = [node_hist]
    cnt_all = [node_cnt]

    n_edges = np.array([len(e) for e in edges])
    for depth in range(cfg.max_depth):
        if len(open_nodes) == 0:
            break
        parent_h = np.concatenate(hist_all)[open_nodes]
        parent_c = np.concatenate(cnt_all)[open_nodes]
        g_parent, w_parent = _gini_rows(parent_h)
        n_parent = parent_c.sum(axis=1)
        # pure or too-small nodes stay leaves
        keep = (g_parent > 1e-12) & (n_parent >= 2 * cfg.min_samples_leaf)
        open_nodes = open_nodes[keep]
        if len(open_nodes) == 0:
            break
        parent_h, w_parent, n_parent = parent_h[keep], w_parent[keep], n_parent[keep]
        splittable = np.ones(len(open_nodes), dtype=bool)
        parent_score = np.sum(parent_h * parent_h, axis=1) / w_parent

        n_open = len(open_nodes)
        local = -np.ones(n_nodes, dtype=np.int64)
        local[open_nodes] = np.arange(n_open)
        sel = local[node_of] >= 0
        e_node = local[node_of[sel]]
        e_row, e_y, e_w, e_c = row_of[sel], y_of[sel], wts[sel], cnt[sel]

        slots = _sample_features(rng, n_open, n_feat, m)
        best_gain = np.full(n_open, -np.inf)
        best_feat = np.full(n_open, -1)
        best_bin = np.zeros(n_open, dtype=np.int64)
        size = n_open * width
        inner = np.arange(width - 1)[None, :]
        for j in range(m):
            b_e = Xb[e_row, slots[e_node, j]]
            cell = e_node * width + b_e
            H = np.bincount(cell * K + e_y, weights=e_w, minlength=size * K).reshape(n_open, width, K)
            C = np.bincount(cell, weights=e_c, minlength=size).reshape(n_open, width)
            HL = np.cumsum(H[:, :-1], axis=1)
            CL = np.cumsum(C[:, :-1], axis=1)
            HR = parent_h[:, None, :] - HL
            wl = HL.sum(axis=2)
            wr = w_parent[:, None] - wl
            # weighted Gini decrease = sum HL^2/wl + sum HR^2/wr - sum H^2/w
            score = (np.sum(HL * HL, axis=2) / np.where(wl > 0, wl, 1.0)
                     + np.sum(HR * HR, axis=2) / np.where(wr > 0, wr, 1.0))
            ok = (CL >= cfg.min_samples_leaf) & (n_parent[:, None] - CL >= cfg.min_samples_leaf)
            ok &= inner < n_edges[slots[:, j]][:, None]
            gain = np.where(ok, np.round(score - parent_score[:, None], 10), -np.inf)
            kbest = np.argmax(gain, axis=1)
            gbest = gain[np.arange(n_open), kbest]
            better = gbest > best_gain
            best_gain[better] = gbest[better]
            best_feat[better] = slots[better, j]
            best_bin[better] = kbest[better]

        do_split = splittable & (best_gain > 1e-12)
        split_idx = np.flatnonzero(do_split)
        if len(split_idx) == 0:
            break
        new_left = n_nodes + 2 * np.arange(len(split_idx))
        new_right = new_left + 1
        child_of = -np.ones((n_open, 2), dtype=np.int64)
        child_of[split_idx, 0] = new_left
        child_of[split_idx, 1] = new_right
        for s, l, r in zip(split_idx.tolist(), new_left.tolist(), new_right.tolist()):
            node = int(open_nodes[s])
            f = int(best_feat[s])
            feature[node] = f
            threshold[node] = float(edges[f][best_bin[s]])
            left[node], right[node] = l, r
            tree = node_tree[node]
            importance[tree, f] += best_gain[s]
            node_tree.extend([tree, tree])
            feature.extend([-1, -1])
            threshold.extend([0.0, 0.0])
            left.extend([-1, -1])
            right.extend([-1, -1])
        n_nodes += 2 * len(split_idx)

        # route entries of split nodes
        loc = local[node_of]
        moving = loc >= 0
        moving[moving] = do_split[loc[moving]]
        idx = np.flatnonzero(moving)
        ln = loc[idx]
        go_left = Xb[row_of[idx], best_feat[ln]] <= best_bin[ln]
        node_of[idx] = np.where(go_left, child_of[ln, 0], child_of[ln, 1])

        children = np.arange(n_nodes - 2 * len(split_idx), n_nodes)
        ch = np.zeros((len(children), K))
        cc = np.zeros((len(children), K))
        in_child = node_of >= children[0]
        np.add.at(ch, (node_of[in_child] - children[0], y_of[in_child]), wts[in_child])
        np.add.at(cc, (node_of[in_child] - children[0], y_of[in_child]), cnt[in_child])
        hist_all.append(ch)
        cnt_all.append(cc)
        open_nodes = children

    H_all = np.concatenate(hist_all)
    C_all = np.concatenate(cnt_all)
    tot = H_all.sum(axis=1, keepdims=True)
    value = np.divide(H_all, tot, out=np.full_like(H_all, 1.0 / K), where=tot > 0)
    sums = importance.sum(axis=1, keepdims=True)
    imp = np.divide(importance, sums, out=np.zeros_like(importance), where=sums > 0).mean(axis=0)
    return Forest(classes, n_feat, np.arange(T), np.asarray(feature, dtype=np.int64),
                  np.asarray(threshold), np.asarray(left, dtype=np.int64),
                  np.asarray(right, dtype=np.int64), value, C_all, imp, cfg.max_depth, asdict(cfg))


def predict_proba(forest: Forest | None, rows) -> np.ndarray:
    """Mean over trees of the leaf class frequencies; shape N x classes."""
    if forest is None:
        raise UntrainedModel("forest has not been fitted")
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise NaNInput("rows contain NaN or Inf")
    n = len(X)
    node = np.broadcast_to(forest.roots, (n, forest.n_trees)).copy()
    r = np.arange(n)[:, None]
    for _ in range(forest.max_depth):
        f = forest.feature[node]
        inner = f >= 0
        if not inner.any():
            break
        xv = X[r, np.where(inner, f, 0)]
        nxt = np.where(xv <= forest.threshold[node], forest.left[node], forest.right[node])
        node = np.where(inner, nxt, node)
    return forest.value[node].mean(axis=1)


def predict(forest: Forest, rows) -> np.ndarray:
    return forest.classes[np.argmax(predict_proba(forest, rows), axis=1)]


def feature_importance(forest: Forest) -> np.ndarray:
    return forest.importances.copy()


def merge_runs(mask, gap_min: int, d_min: int = 1) -> list[tuple[int, int]]:
    """Inclusive True-runs of ``mask``; runs separated by fewer than
    ``gap_min`` False samples are merged, then runs shorter than ``d_min``
    dropped."""
    merged: list[list[int]] = []
    for s, e in _runs(np.asarray(mask, dtype=bool)):
        if merged and s - merged[-1][1] - 1 < gap_min:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged if e - s + 1 >= d_min]


_CODE_KINDS = (EventKind.UP, EventKind.DOWN, EventKind.STATIONARY)


def _as_kind(v) -> EventKind:
    if isinstance(v, (str, EventKind)):
        return EventKind(v)
    return _CODE_KINDS[int(v)]


def events_from_runs(runs, kinds_per_row, values=None, band: str = "predicted",
                     length: int | None = None) -> EventSet:
    """Events from inclusive runs; each run's kind is the majority of
    ``kinds_per_row`` inside it (ties go to Up). ``values`` (a trajectory)
    supplies magnitudes when given."""
    kinds = [_as_kind(k) for k in kinds_per_row]
    out = []
    for s, e in runs:
        seg = kinds[s : e + 1]
        n_up, n_down = seg.count(EventKind.UP), seg.count(EventKind.DOWN)
        kind = EventKind.UP if n_up >= n_down else EventKind.DOWN
        direction = 1 if kind is EventKind.UP else -1
        mag = float(values[e] - values[s]) if values is not None else 0.0
        out.append(Event(kind, int(s), int(e), int(e - s + 1), mag, direction, 0.0, 1.0, band))
    return EventSet(out, band, length)


def two_stage_predict(forest_det: Forest | None, forest_type: Forest | None, rows,
                      tau_event: float = 0.5, gap_min: int = 3, d_min: int = 3,
                      values=None) -> EventSet:
    """Threshold stage-1 probabilities, assemble runs, type them by stage 2.

    Runs closer than ``gap_min`` are merged before the ``d_min`` filter.
    """
    if forest_det is None or forest_type is None:
        raise UntrainedModel("both stages must be fitted")
    if not 0.0 < tau_event < 1.0:
        raise ValueError("tau_event must lie in (0, 1)")
    X = np.asarray(rows, dtype=float)
    p = detection_probability(forest_det, X)
    runs = merge_runs(p >= tau_event, gap_min, d_min)
    kinds = np.full(len(X), EventKind.UP.value, dtype=object)
    if runs:
        idx = np.concatenate([np.arange(s, e + 1) for s, e in runs])
        kinds[idx] = [_as_kind(k).value for k in predict(forest_type, X[idx])]
    return events_from_runs(runs, kinds, values, "predicted", len(X))


def detection_probability(forest: Forest, rows) -> np.ndarray:
    """Probability of the positive class (label 1 / True / largest class)."""
    proba = predict_proba(forest, rows)
    classes = list(forest.classes)
    for pos in (1, True, "1"):
        if pos in classes:
            return proba[:, classes.index(pos)]
    return proba[:, -1]
