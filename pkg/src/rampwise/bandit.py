"""Category-stratified Thompson-sampling feature selection.

Each feature carries a Beta posterior on "this feature contributes to event
prediction". A round samples theta for every feature, takes the top
``quota`` features of each category by sampled theta, tops the subset up to
``target_count`` by sampled theta across categories and scores it with a
small forest (mean validation occurrence F1 over horizons). Members the
forest actually relied on (impurity importance at least the uniform share)
are updated by the reward tier; members it ignored take the "otherwise"
branch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import prf
from .models.forest import ForestConfig, SingleClass, detection_probability, fit_forest

log = logging.getLogger(__name__)


class QuotaInfeasible(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


@dataclass
class FeaturePosterior:
    alpha: float = 1.0
    beta_param: float = 1.0

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta_param)


def update_posterior(posterior: FeaturePosterior, reward: float, thresholds) -> FeaturePosterior:
    """High reward: alpha + 3; moderate: alpha + 1; otherwise beta + 1."""
    high, moderate = thresholds
    if reward >= high:
        return FeaturePosterior(posterior.alpha + 3, posterior.beta_param)
    if reward >= moderate:
        return FeaturePosterior(posterior.alpha + 1, posterior.beta_param)
    return FeaturePosterior(posterior.alpha, posterior.beta_param + 1)


def _increments(reward: float, high: float, moderate: float) -> tuple[float, float]:
    if reward >= high:
        return 3.0, 0.0
    if reward >= moderate:
        return 1.0, 0.0
    return 0.0, 1.0


@dataclass(frozen=True)
class BanditConfig:
    rounds: int = 30
    quota: int = 8  # per category
    quotas: dict | None = None  # per-category override
    target_count: int = 75
    high: float = 0.9
    moderate: float = 0.7
    relative: bool = True  # thresholds as fractions of the best reward so far
    n_trees: int = 50
    max_depth: int = 8
    val_frac: float = 0.3
    tau_event: float = 0.5
    contribution: float = 1.0  # importance share (x 1/|subset|) that counts as contributing
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.moderate < self.high:
            raise ValueError("need 0 < moderate < high")
        if not self.relative and self.high > 1:
            log.debug("absolute high threshold above 1 is unreachable")
        if self.rounds < 1 or self.target_count < 1:
            raise ValueError("rounds and target_count must be >= 1")

    def category_quotas(self, categories) -> dict[str, int]:
        cats = sorted(set(categories))
        base = {c: self.quota for c in cats}
        if self.quotas:
            base.update({c: int(q) for c, q in self.quotas.items() if c in base})
        return base


def thompson_sample_round(alpha, beta, categories, quotas: dict, rng,
                          target_count: int | None = None) -> np.ndarray:
    """Indices of one candidate subset, ordered by category then sampled theta."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    cats = np.asarray(categories)
    theta = rng.beta(alpha, beta)
    chosen = []
    for c in sorted(quotas):
        idx = np.flatnonzero(cats == c)
        q = quotas[c]
        if q > len(idx):
            raise QuotaInfeasible(f"category {c!r} has {len(idx)} features, quota {q}")
        order = idx[np.argsort(-theta[idx], kind="stable")]
        chosen.extend(order[:q].tolist())
    if target_count is not None and target_count > len(chosen):
        taken = np.zeros(len(alpha), dtype=bool)
        taken[chosen] = True
        rest = np.flatnonzero(~taken)
        rest = rest[np.argsort(-theta[rest], kind="stable")]
        chosen.extend(rest[: target_count - len(chosen)].tolist())
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class SubsetScore:
    reward: float
    degenerate: bool
    per_horizon: list[float]
    importance: np.ndarray  # horizons x subset members

    def __iter__(self):
        return iter((self.reward, self.degenerate, self.per_horizon))


def evaluate_subset(subset, features, labels, config: BanditConfig | None = None,
                    seed: int = 0) -> SubsetScore:
    """Mean validation occurrence F1 over horizons of a small forest.

    ``labels`` is N x H (or N). The first ``1 - val_frac`` of rows train, the
    rest validate. A horizon whose training or validation labels hold a
    single class scores 0 and sets the degenerate flag.
    """
    cfg = config or BanditConfig()
    X = np.asarray(features, dtype=float)[:, np.asarray(subset, dtype=np.int64)]
    Y = np.asarray(labels)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = len(X)
    cut = int(round(n * (1 - cfg.val_frac)))
    if cut < 2 or n - cut < 1:
        raise ValueError("too few rows to split")
    scores, degenerate = [], False
    importance = np.zeros((Y.shape[1], X.shape[1]))
    for h in range(Y.shape[1]):
        ytr, yva = Y[:cut, h].astype(int), Y[cut:, h].astype(int)
        if len(np.unique(ytr)) < 2 or len(np.unique(yva)) < 2:
            degenerate = True
            scores.append(0.0)
            continue
        fc = ForestConfig(n_trees=cfg.n_trees, max_depth=cfg.max_depth, seed=seed + 7919 * h)
        try:
            forest = fit_forest(X[:cut], ytr, fc)
        except SingleClass:
            degenerate = True
            scores.append(0.0)
            continue
        importance[h] = forest.importances
        pred = detection_probability(forest, X[cut:]) >= cfg.tau_event
        tp = int(np.sum(pred & (yva == 1)))
        fp = int(np.sum(pred & (yva == 0)))
        fn = int(np.sum(~pred & (yva == 1)))
        scores.append(prf(tp, fp, fn)[2])
    return SubsetScore(float(np.mean(scores)), degenerate, scores, importance)


@dataclass
class Selection:
    indices: list[int]
    names: list[str]
    categories: list[str]
    alpha: np.ndarray
    beta: np.ndarray
    log: list[dict] = field(default_factory=list)
    per_horizon_rank: dict = field(default_factory=dict)

    @property
    def expected(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def table(self) -> list[dict]:
        exp = self.expected
        return [{"feature": self.names[i], "category": self.categories[i], "alpha": float(self.alpha[i]),
                 "beta": float(self.beta[i]), "expected_reward": float(exp[i]), "rank": r + 1}
                for r, i in enumerate(self.indices)]

    def to_json(self) -> str:
        return json.dumps({"selection": self.table(), "rounds": self.log,
                           "per_horizon_rank": self.per_horizon_rank}, indent=1)


def _final_pick(expected, cats, quotas, target_count) -> list[int]:
    chosen = []
    for c in sorted(quotas):
        idx = np.flatnonzero(cats == c)
        order = idx[np.lexsort((idx, -expected[idx]))]
        chosen.extend(order[: quotas[c]].tolist())
    taken = np.zeros(len(expected), dtype=bool)
    taken[chosen] = True
    rest = np.flatnonzero(~taken)
    rest = rest[np.lexsort((rest, -expected[rest]))]
    chosen.extend(rest[: max(target_count - len(chosen), 0)].tolist())
    # final ranking: by expected reward, ties by column index
    chosen = np.asarray(chosen)
    return chosen[np.lexsort((chosen, -expected[chosen]))].tolist()


def select(features, labels, config: BanditConfig | None = None, names=None, categories=None) -> Selection:
    """Run the bandit and return the ranked selection.

    ``features`` may be a FeatureMatrix (names and categories are then taken
    from it) or an N x F array with explicit ``names``/``categories``.
    """
    cfg = config or BanditConfig()
    if hasattr(features, "values") and hasattr(features, "categories"):
        names = list(features.names)
        categories = list(features.categories)
        X = features.values
    else:
        X = np.asarray(features, dtype=float)
    n_feat = X.shape[1]
    names = list(names) if names is not None else [f"f{i}" for i in range(n_feat)]
    categories = list(categories) if categories is not None else ["power"] * n_feat
    cats = np.asarray(categories)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    Y = np.asarray(labels)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n_h = Y.shape[1]

    quotas = cfg.category_quotas(categories)
    for c in list(quotas):
        avail = int(np.sum(cats == c))
        if quotas[c] > avail:
            log.warning("category %s has only %d features; quota lowered from %d", c, avail, quotas[c])
            quotas[c] = avail
    target = min(cfg.target_count, n_feat)
    if sum(quotas.values()) > target:
        raise QuotaInfeasible(f"quota sum {sum(quotas.values())} exceeds target {target}")
    if target == n_feat:
        alpha = np.ones(n_feat)
        beta = np.ones(n_feat)
        idx = list(range(n_feat))
        return Selection(idx, names, categories, alpha, beta, [], {})

    rng = np.random.default_rng(cfg.seed)
    alpha = np.ones(n_feat)
    beta = np.ones(n_feat)
    h_alpha = np.ones((n_h, n_feat))
    h_beta = np.ones((n_h, n_feat))
    best = 0.0
    h_best = np.zeros(n_h)
    rounds = []
    for r in range(cfg.rounds):
        subset = thompson_sample_round(alpha, beta, categories, quotas, rng, target)
        score = evaluate_subset(subset, X, Y, cfg, seed=cfg.seed + 104729 * (r + 1))
        reward, per_h = score.reward, score.per_horizon
        best = max(best, reward)
        if cfg.relative:
            hi, mod = cfg.high * best, cfg.moderate * best
        else:
            hi, mod = cfg.high, cfg.moderate
        if best <= 0:
            hi = mod = np.inf  # no signal yet: every member takes a beta increment
        used = score.importance.mean(axis=0) >= cfg.contribution / len(subset)
        da, db = _increments(reward, hi, mod)
        alpha[subset[used]] += da
        beta[subset[used]] += db
        beta[subset[~used]] += 1.0
        for h in range(n_h):
            h_best[h] = max(h_best[h], per_h[h])
            scale = h_best[h] if cfg.relative else 1.0
            a_h, b_h = _increments(per_h[h], cfg.high * scale if scale > 0 else np.inf,
                                   cfg.moderate * scale if scale > 0 else np.inf)
            used_h = score.importance[h] >= cfg.contribution / len(subset)
            h_alpha[h, subset[used_h]] += a_h
            h_beta[h, subset[used_h]] += b_h
            h_beta[h, subset[~used_h]] += 1.0
        rounds.append({"round": r, "reward": reward, "per_horizon": per_h, "degenerate": score.degenerate,
                       "high": float(hi), "moderate": float(mod), "subset": subset.tolist(),
                       "contributors": subset[used].tolist()})

    expected = alpha / (alpha + beta)
    chosen = _final_pick(expected, cats, quotas, target)
    per_h_rank = {}
    for h in range(n_h):
        e_h = h_alpha[h] / (h_alpha[h] + h_beta[h])
        per_h_rank[str(h)] = [names[i] for i in _final_pick(e_h, cats, quotas, target)]
    return Selection(chosen, names, categories, alpha, beta, rounds, per_h_rank)


def config_dict(cfg: BanditConfig) -> dict:
    return asdict(cfg)
