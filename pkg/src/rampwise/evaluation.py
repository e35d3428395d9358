"""Event-level and trajectory-level scoring.

Intervals are inclusive on both ends. Matching is greedy by onset distance,
one-to-one, within a fixed tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rba import Event, EventSet


class EmptyActual(ValueError):
    pass


@dataclass(frozen=True)
class MatchConfig:
    onset_tolerance: int = 2
    require_same_kind: bool = True
    require_overlap: bool = False

    def __post_init__(self):
        if self.onset_tolerance < 0:
            raise ValueError("onset_tolerance must be >= 0")


@dataclass
class Matching:
    pairs: list[tuple[int, int]]  # (predicted index, actual index)
    n_pred: int
    n_actual: int
    predicted: list[Event] = field(default_factory=list, repr=False)
    actual: list[Event] = field(default_factory=list, repr=False)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return self.n_pred - self.tp

    @property
    def fn(self) -> int:
        return self.n_actual - self.tp


@dataclass(frozen=True)
class EventMetrics:
    precision: float
    recall: float
    f1: float
    mean_onset_error: float
    mean_iou: float
    tp: int
    fp: int
    fn: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _events(x) -> list[Event]:
    return list(x.events) if isinstance(x, EventSet) else list(x)


def interval_iou(a, b) -> float:
    """IoU of two inclusive index intervals given as events or (start, end)."""
    a0, a1 = (a.onset, a.end) if isinstance(a, Event) else a
    b0, b1 = (b.onset, b.end) if isinstance(b, Event) else b
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    union = (a1 - a0 + 1) + (b1 - b0 + 1) - inter
    return inter / union


def match_events(predicted, actual, config: MatchConfig | None = None) -> Matching:
    cfg = config or MatchConfig()
    pred, act = _events(predicted), _events(actual)
    candidates = []
    for i, p in enumerate(pred):
        for j, a in enumerate(act):
            d = abs(p.onset - a.onset)
            if d > cfg.onset_tolerance:
                continue
            if cfg.require_same_kind and p.kind is not a.kind:
                continue
            if cfg.require_overlap and not p.overlaps(a):
                continue
            candidates.append((d, p.onset, a.onset, i, j))
    candidates.sort()
    used_p, used_a, pairs = set(), set(), []
    for _, _, _, i, j in candidates:
        if i in used_p or j in used_a:
            continue
        used_p.add(i)
        used_a.add(j)
        pairs.append((i, j))
    return Matching(sorted(pairs), len(pred), len(act), pred, act)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # zero-division yields 0 so that F1 == 0 exactly when tp == 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def event_prf(matching: Matching) -> EventMetrics:
    p, r, f1 = prf(matching.tp, matching.fp, matching.fn)
    if matching.pairs and matching.predicted and matching.actual:
        onset_err = float(np.mean([abs(matching.predicted[i].onset - matching.actual[j].onset)
                                   for i, j in matching.pairs]))
        iou = float(np.mean([interval_iou(matching.predicted[i], matching.actual[j])
                             for i, j in matching.pairs]))
    else:
        onset_err, iou = float("nan"), 0.0
    return EventMetrics(p, r, f1, onset_err, iou, matching.tp, matching.fp, matching.fn)


def score_events(predicted, actual, config: MatchConfig | None = None,
                 significant_only: bool = True) -> EventMetrics:
    """Match and score in one call, by default on significant events only."""
    pred, act = _events(predicted), _events(actual)
    if significant_only:
        pred = [e for e in pred if e.kind.significant]
        act = [e for e in act if e.kind.significant]
    return event_prf(match_events(pred, act, config))


def traj_metrics(pred, actual) -> dict:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if actual.size == 0:
        raise EmptyActual("actual series is empty")
    if pred.shape != actual.shape:
        raise ValueError("prediction and actual lengths differ")
    err = pred - actual
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    out = {
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mae": float(np.mean(np.abs(err))),
        "r2": float(1.0 - np.sum(err**2) / ss_tot) if ss_tot > 0 else float("nan"),
        "r2_defined": ss_tot > 0,
    }
    return out
