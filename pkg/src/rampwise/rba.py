"""Ramp/stationary event extraction (RBA-theta) and cross-band event fusion.

Significant events are runs where the symmetric-difference gradient exceeds
an adaptive threshold ``|mu_w| + k sigma_w`` built from trailing rolling
statistics; stationary events are runs where rolling slope, variance and
range all stay under fixed bounds.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd


class SeriesTooShort(ValueError):
    pass


class AxisMismatch(ValueError):
    pass


class EventKind(str, enum.Enum):
    UP = "SignificantUp"
    DOWN = "SignificantDown"
    STATIONARY = "Stationary"

    @property
    def significant(self) -> bool:
        return self is not EventKind.STATIONARY


# lowest frequency first; fusion gives priority to earlier entries
BAND_PRIORITY = ("approx", "a4", "d4", "d3", "d2", "d1")


@dataclass(frozen=True)
class RBAConfig:
    delta_t: int = 1
    k_sigma: float = 2.0
    tau_sig_mult: float = 1.0
    tau_stat_mult: float = 0.5
    rolling_window: int = 168
    d_min: int = 3
    gap_min: int = 3
    stat_window: int = 6
    max_abs_slope: float = 0.01
    max_variance: float = 2.5e-4
    max_range: float = 0.05
    threshold_on: str = "gradient"  # or "signal"
    extend_frac: float = 0.5

    def __post_init__(self):
        for name in ("delta_t", "rolling_window", "d_min", "gap_min", "stat_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("k_sigma", "tau_sig_mult", "tau_stat_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.threshold_on not in ("gradient", "signal"):
            raise ValueError("threshold_on must be 'gradient' or 'signal'")


@dataclass(frozen=True)
class Event:
    kind: EventKind
    onset: int
    end: int
    duration: int
    magnitude: float
    direction: int
    slope_variance: float
    symmetry: float
    band: str = "signal"

    def __post_init__(self):
        if self.onset > self.end:
            raise ValueError("event onset after end")
        object.__setattr__(self, "kind", EventKind(self.kind))

    def overlaps(self, other: "Event") -> bool:
        return self.onset <= other.end and other.onset <= self.end

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        fields_ = {k: d[k] for k in (
            "kind", "onset", "end", "duration", "magnitude", "direction", "slope_variance", "symmetry")}
        return cls(band=d.get("band", "signal"), **fields_)


@dataclass
class EventSet:
    events: list[Event] = field(default_factory=list)
    source_band: str = "signal"
    length: int | None = None  # time-axis length the events index into

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.onset, e.end))

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def significant(self) -> "EventSet":
        return EventSet([e for e in self.events if e.kind.significant], self.source_band, self.length)

    def of_kind(self, kind: EventKind) -> list[Event]:
        return [e for e in self.events if e.kind is kind]

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.events], sort_keys=True)

    @classmethod
    def from_json(cls, text: str, source_band: str = "signal") -> "EventSet":
        return cls([Event.from_dict(d) for d in json.loads(text)], source_band)

    def active_mask(self, n: int, kinds=None) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        for e in self.events:
            if kinds is None or e.kind in kinds:
                mask[max(e.onset, 0) : min(e.end + 1, n)] = True
        return mask


def gradient(series, delta_t: int = 1, return_mask: bool = False):
    """Symmetric-difference gradient per step on an already-normalised series.

    The first and last ``delta_t`` samples fall back to one-sided differences;
    ``return_mask`` also returns a boolean array flagging them.
    """
    x = np.asarray(series, dtype=float)
    n, d = len(x), int(delta_t)
    if n <= 2 * d:
        raise SeriesTooShort(f"need more than {2 * d} samples, got {n}")
    g = np.empty(n)
    g[d : n - d] = (x[2 * d :] - x[: n - 2 * d]) / (2 * d)
    g[:d] = (x[d : 2 * d] - x[:d]) / d
    g[n - d :] = (x[n - d :] - x[n - 2 * d : n - d]) / d
    if return_mask:
        mask = np.zeros(n, dtype=bool)
        mask[:d] = mask[n - d :] = True
        return g, mask
    return g


def rolling_stats(signal, window: int, warm: tuple[float, float] | None = None):
    """Trailing rolling mean and population std; the first ``window - 1``
    samples use ``warm`` (global statistics of ``signal`` by default)."""
    s = pd.Series(np.asarray(signal, dtype=float))
    mu = s.rolling(window, min_periods=window).mean().to_numpy()
    sd = s.rolling(window, min_periods=window).std(ddof=0).to_numpy()
    if warm is None:
        warm = (float(s.mean()), float(s.std(ddof=0)))
    head = min(window - 1, len(s))
    mu[:head], sd[:head] = warm
    return mu, np.nan_to_num(np.maximum(sd, 0.0))


def adaptive_threshold(signal, rolling_window: int, k_sigma: float, warm=None) -> np.ndarray:
    """tau(t) = |mu_w(t)| + k_sigma * sigma_w(t)."""
    if rolling_window < 2:
        raise ValueError("rolling_window must be >= 2")
    mu, sd = rolling_stats(signal, rolling_window, warm)
    return np.abs(mu) + k_sigma * sd


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of True runs."""
    if not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _descriptors(x, g, kind, s, e, band) -> Event:
    seg = g[s : e + 1]
    peak = s + int(np.argmax(np.abs(seg)))
    # half-sample offsets keep the ratio finite when the peak sits on a boundary
    symmetry = (peak - s + 0.5) / (e - peak + 0.5)
    mag = float(x[e] - x[s])
    direction = {EventKind.UP: 1, EventKind.DOWN: -1}.get(kind, int(np.sign(mag)))
    return Event(kind, int(s), int(e), int(e - s + 1), mag, direction,
                 float(seg.var()), float(symmetry), band)


def _significant_events(x, g, tau, cfg: RBAConfig, band: str) -> list[Event]:
    n = len(x)
    exceed = np.abs(g) > tau
    found = []
    for direction, kind in ((1, EventKind.UP), (-1, EventKind.DOWN)):
        for s, e in _runs(exceed & (np.sign(g) == direction)):
            core = e - s + 1
            ext = cfg.extend_frac * tau
            while s > 0 and np.sign(g[s - 1]) == direction and abs(g[s - 1]) > ext[s - 1]:
                s -= 1
            while e < n - 1 and np.sign(g[e + 1]) == direction and abs(g[e + 1]) > ext[e + 1]:
                e += 1
            found.append([s, e, kind, core])
    found.sort(key=lambda r: (r[0], r[1]))

    merged: list[list] = []
    for run in found:
        if merged and merged[-1][2] is run[2] and run[0] - merged[-1][1] - 1 < cfg.gap_min:
            prev = merged[-1]
            prev[1] = max(prev[1], run[1])
            prev[3] = max(prev[3], run[3])
        else:
            merged.append(list(run))

    events = []
    for s, e, kind, core in merged:
        if core < cfg.d_min or e - s + 1 < cfg.d_min:
            continue
        ev = _descriptors(x, g, kind, s, e, band)
        if np.sign(ev.magnitude) != ev.direction:
            continue  # noise-dominated run, not a coherent ramp
        events.append(ev)
    return events


def _stationary_candidates(x, g, tau_stat, cfg: RBAConfig, blocked: np.ndarray):
    w = cfg.stat_window
    s = pd.Series(x)
    roll = s.rolling(w, min_periods=1)
    span = np.minimum(np.arange(len(x)), w - 1)
    slope = np.abs(x - s.shift(w - 1).bfill().to_numpy())
    slope = np.divide(slope, span, out=np.zeros_like(slope), where=span > 0)
    var = roll.var(ddof=0).fillna(0.0).to_numpy()
    rng_ = (roll.max() - roll.min()).to_numpy()
    ok = (
        (np.abs(g) <= tau_stat)
        & (slope <= cfg.max_abs_slope)
        & (var <= cfg.max_variance)
        & (rng_ <= cfg.max_range)
        & ~blocked
    )
    return _runs(ok)


def _stationary_events(x, g, tau_stat, cfg: RBAConfig, blocked, band) -> list[Event]:
    pieces = []
    for s, e in _stationary_candidates(x, g, tau_stat, cfg, blocked):
        start, lo, hi = s, x[s], x[s]
        t = s + 1
        while t <= e:
            lo, hi = min(lo, x[t]), max(hi, x[t])
            if hi - lo > cfg.max_range:
                pieces.append((start, t - 1))
                start = t + cfg.gap_min
                if start > e:
                    break
                lo = hi = x[start]
                t = start
            t += 1
        else:
            pieces.append((start, e))

    out: list[tuple[int, int]] = []
    for s, e in pieces:
        if e - s + 1 < cfg.d_min:
            continue
        if out and s - out[-1][1] - 1 < cfg.gap_min and not blocked[out[-1][1] + 1 : s].any():
            ps, _ = out[-1]
            seg = x[ps : e + 1]
            if seg.max() - seg.min() <= cfg.max_range:
                out[-1] = (ps, e)
                continue
            s = out[-1][1] + cfg.gap_min + 1
            if e - s + 1 < cfg.d_min:
                continue
        out.append((s, e))
    return [_descriptors(x, g, EventKind.STATIONARY, s, e, band) for s, e in out]


def extract_events(series, config: RBAConfig | None = None, band: str = "signal",
                   warm: tuple[float, float] | None = None) -> EventSet:
    """Segment a normalised series into significant up/down and stationary events."""
    cfg = config or RBAConfig()
    x = np.asarray(series, dtype=float)
    g = gradient(x, cfg.delta_t)
    proxy = g if cfg.threshold_on == "gradient" else x
    mu, sd = rolling_stats(proxy, cfg.rolling_window, warm)
    tau_sig = np.abs(mu) + cfg.tau_sig_mult * cfg.k_sigma * sd
    tau_stat = np.abs(mu) + cfg.tau_stat_mult * cfg.k_sigma * sd

    sig = _significant_events(x, g, tau_sig, cfg, band)
    blocked = np.zeros(len(x), dtype=bool)
    for e in sig:
        blocked[e.onset : e.end + 1] = True
    stat = _stationary_events(x, g, tau_stat, cfg, blocked, band)
    return EventSet(sig + stat, band, len(x))


def _priority(band: str) -> int:
    return BAND_PRIORITY.index(band) if band in BAND_PRIORITY else len(BAND_PRIORITY)


def _union(kind, parts: list[Event]) -> Event:
    lead = max(parts, key=lambda e: abs(e.magnitude))
    s = min(e.onset for e in parts)
    e_ = max(e.end for e in parts)
    return Event(kind, s, e_, e_ - s + 1, lead.magnitude, lead.direction,
                 lead.slope_variance, lead.symmetry, "fused")


def fuse_events(per_band) -> EventSet:
    """Merge per-band event sets onto one non-overlapping set.

    Same-direction significant intervals that overlap are unioned; an
    opposite-direction overlap keeps the lower-frequency band's event.
    Stationary intervals survive only outside fused significant events.
    """
    sets = list(per_band)
    lengths = {s.length for s in sets if s.length is not None}
    if len(lengths) > 1:
        raise AxisMismatch(f"event sets index different axes: {sorted(lengths)}")
    length = lengths.pop() if lengths else None
    if sum(1 for s in sets if len(s)) <= 1:
        only = next((s for s in sets if len(s)), EventSet([], "fused", length))
        return EventSet(list(only.events), "fused", length)

    ordered = sorted(
        ((e, _priority(s.source_band)) for s in sets for e in s if e.kind.significant),
        key=lambda item: (item[1], item[0].onset, item[0].end),
    )
    groups: list[tuple[EventKind, list[Event]]] = []
    for ev, _ in ordered:
        hits = [i for i, (_, parts) in enumerate(groups) if _span_overlaps(ev, parts)]
        if any(groups[i][0] is not ev.kind for i in hits):
            continue
        if not hits:
            groups.append((ev.kind, [ev]))
            continue
        keep = hits[0]
        for i in hits[1:]:
            groups[keep][1].extend(groups[i][1])
        groups[keep][1].append(ev)
        groups = [g for i, g in enumerate(groups) if i == keep or i not in hits]
    fused = [_union(kind, parts) for kind, parts in groups]

    covered = np.zeros(0, dtype=bool)
    if fused:
        top = max(e.end for e in fused) + 1
        covered = np.zeros(top, dtype=bool)
        for e in fused:
            covered[e.onset : e.end + 1] = True
    stat = sorted((e for s in sets for e in s if not e.kind.significant), key=lambda e: e.onset)
    pieces: list[list] = []
    for ev in stat:
        if pieces and ev.onset <= pieces[-1][1]:
            pieces[-1][1] = max(pieces[-1][1], ev.end)
            pieces[-1][2].append(ev)
        else:
            pieces.append([ev.onset, ev.end, [ev]])
    for s, e, parts in pieces:
        idx = np.arange(s, e + 1)
        free = np.ones(len(idx), dtype=bool)
        inside = idx < len(covered)
        free[inside] = ~covered[idx[inside]]
        for a, b in _runs(free):
            lead = max(parts, key=lambda p: p.duration)
            fused.append(Event(EventKind.STATIONARY, s + a, s + b, b - a + 1, lead.magnitude,
                               lead.direction, lead.slope_variance, lead.symmetry, "fused"))
    return EventSet(fused, "fused", length)


def _span_overlaps(ev: Event, parts: list[Event]) -> bool:
    s = min(p.onset for p in parts)
    e = max(p.end for p in parts)
    return ev.onset <= e and s <= ev.end
