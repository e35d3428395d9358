"""Workflow orchestration and event-guided trajectory reconstruction.

W1  ARMAX(1,1) forecast, then ramp extraction on the forecast
W2  two-stage forest (occurrence, then type) on the full causal feature set
W3  decompose -> per-band extraction -> fusion -> causal features -> bandit
    selection -> per-horizon event models -> windowed reconstruction
W4  W3 with horizon-specific selections and squared/absolute-error
    magnitude/duration losses

All workflows train on the first ``train_frac`` of rows and are scored on
the remainder against the extraction on the observed series.
"""
from __future__ import annotations

import enum
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import wavelet
from .bandit import BanditConfig, select
from .data import DatasetBundle, normalize
from .evaluation import MatchConfig, prf, score_events, traj_metrics
from .features import BANDS, TYPE_CODES, FeatureConfig, build_features, label_horizons
from .models.armax import ArmaxModel, fit_armax, residuals
from .models.forest import (ForestConfig, TwoStageConfig, _as_kind, detection_probability,
                            fit_forest, merge_runs, predict)
from .models.multitask import (LossConfig, MultiTaskHead, Standardizer, Targets, TrainConfig,
                               sgd_fit, window_summary)
from .rba import Event, EventKind, EventSet, RBAConfig, extract_events, fuse_events

log = logging.getLogger(__name__)


class WorkflowId(str, enum.Enum):
    W1 = "W1"
    W2 = "W2"
    W3 = "W3"
    W4 = "W4"

    @property
    def description(self) -> str:
        return {
            "W1": "ARMAX forecast with post-hoc ramp extraction",
            "W2": "two-stage forest event classifier",
            "W3": "multi-band event-first prediction with reconstruction",
            "W4": "multi-band event-first prediction, horizon-specific selection and regression losses",
        }[self.value]


class StageError(RuntimeError):
    def __init__(self, workflow: str, stage: str, exc: BaseException):
        super().__init__(f"{workflow} stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.workflow = workflow
        self.stage = stage


class InsufficientHistory(ValueError):
    pass


class EventOutOfRange(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# reconstruction


@dataclass(frozen=True)
class ReconstructionConfig:
    trend_smoothing_sigma: float = 24.0
    rho0: float = 0.5
    anchor_window: int = 6
    event_shape: str = "raised_cosine"  # or "linear_ramp"
    reconstructed_bands: tuple[str, ...] = ("d3", "d4")
    window: int = 24  # reconstruction window per forecast origin
    lookback: int = 1024  # past samples decomposed at each origin

    def __post_init__(self):
        if self.anchor_window < 1:
            raise ValueError("anchor_window must be >= 1")
        if self.trend_smoothing_sigma <= 0:
            raise ValueError("trend_smoothing_sigma must be positive")
        if not 0 < self.rho0 < 1:
            raise ValueError("rho0 must lie in (0, 1)")
        if self.event_shape not in ("raised_cosine", "linear_ramp"):
            raise ValueError("event_shape must be 'raised_cosine' or 'linear_ramp'")
        if self.window < 1 or self.lookback < 2:
            raise ValueError("window must be >= 1 and lookback >= 2")

    @property
    def slope_window(self) -> int:
        return max(int(round(self.trend_smoothing_sigma)), 1)


def propagate_approx(past_approx, horizon: int, window: int = 24) -> np.ndarray:
    """Persistence with drift: the last value plus the mean slope of the final
    ``window`` steps, the drift damped linearly to zero over the horizon
    (step i adds m (1 - (i - 1)/H))."""
    past = np.asarray(past_approx, dtype=float)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if len(past) < window + 1:
        raise InsufficientHistory(f"need {window + 1} past samples, got {len(past)}")
    if horizon == 0:
        return np.zeros(0)
    m = (past[-1] - past[-window - 1]) / window
    i = np.arange(1, horizon + 1)
    return past[-1] + np.cumsum(m * (1.0 - (i - 1) / horizon))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else float("nan")


def trend_consistency(predicted_approx, propagated_approx, config: ReconstructionConfig | None = None):
    """Return ``(baseline, rho, chose_predicted)``.

    Both trends are Gaussian-smoothed; the predicted one is kept iff their
    correlation reaches rho0. A flat (zero-variance) smoothed trend counts as
    inconsistent.
    """
    cfg = config or ReconstructionConfig()
    pred = np.asarray(predicted_approx, dtype=float)
    prop = np.asarray(propagated_approx, dtype=float)
    if pred.shape != prop.shape or pred.ndim != 1:
        raise LengthMismatch("trends must be 1-D and equally long")
    if len(pred) < 3:
        raise ValueError("need at least 3 samples")
    sp = gaussian_filter1d(pred, cfg.trend_smoothing_sigma, mode="nearest")
    sq = gaussian_filter1d(prop, cfg.trend_smoothing_sigma, mode="nearest")
    if np.std(sp) < 1e-12 or np.std(sq) < 1e-12:
        return prop.copy(), float("nan"), False
    rho = pearson(sp, sq)
    if rho >= cfg.rho0:
        return pred.copy(), rho, True
    return prop.copy(), rho, False


def event_shape(duration: int, shape: str = "raised_cosine") -> np.ndarray:
    """Unit-area profile over ``duration`` samples with zero end points
    (durations below 3 cannot have both, so they keep unit area only)."""
    d = int(duration)
    if d < 1:
        raise ValueError("duration must be >= 1")
    if d <= 2:
        return np.full(d, 1.0 / d)
    i = np.arange(d)
    if shape == "raised_cosine":
        w = 1.0 - np.cos(2.0 * np.pi * i / (d - 1))
    else:
        w = 1.0 - np.abs(2.0 * i / (d - 1) - 1.0)
    return w / w.sum()


def _band_signal(events, length: int, shape: str) -> np.ndarray:
    out = np.zeros(length)
    sig = sorted((e for e in events if EventKind(e.kind).significant), key=lambda e: e.onset)
    spans = []
    for e in sig:
        seg = e.magnitude * event_shape(e.end - e.onset + 1, shape)
        out[e.onset : e.end + 1] += seg
        spans.append((e.onset, e.end))
    # linear bridges between consecutive shape end points
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 - e0 > 1:
            out[e0 + 1 : s1] = np.linspace(out[e0], out[s1], s1 - e0 + 1)[1:-1]
    for e in events:
        if not EventKind(e.kind).significant:
            out[e.onset : e.end + 1] = 0.0
    return out


def synthesize_details(events_per_band: dict, length: int,
                       config: ReconstructionConfig | None = None) -> dict[str, np.ndarray]:
    """Detail-band signals from predicted events.

    Each significant event adds a shape of its duration whose signed area is
    its magnitude; gaps are bridged linearly between shape end points;
    stationary events hold the band at zero over their span. Bands outside
    ``reconstructed_bands`` (d1/d2 by default) are identically zero.
    """
    cfg = config or ReconstructionConfig()
    out = {}
    for band in ("d4", "d3", "d2", "d1"):
        evs = list(events_per_band.get(band, ()))
        for e in evs:
            if e.onset < 0 or e.end >= length:
                raise EventOutOfRange(f"{band} event [{e.onset}, {e.end}] outside [0, {length})")
        if band in cfg.reconstructed_bands:
            out[band] = _band_signal(evs, length, cfg.event_shape)
        else:
            out[band] = np.zeros(length)
    return out


def reconstruct(baseline, detail_bands, config: ReconstructionConfig | None = None,
                start_ref: float | None = None, end_ref: float | None = None,
                clamp: bool = True) -> np.ndarray:
    """Baseline plus detail bands, blended toward boundary references with
    cosine weights over ``anchor_window`` samples at each end, then clamped
    to [0, 1]. References default to the baseline's own end values; pass
    ``end_ref=np.nan`` to leave the far end free."""
    cfg = config or ReconstructionConfig()
    base = np.asarray(baseline, dtype=float)
    n = len(base)
    bands = detail_bands.values() if isinstance(detail_bands, dict) else detail_bands
    traj = base.copy()
    for d in bands:
        d = np.asarray(d, dtype=float)
        if len(d) != n:
            raise LengthMismatch(f"detail length {len(d)} != baseline length {n}")
        traj = traj + d
    if n == 0:
        return traj
    a = min(cfg.anchor_window, n)
    w = 0.5 * (1.0 + np.cos(np.pi * np.arange(a) / a))  # 1 at the boundary
    s_ref = base[0] if start_ref is None else start_ref
    e_ref = base[-1] if end_ref is None else end_ref
    if np.isfinite(s_ref):
        traj[:a] = traj[:a] + w * (s_ref - traj[:a])
    if np.isfinite(e_ref):
        traj[n - a :] = traj[n - a :] + w[::-1] * (e_ref - traj[n - a :])
    return np.clip(traj, 0.0, 1.0) if clamp else traj


def _clip_events(events, lo: int, hi: int) -> list[Event]:
    """Events overlapping [lo, hi) shifted to window coordinates and cut at its edges."""
    out = []
    for e in events:
        s, t = max(e.onset, lo), min(e.end, hi - 1)
        if s > t:
            continue
        frac = (t - s + 1) / max(e.end - e.onset + 1, 1)
        out.append(replace(e, onset=s - lo, end=t - lo, duration=t - s + 1,
                           magnitude=e.magnitude * frac))
    return out


@dataclass
class WindowedReconstruction:
    trajectory: np.ndarray  # over [start, stop)
    start: int
    origins: list[int]
    rho: list[float]
    chose_predicted: list[bool]


def reconstruct_windows(series, start: int, stop: int, band_events: dict, approx_hint=None,
                        config: ReconstructionConfig | None = None,
                        wavelet_config: wavelet.WaveletConfig | None = None,
                        anchor_to_last: bool = True, approx_offset=None) -> WindowedReconstruction:
    """Reconstruct ``series[start:stop]`` window by window.

    Window k covers [start + kW, start + (k+1)W) with forecast origin one step
    before it. Its propagated baseline comes from a decomposition of the
    ``lookback`` samples up to the origin only. The predicted approximation
    for the consistency check is either ``approx_hint`` (absolute, same
    length as ``series``) or the propagated baseline plus ``approx_offset``
    (predicted level changes). ``band_events`` are the predicted events per
    band in series coordinates. With ``anchor_to_last`` the window start is
    anchored to the last observed value.
    """
    cfg = config or ReconstructionConfig()
    wcfg = wavelet_config or wavelet.WaveletConfig()
    x = np.asarray(series, dtype=float)
    if not 0 < start <= stop <= len(x):
        raise ValueError("need 0 < start <= stop <= len(series)")
    out = np.zeros(stop - start)
    origins, rhos, chosen = [], [], []
    for s in range(start, stop, cfg.window):
        e = min(s + cfg.window, stop)
        o = s - 1
        past = x[max(0, o + 1 - cfg.lookback) : o + 1]
        pa = wavelet.decompose(past, wcfg).approx
        prop = propagate_approx(pa, e - s, min(cfg.slope_window, len(pa) - 1))
        base, rho, took = prop, float("nan"), False
        hint = None
        if approx_hint is not None:
            hint = np.asarray(approx_hint[s:e], dtype=float)
        elif approx_offset is not None:
            hint = prop + np.asarray(approx_offset[s:e], dtype=float)
        if hint is not None and e - s >= 3:
            if np.all(np.isfinite(hint)):
                base, rho, took = trend_consistency(hint, prop, cfg)
        win = {b: _clip_events(band_events.get(b, ()), s, e) for b in band_events}
        det = synthesize_details(win, e - s, cfg)
        out[s - start : e - start] = reconstruct(base, det, cfg, x[o] if anchor_to_last else None, np.nan)
        origins.append(o)
        rhos.append(rho)
        chosen.append(took)
    return WindowedReconstruction(out, start, origins, rhos, chosen)


def oracle_reconstruction(series, start: int | None = None, stop: int | None = None,
                          config: ReconstructionConfig | None = None,
                          rba_config: RBAConfig | None = None,
                          wavelet_config: wavelet.WaveletConfig | None = None) -> dict:
    """Reconstruction fed with the true approximation band as baseline and
    the events extracted from the true detail bands, window by window with
    the start anchored to the last observation (an upper bound for the
    method). ``gated`` repeats it with the baseline chosen by the trend
    consistency check against the propagated past approximation."""
    cfg = config or ReconstructionConfig()
    x = np.asarray(series, dtype=float)
    n = len(x)
    start = cfg.lookback if start is None else start
    stop = n if stop is None else stop
    if not 0 < start < stop <= n:
        raise ValueError("need 0 < start < stop <= len(series)")
    bands = wavelet.decompose(x, wavelet_config)
    events = {b: list(extract_events(bands[b], rba_config, band=b)) for b in cfg.reconstructed_bands}
    traj = np.zeros(stop - start)
    for s in range(start, stop, cfg.window):
        e = min(s + cfg.window, stop)
        win = {b: _clip_events(events[b], s, e) for b in events}
        det = synthesize_details(win, e - s, cfg)
        traj[s - start : e - start] = reconstruct(bands.approx[s:e], det, cfg, x[s - 1], np.nan)
    gated = reconstruct_windows(x, start, stop, events, bands.approx, cfg, wavelet_config)
    return {"trajectory": traj, "metrics": traj_metrics(traj, x[start:stop]), "start": start, "stop": stop,
            "gated_metrics": traj_metrics(gated.trajectory, x[start:stop]),
            "gated_predicted_share": float(np.mean(gated.chose_predicted))}


# --------------------------------------------------------------------------
# workflows


@dataclass(frozen=True)
class WorkflowConfig:
    horizons: tuple[int, ...] = (1, 6, 12, 24)
    train_frac: float = 0.7
    seed: int = 0
    rba: RBAConfig = field(default_factory=RBAConfig)
    wavelet: wavelet.WaveletConfig = field(default_factory=wavelet.WaveletConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    forest: TwoStageConfig = field(default_factory=TwoStageConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.2, epochs=30))
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    match: MatchConfig = field(default_factory=lambda: MatchConfig(2))
    tau_event: float = 0.5
    gap_min: int = 3
    d_min: int = 3
    backend: str = "forest"  # W3/W4 occurrence model: "forest" or "head"
    armax_exog: bool = True
    w2_leads: tuple[int, ...] = (0,)  # W2 lead times; 0 = the current step
    summary_lags: int = 3
    summary_window: int = 24
    time_scale: float = 24.0  # time-to-event and duration targets are divided by this

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")
        if any(h < 1 for h in self.horizons) or list(self.horizons) != sorted(set(self.horizons)):
            raise ValueError("horizons must be positive, sorted and unique")
        if any(h < 0 for h in self.w2_leads):
            raise ValueError("W2 leads must be >= 0")
        if self.backend not in ("forest", "head"):
            raise ValueError("backend must be 'forest' or 'head'")
        if not 0 < self.tau_event < 1:
            raise ValueError("tau_event must lie in (0, 1)")


@dataclass
class WorkflowResult:
    workflow: WorkflowId
    events: dict[int, EventSet]  # predicted events per horizon, series coordinates
    actual: EventSet  # reference events over the evaluation span
    trajectory: np.ndarray | None  # over [span[0], span[1])
    metrics: dict
    timings: dict[str, float]
    total_time: float
    span: tuple[int, int]
    extras: dict = field(default_factory=dict)

    def events_json(self) -> dict:
        return {str(h): [e.to_dict() for e in es] for h, es in sorted(self.events.items())}

    def summary(self) -> dict:
        return {"workflow": self.workflow.value, "span": list(self.span), "metrics": self.metrics,
                "timings": self.timings, "total_time": self.total_time}


class _Stages:
    def __init__(self, workflow: str):
        self.workflow = workflow
        self.timings: dict[str, float] = {}
        self.t0 = time.perf_counter()

    @contextmanager
    def __call__(self, name: str):
        t = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(self.workflow, name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def total(self) -> float:
        return time.perf_counter() - self.t0


def _significant_in(events: EventSet, lo: int, hi: int) -> EventSet:
    return EventSet([e for e in events if e.kind.significant and lo <= e.onset < hi],
                    events.source_band, events.length)


def _kind_codes(events: EventSet, n: int) -> np.ndarray:
    codes = np.full(n, TYPE_CODES[EventKind.STATIONARY], dtype=np.int64)
    for e in events:
        if e.kind.significant:
            codes[e.onset : e.end + 1] = TYPE_CODES[e.kind]
    return codes


def _event_metrics(pred: EventSet, actual: EventSet, match: MatchConfig) -> dict:
    m = score_events(pred, actual, match)
    return {"precision": m.precision, "recall": m.recall, "f1": m.f1, "iou": m.mean_iou,
            "onset_error": m.mean_onset_error, "tp": m.tp, "fp": m.fp, "fn": m.fn}


def _pointwise(pred_mask, truth_mask) -> dict:
    p, t = np.asarray(pred_mask, bool), np.asarray(truth_mask, bool)
    tp, fp, fn = int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))
    pr, rc, f1 = prf(tp, fp, fn)
    return {"precision": pr, "recall": rc, "f1": f1}


def _events_from_mask(mask, codes, lo: int, n: int, cfg: WorkflowConfig, values=None,
                      band: str = "predicted") -> EventSet:
    """Runs of ``mask`` (indexed from ``lo``) to events in series coordinates."""
    out = []
    for s, e in merge_runs(mask, cfg.gap_min, cfg.d_min):
        seg = [_as_kind(c) for c in codes[s : e + 1]]
        n_up, n_down = seg.count(EventKind.UP), seg.count(EventKind.DOWN)
        kind = EventKind.UP if n_up >= n_down else EventKind.DOWN
        a, b = s + lo, e + lo
        mag = float(values[b] - values[a]) if values is not None else 0.0
        out.append(Event(kind, a, b, b - a + 1, mag, 1 if kind is EventKind.UP else -1, 0.0, 1.0, band))
    return EventSet(out, band, n)


def horizon_forecasts(model: ArmaxModel, y, exog, horizon: int) -> np.ndarray:
    """``out[t]`` = forecast of y[t] issued at t - horizon (NaN for t < horizon)."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    X = np.zeros((n, 0)) if exog is None or len(model.beta) == 0 else np.asarray(exog, dtype=float)
    xb = X @ model.beta if X.shape[1] else np.zeros(n)
    eps = residuals(y, X if X.shape[1] else None, model.c, model.phi1, model.theta1, model.beta)
    f = np.full(n, np.nan)
    f[1:] = model.c + model.phi1 * y[:-1] + model.theta1 * eps[:-1] + xb[1:]
    for _ in range(2, horizon + 1):
        nxt = np.full(n, np.nan)
        nxt[1:] = model.c + model.phi1 * f[:-1] + xb[1:]
        f = nxt
    return f


def _run_w1(bundle, cfg: WorkflowConfig, st: _Stages) -> WorkflowResult:
    with st("prepare"):
        x = normalize(bundle.power).values
        n = len(x)
        cut = int(round(n * cfg.train_frac))
        X = bundle.covariates.as_array() if cfg.armax_exog and bundle.covariates.columns else None
        if X is not None:
            X = (X - X[:cut].mean(axis=0)) / np.where(X[:cut].std(axis=0) > 0, X[:cut].std(axis=0), 1.0)
    with st("fit"):
        model = fit_armax(x[:cut], None if X is None else X[:cut])
    with st("forecast"):
        fc = {h: horizon_forecasts(model, x, X, h) for h in cfg.horizons}
    with st("events"):
        actual = extract_events(x[cut:], cfg.rba)
        pred = {h: extract_events(fc[h][cut:], cfg.rba) for h in cfg.horizons}
    with st("evaluate"):
        per_h = {}
        for h in cfg.horizons:
            m = _event_metrics(pred[h], actual, cfg.match)
            m.update({k: v for k, v in traj_metrics(fc[h][cut:], x[cut:]).items() if k != "r2_defined"})
            per_h[str(h)] = m
        head = per_h[str(cfg.horizons[0])]
        metrics = {"f1": head["f1"], "precision": head["precision"], "recall": head["recall"],
                   "r2": head["r2"], "rmse": head["rmse"], "mae": head["mae"], "per_horizon": per_h}
    shift = lambda es: EventSet([replace(e, onset=e.onset + cut, end=e.end + cut) for e in es.significant()],
                                es.source_band, n)
    return WorkflowResult(WorkflowId.W1, {h: shift(pred[h]) for h in cfg.horizons}, shift(actual),
                          fc[cfg.horizons[0]][cut:], metrics, st.timings, 0.0, (cut, n),
                          {"model": model, "forecasts": {h: fc[h][cut:] for h in cfg.horizons}})


def _fit_two_stage(F, y, codes, fc: TwoStageConfig, seed: int):
    det = fit_forest(F, y, replace(fc.detection(), seed=seed))
    sig = y == 1
    tf = None
    if len(np.unique(codes[sig])) >= 2:
        tf = fit_forest(F[sig], codes[sig], replace(fc.type(), seed=seed + 1))
    return det, tf


def _type_codes(tf, rows, fallback: int) -> np.ndarray:
    if tf is None:
        return np.full(len(rows), fallback, dtype=np.int64)
    return np.asarray(predict(tf, rows), dtype=np.int64)


def _run_w2(bundle, cfg: WorkflowConfig, st: _Stages) -> WorkflowResult:
    with st("prepare"):
        x = normalize(bundle.power).values
        n = len(x)
        cut = int(round(n * cfg.train_frac))
        reference = extract_events(x, cfg.rba)
        active = reference.active_mask(n, {EventKind.UP, EventKind.DOWN}).astype(np.int64)
        codes = _kind_codes(reference, n)
    with st("features"):
        F = build_features(bundle, cfg.features).values
    events, per_h, det_stats = {}, {}, {}
    actual = _significant_in(reference, cut, n)
    for lead in cfg.w2_leads:
        with st("train"):
            rows = np.arange(0, cut - lead)
            y = active[rows + lead]
            c = codes[rows + lead]
            det, tf = _fit_two_stage(F[rows], y, c, cfg.forest, cfg.seed + 31 * lead)
        with st("predict"):
            # row t predicts the state at t + lead; keep targets inside [cut, n)
            rows = np.arange(cut - lead, n - lead)
            p = detection_probability(det, F[rows])
            mask = p >= cfg.tau_event
            kinds = np.full(len(rows), TYPE_CODES[EventKind.UP])
            if mask.any():
                kinds[mask] = _type_codes(tf, F[rows][mask], TYPE_CODES[EventKind.UP])
            events[lead] = _events_from_mask(mask, kinds, cut, n, cfg, x)
        with st("evaluate"):
            m = _event_metrics(events[lead], actual, cfg.match)
            d = _pointwise(mask, active[cut:n] == 1)
            m.update({"detection_precision": d["precision"], "detection_recall": d["recall"],
                      "detection_f1": d["f1"]})
            per_h[str(lead)] = m
            det_stats[lead] = p
    head = per_h[str(cfg.w2_leads[0])]
    metrics = {k: head[k] for k in ("f1", "precision", "recall", "detection_precision", "detection_recall")}
    metrics.update({"r2": float("nan"), "mae": float("nan"), "per_horizon": per_h})
    return WorkflowResult(WorkflowId.W2, events, actual, None, metrics, st.timings, 0.0, (cut, n),
                          {"probabilities": det_stats})


def _event_first(bundle, cfg: WorkflowConfig, st: _Stages, wid: WorkflowId) -> WorkflowResult:
    horizons = cfg.horizons
    hmax = max(horizons)
    with st("decompose"):
        x = normalize(bundle.power).values
        n = len(x)
        cut = int(round(n * cfg.train_frac))
        if cut <= hmax + cfg.summary_window or n - cut < hmax + 1:
            raise ValueError(f"series of {n} rows too short for horizons up to {hmax}")
        bands = wavelet.decompose(x, cfg.wavelet)
    with st("events"):
        per_band = {b: extract_events(bands[b], cfg.rba, band=b) for b in bands.names}
        fused = fuse_events(list(per_band.values()))
        reference = extract_events(x, cfg.rba)
    with st("features"):
        fm = build_features(bundle, cfg.features)
        labels = label_horizons(reference, per_band, horizons, n=n)
        codes_now = _kind_codes(reference, n)
    with st("select"):
        train_rows = np.arange(0, cut - hmax)
        sel = select(fm.values[train_rows], labels.active[train_rows], replace(cfg.bandit, seed=cfg.seed),
                     fm.names, fm.categories)
        name_idx = {nm: i for i, nm in enumerate(fm.names)}
        if wid is WorkflowId.W4 and sel.per_horizon_rank:
            chosen = {h: [name_idx[nm] for nm in sel.per_horizon_rank[str(j)]] for j, h in enumerate(horizons)}
        else:
            chosen = {h: list(sel.indices) for h in horizons}
    loss = LossConfig.regression_variant() if wid is WorkflowId.W4 else LossConfig()
    probs, kinds, heads_out = {}, {}, {}
    with st("train"):
        models = {}
        for j, h in enumerate(horizons):
            cols = np.asarray(chosen[h])
            rows = np.arange(0, cut - h)
            F = fm.values[:, cols]
            y = labels.active[rows, j].astype(np.int64)
            c = codes_now[rows + h]
            std = Standardizer.fit(F[rows])
            Z = window_summary(std.transform(F), cfg.summary_lags, cfg.summary_window)
            Z /= np.sqrt(Z.shape[1])  # unit-scale rows keep one step size stable for every loss
            # the head backend's occurrence output must mean "active at t + h"
            occ = labels.occurrence[rows, j] if cfg.backend == "forest" else y
            tg = Targets(occ, labels.type[rows, j], labels.time_to_event[rows] / cfg.time_scale,
                         labels.magnitude[rows, j], labels.duration[rows, j] / cfg.time_scale,
                         mask=labels.occurrence[rows, j] == 1)
            head = MultiTaskHead.init(Z.shape[1], seed=cfg.seed + j)
            head, hist = sgd_fit(head, Z[rows], tg, loss, replace(cfg.train, seed=cfg.seed + j))
            det = tf = None
            if cfg.backend == "forest":
                det, tf = _fit_two_stage(F[rows], y, c, cfg.forest, cfg.seed + 97 * h)
            models[h] = (cols, det, tf, head, Z, hist)
    with st("predict"):
        lo = cut - hmax
        events = {}
        for h in horizons:
            cols, det, tf, head, Z, _ = models[h]
            rows = np.arange(lo, n - h)
            F = fm.values[rows][:, cols]
            out = head.predict(Z[rows])
            if cfg.backend == "forest":
                p = detection_probability(det, F)
                k = _type_codes(tf, F, TYPE_CODES[EventKind.UP])
            else:
                p = out["occ"]
                k = np.where(out["type"][:, 0] >= out["type"][:, 1], TYPE_CODES[EventKind.UP],
                             TYPE_CODES[EventKind.DOWN])
            # index by target time t + h
            prob_t = np.full(n, np.nan)
            kind_t = np.full(n, TYPE_CODES[EventKind.UP], dtype=np.int64)
            prob_t[rows + h] = p
            kind_t[rows + h] = k
            probs[h], kinds[h] = prob_t, kind_t
            heads_out[h] = {key: np.full((n,) + v.shape[1:], np.nan) for key, v in out.items()}
            for key, v in out.items():
                heads_out[h][key][rows] = v
            mask = prob_t[cut:] >= cfg.tau_event
            events[h] = _events_from_mask(mask, kind_t[cut:], cut, n, cfg, x)
    with st("reconstruct"):
        band_events, level = _composite_events(probs, kinds, heads_out, horizons, cut, n, cfg)
        rec = reconstruct_windows(x, cut, n, band_events, None, cfg.reconstruction, cfg.wavelet,
                                  approx_offset=level)
    with st("evaluate"):
        actual = _significant_in(reference, cut, n)
        per_h = {}
        for h in horizons:
            m = _event_metrics(events[h], actual, cfg.match)
            d = _pointwise(probs[h][cut:] >= cfg.tau_event, labels.active[cut - h : n - h,
                                                                            horizons.index(h)] == 1)
            m.update({"detection_precision": d["precision"], "detection_recall": d["recall"]})
            per_h[str(h)] = m
        tm = traj_metrics(rec.trajectory, x[cut:])
        f1s = [per_h[str(h)]["f1"] for h in horizons]
        metrics = {"f1": float(np.mean(f1s)), "r2": tm["r2"], "rmse": tm["rmse"], "mae": tm["mae"],
                   "per_horizon": per_h,
                   "predicted_baseline_share": float(np.mean(rec.chose_predicted))}
    extras = {"selection": sel, "fused": fused, "per_band": per_band, "chosen": chosen,
              "loss_history": {h: models[h][5] for h in horizons}}
    return WorkflowResult(wid, events, actual, rec.trajectory, metrics, st.timings, 0.0, (cut, n), extras)


def _composite_events(probs, kinds, heads_out, horizons, cut, n, cfg: WorkflowConfig):
    """Per-band events and a predicted approximation for reconstruction.

    Within a window whose origin is o, step o + k takes the prediction of the
    shortest horizon H >= k, which was issued at o + k - H <= o. Runs of the
    resulting occurrence mask become events; their band magnitudes come from
    the head output at the issuing row.
    """
    rc = cfg.reconstruction
    horizons = sorted(horizons)
    band_events = {b: [] for b in rc.reconstructed_bands}
    hint = np.full(n, np.nan)
    b_idx = {b: BANDS.index(b) for b in BANDS}
    for s in range(cut, n, rc.window):
        e = min(s + rc.window, n)
        L = e - s
        p = np.zeros(L)
        issue = np.zeros(L, dtype=np.int64)
        hsel = np.zeros(L, dtype=np.int64)
        for k in range(1, L + 1):
            H = next((h for h in horizons if h >= k), horizons[-1])
            t = s + k - 1
            p[k - 1] = probs[H][t] if np.isfinite(probs[H][t]) else 0.0
            issue[k - 1], hsel[k - 1] = t - H, H
        level = np.zeros(L)
        for a, b in merge_runs(p >= cfg.tau_event, cfg.gap_min, cfg.d_min):
            H, r = hsel[a], issue[a]
            mag = heads_out[H]["mag"][r]
            if not np.all(np.isfinite(mag)):
                continue
            kind = _as_kind(kinds[H][s + a])
            sign = 1.0 if kind is EventKind.UP else -1.0
            for band in rc.reconstructed_bands:
                m = sign * abs(float(mag[b_idx[band]]))
                band_events[band].append(Event(kind, s + a, s + b, b - a + 1, m, int(sign), 0.0, 1.0, band))
            step = sign * abs(float(mag[b_idx["approx"]])) * np.cumsum(event_shape(b - a + 1, rc.event_shape))
            level[a : b + 1] += step
            level[b + 1 :] += step[-1]
        hint[s:e] = level
    return band_events, hint


def run_workflow(workflow, bundle: DatasetBundle, config: WorkflowConfig | None = None) -> WorkflowResult:
    """Run one workflow end to end; failures surface as StageError."""
    wid = WorkflowId(workflow)
    cfg = config or WorkflowConfig()
    st = _Stages(wid.value)
    if wid is WorkflowId.W1:
        res = _run_w1(bundle, cfg, st)
    elif wid is WorkflowId.W2:
        res = _run_w2(bundle, cfg, st)
    else:
        res = _event_first(bundle, cfg, st, wid)
    res.total_time = st.total()
    res.timings = dict(st.timings)
    log.info("%s finished in %.2fs: %s", wid.value, res.total_time,
             {k: round(v, 3) for k, v in res.timings.items()})
    return res
