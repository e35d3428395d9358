"""Synthetic wind-power corpora with planted ramps and known ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CovariateTable, DatasetBundle, PowerSeries
from .rba import Event, EventKind, EventSet


@dataclass(frozen=True)
class SynthConfig:
    ramps: int = 100
    seed: int = 0
    n: int | None = None  # default: ramps * mean_spacing
    mean_spacing: int = 100
    min_gap: int = 30
    duration_range: tuple[int, int] = (4, 10)
    magnitude_range: tuple[float, float] = (0.25, 0.5)
    level_bounds: tuple[float, float] = (0.1, 0.85)
    regime_amplitude: float = 0.05
    regime_period: float = 700.0
    ar_phi: float = 0.9
    ar_sigma: float = 0.004
    noise_sigma: float = 0.004
    rated_power: float = 475.0
    start: int = 1_577_836_800  # 2020-01-01T00:00Z
    step: int = 3600


def _plant(cfg: SynthConfig, rng: np.random.Generator, n: int):
    """Piecewise-linear level process with ``cfg.ramps`` transitions."""
    lo, hi = cfg.level_bounds
    level = np.empty(n)
    events = []
    spacing = n / max(cfg.ramps, 1)
    t, cur = 0, rng.uniform(lo + 0.1, hi - 0.1)
    for k in range(cfg.ramps):
        onset = int(round((k + rng.uniform(0.25, 0.75)) * spacing))
        onset = max(onset, t + cfg.min_gap if k else cfg.min_gap // 2)
        dur = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
        if onset + dur + 2 >= n:
            break
        mag = rng.uniform(*cfg.magnitude_range)
        up_ok, down_ok = cur + mag <= hi, cur - mag >= lo
        if up_ok and down_ok:
            sign = 1.0 if rng.random() < 0.5 else -1.0
        elif up_ok or down_ok:
            sign = 1.0 if up_ok else -1.0
        else:
            mag = min(hi - cur, cur - lo)
            sign = 1.0 if hi - cur >= cur - lo else -1.0
        level[t : onset + 1] = cur
        nxt = cur + sign * mag
        level[onset : onset + dur + 1] = cur + sign * mag * np.arange(dur + 1) / dur
        events.append((onset, onset + dur, sign * mag))
        cur, t = nxt, onset + dur + 1
    level[t:] = cur
    return level, events


def synth_generate(config: SynthConfig | None = None):
    """Return ``(bundle, truth)``: a bundle in MW plus the planted ramp events.

    Signal = planted ramps on a slow sinusoidal regime, AR(1) noise and i.i.d.
    noise. Covariates: wind speed (through an inverse cubic power curve of the
    noiseless signal plus noise), direction, pressure (which leads ramps),
    temperature. Truth events index the normalised series.
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n or cfg.ramps * cfg.mean_spacing
    level, planted = _plant(cfg, rng, n)
    t = np.arange(n)
    regime = cfg.regime_amplitude * np.sin(2 * np.pi * t / cfg.regime_period + rng.uniform(0, 2 * np.pi))
    ar = np.zeros(n)
    innov = rng.normal(0.0, cfg.ar_sigma, n)
    for i in range(1, n):
        ar[i] = cfg.ar_phi * ar[i - 1] + innov[i]
    clean = np.clip(level + regime, 0.0, 1.0)
    norm = np.clip(clean + ar + rng.normal(0.0, cfg.noise_sigma, n), 0.0, 1.0)

    wind = 3.0 + 9.0 * np.cbrt(clean) + rng.normal(0.0, 0.15, n)
    direction = (220.0 + 40.0 * np.sin(2 * np.pi * t / 1500.0) + rng.normal(0, 5.0, n)) % 360.0
    pressure = 1013.0 - 25.0 * (np.concatenate([clean[3:], np.repeat(clean[-1], 3)]) - 0.5) + rng.normal(0, 0.5, n)
    temperature = 10.0 + 6.0 * np.sin(2 * np.pi * t / (24 * 365)) + 3.0 * np.sin(2 * np.pi * t / 24) + rng.normal(0, 0.3, n)

    ts = cfg.start + t.astype(np.int64) * cfg.step
    bundle = DatasetBundle(
        PowerSeries(ts, norm * cfg.rated_power, cfg.rated_power),
        CovariateTable({
            "wind_speed": wind,
            "wind_direction": direction,
            "pressure": pressure,
            "temperature": temperature,
        }),
    )
    truth = []
    for onset, end, mag in planted:
        kind = EventKind.UP if mag > 0 else EventKind.DOWN
        truth.append(Event(kind, onset, end, end - onset + 1, float(norm[end] - norm[onset]),
                           1 if mag > 0 else -1, 0.0, 1.0, "truth"))
    return bundle, EventSet(truth, "truth")
