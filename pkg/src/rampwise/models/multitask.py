"""Linear multi-task event head and its band/task-weighted objective.

Heads on a window summary z:
    occurrence  sigma(z W_occ + b)            binary cross-entropy
    type        softmax(z W_type + b), 3-way  cross-entropy on event rows
    time        relu(z W_time + b)            Huber on event rows
    magnitude   z W_mag + b, one per band     Huber (or MSE) on event rows
    duration    relu(z W_dur + b), per band   Huber (or MAE) on event rows

Magnitude and duration losses are band-weighted means of the per-band losses.
Gradients are analytic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

BANDS = ("approx", "d4", "d3", "d2", "d1")
TASKS = ("occ", "type", "time", "mag", "dur")
N_TYPES = 3
_EPS = 1e-15


class ShapeMismatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history or []


def huber(residual, delta: float = 1.0):
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(np.asarray(residual, dtype=float))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return out if out.ndim else float(out)


def huber_grad(residual, delta: float = 1.0):
    r = np.asarray(residual, dtype=float)
    return np.clip(r, -delta, delta)


def _pointwise(kind: str, r, delta):
    if kind == "huber":
        return huber(r, delta), huber_grad(r, delta)
    if kind == "mse":
        return r * r, 2.0 * r
    if kind == "mae":
        return np.abs(r), np.sign(r)
    raise ValueError(f"unknown loss {kind!r}")


@dataclass(frozen=True)
class LossConfig:
    task_weights: tuple[float, ...] = (2.0, 1.2, 1.0, 2.0, 2.0)  # occ, type, time, mag, dur
    band_weights: tuple[float, ...] = (1.5, 4.0, 2.5, 0.5, 0.5)  # approx, d4, d3, d2, d1
    huber_delta: float = 1.0
    magnitude_loss: str = "huber"
    duration_loss: str = "huber"

    def __post_init__(self):
        if len(self.task_weights) != 5 or len(self.band_weights) != len(BANDS):
            raise ValueError("need five task weights and one weight per band")
        if min(self.task_weights) <= 0 or min(self.band_weights) <= 0:
            raise ValueError("weights must be positive")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.magnitude_loss not in ("huber", "mse"):
            raise ValueError("magnitude_loss must be 'huber' or 'mse'")
        if self.duration_loss not in ("huber", "mae"):
            raise ValueError("duration_loss must be 'huber' or 'mae'")

    @classmethod
    def regression_variant(cls, **kw) -> "LossConfig":
        """Squared-error magnitude and absolute-error duration losses."""
        return cls(magnitude_loss="mse", duration_loss="mae", **kw)


@dataclass
class Targets:
    occ: np.ndarray  # N, {0, 1}
    type: np.ndarray  # N, int codes 0..2
    time: np.ndarray  # N
    mag: np.ndarray  # N x bands
    dur: np.ndarray  # N x bands
    mask: np.ndarray | None = None  # rows that carry an event; default occ == 1

    def __post_init__(self):
        self.occ = np.asarray(self.occ, dtype=float)
        self.type = np.asarray(self.type, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=float)
        self.mag = np.asarray(self.mag, dtype=float)
        self.dur = np.asarray(self.dur, dtype=float)
        self.mask = self.occ > 0.5 if self.mask is None else np.asarray(self.mask, dtype=bool)
        n = len(self.occ)
        for name in ("type", "time", "mask"):
            if getattr(self, name).shape != (n,):
                raise ShapeMismatch(f"{name} must have shape ({n},)")
        for name in ("mag", "dur"):
            if getattr(self, name).shape != (n, len(BANDS)):
                raise ShapeMismatch(f"{name} must have shape ({n}, {len(BANDS)})")

    def __len__(self):
        return len(self.occ)

    def take(self, idx) -> "Targets":
        return Targets(self.occ[idx], self.type[idx], self.time[idx], self.mag[idx],
                       self.dur[idx], self.mask[idx])


PARAM_SHAPES = {
    "W_occ": lambda d: (d,), "b_occ": lambda d: (),
    "W_type": lambda d: (d, N_TYPES), "b_type": lambda d: (N_TYPES,),
    "W_time": lambda d: (d,), "b_time": lambda d: (),
    "W_mag": lambda d: (d, len(BANDS)), "b_mag": lambda d: (len(BANDS),),
    "W_dur": lambda d: (d, len(BANDS)), "b_dur": lambda d: (len(BANDS),),
}


@dataclass
class MultiTaskHead:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_inputs: int, seed: int = 0, scale: float = 0.01) -> "MultiTaskHead":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            shp = shape(n_inputs)
            params[name] = rng.normal(0.0, scale, shp) if name.startswith("W") else np.zeros(shp)
        return cls(params)

    @property
    def n_inputs(self) -> int:
        return len(self.params["W_occ"])

    def copy(self) -> "MultiTaskHead":
        return MultiTaskHead({k: np.array(v, copy=True) for k, v in self.params.items()}, dict(self.meta))

    def forward(self, Z) -> dict[str, np.ndarray]:
        """Pre-activations and outputs for rows of Z."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.n_inputs:
            raise ShapeMismatch(f"expected inputs of width {self.n_inputs}")
        p = self.params
        a_occ = Z @ p["W_occ"] + p["b_occ"]
        a_type = Z @ p["W_type"] + p["b_type"]
        a_time = Z @ p["W_time"] + p["b_time"]
        a_mag = Z @ p["W_mag"] + p["b_mag"]
        a_dur = Z @ p["W_dur"] + p["b_dur"]
        shifted = a_type - a_type.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        return {
            "a_occ": a_occ, "a_type": a_type, "a_time": a_time, "a_dur": a_dur,
            "occ": 0.5 * (1.0 + np.tanh(0.5 * a_occ)),
            "type": ex / ex.sum(axis=1, keepdims=True),
            "time": np.maximum(a_time, 0.0),
            "mag": a_mag,
            "dur": np.maximum(a_dur, 0.0),
        }

    def predict(self, Z) -> dict[str, np.ndarray]:
        out = self.forward(Z)
        return {k: out[k] for k in TASKS}

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.params[k]) for k in PARAM_SHAPES])

    def with_flat(self, vec) -> "MultiTaskHead":
        vec = np.asarray(vec, dtype=float)
        params, i = {}, 0
        for k in PARAM_SHAPES:
            shp = np.shape(self.params[k])
            size = int(np.prod(shp)) if shp else 1
            params[k] = vec[i : i + size].reshape(shp) if shp else np.float64(vec[i])
            i += size
        return MultiTaskHead(params, dict(self.meta))

    def to_json(self) -> str:
        return json.dumps({"version": 1, "meta": self.meta,
                           "params": {k: np.asarray(v).tolist() for k, v in self.params.items()}})

    @classmethod
    def from_json(cls, text: str) -> "MultiTaskHead":
        d = json.loads(text)
        return cls({k: np.asarray(v, dtype=float) for k, v in d["params"].items()}, d.get("meta", {}))


def _masked_mean(values, mask):
    m = int(mask.sum())
    if m == 0:
        return 0.0
    return float(values[mask].sum() / m)


def multitask_loss(predictions: dict, targets: Targets, config: LossConfig | None = None) -> dict:
    """Weighted objective and its components.

    ``predictions`` holds ``occ`` (N), ``type`` (N x 3 probabilities),
    ``time`` (N), ``mag`` and ``dur`` (N x bands).
    """
    cfg = config or LossConfig()
    n = len(targets)
    shapes = {"occ": (n,), "type": (n, N_TYPES), "time": (n,), "mag": (n, len(BANDS)),
              "dur": (n, len(BANDS))}
    for k, shp in shapes.items():
        if np.shape(predictions[k]) != shp:
            raise ShapeMismatch(f"prediction {k!r} has shape {np.shape(predictions[k])}, expected {shp}")
    mask = targets.mask
    p = np.clip(np.asarray(predictions["occ"], dtype=float), _EPS, 1 - _EPS)
    y = targets.occ
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    # exact zero for saturated, correct probabilities
    bce = np.where(np.asarray(predictions["occ"]) == y, 0.0, bce)
    l_occ = float(bce.mean()) if n else 0.0

    probs = np.asarray(predictions["type"], dtype=float)
    picked = probs[np.arange(n), np.clip(targets.type, 0, N_TYPES - 1)]
    ce = np.where(picked >= 1.0, 0.0, -np.log(np.clip(picked, _EPS, 1.0)))
    l_type = _masked_mean(ce, mask)

    l_time = _masked_mean(huber(predictions["time"] - targets.time, cfg.huber_delta), mask)

    bw = np.asarray(cfg.band_weights) / np.sum(cfg.band_weights)
    lm, _ = _pointwise(cfg.magnitude_loss, predictions["mag"] - targets.mag, cfg.huber_delta)
    ld, _ = _pointwise(cfg.duration_loss, predictions["dur"] - targets.dur, cfg.huber_delta)
    l_mag = float(sum(bw[b] * _masked_mean(lm[:, b], mask) for b in range(len(BANDS))))
    l_dur = float(sum(bw[b] * _masked_mean(ld[:, b], mask) for b in range(len(BANDS))))

    parts = {"occ": l_occ, "type": l_type, "time": l_time, "mag": l_mag, "dur": l_dur}
    return {"total": combine(parts, cfg), **parts}


def combine(parts: dict, config: LossConfig | None = None) -> float:
    cfg = config or LossConfig()
    return float(sum(w * parts[k] for w, k in zip(cfg.task_weights, TASKS)))


def head_loss(head: MultiTaskHead, Z, targets: Targets, config: LossConfig | None = None) -> float:
    return multitask_loss(head.predict(Z), targets, config)["total"]


def head_gradient(head: MultiTaskHead, Z, targets: Targets,
                  config: LossConfig | None = None) -> dict[str, np.ndarray]:
    """Analytic gradient of the total loss w.r.t. every parameter block."""
    cfg = config or LossConfig()
    Z = np.asarray(Z, dtype=float)
    n = len(Z)
    out = head.forward(Z)
    w_occ, w_type, w_time, w_mag, w_dur = cfg.task_weights
    mask = targets.mask.astype(float)
    m = mask.sum()
    inv_m = 1.0 / m if m > 0 else 0.0

    g_occ = w_occ * (out["occ"] - targets.occ) / max(n, 1)

    onehot = np.zeros((n, N_TYPES))
    onehot[np.arange(n), np.clip(targets.type, 0, N_TYPES - 1)] = 1.0
    g_type = w_type * (out["type"] - onehot) * (mask * inv_m)[:, None]

    g_time = w_time * huber_grad(out["time"] - targets.time, cfg.huber_delta) * mask * inv_m
    g_time = g_time * (out["a_time"] > 0)

    bw = np.asarray(cfg.band_weights) / np.sum(cfg.band_weights)
    _, dm = _pointwise(cfg.magnitude_loss, out["mag"] - targets.mag, cfg.huber_delta)
    g_mag = w_mag * dm * bw[None, :] * (mask * inv_m)[:, None]
    _, dd = _pointwise(cfg.duration_loss, out["dur"] - targets.dur, cfg.huber_delta)
    g_dur = w_dur * dd * bw[None, :] * (mask * inv_m)[:, None] * (out["a_dur"] > 0)

    return {
        "W_occ": Z.T @ g_occ, "b_occ": np.float64(g_occ.sum()),
        "W_type": Z.T @ g_type, "b_type": g_type.sum(axis=0),
        "W_time": Z.T @ g_time, "b_time": np.float64(g_time.sum()),
        "W_mag": Z.T @ g_mag, "b_mag": g_mag.sum(axis=0),
        "W_dur": Z.T @ g_dur, "b_dur": g_dur.sum(axis=0),
    }


def flat_gradient(grad: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grad[k]) for k in PARAM_SHAPES])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be positive; epochs and batch_size >= 1")


def sgd_fit(head: MultiTaskHead, Z, targets: Targets, loss: LossConfig | None = None,
            train: TrainConfig | None = None):
    """Mini-batch gradient descent with a seeded shuffle per epoch.

    Returns ``(head, history)`` where history holds the full-data loss after
    each epoch. A non-finite loss raises DivergenceDetected carrying the last
    finite state.
    """
    loss = loss or LossConfig()
    tc = train or TrainConfig()
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("inputs must be finite")
    rng = np.random.default_rng(tc.seed)
    cur = head.copy()
    good = cur.copy()
    history = []
    n = len(Z)
    for _ in range(tc.epochs):
        order = rng.permutation(n)
        for s in range(0, n, tc.batch_size):
            idx = order[s : s + tc.batch_size]
            g = head_gradient(cur, Z[idx], targets.take(idx), loss)
            for k in cur.params:
                step = g[k] + (tc.l2 * cur.params[k] if k.startswith("W") else 0.0)
                cur.params[k] = cur.params[k] - tc.lr * step
        total = head_loss(cur, Z, targets, loss)
        if not np.isfinite(total) or not all(np.all(np.isfinite(v)) for v in cur.params.values()):
            raise DivergenceDetected("loss became non-finite", good, history)
        history.append(total)
        good = cur.copy()
    return cur, history


def window_summary(X, k: int = 3, window: int = 24) -> np.ndarray:
    """Causal latent input: the last ``k`` rows concatenated with trailing
    rolling mean and std over ``window`` rows."""
    X = np.asarray(X, dtype=float)
    parts = []
    for lag in range(k):
        sh = np.empty_like(X)
        if lag:
            sh[lag:] = X[:-lag]
            sh[:lag] = X[0]
        else:
            sh[:] = X
        parts.append(sh)
    df = pd.DataFrame(X).rolling(window, min_periods=1)
    parts.append(df.mean().to_numpy())
    parts.append(df.std(ddof=0).fillna(0.0).to_numpy())
    return np.hstack(parts)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale
