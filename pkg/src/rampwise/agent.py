"""Contextual-bandit workflow selection over a persistent experience base.

A dataset is summarised by a fixed-order fingerprint. Past executions whose
fingerprints are cosine-similar to the current one vote for workflows
through a recency/source/confidence weighted mean reward; selection mixes
exploitation of that estimate with UCB exploration at an adaptive rate.
"""
from __future__ import annotations

import fcntl
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetBundle, normalize

log = logging.getLogger(__name__)

WORKFLOWS = ("W1", "W2", "W3", "W4")
FINGERPRINT_FIELDS = ("volatility", "trend_strength", "stationarity", "sample_entropy",
                      "acf1", "acf6", "acf12", "acf24", "regime_rate", "log_length")
SCHEMA_VERSION = 1
DAY = 86400.0


class TooShort(ValueError):
    pass


class ZeroNorm(ValueError):
    pass


class InvalidRecord(ValueError):
    pass


class EmptyWorkflowSet(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    sim_threshold: float = 0.85
    ucb_c: float = 2.0
    epsilon_base: float = 0.2
    epsilon_clamp: tuple[float, float] = (0.05, 0.60)
    recency_scale: float = 30.0  # days
    source_alpha: float = 0.95
    conf_denominator: int = 5
    contradiction_gap: float = 0.10
    contradiction_min_real: int = 3
    sample_cap: int = 20_000
    strata: int = 20
    share_limit: float = 0.35
    f_contr: float = 2.0
    f_local: float = 1.5
    cons_step: float = 0.1
    cons_max: float = 2.0
    data_ref: float = 10.0
    data_floor: bool = False  # True: f_data = max(1, sqrt(ref / n_real))
    workflows: tuple[str, ...] = WORKFLOWS

    def __post_init__(self):
        if not 0 < self.sim_threshold < 1:
            raise ValueError("sim_threshold must lie in (0, 1)")
        lo, hi = self.epsilon_clamp
        if not 0 <= lo <= hi <= 1:
            raise ValueError("epsilon_clamp must satisfy 0 <= lo <= hi <= 1")
        if self.sample_cap < 48 or self.strata < 1:
            raise ValueError("sample_cap must be >= 48 and strata >= 1")
        if not self.workflows:
            raise EmptyWorkflowSet("no workflows configured")


# --------------------------------------------------------------------------
# fingerprint


@dataclass(frozen=True)
class ContextFingerprint:
    values: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(a) for a in self.values)
        if len(v) != len(FINGERPRINT_FIELDS):
            raise ValueError(f"fingerprint needs {len(FINGERPRINT_FIELDS)} entries")
        if not all(math.isfinite(a) for a in v):
            raise ValueError("fingerprint entries must be finite")
        object.__setattr__(self, "values", v)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)

    def as_dict(self) -> dict:
        return dict(zip(FINGERPRINT_FIELDS, self.values))


def _stratified_blocks(x: np.ndarray, cap: int, strata: int, seed: int) -> list[np.ndarray]:
    n = len(x)
    if n <= cap:
        return [x]
    block = cap // strata
    edges = np.linspace(0, n, strata + 1).astype(np.int64)
    rng = np.random.default_rng(seed)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        start = a + int(rng.integers(0, max(b - a - block, 0) + 1))
        out.append(x[start : start + block])
    return out


def sample_entropy(x, m: int = 2, r: float | None = None) -> float:
    """SampEn(m, r) with Chebyshev distance and r = 0.2 std by default."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n <= m + 1:
        return 0.0
    r = 0.2 * x.std() if r is None else r
    if r <= 0:
        return 0.0

    def pairs(k):
        t = np.lib.stride_tricks.sliding_window_view(x, k)[: n - m]
        count = 0
        for i in range(len(t) - 1):
            d = np.max(np.abs(t[i + 1 :] - t[i]), axis=1)
            count += int(np.sum(d <= r))
        return count

    b, a = pairs(m), pairs(m + 1)
    return float(-np.log(max(a, 1) / max(b, 1))) + 0.0


def fingerprint(data, config: AgentConfig | None = None, seed: int = 0) -> ContextFingerprint:
    """Fixed-order context vector computed on a stratified temporal sample.

    The series is cut into ``strata`` equal-width time strata and one
    contiguous block per stratum (``sample_cap / strata`` rows at a seeded
    offset) is kept; lagged statistics are pooled within blocks.
    """
    cfg = config or AgentConfig()
    if isinstance(data, DatasetBundle):
        x = normalize(data.power).values
    else:
        x = np.asarray(data, dtype=float)
    n = len(x)
    if n < 48:
        raise TooShort(f"need at least 48 samples, got {n}")
    blocks = _stratified_blocks(x, cfg.sample_cap, cfg.strata, seed)
    s = np.concatenate(blocks)
    mu, sd = float(s.mean()), float(s.std())
    var = sd * sd

    volatility = sd / max(abs(mu), 1e-6)

    w = 25
    num = den = 0.0
    for b in blocks:
        if len(b) <= w:
            continue
        trend = np.convolve(b, np.ones(w) / w, mode="valid")
        resid = b[w // 2 : w // 2 + len(trend)] - trend
        num += float(np.sum((resid - resid.mean()) ** 2))
        seg = b[w // 2 : w // 2 + len(trend)]
        den += float(np.sum((seg - seg.mean()) ** 2))
    trend_strength = max(0.0, 1.0 - num / den) if den > 0 else 0.0

    chunks = np.array_split(s, 10)
    stationarity = float(np.std([c.mean() for c in chunks]) / sd) if sd > 0 else 0.0

    mid = blocks[len(blocks) // 2]
    samp = sample_entropy(mid[:1000])

    acfs = []
    for lag in (1, 6, 12, 24):
        num = cnt = 0.0
        for b in blocks:
            if len(b) > lag:
                num += float(np.sum((b[:-lag] - mu) * (b[lag:] - mu)))
                cnt += len(b) - lag
        acfs.append(num / cnt / var if cnt and var > 0 else 0.0)

    med = float(np.median(s))
    flips = steps = 0
    for b in blocks:
        if len(b) <= 24:
            continue
        sm = np.convolve(b, np.ones(24) / 24, mode="valid") - med
        sg = np.sign(sm)
        flips += int(np.sum(sg[1:] * sg[:-1] < 0))
        steps += len(sg) - 1
    regime_rate = 100.0 * flips / steps if steps else 0.0

    return ContextFingerprint((volatility, trend_strength, stationarity, samp, *acfs,
                               regime_rate, math.log(n)))


def cosine_sim(c1, c2) -> float:
    a = np.asarray(c1.values if isinstance(c1, ContextFingerprint) else c1, dtype=float)
    b = np.asarray(c2.values if isinstance(c2, ContextFingerprint) else c2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("context dimensions differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNorm("zero-norm context")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------------------
# reward and value estimates


def reward(metrics: dict, exec_time: float) -> float:
    """0.4 R2 + 0.2 (1 - MAE/500) + 0.3 F1 + 0.1 (1 - t/3600), unclamped."""
    r2, mae, f1 = float(metrics["r2"]), float(metrics["mae"]), float(metrics["f1"])
    if not all(math.isfinite(v) for v in (r2, mae, f1, exec_time)):
        raise ValueError("metrics must be finite")
    # summed in tenths so the perfect case is exactly 1.0 in floating point
    return (4.0 * r2 + 2.0 * (1.0 - mae / 500.0) + 3.0 * f1 + (1.0 - exec_time / 3600.0)) / 10.0


@dataclass(frozen=True)
class ExperienceRecord:
    context: tuple[float, ...]
    workflow: str
    metrics: dict
    exec_time: float
    timestamp: float
    source: str  # "synthetic" or "real"
    reward: float

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(float(v) for v in self.context))
        if self.source not in ("synthetic", "real"):
            raise InvalidRecord(f"unknown source {self.source!r}")
        expected = reward(self.metrics, self.exec_time)
        if abs(expected - self.reward) > 1e-9:
            raise InvalidRecord(f"stored reward {self.reward} != {expected} from metrics")

    @classmethod
    def create(cls, context, workflow, metrics, exec_time, timestamp, source="real"):
        m = {k: float(metrics[k]) for k in ("r2", "mae", "f1")}
        ctx = context.values if isinstance(context, ContextFingerprint) else context
        return cls(tuple(ctx), str(workflow), m, float(exec_time), float(timestamp), source,
                   reward(m, exec_time))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context"] = list(self.context)
        return d


def gamma(record: ExperienceRecord, n_real: int, n_i: int, now: float,
          config: AgentConfig | None = None) -> float:
    """Recency x source x confidence weight. The source factor alpha^n_real
    only discounts synthetic records; real records keep factor 1."""
    cfg = config or AgentConfig()
    age_days = max(now - record.timestamp, 0.0) / DAY
    rec = math.exp(-age_days / cfg.recency_scale)
    src = cfg.source_alpha ** n_real if record.source == "synthetic" else 1.0
    conf = min(n_i / cfg.conf_denominator, 1.0)
    return rec * src * conf


def q_value(workflow: str, similar, now: float, config: AgentConfig | None = None,
            n_real: int | None = None) -> float | None:
    """gamma-weighted mean reward of ``workflow`` among ``similar`` records;
    None when it has no records there."""
    recs = [r for r in similar if r.workflow == workflow]
    if not recs:
        return None
    if n_real is None:
        n_real = sum(1 for r in similar if r.source == "real")
    g = np.array([gamma(r, n_real, len(recs), now, config) for r in recs])
    if g.sum() <= 0:
        return None
    return float(np.dot(g, [r.reward for r in recs]) / g.sum())


def ucb(q: float | None, n_i: int, n_total: int, c: float = 2.0) -> float:
    if n_i <= 0:
        return math.inf
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    return (q if q is not None else 0.0) + c * math.sqrt(math.log(n_total) / n_i)


def adaptive_epsilon(f_contr: float = 1.0, f_local: float = 1.0, f_cons: float = 1.0,
                     f_data: float = 1.0, config: AgentConfig | None = None) -> float:
    cfg = config or AgentConfig()
    lo, hi = cfg.epsilon_clamp
    return float(np.clip(cfg.epsilon_base * f_contr * f_local * f_cons * f_data, lo, hi))


def detect_contradiction(similar, config: AgentConfig | None = None) -> dict:
    """Flag when the best synthetic workflow differs from the best real one,
    their mean rewards differ by more than the gap and there are enough real
    records."""
    cfg = config or AgentConfig()
    syn = [r for r in similar if r.source == "synthetic"]
    real = [r for r in similar if r.source == "real"]

    def best(recs):
        means = {}
        for w in sorted({r.workflow for r in recs}):
            means[w] = float(np.mean([r.reward for r in recs if r.workflow == w]))
        if not means:
            return None, None, means
        w = max(means, key=lambda k: (means[k], -sorted(means).index(k)))
        return w, means[w], means

    ws, ms, mean_s = best(syn)
    wr, mr, mean_r = best(real)
    flagged = (ws is not None and wr is not None and ws != wr
               and abs(ms - mr) > cfg.contradiction_gap and len(real) >= cfg.contradiction_min_real)
    return {"flagged": bool(flagged), "best_synthetic": ws, "best_real": wr,
            "mu_synthetic": ms, "mu_real": mr, "n_real": len(real),
            "synthetic_means": mean_s, "real_means": mean_r}


# --------------------------------------------------------------------------
# experience base


@dataclass
class ExperienceBase:
    records: list[ExperienceRecord] = field(default_factory=list)
    state: dict = field(default_factory=lambda: {"consecutive_exploits": 0})
    path: str | None = None

    def __len__(self):
        return len(self.records)

    def append(self, record: ExperienceRecord) -> None:
        if not isinstance(record, ExperienceRecord):
            raise InvalidRecord("expected an ExperienceRecord")
        # re-validate (dataclass could have been built with object.__setattr__ tricks)
        ExperienceRecord(**{**record.to_dict(), "context": tuple(record.context)})
        self.records.append(record)

    def lines(self) -> list[str]:
        head = json.dumps({"schema": "experience-base", "version": SCHEMA_VERSION, "state": self.state},
                          sort_keys=True)
        return [head] + [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]

    def save(self, path: str | None = None) -> str:
        """Atomic replace under an exclusive lock; on failure the previous
        file is left untouched."""
        path = path or self.path
        if path is None:
            raise IoFailure("no path to save the experience base to")
        d = os.path.dirname(os.path.abspath(path))
        try:
            os.makedirs(d, exist_ok=True)
            with open(path + ".lock", "w") as lock:
                fcntl.flock(lock, fcntl.LOCK_EX)
                fd, tmp = tempfile.mkstemp(dir=d, prefix=".expbase-")
                try:
                    with os.fdopen(fd, "w") as fh:
                        fh.write("\n".join(self.lines()) + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                    os.replace(tmp, path)
                except BaseException:
                    if os.path.exists(tmp):
                        os.unlink(tmp)
                    raise
        except OSError as exc:
            raise IoFailure(f"could not save experience base to {path}: {exc}") from exc
        self.path = path
        return path

    @classmethod
    def load(cls, path: str) -> "ExperienceBase":
        if not os.path.exists(path):
            return cls(path=path)
        try:
            with open(path) as fh:
                raw = [ln for ln in fh.read().splitlines() if ln.strip()]
        except OSError as exc:
            raise IoFailure(f"could not read {path}: {exc}") from exc
        if not raw:
            return cls(path=path)
        head = json.loads(raw[0])
        if head.get("schema") != "experience-base":
            raise InvalidRecord(f"{path} is not an experience base")
        if head.get("version") != SCHEMA_VERSION:
            raise InvalidRecord(f"unsupported experience base version {head.get('version')}")
        recs = []
        for ln in raw[1:]:
            d = json.loads(ln)
            recs.append(ExperienceRecord(tuple(d["context"]), d["workflow"], d["metrics"], d["exec_time"],
                                         d["timestamp"], d["source"], d["reward"]))
        return cls(recs, dict(head.get("state", {"consecutive_exploits": 0})), path)


def record_execution(base: ExperienceBase, record: ExperienceRecord, save: bool = True) -> ExperienceBase:
    """Append and, when the base has a path, persist atomically. A failed
    save rolls the in-memory append back."""
    base.append(record)
    if save and base.path:
        try:
            base.save()
        except IoFailure:
            base.records.pop()
            raise
    return base


@dataclass(frozen=True)
class ExpertRule:
    name: str
    prototype: tuple[float, ...]
    preferred: str
    metrics: dict  # nominal metrics of the preferred workflow
    exec_time: float = 600.0


def _proto(vol, trend, stat, ent, a1, a6, a12, a24, regime, loglen):
    return (vol, trend, stat, ent, a1, a6, a12, a24, regime, loglen)


# Context regions and the workflow an operator would try first there.
DEFAULT_RULES = (
    ExpertRule("volatile-multiscale", _proto(1.2, 0.30, 0.25, 0.9, 0.93, 0.55, 0.35, 0.30, 2.0, 10.0), "W3",
               {"r2": 0.85, "mae": 40.0, "f1": 0.80}),
    ExpertRule("long-record-rich-weather", _proto(0.8, 0.45, 0.20, 0.6, 0.97, 0.75, 0.55, 0.45, 1.0, 12.0), "W3",
               {"r2": 0.90, "mae": 30.0, "f1": 0.82}),
    ExpertRule("frequent-regime-shifts", _proto(1.0, 0.25, 0.35, 1.1, 0.90, 0.45, 0.25, 0.20, 3.0, 10.5), "W3",
               {"r2": 0.82, "mae": 45.0, "f1": 0.78}),
    ExpertRule("clustered-ramps", _proto(1.1, 0.35, 0.30, 0.8, 0.95, 0.60, 0.40, 0.35, 2.5, 11.0), "W3",
               {"r2": 0.86, "mae": 38.0, "f1": 0.81}),
    ExpertRule("smooth-persistent", _proto(0.4, 0.70, 0.10, 0.3, 0.99, 0.90, 0.80, 0.70, 0.3, 9.0), "W1",
               {"r2": 0.95, "mae": 20.0, "f1": 0.70}),
    ExpertRule("short-record", _proto(0.9, 0.40, 0.25, 0.7, 0.96, 0.65, 0.45, 0.40, 1.5, 7.5), "W2",
               {"r2": 0.70, "mae": 60.0, "f1": 0.76}),
    ExpertRule("noisy-weak-seasonality", _proto(1.4, 0.15, 0.20, 1.4, 0.85, 0.35, 0.20, 0.15, 3.5, 9.5), "W2",
               {"r2": 0.65, "mae": 70.0, "f1": 0.74}),
    ExpertRule("long-horizon-trend", _proto(0.6, 0.60, 0.15, 0.5, 0.98, 0.85, 0.70, 0.60, 0.8, 11.5), "W4",
               {"r2": 0.88, "mae": 32.0, "f1": 0.79}),
)


def bootstrap(base: ExperienceBase, rules=DEFAULT_RULES, per_rule: int = 9, preferred_share: int = 6,
              now: float = 0.0, seed: int = 0, config: AgentConfig | None = None) -> ExperienceBase:
    """Synthetic prior records: per rule, ``per_rule`` jittered contexts;
    ``preferred_share`` of them run the preferred workflow at its nominal
    metrics, the rest cycle through the other workflows at degraded metrics."""
    cfg = config or AgentConfig()
    rng = np.random.default_rng(seed)
    for rule in rules:
        others = [w for w in cfg.workflows if w != rule.preferred]
        for k in range(per_rule):
            ctx = np.asarray(rule.prototype) * (1.0 + rng.normal(0.0, 0.03, len(rule.prototype)))
            if k < preferred_share or not others:
                wf, m = rule.preferred, dict(rule.metrics)
            else:
                wf = others[(k - preferred_share) % len(others)]
                m = {"r2": rule.metrics["r2"] - 0.15, "mae": rule.metrics["mae"] * 1.5,
                     "f1": rule.metrics["f1"] - 0.15}
            base.append(ExperienceRecord.create(ctx, wf, m, rule.exec_time, now, "synthetic"))
    return base


# --------------------------------------------------------------------------
# selection


@dataclass
class Decision:
    workflow: str
    mode: str  # exploit, explore or forced
    rationale: dict


def agent_state(context, base: ExperienceBase, config: AgentConfig | None = None,
                now: float | None = None) -> dict:
    """Everything the selection rule looks at, without drawing randomness."""
    cfg = config or AgentConfig()
    now = time.time() if now is None else now
    ctx = context.values if isinstance(context, ContextFingerprint) else tuple(context)
    similar = [r for r in base.records if cosine_sim(ctx, r.context) > cfg.sim_threshold]
    contra = detect_contradiction(similar, cfg)
    if contra["flagged"]:
        similar = [r for r in similar if r.source == "real"]
    n_real = sum(1 for r in similar if r.source == "real")
    counts = {w: sum(1 for r in similar if r.workflow == w) for w in cfg.workflows}
    real_counts = {w: sum(1 for r in similar if r.workflow == w and r.source == "real") for w in cfg.workflows}
    total = sum(counts.values())
    q = {w: q_value(w, similar, now, cfg, n_real) for w in cfg.workflows}
    u = {w: ucb(q[w], counts[w], max(total, 1), cfg.ucb_c) for w in cfg.workflows}
    shares = {w: counts[w] / total if total else 0.0 for w in cfg.workflows}
    top_share = max(shares.values()) if total else 0.0
    least = min(cfg.workflows, key=lambda w: (counts[w], cfg.workflows.index(w)))
    immature = any(counts[w] < cfg.conf_denominator for w in cfg.workflows)
    f_contr = cfg.f_contr if contra["flagged"] else 1.0
    f_local = cfg.f_local if top_share > cfg.share_limit and immature else 1.0
    f_cons = min(1.0 + cfg.cons_step * base.state.get("consecutive_exploits", 0), cfg.cons_max)
    f_data = math.sqrt(cfg.data_ref / max(n_real, 1))
    if cfg.data_floor:
        f_data = max(1.0, f_data)
    eps = adaptive_epsilon(f_contr, f_local, f_cons, f_data, cfg)
    forced = total > 0 and top_share > cfg.share_limit and real_counts[least] == 0
    return {"n_similar": len(similar), "n_real": n_real, "counts": counts, "real_counts": real_counts,
            "shares": shares, "q": q, "ucb": u, "epsilon": eps,
            "factors": {"f_contr": f_contr, "f_local": f_local, "f_cons": f_cons, "f_data": f_data},
            "contradiction": contra, "forced_candidate": least if forced else None,
            "top_share": top_share}


def select_workflow(context, base: ExperienceBase, config: AgentConfig | None = None,
                    rng: np.random.Generator | None = None, now: float | None = None) -> Decision:
    cfg = config or AgentConfig()
    rng = rng or np.random.default_rng(0)
    st = agent_state(context, base, cfg, now)
    wfs = list(cfg.workflows)
    draw = rng.random()
    if st["forced_candidate"] is not None:
        wf, mode = st["forced_candidate"], "forced"
    elif any(math.isinf(st["ucb"][w]) for w in wfs) and all(st["q"][w] is None for w in wfs):
        wf, mode = wfs[int(rng.integers(len(wfs)))], "explore"
    elif draw < st["epsilon"] or any(st["q"][w] is None for w in wfs):
        best = max(st["ucb"].values())
        ties = [w for w in wfs if st["ucb"][w] == best]
        wf, mode = ties[int(rng.integers(len(ties)))] if len(ties) > 1 else ties[0], "explore"
    else:
        wf = max(wfs, key=lambda w: (st["q"][w], -wfs.index(w)))
        mode = "exploit"
    base.state["consecutive_exploits"] = base.state.get("consecutive_exploits", 0) + 1 if mode == "exploit" else 0
    return Decision(wf, mode, st)
