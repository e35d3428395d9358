"""Undecimated wavelet multiresolution analysis.

``decompose`` returns five same-length bands (approx, d4, d3, d2, d1 for the
default level 4) whose element-wise sum reproduces the input. The MRA is
computed in the frequency domain on a symmetrically extended copy of the
signal: each detail is the difference of two successive zero-phase smoothings,
so additivity holds by telescoping and bands stay aligned with timestamps.

``causal_coefficients`` gives the pyramid (MODWT) wavelet coefficients with
one-sided FIR filters, for use as features that must not peek ahead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np


class WaveletError(ValueError):
    pass


class SeriesTooShort(WaveletError):
    pass


class NonFinite(WaveletError):
    pass


class LengthMismatch(WaveletError):
    pass


@lru_cache(maxsize=None)
def daubechies(n_moments: int) -> np.ndarray:
    """Minimum-phase Daubechies scaling filter with ``n_moments`` vanishing moments.

    Built by spectral factorisation; ``daubechies(1)`` is Haar and
    ``daubechies(4)`` is the 8-tap 'db4' filter (reconstruction ordering).
    Coefficients sum to sqrt(2).
    """
    if n_moments < 1:
        raise WaveletError("need at least one vanishing moment")
    if n_moments == 1:
        return np.array([1.0, 1.0]) / np.sqrt(2.0)
    N = n_moments
    # P(y) = sum_k C(N-1+k, k) y^k with y = (2 - z - 1/z) / 4; multiply by z^(N-1)
    poly = np.zeros(2 * N - 1)
    base = np.array([-0.25, 0.5, -0.25])  # z^2 coefficients of (2 - z - 1/z)/4 * z
    for k in range(N):
        term = np.array([1.0])
        for _ in range(k):
            term = np.convolve(term, base)
        pad = (2 * N - 1 - len(term)) // 2
        poly[pad : pad + len(term)] += comb(N - 1 + k, k) * term
    roots = np.roots(poly)
    inside = roots[np.abs(roots) < 1.0]
    h = np.array([1.0])
    for _ in range(N):
        h = np.convolve(h, [1.0, 1.0])
    for r in inside:
        h = np.convolve(h, [1.0, -r])
    h = np.real(h)
    return h * (np.sqrt(2.0) / h.sum())


def wavelet_filters(family: str) -> tuple[np.ndarray, np.ndarray]:
    """(scaling, wavelet) filter pair for 'haar' or 'dbN'."""
    fam = family.lower()
    if fam == "haar":
        n = 1
    elif fam.startswith("db") and fam[2:].isdigit():
        n = int(fam[2:])
    else:
        raise WaveletError(f"unsupported wavelet family {family!r}")
    g = daubechies(n)
    L = len(g)
    h = np.array([(-1) ** l * g[L - 1 - l] for l in range(L)])
    return g, h


BAND_NAMES_L4 = ("approx", "d4", "d3", "d2", "d1")


def band_names(level: int) -> tuple[str, ...]:
    return ("approx",) + tuple(f"d{j}" for j in range(level, 0, -1))


@dataclass(frozen=True)
class WaveletConfig:
    family: str = "db4"
    level: int = 4
    boundary: str = "symmetric"

    def __post_init__(self):
        if self.level < 1:
            raise WaveletError("level must be >= 1")
        if self.boundary not in ("symmetric", "periodic"):
            raise WaveletError(f"unknown boundary mode {self.boundary!r}")
        wavelet_filters(self.family)

    def filter_length(self, j: int | None = None) -> int:
        """Support of the level-j equivalent filter."""
        j = self.level if j is None else j
        L = len(wavelet_filters(self.family)[0])
        return (2**j - 1) * (L - 1) + 1


@dataclass
class BandSet:
    bands: dict[str, np.ndarray]
    timestamps: np.ndarray | None = None
    boundary_mask: np.ndarray | None = None  # True within one filter length of an end
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.bands)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.bands[name]

    def __len__(self):
        return len(next(iter(self.bands.values())))

    @property
    def approx(self) -> np.ndarray:
        return self.bands["approx"]

    def details(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.bands.items() if k != "approx"}


def _smoothing_gains(n_fft: int, config: WaveletConfig) -> list[np.ndarray]:
    g, _ = wavelet_filters(config.family)
    freqs = np.fft.rfftfreq(n_fft)
    gains = []
    for j in range(1, config.level + 1):
        # |G(2^{j-1} f)|^2 / 2 : squared gain of the upsampled, rescaled scaling filter
        w = 2.0 * np.pi * freqs * 2 ** (j - 1)
        G = np.exp(-1j * np.outer(w, np.arange(len(g)))) @ g
        gains.append(np.abs(G) ** 2 / 2.0)
    return gains


def decompose(series, config: WaveletConfig | None = None, timestamps=None) -> BandSet:
    config = config or WaveletConfig()
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise WaveletError("series must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise NonFinite("series contains NaN or Inf")
    n = len(x)
    if n <= 2**config.level:
        raise SeriesTooShort(f"length {n} must exceed 2^level = {2 ** config.level}")

    support = config.filter_length()
    if config.boundary == "symmetric":
        pad = min(n, 2 * support)
        ext = np.pad(x, pad, mode="symmetric")
    else:
        pad, ext = 0, x
    spec = np.fft.rfft(ext)
    smooth = spec
    details = []
    for gain in _smoothing_gains(len(ext), config):
        nxt = smooth * gain
        details.append(smooth - nxt)
        smooth = nxt
    m = len(ext)
    crop = slice(pad, pad + n)
    bands = {"approx": np.fft.irfft(smooth, m)[crop]}
    for j in range(config.level, 0, -1):
        bands[f"d{j}"] = np.fft.irfft(details[j - 1], m)[crop]
    mask = np.zeros(n, dtype=bool)
    edge = min(support, n)
    mask[:edge] = True
    mask[n - edge :] = True
    return BandSet(
        bands,
        None if timestamps is None else np.asarray(timestamps),
        mask,
        {"family": config.family, "level": config.level, "boundary": config.boundary},
    )


def reconstruct(bands) -> np.ndarray:
    """Additive synthesis: the element-wise sum of all bands."""
    arrays = list(bands.bands.values()) if isinstance(bands, BandSet) else list(
        bands.values() if isinstance(bands, dict) else bands
    )
    if not arrays:
        raise LengthMismatch("no bands given")
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise LengthMismatch("bands have different lengths")
    out = np.zeros(n)
    for a in arrays:
        out = out + np.asarray(a, dtype=float)
    return out


def band_stats(bands: BandSet) -> dict[str, dict[str, float]]:
    """Population statistics per band; energy is the plain sum of squares."""
    stats = {}
    for name, v in bands.bands.items():
        v = np.asarray(v, dtype=float)
        stats[name] = {
            "mean": float(v.mean()),
            "std": float(v.std()),
            "min": float(v.min()),
            "max": float(v.max()),
            "energy": float(np.dot(v, v)),
        }
    return stats


@lru_cache(maxsize=None)
def _equivalent_filters(family: str, level: int) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    g, h = wavelet_filters(family)
    g_t, h_t = g / np.sqrt(2.0), h / np.sqrt(2.0)

    def upsample(f, j):
        if j == 1:
            return f
        out = np.zeros((len(f) - 1) * 2 ** (j - 1) + 1)
        out[:: 2 ** (j - 1)] = f
        return out

    wav, smooth = [], np.array([1.0])
    for j in range(1, level + 1):
        wav.append(np.convolve(smooth, upsample(h_t, j)))
        smooth = np.convolve(smooth, upsample(g_t, j))
    return tuple(wav), smooth


def causal_coefficients(series, config: WaveletConfig | None = None) -> dict[str, np.ndarray]:
    """One-sided MODWT coefficients; entry t depends only on samples <= t.

    The start is padded by repeating the first sample so no later value leaks
    backwards. Keys follow :func:`band_names` (``approx`` is the scaling
    coefficient series).
    """
    config = config or WaveletConfig()
    x = np.asarray(series, dtype=float)
    wav, smooth = _equivalent_filters(config.family, config.level)

    def fir(f):
        padded = np.concatenate([np.full(len(f) - 1, x[0]), x])
        return np.convolve(padded, f, mode="valid")

    out = {"approx": fir(smooth)}
    for j in range(config.level, 0, -1):
        out[f"d{j}"] = fir(wav[j - 1])
    return out
