"""Special functions, log-domain helpers and seeded sampling."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

__all__ = [
    "log_gamma",
    "digamma",
    "log_sum_exp",
    "xlogy",
    "normalize_log",
    "make_rng",
    "spawn_seeds",
    "sample_dirichlet",
    "sample_categorical",
    "stirling_deviation",
]

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _as_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} requires finite positive arguments")
    return arr


def log_gamma(x):
    """ln Gamma(x) for x > 0. Scalars in, float out; arrays in, arrays out."""
    arr = _as_positive(x, "log_gamma")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def digamma(x):
    arr = _as_positive(x, "digamma")
    out = special.digamma(arr)
    return float(out) if out.ndim == 0 else out


def log_sum_exp(v, axis=None):
    """Stable log(sum(exp(v))). All -inf entries give -inf, never nan."""
    arr = np.asarray(v, dtype=float)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    if np.any(np.isnan(arr)) or np.any(arr == np.inf):
        raise ValueError("log_sum_exp expects finite values or -inf")
    m = np.max(arr, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def xlogy(x, y):
    """x * log(y) with the 0 * log 0 = 0 convention (also 0 * -inf = 0)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x == 0, 0.0, x * np.log(y))
    return out


def xmul(x, logv):
    """x * logv where logv may hold -inf; zero weights contribute exactly 0."""
    x = np.asarray(x, dtype=float)
    logv = np.asarray(logv, dtype=float)
    with np.errstate(invalid="ignore"):
        return np.where(x == 0, 0.0, x * logv)


def normalize_log(logits, axis=-1):
    """Turn unnormalized log-weights into probabilities along ``axis``.

    Raises ``FloatingPointError`` when a slice carries no mass at all.
    """
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise FloatingPointError("row with all-zero unnormalized mass")
    w = np.exp(logits - m)
    return w / np.sum(w, axis=axis, keepdims=True)


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox stream; ``seed`` may be an int or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent, reproducible substreams (one per restart / document / cell)."""
    return np.random.SeedSequence(int(seed)).spawn(count)


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    alpha = _as_positive(alpha, "sample_dirichlet")
    if alpha.ndim != 1:
        raise ValueError("alpha must be a vector")
    if alpha.size == 1:
        return np.ones(1)
    # numpy's gamma sampler is Marsaglia-Tsang with the alpha < 1 boost
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total == 0.0:
        # every coordinate underflowed; only possible for tiny alpha
        out = np.zeros_like(alpha)
        out[rng.choice(alpha.size, p=alpha / alpha.sum())] = 1.0
        return out
    p = g / total
    return p / p.sum()


def sample_categorical(p, size, rng: np.random.Generator) -> np.ndarray:
    """0-based categorical draws by inverse CDF."""
    cdf = np.cumsum(np.asarray(p, dtype=float))
    cdf[-1] = 1.0
    u = rng.random(size)
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def stirling_deviation(x):
    """ln Gamma(x) - (x ln x - x - ln(x)/2); tends to ln sqrt(2 pi)."""
    x = _as_positive(x, "stirling_deviation")
    return special.gammaln(x) - (x * np.log(x) - x - 0.5 * np.log(x))
