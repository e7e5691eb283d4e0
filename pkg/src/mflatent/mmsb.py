"""Mixed membership stochastic blockmodel: sampling, partially grouped (PG)
and fully factorized (FF) CAVI, their ELBOs, the collapsed energy, and the
per-pair membership correlations of a PG fit.

Ordered pairs (i, j), i != j, are stored in row-major order; ``pair_index``
gives the (i, j) arrays. PG responsibilities are (P, K, K) arrays indexed
[pair, sender group, receiver group].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .lda import dirichlet_expected_log, dirichlet_log_norm
from .numerics import make_rng, normalize_log, sample_categorical, sample_dirichlet, spawn_seeds, xlogy, xmul


@dataclass(frozen=True)
class MmsbParams:
    n: int
    alpha: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "n", int(self.n))
        if self.n < 2:
            raise ValueError("need at least two nodes")
        if alpha.ndim != 1 or np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("alpha must be a vector of positive reals")
        if B.shape != (alpha.size, alpha.size):
            raise ValueError("B must be K x K")
        if np.any(B < 0) or np.any(B > 1):
            raise ValueError("B entries must lie in [0, 1]")
        if np.all(B == 0) or np.all(B == 1):
            raise ValueError("B may be neither the zero matrix nor all ones")

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def P(self) -> int:
        return self.n * (self.n - 1)

    @property
    def log_B(self):
        with np.errstate(divide="ignore"):
            return np.log(self.B), np.log1p(-self.B)


@lru_cache(maxsize=32)
def _pairs(n: int):
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def pair_index(n: int):
    """Row-major (i, j) arrays over the n(n-1) ordered pairs."""
    return _pairs(n)


def check_graph(params: MmsbParams, X) -> np.ndarray:
    X = np.asarray(X)
    if X.shape != (params.n, params.n):
        raise ValueError("X must be n x n")
    i, j = pair_index(params.n)
    vals = X[i, j]
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("off-diagonal entries of X must be 0 or 1")
    out = np.zeros((params.n, params.n), dtype=np.int8)
    out[i, j] = vals
    return out


def pair_log_lik(params: MmsbParams, X) -> np.ndarray:
    """(P, K, K) table of log B or log(1 - B) per pair, selected by the edge."""
    i, j = pair_index(params.n)
    lb, l1b = params.log_B
    x = X[i, j].astype(bool)
    return np.where(x[:, None, None], lb[None], l1b[None])


@dataclass
class PgState:
    y: np.ndarray
    gamma: np.ndarray

    def copy(self):
        return PgState(self.y.copy(), self.gamma.copy())


@dataclass
class FfState:
    y_out: np.ndarray
    y_in: np.ndarray
    gamma: np.ndarray

    def copy(self):
        return FfState(self.y_out.copy(), self.y_in.copy(), self.gamma.copy())

    def as_pg(self) -> PgState:
        return PgState(self.y_out[:, :, None] * self.y_in[:, None, :], self.gamma.copy())


@dataclass
class MmsbFit:
    method: str
    state: object
    elbo_trace: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False
    seed: object = None

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]


@dataclass
class MmsbResult:
    best: MmsbFit
    fits: list

    @property
    def best_elbo(self) -> float:
        return self.best.elbo


def mmsb_sample(params: MmsbParams, seed: int):
    """Returns (X, pi, z_out, z_in) with z arrays over row-major pairs."""
    rng = make_rng(seed)
    n, K = params.n, params.K
    pi = np.stack([sample_dirichlet(params.alpha, rng) for _ in range(n)])
    i, j = pair_index(n)
    z_out = np.empty(i.size, dtype=np.int64)
    z_in = np.empty(i.size, dtype=np.int64)
    u_out = rng.random(i.size)
    u_in = rng.random(i.size)
    cdf = np.cumsum(pi, axis=1)
    cdf[:, -1] = 1.0
    for p in range(i.size):
        z_out[p] = np.searchsorted(cdf[i[p]], u_out[p], side="right")
        z_in[p] = np.searchsorted(cdf[j[p]], u_in[p], side="right")
    edges = rng.random(i.size) < params.B[z_out, z_in]
    X = np.zeros((n, n), dtype=np.int8)
    X[i, j] = edges
    return X, pi, z_out, z_in


def membership_counts(params: MmsbParams, X, z_out, z_in):
    """N (n, K), A (K, K) and M (K, K) for one joint assignment."""
    n, K = params.n, params.K
    i, j = pair_index(n)
    N = np.zeros((n, K), dtype=np.int64)
    np.add.at(N, (i, z_out), 1)
    np.add.at(N, (j, z_in), 1)
    A = np.zeros((K, K), dtype=np.int64)
    np.add.at(A, (z_out, z_in), 1)
    M = np.zeros((K, K), dtype=np.int64)
    x = X[i, j].astype(bool)
    np.add.at(M, (z_out[x], z_in[x]), 1)
    return N, A, M


def mmsb_collapsed_energy(params: MmsbParams, X, z_out, z_in):
    """Log collapsed posterior weight; batched over leading axes of z.

    -inf for impossible configurations (an edge on B = 0, a non-edge on B = 1).
    """
    X = check_graph(params, X)
    n, K = params.n, params.K
    z_out = np.asarray(z_out, dtype=np.int64)
    z_in = np.asarray(z_in, dtype=np.int64)
    single = z_out.ndim == 1
    z_out = np.atleast_2d(z_out)
    z_in = np.atleast_2d(z_in)
    if z_out.shape != z_in.shape or z_out.shape[-1] != params.P:
        raise ValueError("assignment must cover every ordered pair")
    if z_out.size and (min(z_out.min(), z_in.min()) < 0 or max(z_out.max(), z_in.max()) >= K):
        raise ValueError("group index out of range")
    i, j = pair_index(n)
    ll = pair_log_lik(params, X)
    p_idx = np.arange(params.P)
    with np.errstate(invalid="ignore"):
        out = ll[p_idx[None, :], z_out, z_in].sum(axis=1)
    for node in range(n):
        send = z_out[:, i == node]
        recv = z_in[:, j == node]
        counts = np.stack([(send == ell).sum(axis=1) + (recv == ell).sum(axis=1) for ell in range(K)], axis=1)
        out = out + gammaln(counts + params.alpha).sum(axis=1)
    out = out - n * gammaln(2 * n - 2 + params.alpha.sum())
    return float(out[0]) if single else out


def _node_sums(n, i, j, out_marg, in_marg):
    """Sum of sender marginals by i plus receiver marginals by j -> (n, K)."""
    K = out_marg.shape[1]
    tot = np.empty((n, K))
    for ell in range(K):
        tot[:, ell] = np.bincount(i, weights=out_marg[:, ell], minlength=n) + np.bincount(
            j, weights=in_marg[:, ell], minlength=n)
    return tot


def pg_responsibilities(params: MmsbParams, ll, gamma) -> np.ndarray:
    i, j = pair_index(params.n)
    elog = dirichlet_expected_log(gamma)
    logits = elog[i][:, :, None] + elog[j][:, None, :] + ll
    K = params.K
    try:
        y = normalize_log(logits.reshape(-1, K * K), axis=1)
    except FloatingPointError:
        raise ValueError("a pair has no possible (sender, receiver) groups under B") from None
    return y.reshape(-1, K, K)


def pg_gamma(params: MmsbParams, y) -> np.ndarray:
    i, j = pair_index(params.n)
    return params.alpha[None, :] + _node_sums(params.n, i, j, y.sum(axis=2), y.sum(axis=1))


def pg_cavi_step(params: MmsbParams, X, state: PgState) -> PgState:
    """All pair tables from the frozen gamma, then one gamma refresh."""
    ll = pair_log_lik(params, check_graph(params, X))
    y = pg_responsibilities(params, ll, state.gamma)
    return PgState(y, pg_gamma(params, y))


def _ff_out(params, ll, elog, y_in):
    i, _ = pair_index(params.n)
    with np.errstate(invalid="ignore"):
        field_ = np.where(y_in[:, None, :] == 0, 0.0, y_in[:, None, :] * ll).sum(axis=2)
    try:
        return normalize_log(elog[i] + field_, axis=1)
    except FloatingPointError:
        raise ValueError("a pair has no possible sender group under B") from None


def _ff_in(params, ll, elog, y_out):
    _, j = pair_index(params.n)
    with np.errstate(invalid="ignore"):
        field_ = np.where(y_out[:, :, None] == 0, 0.0, y_out[:, :, None] * ll).sum(axis=1)
    try:
        return normalize_log(elog[j] + field_, axis=1)
    except FloatingPointError:
        raise ValueError("a pair has no possible receiver group under B") from None


def ff_cavi_step(params: MmsbParams, X, state: FfState) -> FfState:
    """Sender tables, then receiver tables (using the new sender tables), then gamma."""
    ll = pair_log_lik(params, check_graph(params, X))
    elog = dirichlet_expected_log(state.gamma)
    y_out = _ff_out(params, ll, elog, state.y_in)
    y_in = _ff_in(params, ll, elog, y_out)
    i, j = pair_index(params.n)
    gamma = params.alpha[None, :] + _node_sums(params.n, i, j, y_out, y_in)
    return FfState(y_out, y_in, gamma)


def _elbo_common(params, gamma):
    elog = dirichlet_expected_log(gamma)
    prior = params.n * dirichlet_log_norm(params.alpha) + np.sum((params.alpha - 1.0) * elog)
    q_pi = np.sum(dirichlet_log_norm(gamma)) + np.sum((gamma - 1.0) * elog)
    return elog, prior - q_pi


def pg_elbo(params: MmsbParams, X, state: PgState) -> float:
    X = check_graph(params, X)
    ll = pair_log_lik(params, X)
    i, j = pair_index(params.n)
    elog, total = _elbo_common(params, state.gamma)
    y = state.y
    total += np.sum(y.sum(axis=2) * elog[i]) + np.sum(y.sum(axis=1) * elog[j])
    total += np.sum(xmul(y, ll))
    total -= np.sum(xlogy(y, y))
    return float(total)


def ff_elbo(params: MmsbParams, X, state: FfState) -> float:
    X = check_graph(params, X)
    ll = pair_log_lik(params, X)
    i, j = pair_index(params.n)
    elog, total = _elbo_common(params, state.gamma)
    total += np.sum(state.y_out * elog[i]) + np.sum(state.y_in * elog[j])
    prod = state.y_out[:, :, None] * state.y_in[:, None, :]
    total += np.sum(xmul(prod, ll))
    total -= np.sum(xlogy(state.y_out, state.y_out)) + np.sum(xlogy(state.y_in, state.y_in))
    return float(total)


def init_gamma(params: MmsbParams, seed) -> np.ndarray:
    rng = make_rng(seed)
    base = params.alpha + 2.0 * (params.n - 1) / params.K
    return base[None, :] * rng.uniform(0.95, 1.05, size=(params.n, params.K))


def pg_init(params: MmsbParams, X, seed, gamma=None) -> PgState:
    X = check_graph(params, X)
    gamma = init_gamma(params, seed) if gamma is None else np.array(gamma, dtype=float)
    return PgState(pg_responsibilities(params, pair_log_lik(params, X), gamma), gamma)


def ff_init(params: MmsbParams, X, seed, gamma=None) -> FfState:
    X = check_graph(params, X)
    gamma = init_gamma(params, seed) if gamma is None else np.array(gamma, dtype=float)
    ll = pair_log_lik(params, X)
    elog = dirichlet_expected_log(gamma)
    y_in = np.full((params.P, params.K), 1.0 / params.K)
    y_out = _ff_out(params, ll, elog, y_in)
    y_in = _ff_in(params, ll, elog, y_out)
    return FfState(y_out, y_in, gamma)


_METHODS = {
    "pg": (pg_init, pg_cavi_step, pg_elbo),
    "ff": (ff_init, ff_cavi_step, ff_elbo),
}


def fit_once(params: MmsbParams, X, method: str, seed, tol=1e-8, max_sweeps=1000, init=None) -> MmsbFit:
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}")
    init_fn, step, elbo_fn = _METHODS[method]
    X = check_graph(params, X)
    state = init.copy() if init is not None else init_fn(params, X, seed)
    trace = [elbo_fn(params, X, state)]
    fit = MmsbFit(method, state, trace, seed=seed)
    for sweep in range(1, max_sweeps + 1):
        state = step(params, X, state)
        elbo = elbo_fn(params, X, state)
        if not np.isfinite(elbo):
            raise FloatingPointError("non-finite ELBO during CAVI")
        prev = trace[-1]
        trace.append(elbo)
        fit.state, fit.sweeps = state, sweep
        if abs(elbo - prev) / (1.0 + abs(elbo)) < tol:
            fit.converged = True
            break
    return fit


def mmsb_fit(params: MmsbParams, X, method="pg", seed=0, tol=1e-8, max_sweeps=1000, restarts=1) -> MmsbResult:
    """Multi-restart CAVI; restart r uses the r-th spawned substream of ``seed``."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    fits = [fit_once(params, X, method, s, tol, max_sweeps) for s in spawn_seeds(seed, restarts)]
    best = max(fits, key=lambda f: f.elbo)
    return MmsbResult(best, fits)


@dataclass
class PairCorrelations:
    i: np.ndarray
    j: np.ndarray
    corr: np.ndarray
    defined: np.ndarray


def joint_indicator_corr(joint, group: int):
    """Correlation of 1{sender = g} and 1{receiver = g} under (..., K, K) joints.

    Returns (corr, defined); undefined entries (a degenerate marginal) hold nan.
    """
    joint = np.asarray(joint, dtype=float)
    p = joint[..., group, :].sum(axis=-1)
    q = joint[..., :, group].sum(axis=-1)
    m = joint[..., group, group]
    var = p * (1 - p) * q * (1 - q)
    defined = var > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(defined, (m - p * q) / np.sqrt(np.where(defined, var, 1.0)), np.nan)
    return corr, defined


def pair_correlations(state: PgState, group: int = 0) -> PairCorrelations:
    n = int(round((1 + np.sqrt(1 + 4 * state.y.shape[0])) / 2))
    i, j = pair_index(n)
    corr, defined = joint_indicator_corr(state.y, group)
    return PairCorrelations(i, j, corr, defined)
