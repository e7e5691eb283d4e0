"""Latent Dirichlet allocation: sampling, full mean-field CAVI, ELBO and
the collapsed energy.

Words and topics are 0-based inside the library; the JSON readers in
:mod:`mflatent.io` translate from the 1-based file convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .numerics import make_rng, normalize_log, sample_categorical, sample_dirichlet, spawn_seeds, xlogy, xmul


@dataclass(frozen=True)
class LdaParams:
    alpha: np.ndarray
    eta: np.ndarray
    n_d: tuple

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        n_d = tuple(int(n) for n in self.n_d)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "n_d", n_d)
        if alpha.ndim != 1 or np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("alpha must be a vector of positive reals")
        if eta.shape[0] != alpha.size:
            raise ValueError("eta must have one row per topic")
        if np.any(eta < 0) or not np.allclose(eta.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("each eta row must be a probability vector")
        if np.any(eta.max(axis=0) <= 0):
            raise ValueError("every vocabulary column of eta needs a positive entry")
        if len(n_d) < 1 or min(n_d) < 1:
            raise ValueError("need at least one document with at least one word")

    @property
    def D(self) -> int:
        return len(self.n_d)

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def V(self) -> int:
        return self.eta.shape[1]

    @property
    def n(self) -> int:
        return sum(self.n_d)

    @property
    def log_eta(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.eta)


@dataclass
class LdaState:
    """phi[d] is an (n_d, K) responsibility table, gamma is (D, K)."""

    phi: list
    gamma: np.ndarray

    def copy(self) -> "LdaState":
        return LdaState([p.copy() for p in self.phi], self.gamma.copy())


@dataclass
class LdaFit:
    state: LdaState
    elbo_trace: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]


def check_corpus(params: LdaParams, words) -> list:
    words = [np.asarray(w, dtype=np.int64) for w in words]
    if len(words) != params.D:
        raise ValueError("corpus has the wrong number of documents")
    for d, w in enumerate(words):
        if w.shape != (params.n_d[d],):
            raise ValueError(f"document {d} length does not match n_d")
        if w.size and (w.min() < 0 or w.max() >= params.V):
            raise ValueError(f"document {d} has out-of-vocabulary words")
    return words


def lda_sample(params: LdaParams, seed: int):
    """Draw (words, pi, z) from the generative process; deterministic per seed."""
    rng = make_rng(seed)
    words, pis, zs = [], [], []
    for n_d in params.n_d:
        pi = sample_dirichlet(params.alpha, rng)
        z = sample_categorical(pi, n_d, rng)
        x = np.empty(n_d, dtype=np.int64)
        for ell in np.unique(z):
            mask = z == ell
            x[mask] = sample_categorical(params.eta[ell], int(mask.sum()), rng)
        words.append(x)
        pis.append(pi)
        zs.append(z)
    return words, np.array(pis), zs


def topic_counts(params: LdaParams, words, z):
    """N_{d,l} (D, K) and N_{d,l,r} (D, K, V) for one assignment."""
    N = np.zeros((params.D, params.K), dtype=np.int64)
    Nr = np.zeros((params.D, params.K, params.V), dtype=np.int64)
    for d in range(params.D):
        np.add.at(N[d], z[d], 1)
        np.add.at(Nr[d], (z[d], words[d]), 1)
    return N, Nr


def lda_collapsed_energy(params: LdaParams, words, z) -> np.ndarray | float:
    """Log of the unnormalized collapsed posterior weight of ``z``.

    ``z`` is either a ragged list of per-document topic arrays or an array of
    shape (..., n) over the concatenated words; the batched form returns an
    array of energies. Impossible assignments (eta = 0) give -inf.
    """
    words = check_corpus(params, words)
    flat_words = np.concatenate(words)
    if isinstance(z, (list, tuple)):
        zz = np.concatenate([np.asarray(zd, dtype=np.int64) for zd in z])
        single = True
    else:
        zz = np.asarray(z, dtype=np.int64)
        single = zz.ndim == 1
    zz = np.atleast_2d(zz)
    if zz.shape[-1] != flat_words.size:
        raise ValueError("assignment length does not match the corpus")
    if zz.size and (zz.min() < 0 or zz.max() >= params.K):
        raise ValueError("topic index out of range")
    emit = params.log_eta[zz, flat_words[None, :]].sum(axis=1)
    out = emit.copy()
    start = 0
    a0 = params.alpha.sum()
    for n_d in params.n_d:
        zd = zz[:, start:start + n_d]
        counts = np.stack([(zd == ell).sum(axis=1) for ell in range(params.K)], axis=1)
        out += gammaln(counts + params.alpha).sum(axis=1) - gammaln(n_d + a0)
        start += n_d
    return float(out[0]) if single else out


def _responsibilities(params: LdaParams, words, gamma) -> list:
    log_eta = params.log_eta
    elog = digamma(gamma)
    phi = []
    for d, w in enumerate(words):
        logits = log_eta[:, w].T + elog[d]
        try:
            phi.append(normalize_log(logits, axis=1))
        except FloatingPointError:
            raise ValueError(f"document {d} has a word no topic can emit") from None
    return phi


def lda_cavi_step(params: LdaParams, words, state: LdaState) -> LdaState:
    """One sweep: every phi row from the current gamma, then gamma from phi."""
    words = check_corpus(params, words)
    phi = _responsibilities(params, words, state.gamma)
    gamma = np.stack([params.alpha + p.sum(axis=0) for p in phi])
    return LdaState(phi, gamma)


def dirichlet_expected_log(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    return digamma(gamma) - digamma(gamma.sum(axis=-1, keepdims=True))


def dirichlet_log_norm(a) -> np.ndarray:
    """ln Gamma(sum a) - sum ln Gamma(a) over the last axis."""
    a = np.asarray(a, dtype=float)
    return gammaln(a.sum(axis=-1)) - gammaln(a).sum(axis=-1)


def lda_elbo(params: LdaParams, words, state: LdaState) -> float:
    words = check_corpus(params, words)
    log_eta = params.log_eta
    elog = dirichlet_expected_log(state.gamma)
    total = 0.0
    for d, w in enumerate(words):
        phi = state.phi[d]
        g = state.gamma[d]
        total += dirichlet_log_norm(params.alpha) + np.dot(params.alpha - 1.0, elog[d])
        total += np.sum(phi @ elog[d])
        total += np.sum(xmul(phi, log_eta[:, w].T))
        total -= dirichlet_log_norm(g) + np.dot(g - 1.0, elog[d])
        total -= np.sum(xlogy(phi, phi))
    return float(total)


def lda_init(params: LdaParams, words, seed) -> LdaState:
    rng = make_rng(seed)
    base = params.alpha[None, :] + np.asarray(params.n_d, dtype=float)[:, None] / params.K
    gamma = base * rng.uniform(0.95, 1.05, size=base.shape)
    phi = _responsibilities(params, words, gamma)
    return LdaState(phi, gamma)


def lda_fit(params: LdaParams, words, seed=0, tol: float = 1e-8, max_sweeps: int = 1000,
            init: LdaState | None = None) -> LdaFit:
    """Coordinate ascent until the relative ELBO change drops below ``tol``.

    The trace starts with the ELBO of the initial state.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    words = check_corpus(params, words)
    state = init.copy() if init is not None else lda_init(params, words, seed)
    trace = [lda_elbo(params, words, state)]
    if not np.isfinite(trace[0]):
        raise FloatingPointError("non-finite ELBO at initialization")
    fit = LdaFit(state, trace)
    for sweep in range(1, max_sweeps + 1):
        state = lda_cavi_step(params, words, state)
        elbo = lda_elbo(params, words, state)
        if not np.isfinite(elbo):
            raise FloatingPointError("non-finite ELBO during CAVI")
        prev = trace[-1]
        trace.append(elbo)
        fit.state, fit.sweeps = state, sweep
        if abs(elbo - prev) / (1.0 + abs(elbo)) < tol:
            fit.converged = True
            break
    return fit


def lda_fit_per_document(params: LdaParams, words, seeds, tol=1e-8, max_sweeps=1000) -> list:
    """Fit each document on its own (the objective separates over documents)."""
    words = check_corpus(params, words)
    fits = []
    for d, w in enumerate(words):
        sub = LdaParams(params.alpha, params.eta, (params.n_d[d],))
        fits.append(lda_fit(sub, [w], seed=seeds[d], tol=tol, max_sweeps=max_sweeps))
    return fits


def document_seeds(seed: int, D: int) -> list:
    return spawn_seeds(seed, D)
