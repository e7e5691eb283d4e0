"""Mean-field functionals of the collapsed posterior over product distributions.

A :class:`CollapsedInstance` is a model-agnostic view of a collapsed posterior
whose energy has the form

    f(z) = sum_u sum_l lnGamma(N_{u,l}(z) + alpha_l) - sum_u lnGamma(m_u + sum(alpha))

where every latent site contributes one count to one or two "units" (a
document for LDA; the sender and receiver node for an MMSB pair). Each
(site, unit) link is a *slot*; a slot maps the site's category to a group
through a 0/1 matrix. All functionals (F, I, J, the T-map, the error terms,
the exact expectation of f) are written once against this view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .lda import LdaParams, check_corpus, lda_collapsed_energy
from .mmsb import MmsbParams, check_graph, mmsb_collapsed_energy, pair_index, pair_log_lik
from .numerics import make_rng, normalize_log, xlogy, xmul


@dataclass(frozen=True)
class CollapsedInstance:
    kind: str
    params: object
    data: object
    log_mu: np.ndarray        # (S, C) log base measure per site
    slot_site: np.ndarray     # (L,)
    slot_unit: np.ndarray     # (L,)
    slot_map: np.ndarray      # (L,) index into maps
    maps: np.ndarray          # (n_maps, C, K) one-hot category -> group
    unit_total: np.ndarray    # (U,) m_u
    log_mu_const: float       # Upsilon(z) = f(z) + log mu(z) + log_mu_const

    @property
    def alpha(self) -> np.ndarray:
        return self.params.alpha

    @property
    def n_sites(self) -> int:
        return self.log_mu.shape[0]

    @property
    def n_cats(self) -> int:
        return self.log_mu.shape[1]

    @property
    def n_units(self) -> int:
        return self.unit_total.size

    @property
    def K(self) -> int:
        return self.maps.shape[2]

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu)

    @property
    def f_const(self) -> float:
        return float(np.sum(gammaln(self.unit_total + self.alpha.sum())))

    def site_groups(self, site: int):
        """[(slot, unit, map)] for every slot of ``site``."""
        idx = np.nonzero(self.slot_site == site)[0]
        return [(int(s), int(self.slot_unit[s]), int(self.slot_map[s])) for s in idx]

    def upsilon(self, z):
        """Engine collapsed energy of site assignments z (batched over rows)."""
        z = np.asarray(z, dtype=np.int64)
        if self.kind == "lda":
            return lda_collapsed_energy(self.params, self.data, z)
        K = self.params.K
        return mmsb_collapsed_energy(self.params, self.data, z // K, z % K)


def lda_instance(params: LdaParams, words) -> CollapsedInstance:
    words = check_corpus(params, words)
    flat = np.concatenate(words)
    col = params.eta[:, flat].T                     # (n, K)
    col_sum = col.sum(axis=1)
    with np.errstate(divide="ignore"):
        log_mu = np.log(col) - np.log(col_sum)[:, None]
    n = flat.size
    units = np.repeat(np.arange(params.D), params.n_d)
    return CollapsedInstance(
        kind="lda", params=params, data=words, log_mu=log_mu,
        slot_site=np.arange(n), slot_unit=units, slot_map=np.zeros(n, dtype=np.int64),
        maps=np.eye(params.K)[None], unit_total=np.asarray(params.n_d, dtype=float),
        log_mu_const=float(np.sum(np.log(col_sum))),
    )


def mmsb_instance(params: MmsbParams, X) -> CollapsedInstance:
    """Grouped-site view: one site per ordered pair, K^2 categories (l, l')."""
    X = check_graph(params, X)
    K, P = params.K, params.P
    i, j = pair_index(params.n)
    x = X[i, j].astype(bool)
    s1 = params.B.sum()
    s0 = (1.0 - params.B).sum()
    with np.errstate(divide="ignore"):
        log_mu = pair_log_lik(params, X).reshape(P, K * K) - np.where(x, np.log(s1), np.log(s0))[:, None]
    cats = np.arange(K * K)
    maps = np.zeros((2, K * K, K))
    maps[0, cats, cats // K] = 1.0
    maps[1, cats, cats % K] = 1.0
    m1 = int(x.sum())
    const = (m1 * np.log(s1) if m1 else 0.0) + ((P - m1) * np.log(s0) if P - m1 else 0.0)
    return CollapsedInstance(
        kind="mmsb", params=params, data=X, log_mu=log_mu,
        slot_site=np.repeat(np.arange(P), 2), slot_unit=np.stack([i, j], axis=1).ravel(),
        slot_map=np.tile([0, 1], P), maps=maps,
        unit_total=np.full(params.n, 2.0 * (params.n - 1)), log_mu_const=float(const),
    )


# --- product distributions ------------------------------------------------

def check_y(inst: CollapsedInstance, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != inst.log_mu.shape:
        raise ValueError(f"y must have shape {inst.log_mu.shape}")
    if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("rows of y must be probability vectors")
    return y


def one_hot(inst: CollapsedInstance, z) -> np.ndarray:
    """G(z): one-hot rows for a site assignment z."""
    z = np.asarray(z, dtype=np.int64)
    y = np.zeros(inst.log_mu.shape)
    y[np.arange(inst.n_sites), z] = 1.0
    return y


def random_y(inst: CollapsedInstance, rng, support_only: bool = True, concentration: float = 1.0) -> np.ndarray:
    """Random interior product distribution (restricted to supp(mu) by default)."""
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    w = rng.gamma(concentration, size=inst.log_mu.shape) + 1e-3
    if support_only:
        w = np.where(np.isfinite(inst.log_mu), w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def slot_marginals(inst: CollapsedInstance, y) -> np.ndarray:
    """(L, K) group marginals carried by each slot."""
    return np.einsum("lc,lck->lk", y[inst.slot_site], inst.maps[inst.slot_map])


def expected_counts(inst: CollapsedInstance, y) -> np.ndarray:
    """Soft counts N~_{u,l}(y) (U, K)."""
    marg = slot_marginals(inst, y)
    out = np.zeros((inst.n_units, inst.K))
    for ell in range(inst.K):
        out[:, ell] = np.bincount(inst.slot_unit, weights=marg[:, ell], minlength=inst.n_units)
    return out


def eval_F(inst: CollapsedInstance, y) -> float:
    y = np.asarray(y, dtype=float)
    Nt = expected_counts(inst, y)
    return float(np.sum(gammaln(Nt + inst.alpha)) - inst.f_const)


def eval_f(inst: CollapsedInstance, z):
    """The collapsed energy f on hard assignments; batched over rows of z."""
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    group = np.argmax(inst.maps, axis=2)                       # (n_maps, C)
    g = group[inst.slot_map[None, :], z[:, inst.slot_site]]    # (B, L)
    total = np.zeros(z.shape[0])
    for u in range(inst.n_units):
        gu = g[:, inst.slot_unit == u]
        counts = np.stack([(gu == ell).sum(axis=1) for ell in range(inst.K)], axis=1)
        total += gammaln(counts + inst.alpha).sum(axis=1)
    return total - inst.f_const


def grad_F(inst: CollapsedInstance, y) -> np.ndarray:
    """dF/dy_{s,c}: sum over the site's slots of digamma(N~_{u,g(c)} + alpha)."""
    y = np.asarray(y, dtype=float)
    psi = digamma(expected_counts(inst, y) + inst.alpha)       # (U, K)
    per_slot = np.einsum("lk,lck->lc", psi[inst.slot_unit], inst.maps[inst.slot_map])
    out = np.zeros(inst.log_mu.shape)
    np.add.at(out, inst.slot_site, per_slot)
    return out


def eval_I(inst: CollapsedInstance, y) -> float:
    """KL(Q_y || mu) with 0 log 0 = 0; +inf when y charges a mu-null category."""
    y = np.asarray(y, dtype=float)
    if np.any((y > 0) & ~np.isfinite(inst.log_mu)):
        return float("inf")
    return float(np.sum(xlogy(y, y)) - np.sum(xmul(y, inst.log_mu)))


def eval_J(inst: CollapsedInstance, y, y2) -> float:
    y = np.asarray(y, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if np.any((y > 0) & ~np.isfinite(inst.log_mu)):
        return float("-inf")
    with np.errstate(divide="ignore"):
        log_ratio = np.log(y2) - inst.log_mu
    with np.errstate(invalid="ignore"):
        terms = np.where(y == 0, 0.0, y * log_ratio)
    return float(np.sum(terms))


def t_map(inst: CollapsedInstance, y) -> np.ndarray:
    """Exact single-site conditionals of the collapsed posterior, evaluated at y.

    Replacing row s by the one-hot category c shifts each linked unit count by
    -marginal + e_{g(c)}; the lnGamma difference is log(N~ - marginal + alpha).
    """
    y = np.asarray(y, dtype=float)
    Nt = expected_counts(inst, y)
    marg = slot_marginals(inst, y)
    base = Nt[inst.slot_unit] - marg + inst.alpha               # (L, K)
    with np.errstate(divide="ignore"):
        log_base = np.log(np.maximum(base, 0.0))
    per_slot = np.einsum("lk,lck->lc", log_base, inst.maps[inst.slot_map])
    logits = inst.log_mu.copy()
    np.add.at(logits, inst.slot_site, per_slot)
    return normalize_log(logits, axis=1)


def t_map_reference(inst: CollapsedInstance, y) -> np.ndarray:
    """T-map straight from its definition via F(U(y; s, c)); O(S C) F evaluations."""
    y = np.asarray(y, dtype=float)
    logits = np.empty(inst.log_mu.shape)
    for s in range(inst.n_sites):
        for c in range(inst.n_cats):
            u = y.copy()
            u[s] = 0.0
            u[s, c] = 1.0
            logits[s, c] = eval_F(inst, u) + inst.log_mu[s, c]
    return normalize_log(logits, axis=1)


def delta1(inst: CollapsedInstance, y) -> float:
    y = np.asarray(y, dtype=float)
    T = t_map(inst, y)
    return float(eval_F(inst, y) - eval_F(inst, T) - np.sum(grad_F(inst, y) * (y - T)))


def delta2(inst: CollapsedInstance, y) -> float:
    y = np.asarray(y, dtype=float)
    T = t_map(inst, y)
    return float(eval_I(inst, T) - eval_J(inst, y, T) + np.sum(grad_F(inst, y) * (y - T)))


# --- exact expectation of f via Poisson-binomial counts -------------------

def poisson_binomial_pmf(p) -> np.ndarray:
    """pmf of a sum of independent Bernoulli(p_k), by the product-polynomial DP."""
    pmf = np.ones(1)
    for pk in np.asarray(p, dtype=float):
        nxt = np.zeros(pmf.size + 1)
        nxt[:-1] = pmf * (1.0 - pk)
        nxt[1:] += pmf * pk
        pmf = nxt
    return pmf


def expected_log_gamma(p, a: float, shift: int = 0) -> float:
    """E[lnGamma(N + shift + a)] for N ~ PoissonBinomial(p)."""
    pmf = poisson_binomial_pmf(p)
    return float(np.dot(pmf, gammaln(np.arange(pmf.size) + shift + a)))


def expected_energy(inst: CollapsedInstance, y) -> float:
    """Exact E_{Q_y}[f(Z)] in polynomial time."""
    y = np.asarray(y, dtype=float)
    marg = slot_marginals(inst, y)
    total = -inst.f_const
    for u in range(inst.n_units):
        mu_ = marg[inst.slot_unit == u]
        for ell in range(inst.K):
            total += expected_log_gamma(mu_[:, ell], inst.alpha[ell])
    return float(total)


def _conditional_gain(inst: CollapsedInstance, y, marg, site: int) -> np.ndarray:
    """E_{Q_{y,-s}}[f | Z_s = c] up to a c-independent constant, for every c."""
    gain = np.zeros(inst.n_cats)
    for slot, unit, m in inst.site_groups(site):
        others = (inst.slot_unit == unit)
        others[slot] = False
        om = marg[others]
        # lnGamma(N + 1 + a) - lnGamma(N + a) = log(N + a)
        dl = np.array([
            np.dot(poisson_binomial_pmf(om[:, ell]), np.log(np.arange(om.shape[0] + 1) + inst.alpha[ell]))
            for ell in range(inst.K)
        ])
        gain += inst.maps[m] @ dl
    return gain


@dataclass
class CollapsedFit:
    y: np.ndarray
    trace: list
    sweeps: int
    converged: bool
    mode: str


def collapsed_objective(inst: CollapsedInstance, y) -> float:
    """E_{Q_y}[f] - I(y); log S minus this is KL(Q_y || collapsed posterior)."""
    return expected_energy(inst, y) - eval_I(inst, y)


def surrogate_objective(inst: CollapsedInstance, y) -> float:
    return eval_F(inst, y) - eval_I(inst, y)


def collapsed_vi(inst: CollapsedInstance, mode: str = "exact", init=None, seed=0,
                 tol: float = 1e-10, max_sweeps: int = 500) -> CollapsedFit:
    """Mean-field approximation of the collapsed posterior.

    ``exact`` runs coordinate ascent on E[f] - I site by site (the site update
    is closed form given the Poisson-binomial laws of the other sites);
    ``surrogate`` iterates y <- T(y). Non-convergence is reported in the
    result rather than raised.
    """
    if mode not in ("exact", "surrogate"):
        raise ValueError(f"unknown mode {mode!r}")
    y = random_y(inst, seed) if init is None else check_y(inst, init).copy()
    if mode == "exact":
        trace = [collapsed_objective(inst, y)]
        for sweep in range(1, max_sweeps + 1):
            for s in range(inst.n_sites):
                marg = slot_marginals(inst, y)
                y[s] = normalize_log(inst.log_mu[s] + _conditional_gain(inst, y, marg, s))
            trace.append(collapsed_objective(inst, y))
            if abs(trace[-1] - trace[-2]) < tol * (1.0 + abs(trace[-1])):
                return CollapsedFit(y, trace, sweep, True, mode)
        return CollapsedFit(y, trace, max_sweeps, False, mode)

    trace = [surrogate_objective(inst, y)]
    step, stalled, last_change = 1.0, 0, np.inf
    for sweep in range(1, max_sweeps + 1):
        T = t_map(inst, y)
        change = float(np.max(np.abs(T - y)))
        y = (1.0 - step) * y + step * T
        trace.append(surrogate_objective(inst, y))
        if change < tol:
            return CollapsedFit(y, trace, sweep, True, mode)
        stalled = stalled + 1 if change >= last_change else 0
        last_change = change
        if stalled >= 10 and step == 1.0:
            step = 0.5
    return CollapsedFit(y, trace, max_sweeps, False, mode)


def best_collapsed_vi(inst: CollapsedInstance, restarts: int, seed: int = 0, mode: str = "exact",
                      **kwargs) -> CollapsedFit:
    """Best objective over ``restarts`` random initializations."""
    from .numerics import spawn_seeds

    fits = [collapsed_vi(inst, mode=mode, seed=s, **kwargs) for s in spawn_seeds(seed, restarts)]
    return max(fits, key=lambda f: f.trace[-1])
