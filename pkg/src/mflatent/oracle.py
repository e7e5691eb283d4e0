"""Brute-force ground truth for tiny collapsed posteriors.

Assignments are enumerated lexicographically over sites (last site fastest).
Tables up to ``KEEP_LIMIT`` states keep their log-weights in memory; larger
ones (up to ``SIZE_CAP``) are re-enumerated chunk by chunk on every pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .functionals import CollapsedInstance
from .lda import LdaParams, LdaState, check_corpus, dirichlet_expected_log, dirichlet_log_norm
from .mmsb import FfState, joint_indicator_corr
from .numerics import log_sum_exp

SIZE_CAP = 10**7
KEEP_LIMIT = 10**6
CHUNK = 2**16


class OracleSizeError(ValueError):
    pass


def state_space_size(inst: CollapsedInstance) -> int:
    return inst.n_cats ** inst.n_sites


def decode(index, n_sites: int, n_cats: int) -> np.ndarray:
    """Lexicographic assignment(s) for flat indices."""
    index = np.asarray(index, dtype=np.int64)
    out = np.empty(index.shape + (n_sites,), dtype=np.int64)
    rem = index.copy()
    for s in range(n_sites - 1, -1, -1):
        out[..., s] = rem % n_cats
        rem //= n_cats
    return out


@dataclass
class PosteriorTable:
    inst: CollapsedInstance
    size: int
    log_partition: float
    _log_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def log_partition_mu(self) -> float:
        """log of sum_z exp(f(z)) mu(z), the base-measure normalized partition."""
        return self.log_partition - self.inst.log_mu_const

    @property
    def retained(self) -> bool:
        return self._log_weights is not None

    def chunks(self):
        """Yield (assignments, log_weights, log_probs) in enumeration order."""
        for start in range(0, self.size, CHUNK):
            stop = min(start + CHUNK, self.size)
            z = decode(np.arange(start, stop), self.inst.n_sites, self.inst.n_cats)
            if self._log_weights is not None:
                lw = self._log_weights[start:stop]
            else:
                lw = np.asarray(self.inst.upsilon(z), dtype=float)
            yield z, lw, lw - self.log_partition

    @property
    def assignments(self) -> np.ndarray:
        return decode(np.arange(self.size), self.inst.n_sites, self.inst.n_cats)

    @property
    def log_weights(self) -> np.ndarray:
        if self._log_weights is not None:
            return self._log_weights
        return np.concatenate([lw for _, lw, _ in self.chunks()])

    @property
    def log_probs(self) -> np.ndarray:
        return self.log_weights - self.log_partition


def enumerate_posterior(inst: CollapsedInstance) -> PosteriorTable:
    size = state_space_size(inst)
    if size > SIZE_CAP:
        raise OracleSizeError(f"state space {size} exceeds the cap {SIZE_CAP}")
    keep = size <= KEEP_LIMIT
    parts, running = [], -np.inf
    for start in range(0, size, CHUNK):
        stop = min(start + CHUNK, size)
        z = decode(np.arange(start, stop), inst.n_sites, inst.n_cats)
        lw = np.asarray(inst.upsilon(z), dtype=float)
        if keep:
            parts.append(lw)
        running = log_sum_exp([running, log_sum_exp(lw)])
    if not np.isfinite(running):
        raise ValueError("every assignment is impossible under these parameters")
    return PosteriorTable(inst, size, float(running), np.concatenate(parts) if keep else None)


def _prior_constant(inst: CollapsedInstance) -> float:
    # Dirichlet normalizer dropped from the collapsed energy, one per unit
    a = inst.alpha
    return inst.n_units * float(gammaln(a.sum()) - gammaln(a).sum())


def log_evidence(inst: CollapsedInstance, table: PosteriorTable | None = None) -> float:
    table = enumerate_posterior(inst) if table is None else table
    return table.log_partition + _prior_constant(inst)


def _log_q(y, z) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logy = np.log(y)
    return logy[np.arange(y.shape[0])[None, :], z].sum(axis=1)


def exact_kl(y, table: PosteriorTable) -> float:
    """KL(Q_y || collapsed posterior); +inf if Q_y charges an impossible z."""
    y = np.asarray(y, dtype=float)
    if y.shape != (table.inst.n_sites, table.inst.n_cats):
        raise ValueError("y does not match the instance")
    total = 0.0
    for z, _, lp in table.chunks():
        lq = _log_q(y, z)
        live = np.isfinite(lq)
        if np.any(live & ~np.isfinite(lp)):
            return float("inf")
        q = np.exp(lq[live])
        total += float(np.sum(q * (lq[live] - lp[live])))
    return max(total, 0.0) if total > -1e-12 else total


@dataclass
class ExactMarginals:
    site: np.ndarray                 # (S, C)
    pair_joint: np.ndarray | None    # (P, K, K) for MMSB
    pair_corr: np.ndarray | None     # (P,) indicator correlations for group 0


def exact_marginals(table: PosteriorTable, group: int = 0) -> ExactMarginals:
    inst = table.inst
    site = np.zeros((inst.n_sites, inst.n_cats))
    for z, _, lp in table.chunks():
        p = np.exp(lp)
        for s in range(inst.n_sites):
            site[s] += np.bincount(z[:, s], weights=p, minlength=inst.n_cats)
    if inst.kind != "mmsb":
        return ExactMarginals(site, None, None)
    K = inst.params.K
    joint = site.reshape(-1, K, K)
    corr, _ = joint_indicator_corr(joint, group)
    return ExactMarginals(site, joint, corr)


# --- full (non-collapsed) KL, assembled from the collapsed table ----------

def _kl_dirichlet(a, b) -> np.ndarray:
    """KL(Dir(a) || Dir(b)) over the last axis."""
    return dirichlet_log_norm(a) - dirichlet_log_norm(b) + np.sum(
        (a - b) * dirichlet_expected_log(a), axis=-1)


def _full_kl(inst, table, y_sites, gamma) -> float:
    """KL(q(Z) q(pi) || p(Z, pi | X)) = KL(q(Z) || p(Z|X)) + E_q(Z) KL(q(pi) || p(pi | Z, X)).

    p(pi_u | Z, X) is Dir(alpha + N_u(Z)), so the second term is an exact
    enumeration of Dirichlet-to-Dirichlet divergences.
    """
    kl_z = exact_kl(y_sites, table)
    if not np.isfinite(kl_z):
        return kl_z
    group = np.argmax(inst.maps, axis=2)
    extra = 0.0
    for z, _, _ in table.chunks():
        lq = _log_q(y_sites, z)
        live = np.isfinite(lq)
        if not np.any(live):
            continue
        z = z[live]
        q = np.exp(lq[live])
        g = group[inst.slot_map[None, :], z[:, inst.slot_site]]
        for u in range(inst.n_units):
            gu = g[:, inst.slot_unit == u]
            counts = np.stack([(gu == ell).sum(axis=1) for ell in range(inst.K)], axis=1)
            extra += float(np.sum(q * _kl_dirichlet(gamma[u][None, :], inst.alpha + counts)))
    return kl_z + extra


def full_kl_lda(inst: CollapsedInstance, table: PosteriorTable, state: LdaState) -> float:
    y = np.concatenate(state.phi, axis=0)
    return _full_kl(inst, table, y, np.asarray(state.gamma))


def full_kl_mmsb(inst: CollapsedInstance, table: PosteriorTable, state) -> float:
    if isinstance(state, FfState):
        state = state.as_pg()
    P = state.y.shape[0]
    return _full_kl(inst, table, state.y.reshape(P, -1), np.asarray(state.gamma))


def dump_table_csv(table: PosteriorTable, path, max_states: int = 10**5) -> None:
    if table.size > max_states:
        raise OracleSizeError(f"refusing to dump {table.size} states (limit {max_states})")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["assignment", "log_weight", "log_prob"])
        for z, lw, lp in table.chunks():
            for row, a, b in zip(z, lw, lp):
                w.writerow([" ".join(str(int(v) + 1) for v in row), f"{a:.12g}", f"{b:.12g}"])


def lda_evidence_quadrature(params: LdaParams, words) -> float:
    """log p(X) for a single document with K = 2 by 1-D quadrature over pi_1."""
    from scipy import integrate

    words = check_corpus(params, words)
    if params.D != 1 or params.K != 2:
        raise ValueError("quadrature oracle covers D = 1, K = 2 only")
    w = words[0]
    a1, a2 = params.alpha

    def lik(t):
        return np.prod(t * params.eta[0, w] + (1 - t) * params.eta[1, w])

    val, _ = integrate.quad(lik, 0.0, 1.0, weight="alg", wvar=(a1 - 1.0, a2 - 1.0),
                            epsabs=0.0, epsrel=1e-13, limit=200)
    log_beta = gammaln(a1) + gammaln(a2) - gammaln(a1 + a2)
    return float(np.log(val) - log_beta)


__all__ = [
    "PosteriorTable", "OracleSizeError", "enumerate_posterior", "log_evidence", "exact_kl",
    "exact_marginals", "full_kl_lda", "full_kl_mmsb", "dump_table_csv", "lda_evidence_quadrature",
    "state_space_size", "SIZE_CAP",
]
