import csv
import itertools
import math

import numpy as np
import pytest
from scipy.special import gammaln

from mflatent import functionals as fn
from mflatent import oracle
from mflatent.lda import LdaParams, lda_fit, lda_sample
from mflatent.mmsb import MmsbParams, fit_once, mmsb_sample
from mflatent.numerics import make_rng

UNIFORM = LdaParams([1.0, 1.0], [[0.5, 0.5], [0.5, 0.5]], (2,))


def lda_table(p, words):
    inst = fn.lda_instance(p, words)
    return inst, oracle.enumerate_posterior(inst)


def test_hand_partition():
    inst, table = lda_table(UNIFORM, [np.array([0, 1])])
    assert table.size == 4
    assert table.log_partition == pytest.approx(-math.log(4), abs=1e-14)
    assert oracle.log_evidence(inst, table) == pytest.approx(-math.log(4), abs=1e-14)
    assert np.exp(table.log_probs).sum() == pytest.approx(1.0, abs=1e-12)


def test_uniform_emission_evidence():
    p = LdaParams([0.3, 1.7, 0.9], np.full((3, 4), 0.25), (3, 2))
    inst, table = lda_table(p, [np.array([0, 3, 1]), np.array([2, 2])])
    assert oracle.log_evidence(inst, table) == pytest.approx(5 * math.log(0.25), abs=1e-12)


def test_k1_point_mass():
    p = LdaParams([0.6], [[0.2, 0.3, 0.5]], (4,))
    words = [np.array([0, 2, 1, 2])]
    inst, table = lda_table(p, words)
    assert table.size == 1
    assert table.log_probs[0] == pytest.approx(0.0, abs=1e-14)
    assert oracle.log_evidence(inst, table) == pytest.approx(np.log([0.2, 0.5, 0.3, 0.5]).sum(), abs=1e-12)
    assert np.array_equal(oracle.exact_marginals(table).site, np.ones((4, 1)))


def test_mmsb_state_count():
    p = MmsbParams(2, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])
    table = oracle.enumerate_posterior(fn.mmsb_instance(p, np.array([[0, 1], [0, 0]])))
    assert table.size == 16


@pytest.mark.parametrize("n", [1, 3, 5])
def test_quadrature_evidence(n):
    rng = make_rng(n)
    p = LdaParams([0.7, 1.6], rng.dirichlet(np.ones(3), size=2), (n,))
    words, _, _ = lda_sample(p, n)
    inst, table = lda_table(p, words)
    assert oracle.log_evidence(inst, table) == pytest.approx(oracle.lda_evidence_quadrature(p, words), abs=1e-6)


def test_partition_factorizes_over_documents():
    rng = make_rng(2)
    p = LdaParams([0.4, 1.1, 0.8], rng.dirichlet(np.ones(4), size=3), (4, 5))
    words, _, _ = lda_sample(p, 2)
    _, joint = lda_table(p, words)
    parts = [lda_table(LdaParams(p.alpha, p.eta, (p.n_d[d],)), [words[d]])[1] for d in range(2)]
    assert joint.log_partition == pytest.approx(sum(t.log_partition for t in parts), abs=1e-10)


def test_weights_match_engine_bit_for_bit():
    rng = make_rng(3)
    p = MmsbParams(3, [0.5, 1.5], rng.uniform(0.1, 0.9, (2, 2)))
    X, *_ = mmsb_sample(p, 3)
    inst = fn.mmsb_instance(p, X)
    table = oracle.enumerate_posterior(inst)
    z = table.assignments
    assert np.array_equal(table.log_weights, inst.upsilon(z))


def test_streaming_path_agrees(monkeypatch):
    rng = make_rng(4)
    p = LdaParams([0.5, 0.9], rng.dirichlet(np.ones(3), size=2), (9,))
    words, _, _ = lda_sample(p, 4)
    inst, kept = lda_table(p, words)
    monkeypatch.setattr(oracle, "KEEP_LIMIT", 10)
    monkeypatch.setattr(oracle, "CHUNK", 64)
    streamed = oracle.enumerate_posterior(inst)
    assert not streamed.retained and kept.retained
    assert streamed.log_partition == pytest.approx(kept.log_partition, abs=1e-12)
    y = fn.random_y(inst, 4)
    assert oracle.exact_kl(y, streamed) == pytest.approx(oracle.exact_kl(y, kept), abs=1e-12)


def test_size_cap():
    p = LdaParams([1.0, 1.0, 1.0], np.full((3, 2), 0.5), (15,))
    inst = fn.lda_instance(p, [np.zeros(15, dtype=int)])
    with pytest.raises(oracle.OracleSizeError):
        oracle.enumerate_posterior(inst)


def test_exact_kl_zero_for_single_site():
    p = LdaParams([0.5, 2.0], [[0.7, 0.3], [0.2, 0.8]], (1,))
    inst, table = lda_table(p, [np.array([1])])
    y = oracle.exact_marginals(table).site
    assert oracle.exact_kl(y, table) == pytest.approx(0.0, abs=1e-14)


def test_exact_kl_nonnegative_and_partition_identity():
    rng = make_rng(5)
    p = LdaParams([0.6, 1.4], rng.dirichlet(np.ones(3), size=2), (4,))
    words, _, _ = lda_sample(p, 5)
    inst, table = lda_table(p, words)
    for _ in range(50):
        y = fn.random_y(inst, rng, concentration=0.3)
        kl = oracle.exact_kl(y, table)
        assert kl >= -1e-12
        rhs = table.log_partition_mu - (fn.expected_energy(inst, y) - fn.eval_I(inst, y))
        assert kl == pytest.approx(rhs, abs=1e-8)


def test_exact_kl_infinite_on_impossible_mass():
    p = LdaParams([1.0, 1.0], [[1.0, 0.0], [0.5, 0.5]], (2,))
    inst, table = lda_table(p, [np.array([1, 0])])
    assert oracle.exact_kl(np.full((2, 2), 0.5), table) == np.inf
    with pytest.raises(ValueError):
        oracle.exact_kl(np.full((3, 2), 0.5), table)


def test_symmetric_marginals_uniform():
    # eta invariant under swapping the two topics means identical rows
    p = LdaParams([0.7, 0.7], [[0.2, 0.5, 0.3], [0.2, 0.5, 0.3]], (4,))
    _, table = lda_table(p, [np.array([0, 1, 2, 1])])
    assert np.allclose(oracle.exact_marginals(table).site, 0.5, atol=1e-12)


def _independent_pair_corr(alpha, B):
    """Posterior indicator correlation on the first pair of the n=3 all-edges graph, from scratch."""
    n = 3
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    logw, first = [], []
    for z in itertools.product(range(4), repeat=len(pairs)):
        N = np.zeros((n, 2))
        lw = 0.0
        for (i, j), c in zip(pairs, z):
            a, b = divmod(c, 2)
            N[i, a] += 1
            N[j, b] += 1
            lw += math.log(B[a][b])
        logw.append(lw + gammaln(N + np.asarray(alpha)).sum())
        first.append(z[0])
    w = np.exp(np.array(logw) - max(logw))
    w /= w.sum()
    first = np.array(first)
    p, q, m = w[first // 2 == 0].sum(), w[first % 2 == 0].sum(), w[first == 0].sum()
    return (m - p * q) / math.sqrt(p * (1 - p) * q * (1 - q))


@pytest.mark.parametrize("B, sign", [
    ([[0.9, 0.3], [0.3, 0.9]], 1.0),     # assortative: sender and receiver groups tend to agree
    ([[0.3, 0.9], [0.9, 0.3]], -1.0),    # disassortative: they tend to disagree
])
def test_mmsb_exact_correlations(B, sign):
    p = MmsbParams(3, [1.0, 1.0], B)
    X = np.ones((3, 3), dtype=int)
    marg = oracle.exact_marginals(oracle.enumerate_posterior(fn.mmsb_instance(p, X)))
    corr = marg.pair_corr
    assert np.all(sign * corr > 0)
    assert np.allclose(corr, corr[0], atol=1e-12)
    assert corr[0] == pytest.approx(_independent_pair_corr([1.0, 1.0], B), abs=1e-10)


def test_evidence_dominates_elbo():
    rng = make_rng(6)
    p = LdaParams([0.5, 0.8, 1.2], rng.dirichlet(np.ones(4), size=3), (3, 4))
    words, _, _ = lda_sample(p, 6)
    inst, table = lda_table(p, words)
    ev = oracle.log_evidence(inst, table)
    for s in range(5):
        assert ev >= lda_fit(p, words, seed=s, max_sweeps=s + 1).elbo - 1e-12
    mp = MmsbParams(3, [0.7, 0.7], rng.uniform(0.1, 0.9, (2, 2)))
    X, *_ = mmsb_sample(mp, 6)
    minst = fn.mmsb_instance(mp, X)
    mev = oracle.log_evidence(minst)
    for method in ("pg", "ff"):
        assert mev >= fit_once(mp, X, method, 6).elbo - 1e-12


def test_fitted_collapsed_vi_beats_random_competitors():
    rng = make_rng(7)
    p = LdaParams([0.5, 0.5], rng.dirichlet(np.ones(3), size=2), (6,))
    words, _, _ = lda_sample(p, 7)
    inst, table = lda_table(p, words)
    fit = fn.best_collapsed_vi(inst, 5, seed=7)
    best = oracle.exact_kl(fit.y, table)
    for _ in range(100):
        assert best <= oracle.exact_kl(fn.random_y(inst, rng), table) + 1e-12


def test_full_kl_matches_evidence_gap_at_any_state():
    rng = make_rng(8)
    p = MmsbParams(3, [0.6, 1.3], rng.uniform(0.1, 0.9, (2, 2)))
    X, *_ = mmsb_sample(p, 8)
    inst = fn.mmsb_instance(p, X)
    table = oracle.enumerate_posterior(inst)
    ev = oracle.log_evidence(inst, table)
    fit = fit_once(p, X, "ff", 8, max_sweeps=2)
    assert ev - fit.elbo == pytest.approx(oracle.full_kl_mmsb(inst, table, fit.state), abs=1e-8)


def test_dump_table(tmp_path):
    inst, table = lda_table(UNIFORM, [np.array([0, 1])])
    path = tmp_path / "t.csv"
    oracle.dump_table_csv(table, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["assignment", "log_weight", "log_prob"]
    assert [r[0] for r in rows[1:]] == ["1 1", "1 2", "2 1", "2 2"]
    with pytest.raises(oracle.OracleSizeError):
        oracle.dump_table_csv(table, path, max_states=3)


def test_quadrature_scope():
    with pytest.raises(ValueError):
        oracle.lda_evidence_quadrature(LdaParams([1.0], [[1.0]], (2,)), [np.array([0, 0])])
