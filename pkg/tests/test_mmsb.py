import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from mflatent import functionals as fn
from mflatent import oracle
from mflatent.io import fmt
from mflatent.mmsb import (
    FfState, MmsbParams, PgState, ff_cavi_step, ff_elbo, ff_init, fit_once, joint_indicator_corr,
    membership_counts, mmsb_collapsed_energy, mmsb_fit, mmsb_sample, pair_correlations, pair_index, pg_cavi_step,
    pg_elbo, pg_gamma, pg_init,
)
from mflatent.numerics import make_rng

ASSORT = MmsbParams(6, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])


def test_params_validation():
    with pytest.raises(ValueError):
        MmsbParams(3, [1.0], [[1.0]])
    with pytest.raises(ValueError):
        MmsbParams(3, [1.0, 1.0], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        MmsbParams(1, [1.0], [[0.5]])
    with pytest.raises(ValueError):
        MmsbParams(3, [1.0, 1.0], [[1.2, 0.3], [0.3, 0.9]])


def test_pair_order_row_major():
    i, j = pair_index(3)
    assert list(zip(i.tolist(), j.tolist())) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    assert len(pair_index(2)[0]) == 2


def test_sample_k1_edge_density():
    p = MmsbParams(120, [1.0], [[0.3]])
    X, _, z_out, z_in = mmsb_sample(p, 1)
    off = ~np.eye(120, dtype=bool)
    assert abs(X[off].mean() - 0.3) < 0.01
    assert np.all(z_out == 0) and np.all(z_in == 0)


def test_sample_constant_b_density():
    p = MmsbParams(150, [0.5, 0.5, 0.5], np.full((3, 3), 0.7))
    X, *_ = mmsb_sample(p, 2)
    assert abs(X[~np.eye(150, dtype=bool)].mean() - 0.7) < 0.01


def test_sample_deterministic():
    a = mmsb_sample(ASSORT, 42)
    b = mmsb_sample(ASSORT, 42)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_counts_invariants():
    X, _, z_out, z_in = mmsb_sample(ASSORT, 3)
    N, A, M = membership_counts(ASSORT, X, z_out, z_in)
    assert np.all(N.sum(axis=1) == 2 * (ASSORT.n - 1))
    assert A.sum() == ASSORT.n * (ASSORT.n - 1)
    assert np.all((M >= 0) & (M <= A))


def test_collapsed_energy_k1():
    b, a = 0.35, 0.7
    p = MmsbParams(2, [a], [[b]])
    X = np.ones((2, 2), dtype=int)
    z = np.zeros(2, dtype=int)
    assert mmsb_collapsed_energy(p, X, z, z) == pytest.approx(2 * math.log(b), abs=1e-14)


def test_collapsed_energy_impossible():
    p = MmsbParams(2, [1.0, 1.0], [[0.0, 0.5], [0.5, 0.5]])
    X = np.ones((2, 2), dtype=int)
    assert mmsb_collapsed_energy(p, X, np.array([0, 1]), np.array([0, 0])) == -np.inf
    assert np.isfinite(mmsb_collapsed_energy(p, X, np.array([1, 1]), np.array([0, 0])))


def test_collapsed_energy_label_symmetry():
    rng = make_rng(0)
    X, *_ = mmsb_sample(ASSORT, 0)
    for _ in range(20):
        zo = rng.integers(0, 2, ASSORT.P)
        zi = rng.integers(0, 2, ASSORT.P)
        assert mmsb_collapsed_energy(ASSORT, X, zo, zi) == pytest.approx(
            mmsb_collapsed_energy(ASSORT, X, 1 - zo, 1 - zi), abs=1e-12)


def test_collapsed_energy_formula_oracle():
    rng = make_rng(1)
    p = MmsbParams(4, [0.4, 1.3], [[0.8, 0.1], [0.4, 0.6]])
    X, *_ = mmsb_sample(p, 1)
    zo, zi = rng.integers(0, 2, p.P), rng.integers(0, 2, p.P)
    i, j = pair_index(p.n)
    total = 0.0
    counts = np.zeros((p.n, 2))
    for k in range(p.P):
        b = p.B[zo[k], zi[k]]
        total += math.log(b) if X[i[k], j[k]] else math.log(1 - b)
        counts[i[k], zo[k]] += 1
        counts[j[k], zi[k]] += 1
    total += gammaln(counts + p.alpha).sum() - p.n * gammaln(2 * (p.n - 1) + p.alpha.sum())
    assert mmsb_collapsed_energy(p, X, zo, zi) == pytest.approx(total, abs=1e-12)


def test_pg_hand_example():
    p = MmsbParams(3, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])
    X = np.ones((3, 3), dtype=int)
    state = pg_init(p, X, None, gamma=np.full((3, 2), 5.0))
    assert np.allclose(state.y.reshape(p.P, 4), [0.375, 0.125, 0.125, 0.375], atol=1e-15)


def test_pg_gamma_from_uniform_y():
    p = MmsbParams(3, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])
    assert np.allclose(pg_gamma(p, np.full((6, 2, 2), 0.25)), 3.0)


def test_k1_steps_and_elbo():
    p = MmsbParams(4, [0.6], [[0.3]])
    X, *_ = mmsb_sample(p, 9)
    pg = pg_cavi_step(p, X, pg_init(p, X, 0))
    assert np.all(pg.y == 1.0) and np.allclose(pg.gamma, 0.6 + 6)
    ff = ff_cavi_step(p, X, ff_init(p, X, 0))
    assert np.all(ff.y_out == 1.0) and np.all(ff.y_in == 1.0)
    i, j = pair_index(4)
    loglik = np.where(X[i, j] == 1, math.log(0.3), math.log(0.7)).sum()
    assert pg_elbo(p, X, pg) == pytest.approx(loglik, abs=1e-12)
    assert ff_elbo(p, X, ff) == pytest.approx(loglik, abs=1e-12)


def test_n2_k1_elbo():
    p = MmsbParams(2, [1.0], [[0.25]])
    X = np.array([[0, 1], [0, 0]])
    fit = fit_once(p, X, "pg", 0)
    assert fit.elbo == pytest.approx(math.log(0.25) + math.log(0.75), abs=1e-12)


def test_ff_symmetric_start():
    p = MmsbParams(3, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])
    X = np.ones((3, 3), dtype=int)
    state = ff_init(p, X, None, gamma=np.full((3, 2), 5.0))
    assert np.allclose(state.y_out, 0.5, atol=1e-15)
    assert np.allclose(state.y_in, 0.5, atol=1e-15)


def test_pg_equals_ff_at_product_states():
    X, *_ = mmsb_sample(ASSORT, 5)
    ff = ff_cavi_step(ASSORT, X, ff_init(ASSORT, X, 5))
    assert pg_elbo(ASSORT, X, ff.as_pg()) == pytest.approx(ff_elbo(ASSORT, X, ff), abs=1e-10)


def test_gamma_sum_identity_and_simplex():
    X, *_ = mmsb_sample(ASSORT, 6)
    target = 2 * (ASSORT.n - 1) + ASSORT.alpha.sum()
    pg, ff = pg_init(ASSORT, X, 6), ff_init(ASSORT, X, 6)
    for _ in range(10):
        pg = pg_cavi_step(ASSORT, X, pg)
        ff = ff_cavi_step(ASSORT, X, ff)
        assert np.allclose(pg.gamma.sum(axis=1), target, atol=1e-10, rtol=0)
        assert np.allclose(ff.gamma.sum(axis=1), target, atol=1e-10, rtol=0)
        assert np.allclose(pg.y.sum(axis=(1, 2)), 1.0, atol=1e-12)
        assert np.allclose(ff.y_out.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(ff.y_in.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("method", ["pg", "ff"])
@pytest.mark.parametrize("seed", range(10))
def test_monotone_trace(method, seed):
    rng = make_rng(seed)
    K = int(rng.integers(1, 4))
    p = MmsbParams(int(rng.integers(3, 12)), rng.uniform(0.3, 2.0, K), rng.uniform(0.05, 0.95, (K, K)))
    X, *_ = mmsb_sample(p, seed)
    fit = fit_once(p, X, method, seed)
    assert np.all(np.diff(fit.elbo_trace) >= -1e-9)


def test_pg_beats_ff_assortative_n50():
    p = MmsbParams(50, [1.0, 1.0], [[0.9, 0.3], [0.3, 0.9]])
    X, *_ = mmsb_sample(p, 0)
    pg = mmsb_fit(p, X, "pg", seed=1, restarts=5)
    ff = mmsb_fit(p, X, "ff", seed=1, restarts=5)
    assert pg.best_elbo >= ff.best_elbo
    assert pg.best.sweeps <= 500 and pg.best.converged
    assert pg.best_elbo == max(f.elbo for f in pg.fits)


def test_elbo_below_evidence_and_exact_gap():
    p = MmsbParams(3, [0.5, 0.8], [[0.8, 0.2], [0.3, 0.6]])
    X, *_ = mmsb_sample(p, 4)
    inst = fn.mmsb_instance(p, X)
    table = oracle.enumerate_posterior(inst)
    evidence = oracle.log_evidence(inst, table)
    for method in ("pg", "ff"):
        fit = fit_once(p, X, method, 4, tol=1e-13)
        assert evidence >= fit.elbo - 1e-9
        assert evidence - fit.elbo == pytest.approx(oracle.full_kl_mmsb(inst, table, fit.state), abs=1e-8)


def test_fit_deterministic():
    X, *_ = mmsb_sample(ASSORT, 8)
    a = mmsb_fit(ASSORT, X, "ff", seed=3, restarts=2)
    b = mmsb_fit(ASSORT, X, "ff", seed=3, restarts=2)
    assert [fmt(v) for v in a.best.elbo_trace] == [fmt(v) for v in b.best.elbo_trace]


def test_fit_argument_errors():
    X, *_ = mmsb_sample(ASSORT, 0)
    with pytest.raises(ValueError):
        mmsb_fit(ASSORT, X, restarts=0)
    with pytest.raises(ValueError):
        fit_once(ASSORT, X, "pg", 0, tol=0.0)
    with pytest.raises(ValueError):
        fit_once(ASSORT, X, "nope", 0)


def test_boundary_b_gets_zero_responsibility():
    p = MmsbParams(2, [1.0, 1.0], [[0.0, 0.0], [0.0, 0.5]])
    X = np.ones((2, 2), dtype=int)
    # only (2,2) can explain an edge, so all mass lands there
    fit = fit_once(p, X, "pg", 0)
    assert np.allclose(fit.state.y[:, 1, 1], 1.0)


@pytest.mark.parametrize("y, expected", [
    (np.array([[0.5, 0.0], [0.0, 0.5]]), 1.0),
    (np.full((2, 2), 0.25), 0.0),
])
def test_indicator_correlation_examples(y, expected):
    corr, ok = joint_indicator_corr(y, 0)
    assert ok and corr == pytest.approx(expected, abs=1e-15)


def test_indicator_correlation_undefined():
    corr, ok = joint_indicator_corr(np.array([[1.0, 0.0], [0.0, 0.0]]), 0)
    assert not ok and np.isnan(corr)


def test_pair_correlations_shape():
    X, *_ = mmsb_sample(ASSORT, 1)
    fit = fit_once(ASSORT, X, "pg", 1)
    pc = pair_correlations(fit.state)
    assert pc.corr.shape == (ASSORT.P,) and np.all(pc.defined)
    assert np.all(np.abs(pc.corr) <= 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_permutation(seed):
    rng = make_rng(seed)
    p = MmsbParams(5, rng.uniform(0.3, 2.0, 2), rng.uniform(0.05, 0.95, (2, 2)))
    X, *_ = mmsb_sample(p, seed)
    perm = np.array([1, 0])
    q = MmsbParams(5, p.alpha[perm], p.B[np.ix_(perm, perm)])
    for method in ("pg", "ff"):
        init = (pg_init if method == "pg" else ff_init)(p, X, seed)
        if method == "pg":
            pinit = PgState(init.y[:, perm][:, :, perm], init.gamma[:, perm])
        else:
            pinit = FfState(init.y_out[:, perm], init.y_in[:, perm], init.gamma[:, perm])
        a = fit_once(p, X, method, seed, max_sweeps=30, init=init)
        b = fit_once(q, X, method, seed, max_sweeps=30, init=pinit)
        assert np.allclose(a.elbo_trace, b.elbo_trace, atol=1e-9)
        assert np.allclose(a.state.gamma[:, perm], b.state.gamma, atol=1e-9)
