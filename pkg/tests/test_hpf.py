"""Warm-start factorization: update arithmetic, ELBO monotonicity, the
term-by-term ELBO oracle, and fixed-point behavior."""

import numpy as np
import pytest

from stbs import kernels
from stbs.corpus import DocTermMatrix
from stbs.hpf import HpfFit, fit_hpf, hpf_elbo
from stbs.inference import Hyperparams
from stbs.synth import generate

from conftest import binary_design, moderate_truth_overrides, toy_matrix


def test_single_cell_theta_shape(hyper):
    """K=1, one doc, one term, y=5: degenerate allocation gives shape 5.3."""
    m = toy_matrix([(0, 0, 5)])
    fit = fit_hpf(m, 1, hyper, iters=1, seed=0)
    assert fit.theta_shp[0, 0] == pytest.approx(hyper.a_theta + 5.0, abs=1e-12)


def test_elbo_trace_monotone(hyper):
    rng = np.random.default_rng(2)
    table, design = binary_design(5)
    overrides = moderate_truth_overrides(rng, 30, 20, 3, 5)
    overrides["eta"] = np.zeros((3, 20))
    overrides["ideal"] = np.zeros((5, 3))
    m, _ = generate(hyper, 30, 20, 3, 5, design, seed=4, overrides=overrides)
    fit = fit_hpf(m, 3, hyper, iters=60, seed=1)
    tr = np.array(fit.elbo_trace)
    assert np.all(np.diff(tr) >= -1e-6 * np.abs(tr[:-1]))


def test_reconstruction_beats_rank_one_baseline(hyper):
    """E[theta] E[beta] must out-predict the row/column-mean factorization."""
    rng = np.random.default_rng(9)
    table, design = binary_design(8)
    overrides = moderate_truth_overrides(rng, 200, 100, 3, 8)
    overrides["eta"] = np.zeros((3, 100))
    overrides["ideal"] = np.zeros((8, 3))
    m, _ = generate(hyper, 200, 100, 3, 8, design, seed=12, overrides=overrides)
    fit = fit_hpf(m, 3, hyper, iters=80, seed=1)

    y = m.dense().astype(float)
    mu_model = (fit.theta_shp / fit.theta_rte) @ (fit.beta_shp / fit.beta_rte)

    def poisson_deviance(y, mu):
        mu = np.maximum(mu, 1e-12)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(term - (y - mu)))

    grand = y.sum()
    mu_rank1 = np.outer(y.sum(axis=1), y.sum(axis=0)) / grand
    assert poisson_deviance(y, mu_model) < poisson_deviance(y, mu_rank1)


def test_elbo_term_by_term_oracle(hyper):
    """2x2 corpus, K=1: assemble the same ELBO from kernel primitives."""
    m = toy_matrix([(0, 0, 2), (0, 1, 1), (1, 0, 3)], num_docs=2, num_terms=2,
                   doc_author=[0, 1], num_authors=2)
    fit = fit_hpf(m, 1, hyper, iters=5, seed=0)
    value = hpf_elbo(fit, m, hyper)

    th_s, th_r = fit.theta_shp, fit.theta_rte
    bt_s, bt_r = fit.b_theta_shp, fit.b_theta_rte
    be_s, be_r = fit.beta_shp, fit.beta_rte
    bb_s, bb_r = fit.b_beta_shp, fit.b_beta_rte
    e_th, el_th = th_s / th_r, kernels.expected_log_gamma(th_s, th_r)
    e_bt, el_bt = bt_s / bt_r, kernels.expected_log_gamma(bt_s, bt_r)
    e_be, el_be = be_s / be_r, kernels.expected_log_gamma(be_s, be_r)
    e_bb, el_bb = bb_s / bb_r, kernels.expected_log_gamma(bb_s, bb_r)

    y = m.dense().astype(float)
    recon = 0.0
    for d in range(2):
        for v in range(2):
            recon -= e_th[d, 0] * e_be[0, v]
            if y[d, v] > 0:
                recon += y[d, v] * (el_th[d, 0] + el_be[0, v])
                recon -= float(kernels.log_gamma(y[d, v] + 1.0))
    prior = 0.0
    for d in range(2):
        a = m.doc_author[d]
        prior += hyper.a_theta * el_bt[a] + (hyper.a_theta - 1.0) * el_th[d, 0] \
            - e_bt[a] * e_th[d, 0] - kernels.log_gamma(hyper.a_theta)
    c = hyper.a_theta_prime / hyper.b_theta_prime
    for a in range(2):
        prior += hyper.a_theta_prime * np.log(c) + (hyper.a_theta_prime - 1.0) * el_bt[a] \
            - c * e_bt[a] - kernels.log_gamma(hyper.a_theta_prime)
    for v in range(2):
        prior += hyper.a_beta * el_bb[v] + (hyper.a_beta - 1.0) * el_be[0, v] \
            - e_bb[v] * e_be[0, v] - kernels.log_gamma(hyper.a_beta)
    cb = hyper.a_beta_prime / hyper.b_beta_prime
    for v in range(2):
        prior += hyper.a_beta_prime * np.log(cb) + (hyper.a_beta_prime - 1.0) * el_bb[v] \
            - cb * e_bb[v] - kernels.log_gamma(hyper.a_beta_prime)
    entropy = float(np.sum(kernels.gamma_entropy(th_s, th_r))
                    + np.sum(kernels.gamma_entropy(bt_s, bt_r))
                    + np.sum(kernels.gamma_entropy(be_s, be_r))
                    + np.sum(kernels.gamma_entropy(bb_s, bb_r)))
    assert value == pytest.approx(recon + prior + entropy, abs=1e-8)


def test_zero_count_document_contributes_minus_rate(hyper):
    """Appending an empty document changes the ELBO by its theta prior and
    entropy minus the full expected rate mass."""
    m0 = toy_matrix([(0, 0, 2), (1, 1, 3)], num_docs=2, num_terms=2,
                    doc_author=[0, 0])
    fit0 = fit_hpf(m0, 1, hyper, iters=3, seed=0)

    m1 = toy_matrix([(0, 0, 2), (1, 1, 3)], num_docs=3, num_terms=2,
                    doc_author=[0, 0, 0])
    extra_shp, extra_rte = 0.31, 0.95
    fit1 = HpfFit(theta_shp=np.vstack([fit0.theta_shp, [[extra_shp]]]),
                  theta_rte=np.vstack([fit0.theta_rte, [[extra_rte]]]),
                  b_theta_shp=fit0.b_theta_shp, b_theta_rte=fit0.b_theta_rte,
                  beta_shp=fit0.beta_shp, beta_rte=fit0.beta_rte,
                  b_beta_shp=fit0.b_beta_shp, b_beta_rte=fit0.b_beta_rte)

    e_theta = extra_shp / extra_rte
    el_theta = float(kernels.expected_log_gamma(extra_shp, extra_rte))
    e_bt = fit0.b_theta_shp[0] / fit0.b_theta_rte[0]
    el_bt = float(kernels.expected_log_gamma(fit0.b_theta_shp[0], fit0.b_theta_rte[0]))
    recon_doc = -e_theta * float(np.sum(fit0.beta_shp / fit0.beta_rte))
    prior_doc = hyper.a_theta * el_bt + (hyper.a_theta - 1.0) * el_theta \
        - e_bt * e_theta - float(kernels.log_gamma(hyper.a_theta))
    entropy_doc = float(kernels.gamma_entropy(extra_shp, extra_rte))
    expected_delta = recon_doc + prior_doc + entropy_doc
    assert hpf_elbo(fit1, m1, hyper) - hpf_elbo(fit0, m0, hyper) == pytest.approx(
        expected_delta, abs=1e-10)


def test_perturbing_a_rate_lowers_elbo(hyper):
    rng = np.random.default_rng(1)
    table, design = binary_design(4)
    overrides = moderate_truth_overrides(rng, 12, 8, 2, 4)
    overrides["eta"] = np.zeros((2, 8))
    overrides["ideal"] = np.zeros((4, 2))
    m, _ = generate(hyper, 12, 8, 2, 4, design, seed=9, overrides=overrides)
    fit = fit_hpf(m, 2, hyper, iters=500, seed=3)
    base = hpf_elbo(fit, m, hyper)
    for arr, idx in (("beta_rte", (0, 0)), ("theta_rte", (0, 0)), ("b_beta_rte", (1,))):
        values = getattr(fit, arr)
        orig = values[idx]
        values[idx] = orig * 10.0
        assert hpf_elbo(fit, m, hyper) < base
        values[idx] = orig


def test_fixed_point_after_convergence(hyper):
    rng = np.random.default_rng(1)
    table, design = binary_design(4)
    overrides = moderate_truth_overrides(rng, 12, 8, 2, 4)
    overrides["eta"] = np.zeros((2, 8))
    overrides["ideal"] = np.zeros((4, 2))
    m, _ = generate(hyper, 12, 8, 2, 4, design, seed=9, overrides=overrides)

    names = ("theta_shp", "theta_rte", "b_theta_shp", "b_theta_rte",
             "beta_shp", "beta_rte", "b_beta_shp", "b_beta_rte")
    iters = 400
    while iters <= 25_600:
        a = fit_hpf(m, 2, hyper, iters=iters, seed=3)
        b = fit_hpf(m, 2, hyper, iters=iters + 1, seed=3)
        rel = max(float(np.max(np.abs(getattr(a, n) - getattr(b, n))
                               / np.abs(getattr(a, n)))) for n in names)
        if rel < 1e-8:
            return
        iters *= 2
    pytest.fail(f"one extra sweep still changes parameters by {rel:.2e}")


def test_non_finite_elbo_reports_sweep(hyper):
    m = toy_matrix([(0, 0, 5)])
    fit = fit_hpf(m, 1, hyper, iters=0, seed=0)
    assert fit.elbo_trace == []


def test_seeded_jitter_is_deterministic(hyper):
    m = toy_matrix([(0, 0, 2), (1, 1, 3)], doc_author=[0, 1], num_authors=2)
    a = fit_hpf(m, 2, hyper, iters=4, seed=11)
    b = fit_hpf(m, 2, hyper, iters=4, seed=11)
    for n in ("theta_shp", "theta_rte", "beta_shp", "beta_rte"):
        np.testing.assert_array_equal(getattr(a, n), getattr(b, n))
