"""Warm start: hierarchical Poisson factorization by full-batch CAVI.

This is the same machinery as the full model with the ideological factor
pinned to 1 (zero polarity values and positions, geometric expectation), so
the initializer and the optimizer share identical update semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import DocTermMatrix
from .errors import NumericalError
from .inference import (Hyperparams, VariationalState, allocation_probs,
                        exact_elbo, propose_b_beta, propose_b_theta,
                        propose_beta, update_local_theta)


@dataclass
class HpfFit:
    """Gamma blocks of the factorization warm start plus the per-sweep
    exact ELBO trace."""

    theta_shp: np.ndarray
    theta_rte: np.ndarray
    b_theta_shp: np.ndarray
    b_theta_rte: np.ndarray
    beta_shp: np.ndarray
    beta_rte: np.ndarray
    b_beta_shp: np.ndarray
    b_beta_rte: np.ndarray
    elbo_trace: list = field(default_factory=list)


def _pinned_state(m: DocTermMatrix, num_topics: int, hyper: Hyperparams,
                  rng: np.random.Generator) -> VariationalState:
    """Counts blocks at jittered prior means; ideological factor pinned to 1
    through zero locations; regression blocks are inert placeholders."""
    D, V, A, K = m.num_docs, m.num_terms, m.num_authors, num_topics

    def jitter(shape):
        return rng.uniform(0.9, 1.1, size=shape)

    tiny_uvar = kernels.logit(1e-6)
    return VariationalState(
        theta_shp=hyper.a_theta * jitter((D, K)),
        theta_rte=hyper.b_theta_prime * jitter((D, K)),
        b_theta_shp=hyper.a_theta_prime * jitter(A),
        b_theta_rte=(hyper.a_theta_prime / hyper.b_theta_prime) * jitter(A),
        beta_shp=hyper.a_beta * jitter((K, V)),
        beta_rte=hyper.b_beta_prime * jitter((K, V)),
        b_beta_shp=hyper.a_beta_prime * jitter(V),
        b_beta_rte=(hyper.a_beta_prime / hyper.b_beta_prime) * jitter(V),
        eta_loc=np.zeros((K, V)),
        eta_uvar=np.full((K, V), tiny_uvar),
        rho2_shp=np.full(K, hyper.a_rho),
        rho2_rte=np.full(K, 1.0),
        b_rho_shp=np.full(K, hyper.a_rho_prime),
        b_rho_rte=np.full(K, hyper.b_rho_rate),
        ideal_loc=np.zeros((A, 1)),
        ideal_uvar=np.full((A, 1), tiny_uvar),
        iprec_shp=np.full(A, hyper.a_iprec),
        iprec_rte=np.full(A, hyper.b_iprec),
        iota_loc=np.zeros((1, 1)),
        iota_chol=0.1 * np.eye(1),
        iota_center_loc=np.zeros(1),
        iota_center_var=np.ones(1),
        omega2_shp=np.full(1, hyper.a_omega),
        omega2_rte=np.full(1, 1.0),
        b_omega_shp=np.full(1, hyper.a_omega_prime),
        b_omega_rte=np.full(1, hyper.b_omega_rate),
        position_mode="fixed_across_topics",
    )


def fit_hpf(m: DocTermMatrix, num_topics: int, hyper: Hyperparams,
            iters: int = 200, seed: int = 0) -> HpfFit:
    """Full-batch CAVI sweeps over allocation, document intensities, author
    rates, term intensities and term rates.  Convergence is not required;
    the result is only a warm start."""
    rng = np.random.default_rng(seed)
    state = _pinned_state(m, num_topics, hyper, rng)
    all_docs = np.arange(m.num_docs)
    all_authors = np.arange(m.num_authors)
    # pinned factor: E_dkv = 1 for every cell
    e_stack = np.broadcast_to(1.0, (m.num_authors, num_topics, m.num_terms))

    trace = []
    for sweep in range(iters):
        alloc = allocation_probs(state, m, all_docs)
        update_local_theta(state, m, hyper, all_docs, alloc, all_authors, e_stack)
        state.b_theta_shp, state.b_theta_rte = propose_b_theta(state, m, hyper, all_docs, 1.0)
        state.beta_shp, state.beta_rte = propose_beta(state, m, hyper, all_docs,
                                                      alloc, all_authors, e_stack, 1.0)
        state.b_beta_shp, state.b_beta_rte = propose_b_beta(state, hyper)
        elbo = exact_elbo(state, m, hyper, expectation_mode="geometric", hpf_only=True)
        if not math.isfinite(elbo):
            raise NumericalError(f"non-finite ELBO at warm-start sweep {sweep}")
        trace.append(elbo)

    return HpfFit(theta_shp=state.theta_shp, theta_rte=state.theta_rte,
                  b_theta_shp=state.b_theta_shp, b_theta_rte=state.b_theta_rte,
                  beta_shp=state.beta_shp, beta_rte=state.beta_rte,
                  b_beta_shp=state.b_beta_shp, b_beta_rte=state.b_beta_rte,
                  elbo_trace=trace)


def hpf_elbo(fit: HpfFit, m: DocTermMatrix, hyper: Hyperparams) -> float:
    """Exact ELBO of the pinned factorization model at the given blocks."""
    rng = np.random.default_rng(0)
    state = _pinned_state(m, fit.beta_shp.shape[0], hyper, rng)
    state.theta_shp = fit.theta_shp.copy()
    state.theta_rte = fit.theta_rte.copy()
    state.b_theta_shp = fit.b_theta_shp.copy()
    state.b_theta_rte = fit.b_theta_rte.copy()
    state.beta_shp = fit.beta_shp.copy()
    state.beta_rte = fit.beta_rte.copy()
    state.b_beta_shp = fit.b_beta_shp.copy()
    state.b_beta_rte = fit.b_beta_rte.copy()
    return exact_elbo(state, m, hyper, expectation_mode="geometric", hpf_only=True)
