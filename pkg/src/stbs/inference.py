"""Hybrid coordinate-ascent / stochastic-gradient variational optimizer.

The conjugate blocks (all gamma families plus the regression coefficients
and their centers) get closed-form coordinate updates, blended with a
Robbins-Monro step size when the update is batch-noisy.  The polarity values
and the ideological positions are non-conjugate, so they are moved by Adam
on reparameterization gradients of a Monte-Carlo ELBO estimate.  Their
variational variances live in (0, 1) behind a sigmoid, which keeps the
expectation of the ideological factor finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from .corpus import DesignMatrix, DocTermMatrix
from .errors import ConfigError, NumericalError
from .kernels import LOG_2PI

# order of the blended global coordinate updates within one batch step
GLOBAL_BLOCK_ORDER = ("b_theta", "beta", "b_beta", "rho2", "b_rho",
                      "iota", "iota_center", "iprec", "omega2", "b_omega")

EXPECTATION_MODES = ("exact", "geometric")
POSITION_MODES = ("topic_specific", "fixed_across_topics")


@dataclass(frozen=True)
class Hyperparams:
    """Fixed prior constants of the generative hierarchy."""

    a_theta: float = 0.3
    a_theta_prime: float = 0.3
    b_theta_prime: float = 0.3
    a_beta: float = 0.3
    a_beta_prime: float = 0.3
    b_beta_prime: float = 0.3
    a_rho: float = 0.3
    a_rho_prime: float = 0.3
    kappa2_rho: float = 10.0
    a_omega: float = 0.3
    a_omega_prime: float = 0.3
    kappa2_omega: float = 10.0
    a_iprec: float = 0.3
    b_iprec: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0.0:
                raise ConfigError(f"hyperparameter {f.name} must be positive")

    # prior rates of the two rate hierarchies
    @property
    def b_rho_rate(self) -> float:
        return 0.5 * self.kappa2_rho * self.a_rho_prime / self.a_rho

    @property
    def b_omega_rate(self) -> float:
        return 0.5 * self.kappa2_omega * self.a_omega_prime / self.a_omega


@dataclass(frozen=True)
class FitConfig:
    num_topics: int = 25
    epochs: int = 1000
    batch_size: int = 512
    mc_samples: int = 1
    step_kappa: float = 0.51
    step_tau: float = 0.0
    adam_lr: float = 0.01
    seed: int = 0
    expectation_mode: str = "exact"
    position_mode: str = "topic_specific"
    hpf_iters: int = 200
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.num_topics < 1:
            raise ConfigError("num_topics must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if not 0.5 < self.step_kappa <= 1.0:
            raise ConfigError("step_kappa must lie in (0.5, 1]")
        if self.step_tau < 0.0:
            raise ConfigError("step_tau must be >= 0")
        if self.expectation_mode not in EXPECTATION_MODES:
            raise ConfigError(f"expectation_mode must be one of {EXPECTATION_MODES}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"position_mode must be one of {POSITION_MODES}")
        if self.hpf_iters < 0:
            raise ConfigError("hpf_iters must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


ADAM_PARAM_NAMES = ("eta_loc", "eta_uvar", "ideal_loc", "ideal_uvar")

# float64 saturates sigmoid at |x| ~ 37; keep variances strictly inside (0, 1)
_UNIT_HI = np.nextafter(1.0, 0.0)
_UNIT_LO = 1e-300


def _clip_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(x, _UNIT_LO, _UNIT_HI)


@dataclass
class VariationalState:
    """All variational parameters plus the Adam moments and step counter.

    Gamma blocks are (shp, rte) array pairs.  The polarity block `eta` and
    the position block `ideal` store an unconstrained variance `uvar`; the
    actual variance is sigmoid(uvar) in (0, 1).  Under
    position_mode='fixed_across_topics' the position/regression blocks have
    a single topic column that broadcasts across all topics.
    """

    theta_shp: np.ndarray
    theta_rte: np.ndarray
    b_theta_shp: np.ndarray
    b_theta_rte: np.ndarray
    beta_shp: np.ndarray
    beta_rte: np.ndarray
    b_beta_shp: np.ndarray
    b_beta_rte: np.ndarray
    eta_loc: np.ndarray
    eta_uvar: np.ndarray
    rho2_shp: np.ndarray
    rho2_rte: np.ndarray
    b_rho_shp: np.ndarray
    b_rho_rte: np.ndarray
    ideal_loc: np.ndarray
    ideal_uvar: np.ndarray
    iprec_shp: np.ndarray
    iprec_rte: np.ndarray
    iota_loc: np.ndarray
    iota_chol: np.ndarray
    iota_center_loc: np.ndarray
    iota_center_var: np.ndarray
    omega2_shp: np.ndarray
    omega2_rte: np.ndarray
    b_omega_shp: np.ndarray
    b_omega_rte: np.ndarray
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    t: int = 0
    position_mode: str = "topic_specific"

    @property
    def num_docs(self) -> int:
        return self.theta_shp.shape[0]

    @property
    def num_topics(self) -> int:
        return self.beta_shp.shape[0]

    @property
    def num_terms(self) -> int:
        return self.beta_shp.shape[1]

    @property
    def num_authors(self) -> int:
        return self.b_theta_shp.shape[0]

    @property
    def num_coefs(self) -> int:
        return self.iota_loc.shape[1]

    @property
    def num_position_cols(self) -> int:
        """1 under fixed positions, K under topic-specific ones."""
        return self.ideal_loc.shape[1]

    @property
    def eta_var(self) -> np.ndarray:
        return _clip_unit(kernels.sigmoid(self.eta_uvar))

    @property
    def ideal_var(self) -> np.ndarray:
        return _clip_unit(kernels.sigmoid(self.ideal_uvar))

    @property
    def theta_mean(self) -> np.ndarray:
        return self.theta_shp / self.theta_rte

    @property
    def beta_mean(self) -> np.ndarray:
        return self.beta_shp / self.beta_rte

    @property
    def iota_cov(self) -> np.ndarray:
        return self.iota_chol @ self.iota_chol.T

    def copy(self) -> "VariationalState":
        kw = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                kw[f.name] = val.copy()
            elif isinstance(val, dict):
                kw[f.name] = {k: v.copy() for k, v in val.items()}
            else:
                kw[f.name] = val
        return VariationalState(**kw)

    def assert_valid(self) -> None:
        for name in ("theta", "b_theta", "beta", "b_beta", "rho2", "b_rho",
                     "iprec", "omega2", "b_omega"):
            shp = getattr(self, name + "_shp")
            rte = getattr(self, name + "_rte")
            if not (np.all(np.isfinite(shp)) and np.all(np.isfinite(rte))
                    and np.all(shp > 0) and np.all(rte > 0)):
                raise NumericalError(f"invalid gamma block {name}")
        for name in ("eta_loc", "eta_uvar", "ideal_loc", "ideal_uvar",
                     "iota_loc", "iota_center_loc"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"non-finite block {name}")
        if np.any(self.eta_var >= 1.0) or np.any(self.ideal_var >= 1.0):
            raise NumericalError("eta/position variance escaped (0, 1)")
        if not np.all(np.isfinite(self.iota_chol)) or np.any(np.diagonal(self.iota_chol) <= 0):
            raise NumericalError("invalid regression Cholesky factor")
        if np.any(self.iota_center_var <= 0) or not np.all(np.isfinite(self.iota_center_var)):
            raise NumericalError("invalid regression-center variance")


def init_state(m: DocTermMatrix, design: DesignMatrix, hpf, anchors,
               cfg: FitConfig, hyper: Hyperparams, seed: int | None = None) -> VariationalState:
    """Assemble the starting state: count blocks from the warm start,
    positions at their anchor values, everything else at prior means."""
    K = cfg.num_topics
    A = m.num_authors
    V = m.num_terms
    L = design.num_coefs
    kp = 1 if cfg.position_mode == "fixed_across_topics" else K

    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape != (A,):
        raise ConfigError(f"anchors must provide one value per author ({A}), got shape {anchors.shape}")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    uvar0 = kernels.logit(0.25)

    state = VariationalState(
        theta_shp=hpf.theta_shp.copy(), theta_rte=hpf.theta_rte.copy(),
        b_theta_shp=hpf.b_theta_shp.copy(), b_theta_rte=hpf.b_theta_rte.copy(),
        beta_shp=hpf.beta_shp.copy(), beta_rte=hpf.beta_rte.copy(),
        b_beta_shp=hpf.b_beta_shp.copy(), b_beta_rte=hpf.b_beta_rte.copy(),
        eta_loc=rng.normal(0.0, 0.01, size=(K, V)),
        eta_uvar=np.full((K, V), uvar0),
        rho2_shp=np.full(K, hyper.a_rho),
        rho2_rte=np.full(K, hyper.a_rho_prime / hyper.b_rho_rate * hyper.a_rho / hyper.a_rho_prime),
        b_rho_shp=np.full(K, hyper.a_rho_prime),
        b_rho_rte=np.full(K, hyper.b_rho_rate),
        ideal_loc=np.repeat(anchors[:, None], kp, axis=1),
        ideal_uvar=np.full((A, kp), uvar0),
        iprec_shp=np.full(A, hyper.a_iprec),
        iprec_rte=np.full(A, hyper.b_iprec),
        iota_loc=np.zeros((kp, L)),
        iota_chol=0.1 * np.eye(L),
        iota_center_loc=np.zeros(L),
        iota_center_var=np.ones(L),
        omega2_shp=np.full(L, hyper.a_omega),
        omega2_rte=np.full(L, hyper.a_omega_prime / hyper.b_omega_rate * hyper.a_omega / hyper.a_omega_prime),
        b_omega_shp=np.full(L, hyper.a_omega_prime),
        b_omega_rte=np.full(L, hyper.b_omega_rate),
        t=0,
        position_mode=cfg.position_mode,
    )
    state.adam_m = {"eta_loc": np.zeros((K, V)), "eta_uvar": np.zeros((K, V)),
                    "ideal_loc": np.zeros((A, kp)), "ideal_uvar": np.zeros((A, kp))}
    state.adam_v = {k: v.copy() for k, v in state.adam_m.items()}
    state.assert_valid()
    return state


# ---------------------------------------------------------------------------
# expectations of the ideological factor


def ideological_expectation(state: VariationalState, authors, mode: str) -> np.ndarray:
    """E_dkv (or its geometric stand-in) for the given authors; shape
    (len(authors), K, V)."""
    if mode not in EXPECTATION_MODES:
        raise ConfigError(f"unknown expectation mode {mode!r}")
    authors = np.asarray(authors, dtype=np.int64)
    K, V = state.eta_loc.shape
    out = np.empty((len(authors), K, V))
    eta_loc = state.eta_loc
    eta_var = state.eta_var
    ideal_loc = state.ideal_loc
    ideal_var = state.ideal_var
    for i, a in enumerate(authors):
        loc_y = ideal_loc[a][:, None]
        if mode == "geometric":
            out[i] = np.exp(eta_loc * loc_y)
        else:
            out[i] = kernels.expected_ideological_term(eta_loc, eta_var,
                                                       loc_y, ideal_var[a][:, None])
    return out


# ---------------------------------------------------------------------------
# auxiliary-count allocation


@dataclass
class Allocation:
    """Per positive count cell: the corpus entry and its K-simplex of
    topic responsibilities."""

    doc: np.ndarray
    term: np.ndarray
    count: np.ndarray
    probs: np.ndarray


def _batch_entries(m: DocTermMatrix, doc_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    indptr = m.doc_indptr()
    pieces = [np.arange(indptr[d], indptr[d + 1]) for d in np.asarray(doc_ids)]
    idx = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
    return m.doc_idx[idx], m.term_idx[idx], m.counts[idx]


def allocation_probs(state: VariationalState, m: DocTermMatrix, doc_ids) -> Allocation:
    """Topic responsibilities proportional to
    exp{E[log theta] + E[log beta] + E[eta] E[position]} over positive cells."""
    dd, vv, yy = _batch_entries(m, doc_ids)
    if len(dd) == 0:
        K = state.num_topics
        return Allocation(dd, vv, yy, np.empty((0, K)))
    aa = m.doc_author[dd]
    scores = kernels.expected_log_gamma(state.theta_shp[dd], state.theta_rte[dd])
    scores = scores + kernels.expected_log_gamma(state.beta_shp[:, vv], state.beta_rte[:, vv]).T
    scores = scores + state.eta_loc[:, vv].T * state.ideal_loc[aa, :]
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    return Allocation(dd, vv, yy, probs)


# ---------------------------------------------------------------------------
# CAVI updates and proposals


def update_local_theta(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                       doc_ids, alloc: Allocation, e_authors, e_stack) -> None:
    """Direct (unblended) update of the per-document intensities in the batch."""
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    nb = len(doc_ids)
    K = state.num_topics
    pos_of_doc = np.full(state.num_docs, -1, dtype=np.int64)
    pos_of_doc[doc_ids] = np.arange(nb)

    shp = np.full((nb, K), hyper.a_theta)
    np.add.at(shp, pos_of_doc[alloc.doc], alloc.count[:, None] * alloc.probs)

    # sum_v E[beta] * E_dkv depends on the document only through its author
    m_author = (e_stack * state.beta_mean[None, :, :]).sum(axis=2)
    pos_of_author = {int(a): i for i, a in enumerate(e_authors)}
    b_mean = state.b_theta_shp / state.b_theta_rte
    rte = np.empty((nb, K))
    for i, d in enumerate(doc_ids):
        a = int(m.doc_author[d])
        rte[i] = b_mean[a] + m_author[pos_of_author[a]]

    state.theta_shp[doc_ids] = shp
    state.theta_rte[doc_ids] = rte


def propose_b_theta(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                    doc_ids, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Batch-scaled proposal for the author verbosity rates; authors absent
    from the batch fall back to the prior-only update."""
    A = state.num_authors
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    batch_authors = m.doc_author[doc_ids]
    docs_in_batch = np.bincount(batch_authors, minlength=A).astype(np.float64)
    shp = hyper.a_theta_prime + scale * state.num_topics * docs_in_batch * hyper.a_theta
    theta_sums = np.zeros(A)
    np.add.at(theta_sums, batch_authors, state.theta_mean[doc_ids].sum(axis=1))
    rte = hyper.a_theta_prime / hyper.b_theta_prime + scale * theta_sums
    return shp, rte


def propose_beta(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                 doc_ids, alloc: Allocation, e_authors, e_stack,
                 scale: float) -> tuple[np.ndarray, np.ndarray]:
    K, V = state.beta_shp.shape
    shp = np.zeros((V, K))
    np.add.at(shp, alloc.term, alloc.count[:, None] * alloc.probs)
    shp = hyper.a_beta + scale * shp.T

    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    t_author = np.zeros((state.num_authors, K))
    np.add.at(t_author, m.doc_author[doc_ids], state.theta_mean[doc_ids])
    s_kv = np.zeros((K, V))
    for i, a in enumerate(e_authors):
        s_kv += t_author[a][:, None] * e_stack[i]
    rte = (state.b_beta_shp / state.b_beta_rte)[None, :] + scale * s_kv
    return shp, rte


def propose_b_beta(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    V = state.num_terms
    shp = np.full(V, hyper.a_beta_prime + state.num_topics * hyper.a_beta)
    rte = hyper.a_beta_prime / hyper.b_beta_prime + state.beta_mean.sum(axis=0)
    return shp, rte


def propose_rho2(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    V = state.num_terms
    shp = np.full(state.num_topics, hyper.a_rho + 0.5 * V)
    second = state.eta_loc ** 2 + state.eta_var
    rte = state.b_rho_shp / state.b_rho_rte + 0.5 * second.sum(axis=1)
    return shp, rte


def propose_b_rho(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    shp = np.full(state.num_topics, hyper.a_rho_prime + hyper.a_rho)
    rte = hyper.b_rho_rate + state.rho2_shp / state.rho2_rte
    return shp, rte


def propose_iota(state: VariationalState, hyper: Hyperparams,
                 design: DesignMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Ridge-style combination of the prior centers and the precision-weighted
    least-squares fit of the positions; the covariance is shared across topics."""
    X = design.matrix
    e_omega = state.omega2_shp / state.omega2_rte
    e_iprec = state.iprec_shp / state.iprec_rte
    prec = np.diag(e_omega) + (X.T * e_iprec) @ X
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    rhs = e_omega[:, None] * state.iota_center_loc[:, None] + X.T @ (e_iprec[:, None] * state.ideal_loc)
    loc = (cov @ rhs).T
    return loc, cov


def propose_iota_center(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    kp = state.iota_loc.shape[0]
    e_omega = state.omega2_shp / state.omega2_rte
    var = 1.0 / (1.0 + kp * e_omega)
    loc = var * e_omega * state.iota_loc.sum(axis=0)
    return loc, var


def propose_iprec(state: VariationalState, hyper: Hyperparams,
                  design: DesignMatrix) -> tuple[np.ndarray, np.ndarray]:
    X = design.matrix
    kp = state.num_position_cols
    shp = np.full(state.num_authors, hyper.a_iprec + 0.5 * kp)
    resid = state.ideal_loc - X @ state.iota_loc.T
    quad = (resid ** 2 + state.ideal_var).sum(axis=1)
    xvar = (X ** 2) @ np.diagonal(state.iota_cov)
    rte = hyper.b_iprec + 0.5 * (quad + kp * xvar)
    return shp, rte


def propose_omega2(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    kp = state.iota_loc.shape[0]
    shp = np.full(state.num_coefs, hyper.a_omega + 0.5 * kp)
    dev = ((state.iota_loc - state.iota_center_loc[None, :]) ** 2).sum(axis=0)
    spread = kp * (np.diagonal(state.iota_cov) + state.iota_center_var)
    rte = state.b_omega_shp / state.b_omega_rte + 0.5 * (dev + spread)
    return shp, rte


def propose_b_omega(state: VariationalState, hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    shp = np.full(state.num_coefs, hyper.a_omega_prime + hyper.a_omega)
    rte = hyper.b_omega_rate + state.omega2_shp / state.omega2_rte
    return shp, rte


def blend_global(proposal, current, rho: float):
    """Convex combination in (shp, rte) / (loc, var or cov) coordinates."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"blend weight must lie in (0, 1], got {rho}")
    return rho * np.asarray(proposal, dtype=np.float64) + (1.0 - rho) * np.asarray(current, dtype=np.float64)


def apply_global_updates(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                         design: DesignMatrix, doc_ids, alloc: Allocation,
                         e_authors, e_stack, scale: float, rho: float) -> None:
    """Run the ten blended global CAVI updates in their fixed order; each
    proposal sees the blocks updated before it."""
    shp, rte = propose_b_theta(state, m, hyper, doc_ids, scale)
    state.b_theta_shp = blend_global(shp, state.b_theta_shp, rho)
    state.b_theta_rte = blend_global(rte, state.b_theta_rte, rho)

    shp, rte = propose_beta(state, m, hyper, doc_ids, alloc, e_authors, e_stack, scale)
    state.beta_shp = blend_global(shp, state.beta_shp, rho)
    state.beta_rte = blend_global(rte, state.beta_rte, rho)

    shp, rte = propose_b_beta(state, hyper)
    state.b_beta_shp = blend_global(shp, state.b_beta_shp, rho)
    state.b_beta_rte = blend_global(rte, state.b_beta_rte, rho)

    shp, rte = propose_rho2(state, hyper)
    state.rho2_shp = blend_global(shp, state.rho2_shp, rho)
    state.rho2_rte = blend_global(rte, state.rho2_rte, rho)

    shp, rte = propose_b_rho(state, hyper)
    state.b_rho_shp = blend_global(shp, state.b_rho_shp, rho)
    state.b_rho_rte = blend_global(rte, state.b_rho_rte, rho)

    loc, cov = propose_iota(state, hyper, design)
    state.iota_loc = blend_global(loc, state.iota_loc, rho)
    cov_blend = blend_global(cov, state.iota_cov, rho)
    state.iota_chol = np.linalg.cholesky(cov_blend)

    loc, var = propose_iota_center(state, hyper)
    state.iota_center_loc = blend_global(loc, state.iota_center_loc, rho)
    state.iota_center_var = blend_global(var, state.iota_center_var, rho)

    shp, rte = propose_iprec(state, hyper, design)
    state.iprec_shp = blend_global(shp, state.iprec_shp, rho)
    state.iprec_rte = blend_global(rte, state.iprec_rte, rho)

    shp, rte = propose_omega2(state, hyper)
    state.omega2_shp = blend_global(shp, state.omega2_shp, rho)
    state.omega2_rte = blend_global(rte, state.omega2_rte, rho)

    shp, rte = propose_b_omega(state, hyper)
    state.b_omega_shp = blend_global(shp, state.b_omega_shp, rho)
    state.b_omega_rte = blend_global(rte, state.b_omega_rte, rho)


# ---------------------------------------------------------------------------
# closed-form prior and entropy pieces shared by the exact and the sampled ELBO


def _gamma_prior_sum(e_log_x, e_x, a, b_mean, b_log_mean) -> float:
    term = a * b_log_mean + (a - 1.0) * e_log_x - b_mean * e_x - kernels.log_gamma(a)
    return float(np.sum(term))


def _closed_form_priors(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                        doc_ids, scale: float) -> dict[str, float]:
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    out = {}

    elog_btheta = kernels.expected_log_gamma(state.b_theta_shp, state.b_theta_rte)
    e_btheta = state.b_theta_shp / state.b_theta_rte
    aa = m.doc_author[doc_ids]
    elog_theta = kernels.expected_log_gamma(state.theta_shp[doc_ids], state.theta_rte[doc_ids])
    out["prior_theta"] = scale * _gamma_prior_sum(
        elog_theta, state.theta_mean[doc_ids], hyper.a_theta,
        e_btheta[aa][:, None], elog_btheta[aa][:, None])
    c = hyper.a_theta_prime / hyper.b_theta_prime
    out["prior_b_theta"] = _gamma_prior_sum(elog_btheta, e_btheta,
                                            hyper.a_theta_prime, c, math.log(c))

    elog_bbeta = kernels.expected_log_gamma(state.b_beta_shp, state.b_beta_rte)
    e_bbeta = state.b_beta_shp / state.b_beta_rte
    elog_beta = kernels.expected_log_gamma(state.beta_shp, state.beta_rte)
    out["prior_beta"] = _gamma_prior_sum(elog_beta, state.beta_mean, hyper.a_beta,
                                         e_bbeta[None, :], elog_bbeta[None, :])
    c = hyper.a_beta_prime / hyper.b_beta_prime
    out["prior_b_beta"] = _gamma_prior_sum(elog_bbeta, e_bbeta,
                                           hyper.a_beta_prime, c, math.log(c))

    elog_brho = kernels.expected_log_gamma(state.b_rho_shp, state.b_rho_rte)
    e_brho = state.b_rho_shp / state.b_rho_rte
    elog_rho2 = kernels.expected_log_gamma(state.rho2_shp, state.rho2_rte)
    out["prior_rho2"] = _gamma_prior_sum(elog_rho2, state.rho2_shp / state.rho2_rte,
                                         hyper.a_rho, e_brho, elog_brho)
    out["prior_b_rho"] = _gamma_prior_sum(elog_brho, e_brho, hyper.a_rho_prime,
                                          hyper.b_rho_rate, math.log(hyper.b_rho_rate))

    elog_iprec = kernels.expected_log_gamma(state.iprec_shp, state.iprec_rte)
    out["prior_iprec"] = _gamma_prior_sum(elog_iprec, state.iprec_shp / state.iprec_rte,
                                          hyper.a_iprec, hyper.b_iprec, math.log(hyper.b_iprec))

    elog_bomega = kernels.expected_log_gamma(state.b_omega_shp, state.b_omega_rte)
    e_bomega = state.b_omega_shp / state.b_omega_rte
    elog_omega2 = kernels.expected_log_gamma(state.omega2_shp, state.omega2_rte)
    out["prior_omega2"] = _gamma_prior_sum(elog_omega2, state.omega2_shp / state.omega2_rte,
                                           hyper.a_omega, e_bomega, elog_bomega)
    out["prior_b_omega"] = _gamma_prior_sum(elog_bomega, e_bomega, hyper.a_omega_prime,
                                            hyper.b_omega_rate, math.log(hyper.b_omega_rate))

    e_omega = state.omega2_shp / state.omega2_rte
    cov_diag = np.diagonal(state.iota_cov)
    dev2 = (state.iota_loc - state.iota_center_loc[None, :]) ** 2 + cov_diag[None, :] \
        + state.iota_center_var[None, :]
    out["prior_iota"] = float(np.sum(0.5 * elog_omega2[None, :] - 0.5 * LOG_2PI
                                     - 0.5 * e_omega[None, :] * dev2))
    out["prior_iota_center"] = float(np.sum(-0.5 * LOG_2PI
                                            - 0.5 * (state.iota_center_loc ** 2 + state.iota_center_var)))
    return out


def _entropy_sum(state: VariationalState, doc_ids, scale: float) -> float:
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    kp = state.iota_loc.shape[0]
    total = scale * float(np.sum(kernels.gamma_entropy(state.theta_shp[doc_ids],
                                                       state.theta_rte[doc_ids])))
    for name in ("b_theta", "beta", "b_beta", "rho2", "b_rho", "iprec", "omega2", "b_omega"):
        total += float(np.sum(kernels.gamma_entropy(getattr(state, name + "_shp"),
                                                    getattr(state, name + "_rte"))))
    total += float(np.sum(kernels.normal_entropy(state.eta_var)))
    total += float(np.sum(kernels.normal_entropy(state.ideal_var)))
    total += kp * kernels.mvn_entropy(state.iota_chol)
    total += float(np.sum(kernels.normal_entropy(state.iota_center_var)))
    return total


# ---------------------------------------------------------------------------
# exact ELBO under the auxiliary-count allocation


def exact_elbo(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
               design: DesignMatrix | None = None, alloc: Allocation | None = None,
               expectation_mode: str = "exact", hpf_only: bool = False) -> float:
    """Deterministic full-corpus ELBO: the auxiliary-count reconstruction
    bound plus closed-form prior expectations and entropies.  This is the
    objective every conjugate coordinate update maximizes.

    With `hpf_only` the polarity/position/regression terms are dropped
    (the warm-start factorization model)."""
    all_docs = np.arange(m.num_docs)
    if alloc is None:
        alloc = allocation_probs(state, m, all_docs)

    elog_theta = kernels.expected_log_gamma(state.theta_shp, state.theta_rte)
    elog_beta = kernels.expected_log_gamma(state.beta_shp, state.beta_rte)
    aa = m.doc_author[alloc.doc]
    score = elog_theta[alloc.doc] + elog_beta[:, alloc.term].T \
        + state.eta_loc[:, alloc.term].T * state.ideal_loc[aa, :]
    probs = np.clip(alloc.probs, 1e-300, None)
    recon = float(np.sum(alloc.count[:, None] * alloc.probs * (score - np.log(probs))))
    recon -= float(np.sum(kernels.log_gamma(alloc.count + 1.0)))

    authors = np.arange(m.num_authors)
    e_stack = ideological_expectation(state, authors, expectation_mode)
    t_author = np.zeros((m.num_authors, state.num_topics))
    np.add.at(t_author, m.doc_author, state.theta_mean)
    beta_mean = state.beta_mean
    for a in authors:
        recon -= float(t_author[a] @ (beta_mean * e_stack[a]).sum(axis=1))

    if hpf_only:
        priors = _closed_form_priors(state, m, hyper, all_docs, 1.0)
        total = recon + priors["prior_theta"] + priors["prior_b_theta"] \
            + priors["prior_beta"] + priors["prior_b_beta"]
        total += float(np.sum(kernels.gamma_entropy(state.theta_shp, state.theta_rte)))
        for name in ("b_theta", "beta", "b_beta"):
            total += float(np.sum(kernels.gamma_entropy(getattr(state, name + "_shp"),
                                                        getattr(state, name + "_rte"))))
        return total

    if design is None:
        raise ConfigError("exact_elbo needs the design matrix unless hpf_only=True")

    priors = _closed_form_priors(state, m, hyper, all_docs, 1.0)

    elog_rho2 = kernels.expected_log_gamma(state.rho2_shp, state.rho2_rte)
    e_rho2 = state.rho2_shp / state.rho2_rte
    eta2 = state.eta_loc ** 2 + state.eta_var
    prior_eta = float(np.sum(0.5 * elog_rho2[:, None] - 0.5 * LOG_2PI
                             - 0.5 * e_rho2[:, None] * eta2))

    # the position-prior quadratic uses the diagonal of the shared regression
    # covariance, matching the precision update it feeds
    X = design.matrix
    elog_iprec = kernels.expected_log_gamma(state.iprec_shp, state.iprec_rte)
    e_iprec = state.iprec_shp / state.iprec_rte
    resid2 = (state.ideal_loc - X @ state.iota_loc.T) ** 2 + state.ideal_var
    xvar = (X ** 2) @ np.diagonal(state.iota_cov)
    prior_ideal = float(np.sum(0.5 * elog_iprec[:, None] - 0.5 * LOG_2PI
                               - 0.5 * e_iprec[:, None] * (resid2 + xvar[:, None])))

    total = recon + sum(priors.values()) + prior_eta + prior_ideal
    total += _entropy_sum(state, all_docs, 1.0)
    return total


# ---------------------------------------------------------------------------
# Monte-Carlo ELBO and its reparameterization gradients


def _sampled_core(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                  design: DesignMatrix, doc_ids, z_eta: np.ndarray, z_ideal: np.ndarray,
                  want_grads: bool):
    """Shared implementation of mc_elbo / reparam_gradients.

    The reconstruction samples eta and the positions via the
    reparameterization map and plugs posterior means in for every
    gamma-family variable; priors of the sampled blocks use the current
    precision means and regression locations; entropies are exact."""
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    K, V = state.eta_loc.shape
    A = state.num_authors
    kp = state.num_position_cols
    n_draws = z_eta.shape[0]
    if z_eta.shape != (n_draws, K, V) or z_ideal.shape != (n_draws, A, kp):
        raise ConfigError("z draws must cover every eta and position entry")
    scale = m.num_docs / len(doc_ids)

    dd, vv, yy = _batch_entries(m, doc_ids)
    aa = m.doc_author[dd]
    theta_mean = state.theta_mean
    beta_mean = state.beta_mean
    theta_rows = theta_mean[dd]
    t_author = np.zeros((A, K))
    np.add.at(t_author, m.doc_author[doc_ids], theta_mean[doc_ids])
    batch_authors = np.unique(m.doc_author[doc_ids])

    eta_var = state.eta_var
    ideal_var = state.ideal_var
    eta_sd = np.sqrt(eta_var)
    ideal_sd = np.sqrt(ideal_var)

    e_rho2 = state.rho2_shp / state.rho2_rte
    elog_rho2 = kernels.expected_log_gamma(state.rho2_shp, state.rho2_rte)
    e_iprec = state.iprec_shp / state.iprec_rte
    elog_iprec = kernels.expected_log_gamma(state.iprec_shp, state.iprec_rte)
    pred = design.matrix @ state.iota_loc.T

    lgamma_y = float(np.sum(kernels.log_gamma(yy + 1.0))) if len(yy) else 0.0

    recon_acc = 0.0
    prior_eta_acc = 0.0
    prior_ideal_acc = 0.0
    g = None
    if want_grads:
        g = {"eta_loc": np.zeros((K, V)), "eta_uvar": np.zeros((K, V)),
             "ideal_loc": np.zeros((A, kp)), "ideal_uvar": np.zeros((A, kp))}

    for i in range(n_draws):
        eta_i = state.eta_loc + eta_sd * z_eta[i]
        ideal_i = state.ideal_loc + ideal_sd * z_ideal[i]

        lam_nk = theta_rows * beta_mean[:, vv].T * np.exp(eta_i[:, vv].T * ideal_i[aa, :])
        lam_n = lam_nk.sum(axis=1)
        recon = float(yy @ np.log(lam_n)) - lgamma_y if len(yy) else 0.0

        factor = {}
        for a in batch_authors:
            f_a = np.exp(eta_i * ideal_i[a][:, None] if kp == K
                         else eta_i * ideal_i[a, 0])
            factor[int(a)] = f_a
            recon -= float(t_author[a] @ (beta_mean * f_a).sum(axis=1))
        recon_acc += scale * recon

        prior_eta_i = float(np.sum(0.5 * elog_rho2[:, None] - 0.5 * LOG_2PI
                                   - 0.5 * e_rho2[:, None] * eta_i ** 2))
        dev = ideal_i - pred
        prior_ideal_i = float(np.sum(0.5 * elog_iprec[:, None] - 0.5 * LOG_2PI
                                     - 0.5 * e_iprec[:, None] * dev ** 2))
        prior_eta_acc += prior_eta_i
        prior_ideal_acc += prior_ideal_i

        if not want_grads:
            continue

        w = lam_nk / lam_n[:, None] if len(yy) else lam_nk
        d_eta = np.zeros((V, K))
        if len(yy):
            np.add.at(d_eta, vv, yy[:, None] * w * ideal_i[aa, :])
        d_eta = d_eta.T
        d_ideal_full = np.zeros((A, K))
        if len(yy):
            np.add.at(d_ideal_full, aa, yy[:, None] * w * eta_i[:, vv].T)
        for a in batch_authors:
            f_a = factor[int(a)]
            ia = ideal_i[a] if kp == K else np.full(K, ideal_i[a, 0])
            d_eta -= (t_author[a] * ia)[:, None] * beta_mean * f_a
            d_ideal_full[a] -= t_author[a] * (eta_i * beta_mean * f_a).sum(axis=1)
        d_eta *= scale
        d_ideal_full *= scale
        d_ideal = d_ideal_full if kp == K else d_ideal_full.sum(axis=1, keepdims=True)

        d_eta += -e_rho2[:, None] * eta_i
        d_ideal += -e_iprec[:, None] * dev

        g["eta_loc"] += d_eta
        g["eta_uvar"] += d_eta * z_eta[i] * eta_sd * (1.0 - eta_var) * 0.5
        g["ideal_loc"] += d_ideal
        g["ideal_uvar"] += d_ideal * z_ideal[i] * ideal_sd * (1.0 - ideal_var) * 0.5

    breakdown = {
        "reconstruction": recon_acc / n_draws,
        "prior_eta": prior_eta_acc / n_draws,
        "prior_ideal": prior_ideal_acc / n_draws,
    }
    breakdown.update(_closed_form_priors(state, m, hyper, doc_ids, scale))
    breakdown["entropy"] = _entropy_sum(state, doc_ids, scale)
    for name, term in breakdown.items():
        if not math.isfinite(term):
            raise NumericalError(f"non-finite ELBO term {name}")
    value = float(sum(breakdown.values()))

    if want_grads:
        for key in g:
            g[key] /= n_draws
        # the exact entropies contribute only through the variances
        g["eta_uvar"] += (1.0 - eta_var) * 0.5
        g["ideal_uvar"] += (1.0 - ideal_var) * 0.5
    return value, breakdown, g


def mc_elbo(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
            design: DesignMatrix, doc_ids, z_eta, z_ideal):
    """Monte-Carlo ELBO estimate for one batch; returns (estimate, per-term
    breakdown).  Deterministic given the z draws."""
    value, breakdown, _ = _sampled_core(state, m, hyper, design, doc_ids,
                                        np.asarray(z_eta), np.asarray(z_ideal), False)
    return value, breakdown


def reparam_gradients(state: VariationalState, m: DocTermMatrix, hyper: Hyperparams,
                      design: DesignMatrix, doc_ids, z_eta, z_ideal) -> dict[str, np.ndarray]:
    """Analytic gradients of mc_elbo with respect to the unconstrained
    (loc, pre-sigmoid variance) parameters of eta and the positions."""
    _, _, grads = _sampled_core(state, m, hyper, design, doc_ids,
                                np.asarray(z_eta), np.asarray(z_ideal), True)
    return grads


def adam_step(m_moment: np.ndarray, v_moment: np.ndarray, grad: np.ndarray,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam step (ascent); updates the moment arrays in place and
    returns the parameter increment."""
    if t < 1:
        raise ConfigError("Adam step counter must be >= 1")
    m_moment *= beta1
    m_moment += (1.0 - beta1) * grad
    v_moment *= beta2
    v_moment += (1.0 - beta2) * grad * grad
    m_hat = m_moment / (1.0 - beta1 ** t)
    v_hat = v_moment / (1.0 - beta2 ** t)
    return lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# the full optimizer


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: list
    rng_state: dict


def fit(m: DocTermMatrix, design: DesignMatrix, anchors, hyper: Hyperparams,
        cfg: FitConfig, *, init=None, resume=None, rng_state=None,
        checkpoint_cb=None, log_cb=None) -> FitResult:
    """Run the epoch/batch optimization loop.

    `init` may carry a precomputed warm start (duck-typed: the eight count
    blocks); otherwise one is fitted here.  `resume` continues from a saved
    state (with `rng_state` restoring the random stream)."""
    if m.num_authors != design.num_authors:
        raise ConfigError("design matrix rows must match the corpus authors")

    if resume is not None:
        state = resume
        if state.num_docs != m.num_docs or state.num_terms != m.num_terms:
            raise ConfigError("resume state does not match the corpus dimensions")
        rng = np.random.default_rng(cfg.seed)
        if rng_state is not None:
            rng.bit_generator.state = rng_state
    else:
        if init is None:
            from .hpf import fit_hpf
            init = fit_hpf(m, cfg.num_topics, hyper, cfg.hpf_iters, cfg.seed)
        state = init_state(m, design, init, anchors, cfg, hyper)
        rng = np.random.default_rng(cfg.seed)

    D = m.num_docs
    n_batches = max(1, math.ceil(D / cfg.batch_size))
    trace = []
    t = state.t

    for epoch in range(cfg.epochs):
        perm = rng.permutation(D)
        for batch in np.array_split(perm, n_batches):
            t += 1
            rho = kernels.step_size(t, cfg.step_tau, cfg.step_kappa)
            scale = D / len(batch)

            alloc = allocation_probs(state, m, batch)
            e_authors = np.unique(m.doc_author[batch])
            e_stack = ideological_expectation(state, e_authors, cfg.expectation_mode)
            update_local_theta(state, m, hyper, batch, alloc, e_authors, e_stack)
            apply_global_updates(state, m, hyper, design, batch, alloc,
                                 e_authors, e_stack, scale, rho)

            kp = state.num_position_cols
            z_eta = rng.standard_normal((cfg.mc_samples,) + state.eta_loc.shape)
            z_ideal = rng.standard_normal((cfg.mc_samples, state.num_authors, kp))
            try:
                value, _, grads = _sampled_core(state, m, hyper, design, batch,
                                                z_eta, z_ideal, True)
            except NumericalError:
                if checkpoint_cb is not None:
                    checkpoint_cb(state, rng.bit_generator.state, t)
                raise

            for name in ADAM_PARAM_NAMES:
                inc = adam_step(state.adam_m[name], state.adam_v[name],
                                grads[name], cfg.adam_lr, t)
                setattr(state, name, getattr(state, name) + inc)

            state.t = t
            state.assert_valid()
            trace.append((t, epoch, value))
            if checkpoint_cb is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                checkpoint_cb(state, rng.bit_generator.state, t)
        if log_cb is not None:
            log_cb(epoch, trace[-1][2] if trace else float("nan"))

    return FitResult(state=state, elbo_trace=trace, rng_state=rng.bit_generator.state)
