"""Sampling corpora from the generative model with known ground truth, for
recovery experiments and update-formula oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DesignMatrix, DocTermMatrix
from .errors import ConfigError, NumericalError
from .inference import Hyperparams, VariationalState

LAMBDA_GUARD = 1e9


@dataclass
class GroundTruth:
    """Every latent block drawn (or pinned) during generation."""

    theta: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    ideal: np.ndarray
    iota: np.ndarray
    iprec: np.ndarray
    b_theta: np.ndarray
    b_beta: np.ndarray
    rho2: np.ndarray
    b_rho: np.ndarray
    iota_center: np.ndarray
    omega2: np.ndarray
    b_omega: np.ndarray
    doc_author: np.ndarray
    seed: int


# ancestral order with each variable's parents; generation asserts that
# parents are drawn first
_DEPENDENCIES = (
    ("b_omega", ()),
    ("omega2", ("b_omega",)),
    ("iota_center", ()),
    ("iota", ("iota_center", "omega2")),
    ("iprec", ()),
    ("ideal", ("iota", "iprec")),
    ("b_rho", ()),
    ("rho2", ("b_rho",)),
    ("eta", ("rho2",)),
    ("b_theta", ()),
    ("theta", ("b_theta",)),
    ("b_beta", ()),
    ("beta", ("b_beta",)),
)


def generate(hyper: Hyperparams, num_docs: int, num_terms: int, num_topics: int,
             num_authors: int, design: DesignMatrix, seed: int,
             overrides: dict | None = None,
             doc_author: np.ndarray | None = None) -> tuple[DocTermMatrix, GroundTruth]:
    """Ancestral sampling through the full hierarchy, then Poisson counts.

    `overrides` pins named blocks (e.g. {'ideal': ...}) instead of drawing
    them; documents default to round-robin author assignment."""
    if design.num_authors != num_authors:
        raise ConfigError("design matrix rows must equal num_authors")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {name for name, _ in _DEPENDENCIES}
    if unknown:
        raise ConfigError(f"unknown override blocks: {sorted(unknown)}")

    if doc_author is None:
        doc_author = np.arange(num_docs, dtype=np.int64) % num_authors
    else:
        doc_author = np.asarray(doc_author, dtype=np.int64)
        if doc_author.shape != (num_docs,):
            raise ConfigError("doc_author must assign every document")

    rng = np.random.default_rng(seed)
    D, V, K, A = num_docs, num_terms, num_topics, num_authors
    L = design.num_coefs
    X = design.matrix

    shapes = {
        "b_omega": (L,), "omega2": (L,), "iota_center": (L,), "iota": (K, L),
        "iprec": (A,), "ideal": (A, K), "b_rho": (K,), "rho2": (K,),
        "eta": (K, V), "b_theta": (A,), "theta": (D, K),
        "b_beta": (V,), "beta": (K, V),
    }
    drawn: dict[str, np.ndarray] = {}

    def draw(name: str, sampler) -> np.ndarray:
        parents = dict(_DEPENDENCIES)[name]
        missing = [p for p in parents if p not in drawn]
        assert not missing, f"{name} drawn before its parents {missing}"
        if name in overrides:
            try:
                val = np.broadcast_to(np.asarray(overrides[name], dtype=np.float64),
                                      shapes[name]).copy()
            except ValueError:
                raise ConfigError(f"override {name} must broadcast to {shapes[name]}") from None
        else:
            val = sampler()
        if val.shape != shapes[name]:
            raise ConfigError(f"block {name} must have shape {shapes[name]}")
        drawn[name] = val
        return val

    b_omega = draw("b_omega", lambda: rng.gamma(hyper.a_omega_prime, 1.0 / hyper.b_omega_rate, L))
    omega2 = draw("omega2", lambda: rng.gamma(hyper.a_omega, 1.0 / drawn["b_omega"]))
    iota_center = draw("iota_center", lambda: rng.normal(0.0, 1.0, L))
    iota = draw("iota", lambda: rng.normal(drawn["iota_center"][None, :],
                                           1.0 / np.sqrt(drawn["omega2"])[None, :], (K, L)))
    iprec = draw("iprec", lambda: rng.gamma(hyper.a_iprec, 1.0 / hyper.b_iprec, A))
    ideal = draw("ideal", lambda: rng.normal(X @ drawn["iota"].T,
                                             1.0 / np.sqrt(drawn["iprec"])[:, None], (A, K)))
    b_rho = draw("b_rho", lambda: rng.gamma(hyper.a_rho_prime, 1.0 / hyper.b_rho_rate, K))
    rho2 = draw("rho2", lambda: rng.gamma(hyper.a_rho, 1.0 / drawn["b_rho"]))
    eta = draw("eta", lambda: rng.normal(0.0, 1.0 / np.sqrt(drawn["rho2"])[:, None], (K, V)))
    b_theta = draw("b_theta", lambda: rng.gamma(
        hyper.a_theta_prime, hyper.b_theta_prime / hyper.a_theta_prime, A))
    theta = draw("theta", lambda: rng.gamma(
        hyper.a_theta, 1.0 / drawn["b_theta"][doc_author][:, None], (D, K)))
    b_beta = draw("b_beta", lambda: rng.gamma(
        hyper.a_beta_prime, hyper.b_beta_prime / hyper.a_beta_prime, V))
    beta = draw("beta", lambda: rng.gamma(hyper.a_beta, 1.0 / drawn["b_beta"][None, :], (K, V)))

    lam = np.empty((D, V))
    with np.errstate(over="ignore"):
        for a in range(A):
            docs = np.flatnonzero(doc_author == a)
            if len(docs) == 0:
                continue
            lam[docs] = theta[docs] @ (beta * np.exp(eta * ideal[a][:, None]))
    if not np.all(np.isfinite(lam)) or lam.max() > LAMBDA_GUARD:
        raise NumericalError("degenerate draw (a Poisson rate exceeds 1e9); re-seed advised")

    y = rng.poisson(lam)
    docs_nz, terms_nz = np.nonzero(y)
    matrix = DocTermMatrix(num_docs=D, num_terms=V, num_authors=A,
                           doc_idx=docs_nz, term_idx=terms_nz,
                           counts=y[docs_nz, terms_nz], doc_author=doc_author)
    truth = GroundTruth(theta=theta, beta=beta, eta=eta, ideal=ideal, iota=iota,
                        iprec=iprec, b_theta=b_theta, b_beta=b_beta, rho2=rho2,
                        b_rho=b_rho, iota_center=iota_center, omega2=omega2,
                        b_omega=b_omega, doc_author=doc_author, seed=seed)
    return matrix, truth


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.std() == 0.0 or b.std() == 0.0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def recovery_metrics(truth: GroundTruth, state: VariationalState,
                     anchors=None, eta_threshold: float = 0.5) -> dict:
    """Per-block Pearson correlations, sign agreement for the strong
    polarity values, and coefficient RMSE.  Signs are compared directly:
    when anchors fixed the orientation no post-hoc flipping is applied.
    Degenerate (zero-variance) comparisons report None."""
    K = truth.ideal.shape[1]
    ideal_est = state.ideal_loc
    if ideal_est.shape[1] == 1 and K > 1:
        ideal_est = np.repeat(ideal_est, K, axis=1)
    iota_est = state.iota_loc
    if iota_est.shape[0] == 1 and K > 1:
        iota_est = np.repeat(iota_est, K, axis=0)

    strong = np.abs(truth.eta) > eta_threshold
    sign_agreement = None
    if strong.any():
        sign_agreement = float(np.mean(
            np.sign(state.eta_loc[strong]) == np.sign(truth.eta[strong])))

    iota_corr = [_pearson(truth.iota[:, l], iota_est[:, l])
                 for l in range(truth.iota.shape[1])]
    return {
        "ideal_corr": _pearson(truth.ideal, ideal_est),
        "eta_corr": _pearson(truth.eta, state.eta_loc),
        "iota_corr_per_coef": iota_corr,
        "eta_sign_agreement": sign_agreement,
        "iota_rmse": float(np.sqrt(np.mean((truth.iota - iota_est) ** 2))),
    }
