"""Shared builders for small corpora, designs, and states."""

import numpy as np
import pytest

from stbs.corpus import (Covariate, CovariateTable, DocTermMatrix,
                         build_design_matrix)
from stbs.inference import FitConfig, Hyperparams


def toy_matrix(entries, num_docs=None, num_terms=None, doc_author=None,
               num_authors=None, vocab=None):
    entries = np.asarray(entries, dtype=np.int64).reshape(-1, 3)
    nd = num_docs or int(entries[:, 0].max()) + 1
    nt = num_terms or int(entries[:, 1].max()) + 1
    if doc_author is None:
        doc_author = np.zeros(nd, dtype=np.int64)
        na = 1
    else:
        doc_author = np.asarray(doc_author, dtype=np.int64)
        na = num_authors or int(doc_author.max()) + 1
    return DocTermMatrix(nd, nt, na, entries[:, 0], entries[:, 1], entries[:, 2],
                         doc_author, vocab)


def binary_design(num_authors, name="grp"):
    labels = tuple("g1" if a % 2 else "g0" for a in range(num_authors))
    table = CovariateTable(num_authors, (Covariate(name, labels, "g0"),))
    return table, build_design_matrix(table, f"~ {name}")


def moderate_truth_overrides(rng, num_docs, num_terms, num_topics, num_authors,
                             eta_scale=0.8):
    """Pins the count-side blocks at moderate draws so synthetic corpora
    avoid the heavy upper tail of the unshrunk hierarchy."""
    return {
        "theta": rng.gamma(2.0, 0.5, (num_docs, num_topics)),
        "beta": rng.gamma(2.0, 0.5, (num_topics, num_terms)),
        "eta": rng.normal(0.0, eta_scale, (num_topics, num_terms)),
        "ideal": rng.normal(0.0, 1.0, (num_authors, num_topics)),
    }


def make_state(rng, num_docs, num_terms, num_topics, num_authors, num_coefs,
               position_cols=None):
    """A consistent random state with moderate values in every block."""
    from stbs.inference import VariationalState
    from stbs.kernels import logit

    kp = position_cols or num_topics
    raw = rng.uniform(0.2, 0.6, (num_coefs, num_coefs))
    chol = np.linalg.cholesky(raw @ raw.T + 0.05 * np.eye(num_coefs))

    def gam(*shape):
        return rng.uniform(0.5, 3.0, shape), rng.uniform(0.5, 3.0, shape)

    th = gam(num_docs, num_topics)
    bt = gam(num_authors)
    be = gam(num_topics, num_terms)
    bb = gam(num_terms)
    rh = gam(num_topics)
    br = gam(num_topics)
    ip = gam(num_authors)
    om = gam(num_coefs)
    bo = gam(num_coefs)
    state = VariationalState(
        theta_shp=th[0], theta_rte=th[1],
        b_theta_shp=bt[0], b_theta_rte=bt[1],
        beta_shp=be[0], beta_rte=be[1],
        b_beta_shp=bb[0], b_beta_rte=bb[1],
        eta_loc=rng.normal(0.0, 0.7, (num_topics, num_terms)),
        eta_uvar=logit(rng.uniform(0.05, 0.6, (num_topics, num_terms))),
        rho2_shp=rh[0], rho2_rte=rh[1],
        b_rho_shp=br[0], b_rho_rte=br[1],
        ideal_loc=rng.normal(0.0, 1.0, (num_authors, kp)),
        ideal_uvar=logit(rng.uniform(0.05, 0.6, (num_authors, kp))),
        iprec_shp=ip[0], iprec_rte=ip[1],
        iota_loc=rng.normal(0.0, 0.5, (kp, num_coefs)),
        iota_chol=chol,
        iota_center_loc=rng.normal(0.0, 0.5, num_coefs),
        iota_center_var=rng.uniform(0.2, 1.5, num_coefs),
        omega2_shp=om[0], omega2_rte=om[1],
        b_omega_shp=bo[0], b_omega_rte=bo[1],
        position_mode="topic_specific" if kp == num_topics else "fixed_across_topics",
    )
    state.adam_m = {"eta_loc": np.zeros((num_topics, num_terms)),
                    "eta_uvar": np.zeros((num_topics, num_terms)),
                    "ideal_loc": np.zeros((num_authors, kp)),
                    "ideal_uvar": np.zeros((num_authors, kp))}
    state.adam_v = {k: v.copy() for k, v in state.adam_m.items()}
    return state


@pytest.fixture
def hyper():
    return Hyperparams()


@pytest.fixture
def small_corpus():
    """D=10, V=12, K-agnostic corpus over 4 authors with moderate counts."""
    rng = np.random.default_rng(17)
    table, design = binary_design(4)
    from stbs.synth import generate
    overrides = moderate_truth_overrides(rng, 10, 12, 2, 4)
    overrides["ideal"] = np.array([-1.0, 1.0, -1.0, 1.0])[:, None] * np.ones((4, 2))
    m, truth = generate(Hyperparams(), 10, 12, 2, 4, design, seed=3,
                        overrides=overrides)
    return m, table, design, truth
