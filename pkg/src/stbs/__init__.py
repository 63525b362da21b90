"""Covariate-structured ideal-point topic scaling.

A Poisson-factorization topic model whose per-topic author positions are
regressed on categorical covariates, fitted by coordinate-ascent
variational inference combined with stochastic reparameterization
gradients, plus the post-hoc summaries (polarity, coverage-annotated
regression reports, ideology-corrected term rankings, influential
documents)."""

from .corpus import (CovariateTable, Covariate, DesignMatrix, DocTermMatrix,
                     apply_corpus_filters, build_design_matrix, load_corpus,
                     load_counts)
from .hpf import HpfFit, fit_hpf, hpf_elbo
from .inference import (FitConfig, FitResult, Hyperparams, VariationalState,
                        exact_elbo, fit, init_state, mc_elbo, reparam_gradients)
from .kernels import GammaParams, MvnParams, NormalParams
from .postprocess import (RegressionSummary, author_topic_weights, ccp_joint,
                          ccp_scalar, corrected_log_intensity, hpd_interval,
                          influential_docs, posterior_means, regression_summary,
                          star_label, top_terms, topic_polarity,
                          weighted_average_positions)
from .synth import GroundTruth, generate, recovery_metrics

__version__ = "0.1.0"
