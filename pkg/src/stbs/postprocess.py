"""Post-hoc summaries of a fitted state: point estimates, coverage
statistics, topic polarity, weighted positions, ideology-corrected term
rankings, influential documents, and regression-summary data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize, special, stats

from . import kernels
from .corpus import CovariateTable, DesignMatrix, DocTermMatrix
from .errors import ConfigError, DomainError, FormulaError
from .inference import VariationalState
from .kernels import GammaParams, NormalParams

STAR_THRESHOLDS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "·"))


def posterior_means(state: VariationalState) -> dict[str, np.ndarray]:
    """Variational means for every block: locations for normal families,
    shp/rte ratios for gamma families."""
    return {
        "theta": state.theta_shp / state.theta_rte,
        "b_theta": state.b_theta_shp / state.b_theta_rte,
        "beta": state.beta_shp / state.beta_rte,
        "b_beta": state.b_beta_shp / state.b_beta_rte,
        "eta": state.eta_loc.copy(),
        "rho2": state.rho2_shp / state.rho2_rte,
        "b_rho": state.b_rho_shp / state.b_rho_rte,
        "ideal": state.ideal_loc.copy(),
        "iprec": state.iprec_shp / state.iprec_rte,
        "iota": state.iota_loc.copy(),
        "iota_center": state.iota_center_loc.copy(),
        "omega2": state.omega2_shp / state.omega2_rte,
        "b_omega": state.b_omega_shp / state.b_omega_rte,
    }


# ---------------------------------------------------------------------------
# coverage statistics


def ccp_scalar(loc, sd):
    """Complement of the symmetric HPD region touching zero:
    2 * (1 - Phi(|loc| / sd))."""
    loc = np.asarray(loc, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if np.any(sd <= 0.0):
        raise DomainError("ccp_scalar requires sd > 0")
    out = special.erfc(np.abs(loc) / (sd * math.sqrt(2.0)))
    return out if out.ndim else float(out)


def star_label(ccp: float) -> str:
    """Significance code; thresholds are strict (ccp == 0.05 earns the next
    weaker label)."""
    for threshold, label in STAR_THRESHOLDS:
        if ccp < threshold:
            return label
    return ""


class JointCcp(NamedTuple):
    value: float
    df: int
    degenerate: bool


def ccp_joint(contrast, loc, cov) -> JointCcp:
    """Chi-square coverage complement for the linear combination C @ iota.

    All-zero contrast rows are dropped first; if nothing usable remains (or
    the reduced covariance is numerically singular) the result is flagged
    degenerate with CCP 1."""
    C = np.atleast_2d(np.asarray(contrast, dtype=np.float64))
    loc = np.asarray(loc, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    keep = np.abs(C).sum(axis=1) > 0
    C = C[keep]
    if C.shape[0] == 0:
        return JointCcp(1.0, 0, True)
    M = C @ cov @ C.T
    try:
        chol = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return JointCcp(1.0, 0, True)
    w = np.linalg.solve(chol, C @ loc)
    q = float(w @ w)
    df = C.shape[0]
    return JointCcp(float(special.gammaincc(df / 2.0, q / 2.0)), df, False)


def hpd_interval(params, level: float) -> tuple[float, float]:
    """Highest-density interval of a normal or gamma variational family."""
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    if isinstance(params, NormalParams):
        z = float(special.ndtri(0.5 * (1.0 + level)))
        return params.loc - z * params.sd, params.loc + z * params.sd
    if isinstance(params, GammaParams):
        dist = stats.gamma(params.shp, scale=1.0 / params.rte)
        if params.shp <= 1.0:
            # density is decreasing, the shortest interval starts at 0
            return 0.0, float(dist.ppf(level))

        def width(alpha):
            return dist.ppf(alpha + level) - dist.ppf(alpha)

        res = optimize.minimize_scalar(width, bounds=(0.0, 1.0 - level),
                                       method="bounded",
                                       options={"xatol": 1e-10})
        alpha = float(res.x)
        return float(dist.ppf(alpha)), float(dist.ppf(alpha + level))
    raise ConfigError(f"unsupported family {type(params).__name__}")


# ---------------------------------------------------------------------------
# topic-level summaries


def topic_polarity(state: VariationalState) -> np.ndarray:
    """Per topic, the population variance of the products of every polarity
    location with every position location (all author/term pairs)."""
    K = state.num_topics
    out = np.empty(K)
    for k in range(K):
        x = state.eta_loc[k]
        y = state.ideal_loc[:, k] if state.num_position_cols == K else state.ideal_loc[:, 0]
        mean_sq = np.mean(x * x) * np.mean(y * y)
        sq_mean = (np.mean(x) * np.mean(y)) ** 2
        out[k] = mean_sq - sq_mean
    return out


def author_topic_weights(state: VariationalState, m: DocTermMatrix) -> np.ndarray:
    """w[a, k]: the author's average topic intensity mean."""
    docs_per_author = m.docs_per_author()
    if np.any(docs_per_author == 0):
        a = int(np.flatnonzero(docs_per_author == 0)[0])
        raise ConfigError(f"author {a} has no documents")
    w = np.zeros((m.num_authors, state.num_topics))
    np.add.at(w, m.doc_author, state.theta_mean)
    return w / docs_per_author[:, None]


def weighted_average_positions(state: VariationalState, weights: np.ndarray) -> np.ndarray:
    """Topic-prevalence-weighted average position per author."""
    weights = np.asarray(weights, dtype=np.float64)
    loc = state.ideal_loc
    if state.num_position_cols == 1:
        loc = np.repeat(loc, state.num_topics, axis=1)
    return (weights * loc).sum(axis=1) / weights.sum(axis=1)


def corrected_log_intensity(state: VariationalState, k: int, v: int, ideology: float) -> float:
    """E[log beta_kv] + ideology * E[eta_kv]."""
    return float(kernels.digamma(state.beta_shp[k, v]) - math.log(state.beta_rte[k, v])
                 + ideology * state.eta_loc[k, v])


def corrected_log_intensities(state: VariationalState, k: int, ideology: float) -> np.ndarray:
    return (kernels.digamma(state.beta_shp[k]) - np.log(state.beta_rte[k])
            + ideology * state.eta_loc[k])


def shifted_log_intensities(state: VariationalState, k: int, ideology: float) -> np.ndarray:
    """Report form: minimum subtracted, 5% of the range added back."""
    vals = corrected_log_intensities(state, k, ideology)
    rng = vals.max() - vals.min()
    return vals - vals.min() + 0.05 * rng


def top_terms(state: VariationalState, k: int, ideology: float, n: int = 10) -> np.ndarray:
    """Term ids ranked by ideology-corrected log intensity, descending;
    ties broken by term id."""
    vals = corrected_log_intensities(state, k, ideology)
    order = np.lexsort((np.arange(len(vals)), -vals))
    return order[:min(n, len(vals))]


# ---------------------------------------------------------------------------
# influential documents


class InfluentialDoc(NamedTuple):
    doc: int
    chi: float
    clamped: bool


def influential_docs(state: VariationalState, m: DocTermMatrix, k: int,
                     pool_size: int, top_n: int,
                     expectation_plugin: str = "geometric") -> list[InfluentialDoc]:
    """Two-step ranking: pool the documents with the highest topic-k
    intensity means, then score each by the likelihood-ratio statistic for
    zeroing that topic's ideological contribution."""
    if not 1 <= top_n <= pool_size:
        raise ConfigError("need pool_size >= top_n >= 1")
    if expectation_plugin not in ("geometric", "exact"):
        raise ConfigError(f"unknown expectation plugin {expectation_plugin!r}")
    theta_mean = state.theta_mean
    beta_mean = state.beta_mean
    e_theta_k = theta_mean[:, k]
    order = np.lexsort((np.arange(m.num_docs), -e_theta_k))
    pool = order[:min(pool_size, m.num_docs)]

    indptr = m.doc_indptr()
    factor_cache: dict[int, np.ndarray] = {}
    rows = []
    for d in pool:
        a = int(m.doc_author[d])
        if a not in factor_cache:
            loc_i = state.ideal_loc[a][:, None]
            if expectation_plugin == "geometric":
                factor_cache[a] = np.exp(state.eta_loc * loc_i)
            else:
                factor_cache[a] = kernels.expected_ideological_term(
                    state.eta_loc, state.eta_var, loc_i, state.ideal_var[a][:, None])
        F = factor_cache[a]
        lam1 = theta_mean[d] @ (beta_mean * F)
        lam_dif = theta_mean[d, k] * beta_mean[k] * (1.0 - F[k])
        lam0 = lam1 + lam_dif
        clamped = bool(np.any(lam0 <= 0.0))
        lam0 = np.maximum(lam0, 1e-12)
        lo, hi = indptr[d], indptr[d + 1]
        vv, yy = m.term_idx[lo:hi], m.counts[lo:hi]
        chi = 2.0 * (float(yy @ np.log(lam1[vv] / lam0[vv])) + float(lam_dif.sum()))
        rows.append(InfluentialDoc(int(d), chi, clamped))
    rows.sort(key=lambda r: (-r.chi, r.doc))
    return rows[:top_n]


# ---------------------------------------------------------------------------
# regression summaries


@dataclass
class RegressionSummary:
    """Tabular data behind the regression summary plots."""

    coefficients: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    category_counts: dict = field(default_factory=dict)


def _histogram(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return counts, edges


def regression_summary(state: VariationalState, design: DesignMatrix,
                       table: CovariateTable | None = None,
                       main_covariate: str | None = None,
                       bins: int = 20) -> RegressionSummary:
    """Coefficient estimates with scalar and per-group joint CCPs, plus
    histogram data of the estimated positions (optionally grouped by one
    covariate)."""
    cov = state.iota_cov
    se = np.sqrt(np.diagonal(cov))
    zero_cols = set(int(j) for j in design.zero_columns())
    L = design.num_coefs
    kp = state.iota_loc.shape[0]

    out = RegressionSummary()
    for k in range(kp):
        loc = state.iota_loc[k]
        for j in range(L):
            ccp = float(ccp_scalar(loc[j], se[j]))
            out.coefficients.append({
                "topic": k, "index": j, "name": design.column_names[j],
                "estimate": float(loc[j]), "se": float(se[j]),
                "ccp": ccp, "label": star_label(ccp),
                "zero_column": j in zero_cols,
            })
        for group, cols in design.term_groups.items():
            kept = [j for j in cols if j not in zero_cols]
            C = np.zeros((len(kept), L))
            for r, j in enumerate(kept):
                C[r, j] = 1.0
            res = ccp_joint(C, loc, cov) if kept else JointCcp(1.0, 0, True)
            out.groups.append({
                "topic": k, "group": group, "ccp": res.value, "df": res.df,
                "degenerate": res.degenerate, "label": star_label(res.value),
            })

    main_col = None
    if main_covariate is not None:
        if table is None:
            raise ConfigError("grouped histograms need the covariate table")
        main_col = table.column(main_covariate)  # raises FormulaError if unknown

    positions = state.ideal_loc
    for k in range(positions.shape[1]):
        vals = positions[:, k]
        counts, edges = _histogram(vals, bins)
        entry = {"topic": k, "edges": edges.tolist(), "counts": counts.tolist()}
        if main_col is not None:
            groups = []
            for level in main_col.levels:
                mask = np.array([lab == level for lab in main_col.labels])
                sub = vals[mask]
                g = {"category": level, "count": int(mask.sum()),
                     "mean": float(sub.mean()) if mask.any() else None}
                g["counts"] = np.histogram(sub, bins=len(counts),
                                           range=(edges[0], edges[-1]))[0].tolist()
                groups.append(g)
            entry["groups"] = groups
        out.histograms.append(entry)

    if table is not None:
        for col in table.columns:
            out.category_counts[col.name] = {
                level: int(sum(lab == level for lab in col.labels))
                for level in col.levels}
    return out
