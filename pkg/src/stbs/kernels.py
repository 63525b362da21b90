"""Numeric kernels shared by inference and post-processing.

Everything here is a pure function of its arguments: special functions,
log-densities, entropies, reparameterized samplers, the expectation of the
ideological factor exp{X*Y} for independent normals, and the Robbins-Monro
step-size schedule.  Scalar arguments and numpy arrays are both accepted;
arrays broadcast in the usual way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

LOG_2PI = math.log(2.0 * math.pi)

# ---------------------------------------------------------------------------
# special functions
#
# digamma/log_gamma are implemented locally (upward recurrence into the
# asymptotic regime, then a Bernoulli-number tail) so the kernels stay
# dependency-free and bit-stable.

_PSI_SHIFT = 8.0
_LGAMMA_SHIFT = 10.0


def digamma(x):
    """psi(x) for x > 0, accurate to ~1e-12 for x >= 1e-3."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError("digamma requires x > 0")
    scalar = x.ndim == 0
    xs = np.atleast_1d(x).copy()
    acc = np.zeros_like(xs)
    small = xs < _PSI_SHIFT
    while small.any():
        acc[small] -= 1.0 / xs[small]
        xs[small] += 1.0
        small = xs < _PSI_SHIFT
    inv2 = 1.0 / (xs * xs)
    # psi(x) ~ ln x - 1/(2x) - sum_n B_{2n} / (2n x^{2n})
    tail = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (
        1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (
            1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 * (1.0 / 12.0)))))))
    out = acc + np.log(xs) - 0.5 / xs - tail
    return out[0] if scalar else out


def log_gamma(x):
    """log Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError("log_gamma requires x > 0")
    scalar = x.ndim == 0
    xs = np.atleast_1d(x).copy()
    acc = np.zeros_like(xs)
    small = xs < _LGAMMA_SHIFT
    while small.any():
        acc[small] -= np.log(xs[small])
        xs[small] += 1.0
        small = xs < _LGAMMA_SHIFT
    inv = 1.0 / xs
    inv2 = inv * inv
    # Stirling series: (x-1/2) ln x - x + ln(2 pi)/2 + sum_n B_{2n}/(2n(2n-1) x^{2n-1})
    tail = inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (
        1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (
            1.0 / 1188.0 - inv2 * (691.0 / 360360.0))))))
    out = acc + (xs - 0.5) * np.log(xs) - xs + 0.5 * LOG_2PI + tail
    return out[0] if scalar else out


def sigmoid(x):
    """Numerically stable logistic function, maps R -> (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    """Inverse of sigmoid on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("logit requires p in (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def expected_log_gamma(shp, rte):
    """E[log x] for x ~ Gamma(shp, rte)."""
    return digamma(shp) - np.log(rte)


# ---------------------------------------------------------------------------
# ideological factor


def expected_ideological_term(loc_x, var_x, loc_y, var_y):
    """E[exp(X*Y)] for independent X ~ N(loc_x, var_x), Y ~ N(loc_y, var_y).

    Finite only when var_x * var_y < 1; raises DomainError otherwise.
    """
    loc_x, var_x, loc_y, var_y = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (loc_x, var_x, loc_y, var_y)))
    prod = var_x * var_y
    if np.any(prod >= 1.0):
        raise DomainError("expected_ideological_term diverges for var_x*var_y >= 1")
    denom = 1.0 - prod
    quad = loc_x * loc_x * var_y + 2.0 * loc_x * loc_y + loc_y * loc_y * var_x
    out = np.exp(0.5 * quad / denom) / np.sqrt(denom)
    return out if out.ndim else float(out)


def geometric_ideological_term(loc_x, loc_y):
    """exp(E[X] * E[Y]), the mean-plug-in approximation of E[exp(X*Y)]."""
    out = np.exp(np.asarray(loc_x, dtype=np.float64) * np.asarray(loc_y, dtype=np.float64))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# entropies (differential, in nats)


def gamma_entropy(shp, rte):
    shp = np.asarray(shp, dtype=np.float64)
    rte = np.asarray(rte, dtype=np.float64)
    out = shp - np.log(rte) + log_gamma(shp) + (1.0 - shp) * digamma(shp)
    return out if out.ndim else float(out)


def normal_entropy(var):
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0.0):
        raise DomainError("normal_entropy requires var > 0")
    out = 0.5 * (LOG_2PI + 1.0 + np.log(var))
    return out if out.ndim else float(out)


def mvn_entropy(chol):
    """Entropy of N(loc, chol @ chol.T); loc-free."""
    chol = np.asarray(chol, dtype=np.float64)
    dim = chol.shape[-1]
    return 0.5 * dim * (LOG_2PI + 1.0) + float(np.sum(np.log(np.diagonal(chol))))


# ---------------------------------------------------------------------------
# log-densities


def poisson_logpmf(y, lam):
    y = np.asarray(y, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0.0):
        raise DomainError("poisson_logpmf requires lam > 0")
    out = y * np.log(lam) - lam - log_gamma(y + 1.0)
    return out if out.ndim else float(out)


def gamma_logpdf(x, shp, rte):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise DomainError("gamma_logpdf requires x > 0")
    shp = np.asarray(shp, dtype=np.float64)
    rte = np.asarray(rte, dtype=np.float64)
    out = shp * np.log(rte) + (shp - 1.0) * np.log(x) - rte * x - log_gamma(shp)
    return out if out.ndim else float(out)


def normal_logpdf(x, loc, var):
    x = np.asarray(x, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0.0):
        raise DomainError("normal_logpdf requires var > 0")
    out = -0.5 * (LOG_2PI + np.log(var) + (x - loc) ** 2 / var)
    return out if out.ndim else float(out)


def mvn_logpdf(x, loc, chol):
    """log N(x; loc, chol @ chol.T)."""
    x = np.asarray(x, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64)
    chol = np.asarray(chol, dtype=np.float64)
    dim = chol.shape[-1]
    w = np.linalg.solve(chol, x - loc)
    return float(-0.5 * dim * LOG_2PI - np.sum(np.log(np.diagonal(chol))) - 0.5 * w @ w)


# ---------------------------------------------------------------------------
# samplers


def sample_gamma(shp, rte, rng):
    """Gamma(shp, rte) draw(s); no gradient ever flows through these."""
    return rng.gamma(np.asarray(shp, dtype=np.float64), 1.0 / np.asarray(rte, dtype=np.float64))


def sample_normal_reparam(loc, var, z):
    """loc + sqrt(var) * z; deterministic in (loc, var, z), which is what
    lets gradients flow through the sample."""
    out = np.asarray(loc, dtype=np.float64) + np.sqrt(np.asarray(var, dtype=np.float64)) * np.asarray(z, dtype=np.float64)
    return out if out.ndim else float(out)


def sample_mvn(loc, chol, z):
    """loc + chol @ z for standard-normal z."""
    return np.asarray(loc, dtype=np.float64) + np.asarray(chol, dtype=np.float64) @ np.asarray(z, dtype=np.float64)


# ---------------------------------------------------------------------------
# step-size schedule


def step_size(t, tau, kappa):
    """(t + tau)^(-kappa); Robbins-Monro for kappa in (0.5, 1], tau >= 0."""
    if not 0.5 < kappa <= 1.0:
        raise ConfigError(f"step exponent kappa must lie in (0.5, 1], got {kappa}")
    if tau < 0.0:
        raise ConfigError(f"step delay tau must be >= 0, got {tau}")
    if t < 1:
        raise ConfigError(f"step counter t must be >= 1, got {t}")
    return float((t + tau) ** (-kappa))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate pair; mean = shp / rte."""

    shp: float
    rte: float

    def __post_init__(self):
        if not (self.shp > 0.0 and self.rte > 0.0):
            raise DomainError(f"gamma params must be positive, got {self}")

    @property
    def mean(self) -> float:
        return self.shp / self.rte

    def entropy(self) -> float:
        return float(gamma_entropy(self.shp, self.rte))


@dataclass(frozen=True)
class NormalParams:
    """Location/variance pair."""

    loc: float
    var: float

    def __post_init__(self):
        if not self.var > 0.0:
            raise DomainError(f"normal variance must be positive, got {self}")

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def entropy(self) -> float:
        return float(normal_entropy(self.var))


@dataclass(frozen=True)
class MvnParams:
    """Location vector plus lower-triangular Cholesky factor of the covariance."""

    loc: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.loc, dtype=np.float64)
        chol = np.asarray(self.chol, dtype=np.float64)
        if chol.ndim != 2 or chol.shape[0] != chol.shape[1] or loc.shape != (chol.shape[0],):
            raise DomainError("MvnParams dimensions are inconsistent")
        if np.any(np.triu(chol, k=1) != 0.0):
            raise DomainError("Cholesky factor must be lower triangular")
        if np.any(np.diagonal(chol) <= 0.0):
            raise DomainError("Cholesky diagonal must be positive")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "chol", chol)

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def entropy(self) -> float:
        return mvn_entropy(self.chol)
