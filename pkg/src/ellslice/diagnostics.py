"""Autocorrelation, effective sample size, drift and summary diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import ContractError

DEFAULT_MAX_LAG = 10_000


class DegenerateSeriesError(ValueError):
    """Series has fewer than two points or zero sample variance."""


def quantity_of_interest(x: np.ndarray) -> float:
    """``log(1 + |x|)``."""
    return math.log1p(math.sqrt(float(x @ x)))


def _centered(series) -> np.ndarray:
    s = np.asarray(series, dtype=float).ravel()
    if s.size < 2:
        raise DegenerateSeriesError("need at least two values")
    s = s - s.mean()
    if not np.any(s):
        raise DegenerateSeriesError("series has zero variance")
    return s


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Biased-normalisation autocorrelations at lags ``1..max_lag``.

    ``gamma[k-1] = sum_{i<n-k} c_i c_{i+k} / sum_i c_i^2`` with ``c`` the
    mean-centred series; computed by zero-padded FFT.
    """
    c = _centered(series)
    n = c.size
    if not 1 <= max_lag < n:
        raise ContractError(f"max_lag must lie in [1, {n - 1}], got {max_lag}")
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(c, size)
    acov = np.fft.irfft(spec * spec.conj(), size)[: max_lag + 1]
    # lag-0 sum taken directly: it is the normaliser and must be exact
    return np.clip(acov[1:] / float(c @ c), -1.0, 1.0)


def autocorrelation_direct(series, max_lag: int) -> np.ndarray:
    """O(n * max_lag) reference for :func:`autocorrelation`."""
    c = _centered(series)
    denom = float(c @ c)
    return np.array([float(c[:-k] @ c[k:]) / denom for k in range(1, max_lag + 1)])


@dataclass
class EssReport:
    n: int
    truncation_K: int
    gamma: np.ndarray = field(repr=False)
    iact: float
    ess: float


def _geyer_iact(gamma: np.ndarray) -> tuple[float, int]:
    # initial positive sequence over pairs (gamma_2m + gamma_2m+1), gamma_0 = 1
    g = np.concatenate(([1.0], gamma))
    total, m = 0.0, 0
    while 2 * m + 1 < g.size:
        pair = g[2 * m] + g[2 * m + 1]
        if pair <= 0.0:
            break
        total += pair
        m += 1
    return -1.0 + 2.0 * total, max(2 * m - 1, 0)


def effective_sample_size(series, max_lag: int = DEFAULT_MAX_LAG, geyer: bool = False) -> EssReport:
    """``ESS = n / IACT`` with ``IACT = max(1, 1 + 2 sum_{k=1}^{K} gamma(k))``.

    The sum is truncated at a fixed ``K = max_lag`` (capped at ``n - 1``).
    With ``geyer=True`` it stops instead at Geyer's initial positive sequence.
    """
    s = np.asarray(series, dtype=float).ravel()
    n = s.size
    K = min(max_lag, n - 1)
    gamma = autocorrelation(s, K)
    if geyer:
        raw, K = _geyer_iact(gamma)
        gamma = gamma[:K]
    else:
        raw = 1.0 + 2.0 * float(gamma.sum())
    iact = max(1.0, raw)
    return EssReport(n=n, truncation_K=K, gamma=gamma, iact=iact, ess=n / iact)


@dataclass
class DriftReport:
    radii: np.ndarray
    m_hat: np.ndarray
    m_se: np.ndarray
    delta_hat: float
    L_hat: float
    delta_se: float


def _ols(r: np.ndarray, m: np.ndarray) -> tuple[float, float, float]:
    rc = r - r.mean()
    sxx = float(rc @ rc)
    slope = float(rc @ (m - m.mean())) / sxx
    intercept = float(m.mean() - slope * r.mean())
    if r.size > 2:
        resid = m - (intercept + slope * r)
        slope_se = math.sqrt(float(resid @ resid) / (r.size - 2) / sxx)
    else:
        slope_se = math.nan
    return slope, intercept, slope_se


def drift_estimate(target, kernel, radii, reps: int, rng, average_directions: bool = False) -> DriftReport:
    """Monte Carlo estimate of ``E|Y_x|`` after one transition from ``|x| = r``.

    ``kernel`` is a :class:`~ellslice.samplers.KernelSpec` or a step callable
    ``(state, rng) -> (state, record)``. Starting points are ``r * e_1``
    unless ``average_directions`` draws a fresh direction per replicate.
    ``(delta_hat, L_hat)`` is the least-squares line of ``m_hat`` on ``r``.
    """
    from . import samplers

    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size < 2 or np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ContractError("radii must be a positive increasing grid of at least two points")
    if reps < 100:
        raise ContractError(f"need at least 100 replicates per radius, got {reps}")
    step = kernel if callable(kernel) else samplers.make_step(kernel, target)
    e1 = np.zeros(target.dim)
    e1[0] = 1.0
    m_hat = np.empty(radii.size)
    m_se = np.empty(radii.size)
    for i, r in enumerate(radii):
        norms = np.empty(reps)
        for j in range(reps):
            direction = rng.unit_vector(target.dim) if average_directions else e1
            state = samplers.initial_state(target, r * direction)
            state, _ = step(state, rng)
            norms[j] = math.sqrt(float(state.x @ state.x))
        m_hat[i] = norms.mean()
        m_se[i] = norms.std(ddof=1) / math.sqrt(reps)
    delta, L, delta_se = _ols(radii, m_hat)
    return DriftReport(radii=radii, m_hat=m_hat, m_se=m_se, delta_hat=delta, L_hat=L, delta_se=delta_se)


@dataclass
class Moments:
    mean: np.ndarray
    covariance: np.ndarray
    mc_standard_errors: np.ndarray
    covariance_standard_errors: np.ndarray
    degenerate: list = field(default_factory=list)


def _mc_se(series: np.ndarray) -> float:
    try:
        rep = effective_sample_size(series, geyer=True)
    except DegenerateSeriesError:
        return math.nan
    return math.sqrt(float(series.var(ddof=1)) / rep.ess)


def summary_moments(samples) -> Moments:
    """Sample mean and covariance (divisor n-1) with Monte Carlo standard errors.

    Each standard error is ``sqrt(var / ess)`` using the series' own ESS
    (Geyer truncation). Coordinates with zero variance get ``nan`` and are
    listed in ``degenerate``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("need an n x d array with n >= 2")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    d = x.shape[1]
    se = np.array([_mc_se(x[:, j]) for j in range(d)])
    degenerate = [j for j in range(d) if math.isnan(se[j])]
    c = x - mean
    cov_se = np.full((d, d), math.nan)
    for i in range(d):
        for j in range(i, d):
            cov_se[i, j] = cov_se[j, i] = _mc_se(c[:, i] * c[:, j])
    return Moments(mean, cov, se, cov_se, degenerate)


@dataclass
class Histogram2D:
    counts: np.ndarray
    overflow: int
    x_edges: np.ndarray
    y_edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.overflow


def histogram2d(samples, bins: tuple[int, int], range_: tuple[tuple[float, float], tuple[float, float]]) -> Histogram2D:
    """Cell counts over a rectangle; cells are ``[lo, hi)`` except the last, which is closed.

    Samples outside the rectangle go to ``overflow``.
    """
    pts = np.asarray(samples, dtype=float).reshape(-1, 2)
    bx, by = bins
    (xlo, xhi), (ylo, yhi) = range_
    if bx < 1 or by < 1:
        raise ContractError("need at least one bin per axis")
    if not (xlo < xhi and ylo < yhi):
        raise ContractError("histogram range is degenerate")
    counts, xe, ye = np.histogram2d(pts[:, 0], pts[:, 1], bins=(bx, by), range=((xlo, xhi), (ylo, yhi)))
    counts = counts.astype(np.int64)
    return Histogram2D(counts, pts.shape[0] - int(counts.sum()), xe, ye)


def histogram_tv(a: Histogram2D, b: Histogram2D) -> float:
    """Half the L1 distance between the two in-range cell distributions."""
    sa, sb = a.counts.sum(), b.counts.sum()
    if sa == 0 or sb == 0:
        return math.nan
    return 0.5 * float(np.abs(a.counts / sa - b.counts / sb).sum())
