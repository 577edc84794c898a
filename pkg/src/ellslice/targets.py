"""Posterior specifications relative to a centred Gaussian reference measure.

A target is ``mu(dx) ∝ exp(log_rho(x)) N(0, C)(dx)``. All densities live in
log space; ``-inf`` encodes a density of exactly zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .linalg import ContractError, CovarianceFactor, RngStream, cholesky

LogDensity = Callable[[np.ndarray], float]


class UnsupportedTargetError(ValueError):
    pass


@dataclass(frozen=True)
class RadialProfile:
    """Log Lebesgue density of mu along the radius, ``h(r) = a*r - b*r**2``.

    Covers every rotationally invariant target in the catalog. ``level_set``
    returns the radius interval ``{r >= 0 : h(r) >= s}`` (``None`` if empty).
    """

    a: float
    b: float

    def __call__(self, r: float) -> float:
        return self.a * r - self.b * r * r

    def level_set(self, s: float) -> Optional[tuple[float, float]]:
        disc = self.a * self.a - 4.0 * self.b * s
        if disc < 0.0:
            return None
        root = math.sqrt(disc)
        hi = (self.a + root) / (2.0 * self.b)
        if hi < 0.0:
            return None
        lo = max(0.0, (self.a - root) / (2.0 * self.b))
        return lo, hi


@dataclass(frozen=True)
class TargetModel:
    name: str
    dim: int
    prior: CovarianceFactor
    log_rho: LogDensity
    radial_profile: Optional[RadialProfile] = None
    assumption_constants: Optional[tuple[float, float]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError("dim must be positive")
        if self.prior.dim != self.dim:
            raise ContractError(f"prior has dim {self.prior.dim}, target has {self.dim}")

    def log_density(self, x: np.ndarray) -> float:
        """Unnormalised log Lebesgue density of mu (likelihood times prior)."""
        return self.log_rho(x) - 0.5 * self.prior.quad_inv(x)


@dataclass(frozen=True)
class LogisticData:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels, dtype=float).ravel()
        if f.shape[0] != y.shape[0]:
            raise ContractError(f"{f.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ContractError("labels must be -1 or +1")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def load_logistic_csv(path) -> LogisticData:
    """Read ``x_1..x_d,label`` rows (header required)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    expected = [f"x_{i}" for i in range(1, d + 1)] + ["label"]
    if d < 1 or header != expected:
        raise ContractError(f"{path}: header must be {','.join(expected)}, got {','.join(header)}")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ContractError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:d]])
            label = float(row[d])
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: {exc}") from None
        if label not in (-1.0, 1.0):
            raise ContractError(f"{path}:{lineno}: label must be -1 or +1, got {row[d]}")
        labels.append(label)
    if not feats:
        raise ContractError(f"{path}: no observations")
    return LogisticData(np.array(feats), np.array(labels))


def save_logistic_csv(data: LogisticData, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(1, data.dim + 1)] + ["label"])
        for xi, yi in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


# ---------------------------------------------------------------------------
# log rho catalog


def log_rho_gaussian(x: np.ndarray, x0: np.ndarray, sigma_factor: CovarianceFactor) -> float:
    return -0.5 * sigma_factor.quad_inv(x - x0)


def log_rho_volcano(x: np.ndarray) -> float:
    return math.sqrt(float(x @ x))


def log_rho_double_banana(x: np.ndarray, alpha: float = 5.0) -> float:
    x1, x2 = float(x[0]), float(x[1])
    r = (1.0 - x1) ** 2 + 100.0 * (x2 - x1 * x1) ** 2
    if r <= 1.0:
        # F = log r <= 0: zero density (covers the Rosenbrock minimum r = 0)
        return -math.inf
    return 0.5 * (x1 * x1 + x2 * x2) - abs(alpha - math.log(math.log(r)))


def log_rho_logistic(x: np.ndarray, data: LogisticData) -> float:
    margins = data.labels * (data.features @ x)
    return -float(np.logaddexp(0.0, -margins).sum())


def log_rho_student_t(x: np.ndarray, nu: float, x0: np.ndarray, sigma_factor: CovarianceFactor) -> float:
    d = x.shape[0]
    return -0.5 * (nu + d) * math.log1p(sigma_factor.quad_inv(x - x0) / nu)


def _vec(v, dim: int, what: str) -> np.ndarray:
    v = np.zeros(dim) if v is None else np.asarray(v, dtype=float).ravel()
    if v.shape != (dim,):
        raise ContractError(f"{what} must have length {dim}, got {v.shape[0]}")
    return v


def _cov(m, dim: int, what: str) -> np.ndarray:
    if m is None:
        return np.eye(dim)
    m = np.asarray(m, dtype=float)
    if m.ndim == 0:
        return float(m) * np.eye(dim)
    if m.ndim == 1:
        return np.diag(m)
    if m.shape != (dim, dim):
        raise ContractError(f"{what} must be {dim}x{dim}")
    return m


def _isotropic_variance(m: np.ndarray) -> Optional[float]:
    v = m[0, 0]
    return float(v) if np.array_equal(m, v * np.eye(m.shape[0])) else None


def _prior(dim: int, prior_cov) -> CovarianceFactor:
    if prior_cov is None:
        return CovarianceFactor.identity(dim)
    return cholesky(_cov(prior_cov, dim, "prior covariance"))


def gaussian_target(dim: int, x0=None, sigma=None, prior_cov=None) -> TargetModel:
    """rho(x) = exp(-(x-x0)^T Sigma^{-1} (x-x0) / 2)."""
    x0 = _vec(x0, dim, "x0")
    sigma = _cov(sigma, dim, "sigma")
    sf = cholesky(sigma)
    prior = _prior(dim, prior_cov)
    profile = None
    s2 = _isotropic_variance(sigma)
    c = _isotropic_variance(prior.covariance())
    if s2 is not None and c is not None and not np.any(x0):
        profile = RadialProfile(0.0, 0.5 * (1.0 / s2 + 1.0 / c))
    return TargetModel(
        name="gaussian",
        dim=dim,
        prior=prior,
        log_rho=lambda x: log_rho_gaussian(x, x0, sf),
        radial_profile=profile,
        params={"x0": x0, "sigma": sigma},
    )


def volcano_target(dim: int) -> TargetModel:
    """rho(x) = exp(|x|) against N(0, I): mu has density exp(|x| - |x|^2/2)."""
    return TargetModel(
        name="volcano",
        dim=dim,
        prior=CovarianceFactor.identity(dim),
        log_rho=log_rho_volcano,
        radial_profile=RadialProfile(1.0, 0.5),
    )


def volcano_likelihood_target(dim: int) -> TargetModel:
    """rho(x) = exp(|x| - |x|^2/2) itself used as the likelihood, prior N(0, I)."""

    def log_rho(x):
        r = math.sqrt(float(x @ x))
        return r - 0.5 * r * r

    return TargetModel(
        name="volcano-likelihood",
        dim=dim,
        prior=CovarianceFactor.identity(dim),
        log_rho=log_rho,
        radial_profile=RadialProfile(1.0, 1.0),
    )


def double_banana_target(alpha: float = 5.0) -> TargetModel:
    return TargetModel(
        name="double-banana",
        dim=2,
        prior=CovarianceFactor.identity(2),
        log_rho=lambda x: log_rho_double_banana(x, alpha),
        params={"alpha": alpha},
    )


def logistic_target(data: LogisticData, prior_cov=None) -> TargetModel:
    return TargetModel(
        name="logistic",
        dim=data.dim,
        prior=_prior(data.dim, prior_cov),
        log_rho=lambda x: log_rho_logistic(x, data),
        params={"data": data},
    )


def student_t_target(dim: int, nu: float, x0=None, sigma=None, prior_cov=None) -> TargetModel:
    if not nu > 1:
        raise ContractError(f"nu must exceed 1, got {nu}")
    x0 = _vec(x0, dim, "x0")
    sigma = _cov(sigma, dim, "sigma")
    sf = cholesky(sigma)
    return TargetModel(
        name="student-t",
        dim=dim,
        prior=_prior(dim, prior_cov),
        log_rho=lambda x: log_rho_student_t(x, nu, x0, sf),
        params={"nu": nu, "x0": x0, "sigma": sigma},
    )


def flat_target(dim: int, prior_cov=None) -> TargetModel:
    """rho ≡ 1, i.e. mu is the prior itself."""
    prior = _prior(dim, prior_cov)
    c = _isotropic_variance(prior.covariance())
    return TargetModel(
        name="flat",
        dim=dim,
        prior=prior,
        log_rho=lambda x: 0.0,
        radial_profile=RadialProfile(0.0, 0.5 / c) if c is not None else None,
    )


def tail_shift(target: TargetModel, epsilon: float) -> TargetModel:
    """Move ``exp(-eps/2 x^T C^{-1} x)`` from the prior into rho.

    The prior becomes ``N(0, C/(1-eps))``; mu is unchanged, so the radial
    profile carries over.
    """
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon must lie in (0, 1), got {epsilon}")
    base, prior = target.log_rho, target.prior

    def log_rho(x):
        return base(x) - 0.5 * epsilon * prior.quad_inv(x)

    return replace(
        target,
        name=f"{target.name}+tail-shift",
        prior=prior.scaled(1.0 / (1.0 - epsilon)),
        log_rho=log_rho,
        assumption_constants=None,
        params={**target.params, "tail_shift": epsilon},
    )


# ---------------------------------------------------------------------------
# closed-form Assumption-1 constants

R_FLOOR = 1e-6


def assumption_bounds(kind: str, **params) -> tuple[float, float]:
    """Return ``(R, alpha)`` for one of the analysed target families.

    ``gaussian``: ``sigma``, ``x0``. ``radial-tail``: ``r_prime``, ``c1``,
    ``c2``, ``x0``. ``logistic-tail-shift``: ``epsilon``, ``features``.
    ``exp-family``: ``c1``, ``c2``, ``x0`` (or ``sigma`` to use the
    ``Sigma^{-1}`` norm).
    """
    if kind == "gaussian":
        sigma = np.atleast_2d(np.asarray(params["sigma"], dtype=float))
        lam = np.linalg.eigvalsh(sigma)
        ratio = lam[-1] / lam[0]
        x0 = np.asarray(params.get("x0", 0.0), dtype=float)
        R = 4.0 * math.sqrt(ratio) * float(np.linalg.norm(x0))
        alpha = 0.5 / math.sqrt(ratio)
    elif kind == "radial-tail":
        c1, c2 = float(params.get("c1", 1.0)), float(params.get("c2", 1.0))
        x0 = np.asarray(params.get("x0", 0.0), dtype=float)
        R = max(float(params["r_prime"]), 4.0 * c2 / c1 * float(np.linalg.norm(x0)))
        alpha = c1 / (2.0 * c2)
    elif kind == "logistic-tail-shift":
        eps = float(params["epsilon"])
        feats = np.atleast_2d(np.asarray(params["features"], dtype=float))
        n = feats.shape[0]
        R = 4.0 * n * float(np.linalg.norm(feats, axis=1).min()) / eps
        alpha = eps / 2.0
    elif kind == "exp-family":
        if "sigma" in params:
            lam = np.linalg.eigvalsh(np.atleast_2d(np.asarray(params["sigma"], dtype=float)))
            c1, c2 = 1.0 / math.sqrt(lam[-1]), 1.0 / math.sqrt(lam[0])
        else:
            c1, c2 = float(params["c1"]), float(params["c2"])
        x0 = np.asarray(params.get("x0", 0.0), dtype=float)
        R = 4.0 * c2 / c1 * float(np.linalg.norm(x0))
        alpha = c1 / (2.0 * c2)
    else:
        raise UnsupportedTargetError(f"no closed-form constants for target kind {kind!r}")
    return max(R, R_FLOOR), alpha


@dataclass
class AssumptionProbeReport:
    passed: bool
    probes_run: int
    tested_R: float
    tested_alpha: float
    counterexample: Optional[dict] = None


def check_assumption1(
    target: TargetModel,
    R: float,
    alpha: float,
    rng: RngStream,
    n_centers: int = 200,
    n_probes: int = 500,
    tol: float = 1e-12,
) -> AssumptionProbeReport:
    """Probe ``B(0, alpha |x|) ⊆ {y : rho(y) >= rho(x)}`` for ``|x| > R``.

    Centres have radius uniform on ``[R(1+1e-9), 10R]``; probes are uniform in
    the closed ball. Stops at the first violation.
    """
    if not (R > 0 and alpha > 0 and n_centers >= 1 and n_probes >= 1):
        raise ContractError("need R > 0, alpha > 0 and positive counts")
    d = target.dim
    run = 0
    for _ in range(n_centers):
        rx = rng.uniform(R * (1.0 + 1e-9), 10.0 * R)
        x = rx * rng.unit_vector(d)
        lx = target.log_rho(x)
        for _ in range(n_probes):
            ry = rng.uniform() ** (1.0 / d) * alpha * rx
            y = ry * rng.unit_vector(d)
            ly = target.log_rho(y)
            run += 1
            if ly < lx - tol:
                return AssumptionProbeReport(
                    passed=False,
                    probes_run=run,
                    tested_R=R,
                    tested_alpha=alpha,
                    counterexample={"x": x, "y": y, "log_rho_x": lx, "log_rho_y": ly},
                )
    return AssumptionProbeReport(passed=True, probes_run=run, tested_R=R, tested_alpha=alpha)


# ---------------------------------------------------------------------------
# name -> builder registry used by the experiment runner

TARGET_DESCRIPTIONS = {
    "gaussian": "rho = exp(-(x-x0)^T Sigma^{-1} (x-x0)/2); params x0, sigma, prior_cov",
    "volcano": "rho = exp(|x|), prior N(0, I)",
    "volcano-likelihood": "rho = exp(|x| - |x|^2/2), prior N(0, I)",
    "double-banana": "2-D, rho = exp(|x|^2/2 - |alpha - log log Rosenbrock(x)|); param alpha",
    "logistic": "rho = prod sigmoid(y_i x^T xi_i); params data_csv or (n_obs, data_seed)",
    "student-t": "rho = (1 + (x-x0)^T Sigma^{-1} (x-x0)/nu)^{-(nu+d)/2}; params nu, x0, sigma",
    "flat": "rho = 1 (mu equals the prior)",
}


def synthetic_logistic_data(dim: int, n_obs: int, seed: int) -> LogisticData:
    """Features N(0, I); labels from a logistic model with a N(0, I) weight."""
    g = RngStream(seed, 0).generator
    feats = g.standard_normal((n_obs, dim))
    w = g.standard_normal(dim)
    p = 1.0 / (1.0 + np.exp(-feats @ w))
    labels = np.where(g.random(n_obs) < p, 1.0, -1.0)
    return LogisticData(feats, labels)


def build_target(name: str, dim: int, params: Optional[dict] = None) -> TargetModel:
    params = dict(params or {})
    shift = params.pop("tail_shift", None)
    if name == "gaussian":
        t = gaussian_target(dim, params.get("x0"), params.get("sigma"), params.get("prior_cov"))
    elif name == "volcano":
        t = volcano_target(dim)
    elif name == "volcano-likelihood":
        t = volcano_likelihood_target(dim)
    elif name == "double-banana":
        if dim != 2:
            raise ContractError("double-banana is two-dimensional")
        t = double_banana_target(float(params.get("alpha", 5.0)))
    elif name == "logistic":
        if "data_csv" in params:
            data = load_logistic_csv(Path(params["data_csv"]))
            if data.dim != dim:
                raise ContractError(f"data has dim {data.dim}, experiment asks for {dim}")
        else:
            data = synthetic_logistic_data(dim, int(params.get("n_obs", 50)), int(params.get("data_seed", 0)))
        t = logistic_target(data)
    elif name == "student-t":
        t = student_t_target(dim, float(params.get("nu", 3.0)), params.get("x0"), params.get("sigma"), params.get("prior_cov"))
    elif name == "flat":
        t = flat_target(dim, params.get("prior_cov"))
    else:
        raise UnsupportedTargetError(f"unknown target {name!r}")
    return tail_shift(t, float(shift)) if shift is not None else t
