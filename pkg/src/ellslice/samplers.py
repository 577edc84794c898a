"""Transition kernels and the chain runner.

Every kernel is a function ``(state, target, [param,] rng) -> (state, record)``.
States carry the cached ``log_rho`` of the current point, so each transition
evaluates the target only at proposed points.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diagnostics import quantity_of_interest
from .linalg import ContractError, RngStream, ellipse_point, sample_gaussian
from .targets import TargetModel, UnsupportedTargetError

TWO_PI = 2.0 * math.pi
DEFAULT_MAX_SHRINK = 10_000


class RunawayShrinkageError(RuntimeError):
    """The shrinkage loop hit its cap; the target or current state is broken."""

    def __init__(self, x, w, log_t, iterations, step=None):
        self.x, self.w, self.log_t = x, w, log_t
        self.iterations = iterations
        self.step = step
        super().__init__(iterations)

    def __str__(self):
        where = "" if self.step is None else f" at step {self.step}"
        return (
            f"shrinkage did not terminate after {self.iterations} iterations{where} "
            f"(log t = {self.log_t!r}, |x| = {np.linalg.norm(self.x):.6g}, |w| = {np.linalg.norm(self.w):.6g})"
        )


@dataclass
class KernelState:
    x: np.ndarray
    log_rho_x: float
    evals: int = 0
    accepted: int = 0
    # log Lebesgue density, cached by random walk Metropolis only
    log_density_x: Optional[float] = None


@dataclass(frozen=True)
class TransitionRecord:
    proposal_evals: int
    shrink_iterations: int = 0
    accepted: Optional[bool] = None
    log_threshold: Optional[float] = None


def initial_state(target: TargetModel, x_init) -> KernelState:
    x = np.array(x_init, dtype=float).ravel()
    if x.shape != (target.dim,):
        raise ContractError(f"x_init has length {x.shape[0]}, target dim is {target.dim}")
    lr = target.log_rho(x)
    if not lr > -math.inf:
        raise ContractError("initial state has zero density")
    return KernelState(x=x, log_rho_x=lr)


def shrink_bracket(theta: float, theta_min: float, theta_max: float) -> tuple[float, float]:
    """Move the bracket end on the same side of 0 as ``theta`` onto ``theta``."""
    if not (theta_min <= theta <= theta_max and theta_min <= 0.0 <= theta_max):
        raise ContractError(f"bad bracket: theta={theta}, [{theta_min}, {theta_max}]")
    if theta < 0.0:
        return theta, theta_max
    return theta_min, theta


def ess_transition(
    state: KernelState,
    target: TargetModel,
    rng: RngStream,
    max_shrink: int = DEFAULT_MAX_SHRINK,
) -> tuple[KernelState, TransitionRecord]:
    x = state.x
    w = sample_gaussian(target.prior, rng)
    log_t = state.log_rho_x + math.log(rng.uniform_open_left())
    theta = rng.uniform(0.0, TWO_PI)
    lo, hi = theta - TWO_PI, theta
    log_rho = target.log_rho
    evals = 0
    while True:
        y = ellipse_point(x, w, theta)
        ly = log_rho(y)
        evals += 1
        if ly >= log_t:
            break
        if evals > max_shrink:
            raise RunawayShrinkageError(x, w, log_t, evals - 1)
        lo, hi = shrink_bracket(theta, lo, hi)
        theta = rng.uniform(lo, hi)
    new = KernelState(y, ly, state.evals + evals, state.accepted)
    return new, TransitionRecord(evals, evals - 1, None, log_t)


def _metropolis_accept(log_ratio: float, rng: RngStream) -> bool:
    return log_ratio >= 0.0 or math.log(rng.uniform_open_left()) <= log_ratio


def pcn_transition(
    state: KernelState, target: TargetModel, s: float, rng: RngStream
) -> tuple[KernelState, TransitionRecord]:
    if not 0.0 < s <= 1.0:
        raise ContractError(f"pCN step s must lie in (0, 1], got {s}")
    w = sample_gaussian(target.prior, rng)
    y = math.sqrt(1.0 - s * s) * state.x + s * w
    ly = target.log_rho(y)
    ok = ly > -math.inf and _metropolis_accept(ly - state.log_rho_x, rng)
    if ok:
        new = KernelState(y, ly, state.evals + 1, state.accepted + 1)
    else:
        new = KernelState(state.x, state.log_rho_x, state.evals + 1, state.accepted)
    return new, TransitionRecord(1, 0, ok)


def rwm_transition(
    state: KernelState, target: TargetModel, sigma: float, rng: RngStream
) -> tuple[KernelState, TransitionRecord]:
    if not sigma > 0.0:
        raise ContractError(f"RWM step sigma must be positive, got {sigma}")
    lpx = state.log_density_x
    if lpx is None:
        lpx = state.log_rho_x - 0.5 * target.prior.quad_inv(state.x)
    y = state.x + sigma * rng.standard_normal(target.dim)
    ly = target.log_rho(y)
    lpy = ly - 0.5 * target.prior.quad_inv(y) if ly > -math.inf else -math.inf
    ok = lpy > -math.inf and _metropolis_accept(lpy - lpx, rng)
    if ok:
        new = KernelState(y, ly, state.evals + 1, state.accepted + 1, lpy)
    else:
        new = KernelState(state.x, state.log_rho_x, state.evals + 1, state.accepted, lpx)
    return new, TransitionRecord(1, 0, ok)


def sample_radius(lo: float, hi: float, dim: int, u: float) -> float:
    """Inverse CDF of the density ∝ r^(dim-1) on [lo, hi] at ``u`` in (0, 1], in log space."""
    if hi <= 0.0:
        return 0.0
    log_hi = math.log(hi)
    ratio = math.exp(dim * (math.log(lo) - log_hi)) if lo > 0.0 else 0.0
    return math.exp(log_hi + math.log(u + (1.0 - u) * ratio) / dim)


def simple_slice_transition_radial(
    state: KernelState, target: TargetModel, rng: RngStream
) -> tuple[KernelState, TransitionRecord]:
    """Exact slice sampler on the Lebesgue density of a rotationally invariant mu."""
    h = target.radial_profile
    if h is None:
        raise UnsupportedTargetError(f"target {target.name!r} has no radial profile")
    r = math.sqrt(float(state.x @ state.x))
    s = h(r) + math.log(rng.uniform_open_left())
    interval = h.level_set(s)
    if interval is None:
        # only reachable through rounding when s == h(r) at the mode
        interval = (r, r)
    radius = sample_radius(interval[0], interval[1], target.dim, rng.uniform_open_left())
    y = radius * rng.unit_vector(target.dim)
    ly = target.log_rho(y)
    return KernelState(y, ly, state.evals + 1, state.accepted), TransitionRecord(1, 0, None, s)


def identity_transition(state: KernelState, target: TargetModel, rng: RngStream):
    """Degenerate kernel ``y = x``; self-test for the drift harness."""
    return state, TransitionRecord(0)


# ---------------------------------------------------------------------------
# kernel specs

KERNEL_DESCRIPTIONS = {
    "ess": "elliptical slice sampler (no tuning)",
    "pcn": "preconditioned Crank-Nicolson Metropolis, step s in (0, 1]",
    "rwm": "isotropic random walk Metropolis, step sigma > 0",
    "slice-radial": "exact simple slice sampler for rotationally invariant targets",
    "identity": "y = x (diagnostic self-test only)",
}

TUNABLE = ("pcn", "rwm")


@dataclass(frozen=True)
class KernelSpec:
    name: str
    param: Optional[float] = None
    tune: bool = False
    target_rate: float = 0.25
    max_shrink: int = DEFAULT_MAX_SHRINK

    def __post_init__(self):
        if self.name not in KERNEL_DESCRIPTIONS:
            raise ContractError(f"unknown kernel {self.name!r}")
        if self.tune and self.name not in TUNABLE:
            raise ContractError(f"kernel {self.name!r} has nothing to tune")

    def initial_param(self, dim: int) -> Optional[float]:
        if self.param is not None:
            return self.param
        if self.name == "pcn":
            return 0.5
        if self.name == "rwm":
            return 2.38 / math.sqrt(dim)
        return None


Step = Callable[[KernelState, RngStream], tuple[KernelState, TransitionRecord]]


def make_step(kernel: KernelSpec, target: TargetModel, param: Optional[float] = None) -> Step:
    if param is None:
        param = kernel.initial_param(target.dim)
    name = kernel.name
    if name == "ess":
        cap = kernel.max_shrink
        return lambda st, rng: ess_transition(st, target, rng, cap)
    if name == "pcn":
        return lambda st, rng: pcn_transition(st, target, param, rng)
    if name == "rwm":
        return lambda st, rng: rwm_transition(st, target, param, rng)
    if name == "slice-radial":
        if target.radial_profile is None:
            raise UnsupportedTargetError(f"slice-radial needs a rotationally invariant target, got {target.name!r}")
        return lambda st, rng: simple_slice_transition_radial(st, target, rng)
    return lambda st, rng: identity_transition(st, target, rng)


def tune_acceptance(
    kernel: KernelSpec,
    target: TargetModel,
    state: KernelState,
    rng: RngStream,
    tuning_steps: int,
    target_rate: Optional[float] = None,
    param: Optional[float] = None,
    records: Optional[list] = None,
) -> tuple[float, KernelState]:
    """Robbins-Monro tuning of the pCN/RWM step on the log scale.

    ``param <- param * exp(k**-0.6 * (accepted - target_rate))``; pCN's ``s``
    is clamped to 1. Returns the frozen parameter and the final state.
    """
    if kernel.name not in TUNABLE:
        raise ContractError(f"kernel {kernel.name!r} is not tunable")
    if tuning_steps < 1000:
        raise ContractError(f"tuning needs at least 1000 steps, got {tuning_steps}")
    rate = kernel.target_rate if target_rate is None else target_rate
    p = kernel.initial_param(target.dim) if param is None else param
    transition = pcn_transition if kernel.name == "pcn" else rwm_transition
    upper = 1.0 if kernel.name == "pcn" else math.inf
    for k in range(1, tuning_steps + 1):
        state, rec = transition(state, target, p, rng)
        if records is not None:
            records.append(rec)
        p = min(upper, p * math.exp(k ** -0.6 * (float(rec.accepted) - rate)))
    return p, state


# ---------------------------------------------------------------------------
# chain runner


@dataclass
class ChainResult:
    f_series: np.ndarray
    samples: Optional[np.ndarray]
    total_evals: int
    measure_evals: int
    n0: int
    n: int
    thin: int
    acceptance_rate: Optional[float]
    param: Optional[float]
    seed: tuple[int, int]
    wall_time: float
    records: Optional[list] = field(default=None, repr=False)

    @property
    def mean_evals_per_step(self) -> float:
        steps = self.n * self.thin
        return self.measure_evals / steps if steps else math.nan


def run_chain(
    kernel: KernelSpec,
    target: TargetModel,
    x_init,
    n0: int,
    n: int,
    seed: tuple[int, int],
    f: Callable[[np.ndarray], float] = quantity_of_interest,
    sample_retention_dim: int = 2,
    keep_records: bool = False,
    thin: int = 1,
) -> ChainResult:
    """Burn in for ``n0`` steps (tuning if configured), then record ``n`` values.

    ``f_series[k] = f(X_{n0+(k+1)*thin})``. Samples are kept only when the
    target dimension is at most ``sample_retention_dim``.
    """
    if n0 < 0 or n < 0:
        raise ContractError("n0 and n must be non-negative")
    if thin < 1:
        raise ContractError("thin must be at least 1")
    t_start = time.perf_counter()
    rng = RngStream(*seed)
    state = initial_state(target, x_init)
    records = [] if keep_records else None
    param = kernel.initial_param(target.dim)

    step_index = 0
    try:
        if kernel.tune:
            param, state = tune_acceptance(kernel, target, state, rng, n0, param=param, records=records)
            step_index = n0
        else:
            step = make_step(kernel, target, param)
            for step_index in range(n0):
                state, rec = step(state, rng)
                if records is not None:
                    records.append(rec)
        burn_evals, burn_acc = state.evals, state.accepted
        step_index = n0

        step = make_step(kernel, target, param)
        fs = np.empty(n)
        samples = np.empty((n, target.dim)) if target.dim <= sample_retention_dim else None
        for k in range(n):
            for _ in range(thin):
                state, rec = step(state, rng)
                if records is not None:
                    records.append(rec)
                step_index += 1
            fs[k] = f(state.x)
            if samples is not None:
                samples[k] = state.x
    except RunawayShrinkageError as exc:
        exc.step = step_index
        raise

    measure_evals = state.evals - burn_evals
    acc = None
    if kernel.name in TUNABLE and n > 0:
        acc = (state.accepted - burn_acc) / (n * thin)
    return ChainResult(
        f_series=fs,
        samples=samples,
        total_evals=state.evals,
        measure_evals=measure_evals,
        n0=n0,
        n=n,
        thin=thin,
        acceptance_rate=acc,
        param=param,
        seed=(int(seed[0]), int(seed[1])),
        wall_time=time.perf_counter() - t_start,
        records=records,
    )
