import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ellslice import samplers
from ellslice.diagnostics import summary_moments
from ellslice.linalg import ContractError, CovarianceFactor, RngStream, ellipse_point
from ellslice.samplers import (
    KernelSpec,
    KernelState,
    RunawayShrinkageError,
    ess_transition,
    initial_state,
    pcn_transition,
    run_chain,
    rwm_transition,
    sample_radius,
    shrink_bracket,
    simple_slice_transition_radial,
    tune_acceptance,
)
from ellslice.targets import (
    TargetModel,
    UnsupportedTargetError,
    double_banana_target,
    flat_target,
    gaussian_target,
    volcano_target,
)

from .conftest import ScriptedRng


class RecordingRng(RngStream):
    """Real stream that logs every uniform(lo, hi) request."""

    def __init__(self, *a):
        super().__init__(*a)
        self.calls = []

    def uniform(self, low=0.0, high=1.0):
        self.calls.append((low, high))
        return super().uniform(low, high)


def test_ess_constant_rho_single_eval():
    t = flat_target(2)
    x = np.array([1.0, 2.0])
    w = np.array([0.5, -1.0])
    rng = ScriptedRng(normals=[w], uniforms=[0.3], open_left=[0.7])
    new, rec = ess_transition(initial_state(t, x), t, rng)
    theta = 0.3 * 2 * math.pi
    assert rec.proposal_evals == 1 and rec.shrink_iterations == 0
    np.testing.assert_array_equal(new.x, ellipse_point(x, w, theta))


def test_ess_volcano_at_origin_single_eval():
    t = volcano_target(5)
    rng = RngStream(0)
    for _ in range(200):
        new, rec = ess_transition(initial_state(t, np.zeros(5)), t, rng)
        assert rec.proposal_evals == 1


def test_ess_shrinks_towards_current_state():
    # only a tiny ball around x has density: accepted theta must collapse to 0
    x = np.array([1.0, -0.5, 2.0])

    def log_rho(y):
        return 0.0 if np.linalg.norm(y - x) < 1e-4 else -math.inf

    t = TargetModel("needle", 3, CovarianceFactor.identity(3), log_rho)
    rng = RecordingRng(5, 0)
    for _ in range(50):
        rng.calls.clear()
        new, rec = ess_transition(initial_state(t, x), t, rng)
        assert np.linalg.norm(new.x - x) < 1e-4
        # one initial angle draw, then one draw per shrink
        assert rec.shrink_iterations == len(rng.calls) - 1
        brackets = rng.calls[1:]
        assert all(lo <= 0.0 <= hi for lo, hi in brackets)
        widths = [hi - lo for lo, hi in brackets]
        assert all(b < a for a, b in zip(widths, widths[1:]))


def test_ess_injected_angles_recover_x():
    t = flat_target(2)
    x = np.array([3.0, 1.0])
    w = np.array([-2.0, 5.0])
    for theta in (1e-1, 1e-4, 1e-8):
        y = ellipse_point(x, w, theta)
        assert np.linalg.norm(y - x) <= theta * (np.linalg.norm(x) + np.linalg.norm(w)) * 1.01


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63), st.sampled_from(["volcano", "banana", "gauss"]))
def test_ess_slice_membership(seed, which):
    if which == "volcano":
        t, x = volcano_target(4), np.zeros(4)
    elif which == "banana":
        t, x = double_banana_target(), np.array([-1.0, 1.0])
    else:
        t, x = gaussian_target(3, x0=[1.0, 1.0, 1.0]), np.zeros(3)
    rng = RngStream(seed % 2**64, 1)
    state = initial_state(t, x)
    for _ in range(200):
        state, rec = ess_transition(state, t, rng)
        assert state.log_rho_x == t.log_rho(state.x)
        assert state.log_rho_x >= rec.log_threshold
        assert rec.proposal_evals == rec.shrink_iterations + 1


def test_ess_runaway_shrinkage():
    x = np.array([1.0, 1.0])

    def log_rho(y):
        return 0.0 if np.array_equal(y, x) else -math.inf

    t = TargetModel("point", 2, CovarianceFactor.identity(2), log_rho)
    with pytest.raises(RunawayShrinkageError) as info:
        ess_transition(initial_state(t, x), t, RngStream(0), max_shrink=50)
    err = info.value
    assert err.iterations == 50
    np.testing.assert_array_equal(err.x, x)
    assert err.w.shape == (2,) and err.log_t <= 0.0
    assert "50 iterations" in str(err)


def test_run_chain_reports_runaway_step():
    x = np.array([1.0, 1.0])
    hits = {"n": 0}

    def log_rho(y):
        # first 5 transitions move freely, then the state is pinned
        hits["n"] += 1
        if hits["n"] <= 5:
            return 0.0
        return 0.0 if np.array_equal(y, pinned[0]) else -math.inf

    pinned = [None]

    t = TargetModel("trap", 2, CovarianceFactor.identity(2), log_rho)
    orig = samplers.ess_transition

    def tracking(state, target, rng, cap):
        pinned[0] = state.x
        return orig(state, target, rng, cap)

    samplers.ess_transition = tracking
    try:
        with pytest.raises(RunawayShrinkageError) as info:
            run_chain(KernelSpec("ess", max_shrink=20), t, x, 3, 10, (0, 0))
    finally:
        samplers.ess_transition = orig
    assert info.value.step == 4
    assert "at step 4" in str(info.value)


@pytest.mark.parametrize(
    "theta, bracket, expected",
    [(-1.0, (-5.0, 2.0), (-1.0, 2.0)), (1.5, (-5.0, 2.0), (-5.0, 1.5)), (0.0, (-5.0, 2.0), (-5.0, 0.0))],
)
def test_shrink_bracket(theta, bracket, expected):
    assert shrink_bracket(theta, *bracket) == expected


@pytest.mark.parametrize("theta, bracket", [(3.0, (-5.0, 2.0)), (-1.0, (0.5, 2.0)), (0.0, (-1.0, -0.5))])
def test_shrink_bracket_contract(theta, bracket):
    with pytest.raises(ContractError):
        shrink_bracket(theta, *bracket)


@given(st.floats(-6.0, 6.0), st.floats(-6.3, 0.0), st.floats(0.0, 6.3))
def test_shrink_bracket_keeps_zero(theta, lo, hi):
    if not lo <= theta <= hi:
        return
    a, b = shrink_bracket(theta, lo, hi)
    assert a <= 0.0 <= b and lo <= a and b <= hi and theta in (a, b)


def test_pcn_tiny_step_is_identity():
    t = volcano_target(3)
    x = np.array([1.0, -1.0, 0.5])
    state = initial_state(t, x)
    rng = RngStream(1)
    for _ in range(100):
        new, rec = pcn_transition(state, t, 1e-12, rng)
        assert rec.accepted
        np.testing.assert_allclose(new.x, x, atol=1e-10)


def test_pcn_constant_rho_always_accepts():
    t = flat_target(4)
    state = initial_state(t, np.zeros(4))
    rng = RngStream(2)
    for _ in range(500):
        state, rec = pcn_transition(state, t, 0.8, rng)
        assert rec.accepted
    assert state.accepted == 500 and state.evals == 500


def test_pcn_volcano_origin_always_accepts():
    t = volcano_target(6)
    rng = RngStream(3)
    for _ in range(500):
        _, rec = pcn_transition(initial_state(t, np.zeros(6)), t, 0.5, rng)
        assert rec.accepted


@pytest.mark.parametrize("s", [0.0, 1.5, -0.1])
def test_pcn_step_range(s):
    t = flat_target(2)
    with pytest.raises(ContractError):
        pcn_transition(initial_state(t, np.zeros(2)), t, s, RngStream(0))


def test_rwm_tiny_step_is_identity():
    t = volcano_target(3)
    x = np.array([1.0, 0.0, 0.0])
    state = initial_state(t, x)
    rng = RngStream(4)
    for _ in range(100):
        new, rec = rwm_transition(state, t, 1e-12, rng)
        assert rec.accepted
        np.testing.assert_allclose(new.x, x, atol=1e-10)


def test_rwm_standard_normal_ratio():
    # accept iff log u <= -1/2, i.e. u <= exp(-1/2) = 0.60653...
    t = flat_target(2)
    state = initial_state(t, np.zeros(2))
    for u, want in [(0.6065, True), (0.6066, False)]:
        rng = ScriptedRng(normals=[(1.0, 0.0)], open_left=[u])
        new, rec = rwm_transition(state, t, 1.0, rng)
        assert rec.accepted is want
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)


def test_rwm_tuned_volcano_d30():
    res = run_chain(KernelSpec("rwm", tune=True), volcano_target(30), np.zeros(30), 10_000, 50_000, (7, 0))
    assert 0.20 <= res.acceptance_rate <= 0.30


def test_sample_radius_one_dim_is_uniform():
    for u in (0.25, 0.5, 1.0):
        assert sample_radius(0.5, 2.5, 1, u) == pytest.approx(0.5 + u * 2.0)


@given(st.floats(0.0, 10.0), st.floats(0.01, 10.0), st.integers(1, 2000), st.floats(0.0, 1.0, exclude_min=True))
def test_sample_radius_in_interval(lo, width, d, u):
    hi = lo + width
    r = sample_radius(lo, hi, d, u)
    assert lo * (1 - 1e-12) <= r <= hi * (1 + 1e-12)


def test_sample_radius_matches_cdf():
    # P(R <= r) = (r^d - lo^d) / (hi^d - lo^d)
    lo, hi, d = 0.5, 1.5, 5
    for u in (0.1, 0.5, 0.9):
        r = sample_radius(lo, hi, d, u)
        assert (r**d - lo**d) / (hi**d - lo**d) == pytest.approx(u, rel=1e-12)


def test_sample_radius_high_dim_no_overflow():
    r = sample_radius(30.0, 31.0, 1000, 0.5)
    assert 30.0 < r < 31.0 and math.isfinite(r)


def test_slice_radial_mode_is_fixed_point():
    t = volcano_target(3)
    x = np.array([1.0, 0.0, 0.0])
    rng = ScriptedRng(normals=[(0.0, 1.0, 0.0)], open_left=[1.0, 0.37])
    new, rec = simple_slice_transition_radial(initial_state(t, x), t, rng)
    assert np.linalg.norm(new.x) == pytest.approx(1.0, abs=1e-7)
    assert rec.proposal_evals == 1


def test_slice_radial_needs_profile():
    t = gaussian_target(2, x0=[1.0, 1.0])
    with pytest.raises(UnsupportedTargetError):
        simple_slice_transition_radial(initial_state(t, np.zeros(2)), t, RngStream(0))


def test_slice_radial_stays_in_level_set():
    t = volcano_target(10)
    h = t.radial_profile
    state = initial_state(t, np.zeros(10))
    rng = RngStream(9)
    for _ in range(1000):
        state, rec = simple_slice_transition_radial(state, t, rng)
        assert h(float(np.linalg.norm(state.x))) >= rec.log_threshold - 1e-9


def test_tune_pcn_flat_hits_clamp():
    t = flat_target(3)
    s, _ = tune_acceptance(KernelSpec("pcn", tune=True), t, initial_state(t, np.zeros(3)), RngStream(0), 2000)
    assert s == 1.0


def test_tune_rwm_standard_normal_d10():
    t = flat_target(10)
    rng = RngStream(10)
    sigma, state = tune_acceptance(KernelSpec("rwm", tune=True), t, initial_state(t, np.zeros(10)), rng, 10_000)
    acc = 0
    for _ in range(100_000):
        state, rec = rwm_transition(state, t, sigma, rng)
        acc += rec.accepted
    assert 0.20 <= acc / 100_000 <= 0.30


def test_tune_needs_enough_steps():
    t = flat_target(2)
    with pytest.raises(ContractError):
        tune_acceptance(KernelSpec("rwm", tune=True), t, initial_state(t, np.zeros(2)), RngStream(0), 999)


def test_parameter_frozen_after_tuning(monkeypatch):
    seen = []
    orig = samplers.pcn_transition

    def spy(state, target, s, rng):
        seen.append(s)
        return orig(state, target, s, rng)

    monkeypatch.setattr(samplers, "pcn_transition", spy)
    res = run_chain(KernelSpec("pcn", tune=True), volcano_target(5), np.zeros(5), 1000, 500, (1, 1))
    assert len(seen) == 1500
    assert len(set(seen[:1000])) > 1
    assert all(s == res.param for s in seen[1000:])


@pytest.mark.parametrize("name", ["ess", "pcn", "rwm", "slice-radial"])
def test_run_chain_deterministic(name):
    spec = KernelSpec(name, tune=name in ("pcn", "rwm"))
    a = run_chain(spec, volcano_target(2), np.zeros(2), 1000, 2000, (3, 4))
    b = run_chain(spec, volcano_target(2), np.zeros(2), 1000, 2000, (3, 4))
    np.testing.assert_array_equal(a.f_series, b.f_series)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert (a.total_evals, a.measure_evals, a.acceptance_rate, a.param) == (
        b.total_evals, b.measure_evals, b.acceptance_rate, b.param)


def test_run_chain_zero_measurement():
    res = run_chain(KernelSpec("ess"), volcano_target(3), np.zeros(3), 500, 0, (0, 0))
    assert res.f_series.size == 0
    assert res.measure_evals == 0 and res.total_evals >= 500


@pytest.mark.parametrize("name", ["ess", "pcn", "rwm", "slice-radial"])
def test_eval_accounting(name):
    spec = KernelSpec(name, tune=name in ("pcn", "rwm"))
    res = run_chain(spec, volcano_target(4), np.zeros(4), 1000, 3000, (2, 2), keep_records=True, thin=2)
    assert len(res.records) == 1000 + 6000
    assert res.total_evals == sum(r.proposal_evals for r in res.records)
    assert res.measure_evals == sum(r.proposal_evals for r in res.records[1000:])


def test_ess_eval_cost_volcano_d100():
    res = run_chain(KernelSpec("ess"), volcano_target(100), np.zeros(100), 1000, 20_000, (0, 0))
    assert 1.2 <= res.mean_evals_per_step <= 1.9


def test_ess_one_dim_conjugate():
    t = gaussian_target(1, x0=[1.0])
    res = run_chain(KernelSpec("ess"), t, np.zeros(1), 10_000, 100_000, (0, 0))
    m = summary_moments(res.samples)
    assert abs(m.mean[0] - 0.5) <= 3 * m.mc_standard_errors[0]
    assert abs(m.covariance[0, 0] - 0.5) <= 3 * m.covariance_standard_errors[0, 0]


def test_initial_state_zero_density():
    with pytest.raises(ContractError):
        initial_state(double_banana_target(), np.zeros(2))


def test_kernel_spec_validation():
    with pytest.raises(ContractError):
        KernelSpec("hmc")
    with pytest.raises(ContractError):
        KernelSpec("ess", tune=True)
    assert KernelSpec("rwm").initial_param(100) == pytest.approx(0.238)
