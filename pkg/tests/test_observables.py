import warnings

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, settings, strategies as st

from lightcone.funcalc import Constant, SpectralCutoff
from lightcone.grid import GridSpec, gaussian_packet
from lightcone.hamiltonian import HamiltonianOp, PotentialSpec, TimeDepPotentialSpec
from lightcone.observables import (
    AdmissibleFunction, BasicEqualityLedger, ConeFrame, FFunction, asymptotic_cutoff_apply,
    basic_equality_run, g_plus_density_check, gamma_apply, heisenberg_derivative,
    phi_time_derivative_fd, pull_through_residual, velocity_bound_check,
)
from lightcone.propagator import PropagatorConfig

F = FFunction(0.3)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-1, 1), y=st.floats(-1, 1))
def test_ffunction_is_monotone_step(x, y):
    lo, hi = sorted((x, y))
    assert 0.0 <= F(lo) <= F(hi) + 1e-15 <= 1.0 + 1e-15


def test_ffunction_endpoints_and_mass():
    assert F(0.0) == 0.0 and F(0.3) == pytest.approx(1.0, abs=1e-15)
    xs = np.linspace(0, 0.3, 4001)
    fp = F.derivatives(xs, 1)[1]
    assert np.all(fp >= 0)
    assert trapezoid(fp, xs) == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(F.u(xs) ** 2, fp, atol=1e-12)


def test_ffunction_derivative_matches_difference():
    x, h = 0.12, 1e-6
    assert F.derivatives(x, 1)[1] == pytest.approx((F(x + h) - F(x - h)) / (2 * h), rel=1e-6)


def test_admissible_function_integrates_to_ffunction():
    h = AdmissibleFunction(0.3, 0.05, 0.25)
    f = h.to_ffunction()
    xs = np.linspace(0.05, 0.25, 11)
    np.testing.assert_allclose(f.derivatives(xs, 1)[1], h(xs) / f.mass, rtol=1e-12)


def test_cone_frame_validation():
    with pytest.raises(ValueError):
        ConeFrame(1.2, 1.5, 6.0, 8.0)
    with pytest.raises(ValueError):
        ConeFrame(1.2, 1.5, 8.0, 6.0, s=0.5)
    with pytest.warns(UserWarning):
        ConeFrame(1.6, 1.5, 8.0, 6.0, k_ref=1.0)
    assert ConeFrame(1.2, 1.5, 8.0, 6.0).span == pytest.approx(0.3)


def test_gamma_is_symmetric():
    g = GridSpec(1, 20.0, 128)
    phi = gaussian_packet(g, 1.0, 0.5, 1.5)
    psi = gaussian_packet(g, -2.0, -0.3, 2.0)
    lhs = phi.inner(gamma_apply(psi))
    rhs = np.conj(psi.inner(gamma_apply(phi)))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_heisenberg_derivative_matches_finite_difference():
    g = GridSpec(1, 80.0, 1024)
    H = HamiltonianOp(g)
    frame = ConeFrame(1.2, 1.5, 8.0, 6.0, s=20.0)
    f = FFunction(frame.span)
    psi = gaussian_packet(g, 10.0, 1.4, 2.0)
    for t in (0.0, 3.0):
        fd = phi_time_derivative_fd(psi, H, f, frame, t, h=1e-3)
        assert heisenberg_derivative(psi, f, frame, t) == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_ledger_residual_is_trapezoid_error():
    t = np.linspace(0, 1, 101)
    led = BasicEqualityLedger(t, t**2, 2 * t)
    assert led.max_residual <= 1e-12
    led = BasicEqualityLedger(t, t**3, 3 * t**2)
    assert led.max_residual == pytest.approx(0.5 * 0.01**2, rel=1e-6)


def test_basic_equality_small_run():
    g = GridSpec(1, 80.0, 1024)
    frame = ConeFrame(1.2, 1.5, 8.0, 6.0, s=20.0)
    led = basic_equality_run(gaussian_packet(g, 10.0, 1.4, 2.0), HamiltonianOp(g), FFunction(frame.span),
                             frame, 5.0, PropagatorConfig(dt=0.025))
    assert led.max_residual <= 1e-6


def test_velocity_bound_holds():
    g = GridSpec(1, 40.0, 256)
    H = HamiltonianOp(g)
    frame = ConeFrame(1.2, 1.5, 8.0, 6.0)
    rep = velocity_bound_check(gaussian_packet(g, 0.0, 0.5, 2.0), SpectralCutoff(0.0, 0.5, 0.05), H,
                               FFunction(frame.span), frame)
    assert rep.holds


TD = TimeDepPotentialSpec(PotentialSpec("barrier", {"height": 0.5, "width": 1.0}), 2.0)


def test_static_cutoff_limit_is_plain_cutoff(small_grid):
    H = HamiltonianOp(small_grid)
    psi = gaussian_packet(small_grid, 0.0, 0.3, 1.0)
    cut = SpectralCutoff(-0.5, 1.5, 0.25)
    res = asymptotic_cutoff_apply(cut, H, psi)
    assert res.converged and res.tail_estimate == 0.0


def test_identity_cutoff_limit_is_identity():
    g = GridSpec(1, 20.0, 64)
    H = HamiltonianOp(g, timedep=TD)
    psi = gaussian_packet(g, 0.0, 0.3, 1.0)
    res = asymptotic_cutoff_apply(Constant(1.0), H, psi, T0=2.0, T_cap=8.0, dt=0.02)
    np.testing.assert_allclose(res.state.values, psi.values, atol=1e-10)
    assert res.converged


def test_cutoff_limit_warns_without_convergence():
    g = GridSpec(1, 20.0, 64)
    H = HamiltonianOp(g, timedep=TD)
    psi = gaussian_packet(g, 0.0, 0.3, 1.0)
    with pytest.warns(RuntimeWarning):
        res = asymptotic_cutoff_apply(SpectralCutoff(-0.5, 0.5, 0.2), H, psi, T0=1.0, T_cap=2.0, tol=1e-14, dt=0.02)
    assert not res.converged


def test_pull_through_residual_small_at_late_times():
    g = GridSpec(1, 20.0, 64)
    H = HamiltonianOp(g, PotentialSpec("gaussian_well", {"depth": 1.0}), TD)
    psi = gaussian_packet(g, 0.0, 0.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pull_through_residual(SpectralCutoff(-1.0, -0.2, 0.1), H, psi, [2.0, 8.0, 32.0], dt=0.02,
                                    T0=4.0, T_cap=256.0, tol=1e-8)
    assert rep.residual[-1] < rep.residual[0]


def test_density_nested_windows():
    g = GridSpec(1, 20.0, 128)
    H = HamiltonianOp(g, PotentialSpec("barrier", {"height": 0.5}), TD)
    psi = gaussian_packet(g, 0.0, 0.5, 1.5)
    windows = [SpectralCutoff(lo - 0.1, hi + 0.1, 0.1) for lo, hi in [(-0.2, 0.5), (-0.4, 1.5), (-0.6, 6.0)]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = g_plus_density_check(windows, H, psi, T0=2.0, T_cap=32.0, dt=0.02)
    assert rep.strictly_decreasing


FRAME = ConeFrame(1.2, 1.5, 8.0, 6.0, s=20.0)


def test_frame_field_geometry():
    from lightcone.grid import japanese_bracket
    from lightcone.observables import frame_field

    g = GridSpec(1, 8.0, 32)
    jb = japanese_bracket(g).values
    field = lambda s, t: frame_field(g, ConeFrame(0.5, 1.5, 2.0, 1.0, s=s), t).values  # noqa: E731
    # at t = 1 the offset a + v t equals the bracket at x = +-1
    np.testing.assert_allclose(field(1.0, 1.0) + 2.5, jb)
    np.testing.assert_allclose(field(4.0, 1.0), field(2.0, 1.0) / 2)
    cone = ConeFrame(0.5, 1.5, float(np.sqrt(5.0)), 1.0, s=3.0)
    on_cone = np.abs(g.coords[0]) == 2.0
    assert on_cone.sum() == 2 and np.all(frame_field(g, cone, 0.0).values[on_cone] == 0.0)


def test_phi_expectation_limits():
    from lightcone.observables import phi_expectation

    g = GridSpec(1, 80.0, 1024)
    f = FFunction(FRAME.span)
    xs = (np.sqrt(1 + g.coords[0] ** 2) - FRAME.a) / FRAME.s
    blob = gaussian_packet(g, 0.0, 0.0, 0.5)
    inside = blob.with_values(np.where(xs <= 0, blob.values, 0.0))
    assert phi_expectation(inside, f, FRAME, 0.0) == 0.0
    far = gaussian_packet(g, 40.0, 0.0, 0.5)
    assert phi_expectation(far, f, FRAME, 0.0) == pytest.approx(1.0, abs=1e-12)
    mid = gaussian_packet(g, 8.0 + 0.15 * 20.0, 0.0, 2.0)
    direct = np.sum(f(xs) * mid.density()) * g.cell_volume
    val = phi_expectation(mid, f, FRAME, 0.0)
    assert 0 < val < 1 and val == pytest.approx(direct, rel=1e-14)


def test_gamma_expectations():
    g = GridSpec(1, 200.0, 4096)
    even = gaussian_packet(g, 0.0, 0.0, 2.0)
    assert abs(even.inner(gamma_apply(even))) <= 1e-10
    moving = gaussian_packet(g, 100.0, 0.8, 5.0)
    val = moving.inner(gamma_apply(moving))
    assert abs(val.imag) <= 1e-12
    assert val.real == pytest.approx(0.8, abs=1e-3)


def test_heisenberg_derivative_trivial_cases():
    g = GridSpec(1, 80.0, 1024)
    f = FFunction(FRAME.span)
    xs = (np.sqrt(1 + g.coords[0] ** 2) - FRAME.a) / FRAME.s
    blob = gaussian_packet(g, 0.0, 0.5, 0.5)
    assert heisenberg_derivative(blob.with_values(np.where(xs <= 0, blob.values, 0.0)), f, FRAME, 0.0) == 0.0
    psi = gaussian_packet(g, 8.0 + 0.15 * 20.0, 1.4, 2.0)
    base = heisenberg_derivative(psi, f, FRAME, 0.0)
    shifted_frame = ConeFrame(1.3, 1.6, 8.0, 6.0, s=20.0)  # same span and field at t=0
    u2 = np.sum(f.u(xs) ** 2 * psi.density()) * g.cell_volume
    assert heisenberg_derivative(psi, f, shifted_frame, 0.0) == pytest.approx(base - 0.1 * u2 / FRAME.s, rel=1e-10)


def test_ledger_at_zero_time():
    g = GridSpec(1, 80.0, 512)
    led = basic_equality_run(gaussian_packet(g, 10.0, 1.4, 2.0), HamiltonianOp(g), FFunction(FRAME.span),
                             FRAME, 0.0)
    assert led.max_residual == 0.0


def test_velocity_bound_annihilated_state_and_slack():
    g = GridSpec(1, 40.0, 256)
    H = HamiltonianOp(g)
    frame = ConeFrame(1.2, 1.5, 8.0, 6.0)
    f = FFunction(frame.span)
    slow = gaussian_packet(g, 0.0, 0.0, 2.0)
    zero = velocity_bound_check(slow, SpectralCutoff(-2.0, -1.0, 0.2), H, f, frame)
    assert np.all(zero.lhs <= 1e-12) and np.all(zero.k_term <= 1e-12)
    rep = velocity_bound_check(gaussian_packet(g, 10.0, 0.5, 2.0), SpectralCutoff(0.0, 0.5, 0.05), H, f, frame)
    assert rep.holds
    # the part of ||p u g psi|| not covered by k ||u g psi|| dies out as s grows
    excess = (rep.lhs - rep.k_term) / rep.lhs
    assert np.all(np.diff(excess) < 0) and excess[-1] < 0


def test_g_plus_is_contraction():
    g = GridSpec(1, 20.0, 64)
    H = HamiltonianOp(g, timedep=TD)
    psi = gaussian_packet(g, 0.0, 0.3, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = asymptotic_cutoff_apply(SpectralCutoff(-0.5, 0.5, 0.2), H, psi, T0=2.0, T_cap=16.0, dt=0.02)
    assert res.state.norm() <= 1.0 + 1e-12


def test_static_pull_through_and_density():
    from lightcone.funcalc import spectral_apply

    g = GridSpec(1, 20.0, 64)
    H = HamiltonianOp(g, PotentialSpec("barrier", {"height": 0.5}))
    psi = gaussian_packet(g, 0.0, 0.3, 1.0)
    cut = SpectralCutoff(-0.5, 0.8, 0.2)
    rep = pull_through_residual(cut, H, psi, [1.0, 2.0, 4.0], dt=0.02)
    assert np.all(rep.residual <= 1e-8)
    ev = H.dense().eigenvalues
    dens = g_plus_density_check([cut, SpectralCutoff(-1.0, ev.max() + 1.0, 0.5)], H, psi)
    oracle = g.norm(spectral_apply(cut, H, psi).values - psi.values)
    assert dens.distances[0] == pytest.approx(oracle, abs=1e-12)
    assert dens.distances[1] <= dens.tails[1] + 1e-8
