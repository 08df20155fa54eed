import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from lightcone.grid import GridSpec, gaussian_packet
from lightcone.hamiltonian import HamiltonianOp, PotentialSpec, TimeDepPotentialSpec
from lightcone.propagator import (
    NumericalBlowupError, PropagatorConfig, energy, evolve, evolve_values, exact_evolution,
    exact_free_gaussian, free_gaussian_moments, heisenberg_conjugate, read_snapshot, step, write_snapshot,
)

from conftest import random_state

TD = TimeDepPotentialSpec(PotentialSpec("barrier", {"height": 1.0, "width": 1.0}), 2.0)


def test_free_packet_matches_closed_form(free_grid):
    psi = gaussian_packet(free_grid, 0.0, 0.5, 2.0)
    rec = evolve(psi, HamiltonianOp(free_grid), 10.0, PropagatorConfig(dt=0.01, record_stride=100))
    exact = exact_free_gaussian(free_grid, 0.0, 0.5, 2.0, 10.0)
    assert free_grid.norm(rec.final.values - exact.values) <= 1e-6


def test_moments_follow_ballistic_spreading(free_grid):
    psi = exact_free_gaussian(free_grid, -5.0, 0.7, 1.5, 8.0)
    mean, second = free_gaussian_moments(-5.0, 0.7, 1.5, 8.0)
    x = free_grid.coords[0]
    assert psi.mean_position()[0] == pytest.approx(mean, abs=1e-9)
    assert np.sum(x**2 * psi.density()) * free_grid.cell_volume == pytest.approx(second, rel=1e-9)


def test_norm_and_energy_conserved(well, rng):
    psi = gaussian_packet(well.grid, 0.0, 0.5, 0.8)
    rec = evolve(psi, well, 20.0, PropagatorConfig(dt=0.01, record_stride=200, boundary_threshold=1.0),
                 observe=lambda t, p: {"E": energy(p, well)})
    assert rec.max_norm_drift <= 1e-12
    E = rec.functionals["E"]
    # splitting error in the energy is O(dt^2) and does not accumulate
    assert np.max(np.abs(E - E[0])) <= 1e-4 * abs(E[0])


def test_backward_steps_invert_forward(well, rng):
    H = HamiltonianOp(well.grid, well.potential, TD)
    v = random_state(well.grid, rng)
    fwd = evolve_values(v, H, 0.0, 3.0, 0.01)
    back = evolve_values(fwd, H, 3.0, 0.0, 0.01)
    np.testing.assert_allclose(back, v, atol=1e-11)


def test_static_scheme_converges_to_exact(well, rng):
    v = random_state(well.grid, rng)
    exact = exact_evolution(v, well, 2.0)
    errs = [well.grid.norm(evolve_values(v, well, 0.0, 2.0, dt) - exact) for dt in (0.02, 0.01)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    np.testing.assert_allclose(exact_evolution(exact, well, -2.0), v, atol=1e-11)


def test_time_dependent_scheme_is_second_order(rng):
    g = GridSpec(1, 6.0, 16)
    H = HamiltonianOp(g, PotentialSpec("gaussian_well", {"depth": 1.0}), TD)
    v = random_state(g, rng)
    H0 = H.static().dense().matrix

    def rhs(t, y):
        return -1j * (H0 @ y + TD.values(g, t).reshape(-1) * y)

    ref = solve_ivp(rhs, (0.0, 1.0), v.reshape(-1).astype(complex), rtol=1e-12, atol=1e-12, method="DOP853").y[:, -1]
    errs = [np.linalg.norm(evolve_values(v, H, 0.0, 1.0, dt).reshape(-1) - ref) for dt in (0.02, 0.01)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_dense_propagator_oracle(well, rng):
    v = random_state(well.grid, rng)
    U = expm(-1j * 1.5 * well.dense().matrix)
    np.testing.assert_allclose(exact_evolution(v, well, 1.5), U @ v, atol=1e-10)


def test_span_must_be_whole_steps(well, rng):
    with pytest.raises(ValueError):
        evolve_values(random_state(well.grid, rng), well, 0.0, 1.005, 0.01)


def test_blowup_detected(small_grid):
    psi = gaussian_packet(small_grid, 0.0, 0.0, 1.0)
    bad = psi.with_values(psi.values * np.nan)
    with pytest.raises(NumericalBlowupError):
        evolve_values(bad.values, HamiltonianOp(small_grid), 0.0, 0.01, 0.01)


def test_heisenberg_identity_is_trivial(well, rng):
    psi = gaussian_packet(well.grid, 0.0, 0.2, 0.8)
    out = heisenberg_conjugate(lambda v: v, psi, well, 2.0, 0.01)
    np.testing.assert_allclose(out.values, psi.values, atol=1e-11)


def test_snapshot_roundtrip(tmp_path, free_grid, packet):
    path = tmp_path / "snap.bin"
    write_snapshot(path, packet, 1.25)
    back, t = read_snapshot(path)
    assert t == 1.25 and back.grid == free_grid
    np.testing.assert_array_equal(back.values, packet.values)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        read_snapshot(path)


def test_single_step_matches_raw_stepping(well, packet, small_grid):
    psi = gaussian_packet(small_grid, 0.0, 0.3, 1.0)
    np.testing.assert_allclose(step(psi, well, 0.01).values, evolve_values(psi.values, well, 0.0, 0.01, 0.01))


def test_free_mode_phase_is_exact(small_grid):
    k0 = small_grid.wavenumbers[0][5]
    wave = np.exp(1j * k0 * small_grid.coords[0])
    out = evolve_values(wave, HamiltonianOp(small_grid), 0.0, 0.01, 0.01)
    np.testing.assert_allclose(out, np.exp(-0.5j * k0**2 * 0.01) * wave, atol=1e-14)


def test_norm_per_step(well, packet, small_grid):
    psi = gaussian_packet(small_grid, 0.0, 0.3, 1.0)
    assert abs(step(psi, well, 0.01).norm() - psi.norm()) <= 1e-14


def test_zero_span_records_initial_state(free_grid, packet):
    rec = evolve(packet, HamiltonianOp(free_grid), 0.0)
    assert list(rec.times) == [0.0]
    np.testing.assert_array_equal(rec.final.values, packet.values)


def test_free_second_moment_and_drift(free_grid):
    psi = gaussian_packet(free_grid, -3.0, 0.8, 2.0)
    rec = evolve(psi, HamiltonianOp(free_grid), 10.0, PropagatorConfig(dt=0.01, record_stride=1000))
    x = free_grid.coords[0]
    mean, second = free_gaussian_moments(-3.0, 0.8, 2.0, 10.0)
    assert np.sum(x**2 * rec.final.density()) * free_grid.cell_volume == pytest.approx(second, abs=1e-6)
    assert abs(rec.final.mean_position()[0] - mean) <= free_grid.spacing
    exact0 = exact_free_gaussian(free_grid, -3.0, 0.8, 2.0, 0.0)
    np.testing.assert_allclose(exact0.values, psi.values, atol=1e-14)


def test_time_reversal_by_conjugation(well):
    psi = gaussian_packet(well.grid, 0.5, 0.7, 0.8)
    fwd = evolve(psi, well, 2.0).final
    back = evolve(fwd.conj(), well, 2.0).final
    np.testing.assert_allclose(back.values, np.conj(psi.values), atol=1e-8)


def test_heisenberg_conjugate_unrolls(well, rng):
    psi = gaussian_packet(well.grid, 0.0, 0.4, 0.8)
    B = np.diag(rng.normal(size=well.grid.size))
    apply = lambda v: (B @ v.reshape(-1)).reshape(v.shape)  # noqa: E731
    np.testing.assert_allclose(heisenberg_conjugate(apply, psi, well, 0.0).values, apply(psi.values))
    lhs = psi.inner(heisenberg_conjugate(apply, psi, well, 1.5, 0.01))
    moved = psi.with_values(evolve_values(psi.values, well, 0.0, 1.5, 0.01))
    assert lhs == pytest.approx(moved.inner(moved.with_values(apply(moved.values))), abs=1e-8)


def test_cutoff_commutes_with_evolution(well):
    from lightcone.funcalc import SpectralCutoff, cutoff_apply

    cut = SpectralCutoff(-0.5, 1.5, 0.25)
    psi = gaussian_packet(well.grid, 0.0, 0.4, 0.8)
    a = cutoff_apply(cut, well, exact_evolution(psi.values, well, 3.0))
    b = exact_evolution(cutoff_apply(cut, well, psi.values), well, 3.0)
    assert well.grid.norm(a - b) <= 1e-8
