"""Radial ground state, GNS constant, constrained infima, torus descent."""

import numpy as np
import pytest

from phi3.groundstate import (
    DivergenceError,
    calibrate_torus_gns,
    check_scaling,
    constrained_minimize,
    critical_A,
    critical_A_from_gns,
    default_torus,
    gns_constant,
    ground_state,
    hamiltonian,
    minimize_hamiltonian,
    soliton_seed,
    torus_gns_check,
)
from phi3.lattice import (
    SeedSpec,
    build_lattice,
    constant_field,
    gradient_sq_norm,
    lp_norm,
    sample_gff,
    sobolev_norm,
    zero_field,
)
from phi3.wick import InteractionParams

QUICK_TOL = 1e-7


@pytest.fixture(scope="module")
def profile():
    return ground_state()


@pytest.fixture(scope="module")
def astar():
    return critical_A(1.0)


def test_profile_shape_and_residual(profile):
    assert profile.center_value > 0
    assert profile.center_value == pytest.approx(2.3919564032, abs=1e-8)
    # strictly decreasing on the solution branch, decayed at the far end
    assert np.all(np.diff(profile.values[profile.r_grid > 1e-6]) < 0)
    assert profile.values[-1] <= 1e-8
    assert profile.residual() <= 1e-6


def test_profile_pohozaev_identities(profile):
    # multiply the equation by Q and by x.grad Q: ||grad Q||^2 = ||Q||^2 and
    # int Q^3 = (3/2) ||Q||^2; these are independent of the quadrature used
    m = profile.mass()
    assert abs(profile.gradient_mass() - m) < 1e-6 * m
    assert abs(profile.cubic_integral() - 1.5 * m) < 1e-6 * m


def test_mass_reference_value(profile):
    # frozen from the converged solver (two integrators agree to ~1e-10);
    # stable to 4 digits under grid refinement by construction of mass()
    assert profile.mass() == pytest.approx(15.50158632, abs=2e-6)


def test_constant_function_is_not_returned(profile):
    # Q == 1 solves the algebraic part but violates decay
    assert abs(profile.values[-1]) < 1e-8
    assert profile.values[0] != pytest.approx(1.0, abs=0.5)


def test_gns_constant_consistency(profile):
    c = gns_constant(profile)
    assert c == pytest.approx(1.5 / np.sqrt(profile.mass()), rel=1e-12)


def test_gns_sharpness_at_ground_state(profile):
    # ratio ||Q||_L3^3 / (||grad Q|| ||Q||^2) attains the constant at Q
    m = profile.mass()
    ratio = profile.cubic_integral() / (np.sqrt(profile.gradient_mass()) * m)
    assert abs(ratio - gns_constant(profile)) < 0.01 * gns_constant(profile)


def test_gns_validity_random_fields(profile):
    # windowed random smooth fields emulate plane test functions
    c = gns_constant(profile)
    lat = build_lattice(16.0, 1.0, 66)
    xs = np.arange(lat.M) * lat.L / lat.M
    r2 = (xs[:, None] - 8.0) ** 2 + (xs[None, :] - 8.0) ** 2
    window = np.exp(-r2 / (2 * 2.5 ** 2))
    rng = SeedSpec(314, 0).generator()
    from phi3.lattice import Field

    for _ in range(100):
        f = sample_gff(lat, rng)
        g = Field(lat, lat.analyze(f.grid * window))
        lhs = lp_norm(g, 3) ** 3
        rhs = c * np.sqrt(gradient_sq_norm(g)) * lp_norm(g, 2) ** 2
        assert lhs <= rhs * (1 + 1e-9)


def test_constrained_minimize_negative_and_scaling(astar):
    h1 = -astar
    for q in (0.5, 2.0):
        rep = constrained_minimize(q, 1.0, tol=QUICK_TOL)
        assert rep.converged
        assert rep.energy < 0
        assert abs(rep.energy / (q * q * h1) - 1.0) < 0.02
        assert rep.info["zero_mode_mass_share"] < 0.2


def test_constrained_minimize_sigma_sign(astar):
    rep = constrained_minimize(1.0, -1.0, tol=QUICK_TOL)
    assert abs(rep.energy + astar) < 1e-6 * astar


def test_constrained_minimize_rejects_bad_mass():
    with pytest.raises(ValueError):
        constrained_minimize(-1.0, 1.0)


def test_critical_a_against_gns_formula(profile, astar):
    # independent oracle: |H*_{0,1}| = sigma^2 / (8 ||Q||^2)
    assert abs(astar - critical_A_from_gns(1.0, profile)) < 1e-4 * astar
    assert critical_A(2.0) == pytest.approx(4.0 * astar, rel=1e-12)


def test_minimize_hamiltonian_trivial_at_zero(astar):
    lat = default_torus(8.0, 4.0)
    params = InteractionParams(1.0, 2 * astar, 0.0)
    rep = minimize_hamiltonian(8.0, params, zero_field(lat), lattice=lat)
    assert rep.converged and rep.energy == 0.0 and rep.iterations <= 1


def test_minimize_hamiltonian_triviality_above_critical(astar):
    lat = default_torus(16.0, 4.0)
    params = InteractionParams(1.0, 2 * astar, 0.0)
    for s in range(5):
        f = sample_gff(lat, SeedSpec(900 + s))
        f = f * (0.8 / sobolev_norm(f, 1))
        rep = minimize_hamiltonian(16.0, params, f, lattice=lat)
        assert rep.converged
        assert rep.energy >= -1e-12
        assert sobolev_norm(rep.field, 1) <= 1e-4


def test_zero_mode_well_matches_prediction(astar):
    # with the mean included, the exact torus minimizer is the constant
    # -sigma/(4 A L^2) at depth -sigma^4/(768 A^3 L^4)
    L, A = 16.0, 2 * astar
    lat = default_torus(L, 4.0)
    params = InteractionParams(1.0, A, 0.0)
    rep = minimize_hamiltonian(
        L, params, constant_field(lat, -0.01), lattice=lat, mean_zero=False
    )
    assert rep.energy == pytest.approx(-1.0 / (768 * A ** 3 * L ** 4), rel=1e-9)


def test_well_depth_vanishes_with_volume(astar):
    # |inf H_L| over the full space decreases to zero as L grows
    A = 2 * astar
    depths = []
    for L in (4.0, 8.0, 16.0):
        lat = default_torus(L, 4.0)
        rep = minimize_hamiltonian(
            L,
            InteractionParams(1.0, A, 0.0),
            constant_field(lat, -0.01),
            lattice=lat,
            mean_zero=False,
        )
        depths.append(abs(rep.energy))
    assert depths[0] > depths[1] > depths[2]
    assert depths[2] < 1e-2


def test_soliton_seed_negative_below_critical(astar):
    lat = build_lattice(32.0, 2.0, 270)
    A = 0.5 * astar
    s = soliton_seed(lat, 1.0, 1.0)
    e0 = hamiltonian(s, 1.0, A)
    assert e0 < 0
    assert e0 == pytest.approx(1.0 * (A - critical_A(1.0)), rel=0.2)
    rep = minimize_hamiltonian(
        32.0, InteractionParams(1.0, A, 0.0), s, lattice=lat, mean_zero=False, max_iter=50
    )
    assert rep.energy <= e0


def test_soliton_seed_mass(astar):
    lat = build_lattice(32.0, 2.0, 270)
    for q in (0.5, 1.0, 2.0):
        s = soliton_seed(lat, q, 1.0)
        assert lat.integrate(s.grid ** 2) == pytest.approx(q, rel=1e-12)


def test_divergence_detector():
    # far below critical with a strong seed the energy rushes downward; the
    # detector must fire rather than return a bogus minimum
    lat = build_lattice(8.0, 2.0, 70)
    s = soliton_seed(lat, 60.0, 1.0)
    with pytest.raises(DivergenceError):
        minimize_hamiltonian(
            8.0,
            InteractionParams(1.0, 1e-9, 0.0),
            s,
            lattice=lat,
            mean_zero=False,
            max_iter=4000,
        )


def test_check_scaling_exactness():
    rng = np.random.default_rng(7)
    for L in (2.0, 4.0):
        lat = build_lattice(L * L, 8.0 / L / L, int(4 * 8 + 2 + 6))
        for _ in range(10):
            f = sample_gff(lat, rng)
            a, b = check_scaling(f, L, sigma=rng.uniform(-2, 2), A=rng.uniform(0, 2))
            assert abs(a - b) <= 1e-10 * max(1.0, abs(b))
    z = zero_field(build_lattice(4.0, 2.0, 38))
    assert check_scaling(z, 2.0, 1.0, 1.0) == (0.0, 0.0)


def test_torus_gns_constant_field():
    # constant fields saturate the L^(-1/3) term: holds iff C >= 1
    lat = build_lattice(4.0, 1.0, 18)
    f = constant_field(lat, 2.0)
    assert torus_gns_check(f, 1.0 + 1e-12)
    assert not torus_gns_check(f, 0.5)
    assert torus_gns_check(zero_field(lat), 0.1)


def test_torus_gns_calibrated_over_sizes():
    rng = SeedSpec(555, 0).generator()
    cal = []
    lat1 = build_lattice(1.0, 4.0, 18)
    for _ in range(200):
        cal.append(sample_gff(lat1, rng))
        cal.append(constant_field(lat1, rng.normal()))
    C = calibrate_torus_gns(cal)
    violations = 0
    for L in (1.0, 2.0, 4.0, 8.0):
        lat = build_lattice(L, 4.0, None)
        for _ in range(250):
            f = sample_gff(lat, rng)
            violations += not torus_gns_check(f, C)
    assert violations == 0
