"""Monte Carlo partition estimates, the quadrature oracle, and drift bounds."""

import numpy as np
import pytest

from phi3.free_energy import (
    TooManyDofsError,
    VarianceExplosionWarning,
    bd_lower_bound,
    bd_upper_bound,
    free_energy_curve,
    mc_partition,
    optimize_drift,
    oracle_moments,
    pairwise_logsumexp,
    quadrature_partition,
    _generic_scan,
    _quadrature_scan,
    _zero_sum_triples,
)
from phi3.lattice import SeedSpec, build_lattice, zero_field
from phi3.wick import InteractionParams

LAT0 = build_lattice(1, 0, 8)
LAT1 = build_lattice(1, 1, 8)


def test_pairwise_logsumexp_matches_scipy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 100, 1025):
        a = rng.normal(size=n) * 50
        from scipy.special import logsumexp

        assert abs(pairwise_logsumexp(a) - logsumexp(a)) < 1e-10


def test_pairwise_logsumexp_reorder_invariance():
    rng = np.random.default_rng(1)
    a = rng.normal(size=40_000) * 30
    b = rng.permutation(a)
    assert abs(pairwise_logsumexp(a) - pairwise_logsumexp(b)) < 1e-12 * max(
        1.0, abs(pairwise_logsumexp(a))
    )


def test_mc_free_case_exact():
    p = InteractionParams.for_lattice(LAT1, 0.0, 0.0)
    est = mc_partition(LAT1, p, 5000, SeedSpec(5, 0))
    # every weight is exactly one; only log-tree rounding dust remains
    assert abs(est.log_z) < 1e-12 and est.stderr == 0.0


def test_mc_determinism():
    p = InteractionParams.for_lattice(LAT1, 1.0, 2.0)
    a = mc_partition(LAT1, p, 4000, SeedSpec(7, 3))
    b = mc_partition(LAT1, p, 4000, SeedSpec(7, 3))
    assert a.log_z == b.log_z and a.stderr == b.stderr


def test_quadrature_normalization_and_1dof_truth():
    # V == 0 integrates to one; the 1-dof value matches adaptive quadrature
    p0 = InteractionParams.for_lattice(LAT1, 0.0, 0.0)
    assert abs(quadrature_partition(LAT1, p0, order=30, refine=False).log_z) < 1e-12
    from scipy.integrate import quad

    p = InteractionParams.for_lattice(LAT0, 0.0, 1.0)
    truth = np.log(
        quad(
            lambda g: np.exp(-((g * g - 1) ** 2) - g * g / 2) / np.sqrt(2 * np.pi),
            -20,
            20,
            epsabs=1e-14,
            epsrel=1e-14,
        )[0]
    )
    est = quadrature_partition(LAT0, p, order=40)
    assert abs(est.log_z - truth) < 1e-12
    assert est.stderr == 0.0
    assert est.extra["refinement"] < 1e-9


def test_quadrature_matches_generic_tensor():
    # the shell-coordinate evaluation against the literal dof-tensor route
    p = InteractionParams.for_lattice(LAT1, 1.0, 2.0)
    shell, _, _ = _quadrature_scan(LAT1, p, 60)
    gh, _ = _generic_scan(LAT1, p, 40, 0.35, _zero_sum_triples(LAT1))
    assert abs(shell - gh) < 5e-6  # generic rule's own convergence floor


def test_quadrature_sigma_parity():
    for A in (0.5, 2.0):
        pa = InteractionParams.for_lattice(LAT1, 1.3, A)
        pb = InteractionParams.for_lattice(LAT1, -1.3, A)
        a = quadrature_partition(LAT1, pa, order=30, refine=False).log_z
        b = quadrature_partition(LAT1, pb, order=30, refine=False).log_z
        assert abs(a - b) < 1e-10


def test_quadrature_divergent_at_zero_taming_is_flagged():
    # E[exp(-(g^3 - 3g))] diverges; the refinement certificate must say so
    p = InteractionParams.for_lattice(LAT0, 3.0, 0.0)
    est = quadrature_partition(LAT0, p, order=30)
    assert np.isfinite(est.log_z)
    assert "window-not-contained" in est.flags
    assert "refinement-unstable" in est.flags


def test_quadrature_dof_cap():
    big = build_lattice(1, 2, 16)
    with pytest.raises(TooManyDofsError):
        quadrature_partition(big, InteractionParams.for_lattice(big, 1.0, 1.0))


def test_mc_agrees_with_oracle():
    for lat in (LAT0, LAT1):
        for sigma, A in ((0.0, 1.0), (1.0, 2.0), (-2.0, 1.0)):
            p = InteractionParams.for_lattice(lat, sigma, A)
            q = quadrature_partition(lat, p, order=30, refine=False)
            mc = mc_partition(lat, p, 20_000, SeedSpec(13, abs(hash((sigma, A))) % 97))
            assert abs(mc.log_z - q.log_z) <= 3 * mc.stderr


def test_weight_concentration_warning():
    lat = build_lattice(2, 2, 24)
    p = InteractionParams.for_lattice(lat, 4.0, 0.02)
    with pytest.warns(VarianceExplosionWarning):
        est = mc_partition(lat, p, 400, SeedSpec(3, 1), max_doublings=1)
    assert any("weight-concentration" in f for f in est.flags)
    assert est.n == 800  # one doubling happened


def test_bd_lower_bound_validity_and_eps_errors():
    p = InteractionParams.for_lattice(LAT1, 1.0, 2.0)
    truth = quadrature_partition(LAT1, p, order=30, refine=False).log_z
    for m_cut in (0.0, 1.0):
        est = bd_lower_bound(LAT1, m_cut, 0.1, p, None, 8000, SeedSpec(17, int(m_cut)))
        assert est.method == "bd-lower"
        assert est.log_z <= truth + 3 * est.stderr
    with pytest.raises(ValueError):
        bd_lower_bound(LAT1, 0.0, 1.5, p, None, 100, SeedSpec(1))
    with pytest.raises(ValueError):
        bd_lower_bound(LAT1, 9.0, 0.1, p, None, 100, SeedSpec(1))


def test_bd_upper_bound_validity():
    p = InteractionParams.for_lattice(LAT1, 1.0, 2.0)
    truth = quadrature_partition(LAT1, p, order=30, refine=False).log_z
    est = bd_upper_bound(LAT1, 1.0, p, None, 60, SeedSpec(19, 0))
    assert est.method == "bd-upper"
    assert est.log_z >= truth - 3 * est.stderr


def test_bd_upper_zero_drift_candidate_reduces_to_corrections():
    # with V == 0 the inner supremum is exactly zero at psi = 0
    p0 = InteractionParams.for_lattice(LAT1, 0.0, 0.0)
    est = bd_upper_bound(LAT1, 1.0, p0, None, 10, SeedSpec(2, 0))
    assert abs(est.log_z) < 1e-8


def test_optimize_drift_trivial_and_dominates_fixed_candidate():
    p0 = InteractionParams.for_lattice(LAT1, 0.0, 0.0)
    od0 = optimize_drift(LAT1, p0, 50, SeedSpec(23, 0))
    assert od0.log_z == 0.0 and od0.extra["drift_cost"] == 0.0
    p = InteractionParams.for_lattice(LAT1, 1.0, 2.0)
    od = optimize_drift(LAT1, p, 400, SeedSpec(23, 1))
    lo = bd_lower_bound(LAT1, 1.0, 0.1, p, None, 8000, SeedSpec(23, 2))
    assert od.log_z >= lo.log_z - 3 * (od.stderr + lo.stderr)
    truth = quadrature_partition(LAT1, p, order=30, refine=False).log_z
    assert od.log_z <= truth + 3 * od.stderr


def test_optimize_drift_near_oracle_at_weak_coupling():
    # deterministic drifts are near-optimal when the interaction is weak
    p = InteractionParams.for_lattice(LAT1, 0.05, 0.02)
    od = optimize_drift(LAT1, p, 200, SeedSpec(29, 0), n_final=2000)
    truth = quadrature_partition(LAT1, p, order=30, refine=False).log_z
    assert abs(od.log_z - truth) <= 3 * od.stderr


def test_oracle_moments_symmetry():
    p = InteractionParams.for_lattice(LAT1, 0.0, 1.5)
    mom = oracle_moments(LAT1, p)
    assert abs(mom["zero"]) < 1e-10  # odd moment vanishes at sigma = 0
    assert mom["wick2_sq"] > 0


def test_free_energy_curve_rows_and_determinism():
    lats = [build_lattice(1, 1, 8), build_lattice(2, 1, 16)]
    rows, trend = free_energy_curve(lats, 1.0, 1.0, 3000, SeedSpec(31, 0))
    assert [r.L for r in rows] == [1.0, 2.0]
    assert len(trend) == 1 and "z" in trend[0]
    single = mc_partition(
        lats[0], InteractionParams.for_lattice(lats[0], 1.0, 1.0), 3000, SeedSpec(31, 0)
    )
    assert single.log_z == rows[0].log_z  # bitwise plumbing determinism
    row = rows[0].row()
    assert set(row) == {"L", "N", "sigma", "A", "method", "log_z", "stderr", "log_z_per_L4", "flags"}
