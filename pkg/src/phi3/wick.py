"""Hermite recentering, Wick powers, and the renormalized interaction.

The interaction of the grand-canonical cubic measure is

    V(phi) = (sigma/3) * int :phi^3: dx + A * (int :phi^2: dx)^2

with Wick powers defined by subtracting a supplied variance constant c:
:phi^2: = phi^2 - c and :phi^3: = phi^3 - 3*c*phi.  For the truncated free
field the correct c is the tadpole sum of the active lattice; shifted fields
re-Wick'ed against a different Gaussian use the recentering identities

    H_2(x; c1) = H_2(x; c2) - (c1 - c2)
    H_3(x; c1) = H_3(x; c2) - 3*(c1 - c2)*H_1(x)

which hold exactly, not just in expectation.  Pointwise products are formed in
real space on the oversampled grid and re-analyzed; integrals of cubic powers
use a dedicated minimal alias-free grid in the batched paths.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .lattice import AliasingError, Field, FourierLattice, tadpole


@dataclass(frozen=True)
class InteractionParams:
    """Couplings of the interaction: cubic strength, chemical potential, Wick constant."""

    sigma: float
    A: float
    wick_constant: float

    @classmethod
    def for_lattice(cls, lattice, sigma, A, massless=False):
        return cls(float(sigma), float(A), tadpole(lattice.L, lattice.N, massless=massless))

    def validate(self, lattice):
        c = tadpole(lattice.L, lattice.N)
        if abs(self.wick_constant - c) > 1e-12 * max(1.0, abs(c)):
            raise ValueError(
                f"wick_constant {self.wick_constant} does not match lattice tadpole {c}"
            )
        if self.A < 0:
            raise ValueError("chemical potential A must be nonnegative")


@dataclass(frozen=True)
class PotentialValue:
    """Interaction split into the cubic part and the nonnegative quartic taming part."""

    cubic: float
    quartic: float

    @property
    def total(self):
        return self.cubic + self.quartic


def hermite(k, x, c):
    """Hermite polynomial of degree k in x with variance parameter c.

    H_1 = x, H_2 = x^2 - c, H_3 = x^3 - 3*c*x.  The cubic is accumulated with
    compensated products so the value is correctly rounded; recenter() then
    reproduces it bit for bit when the variance bookkeeping is consistent.
    """
    x = np.asarray(x, dtype=np.float64)
    if k == 1:
        return x + 0.0
    if k == 2:
        return x * x - c
    if k == 3:
        one = np.ones_like(x)
        sq, esq = _two_prod(x, x)
        p, ep = _two_prod(sq, x)  # x^3 = p + (ep + esq*x)
        n, en = _two_prod(3.0 * one, c * one)
        t, et = _two_prod(n, x)  # 3*c*x = t + (et + en*x)
        s, e = _two_sum(p, -t)
        return s + (e + (ep + esq * x) - (et + en * x))
    raise ValueError(f"unsupported Hermite degree {k}; only 1, 2, 3 are defined")


def _two_sum(a, b):
    s = a + b
    t = s - a
    return s, (a - (s - t)) + (b - t)


def _two_prod(a, b):
    # Dekker splitting; exact without fma
    p = a * b
    c = 134217729.0  # 2^27 + 1
    a1 = c * a
    ah = a1 - (a1 - a)
    al = a - ah
    b1 = c * b
    bh = b1 - (b1 - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def recenter(k, x, c1, c2):
    """Evaluate H_k(x; c1) through the c2-based expansion.

    Computes H_k(x; c2) minus the variance-shift correction.  The three terms
    are accumulated with compensated products and sums so the result matches
    hermite(k, x, c1) at rounding level; the naive grouping loses an extra ulp
    to the cancellation between the c2 term and the correction.
    """
    x = np.asarray(x, dtype=np.float64)
    if k == 1:
        return x + 0.0
    if k == 2:
        s, e = _two_sum(hermite(2, x, c2), -(c1 - c2))
        return s + e
    if k == 3:
        one = np.ones_like(x)
        sq, esq = _two_prod(x, x)
        p, ep = _two_prod(sq, x)  # x^3 = p + (ep + esq*x)
        d, ed = _two_sum(c1 * one, -c2 * one)  # c1 - c2 = d + ed exactly
        m, em = _two_prod(3.0 * one, c2 * one)
        q, eq = _two_prod(m, x)  # 3*c2*x = q + (eq + em*x)
        n, en = _two_prod(3.0 * one, d)
        t, et = _two_prod(n, x)  # 3*d*x = t + (et + en*x)
        s1, e1 = _two_sum(p, -q)
        s2, e2 = _two_sum(s1, -t)
        lo = e1 + e2 + (ep + esq * x) - (eq + em * x) - (et + en * x) - 3.0 * ed * x
        return s2 + lo
    raise ValueError(f"unsupported Hermite degree {k}; only 1, 2, 3 are defined")


def _require_alias_free(lattice, power):
    if lattice.max_alias_free_power() < power:
        raise AliasingError(
            f"grid M={lattice.M} cannot form alias-free products of degree {power} "
            f"at L={lattice.L}, N={lattice.N}"
        )


def wick_square(field, c):
    """Pointwise phi^2 - c, re-analyzed on the doubled frequency band."""
    lat = field.lattice
    _require_alias_free(lat, 2)
    grid = field.grid ** 2 - c
    out_lat = FourierLattice(lat.L, 2.0 * lat.N, lat.M, check_grid=False)
    return Field(out_lat, out_lat.analyze(grid), grid=grid)


def wick_cube(field, c):
    """Pointwise phi^3 - 3*c*phi.

    The grid view is exact; the attached coefficients cover only the band that
    the grid resolves without aliasing, which is all downstream integrals need.
    """
    lat = field.lattice
    _require_alias_free(lat, 3)
    grid = field.grid ** 3 - 3.0 * c * field.grid
    K = int(np.floor(lat.L * lat.N + 1e-9))
    safe = min(lat.M - 1 - 3 * K, (lat.M - 1) // 2)
    out_lat = FourierLattice(lat.L, safe / lat.L, lat.M, check_grid=False)
    coeffs = out_lat.analyze(grid)
    return Field(out_lat, coeffs, grid=grid)


def interaction(field, params):
    """Evaluate V(phi) by grid quadrature on the field's own lattice."""
    lat = field.lattice
    _require_alias_free(lat, 3)
    c = params.wick_constant
    g = field.grid
    i1 = lat.integrate(g)
    i2 = lat.integrate(g * g)
    i3 = lat.integrate(g * g * g)
    cubic = params.sigma / 3.0 * (i3 - 3.0 * c * i1)
    quartic = params.A * (i2 - c * lat.L ** 2) ** 2
    return PotentialValue(float(cubic), float(quartic))


_CUBE_CACHE = {}


def cube_lattice(lattice):
    """Minimal alias-free grid for integrating cubic powers of this band."""
    K = int(np.floor(lattice.L * lattice.N + 1e-9))
    M3 = sfft.next_fast_len(max(3 * K + 1, 4), real=True)
    key = (lattice.L, lattice.N, M3)
    if key not in _CUBE_CACHE:
        _CUBE_CACHE[key] = FourierLattice(lattice.L, lattice.N, M3, check_grid=False)
    return _CUBE_CACHE[key]


def wick_integrals_batch(lattice, coeffs, c, dtype=np.float64):
    """(int :phi^2:, int :phi^3:) for a batch of coefficient vectors.

    The quadratic integral is spectral (Parseval, exact); the cubic integral
    is formed on the minimal alias-free grid, optionally in single precision
    for large sweeps.
    """
    coeffs = np.atleast_2d(coeffs)
    L = lattice.L
    i2 = np.sum(np.abs(coeffs) ** 2, axis=1)
    i1 = L * coeffs[:, lattice.is_zero].real[:, 0]
    lat3 = cube_lattice(lattice)
    if dtype == np.float64:
        grid = lat3.synthesize(coeffs)
    else:
        spec = np.zeros(
            (coeffs.shape[0], lat3.M, lat3.M // 2 + 1), dtype=np.complex64
        )
        spec[:, lat3._half_pos[0], lat3._half_pos[1]] = coeffs[
            :, lat3._half_modes
        ].astype(np.complex64)
        grid = sfft.irfft2(spec, s=(lat3.M, lat3.M), workers=-1)
        grid *= np.float32(lat3.M ** 2 / L)
    i3 = (grid.astype(np.float64) ** 3 if dtype != np.float64 else grid ** 3).sum(
        axis=(1, 2)
    ) * lat3.cell_weight
    return i2 - c * L ** 2, i3 - 3.0 * c * i1


def potential_batch(lattice, coeffs, params, dtype=np.float64):
    """Total interaction V for a batch of coefficient vectors."""
    w2, w3 = wick_integrals_batch(lattice, coeffs, params.wick_constant, dtype=dtype)
    return params.sigma / 3.0 * w3 + params.A * w2 ** 2


def drift_decomposition(xi, theta, params):
    """Split V(X + Theta) into the paper-facing pieces (Phi1, Phi2).

    xi is the triple of Wick data (X, :X^2:, :X^3:) at a common cutoff and
    theta a drift field band-limited to the same cutoff.  The identity

        Phi1 + Phi2 + A*(int Theta^2)^2 = V(X + Theta)

    holds exactly on the grid.
    """
    x1, x2, x3 = xi
    lat = x1.lattice
    if theta.lattice.L != lat.L or theta.lattice.M != lat.M:
        raise ValueError("drift lives on a different torus or grid")
    if theta.lattice.N > lat.N + 1e-12:
        raise AliasingError(
            f"drift cutoff {theta.lattice.N} exceeds Wick-data cutoff {lat.N}"
        )
    sigma, A = params.sigma, params.A
    tg = theta.grid
    i_x3 = lat.integrate(x3.grid)
    i_x2t = lat.integrate(x2.grid * tg)
    i_x1t2 = lat.integrate(x1.grid * tg * tg)
    i_t3 = lat.integrate(tg ** 3)
    phi1 = sigma / 3.0 * i_x3 + sigma * i_x2t + sigma * i_x1t2 + sigma / 3.0 * i_t3
    i_x2 = lat.integrate(x2.grid)
    i_x1t = lat.integrate(x1.grid * tg)
    i_t2 = lat.integrate(tg * tg)
    y = i_x2 + 2.0 * i_x1t + i_t2
    phi2 = A * y ** 2 - A * i_t2 ** 2
    return float(phi1), float(phi2)


def counterterm(L, M, epsilon=None):
    """Low-frequency Wick counterterm: the tadpole sum restricted to |lam| <= M.

    With ``epsilon`` set, returns the corrected constant (1 - epsilon) * sum,
    matching the variance of the Gaussian left over by the late-time drift
    that cancels the low modes at time 1 - epsilon: those modes retain only
    the Brownian increment, of variance epsilon per mode.
    """
    base = tadpole(L, M)
    if epsilon is None:
        return base
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return (1.0 - epsilon) * base


def wick_integral_variances(L, N):
    """Exact (Var int :phi^2:, Var int :phi^3:) under the truncated free field.

    Var int :phi^2: = 2 * sum <lam>^-4 and Var int :phi^3: = 6 L^2 int C^3,
    with C the truncated covariance function; the cubic moment is evaluated by
    cubing C on an alias-free grid.
    """
    lat3 = cube_lattice(FourierLattice(L, N, 8, check_grid=False))
    var2 = 2.0 * float(np.sum(lat3.jb2 ** -2.0))
    cov_coeffs = (1.0 / lat3.jb2) / L
    cgrid = lat3.synthesize(cov_coeffs.astype(np.complex128))
    var3 = 6.0 * L ** 2 * float(lat3.integrate(cgrid ** 3))
    return var2, var3
