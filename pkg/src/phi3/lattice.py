"""Fourier lattice geometry and Gaussian free field sampling on dilated tori.

Everything downstream works with real scalar fields on the torus of sidelength
L, stored as Hermitian-symmetric Fourier coefficients over the frequency set
{n/L : n in Z^2, |n/L| <= N}.  The basis convention is

    e_lam(x) = (1/L) exp(2*pi*i lam.x),   lam = n/L,

so that {e_lam} is orthonormal in L^2 of the torus and the massive free field
is  phi_hat(lam) = g_lam / <lam>  with <lam> = (1 + |lam|^2)^(1/2)  and g_lam
independent standard complex Gaussians conditioned on g_{-lam} = conj(g_lam).

Real-space views live on an M x M uniform grid.  M >= 4*ceil(L*N) + 2 keeps
quartic pointwise products of band-limited fields alias-free under the
trapezoidal (equal-weight) quadrature rule, which is exact for trigonometric
polynomials of bandwidth < M.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

FIELD_MAGIC = b"PHI3"
FIELD_VERSION = 1


class GridTooCoarseError(ValueError):
    """Grid size M violates the alias-free requirement M >= 4*ceil(L*N) + 2."""


class CutoffExceedsLatticeError(ValueError):
    """Requested projection cutoff exceeds the lattice cutoff."""


class AliasingError(ValueError):
    """Requested pointwise product cannot be represented alias-free."""


def _fft_workers():
    import os

    try:
        return max(1, int(os.environ.get("PHI3_THREADS", "0"))) if os.environ.get("PHI3_THREADS") else -1
    except ValueError:
        return -1


def min_grid_size(L, N):
    """Smallest admissible grid: 4*ceil(L*N) + 2."""
    return 4 * int(np.ceil(L * N - 1e-12)) + 2 if L * N > 0 else 6


def _mode_table(L, N):
    """Integer vectors n with |n/L| <= N, in canonical (n1, n2) lexicographic order."""
    K = int(np.floor(L * N + 1e-9))
    r2max = (L * N) ** 2 + 1e-9
    n1, n2 = np.meshgrid(np.arange(-K, K + 1), np.arange(-K, K + 1), indexing="ij")
    mask = (n1 ** 2 + n2 ** 2) <= r2max
    n = np.stack([n1[mask], n2[mask]], axis=1).astype(np.int64)
    order = np.lexsort((n[:, 1], n[:, 0]))
    return n[order]


def tadpole(L, N, massless=False):
    """Exact lattice sum (1/L^2) * sum_{|lam|<=N} <lam>^-2.

    This is the variance E[phi_N(x)^2] of the truncated free field, the
    counterterm entering all Wick-ordered powers.  The sum is evaluated
    exactly; its ~ 2*pi*log(N) growth is a test target, not a definition.
    With ``massless`` the zero mode is dropped and <lam> is replaced by |lam|.
    """
    n = _mode_table(L, N)
    r2 = (n[:, 0] ** 2 + n[:, 1] ** 2) / float(L) ** 2
    if massless:
        r2 = r2[r2 > 0]
        return float(np.sum(1.0 / r2) / L ** 2)
    return float(np.sum(1.0 / (1.0 + r2)) / L ** 2)


@dataclass(frozen=True)
class SeedSpec:
    """Reproducible RNG stream: (master_seed, stream_id) -> independent Philox stream."""

    master_seed: int
    stream_id: int = 0

    def generator(self):
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))


class FourierLattice:
    """Mode set of the dilated torus with an M x M real-space grid attached.

    Attributes:
        L, N, M: torus sidelength, frequency cutoff, grid points per dimension.
        n: (m, 2) integer mode vectors in canonical order.
        lam2: |lam|^2 per mode.
        jb2: <lam>^2 = 1 + |lam|^2 per mode.
        pair: index of the negated mode per mode.
        rep: boolean mask selecting the zero mode and one member of each
            conjugate pair (n1 > 0, or n1 == 0 and n2 > 0).
    """

    def __init__(self, L, N, M, check_grid=True):
        if L <= 0:
            raise ValueError("torus sidelength L must be positive")
        if N < 0:
            raise ValueError("cutoff N must be nonnegative")
        if check_grid and M < min_grid_size(L, N):
            raise GridTooCoarseError(
                f"M={M} below alias-free minimum {min_grid_size(L, N)} for L={L}, N={N}"
            )
        self.L = float(L)
        self.N = float(N)
        self.M = int(M)
        self.n = _mode_table(L, N)
        self.mode_count = len(self.n)
        self.lam2 = (self.n[:, 0] ** 2 + self.n[:, 1] ** 2) / self.L ** 2
        self.jb2 = 1.0 + self.lam2
        self._index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.n)}
        self.pair = np.array(
            [self._index[(-int(a), -int(b))] for a, b in self.n], dtype=np.int64
        )
        self.rep = (self.n[:, 0] > 0) | ((self.n[:, 0] == 0) & (self.n[:, 1] >= 0))
        self.is_zero = (self.n[:, 0] == 0) & (self.n[:, 1] == 0)
        # flat positions in the (M, M) spectral array, and in the rfft half plane
        self._pos = (np.mod(self.n[:, 0], M), np.mod(self.n[:, 1], M))
        half = self._pos[1] <= M // 2
        self._half_modes = np.flatnonzero(half)
        self._half_pos = (self._pos[0][half], self._pos[1][half])

    # ---- bookkeeping -----------------------------------------------------

    def index_of(self, n1, n2):
        return self._index.get((int(n1), int(n2)))

    @property
    def cell_weight(self):
        """Quadrature weight of one grid cell, L^2 / M^2."""
        return self.L ** 2 / self.M ** 2

    def max_alias_free_power(self):
        """Largest p with p * max|n| < M, i.e. p-fold products integrate exactly."""
        K = int(np.floor(self.L * self.N + 1e-9))
        return self.M if K == 0 else (self.M - 1) // K

    # ---- synthesis / analysis --------------------------------------------

    def synthesize(self, coeffs):
        """Real-space grid view of Hermitian coefficient vectors.

        coeffs may be (m,) or batched (B, m); returns (M, M) or (B, M, M).
        """
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        squeeze = coeffs.ndim == 1
        c = coeffs[None, :] if squeeze else coeffs
        spec = np.zeros((c.shape[0], self.M, self.M // 2 + 1), dtype=np.complex128)
        spec[:, self._half_pos[0], self._half_pos[1]] = c[:, self._half_modes]
        grid = sfft.irfft2(spec, s=(self.M, self.M), workers=_fft_workers())
        grid *= self.M ** 2 / self.L
        return grid[0] if squeeze else grid

    def analyze(self, grid):
        """Coefficients of a real grid on this lattice's band (inverse of synthesize)."""
        grid = np.asarray(grid, dtype=np.float64)
        squeeze = grid.ndim == 2
        g = grid[None, :, :] if squeeze else grid
        spec = sfft.rfft2(g, workers=_fft_workers()) * (self.L / self.M ** 2)
        kcol = np.minimum(self._pos[1], self.M - self._pos[1])
        out = np.empty((g.shape[0], self.mode_count), dtype=np.complex128)
        in_half = self._pos[1] <= self.M // 2
        out[:, in_half] = spec[:, self._pos[0][in_half], self._pos[1][in_half]]
        rest = ~in_half
        out[:, rest] = np.conj(
            spec[:, np.mod(-self.n[rest, 0], self.M), kcol[rest]]
        )
        return out[0] if squeeze else out

    def integrate(self, grid):
        """Torus integral by the equal-weight grid rule (exact below bandwidth M)."""
        grid = np.asarray(grid)
        return grid.sum(axis=(-2, -1)) * self.cell_weight

    # ---- degree-of-freedom packing ----------------------------------------
    # A real field is equivalent to one standard-normal coordinate per mode:
    # the zero mode itself, and sqrt(2)*<lam>*(Re, Im) of each representative.
    # Under this map the free field is x ~ N(0, I) and ||phi||_H1^2 = |x|^2.

    def dof_pack(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        x = np.empty(coeffs.shape, dtype=np.float64)
        scale = np.sqrt(2.0 * self.jb2)
        rep_pair = self.rep & ~self.is_zero
        x[..., self.is_zero] = coeffs[..., self.is_zero].real
        x[..., rep_pair] = coeffs[..., rep_pair].real * scale[rep_pair]
        x[..., ~self.rep] = coeffs[..., self.pair[~self.rep]].imag * scale[self.pair[~self.rep]]
        return x

    def dof_unpack(self, x):
        x = np.asarray(x, dtype=np.float64)
        coeffs = np.empty(x.shape, dtype=np.complex128)
        scale = np.sqrt(2.0 * self.jb2)
        rep_pair = self.rep & ~self.is_zero
        coeffs[..., self.is_zero] = x[..., self.is_zero]
        coeffs[..., rep_pair] = (
            x[..., rep_pair] + 1j * x[..., self.pair[rep_pair]]
        ) / scale[rep_pair]
        coeffs[..., ~self.rep] = np.conj(coeffs[..., self.pair[~self.rep]])
        return coeffs

    def dof_grad(self, gcoeffs):
        """Pull a field-space gradient (coefficients of dV/dphi) back to dof space."""
        g = np.asarray(gcoeffs, dtype=np.complex128)
        x = np.empty(g.shape, dtype=np.float64)
        scale = np.sqrt(2.0 / self.jb2)
        rep_pair = self.rep & ~self.is_zero
        x[..., self.is_zero] = g[..., self.is_zero].real
        x[..., rep_pair] = g[..., rep_pair].real * scale[rep_pair]
        x[..., ~self.rep] = g[..., self.pair[~self.rep]].imag * scale[self.pair[~self.rep]]
        return x

    def __eq__(self, other):
        return (
            isinstance(other, FourierLattice)
            and (self.L, self.N, self.M) == (other.L, other.N, other.M)
        )

    def __repr__(self):
        return f"FourierLattice(L={self.L}, N={self.N}, M={self.M}, modes={self.mode_count})"


def build_lattice(L, N, M=None):
    """Construct the frequency lattice; M defaults to the smallest fast FFT size."""
    if M is None:
        M = sfft.next_fast_len(min_grid_size(L, N), real=True)
    return FourierLattice(L, N, M)


class Field:
    """Immutable real field: Hermitian coefficients on a lattice plus a lazy grid view."""

    __slots__ = ("lattice", "coeffs", "_grid")

    def __init__(self, lattice, coeffs, grid=None):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.shape != (lattice.mode_count,):
            raise ValueError("coefficient vector does not match lattice mode count")
        herm = coeffs[lattice.pair] - np.conj(coeffs)
        if np.max(np.abs(herm)) > 1e-10 * max(1.0, np.max(np.abs(coeffs))):
            raise ValueError("coefficients violate Hermitian symmetry")
        coeffs = coeffs.copy()
        coeffs[lattice.is_zero] = coeffs[lattice.is_zero].real
        coeffs.setflags(write=False)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "_grid", grid)

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    @property
    def grid(self):
        if self._grid is None:
            object.__setattr__(self, "_grid", self.lattice.synthesize(self.coeffs))
        return self._grid

    def __add__(self, other):
        if other.lattice != self.lattice:
            raise ValueError("lattice mismatch")
        return Field(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other):
        if other.lattice != self.lattice:
            raise ValueError("lattice mismatch")
        return Field(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return Field(self.lattice, self.coeffs * float(scalar))

    __rmul__ = __mul__


def zero_field(lattice):
    return Field(lattice, np.zeros(lattice.mode_count, dtype=np.complex128))


def constant_field(lattice, value):
    c = np.zeros(lattice.mode_count, dtype=np.complex128)
    c[lattice.is_zero] = value * lattice.L
    return Field(lattice, c)


def gff_coeffs(lattice, x, massless=False):
    """Map standard-normal dof draws to free-field coefficients g_lam / <lam>."""
    g = lattice.dof_unpack(x) * np.sqrt(lattice.jb2)  # unit complex Gaussians per mode
    if massless:
        w = np.zeros_like(lattice.lam2)
        nz = lattice.lam2 > 0
        w[nz] = 1.0 / np.sqrt(lattice.lam2[nz])
        return g * w
    return g / np.sqrt(lattice.jb2)


def sample_gff(lattice, seed, massless=False):
    """One sample of the truncated (massive) Gaussian free field.

    The law is (P_N)_# mu_L: independent standard complex Gaussians per
    conjugate pair, real on the zero mode, scaled by <lam>^-1.
    """
    rng = seed.generator() if isinstance(seed, SeedSpec) else seed
    x = rng.standard_normal(lattice.mode_count)
    return Field(lattice, gff_coeffs(lattice, x, massless=massless))


def sample_gff_batch(lattice, rng, count, massless=False):
    """(count, m) coefficient matrix of independent free-field samples."""
    x = rng.standard_normal((count, lattice.mode_count))
    return gff_coeffs(lattice, x, massless=massless)


def project(field, N_prime):
    """Frequency projection P_{N'}: zero all coefficients with |lam| > N'. Idempotent."""
    lat = field.lattice
    if N_prime > lat.N + 1e-12:
        raise CutoffExceedsLatticeError(
            f"projection cutoff {N_prime} exceeds lattice cutoff {lat.N}"
        )
    keep = lat.lam2 <= N_prime ** 2 + 1e-9 / lat.L ** 2
    return Field(lat, np.where(keep, field.coeffs, 0.0))


def sobolev_norm(field, s, homogeneous=False):
    """H^s norm (sum over modes of <lam>^(2s) |phi_hat|^2)^(1/2).

    With ``homogeneous`` the zero mode is dropped and |lam|^(2s) weights are
    used instead (the dotted norm).
    """
    lat = field.lattice
    a2 = np.abs(field.coeffs) ** 2
    if homogeneous:
        nz = lat.lam2 > 0
        return float(np.sqrt(np.sum(lat.lam2[nz] ** s * a2[nz])))
    return float(np.sqrt(np.sum(lat.jb2 ** s * a2)))


def lp_norm(field, p):
    """L^p norm via the grid rule; exact for alias-free integer powers."""
    if p < 1:
        raise ValueError("p must be >= 1")
    lat = field.lattice
    K = int(np.floor(lat.L * lat.N + 1e-9))
    if p * K >= lat.M:
        warnings.warn(
            f"L^{p} quadrature may alias: p*L*N = {p * K} >= M = {lat.M}",
            RuntimeWarning,
        )
    val = lat.integrate(np.abs(field.grid) ** p)
    return float(val ** (1.0 / p))


def gradient_sq_norm(field):
    """||grad phi||_L2^2, computed spectrally (exact)."""
    lat = field.lattice
    return float(np.sum((2.0 * np.pi) ** 2 * lat.lam2 * np.abs(field.coeffs) ** 2))


def rescale_down(field):
    """Map phi on the L-torus to psi(x) = L^-2 phi(x/L) on the L^2-torus.

    Exact index remapping: the integer mode set is unchanged and each
    amplitude picks up a factor 1/L.  Inverse of rescale_up.
    """
    lat = field.lattice
    target = FourierLattice(lat.L ** 2, lat.N / lat.L, lat.M, check_grid=False)
    return Field(target, field.coeffs / lat.L)


def rescale_up(field):
    """Map psi on the L^2-torus back to phi(x) = L^2 psi(L x) on the L-torus."""
    lat = field.lattice
    L = np.sqrt(lat.L)
    target = FourierLattice(L, lat.N * L, lat.M, check_grid=False)
    return Field(target, field.coeffs * L)


def embed_field(field, lattice):
    """Re-express a field on a wider lattice of the same torus (zero padding)."""
    src = field.lattice
    if abs(src.L - lattice.L) > 1e-12:
        raise ValueError("cannot embed across different torus sizes")
    out = np.zeros(lattice.mode_count, dtype=np.complex128)
    for i, (a, b) in enumerate(src.n):
        if np.abs(field.coeffs[i]) == 0.0:
            continue
        j = lattice.index_of(a, b)
        if j is None:
            raise CutoffExceedsLatticeError(
                f"mode {(a, b)} falls outside the target band N={lattice.N}"
            )
        out[j] = field.coeffs[i]
    return Field(lattice, out)


# ---- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<4sIddIQ")
_RECORD_DTYPE = np.dtype([("n1", "<i4"), ("n2", "<i4"), ("re", "<f8"), ("im", "<f8")])


def save_field(field, path):
    """Write the self-describing binary container (magic PHI3, little-endian)."""
    lat = field.lattice
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, lat.L, lat.N, lat.M, lat.mode_count)
        )
        rec = np.empty(lat.mode_count, dtype=_RECORD_DTYPE)
        rec["n1"] = lat.n[:, 0]
        rec["n2"] = lat.n[:, 1]
        rec["re"] = field.coeffs.real
        rec["im"] = field.coeffs.imag
        rec.tofile(fh)


def load_field(path):
    with open(path, "rb") as fh:
        magic, version, L, N, M, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != FIELD_MAGIC:
            raise ValueError("not a PHI3 field container")
        if version != FIELD_VERSION:
            raise ValueError(f"unsupported container version {version}")
        rec = np.fromfile(fh, dtype=_RECORD_DTYPE, count=count)
    lat = FourierLattice(L, N, M, check_grid=False)
    if count != lat.mode_count:
        raise ValueError("mode count mismatch in container")
    coeffs = np.empty(count, dtype=np.complex128)
    idx = np.array([lat.index_of(a, b) for a, b in zip(rec["n1"], rec["n2"])])
    coeffs[idx] = rec["re"] + 1j * rec["im"]
    return Field(lat, coeffs)
