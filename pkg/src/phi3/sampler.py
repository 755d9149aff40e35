"""Samplers for the truncated Gibbs measure and the concentration experiments.

Two exact chains target rho ~ exp(-V) d mu on the truncation:

  independence Metropolis  proposals drawn fresh from the free field; valid
                           because the truncated Gibbs measure is absolutely
                           continuous with respect to it;
  MALA                     one exponential-integrator step of the parabolic
                           Langevin dynamics d phi = -[(1 - Lap) phi +
                           sigma :phi^2: + 4 A (int :phi^2:) phi] dt
                           + sqrt(2) dW, accepted or rejected so detailed
                           balance holds exactly.

Everything runs in degree-of-freedom coordinates, where the free field is a
standard normal vector, the reference log-density is -|x|^2/2, and the
linear part of the dynamics is an exact per-dof Ornstein-Uhlenbeck update.
With the Metropolis correction off, the drift is tamed by 1/(1 + tau |G|)
and the chain is only approximate.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .lattice import Field, SeedSpec, rescale_down, sobolev_norm
from .wick import InteractionParams, interaction


@dataclass
class ChainState:
    field: Field
    potential: object
    step_count: int = 0
    accept_count: int = 0

    @property
    def acceptance_rate(self):
        return self.accept_count / max(1, self.step_count)


@dataclass
class ConcentrationReport:
    L: float
    N: float
    eta: float
    rows: list = dc_field(default_factory=list)  # per-epsilon tail entries
    pairings: list = dc_field(default_factory=list)  # (label, mean |<phi,g>|, stderr)
    ess: float = 0.0
    flags: list = dc_field(default_factory=list)


def _dof_potential(lattice, params, x):
    """V and its dof gradient at dof vector x."""
    from .lattice import gff_coeffs

    coeffs = gff_coeffs(lattice, x)
    grid = lattice.synthesize(coeffs)
    c = params.wick_constant
    s_w = lattice.integrate(grid * grid) - c * lattice.L ** 2
    i3 = lattice.integrate(grid ** 3)
    i1 = lattice.integrate(grid)
    v = params.sigma / 3.0 * (i3 - 3.0 * c * i1) + params.A * s_w ** 2
    g_coeffs = params.sigma * lattice.analyze(grid * grid - c)
    g_coeffs += 4.0 * params.A * s_w * coeffs
    return float(v), lattice.dof_grad(g_coeffs)


# The dof parametrization used by the chains is phi_hat = g / <lam> with the
# dof vector x the standard-normal coordinates of g; the chain state keeps x.


def make_state(lattice, params, x=None):
    from .lattice import gff_coeffs

    if x is None:
        x = np.zeros(lattice.mode_count)
    f = Field(lattice, gff_coeffs(lattice, x))
    return ChainState(field=f, potential=interaction(f, params)), np.asarray(x, float)


def imh_step(lattice, params, x, v, rng):
    """One independence-Metropolis step; returns (x, V, accepted)."""
    x_prop = rng.standard_normal(lattice.mode_count)
    v_prop, _ = _dof_potential(lattice, params, x_prop)
    if np.log(rng.uniform()) < v - v_prop:
        return x_prop, v_prop, True
    return x, v, False


def langevin_step(lattice, params, x, v, grad, tau, rng, mala=True):
    """One exponential-integrator Langevin step, optionally Metropolis-corrected.

    The linear (1 - Lap) part is integrated exactly per dof: decay a_j =
    exp(-<lam>^2 tau) with stationary unit variance; the nonlinear force uses
    the dof gradient of V.  Returns (x, V, grad, accepted).
    """
    d = lattice.jb2
    a = np.exp(-d * tau)
    drift = grad
    if not mala:
        drift = grad / (1.0 + tau * np.sqrt(np.sum(grad ** 2)))
    mean = a * x - (1.0 - a) * drift
    var = 1.0 - a * a
    x_prop = mean + np.sqrt(var) * rng.standard_normal(len(x))
    if not mala:
        v_prop, g_prop = _dof_potential(lattice, params, x_prop)
        return x_prop, v_prop, g_prop, True
    v_prop, g_prop = _dof_potential(lattice, params, x_prop)
    mean_rev = a * x_prop - (1.0 - a) * g_prop
    log_fwd = -0.5 * np.sum((x_prop - mean) ** 2 / var)
    log_rev = -0.5 * np.sum((x - mean_rev) ** 2 / var)
    log_alpha = (
        -0.5 * np.sum(x_prop ** 2) - v_prop + log_rev
        + 0.5 * np.sum(x ** 2) + v - log_fwd
    )
    if np.log(rng.uniform()) < log_alpha:
        return x_prop, v_prop, g_prop, True
    return x, v, grad, False


def run_chain(
    lattice,
    params,
    n_steps,
    seed,
    kind="mala",
    tau=0.25,
    thin=1,
    x0=None,
    massless=False,
    record=None,
):
    """Drive a chain and record observables every ``thin`` steps.

    record maps names to functions of the coefficient vector; the returned
    dict also carries the acceptance rate and the visited dof vectors' V.
    The massless flag freezes the zero mode at 0 (mean-zero ensemble).
    """
    rng = seed.generator() if isinstance(seed, SeedSpec) else seed
    x = np.array(x0, float) if x0 is not None else rng.standard_normal(lattice.mode_count)
    if massless:
        x[lattice.is_zero] = 0.0
    v, grad = _dof_potential(lattice, params, x)
    accept = 0
    kept = {name: [] for name in (record or {})}
    v_trace = []
    from .lattice import gff_coeffs

    for step in range(1, n_steps + 1):
        if kind == "imh":
            x_new, v_new, ok = imh_step(lattice, params, x, v, rng)
            if massless:
                x_new = x_new.copy()
                x_new[lattice.is_zero] = 0.0
                if ok:
                    v_new, _ = _dof_potential(lattice, params, x_new)
            x, v = x_new, v_new
        else:
            if massless:
                grad = grad.copy()
                grad[lattice.is_zero] = 0.0
            x, v, grad, ok = langevin_step(
                lattice, params, x, v, grad, tau, rng, mala=(kind == "mala")
            )
            if massless:
                x[lattice.is_zero] = 0.0
        accept += ok
        if step % thin == 0:
            v_trace.append(v)
            if record:
                coeffs = gff_coeffs(lattice, x, massless=massless)
                for name, fn in record.items():
                    kept[name].append(fn(coeffs))
    out = {name: np.asarray(vals) for name, vals in kept.items()}
    out["V"] = np.asarray(v_trace)
    out["acceptance"] = accept / n_steps
    out["x_final"] = x
    return out


# ---- diagnostics -------------------------------------------------------------


def integrated_autocorrelation(series, max_lag=None):
    """Initial-positive-sequence estimate of the integrated autocorrelation time."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 2 or np.allclose(x, x[0]):
        return np.inf
    x = x - x.mean()
    m = max_lag or n // 3
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:m]
    acf /= acf[0]
    tau = 1.0
    for k in range(1, m - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(tau)


def chain_diagnostics(history):
    """Acceptance rate, autocorrelation time, and effective sample size.

    history: dict with at least a series under 'V' (or any observable array)
    plus 'acceptance'; or a bare array of observable values.
    """
    if isinstance(history, dict):
        series = history.get("V")
        acc = history.get("acceptance", np.nan)
    else:
        series = np.asarray(history)
        acc = np.nan
    if len(series) < 100:
        raise ValueError("need at least 100 recorded steps for diagnostics")
    tau = integrated_autocorrelation(series)
    ess = len(series) / tau if np.isfinite(tau) else 0.0
    return {"acceptance": acc, "iact": tau, "ess": ess, "n": len(series)}


# ---- concentration experiments ------------------------------------------------


def make_bump(lattice, center=None, radius=None, height=1.0):
    """Smooth compactly supported bump, band-limited onto the lattice."""
    L, M = lattice.L, lattice.M
    center = np.array(center if center is not None else (L / 2.0, L / 2.0))
    radius = radius if radius is not None else L / 4.0
    xs = np.arange(M) * L / M
    dx = np.minimum(np.abs(xs - center[0]), L - np.abs(xs - center[0]))
    dy = np.minimum(np.abs(xs - center[1]), L - np.abs(xs - center[1]))
    r2 = (dx[:, None] ** 2 + dy[None, :] ** 2) / radius ** 2
    vals = np.zeros((M, M))
    inside = r2 < 1.0
    vals[inside] = height * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return Field(lattice, lattice.analyze(vals))


def tune_step_size(lattice, params, seed, tau0=0.3, target=0.5, rounds=12, massless=False):
    """Multiplicative step-size adaptation toward the target MALA acceptance."""
    rng = seed.generator() if isinstance(seed, SeedSpec) else seed
    tau = tau0
    x = rng.standard_normal(lattice.mode_count)
    if massless:
        x[lattice.is_zero] = 0.0
    v, grad = _dof_potential(lattice, params, x)
    for _ in range(rounds):
        acc = 0
        for _ in range(120):
            if massless:
                grad[lattice.is_zero] = 0.0
            x, v, grad, ok = langevin_step(lattice, params, x, v, grad, tau, rng)
            if massless:
                x[lattice.is_zero] = 0.0
            acc += ok
        rate = acc / 120.0
        if 0.35 <= rate <= 0.7:
            break
        tau *= float(np.exp(1.2 * (rate - target)))
        tau = min(max(tau, 1e-5), 2.0)
    return tau, x


def _burn_in_steps(lattice, params, seed, kind, tau, massless, base=1000):
    """Adaptive burn-in: at least ``base`` steps and ten autocorrelation times.

    With tau=None and a Langevin kind, the step size is tuned first.
    """
    x0 = None
    if tau is None and kind != "imh":
        tau, x0 = tune_step_size(lattice, params, seed, massless=massless)
    elif tau is None:
        tau = 0.0
    probe = run_chain(
        lattice,
        params,
        base,
        seed,
        kind=kind,
        tau=tau,
        massless=massless,
        x0=x0,
        record={"s": lambda c: float(np.sum(np.abs(c) ** 2))},
    )
    tau_int = integrated_autocorrelation(probe["s"])
    extra = int(10 * tau_int) if np.isfinite(tau_int) else base
    return min(base + extra, 20 * base), probe["x_final"], tau


def estimate_norm_tail(
    lattice,
    eta,
    epsilons,
    params,
    n,
    seed,
    kind="mala",
    tau=None,
    thin=4,
    massless=False,
):
    """Tail probabilities of the rescaled weak norm under the Gibbs chain.

    Records ||L^-2 phi(. / L)||_{H^-eta} on the squared torus for every kept
    sample and returns P(norm >= eps) with binomial standard errors inflated
    by the measured autocorrelation.  Tails smaller than 10/n are reported as
    censored upper bounds.
    """
    L = lattice.L
    nz = lattice.lam2 > 0
    lam2_over = lattice.lam2 / L ** 2

    def rescaled_norm_sq(coeffs):
        a2 = np.abs(coeffs) ** 2 / L ** 2
        if massless:
            w = np.zeros_like(lam2_over)
            w[nz] = lam2_over[nz] ** (-eta)
        else:
            w = (1.0 + lam2_over) ** (-eta)
        return float(np.sum(w * a2))

    burn, x0, tau = _burn_in_steps(lattice, params, seed, kind, tau, massless)
    out = run_chain(
        lattice,
        params,
        n * thin,
        SeedSpec(seed.master_seed, seed.stream_id + 1) if isinstance(seed, SeedSpec) else seed,
        kind=kind,
        tau=tau,
        thin=thin,
        x0=x0,
        massless=massless,
        record={"norm_sq": rescaled_norm_sq},
    )
    norms = np.sqrt(out["norm_sq"])
    tau_int = integrated_autocorrelation(norms)
    ess = len(norms) / tau_int if np.isfinite(tau_int) else 0.0
    infl = np.sqrt(max(tau_int, 1.0))
    report = ConcentrationReport(L=L, N=lattice.N, eta=eta, ess=ess)
    if out["acceptance"] < 0.05:
        report.flags.append("rejection-storm")
    if ess < 100:
        report.flags.append("ess-too-low")
    for eps in epsilons:
        p = float(np.mean(norms >= eps))
        se = np.sqrt(max(p * (1 - p), 1e-300) / len(norms)) * infl
        entry = {"epsilon": eps, "tail_prob": p, "stderr": se, "flags": ""}
        if 0 < p < 10.0 / len(norms):
            entry["tail_prob"] = 10.0 / len(norms)
            entry["flags"] = "censored-upper-bound"
        report.rows.append(entry)
    return report, norms


def pairing_statistics(
    lattice,
    test_fields,
    params,
    n,
    seed,
    kind="mala",
    tau=None,
    thin=4,
    massless=False,
):
    """Mean |<phi, g_j>| per compactly supported test function, with stderr."""
    gbars = [np.conj(g.coeffs) for g in test_fields]

    def recorder(idx):
        gc = gbars[idx]
        return lambda coeffs: float(np.abs(np.sum(coeffs * gc)).real)

    record = {f"pair{j}": recorder(j) for j in range(len(test_fields))}
    burn, x0, tau = _burn_in_steps(lattice, params, seed, kind, tau, massless)
    out = run_chain(
        lattice,
        params,
        n * thin,
        SeedSpec(seed.master_seed, seed.stream_id + 1) if isinstance(seed, SeedSpec) else seed,
        kind=kind,
        tau=tau,
        thin=thin,
        x0=x0,
        massless=massless,
        record=record,
    )
    report = ConcentrationReport(L=lattice.L, N=lattice.N, eta=0.0)
    for j in range(len(test_fields)):
        vals = out[f"pair{j}"]
        tau_int = integrated_autocorrelation(vals)
        infl = np.sqrt(max(tau_int, 1.0))
        report.pairings.append(
            (f"g{j}", float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)) * infl))
        )
    report.ess = len(out[f"pair0"]) / max(integrated_autocorrelation(out["pair0"]), 1.0)
    return report
