"""Cooling schedules, Gibbs sampling, the L^2-distance envelope ODE,
benchmark potentials, and the concentration diagnostics.

Schedule construction pins the existence-level constants to the smallest
values satisfying both requirements:

    c^2 = max(2 D, 3 N K (1 + margin)^2),    log R = c^2   (so eps(0) = 1),

giving eps(t) = c / sqrt(log(R + t)), beta(t) = 1/eps(t)^2 and
beta'(t) = 1 / (c^2 (R + t)) exactly.

The envelope ODE integrates

    u' = -u/(K(R+t)) + N u/(c^2 (R+t)) + 2 N sqrt(u)/(c^2 (R+t))

as an equality; substituting s = log(R+t) makes the right-hand side
autonomous, so the integration reaches t = 1e8 in a few hundred thousand
fourth-order steps.  With N = 0 the exact solution is
u0 ((R/(R+t))^(1/K)).

The concentration report bins states by potential level (quantile bins of
the Gibbs sample with forced edges at the requested sublevel thresholds),
estimates the L^2 norm of the annealing-law density ratio from the binned
masses, and checks P(Z_t in A_delta) <= M sqrt(mu_eps(t)(A_delta)) at
every checkpoint; by Cauchy-Schwarz the binned inequality is exact up to
sampling noise whenever A_delta is a union of bins.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .dynamics import chunk_generator, simulate_annealing
from .errors import ValidationError
from .fields import ScalarField, nilmanifold_theta_section, theta_section_peak
from .groups import (TWO_PI, GroupModel, HeisenbergNilmanifold, SU2Group,
                     TorusGroup)


@dataclass
class CoolingSchedule:
    c: float
    R: float
    D: float
    K: float
    N: float
    flags: dict = field(default_factory=dict)

    def eps(self, t):
        return self.c / np.sqrt(np.log(self.R + t))

    def beta(self, t):
        return np.log(self.R + t) / (self.c * self.c)

    def beta_prime(self, t):
        return 1.0 / (self.c * self.c * (self.R + t))

    @property
    def admissible(self):
        return bool(self.R > 1.0 and self.eps(0.0) <= 1.0 + 1e-12)

    def constants(self):
        return {"c": self.c, "R": self.R, "D": self.D, "K": self.K, "N": self.N,
                "flags": dict(self.flags)}


def make_schedule(D, K, N, margin=0.05, R_min=None):
    """Smallest admissible schedule constants for given (D, K, N)."""
    if D <= 0 or K <= 0 or N < 0:
        raise ValidationError("need D > 0, K > 0, N >= 0")
    c_sq = max(2.0 * D, 3.0 * N * K * (1.0 + margin) ** 2)
    c = math.sqrt(c_sq)
    R = math.exp(c_sq)
    if R_min is not None:
        R = max(R, float(R_min))
    flags = {
        "c_sq_eq_2D": bool(abs(c_sq - 2.0 * D) < 1e-12),
        "eps0_le_1": bool(c / math.sqrt(math.log(R)) <= 1.0 + 1e-12),
        "bounded_c_sq_gt_3NK": bool(c_sq > 3.0 * N * K or N == 0),
    }
    return CoolingSchedule(c=c, R=R, D=float(D), K=float(K), N=float(N), flags=flags)


# ---------------------------------------------------------------------------
# Gibbs sampling
# ---------------------------------------------------------------------------

@dataclass
class GibbsResult:
    samples: np.ndarray
    acceptance_rate: float
    proposal_scale: float
    ess: float
    n_chains: int
    warnings: list = field(default_factory=list)


def _ess_from_series(series):
    """Effective sample size via the initial-positive-sequence estimator."""
    x = series - series.mean()
    n = len(x)
    if n < 8 or x.std() == 0:
        return float(n)
    acf = np.correlate(x, x, mode="full")[n - 1:] / (np.arange(n, 0, -1) * x.var())
    s = 1.0
    for k in range(1, min(n // 2, 2000)):
        if acf[k] <= 0:
            break
        s += 2.0 * acf[k]
    return float(n / max(s, 1.0))


def gibbs_sampler(model: GroupModel, U: ScalarField, eps, n_samples,
                  burn_in=2000, proposal_scale=None, seed=0, n_chains=64,
                  thin=1):
    """Metropolis chain targeting exp(-U/eps^2) w.r.t. Haar.

    Proposals g' = g * exp(sigma sum_a xi_a e_a) over the full algebra
    basis are symmetric on these unimodular groups (the exp-chart Jacobian
    is even), so plain Metropolis acceptance is correct.  The proposal
    scale is tuned toward 30-50% acceptance during burn-in unless given.
    """
    if not model.compact:
        raise ValidationError("Gibbs sampling requires a compact model")
    if eps <= 0:
        raise ValidationError("eps must be positive")
    gen = chunk_generator(seed, 10_007)
    n_chains = min(n_chains, max(1, n_samples))
    beta = 1.0 / (eps * eps)
    sigma = float(proposal_scale) if proposal_scale else min(1.0, eps)
    tune = proposal_scale is None

    coords = np.ascontiguousarray(model.haar_sample(gen, n_chains))
    u_vals = U.evaluate_batch(coords)

    def sweep(coords, u_vals, sigma):
        prop = np.ascontiguousarray(coords.copy())
        xi = gen.standard_normal((n_chains, model.dim)) * sigma
        model.step_inplace(prop, xi)
        u_new = U.evaluate_batch(prop)
        log_alpha = -beta * (u_new - u_vals)
        accept = np.log(gen.uniform(size=n_chains)) < log_alpha
        coords[accept] = prop[accept]
        u_vals[accept] = u_new[accept]
        return accept.mean()

    # burn-in with Robbins-Monro tuning toward 40% acceptance
    acc_window = []
    for it in range(burn_in):
        acc = sweep(coords, u_vals, sigma)
        acc_window.append(acc)
        if tune and (it + 1) % 25 == 0:
            recent = np.mean(acc_window[-25:])
            sigma *= math.exp(0.5 * (recent - 0.4))
            sigma = min(max(sigma, 1e-3), 2.0)

    n_sweeps = (n_samples + n_chains - 1) // n_chains * thin
    out = np.empty((n_sweeps // thin, n_chains, model.repr_dim))
    acc_total = 0.0
    u_trace = np.empty((n_sweeps, n_chains))
    kept = 0
    for it in range(n_sweeps):
        acc_total += sweep(coords, u_vals, sigma)
        u_trace[it] = u_vals
        if (it + 1) % thin == 0:
            out[kept] = coords
            kept += 1
    samples = out[:kept].reshape(-1, model.repr_dim)[:n_samples]
    acc_rate = acc_total / n_sweeps
    ess = sum(_ess_from_series(u_trace[:, c]) for c in range(n_chains))

    warnings_ = []
    if acc_rate < 0.01 or acc_rate > 0.99:
        warnings_.append(
            f"acceptance rate {acc_rate:.3f} is extreme; retune proposal_scale")
    return GibbsResult(samples=samples, acceptance_rate=float(acc_rate),
                       proposal_scale=sigma, ess=float(ess), n_chains=n_chains,
                       warnings=warnings_)


def sublevel_mass(model, samples, U: ScalarField, delta, u0=None, grid_n=4096,
                  seed=0):
    """Fraction of samples in A_delta = {U >= U_0 + delta}, binomial SE.

    U_0 = inf U is approximated by the minimum over the samples plus a
    Haar-sampled refinement scan of size ``grid_n``.
    """
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    samples = np.atleast_2d(samples)
    if len(samples) == 0:
        raise ValidationError("empty sample set")
    u_vals = U.evaluate_batch(samples)
    if u0 is None:
        scan = model.haar_sample(np.random.default_rng(seed), grid_n)
        u0 = min(float(u_vals.min()), float(U.evaluate_batch(scan).min()))
    mass = float(np.mean(u_vals >= u0 + delta))
    se = math.sqrt(max(mass * (1.0 - mass), 1.0 / len(samples)) / len(samples))
    return mass, se


# ---------------------------------------------------------------------------
# envelope ODE
# ---------------------------------------------------------------------------

@dataclass
class UBoundResult:
    t: np.ndarray
    u: np.ndarray
    sup: float
    verdict: str               # "bounded" | "growing"
    clipped: bool = False


def u_bound_integrate(u0, schedule: CoolingSchedule, t_end, dt=1e-3):
    """Integrate the envelope ODE to t_end; ``dt`` is the step in
    s = log(R + t) (log-spaced in t).

    Returns the trajectory, its sup, and a bounded/growing verdict:
    bounded means the final decile is non-increasing (or has settled at
    the fixed point of the autonomous right-hand side).
    """
    if u0 < 0:
        raise ValidationError("u0 must be >= 0")
    K, N, c = schedule.K, schedule.N, schedule.c
    c2 = c * c
    alpha = 1.0 / K - N / c2
    gamma = 2.0 * N / c2

    def rhs(u):
        return -alpha * u + gamma * math.sqrt(max(u, 0.0))

    s0 = math.log(schedule.R)
    s1 = math.log(schedule.R + t_end)
    n_steps = max(16, int(math.ceil((s1 - s0) / dt)))
    ds = (s1 - s0) / n_steps
    store_every = max(1, n_steps // 4096)
    ts, us = [0.0], [float(u0)]
    u = float(u0)
    clipped = False
    s = s0
    for k in range(n_steps):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * ds * k1)
        k3 = rhs(u + 0.5 * ds * k2)
        k4 = rhs(u + ds * k3)
        u = u + ds / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if u < 0.0:
            u = 0.0
            clipped = True
        s += ds
        if (k + 1) % store_every == 0 or k == n_steps - 1:
            ts.append(math.exp(s) - schedule.R)
            us.append(u)
    t_arr = np.array(ts)
    u_arr = np.array(us)
    sup = float(u_arr.max())

    tail = u_arr[int(0.9 * len(u_arr)):]
    non_increasing = bool(np.all(np.diff(tail) <= 1e-12 * max(1.0, sup)))
    verdict = "growing"
    if non_increasing:
        verdict = "bounded"
    elif alpha > 0:
        u_fix = (gamma / alpha) ** 2
        if abs(u_arr[-1] - u_fix) <= 1e-3 * max(1.0, u_fix):
            verdict = "bounded"
    return UBoundResult(t=t_arr, u=u_arr, sup=sup, verdict=verdict, clipped=clipped)


# ---------------------------------------------------------------------------
# benchmark potentials
# ---------------------------------------------------------------------------

def make_benchmark_potential(model: GroupModel, x0, mode="smooth", amplitude=1.0):
    """Well potential centered at x0.

    ``exact``  : U(x) = d_CC(x0, x)^2 / 2 (non-smooth at the cut locus;
                 flagged; derivatives fall back to finite differences).
    ``smooth`` : a smooth single-minimum surrogate built from characters
                 (cosine wells on tori, the theta section with a central
                 character on the nilmanifold, 1 - Re q on SU(2)); its
                 sup-norm distance to d_CC^2/2 is reported by
                 :func:`potential_distance_band`.
    """
    x0 = model.reduce(np.asarray(x0, dtype=float))
    if mode == "exact":
        def fn(coords):
            c = np.atleast_2d(np.asarray(coords, dtype=float))
            vals = np.array([0.5 * model.cc_distance(x0, p) ** 2 for p in c])
            return vals.reshape(np.asarray(coords).shape[:-1])
        return ScalarField(fn=fn, name="benchmark-exact", smooth=False,
                           meta={"x0": x0.tolist(), "mode": "exact"})
    if mode != "smooth":
        raise ValidationError(f"unknown benchmark potential mode '{mode}'")

    if isinstance(model, TorusGroup):
        amp = float(amplitude)

        def fn(coords):
            c = np.asarray(coords, dtype=float)
            return amp * (1.0 - np.cos(c - x0)).sum(axis=-1)

        def directional(coords, i):
            c = np.asarray(coords, dtype=float)
            return amp * np.sin(c[..., i] - x0[i])

        return ScalarField(fn=fn, name="benchmark-smooth", directional=directional,
                           meta={"x0": x0.tolist(), "mode": "smooth",
                                 "range": 2.0 * amp * model.dim})

    if isinstance(model, HeisenbergNilmanifold):
        # theta section translated so the unique maximum of Re psi sits at x0
        re_psi = nilmanifold_theta_section(part="re")
        peak = theta_section_peak()
        amp = float(amplitude)
        x0_inv = model.inverse(x0)
        free_inv = np.asarray(
            [-x0[0], -x0[1], -x0[2]])  # inverse in free coordinates

        def shift(coords):
            c = np.atleast_2d(np.asarray(coords, dtype=float))
            # left-translate: psi(x0^{-1} x) has its maximum at x = x0 and
            # stays lattice-invariant because psi is
            from .groups import HeisenbergGroup
            return HeisenbergGroup().mul(free_inv[None, :], c)

        def fn(coords):
            vals = re_psi.evaluate_batch(shift(coords))
            out = amp * (1.0 - vals / peak)
            return out.reshape(np.asarray(coords).shape[:-1])

        def directional(coords, i):
            # V_i is left-invariant: (V_i (f o L_a))(x) = (V_i f)(a x)
            return -(amp / peak) * re_psi.directional(shift(coords), i)

        return ScalarField(fn=fn, name="benchmark-smooth", directional=directional,
                           meta={"x0": x0.tolist(), "mode": "smooth",
                                 "range": 2.0 * amp})

    if isinstance(model, SU2Group):
        amp = float(amplitude)
        x0_inv = model.inverse(x0)

        def fn(coords):
            c = np.atleast_2d(np.asarray(coords, dtype=float))
            rel = _core.su2_mul(x0_inv[None, :], c)
            out = amp * (1.0 - rel[..., 0])
            return out.reshape(np.asarray(coords).shape[:-1])

        def directional(coords, i):
            c = np.atleast_2d(np.asarray(coords, dtype=float))
            rel = _core.su2_mul(x0_inv[None, :], c)
            basis = np.zeros(4)
            basis[1 + i] = 1.0
            tangent = _core.su2_mul(rel, basis[None, :])
            return -amp * tangent[..., 0]

        return ScalarField(fn=fn, name="benchmark-smooth", directional=directional,
                           meta={"x0": x0.tolist(), "mode": "smooth",
                                 "range": 2.0 * amp})

    raise ValidationError(f"no benchmark potential for model '{model.kind}'")


def potential_distance_band(model, U: ScalarField, x0, n_scan=2000, seed=0):
    """Estimated sup-norm distance sup |U - d_CC(x0, .)^2 / 2| by sampling."""
    rng = np.random.default_rng(seed)
    pts = model.haar_sample(rng, n_scan)
    u_vals = U.evaluate_batch(pts)
    d_vals = np.array([0.5 * model.cc_distance(x0, p) ** 2 for p in pts])
    return float(np.abs(u_vals - d_vals).max())


def potential_range(model, U: ScalarField, n_scan=20000, seed=0):
    """Estimate N = max U - min U by Haar scanning."""
    rng = np.random.default_rng(seed)
    pts = model.haar_sample(rng, n_scan)
    vals = U.evaluate_batch(pts)
    return float(vals.max() - vals.min()), float(vals.min())


# ---------------------------------------------------------------------------
# concentration report
# ---------------------------------------------------------------------------

@dataclass
class ConcentrationReport:
    checkpoints: list
    delta_grid: list
    empirical: np.ndarray       # (n_t, n_delta) P(Z_t in A_delta)
    empirical_se: np.ndarray
    gibbs_mass: np.ndarray      # (n_t, n_delta) mu_eps(t)(A_delta)
    gibbs_mass_se: np.ndarray
    m_hat: float                # sup_t of the binned L2 density-ratio norm
    m_hat_per_t: list
    violations: list            # rows (t, delta, empirical, bound, slack_se)
    u0: float
    probe_means: list           # (t, mean f(Z_t), se)
    probe_target: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for i, t in enumerate(self.checkpoints):
            for j, dl in enumerate(self.delta_grid):
                bound = self.m_hat * math.sqrt(max(self.gibbs_mass[i, j], 0.0))
                out.append(dict(t=t, delta=dl,
                                empirical=float(self.empirical[i, j]),
                                empirical_se=float(self.empirical_se[i, j]),
                                gibbs_mass=float(self.gibbs_mass[i, j]),
                                gibbs_mass_se=float(self.gibbs_mass_se[i, j]),
                                bound=float(bound),
                                margin=float(bound - self.empirical[i, j])))
        return out


def concentration_report(model, U, schedule, z0, checkpoints, delta_grid,
                         n_paths, n_gibbs, seed=0, dt=None, probe=None,
                         burn_in=3000):
    """Full concentration pipeline at the given checkpoints.

    Runs the annealing ensemble once, draws a Gibbs sample of
    mu_eps(t) at each checkpoint, bins states by potential level
    (Gibbs-quantile bins with forced edges at U0 + delta), estimates
    M = sup_t ||dLaw(Z_t)/dmu_eps(t)||_{L^2(mu_eps(t))} from the binned
    masses, and flags every (t, delta) with
    empirical > M sqrt(mass) + 3 SE.
    """
    checkpoints = sorted(checkpoints)
    ens = simulate_annealing(model, U, schedule, z0, t_end=checkpoints[-1],
                             dt=dt, n_paths=n_paths, seed=seed,
                             save_times=checkpoints)
    rng = np.random.default_rng(seed + 1)
    scan = model.haar_sample(rng, 8192)
    u0 = float(U.evaluate_batch(scan).min())

    probe = probe if probe is not None else U
    if U.meta.get("x0") is not None:
        x_min = np.asarray(U.meta["x0"], dtype=float)
    else:
        x_min = scan[int(np.argmin(U.evaluate_batch(scan)))]
    probe_target = float(probe.evaluate(x_min))

    n_t, n_d = len(checkpoints), len(delta_grid)
    empirical = np.zeros((n_t, n_d))
    empirical_se = np.zeros((n_t, n_d))
    gibbs_mass = np.zeros((n_t, n_d))
    gibbs_mass_se = np.zeros((n_t, n_d))
    m_per_t = []
    violations = []
    probe_means = []

    for i, t in enumerate(checkpoints):
        eps_t = float(schedule.eps(t))
        z_states = ens.state_at(t)
        gibbs = gibbs_sampler(model, U, eps_t, n_gibbs, burn_in=burn_in,
                              seed=seed + 17 * (i + 1))
        uz = U.evaluate_batch(z_states)
        ug = U.evaluate_batch(gibbs.samples)
        u0 = min(u0, float(uz.min()), float(ug.min()))

        pv = probe.evaluate_batch(z_states)
        probe_means.append((t, float(pv.mean()),
                            float(pv.std(ddof=1) / math.sqrt(len(pv)))))

        # potential-level bins: Gibbs quantiles + forced edges at U0 + delta
        n_bins = max(4, min(20, n_gibbs // 50))
        edges = np.quantile(ug, np.linspace(0.0, 1.0, n_bins + 1))
        edges = np.unique(np.concatenate(
            [edges, [u0 + dl for dl in delta_grid]]))
        edges[0] = min(edges[0], u0) - 1e-12
        edges[-1] = max(edges[-1], max(uz.max(), ug.max())) + 1e-12
        pz_bin, _ = np.histogram(uz, bins=edges)
        pg_bin, _ = np.histogram(ug, bins=edges)
        pz_bin = pz_bin / len(uz)
        pg_bin = pg_bin / len(ug)
        pos = pg_bin > 0
        if np.any(pz_bin[~pos] > 0):
            m_sq = np.inf
        else:
            m_sq = float(np.sum(pz_bin[pos] ** 2 / pg_bin[pos]))
        m_per_t.append(math.sqrt(m_sq))

        for j, dl in enumerate(delta_grid):
            thr = u0 + dl
            emp = float(np.mean(uz >= thr))
            emp_se = math.sqrt(max(emp * (1 - emp), 1.0 / len(uz)) / len(uz))
            gm = float(np.mean(ug >= thr))
            gm_se = math.sqrt(max(gm * (1 - gm), 1.0 / len(ug)) / len(ug))
            empirical[i, j], empirical_se[i, j] = emp, emp_se
            gibbs_mass[i, j], gibbs_mass_se[i, j] = gm, gm_se

    m_hat = float(max(m_per_t))
    for i, t in enumerate(checkpoints):
        for j, dl in enumerate(delta_grid):
            gm = gibbs_mass[i, j]
            bound = m_hat * math.sqrt(gm)
            # first-order propagation of the gibbs-mass error into the bound
            bound_se = (m_hat * gibbs_mass_se[i, j] / (2.0 * math.sqrt(gm))
                        if gm > 0 else 0.0)
            slack = 3.0 * (empirical_se[i, j] + bound_se)
            if empirical[i, j] > bound + slack:
                violations.append(dict(t=checkpoints[i], delta=dl,
                                       empirical=float(empirical[i, j]),
                                       bound=float(bound), slack=float(slack)))

    return ConcentrationReport(
        checkpoints=list(checkpoints), delta_grid=list(delta_grid),
        empirical=empirical, empirical_se=empirical_se,
        gibbs_mass=gibbs_mass, gibbs_mass_se=gibbs_mass_se,
        m_hat=m_hat, m_hat_per_t=m_per_t, violations=violations, u0=u0,
        probe_means=probe_means, probe_target=probe_target,
        meta={"schedule": schedule.constants(), "n_paths": n_paths,
              "n_gibbs": n_gibbs, "seed": seed})
