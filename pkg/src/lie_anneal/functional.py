"""Carre du champ, local Poincare checks, gradient-commutation constants,
spectral-gap estimators, and the sup-norm perturbation bound.

Estimator conventions
---------------------
The carre du champ of the frame is Gamma(f, g) = sum_i (V_i f)(V_i g); the
Dirichlet form of every generator built here is (1/2) <Gamma(f, f)>.

Monte-Carlo estimates share one driftless ensemble W_t from the identity:
since X_t^x = x * W_t, translating the same ensemble couples all starting
points (common random numbers), which makes the finite-difference
numerator of the gradient-commutation ratio

    Gamma(P_t f, P_t f)(e)  /  P_t(Gamma(f, f))(e)

nearly noise-free.  Standard errors come from path-block resampling.

Bound kinds are explicit: ``rayleigh-upper`` (finite dictionary, hence an
upper bound on the true gap), ``dm-lower-formula`` (a_t = 1/(2 K t)), and
``perturbation-lower`` (a * exp(-2 D)).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .dynamics import heat_ensemble
from .errors import ValidationError
from .fields import ScalarField, TestFunctionDictionary
from .groups import GroupModel

DM_FD_STEP = 1e-2
N_BLOCKS = 16


def carre_du_champ(model: GroupModel, f: ScalarField, g: ScalarField = None, x=None):
    """Gamma(f, g)(x) = sum_i (V_i f)(x) (V_i g)(x)   (g = f when omitted)."""
    if x is None:
        raise ValidationError("carre_du_champ needs an evaluation point")
    coords = np.atleast_2d(np.asarray(x, dtype=float))
    gf = f.grad_hor(model, coords)
    gg = gf if g is None else g.grad_hor(model, coords)
    val = np.einsum("mi,mi->m", gf, gg)
    return float(val[0]) if np.asarray(x).ndim == 1 else val


def _block_means(values, n_blocks=N_BLOCKS):
    return np.array([values[sl].mean()
                     for sl in _block_slices(len(values), n_blocks)])


@dataclass
class PoincareReport:
    lhs: float                 # P_t Gamma(f,f)(e)
    rhs: float                 # 2 a_t (P_t f^2 - (P_t f)^2)(e)
    margin: float              # lhs - rhs
    margin_se: float
    margin_in_se: float        # margin / margin_se
    t: float
    a_t: float
    f_name: str


def local_poincare_check(model, f: ScalarField, t, a_t, n_paths, dt=1e-3,
                         seed=0, x=None):
    """Check P_t(Gamma(f,f))(g) >= 2 a_t (P_t f^2 - (P_t f)^2)(g).

    Both sides are estimated on one coupled ensemble; the margin and its
    standard error come from path-block resampling of the full nonlinear
    statistic.
    """
    if t <= 0 or a_t <= 0:
        raise ValidationError("t and a_t must be positive")
    x = model.identity() if x is None else np.asarray(x, dtype=float)
    W = heat_ensemble(model, t, n_paths, dt, seed=seed)
    states = model.reduce(model.mul(x, W))
    grads = f.grad_hor(model, states)
    gamma_vals = np.einsum("mi,mi->m", grads, grads)
    f_vals = f.evaluate_batch(states)

    def margin_of(sl):
        lhs = gamma_vals[sl].mean()
        var = f_vals[sl].var()
        return lhs - 2.0 * a_t * var

    lhs = float(gamma_vals.mean())
    rhs = float(2.0 * a_t * f_vals.var())
    blocks = np.array([margin_of(sl) for sl in _block_slices(len(f_vals))])
    margin_se = float(blocks.std(ddof=1) / np.sqrt(len(blocks)))
    margin = lhs - rhs
    return PoincareReport(lhs=lhs, rhs=rhs, margin=margin, margin_se=margin_se,
                          margin_in_se=margin / margin_se if margin_se > 0 else np.inf,
                          t=t, a_t=a_t, f_name=f.name)


def _block_slices(n, n_blocks=N_BLOCKS):
    edges = np.linspace(0, n, n_blocks + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


@dataclass
class DmEstimate:
    k_hat: float
    k_hat_se: float
    table: list                # rows: dict(f, t, numerator, denominator, ratio, ratio_se, skipped)
    t_grid: list
    dictionary: str


def estimate_dm_constant(model, dictionary: TestFunctionDictionary, t_grid,
                         n_paths, dt=1e-3, seed=0, h=DM_FD_STEP):
    """Estimate K = sup_{f, t} Gamma(P_t f, P_t f)(e) / P_t(Gamma(f, f))(e).

    The numerator differentiates x -> P_t f(x) at the identity by central
    differences over starting points exp(+-h e_i), all evaluated on the
    same translated ensemble (exact coupling for driftless dynamics).
    """
    t_grid = sorted(t_grid)
    if any(t <= 0 or t > 1 for t in t_grid):
        raise ValidationError("t_grid entries must lie in (0, 1]")
    d = model.horizontal_rank
    e = model.identity()
    starts = []
    for i in range(d):
        for s in (h, -h):
            v = np.zeros(model.dim)
            v[i] = s
            starts.append(model.exp(v))

    rows = []
    k_hat = -np.inf
    k_se = 0.0
    for t in t_grid:
        W = heat_ensemble(model, t, n_paths, dt, seed=seed)
        translated = [model.reduce(model.mul(x0, W)) for x0 in starts]
        center = model.reduce(model.mul(e, W))
        for f in dictionary:
            grads = f.grad_hor(model, center)
            gamma_path = np.einsum("mi,mi->m", grads, grads)
            denom_blocks = _block_means(gamma_path)
            denom = gamma_path.mean()
            # directional derivatives of P_t f at e via coupled differences
            diffs = []
            for i in range(d):
                fp = f.evaluate_batch(translated[2 * i])
                fm = f.evaluate_batch(translated[2 * i + 1])
                diffs.append((fp - fm) / (2.0 * h))
            diffs = np.stack(diffs)                      # (d, m)
            slices = _block_slices(diffs.shape[1])
            num_blocks = np.array([np.sum(diffs[:, sl].mean(axis=1) ** 2)
                                   for sl in slices])
            numerator = float(np.sum(diffs.mean(axis=1) ** 2))
            denom_se = denom_blocks.std(ddof=1) / np.sqrt(len(denom_blocks))
            if denom <= 3.0 * denom_se or denom <= 1e-14:
                rows.append(dict(f=f.name, t=t, numerator=numerator,
                                 denominator=float(denom), ratio=None,
                                 ratio_se=None, skipped=True))
                continue
            ratio_blocks = num_blocks / denom_blocks
            ratio = numerator / denom
            ratio_se = float(ratio_blocks.std(ddof=1) / np.sqrt(len(ratio_blocks)))
            rows.append(dict(f=f.name, t=t, numerator=numerator,
                             denominator=float(denom), ratio=float(ratio),
                             ratio_se=ratio_se, skipped=False))
            if ratio > k_hat:
                k_hat, k_se = float(ratio), ratio_se
    if not np.isfinite(k_hat):
        raise ValidationError(
            "all dictionary/t pairs were skipped (degenerate dictionary?)")
    return DmEstimate(k_hat=k_hat, k_hat_se=k_se, table=rows,
                      t_grid=list(t_grid), dictionary=dictionary.name)


@dataclass
class GapEstimate:
    value: float
    kind: str                  # rayleigh-upper | dm-lower-formula | perturbation-lower
    se: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.value > 0):
            raise ValidationError(f"gap estimate must be positive, got {self.value}")


def gap_from_dm(K, t):
    """Spectral-gap lower bound a_t = 1/(2 K t) from the commutation constant."""
    if K <= 0 or t <= 0:
        raise ValidationError("K and t must be positive")
    return GapEstimate(value=1.0 / (2.0 * K * t), kind="dm-lower-formula",
                       provenance={"K": K, "t": t})


def estimate_spectral_gap(model, measure_sampler, dictionary, n_samples,
                          seed=0, ridge=1e-10):
    """Rayleigh upper bound on the gap: smallest generalized eigenvalue of

        A v = lambda B v,   A_ij = <Gamma(f_i,f_j)/2>,  B_ij = cov(f_i, f_j),

    over span(dictionary) under the sampled measure."""
    rng = np.random.default_rng(seed)
    samples = np.atleast_2d(measure_sampler(rng, n_samples))
    m = len(samples)
    k = len(dictionary)
    vals = np.stack([f.evaluate_batch(samples) for f in dictionary])      # (k, m)
    grads = np.stack([f.grad_hor(model, samples) for f in dictionary])    # (k, m, d)
    centered = vals - vals.mean(axis=1, keepdims=True)
    B = centered @ centered.T / m
    A = 0.5 * np.einsum("kmd,lmd->kl", grads, grads) / m

    max_var = float(np.max(np.diag(B)))
    if max_var < 1e-12:
        raise ValidationError("dictionary has (numerically) zero variance under "
                              "the target measure; gap estimation is ill-posed")
    regularized = False
    tr = np.trace(B)
    if np.linalg.cond(B) > 1e12:
        B = B + ridge * tr * np.eye(k)
        regularized = True

    eigvals = eigh(A, B, eigvals_only=True)
    gap = float(eigvals[0])

    # block resampling over sample blocks for a standard error
    block_vals = []
    for sl in _block_slices(m, 8):
        Bb = centered[:, sl] @ centered[:, sl].T / (sl.stop - sl.start)
        Ab = 0.5 * np.einsum("kmd,lmd->kl", grads[:, sl], grads[:, sl]) / (sl.stop - sl.start)
        if regularized:
            Bb = Bb + ridge * np.trace(Bb) * np.eye(k)
        try:
            block_vals.append(eigh(Ab, Bb, eigvals_only=True)[0])
        except np.linalg.LinAlgError:
            continue
    se = float(np.std(block_vals, ddof=1) / np.sqrt(len(block_vals))) if len(block_vals) > 2 else 0.0
    return GapEstimate(value=gap, kind="rayleigh-upper", se=se,
                       provenance={"n_samples": m, "dictionary": dictionary.name,
                                   "regularized": regularized})


@dataclass
class DEstimate:
    value: float
    argmax_point: np.ndarray
    argmax_eps: float
    table: list                # per-eps rows: dict(eps, sup, argmax)
    n_probe: int

    def __float__(self):
        return self.value


def estimate_D(model, U: ScalarField, x0, eps_grid, km_builder, n_probe,
               seed=0, grid_probe=None):
    """sup over probes and eps of |U(x) + eps^2 log p(eps^2, x0, x)|.

    ``km_builder``: KernelModel (or callable t -> KernelModel) used for
    p(t, .).  The law of X_t^{x0} has density p(t, x0^{-1} x) w.r.t. Haar
    (left translation; all target models are compact, hence unimodular).
    The probe set is a Haar sample plus an optional deterministic chart
    grid; the sup is only approximated, so refinement stability matters
    more than any single value.
    """
    from .kernels import KernelModel
    rng = np.random.default_rng(seed)
    x0 = model.reduce(np.asarray(x0, dtype=float))
    probes = model.haar_sample(rng, n_probe)
    if grid_probe is not None:
        probes = np.vstack([probes, grid_probe])
    x0_inv = model.inverse(x0)
    rel = model.reduce(model.mul(x0_inv, probes))
    u_vals = U.evaluate_batch(probes)

    def km_for(t):
        if isinstance(km_builder, KernelModel):
            return km_builder
        return km_builder(t)

    best = -np.inf
    best_point = None
    best_eps = None
    table = []
    for eps in eps_grid:
        if eps <= 0:
            raise ValidationError("eps values must be positive")
        t = eps * eps
        km = km_for(t)
        logp, _ = km.log_density_batch(t, rel)
        vals = np.abs(u_vals + t * logp)
        j = int(np.argmax(vals))
        table.append(dict(eps=float(eps), sup=float(vals[j]),
                          argmax=[float(c) for c in probes[j]]))
        if vals[j] > best:
            best = float(vals[j])
            best_point = probes[j].copy()
            best_eps = float(eps)
    return DEstimate(value=best, argmax_point=best_point, argmax_eps=best_eps,
                     table=table, n_probe=len(probes))


def perturbed_gap_bound(a_eps, D_eps):
    """Gap lower bound a * exp(-2 D) for a potential within sup-distance D
    of the log-kernel potential."""
    if a_eps <= 0:
        raise ValidationError("a_eps must be positive")
    if D_eps < 0:
        raise ValidationError("D_eps must be >= 0")
    return GapEstimate(value=a_eps * np.exp(-2.0 * D_eps), kind="perturbation-lower",
                       provenance={"a_eps": a_eps, "D_eps": D_eps})
