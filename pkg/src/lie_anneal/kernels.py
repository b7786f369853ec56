"""Hypoelliptic heat kernels p(t, x): closed forms and Monte-Carlo KDE grids.

All kernels are densities of X_t^e with respect to Haar measure, for the
generator L = (1/2) sum_i V_i^2 (so the flat 1-D kernel has variance t).

Backends
--------
* torus ``closed-form-series``: product of 1-D wrapped kernels.  For t < 1
  the wrapped-Gaussian representation is summed in log space; for t >= 1
  the Fourier series p(t, a) = (1/2pi) sum_n e^{-n^2 t/2} e^{i n a} with 50
  terms (truncation < 1e-15 for t >= 0.1).  Derivatives are analytic.
* free Heisenberg ``gaveau-integral``: partial Fourier transform in the
  center gives a magnetic Mehler factor, yielding

      p(t,(x,y,z)) = 1/(pi^2 t^2) * integral_0^inf (u/sinh u)
                     exp(-(u coth u) r^2 / (2t)) cos(2 u z / t) du,

  evaluated with cached Gauss-Legendre nodes (node count adapted to the
  oscillation frequency 2|z|/t).  Derivatives differentiate the integrand.
* nilmanifold ``gaveau-integral`` + lattice periodization:
  p_M(t, g) = sum_lam p_free(t, lam * g) over the left lattice orbit, with
  the sum truncated by a rigorous distance lower bound (tail < 1e-20).
* ``mc-kde-grid``: binned kernel density estimates of simulated ensembles
  on chart grids; periodic FFT smoothing on tori, a box grid on the free
  Heisenberg cover (summed over lattice images for the nilmanifold), and
  the exponential chart with explicit Haar density on SU(2).  Standard
  errors come from per-block sub-ensembles.
"""

import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import ccdist
from .dynamics import simulate_diffusion
from .errors import EvaluationError, NumericError, ValidationError
from .fields import ScalarField
from .groups import (TWO_PI, GroupModel, HeisenbergGroup, HeisenbergNilmanifold,
                     SU2Group, TorusGroup, make_model)

N_SERIES_TERMS = 50
KDE_BLOCKS = 8


# ---------------------------------------------------------------------------
# 1-D wrapped torus kernel (log-space)
# ---------------------------------------------------------------------------

def _wrap_pi(theta):
    return np.mod(theta + np.pi, TWO_PI) - np.pi


def _torus1_log_density(t, theta):
    theta = _wrap_pi(np.asarray(theta, dtype=float))
    if t < 1.0:
        k = np.arange(-4, 5)
        e = -(theta[..., None] + TWO_PI * k) ** 2 / (2.0 * t)
        m = e.max(axis=-1, keepdims=True)
        return (m[..., 0] + np.log(np.exp(e - m).sum(axis=-1))
                - 0.5 * np.log(TWO_PI * t))
    n = np.arange(1, N_SERIES_TERMS + 1)
    decay = np.exp(-0.5 * n ** 2 * t)
    p = (1.0 + 2.0 * (decay * np.cos(np.multiply.outer(theta, n))).sum(axis=-1)) / TWO_PI
    if np.any(p <= 0):
        raise NumericError("torus series produced a non-positive density",
                           diagnostics={"t": t})
    return np.log(p)


def _torus1_dlog_density(t, theta):
    """d/dtheta log p(t, theta), analytic in both representations."""
    theta = _wrap_pi(np.asarray(theta, dtype=float))
    if t < 1.0:
        k = np.arange(-4, 5)
        shifted = theta[..., None] + TWO_PI * k
        e = -shifted ** 2 / (2.0 * t)
        e -= e.max(axis=-1, keepdims=True)
        w = np.exp(e)
        w /= w.sum(axis=-1, keepdims=True)
        return -(w * shifted).sum(axis=-1) / t
    n = np.arange(1, N_SERIES_TERMS + 1)
    decay = np.exp(-0.5 * n ** 2 * t)
    angle = np.multiply.outer(theta, n)
    p = (1.0 + 2.0 * (decay * np.cos(angle)).sum(axis=-1)) / TWO_PI
    dp = -(2.0 / TWO_PI) * (decay * n * np.sin(angle)).sum(axis=-1)
    return dp / p


# ---------------------------------------------------------------------------
# Gaveau integral (free Heisenberg)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _gl_nodes(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _gaveau_nodes(t, zmax, umax=55.0):
    periods = umax * (2.0 * max(zmax, 1e-12) / t) / TWO_PI
    n = int(max(400, min(24000, 14 * periods)))
    # bucket so the Gauss-Legendre tables get reused
    bucket = 400
    while bucket < n:
        bucket *= 2
    x, w = _gl_nodes(bucket)
    u = 0.5 * (x + 1.0) * umax
    return u, w * 0.5 * umax


def _g_sinh(u):
    """u / sinh(u), stable."""
    out = np.empty_like(u)
    small = u < 1e-6
    out[small] = 1.0 - u[small] ** 2 / 6.0
    ub = u[~small]
    out[~small] = 2.0 * ub * np.exp(-ub) / (1.0 - np.exp(-2.0 * ub))
    return out


def _g_coth(u):
    """u * coth(u), stable."""
    out = np.empty_like(u)
    small = u < 1e-6
    out[small] = 1.0 + u[small] ** 2 / 3.0
    ub = u[~small]
    e = np.exp(-2.0 * ub)
    out[~small] = ub * (1.0 + e) / (1.0 - e)
    return out


def _gaveau_batch(t, coords, deriv=False):
    """Free-Heisenberg kernel (and frame derivatives of p) at (m, 3) points."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    r2 = x * x + y * y
    u, w = _gaveau_nodes(t, np.abs(z).max() if len(z) else 0.0)
    g = _g_sinh(u)
    h = _g_coth(u)
    # (m, nu) arrays; chunk the batch to bound memory
    const = 1.0 / (np.pi ** 2 * t * t)
    m = coords.shape[0]
    p = np.empty(m)
    v1 = np.empty(m) if deriv else None
    v2 = np.empty(m) if deriv else None
    chunk = max(1, int(4e6 / len(u)))
    for s in range(0, m, chunk):
        sl = slice(s, min(s + chunk, m))
        E = np.exp(-np.multiply.outer(r2[sl], h) / (2.0 * t))
        phase = np.multiply.outer(z[sl], 2.0 * u / t)
        C = np.cos(phase)
        base = (w * g) * E
        p[sl] = const * (base * C).sum(axis=1)
        if deriv:
            dpx_fac = -(np.multiply.outer(x[sl], h) / t)
            dpy_fac = -(np.multiply.outer(y[sl], h) / t)
            dpz = const * (base * (-np.sin(phase)) * (2.0 * u / t)).sum(axis=1)
            dpx = const * (base * C * dpx_fac).sum(axis=1)
            dpy = const * (base * C * dpy_fac).sum(axis=1)
            v1[sl] = dpx - 0.5 * y[sl] * dpz
            v2[sl] = dpy + 0.5 * x[sl] * dpz
    if deriv:
        return p, v1, v2
    return p


def _nil_image_values(model, t, coords, deriv=False, tail_log=60.0):
    """Lattice-periodized kernel sum_lam p_free(t, lam*g) on the nilmanifold."""
    coords = np.atleast_2d(model.reduce(coords))
    free = HeisenbergGroup()
    rad_ab = int(np.ceil(np.sqrt(2.0 * t * tail_log))) + 1
    rad_k = int(np.ceil(2.0 * t * tail_log / (4.0 * np.pi))) + 2
    ab = np.arange(-rad_ab, rad_ab + 1)
    kk = np.arange(-rad_k, rad_k + 1)
    A, B, K = np.meshgrid(ab, ab, kk, indexing="ij")
    lam = np.stack([A, B, 0.5 * A * B + K], axis=-1).reshape(-1, 3).astype(float)

    m = coords.shape[0]
    p = np.zeros(m)
    v1 = np.zeros(m) if deriv else None
    v2 = np.zeros(m) if deriv else None
    chunk = max(1, int(2e6 / len(lam)))
    for s in range(0, m, chunk):
        sl = slice(s, min(s + chunk, m))
        img = free.mul(lam[:, None, :], coords[None, sl, :])   # (L, mc, 3)
        L, mc = img.shape[0], img.shape[1]
        flat = img.reshape(-1, 3)
        r = np.hypot(flat[:, 0], flat[:, 1])
        d_lower = np.maximum(r, np.sqrt(4.0 * np.pi * np.abs(flat[:, 2])) - r)
        mask = d_lower ** 2 / (2.0 * t) <= tail_log
        if not np.any(mask):
            continue
        if deriv:
            pv, d1, d2 = _gaveau_batch(t, flat[mask], deriv=True)
        else:
            pv = _gaveau_batch(t, flat[mask])
        acc = np.zeros(L * mc)
        acc[mask] = pv
        p[sl] += acc.reshape(L, mc).sum(axis=0)
        if deriv:
            a1 = np.zeros(L * mc)
            a1[mask] = d1
            v1[sl] += a1.reshape(L, mc).sum(axis=0)
            a2 = np.zeros(L * mc)
            a2[mask] = d2
            v2[sl] += a2.reshape(L, mc).sum(axis=0)
    if deriv:
        return p, v1, v2
    return p


# ---------------------------------------------------------------------------
# kernel model classes
# ---------------------------------------------------------------------------

@dataclass
class KernelModel:
    model: GroupModel
    backend: str
    t_range: tuple
    bandwidth: float = None
    seed: int = None
    meta: dict = field(default_factory=dict)
    _norm_cache: dict = field(default_factory=dict, repr=False)

    # subclass API: _log_batch(t, coords) -> (logp, se); _grad_batch(t, coords) -> (m, d)

    def _check_t(self, t):
        lo, hi = self.t_range
        if not (lo <= t <= hi):
            raise ValidationError(
                f"t={t} outside supported range [{lo}, {hi}] for backend {self.backend}")

    def _prep_points(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        coords = np.atleast_2d(x)
        reduced = self.model.reduce(coords)
        if not np.allclose(reduced, coords, atol=1e-12):
            warnings.warn("evaluation point outside the fundamental domain; reduced",
                          stacklevel=3)
        return reduced, single

    def log_density_batch(self, t, coords):
        self._check_t(t)
        coords = self.model.reduce(np.atleast_2d(np.asarray(coords, dtype=float)))
        return self._log_batch(t, coords)

    def grad_hor_log_batch(self, t, coords):
        self._check_t(t)
        coords = self.model.reduce(np.atleast_2d(np.asarray(coords, dtype=float)))
        return self._grad_batch(t, coords)

    def normalization_certificate(self, t):
        """(estimated total Haar mass, tolerance/standard error)."""
        key = round(float(t), 12)
        if key not in self._norm_cache:
            self._norm_cache[key] = self._normalization(t)
        return self._norm_cache[key]


class TorusThetaKernel(KernelModel):
    def __init__(self, model):
        super().__init__(model=model, backend="closed-form-series",
                         t_range=(1e-4, np.inf))

    def _log_batch(self, t, coords):
        logp = sum(_torus1_log_density(t, coords[:, i]) for i in range(self.model.dim))
        return logp, np.zeros(len(coords))

    def _grad_batch(self, t, coords):
        return np.stack([_torus1_dlog_density(t, coords[:, i])
                         for i in range(self.model.dim)], axis=1)

    def _normalization(self, t):
        return 1.0, 0.0   # each wrapped factor integrates to 1 exactly


class HeisenbergGaveauKernel(KernelModel):
    def __init__(self, model):
        super().__init__(model=model, backend="gaveau-integral",
                         t_range=(5e-3, 20.0))

    def _log_batch(self, t, coords):
        p = _gaveau_batch(t, coords)
        if np.any(p <= 0):
            raise NumericError("Gaveau integral returned a non-positive density",
                               diagnostics={"t": t, "min_p": float(p.min())})
        return np.log(p), np.zeros(len(coords))

    def _grad_batch(self, t, coords):
        p, v1, v2 = _gaveau_batch(t, coords, deriv=True)
        return np.stack([v1 / p, v2 / p], axis=1)

    def _normalization(self, t):
        return None, None   # non-compact; no finite certificate


class NilmanifoldKernel(KernelModel):
    def __init__(self, model):
        super().__init__(model=model, backend="gaveau-integral",
                         t_range=(5e-3, 4.0),
                         meta={"periodization": "left integer lattice"})

    def _log_batch(self, t, coords):
        p = _nil_image_values(self.model, t, coords)
        if np.any(p <= 0):
            raise NumericError("periodized kernel returned a non-positive density",
                               diagnostics={"t": t})
        return np.log(p), np.zeros(len(coords))

    def _grad_batch(self, t, coords):
        p, v1, v2 = _nil_image_values(self.model, t, coords, deriv=True)
        return np.stack([v1 / p, v2 / p], axis=1)

    def _normalization(self, t, n_grid=20):
        axes = (np.arange(n_grid) + 0.5) / n_grid
        X, Y, Z = np.meshgrid(axes, axes, axes, indexing="ij")
        pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
        p = _nil_image_values(self.model, t, pts)
        return float(p.mean()), 2.0 / n_grid ** 2


# ---------------------------------------------------------------------------
# grid KDE kernels
# ---------------------------------------------------------------------------

def _silverman(samples, scale=0.8):
    n, d = samples.shape
    sig = samples.std(axis=0, ddof=1)
    sig = np.where(sig > 1e-12, sig, 1e-2)
    return scale * sig * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


def _block_slices(n, blocks=KDE_BLOCKS):
    edges = np.linspace(0, n, blocks + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class TorusKdeKernel(KernelModel):
    """Periodic binned KDE with wrapped-Gaussian FFT smoothing."""

    def __init__(self, model, t, samples, bandwidth, seed, grid_size=None):
        d = model.dim
        if grid_size is None:
            grid_size = {1: 512, 2: 96, 3: 48}.get(d, 32)
        super().__init__(model=model, backend="mc-kde-grid", t_range=(t, t),
                         bandwidth=float(np.max(bandwidth)), seed=seed,
                         meta={"t": t, "grid_size": grid_size,
                               "n_samples": len(samples)})
        self.grid_size = grid_size
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
        cell = TWO_PI / grid_size
        # wrapped gaussian smoothing kernel per axis, unit mass on the grid
        kernels = []
        for i in range(d):
            offs = _wrap_pi(np.arange(grid_size) * cell)
            k = np.arange(-3, 4)
            vals = np.exp(-(offs[:, None] + TWO_PI * k) ** 2 / (2 * bw[i] ** 2)).sum(1)
            kernels.append(vals / vals.sum())
        # product kernel in FFT order (offset 0 at index 0); circular
        # convolution preserves total mass exactly
        prod = kernels[0]
        for kv in kernels[1:]:
            prod = np.multiply.outer(prod, kv)
        self._kernel_fft = np.fft.fftn(prod)
        cellvol = cell ** d

        def density_grid(sub):
            hist, _ = np.histogramdd(sub, bins=[grid_size] * d,
                                     range=[(0.0, TWO_PI)] * d)
            dens = hist / (len(sub) * cellvol)
            return np.real(np.fft.ifftn(np.fft.fftn(dens) * self._kernel_fft))

        self.p_grid = density_grid(samples)
        self.block_grids = np.stack([density_grid(samples[sl])
                                     for sl in _block_slices(len(samples))])
        self.cell = cell
        self.axes = [np.arange(grid_size) * cell for _ in range(d)]
        self._norm = (float(self.p_grid.sum() * cellvol),
                      float(self.block_grids.sum(axis=tuple(range(1, d + 1))).std(ddof=1)
                            * cellvol / np.sqrt(len(self.block_grids))))

    def _interp(self, grid, coords):
        d = self.model.dim
        idx = coords / self.cell
        base = np.floor(idx).astype(int)
        frac = idx - base
        out = np.zeros(len(coords))
        for corner in range(2 ** d):
            weight = np.ones(len(coords))
            ind = []
            for ax in range(d):
                bit = (corner >> ax) & 1
                weight = weight * (frac[:, ax] if bit else 1.0 - frac[:, ax])
                ind.append((base[:, ax] + bit) % self.grid_size)
            out += weight * grid[tuple(ind)]
        return out

    def _log_batch(self, t, coords):
        p = np.maximum(self._interp(self.p_grid, coords), 1e-300)
        blocks = np.stack([self._interp(g, coords) for g in self.block_grids])
        se_p = blocks.std(axis=0, ddof=1) / np.sqrt(len(blocks))
        return np.log(p), se_p / p

    def _grad_batch(self, t, coords):
        d = self.model.dim
        out = np.empty((len(coords), d))
        logp = np.log(np.maximum(self.p_grid, 1e-300))
        for ax in range(d):
            dgrid = (np.roll(logp, -1, axis=ax) - np.roll(logp, 1, axis=ax)) / (2 * self.cell)
            out[:, ax] = self._interp(dgrid, coords)
        return out

    def _normalization(self, t):
        return self._norm


class _BoxGrid:
    """Shared trilinear box-grid evaluation for non-periodic KDEs."""

    def __init__(self, axes, p_grid, block_grids):
        self.axes = axes
        self.p_grid = p_grid
        self.block_grids = block_grids
        self.lo = np.array([a[0] for a in axes])
        self.cell = np.array([a[1] - a[0] for a in axes])
        self.shape = p_grid.shape

    def inside(self, coords, margin=0.0):
        hi = self.lo + self.cell * (np.array(self.shape) - 1)
        return np.all((coords >= self.lo + margin) & (coords <= hi - margin), axis=1)

    def interp(self, grid, coords):
        idx = (coords - self.lo) / self.cell
        idx = np.clip(idx, 0, np.array(self.shape) - 1.000001)
        base = np.floor(idx).astype(int)
        frac = idx - base
        d = len(self.shape)
        out = np.zeros(len(coords))
        for corner in range(2 ** d):
            weight = np.ones(len(coords))
            ind = []
            for ax in range(d):
                bit = (corner >> ax) & 1
                weight = weight * (frac[:, ax] if bit else 1.0 - frac[:, ax])
                ind.append(np.minimum(base[:, ax] + bit, self.shape[ax] - 1))
            out += weight * grid[tuple(ind)]
        return out


def _box_kde(samples, bandwidth, grid_size, pad=4.0):
    d = samples.shape[1]
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    lo = samples.min(axis=0) - pad * bw
    hi = samples.max(axis=0) + pad * bw
    axes = [np.linspace(lo[i], hi[i], grid_size[i]) for i in range(d)]
    cell = np.array([a[1] - a[0] for a in axes])
    cellvol = float(np.prod(cell))

    def density(sub):
        hist, _ = np.histogramdd(sub, bins=[len(a) for a in axes],
                                 range=[(a[0] - c / 2, a[-1] + c / 2)
                                        for a, c in zip(axes, cell)])
        dens = hist / (len(sub) * cellvol)
        return ndimage.gaussian_filter(dens, sigma=bw / cell, mode="constant")

    p_grid = density(samples)
    blocks = np.stack([density(samples[sl]) for sl in _block_slices(len(samples))])
    return _BoxGrid(axes, p_grid, blocks), cellvol


class NilmanifoldKdeKernel(KernelModel):
    """KDE built on the free cover, lattice-summed at evaluation time."""

    def __init__(self, model, t, free_samples, bandwidth, seed, grid_size=None):
        if grid_size is None:
            grid_size = (64, 64, 64)
        super().__init__(model=model, backend="mc-kde-grid", t_range=(t, t),
                         bandwidth=float(np.max(bandwidth)), seed=seed,
                         meta={"t": t, "grid_size": list(grid_size),
                               "n_samples": len(free_samples), "cover": "free"})
        self.box, cellvol = _box_kde(free_samples, bandwidth, grid_size)
        self._norm = (float(self.box.p_grid.sum() * cellvol),
                      float(self.box.block_grids.sum(axis=(1, 2, 3)).std(ddof=1)
                            * cellvol / np.sqrt(len(self.box.block_grids))))
        free = HeisenbergGroup()
        self._images_of = lambda coords: free.mul(
            model.lattice_elements(3)[:, None, :], coords[None, :, :])

    def _sum_images(self, grid, coords):
        img = self._images_of(coords)
        L, m = img.shape[0], img.shape[1]
        flat = img.reshape(-1, 3)
        ok = self.box.inside(flat)
        vals = np.zeros(L * m)
        if np.any(ok):
            vals[ok] = self.box.interp(grid, flat[ok])
        return vals.reshape(L, m).sum(axis=0)

    def _log_batch(self, t, coords):
        p = np.maximum(self._sum_images(self.box.p_grid, coords), 1e-300)
        blocks = np.stack([self._sum_images(g, coords) for g in self.box.block_grids])
        se = blocks.std(axis=0, ddof=1) / np.sqrt(len(blocks))
        return np.log(p), se / p

    def _grad_batch(self, t, coords):
        h = 0.5 * float(self.box.cell.min())
        out = np.empty((len(coords), 2))
        for i in range(2):
            v = np.zeros((len(coords), 3))
            v[:, i] = h
            plus = np.ascontiguousarray(coords.copy())
            self.model.step_inplace(plus, v, reduce=True)
            minus = np.ascontiguousarray(coords.copy())
            v[:, i] = -h
            self.model.step_inplace(minus, v, reduce=True)
            lp, _ = self._log_batch(t, plus)
            lm, _ = self._log_batch(t, minus)
            out[:, i] = (lp - lm) / (2 * h)
        return out

    def _normalization(self, t):
        return self._norm


class Su2KdeKernel(KernelModel):
    """KDE in the exponential chart v = log q with the explicit Haar density

        rho(v) = sin^2|v| / (2 pi^2 |v|^2)

    (normalized Haar), so p(q) = f_hat(v) / rho(v).  Evaluation is trusted
    for |v| <= pi - 0.35; nearer the antipodal chart singularity the
    product-kernel estimate is biased and an error is raised instead.
    """

    TRUST_MARGIN = 0.35

    def __init__(self, model, t, samples_q, bandwidth, seed, grid_size=None):
        if grid_size is None:
            grid_size = (48, 48, 48)
        super().__init__(model=model, backend="mc-kde-grid", t_range=(t, t),
                         bandwidth=float(np.max(bandwidth)), seed=seed,
                         meta={"t": t, "grid_size": list(grid_size),
                               "chart": "exponential", "n_samples": len(samples_q)})
        v = model.log(samples_q)
        self.box, cellvol = _box_kde(v, bandwidth, grid_size)
        self._norm = (float(self.box.p_grid.sum() * cellvol),
                      float(self.box.block_grids.sum(axis=(1, 2, 3)).std(ddof=1)
                            * cellvol / np.sqrt(len(self.box.block_grids))))

    @staticmethod
    def _haar_density(v):
        psi = np.linalg.norm(v, axis=-1)
        ratio = np.where(psi > 1e-8, np.sin(psi) / np.where(psi > 1e-8, psi, 1.0), 1.0)
        return ratio ** 2 / (2.0 * np.pi ** 2)

    def _chart(self, coords):
        v = self.model.log(coords)
        psi = np.linalg.norm(v, axis=-1)
        if np.any(psi > np.pi - self.TRUST_MARGIN):
            raise NumericError(
                "su2 KDE evaluation outside the trusted chart region "
                f"(|log q| > pi - {self.TRUST_MARGIN})",
                diagnostics={"max_psi": float(psi.max())})
        return v

    def _log_batch(self, t, coords):
        v = self._chart(coords)
        f = np.maximum(self.box.interp(self.box.p_grid, v), 1e-300)
        blocks = np.stack([self.box.interp(g, v) for g in self.box.block_grids])
        se = blocks.std(axis=0, ddof=1) / np.sqrt(len(blocks))
        return np.log(f) - np.log(self._haar_density(v)), se / f

    def _grad_batch(self, t, coords):
        h = 0.5 * float(self.box.cell.min())
        out = np.empty((len(coords), 2))
        for i in range(2):
            v = np.zeros((len(coords), 3))
            v[:, i] = h
            plus = np.ascontiguousarray(coords.copy())
            self.model.step_inplace(plus, v)
            minus = np.ascontiguousarray(coords.copy())
            v[:, i] = -h
            self.model.step_inplace(minus, v)
            lp, _ = self._log_batch(t, plus)
            lm, _ = self._log_batch(t, minus)
            out[:, i] = (lp - lm) / (2 * h)
        return out

    def _normalization(self, t):
        return self._norm


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def closed_form_kernel(model):
    if isinstance(model, TorusGroup):
        return TorusThetaKernel(model)
    if isinstance(model, HeisenbergNilmanifold):
        return NilmanifoldKernel(model)
    if isinstance(model, HeisenbergGroup):
        return HeisenbergGaveauKernel(model)
    raise ValidationError(f"no closed-form kernel for model '{model.kind}' "
                          "(su2 uses the MC-KDE backend)")


def build_mc_kernel(model, t, n_paths, dt, bandwidth=None, seed=0,
                    grid_size=None):
    """Simulate n_paths from the identity and bin/smooth in chart coordinates."""
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if t <= 0:
        raise ValidationError("t must be positive")
    if bandwidth is not None and np.any(np.asarray(bandwidth) <= 0):
        raise ValidationError("bandwidth must be positive")
    meta_warnings = []
    if n_paths < 10_000:
        meta_warnings.append(f"n_paths={n_paths} below the recommended 1e4")
    if dt > t / 100.0:
        meta_warnings.append(f"dt={dt} above the recommended t/100")

    if isinstance(model, TorusGroup):
        ens = simulate_diffusion(model, None, t, dt, n_paths, seed=seed)
        samples = ens.final
        bw = _silverman(samples) if bandwidth is None else bandwidth
        km = TorusKdeKernel(model, t, samples, bw, seed, grid_size)
    elif isinstance(model, HeisenbergNilmanifold):
        ens = simulate_diffusion(model, None, t, dt, n_paths, seed=seed,
                                 reduce_states=False)
        samples = ens.final
        bw = _silverman(samples) if bandwidth is None else bandwidth
        km = NilmanifoldKdeKernel(model, t, samples, bw, seed, grid_size)
    elif isinstance(model, SU2Group):
        ens = simulate_diffusion(model, None, t, dt, n_paths, seed=seed)
        samples = ens.final
        bw = _silverman(model.log(samples)) if bandwidth is None else bandwidth
        km = Su2KdeKernel(model, t, samples, bw, seed, grid_size)
    else:
        raise ValidationError(f"no MC-KDE backend for model '{model.kind}'")
    km.meta["warnings"] = meta_warnings
    km.normalization_certificate(t)
    return km


def log_heat_kernel(km: KernelModel, t, x):
    """log p(t, x); points outside the fundamental domain are reduced."""
    coords, _ = km._prep_points(x)
    val, _ = km.log_density_batch(t, coords)
    return float(val[0])


def log_heat_kernel_se(km: KernelModel, t, x):
    coords, _ = km._prep_points(x)
    val, se = km.log_density_batch(t, coords)
    return float(val[0]), float(se[0])


def grad_hor_log_kernel(km: KernelModel, t, x, rel_se_threshold=0.5):
    """Horizontal gradient coefficients (V_i log p)(t, x)."""
    coords, _ = km._prep_points(x)
    _, se = km.log_density_batch(t, coords)
    if np.any(se > rel_se_threshold):
        warnings.warn(f"KDE relative standard error {float(se.max()):.2f} exceeds "
                      f"{rel_se_threshold}; gradient is noisy", stacklevel=2)
    return km.grad_hor_log_batch(t, coords)[0]


def natural_ou_potential(km: KernelModel, tau):
    """W_tau = -log p(tau, .) as a ScalarField with analytic frame derivatives."""
    km._check_t(tau)

    def fn(coords):
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        val, _ = km.log_density_batch(tau, km.model.reduce(c))
        return -val.reshape(np.asarray(coords).shape[:-1])

    def directional(coords, i):
        c = km.model.reduce(np.atleast_2d(np.asarray(coords, dtype=float)))
        return -km.grad_hor_log_batch(tau, c)[:, i]

    return ScalarField(fn=fn, name=f"natural-ou[{tau}]", directional=directional)


@dataclass
class VaradhanReport:
    point: np.ndarray
    pairs: list                # [(t, -t log p(t, x))]
    limit: float
    limit_stderr: float
    reference: float           # cc_distance(e, x)^2 / 2
    rel_error: float
    truncated: bool = False


def varadhan_diagnostic(model, x, t_list, km_builder):
    """Tabulate -t log p(t, x), extrapolate t -> 0, compare to d_CC^2/2.

    The extrapolation fits  A + B t log t + C t  (the short-time expansion
    of -t log p up to the first two correction orders) by least squares;
    A is the reported limit.
    """
    t_list = list(t_list)
    if any(t2 >= t1 for t1, t2 in zip(t_list, t_list[1:])):
        raise ValidationError("t_list must be strictly decreasing")
    km_cache = {}

    def km_for(t):
        if callable(km_builder) and not isinstance(km_builder, KernelModel):
            if t not in km_cache:
                km_cache[t] = km_builder(t)
            return km_cache[t]
        return km_builder

    x = model.reduce(np.asarray(x, dtype=float))
    pairs = []
    truncated = False
    for t in t_list:
        try:
            val = log_heat_kernel(km_for(t), t, x)
        except (NumericError, ValidationError):
            truncated = True
            continue
        if not np.isfinite(val):
            truncated = True
            continue
        pairs.append((float(t), float(-t * val)))
    if len(pairs) < 3:
        raise NumericError("too few finite kernel evaluations for extrapolation",
                           diagnostics={"pairs": pairs})
    ts = np.array([p[0] for p in pairs])
    us = np.array([p[1] for p in pairs])
    X = np.stack([np.ones_like(ts), ts * np.log(ts), ts], axis=1)
    coef, res, *_ = np.linalg.lstsq(X, us, rcond=None)
    dof = max(len(ts) - 3, 1)
    sigma2 = float(res[0]) / dof if len(res) else 0.0
    cov = np.linalg.inv(X.T @ X) * sigma2
    limit = float(coef[0])
    stderr = float(np.sqrt(max(cov[0, 0], 0.0)))
    reference = 0.5 * model.cc_distance(model.identity(), x) ** 2
    rel = abs(limit - reference) / reference if reference > 0 else abs(limit)
    return VaradhanReport(point=x, pairs=pairs, limit=limit, limit_stderr=stderr,
                          reference=reference, rel_error=rel, truncated=truncated)


# ---------------------------------------------------------------------------
# persistence (grid KDE kernels)
# ---------------------------------------------------------------------------

def save_kernel(km: KernelModel, basepath):
    """JSON header + CSV payload of grid values (grid-KDE backends only)."""
    basepath = str(basepath)
    if isinstance(km, TorusKdeKernel):
        grid, blocks = km.p_grid, km.block_grids
        axes = km.axes
        kind = "torus"
    elif isinstance(km, (NilmanifoldKdeKernel, Su2KdeKernel)):
        grid, blocks = km.box.p_grid, km.box.block_grids
        axes = km.box.axes
        kind = "nilmanifold" if isinstance(km, NilmanifoldKdeKernel) else "su2"
    else:
        raise ValidationError("only mc-kde-grid kernels persist to disk")
    header = {
        "model": km.model.kind,
        "backend": km.backend,
        "kde_kind": kind,
        "t": km.meta["t"],
        "bandwidth": km.bandwidth,
        "grid_shape": list(grid.shape),
        "n_blocks": int(blocks.shape[0]),
        "axes": [[float(a[0]), float(a[-1]), len(a)] for a in axes],
        "seed": km.seed,
        "normalization": list(km.normalization_certificate(km.meta["t"])),
        "meta": {k: v for k, v in km.meta.items() if k != "t"},
    }
    with open(basepath + ".json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    with open(basepath + ".csv", "w") as fh:
        fh.write("value\n")
        for v in grid.ravel(order="C"):
            fh.write(f"{v:.17g}\n")
        for b in range(blocks.shape[0]):
            for v in blocks[b].ravel(order="C"):
                fh.write(f"{v:.17g}\n")


def load_kernel(basepath):
    basepath = str(basepath)
    with open(basepath + ".json") as fh:
        header = json.load(fh)
    model = make_model(header["model"])
    shape = tuple(header["grid_shape"])
    n_blocks = header["n_blocks"]
    data = np.loadtxt(basepath + ".csv", skiprows=1)
    size = int(np.prod(shape))
    grid = data[:size].reshape(shape)
    blocks = data[size:size * (1 + n_blocks)].reshape((n_blocks,) + shape)
    axes = [np.linspace(a0, a1, int(n)) for a0, a1, n in header["axes"]]
    t = header["t"]
    cls = {"torus": TorusKdeKernel,
           "nilmanifold": NilmanifoldKdeKernel,
           "su2": Su2KdeKernel}[header["kde_kind"]]
    km = cls.__new__(cls)
    KernelModel.__init__(km, model=model, backend=header["backend"],
                         t_range=(t, t), bandwidth=header["bandwidth"],
                         seed=header["seed"],
                         meta=dict(header["meta"], t=t))
    if header["kde_kind"] == "torus":
        km.grid_size = shape[0]
        km.cell = axes[0][1] - axes[0][0]
        km.axes = axes
        km.p_grid = grid
        km.block_grids = blocks
        km._norm = tuple(header["normalization"])
    else:
        km.box = _BoxGrid(axes, grid, blocks)
        km._norm = tuple(header["normalization"])
        if header["kde_kind"] == "nilmanifold":
            free = HeisenbergGroup()
            km._images_of = lambda coords: free.mul(
                model.lattice_elements(3)[:, None, :], coords[None, :, :])
    km._norm_cache[round(float(t), 12)] = km._norm
    return km
