"""Carnot-Caratheodory distances for the shipped models.

The CC distance is the infimum of lengths of horizontal curves (tangent to
span(V_1..V_d), with V_1..V_d orthonormal) joining two points.  By
left-invariance of the frames, d(x, y) = d(e, x^{-1} y), so only distances
from the identity are implemented per model.

* torus: the horizontal distribution is the whole tangent space and the
  metric is flat, so d is the wrapped Euclidean distance.
* heisenberg: minimizing geodesics project to circular arcs; writing theta
  for the total turning angle of the arc, the endpoint (r, z) satisfies
      z / r^2 = (theta - sin theta) / (8 sin^2(theta/2)),
  which is strictly increasing on (0, 2*pi), and then
      d = r * theta / (2 sin(theta/2)).
  The angle is found by bisection; r = 0 gives the vertical distance
  sqrt(4*pi*|z|).
* heisenberg-nilmanifold: quotient metric, d([x],[y]) = min over lattice
  elements lam of d_free(x, lam*y).
* su2: normal geodesics from the identity form the two-parameter family
      g(T; phi, mu) = exp(T*(cos phi * i + sin phi * j + mu * k)) * exp(-T*mu*k),
  whose endpoint invariants (w, |xy|, z) have the closed form used below;
  the distance is the smallest T for which some (mu, phi) hits the target,
  found by a dense (T, mu) residual grid plus Gauss-Newton refinement.
"""

import numpy as np
from scipy.optimize import least_squares

from .errors import NumericError
from .groups import (TWO_PI, HeisenbergGroup, HeisenbergNilmanifold, SU2Group,
                     TorusGroup)

_BISECT_ITERS = 90


def cc_distance(model, x, y):
    """Distance between two elements of ``model`` (scalars only)."""
    x = model.reduce(np.asarray(x, dtype=float))
    y = model.reduce(np.asarray(y, dtype=float))
    if isinstance(model, TorusGroup):
        diff = np.abs(np.mod(x - y, TWO_PI))
        diff = np.minimum(diff, TWO_PI - diff)
        return float(np.sqrt(np.sum(diff * diff)))
    if isinstance(model, HeisenbergNilmanifold):
        return nilmanifold_distance(model, x, y)
    if isinstance(model, HeisenbergGroup):
        rel = model.mul(model.inverse(x), y)
        return float(heisenberg_distance_from_identity(rel[None, :])[0])
    if isinstance(model, SU2Group):
        rel = model.mul(model.inverse(x), y)
        return su2_distance_from_identity(rel)
    raise NumericError(f"no CC distance implemented for model {model.kind}")


# ---------------------------------------------------------------------------
# Heisenberg
# ---------------------------------------------------------------------------

def _heis_angle_fn(theta):
    """(theta - sin theta) / (8 sin^2(theta/2)), stable near 0."""
    theta = np.asarray(theta, dtype=float)
    small = theta < 1e-4
    s2 = np.sin(0.5 * theta) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (theta - np.sin(theta)) / (8.0 * s2)
    # series: (t^3/6 - t^5/120) / (8 (t/2)^2 (1 - t^2/12)) ~ t/12 * (1 + t^2/60)
    val = np.where(small, theta / 12.0 * (1.0 + theta * theta / 60.0), val)
    return val


def heisenberg_distance_from_identity(coords):
    """Vectorized distance d(e, (x, y, z)) on the free Heisenberg group."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    r = np.hypot(coords[:, 0], coords[:, 1])
    z = np.abs(coords[:, 2])
    out = np.empty(len(coords))

    vertical = r < 1e-12
    out[vertical] = np.sqrt(4.0 * np.pi * z[vertical])

    flat = (~vertical) & (z <= 1e-12 * np.maximum(r * r, 1e-300))
    out[flat] = r[flat]

    rest = ~(vertical | flat)
    if np.any(rest):
        ratio = z[rest] / (r[rest] * r[rest])
        lo = np.full(ratio.shape, 1e-12)
        hi = np.full(ratio.shape, TWO_PI - 1e-13)
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            too_low = _heis_angle_fn(mid) < ratio
            lo = np.where(too_low, mid, lo)
            hi = np.where(too_low, hi, mid)
        theta = 0.5 * (lo + hi)
        out[rest] = r[rest] * theta / (2.0 * np.sin(0.5 * theta))
    return out


def nilmanifold_distance(model, x, y, radius=4):
    """Quotient distance min over lattice translates of the free distance."""
    lam = model.lattice_elements(radius)
    free = HeisenbergGroup()
    images = free.mul(lam, np.asarray(y, dtype=float)[None, :])
    rel = free.mul(free.inverse(np.asarray(x, dtype=float))[None, :], images)
    return float(heisenberg_distance_from_identity(rel).min())


# ---------------------------------------------------------------------------
# SU(2)
# ---------------------------------------------------------------------------

def _su2_endpoint_invariants(T, mu):
    """Rotation-invariant endpoint data (w, z) of the geodesic family.

    The horizontal magnitude is |sin(T nu)|/nu with nu = sqrt(1 + mu^2) and
    is determined by (w, z) through unit norm, so matching (w, z) suffices.
    """
    nu = np.sqrt(1.0 + mu * mu)
    sn, cn = np.sin(T * nu), np.cos(T * nu)
    sm, cm = np.sin(T * mu), np.cos(T * mu)
    w = cn * cm + (mu / nu) * sn * sm
    z = (mu / nu) * sn * cm - cn * sm
    return w, z


def _su2_cone_distance(v):
    """Tangent-cone (Heisenberg) approximation for targets near identity.

    [i, j] = 2k doubles the vertical rate relative to the standard
    Heisenberg normalization, so the cone distance of log q = (a, b, c)
    is the Heisenberg distance of (a, b, c/2).
    """
    pt = np.array([[v[0], v[1], 0.5 * v[2]]])
    return float(heisenberg_distance_from_identity(pt)[0])


def su2_distance_from_identity(q, grid_t=280, grid_phi=241, t_max=np.pi + 0.3):
    q = np.asarray(q, dtype=float)
    if q[0] < 0 and abs(q[0] + 1.0) < 1e-14 and np.allclose(q[1:], 0.0):
        return np.pi  # antipode: horizontal great circle
    su2 = SU2Group()
    v = su2.log(q)
    if np.linalg.norm(v) < 0.02:
        return _su2_cone_distance(v)

    wg = float(q[0])
    zg = float(q[3])
    rho_g = float(np.hypot(q[1], q[2]))

    ts = np.linspace(5e-3, t_max, grid_t)
    phis = np.linspace(-0.5 * np.pi + 5e-4, 0.5 * np.pi - 5e-4, grid_phi)
    mus = np.tan(phis)
    TT, MM = np.meshgrid(ts, mus, indexing="ij")
    W, Z = _su2_endpoint_invariants(TT, MM)
    res = (W - wg) ** 2 + (Z - zg) ** 2

    # local minima of the residual landscape as refinement starts
    interior = res[1:-1, 1:-1]
    is_min = ((interior <= res[:-2, 1:-1]) & (interior <= res[2:, 1:-1]) &
              (interior <= res[1:-1, :-2]) & (interior <= res[1:-1, 2:]) &
              (interior < 0.05))
    ii, jj = np.nonzero(is_min)
    starts = [(ts[i + 1], mus[j + 1]) for i, j in zip(ii, jj)]

    # analytic candidates: horizontal arc and (near-)vertical branch
    alpha = np.arctan2(zg, wg) % TWO_PI
    alpha = min(alpha, TWO_PI - alpha)
    psi = np.arccos(np.clip(wg, -1.0, 1.0))
    starts.append((max(psi, 5e-3), 0.0))
    if alpha > 1e-12:
        t_vert = np.sqrt(alpha * (TWO_PI - alpha))
        mu_vert = (np.pi - alpha) / t_vert
        starts.append((t_vert, mu_vert * np.sign(zg if zg != 0 else 1.0)))
        starts.append((t_vert, -mu_vert))

    def resid(p):
        w, z = _su2_endpoint_invariants(p[0], p[1])
        return [w - wg, z - zg]

    best = np.inf
    for t0, m0 in sorted(starts):
        if t0 >= best - 1e-9:
            continue
        sol = least_squares(resid, [t0, m0], xtol=3e-16, ftol=3e-16, gtol=3e-16,
                            max_nfev=200)
        t_star = float(sol.x[0])
        if t_star <= 0:
            continue
        if np.linalg.norm(resid(sol.x)) < 1e-8 and t_star < best:
            best = t_star
    if not np.isfinite(best):
        raise NumericError(
            "su2 CC distance solver found no geodesic hitting the target",
            diagnostics={"q": q.tolist(), "min_residual": float(res.min())})
    return best
