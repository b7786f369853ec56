"""Pure-numpy batched stepping kernels.

These are the hot inner-loop primitives: one geometric Euler update
``g <- g * exp(v)`` applied in place to a whole batch of states, for each
shipped group.  The Cython module ``_speedups`` implements the same
functions with identical semantics; either one is selected at import time
by :mod:`lie_anneal._core`.

Conventions (must stay in sync with _speedups.pyx):

* torus: state = angles (m, d), update mod 2*pi (wrap optional).
* heisenberg: state = (x, y, z) with group law
  (x,y,z)*(x',y',z') = (x+x', y+y', z+z'+(x y' - y x')/2); exponential
  coordinates, so exp is the identity map.  Fundamental-domain reduction
  acts by *left* lattice multiplication, domain [0,1)^3.
* su2: state = unit quaternion (w, x, y, z); exp of (a,b,c) is the
  quaternion exp of a*i + b*j + c*k; renormalized after every update.
"""

import numpy as np

TWO_PI = 2.0 * np.pi


def torus_step(theta, v, wrap=True):
    """theta <- (theta + v) mod 2*pi, in place."""
    np.add(theta, v, out=theta)
    if wrap:
        np.mod(theta, TWO_PI, out=theta)


def heis_step(g, v):
    """g <- g * (v1, v2, v3), in place (exponential coordinates)."""
    x = g[:, 0]
    y = g[:, 1]
    g[:, 2] += v[:, 2] + 0.5 * (x * v[:, 1] - y * v[:, 0])
    x += v[:, 0]
    y += v[:, 1]


def heis_reduce(g):
    """Reduce to the fundamental domain [0,1)^3 of the integer lattice.

    Multiplies on the left by the unique lattice element
    lam = (a, b, ab/2 + k), a, b, k integers, that lands in the domain.
    In place.
    """
    x = g[:, 0]
    y = g[:, 1]
    z = g[:, 2]
    a = -np.floor(x)
    b = -np.floor(y)
    z += 0.5 * a * b + 0.5 * (a * y - b * x)
    x += a
    y += b
    z -= np.floor(z)


def su2_exp(v):
    """Quaternion exponential of (m, 3) algebra coordinates -> (m, 4)."""
    theta = np.sqrt(np.sum(v * v, axis=1))
    out = np.empty((v.shape[0], 4))
    out[:, 0] = np.cos(theta)
    small = theta < 1e-8
    k = np.empty_like(theta)
    k[~small] = np.sin(theta[~small]) / theta[~small]
    ts = theta[small]
    k[small] = 1.0 - ts * ts / 6.0
    out[:, 1:] = v * k[:, None]
    return out


def su2_mul(q, r):
    """Hamilton product of (m, 4) quaternion batches (broadcasting ok)."""
    w1, x1, y1, z1 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    w2, x2, y2, z2 = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    out = np.empty(np.broadcast(q, r).shape[:-1] + (4,))
    out[..., 0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    out[..., 1] = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    out[..., 2] = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    out[..., 3] = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    return out


def su2_step(q, v):
    """q <- normalize(q * exp(v)), in place."""
    e = su2_exp(v)
    prod = su2_mul(q, e)
    norm = np.sqrt(np.sum(prod * prod, axis=1))
    q[:] = prod / norm[:, None]
