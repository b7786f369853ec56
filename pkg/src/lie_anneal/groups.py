"""Concrete group models: flat tori, the Heisenberg group and its compact
nilmanifold quotient, and SU(2) as unit quaternions.

Group elements are plain float arrays whose last axis is the coordinate
representation (documented per model below); all operations broadcast over
leading axes.  Each model carries a left-invariant generating frame
V_1..V_d (d = ``horizontal_rank``) acting by

    (V_i f)(g) = d/ds f(g * exp(s e_i)) |_{s=0},

and algebra vectors are coefficient arrays of length ``dim`` in a fixed
basis whose first d entries are the generators.

Representations:

* ``torus:d``      -- d angles in [0, 2*pi); frame = coordinate fields.
* ``heisenberg``   -- exponential coordinates (x, y, z) with group law
  (x,y,z)*(x',y',z') = (x+x', y+y', z+z' + (x y' - y x')/2), frame
  V1 = dx - (y/2) dz, V2 = dy + (x/2) dz, so [V1, V2] = dz.  Non-compact.
* ``heisenberg-nilmanifold`` -- quotient of the above by the left action
  of the lattice generated by (1,0,0), (0,1,0), (0,0,1) (all elements
  (a, b, ab/2 + k) with integer a, b, k); fundamental domain [0,1)^3.
* ``su2``          -- unit quaternions (w, x, y, z); algebra basis i, j, k
  with [i, j] = 2k and cyclic variants; frame = {i, j}.
"""

import numpy as np

from . import _core
from .errors import ModelMismatchError, UnsupportedModelError, ValidationError

TWO_PI = 2.0 * np.pi

_DEFAULT_FD_STEP = 1e-5


def _as_batch(g, repr_dim, kind):
    """Validate trailing dim / finiteness; return (m, repr_dim) view + unbatch flag."""
    g = np.asarray(g, dtype=float)
    if g.shape[-1:] != (repr_dim,):
        raise ModelMismatchError(
            f"expected trailing coordinate axis of length {repr_dim} for model "
            f"'{kind}', got array of shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValidationError(f"non-finite coordinates passed to model '{kind}'")
    single = g.ndim == 1
    return np.atleast_2d(g), single


class GroupModel:
    """Base class; subclasses fill in the group-specific operations."""

    kind = None
    dim = None              # group dimension n
    horizontal_rank = None  # number of generators d
    step = None             # bracket-generating step
    repr_dim = None         # coordinate representation length
    compact = None
    chart = None            # human-readable chart description

    # -- basic operations ---------------------------------------------------

    def identity(self):
        raise NotImplementedError

    def mul(self, a, b):
        raise NotImplementedError

    def inverse(self, a):
        raise NotImplementedError

    def exp(self, v):
        """Exponential map: algebra coefficients (..., dim) -> element."""
        raise NotImplementedError

    def reduce(self, g):
        """Canonical representative (mod 2*pi / fundamental domain / unit norm)."""
        raise NotImplementedError

    def haar_sample(self, rng, size=None):
        raise UnsupportedModelError(
            f"Haar sampling is not available on non-compact model '{self.kind}'")

    def structure_constants(self):
        """C[a, b, c] with [e_a, e_b] = sum_c C[a,b,c] e_c."""
        raise NotImplementedError

    def step_inplace(self, coords, v, reduce=True):
        """coords <- reduce(coords * exp(v)) for (m, repr_dim) x (m, dim), in place."""
        raise NotImplementedError

    def cc_distance(self, x, y):
        """Carnot-Caratheodory distance for the unit frame V_1..V_d."""
        from . import ccdist
        return ccdist.cc_distance(self, x, y)

    # -- shared helpers -----------------------------------------------------

    def translate(self, x, coords):
        """Left-translate a batch of states: x * coords."""
        return self.mul(x, coords)

    def basis_vector(self, i, scale=1.0):
        v = np.zeros(self.dim)
        v[i] = scale
        return v

    def __repr__(self):
        return f"<GroupModel {self.kind}>"


class TorusGroup(GroupModel):
    """Flat d-torus; angles mod 2*pi, abelian, step 1."""

    def __init__(self, d):
        if d < 1:
            raise ValidationError("torus dimension must be >= 1")
        self.kind = f"torus:{d}"
        self.dim = d
        self.horizontal_rank = d
        self.step = 1
        self.repr_dim = d
        self.compact = True
        self.chart = f"{d} angles in [0, 2*pi), Haar = Lebesgue dθ"

    def identity(self):
        return np.zeros(self.dim)

    def mul(self, a, b):
        a, _ = _as_batch(a, self.repr_dim, self.kind)
        b, single = _as_batch(b, self.repr_dim, self.kind)
        out = np.mod(a + b, TWO_PI)
        return out[0] if (single and out.shape[0] == 1) else out

    def inverse(self, a):
        a, single = _as_batch(a, self.repr_dim, self.kind)
        out = np.mod(-a, TWO_PI)
        return out[0] if single else out

    def exp(self, v):
        v, single = _as_batch(v, self.dim, self.kind)
        out = np.mod(v, TWO_PI)
        return out[0] if single else out

    def reduce(self, g):
        g, single = _as_batch(g, self.repr_dim, self.kind)
        out = np.mod(g, TWO_PI)
        return out[0] if single else out

    def haar_sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(0.0, TWO_PI, size=shape)

    def structure_constants(self):
        return np.zeros((self.dim,) * 3)

    def step_inplace(self, coords, v, reduce=True):
        _core.torus_step(coords, v, reduce)


class HeisenbergGroup(GroupModel):
    """3-D Heisenberg group in exponential coordinates (non-compact)."""

    def __init__(self):
        self.kind = "heisenberg"
        self.dim = 3
        self.horizontal_rank = 2
        self.step = 2
        self.repr_dim = 3
        self.compact = False
        self.chart = "exponential coordinates (x, y, z), Haar = Lebesgue dx dy dz"

    def identity(self):
        return np.zeros(3)

    def mul(self, a, b):
        a, _ = _as_batch(a, 3, self.kind)
        b, single = _as_batch(b, 3, self.kind)
        a, b = np.broadcast_arrays(a, b)
        out = np.empty(np.broadcast(a, b).shape)
        out[..., 0] = a[..., 0] + b[..., 0]
        out[..., 1] = a[..., 1] + b[..., 1]
        out[..., 2] = (a[..., 2] + b[..., 2]
                       + 0.5 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]))
        return out[0] if (single and out.shape[0] == 1) else out

    def inverse(self, a):
        a, single = _as_batch(a, 3, self.kind)
        out = -a
        return out[0] if single else out

    def exp(self, v):
        # step-2 BCH: exponential coordinates make exp the identity map
        v, single = _as_batch(v, 3, self.kind)
        out = v.copy()
        return out[0] if single else out

    def reduce(self, g):
        g, single = _as_batch(g, 3, self.kind)
        out = g.copy()
        return out[0] if single else out

    def structure_constants(self):
        C = np.zeros((3, 3, 3))
        C[0, 1, 2] = 1.0
        C[1, 0, 2] = -1.0
        return C

    def step_inplace(self, coords, v, reduce=True):
        _core.heis_step(coords, v)


class HeisenbergNilmanifold(HeisenbergGroup):
    """Compact quotient of the Heisenberg group by its integer lattice.

    Points are orbits lam * g of the left lattice action; the stored
    representative lives in [0,1)^3.  The frame descends because left
    lattice multiplication commutes with right translation g -> g*exp(tv).
    """

    def __init__(self):
        super().__init__()
        self.kind = "heisenberg-nilmanifold"
        self.compact = True
        self.chart = ("fundamental domain x, y, z in [0,1)^3 of the integer "
                      "lattice, Haar = Lebesgue (total mass 1)")

    def mul(self, a, b):
        return self.reduce(super().mul(a, b))

    def inverse(self, a):
        return self.reduce(super().inverse(a))

    def exp(self, v):
        return self.reduce(super().exp(v))

    def reduce(self, g):
        g, single = _as_batch(g, 3, self.kind)
        out = np.ascontiguousarray(g)
        if out is g:
            out = g.copy()
        _core.heis_reduce(out)
        return out[0] if single else out

    def haar_sample(self, rng, size=None):
        shape = (3,) if size is None else (size, 3)
        return rng.uniform(0.0, 1.0, size=shape)

    def lattice_elements(self, radius):
        """All lattice elements (a, b, ab/2 + k) with |a|,|b|,|k| <= radius."""
        rng_int = np.arange(-radius, radius + 1)
        A, B, K = np.meshgrid(rng_int, rng_int, rng_int, indexing="ij")
        lam = np.stack([A, B, 0.5 * A * B + K], axis=-1).reshape(-1, 3)
        return lam.astype(float)

    def step_inplace(self, coords, v, reduce=True):
        _core.heis_step(coords, v)
        if reduce:
            _core.heis_reduce(coords)


class SU2Group(GroupModel):
    """SU(2) as unit quaternions; frame {i, j}, [i, j] = 2k."""

    def __init__(self):
        self.kind = "su2"
        self.dim = 3
        self.horizontal_rank = 2
        self.step = 2
        self.repr_dim = 4
        self.compact = True
        self.chart = ("unit quaternion (w, x, y, z); exponential chart "
                      "v = psi*n with q = (cos psi, sin psi n)")

    def identity(self):
        return np.array([1.0, 0.0, 0.0, 0.0])

    def mul(self, a, b):
        a, _ = _as_batch(a, 4, self.kind)
        b, single = _as_batch(b, 4, self.kind)
        out = _core.su2_mul(a, b)
        out = self._normalize(out)
        return out[0] if (single and out.shape[0] == 1) else out

    def inverse(self, a):
        a, single = _as_batch(a, 4, self.kind)
        out = a * np.array([1.0, -1.0, -1.0, -1.0])
        out = self._normalize(out)
        return out[0] if single else out

    def exp(self, v):
        v, single = _as_batch(v, 3, self.kind)
        out = _core.su2_exp(np.ascontiguousarray(v))
        return out[0] if single else out

    def log(self, q):
        """Inverse of exp on the chart |v| < pi (q != -1)."""
        q, single = _as_batch(q, 4, self.kind)
        w = np.clip(q[:, 0], -1.0, 1.0)
        imag = q[:, 1:]
        s = np.linalg.norm(imag, axis=1)
        psi = np.arctan2(s, w)
        scale = np.where(s > 1e-12, psi / np.where(s > 1e-12, s, 1.0), 1.0)
        out = imag * scale[:, None]
        return out[0] if single else out

    def reduce(self, g):
        g, single = _as_batch(g, 4, self.kind)
        out = self._normalize(g.copy())
        return out[0] if single else out

    @staticmethod
    def _normalize(q):
        norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
        return q / norm

    def haar_sample(self, rng, size=None):
        n = 1 if size is None else size
        q = rng.standard_normal((n, 4))
        q = self._normalize(q)
        return q[0] if size is None else q

    def structure_constants(self):
        C = np.zeros((3, 3, 3))
        # [i,j] = 2k and cyclic variants
        for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            C[a, b, c] = 2.0
            C[b, a, c] = -2.0
        return C

    def step_inplace(self, coords, v, reduce=True):
        _core.su2_step(coords, np.ascontiguousarray(v))


_REGISTRY_DOC = "torus:d (e.g. torus:1, torus:2), heisenberg, heisenberg-nilmanifold, su2"


def make_model(name):
    """Instantiate a group model from its string identifier."""
    name = name.strip().lower()
    if name.startswith("torus"):
        if ":" in name:
            try:
                d = int(name.split(":", 1)[1])
            except ValueError:
                raise ValidationError(f"bad torus dimension in '{name}'; valid ids: {_REGISTRY_DOC}")
        else:
            d = 1
        return TorusGroup(d)
    if name == "heisenberg":
        return HeisenbergGroup()
    if name == "heisenberg-nilmanifold":
        return HeisenbergNilmanifold()
    if name == "su2":
        return SU2Group()
    raise ValidationError(f"unknown group model '{name}'; valid ids: {_REGISTRY_DOC}")


def geometric_exp_step(model, g, v):
    """Single public step g * exp(v) with representation cleanup."""
    g = model.reduce(g)
    batch, g_single = _as_batch(g, model.repr_dim, model.kind)
    vb, v_single = _as_batch(np.asarray(v, dtype=float), model.dim, model.kind)
    m = max(batch.shape[0], vb.shape[0])
    batch = np.ascontiguousarray(np.broadcast_to(batch, (m, model.repr_dim))).copy()
    vb = np.ascontiguousarray(np.broadcast_to(vb, (m, model.dim)))
    model.step_inplace(batch, vb)
    return batch[0] if (g_single and v_single and m == 1) else batch


def directional_derivative(model, f, g, i, h=_DEFAULT_FD_STEP):
    """(V_i f)(g) = d/ds f(g exp(s e_i))|_0.

    Uses the field's analytic directional derivative when available,
    otherwise a central finite difference with step ``h``.
    """
    if not (0 <= i < model.horizontal_rank):
        raise ValidationError(
            f"generator index {i} out of range for d={model.horizontal_rank}")
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    analytic = getattr(f, "directional", None)
    if analytic is not None:
        return float(np.asarray(analytic(np.asarray(g, dtype=float), i)))
    ev = f.evaluate if hasattr(f, "evaluate") else f
    gp = geometric_exp_step(model, g, model.basis_vector(i, h))
    gm = geometric_exp_step(model, g, model.basis_vector(i, -h))
    fp, fm = float(ev(gp)), float(ev(gm))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        from .errors import EvaluationError
        raise EvaluationError("scalar field returned a non-finite value")
    return (fp - fm) / (2.0 * h)


def bracket_generation_check(model):
    """Iteratively bracket the frame until the span stabilizes.

    Returns (spans_full_algebra, achieved_step).
    """
    C = model.structure_constants()
    n = model.dim
    d = model.horizontal_rank
    frame = np.eye(n)[:d]

    def span_rank(vectors):
        return np.linalg.matrix_rank(np.array(vectors), tol=1e-12)

    current = [frame[i] for i in range(d)]
    step = 1
    rank = span_rank(current)
    while rank < n:
        new = list(current)
        for v in current:
            for i in range(d):
                new.append(np.einsum("abc,a,b->c", C, frame[i], v))
        new_rank = span_rank(new)
        step += 1
        if new_rank == rank:
            return False, step - 1
        current, rank = new, new_rank
    return True, step


def check_group_axioms(model, rng, n_triples=100, tol=1e-10):
    """Associativity / identity / inverse spot checks on random triples.

    Uses Haar samples on compact models, Gaussian coordinates otherwise.
    Returns the maximum deviation observed.
    """
    def sample(n):
        if model.compact:
            return model.haar_sample(rng, n)
        return rng.standard_normal((n, model.repr_dim))

    a, b, c = sample(n_triples), sample(n_triples), sample(n_triples)
    lhs = model.mul(model.mul(a, b), c)
    rhs = model.mul(a, model.mul(b, c))
    worst = _rep_distance(model, lhs, rhs).max()
    e = model.identity()
    worst = max(worst, _rep_distance(model, model.mul(a, e), model.reduce(a)).max())
    worst = max(worst, _rep_distance(model, model.mul(a, model.inverse(a)),
                                     np.broadcast_to(e, a.shape[:1] + e.shape)).max())
    return float(worst)


def _rep_distance(model, a, b):
    """Representation-space distance, respecting wrap-around charts."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if isinstance(model, TorusGroup):
        diff = np.abs(a - b)
        return np.minimum(diff, TWO_PI - diff).max(axis=-1)
    if isinstance(model, HeisenbergNilmanifold):
        diff = np.abs(a - b)
        return np.minimum(diff, 1.0 - diff).max(axis=-1)
    if isinstance(model, SU2Group):
        return np.minimum(np.abs(a - b).max(axis=-1), np.abs(a + b).max(axis=-1))
    return np.abs(a - b).max(axis=-1)
