"""Scalar fields on the group models, and the finite test-function
dictionaries used by the estimators.

A :class:`ScalarField` wraps a batch-vectorized evaluation callable plus an
optional analytic directional derivative along the frame,

    directional(coords, i) = (V_i f)(coords),

used by the drift assembly and the carre-du-champ estimators; fields
without one fall back to central finite differences through the group
exponential.  Dictionaries are small families of smooth, low-frequency
characters / matrix coefficients with analytic derivatives: trigonometric
polynomials on tori, coordinate characters and theta-type sections with a
central character on the Heisenberg nilmanifold, and representation matrix
coefficients (spins 1/2 and 1) on SU(2).
"""

from dataclasses import dataclass, field

import numpy as np

from . import _core
from .errors import EvaluationError, ValidationError
from .groups import GroupModel, HeisenbergNilmanifold, SU2Group, TorusGroup

DEFAULT_FD_STEP = 1e-5


@dataclass
class ScalarField:
    """Batch-vectorized scalar function on a group model."""

    fn: callable                 # coords (..., repr_dim) -> (...)
    name: str = "field"
    directional: callable = None  # (coords, i) -> (V_i f)(coords), batch
    smooth: bool = True
    meta: dict = field(default_factory=dict)

    def evaluate(self, x):
        val = np.asarray(self.fn(np.asarray(x, dtype=float)))
        if not np.all(np.isfinite(val)):
            raise EvaluationError(f"field '{self.name}' returned a non-finite value")
        return float(val) if val.ndim == 0 else val

    def evaluate_batch(self, coords):
        val = np.asarray(self.fn(np.asarray(coords, dtype=float)), dtype=float)
        if not np.all(np.isfinite(val)):
            raise EvaluationError(f"field '{self.name}' returned non-finite values")
        return val

    def analytic_directional(self, x, i):
        if self.directional is None:
            return None
        return float(np.asarray(self.directional(np.atleast_2d(np.asarray(x, dtype=float)), i))[0])

    def grad_hor(self, model: GroupModel, coords, h=DEFAULT_FD_STEP):
        """Horizontal gradient coefficients ((V_i f)(g))_{i<d} for a batch."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        m = coords.shape[0]
        d = model.horizontal_rank
        out = np.empty((m, d))
        if self.directional is not None:
            for i in range(d):
                out[:, i] = self.directional(coords, i)
            return out
        for i in range(d):
            vp = np.zeros((m, model.dim))
            vp[:, i] = h
            plus = np.ascontiguousarray(coords.copy())
            model.step_inplace(plus, vp)
            minus = np.ascontiguousarray(coords.copy())
            vp[:, i] = -h
            model.step_inplace(minus, vp)
            out[:, i] = (self.evaluate_batch(plus) - self.evaluate_batch(minus)) / (2.0 * h)
        return out


def constant(c, name=None):
    c = float(c)
    return ScalarField(
        fn=lambda coords: np.full(np.asarray(coords).shape[:-1], c),
        name=name or f"const[{c}]",
        directional=lambda coords, i: np.zeros(np.asarray(coords).shape[:-1]),
    )


@dataclass
class TestFunctionDictionary:
    """Ordered family of smooth test functions with analytic derivatives."""

    fields: list
    name: str
    model_kind: str

    def __iter__(self):
        return iter(self.fields)

    def __len__(self):
        return len(self.fields)

    def gram_condition(self, model, rng, n_samples=4096):
        """Condition number of the Gram matrix E[f_i f_j] on a Haar sample."""
        samples = model.haar_sample(rng, n_samples)
        vals = np.stack([f.evaluate_batch(samples) for f in self.fields])
        gram = vals @ vals.T / n_samples
        return float(np.linalg.cond(gram))


# ---------------------------------------------------------------------------
# torus dictionaries
# ---------------------------------------------------------------------------

def _torus_trig(axis, freq, kind, d):
    trig = np.sin if kind == "sin" else np.cos
    dtrig = np.cos if kind == "sin" else (lambda a: -np.sin(a))

    def fn(coords):
        return trig(freq * np.asarray(coords)[..., axis])

    def directional(coords, i):
        coords = np.asarray(coords)
        if i != axis:
            return np.zeros(coords.shape[:-1])
        return freq * dtrig(freq * coords[..., axis])

    return ScalarField(fn=fn, name=f"{kind}({freq}t{axis})", directional=directional)


def _torus_cross(d):
    """Frequency-1 cross products for d >= 2 (first two axes)."""
    out = []
    for k1, g1, dg1 in (("sin", np.sin, np.cos), ("cos", np.cos, lambda a: -np.sin(a))):
        for k2, g2, dg2 in (("sin", np.sin, np.cos), ("cos", np.cos, lambda a: -np.sin(a))):
            def fn(coords, g1=g1, g2=g2):
                c = np.asarray(coords)
                return g1(c[..., 0]) * g2(c[..., 1])

            def directional(coords, i, g1=g1, g2=g2, dg1=dg1, dg2=dg2):
                c = np.asarray(coords)
                if i == 0:
                    return dg1(c[..., 0]) * g2(c[..., 1])
                if i == 1:
                    return g1(c[..., 0]) * dg2(c[..., 1])
                return np.zeros(c.shape[:-1])

            out.append(ScalarField(fn=fn, name=f"{k1}(t0){k2}(t1)", directional=directional))
    return out


def torus_dictionary(model: TorusGroup, max_freq=3, cross=True):
    fields_ = []
    for axis in range(model.dim):
        for freq in range(1, max_freq + 1):
            fields_.append(_torus_trig(axis, freq, "sin", model.dim))
            fields_.append(_torus_trig(axis, freq, "cos", model.dim))
    if cross and model.dim >= 2:
        fields_.extend(_torus_cross(model.dim))
    return TestFunctionDictionary(fields_, f"trig<=#{max_freq}", model.kind)


# ---------------------------------------------------------------------------
# Heisenberg nilmanifold dictionary
# ---------------------------------------------------------------------------

def _nil_coord_trig(axis, kind):
    # functions of x (axis 0) or y (axis 1) alone; V1 f = df/dx, V2 f = df/dy
    trig = np.sin if kind == "sin" else np.cos
    dtrig = np.cos if kind == "sin" else (lambda a: -np.sin(a))
    w = 2.0 * np.pi

    def fn(coords):
        return trig(w * np.asarray(coords)[..., axis])

    def directional(coords, i):
        coords = np.asarray(coords)
        if i != axis:
            return np.zeros(coords.shape[:-1])
        return w * dtrig(w * coords[..., axis])

    return ScalarField(fn=fn, name=f"{kind}(2pi {'xy'[axis]})", directional=directional)


def nilmanifold_theta_section(n_range=4, part="re", name=None):
    """Theta-type section with central character e^{2 pi i z}.

    psi(x, y, z) = e^{2 pi i (z + xy/2)} * Phi(x, y),
    Phi(x, y) = sum_n exp(-pi (x+n)^2) e^{2 pi i n y},

    which is invariant under the left lattice action, smooth, and genuinely
    z-dependent.  The frame derivatives are

        V1 psi = e^{2 pi i w} dPhi/dx,
        V2 psi = e^{2 pi i w} (dPhi/dy + 2 pi i x Phi).
    """
    ns = np.arange(-n_range, n_range + 1)

    def parts(coords):
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        x, y, z = c[..., 0], c[..., 1], c[..., 2]
        xn = x[..., None] + ns
        phi_terms = np.exp(-np.pi * xn ** 2)
        e_ny = np.exp(2j * np.pi * ns * y[..., None])
        Phi = (phi_terms * e_ny).sum(-1)
        dPhi_dx = (-2.0 * np.pi * xn * phi_terms * e_ny).sum(-1)
        dPhi_dy = (2j * np.pi * ns * phi_terms * e_ny).sum(-1)
        w_phase = np.exp(2j * np.pi * (z + 0.5 * x * y))
        return x, Phi, dPhi_dx, dPhi_dy, w_phase

    take = np.real if part == "re" else np.imag

    def fn(coords):
        _, Phi, _, _, w_phase = parts(coords)
        out = take(w_phase * Phi)
        return out.reshape(np.asarray(coords).shape[:-1])

    def directional(coords, i):
        x, Phi, dPhi_dx, dPhi_dy, w_phase = parts(coords)
        if i == 0:
            val = w_phase * dPhi_dx
        elif i == 1:
            val = w_phase * (dPhi_dy + 2j * np.pi * x * Phi)
        else:
            raise ValidationError("theta section derivatives implemented for the frame only")
        return take(val).reshape(np.asarray(coords).shape[:-1])

    return ScalarField(fn=fn, name=name or f"{part}(theta-section)", directional=directional)


def theta_section_peak():
    """Value of Re psi at the identity (its global maximum), sum_n exp(-pi n^2)."""
    ns = np.arange(-8, 9)
    return float(np.exp(-np.pi * ns ** 2).sum())


def nilmanifold_dictionary(model: HeisenbergNilmanifold):
    fields_ = [
        _nil_coord_trig(0, "sin"), _nil_coord_trig(0, "cos"),
        _nil_coord_trig(1, "sin"), _nil_coord_trig(1, "cos"),
        nilmanifold_theta_section(part="re"),
        nilmanifold_theta_section(part="im"),
    ]
    return TestFunctionDictionary(fields_, "nil-characters", model.kind)


# ---------------------------------------------------------------------------
# SU(2) dictionary
# ---------------------------------------------------------------------------

_QUAT_BASIS = {1: np.array([0.0, 1.0, 0.0, 0.0]),
               2: np.array([0.0, 0.0, 1.0, 0.0]),
               3: np.array([0.0, 0.0, 0.0, 1.0])}


def su2_polynomial_field(fn, grad_fn, name):
    """Field from a polynomial in quaternion components with explicit gradient.

    (V_i f)(q) = <grad f(q), q * e_i> where e_1 = i, e_2 = j (quaternion
    product; the curve s -> q exp(s e_i) has velocity q e_i at s=0).
    """

    def directional(coords, i):
        q = np.atleast_2d(np.asarray(coords, dtype=float))
        tangent = _core.su2_mul(q, _QUAT_BASIS[i + 1][None, :])
        grad = grad_fn(q)
        return np.einsum("...k,...k->...", grad, tangent)

    return ScalarField(fn=fn, name=name, directional=directional)


def su2_dictionary(model: SU2Group):
    """Spin-1/2 components and a few spin-1 (SO(3) matrix) coefficients."""
    fields_ = []
    comp_names = "wxyz"
    for k in range(4):
        def fn(coords, k=k):
            return np.asarray(coords)[..., k]

        def grad(q, k=k):
            g = np.zeros_like(q)
            g[..., k] = 1.0
            return g

        fields_.append(su2_polynomial_field(fn, grad, f"q_{comp_names[k]}"))

    quad_specs = [
        # R22 = w^2 - x^2 - y^2 + z^2
        ("R22", np.array([1.0, -1.0, -1.0, 1.0]), None),
        # R00 = w^2 + x^2 - y^2 - z^2
        ("R00", np.array([1.0, 1.0, -1.0, -1.0]), None),
        # R01 = 2(xy - wz), R10 = 2(xy + wz)
        ("R01", None, (("x", "y", 2.0), ("w", "z", -2.0))),
        ("R10", None, (("x", "y", 2.0), ("w", "z", 2.0))),
        # R12 = 2(yz - wx)
        ("R12", None, (("y", "z", 2.0), ("w", "x", -2.0))),
    ]
    idx = {"w": 0, "x": 1, "y": 2, "z": 3}
    for name, diag, cross in quad_specs:
        if diag is not None:
            def fn(coords, diag=diag):
                q = np.asarray(coords)
                return np.einsum("...k,k->...", q * q, diag)

            def grad(q, diag=diag):
                return 2.0 * q * diag

        else:
            def fn(coords, cross=cross):
                q = np.asarray(coords)
                out = 0.0
                for a, b, c in cross:
                    out = out + c * q[..., idx[a]] * q[..., idx[b]]
                return out

            def grad(q, cross=cross):
                g = np.zeros_like(q)
                for a, b, c in cross:
                    g[..., idx[a]] += c * q[..., idx[b]]
                    g[..., idx[b]] += c * q[..., idx[a]]
                return g

        fields_.append(su2_polynomial_field(fn, grad, name))
    return TestFunctionDictionary(fields_, "su2-matrix-coeffs", model.kind)


def default_dictionary(model, purpose="poincare"):
    """Model-appropriate default dictionary.

    For Rayleigh gap estimation on tori a richer dictionary (frequency 6)
    is used: the wrapped heat-kernel law needs higher modes before the
    quotient stops over-shooting the flat-theory gap.
    """
    if isinstance(model, TorusGroup):
        max_freq = 6 if purpose == "rayleigh" else 3
        return torus_dictionary(model, max_freq=max_freq)
    if isinstance(model, HeisenbergNilmanifold):
        return nilmanifold_dictionary(model)
    if isinstance(model, SU2Group):
        return su2_dictionary(model)
    raise ValidationError(f"no default dictionary for model '{model.kind}'")
