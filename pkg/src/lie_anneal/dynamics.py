"""Time-stepping of the three SDE families on a group model.

All processes are driven by the single-exponential geometric Euler scheme

    X_{n+1} = X_n * exp( v0(X_n) dt + eps(t_n) sqrt(dt) sum_i xi_i e_i ),

which is exactly manifold-preserving and weak order 1 for Stratonovich
equations driven by left-invariant fields:

* driftless hypoelliptic diffusion   (v0 = 0, eps = 1),
* potential Ornstein-Uhlenbeck drift (v0 = -1/2 grad_hor U, eps constant),
* annealing                          (same drift, eps = schedule, frozen at
                                      the left endpoint of each step).

Paths are simulated in fixed-size chunks, each with its own counter-based
Philox stream spawned from the master seed, so ensembles are bit-for-bit
reproducible for a given (seed, spec) regardless of the thread count
(capped by the LIE_ANNEAL_THREADS environment variable).
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .groups import GroupModel, make_model

CHUNK_PATHS = 32768


def thread_count():
    raw = os.environ.get("LIE_ANNEAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def chunk_generator(seed, chunk_index):
    """Counter-based stream for one path chunk of a master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(chunk_index,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SdeSpec:
    """Provenance record for a simulation run."""

    model: str
    process: str              # diffusion | potential-ou | annealing
    dt: float
    t_end: float
    n_paths: int
    eps: object = 1.0         # float or schedule constants dict
    potential: str = None
    scheme: str = "geometric-euler"

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("model", "process", "dt", "t_end", "n_paths", "eps", "potential", "scheme")}


@dataclass
class PathEnsemble:
    """States of an ensemble at the requested save times."""

    model_kind: str
    times: np.ndarray          # (k,)
    states: np.ndarray         # (k, n_paths, repr_dim)
    seed: int
    spec: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.states[-1]

    def state_at(self, t):
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError(f"time {t} not stored (have {self.times})")
        return self.states[idx]

    def save(self, basepath):
        """CSV of rows (path, time, coords...) plus a JSON sidecar."""
        basepath = str(basepath)
        k, n, r = self.states.shape
        with open(basepath + ".csv", "w") as fh:
            cols = ",".join(f"c{j}" for j in range(r))
            fh.write(f"path,time,{cols}\n")
            for ti in range(k):
                t = self.times[ti]
                for p in range(n):
                    coords = ",".join(f"{v:.17g}" for v in self.states[ti, p])
                    fh.write(f"{p},{t:.17g},{coords}\n")
        sidecar = {
            "model": self.model_kind,
            "seed": int(self.seed),
            "times": [float(t) for t in self.times],
            "n_paths": int(n),
            "repr_dim": int(r),
            "spec": self.spec,
        }
        with open(basepath + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, basepath):
        basepath = str(basepath)
        with open(basepath + ".json") as fh:
            sidecar = json.load(fh)
        times = np.array(sidecar["times"])
        n, r = sidecar["n_paths"], sidecar["repr_dim"]
        data = np.loadtxt(basepath + ".csv", delimiter=",", skiprows=1, ndmin=2)
        states = np.empty((len(times), n, r))
        for ti in range(len(times)):
            rows = data[data[:, 1] == times[ti]] if len(times) > 1 else data
            order = np.argsort(rows[:, 0])
            states[ti] = rows[order][:, 2:2 + r]
        return cls(model_kind=sidecar["model"], times=times, states=states,
                   seed=sidecar["seed"], spec=sidecar.get("spec", {}))


def geometric_step(model: GroupModel, g, v0, noise, dt):
    """One geometric Euler step g * exp(v0*dt + noise).

    ``v0`` and ``noise`` are algebra coefficient vectors; horizontal-only
    vectors (length d) are zero-padded to the full basis.
    """
    if dt < 0:
        raise ValidationError("dt must be >= 0")

    def pad(v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] == model.dim:
            return v
        if v.shape[-1] == model.horizontal_rank:
            padded = np.zeros(v.shape[:-1] + (model.dim,))
            padded[..., :model.horizontal_rank] = v
            return padded
        raise ValidationError(
            f"algebra vector of length {v.shape[-1]} (expected {model.dim} "
            f"or {model.horizontal_rank})")

    v = pad(v0) * dt + pad(noise)
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite increment in geometric_step")
    from .groups import geometric_exp_step
    return geometric_exp_step(model, g, v)


def _resolve_x0(model, x0, n_paths, seed):
    if x0 is None:
        x0 = model.identity()
    if isinstance(x0, str):
        if x0 == "haar":
            gen = chunk_generator(seed, 2 ** 31)
            return np.ascontiguousarray(model.haar_sample(gen, n_paths))
        raise ValidationError(f"unknown initial condition '{x0}'")
    x0 = model.reduce(np.asarray(x0, dtype=float))
    if x0.ndim == 1:
        return np.ascontiguousarray(np.tile(x0, (n_paths, 1)))
    if x0.shape != (n_paths, model.repr_dim):
        raise ValidationError(f"x0 batch shape {x0.shape} != ({n_paths}, {model.repr_dim})")
    return np.ascontiguousarray(x0.copy())


def _evolve_chunk(model, coords, gen, n_steps, dt, drift_fn, eps_fn,
                  save_steps, reduce_states):
    m = coords.shape[0]
    d = model.horizontal_rank
    v = np.zeros((m, model.dim))
    sqdt = np.sqrt(dt)
    saves = {}
    if 0 in save_steps:
        saves[0] = coords.copy()
    for k in range(n_steps):
        noise = gen.standard_normal((m, d))
        eps = eps_fn(k * dt)
        if drift_fn is not None:
            np.multiply(drift_fn(coords), dt, out=v[:, :d])
            v[:, :d] += noise * (eps * sqdt)
        else:
            np.multiply(noise, eps * sqdt, out=v[:, :d])
        model.step_inplace(coords, v, reduce=reduce_states)
        if (k + 1) in save_steps:
            saves[k + 1] = coords.copy()
    return saves


def _simulate(model, x0, t_end, dt, n_paths, seed, save_times, drift_fn,
              eps_fn, reduce_states, process, eps_record, potential_name=None):
    if t_end <= 0:
        raise ValidationError("t_end must be positive")
    if dt <= 0:
        raise ValidationError("dt must be positive")
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        n_steps = int(np.ceil(t_end / dt))
    if save_times is None:
        save_times = [t_end]
    save_steps = {}
    for t in save_times:
        k = int(round(t / dt))
        k = min(max(k, 0), n_steps)
        save_steps[k] = k * dt
    step_list = sorted(save_steps)

    coords0 = _resolve_x0(model, x0, n_paths, seed)
    chunk_slices = [(c, slice(c * CHUNK_PATHS, min((c + 1) * CHUNK_PATHS, n_paths)))
                    for c in range((n_paths + CHUNK_PATHS - 1) // CHUNK_PATHS)]

    states = np.empty((len(step_list), n_paths, model.repr_dim))

    def run_one(arg):
        cidx, sl = arg
        gen = chunk_generator(seed, cidx)
        chunk = np.ascontiguousarray(coords0[sl])
        saves = _evolve_chunk(model, chunk, gen, n_steps, dt, drift_fn, eps_fn,
                              set(step_list), reduce_states)
        return sl, saves

    workers = min(thread_count(), len(chunk_slices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, chunk_slices))
    else:
        results = [run_one(a) for a in chunk_slices]
    for sl, saves in results:
        for row, k in enumerate(step_list):
            states[row, sl] = saves[k]

    spec = SdeSpec(model=model.kind, process=process, dt=dt, t_end=t_end,
                   n_paths=n_paths, eps=eps_record, potential=potential_name)
    return PathEnsemble(model_kind=model.kind,
                        times=np.array([save_steps[k] for k in step_list]),
                        states=states, seed=seed, spec=spec.to_dict())


def simulate_diffusion(model, x0, t_end, dt, n_paths, seed=0, save_times=None,
                       eps=1.0, reduce_states=True):
    """Driftless hypoelliptic diffusion with i.i.d. N(0, dt) increments."""
    return _simulate(model, x0, t_end, dt, n_paths, seed, save_times,
                     drift_fn=None, eps_fn=lambda t: eps,
                     reduce_states=reduce_states, process="diffusion",
                     eps_record=eps)


def potential_drift(model, potential):
    """Drift callback v0 = -1/2 grad_hor U for the OU and annealing drivers."""
    def drift(coords):
        return -0.5 * potential.grad_hor(model, coords)
    return drift


def simulate_potential_ou(model, potential, y0, eps, t_end, dt, n_paths,
                          seed=0, save_times=None, reduce_states=True):
    """OU process with drift -1/2 Gamma(U, .) and constant noise scale eps."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    return _simulate(model, y0, t_end, dt, n_paths, seed, save_times,
                     drift_fn=potential_drift(model, potential),
                     eps_fn=lambda t: eps, reduce_states=reduce_states,
                     process="potential-ou", eps_record=eps,
                     potential_name=potential.name)


def simulate_annealing(model, potential, schedule, z0, t_end, dt=None,
                       n_paths=1, seed=0, save_times=None):
    """Time-inhomogeneous run; eps evaluated at the left endpoint of each step."""
    if not schedule.admissible:
        raise ValidationError(f"schedule not admissible: flags={schedule.flags}")
    if dt is None:
        dt = min(1e-3, schedule.eps(t_end) ** 2 / 10.0)
    return _simulate(model, z0, t_end, dt, n_paths, seed, save_times,
                     drift_fn=potential_drift(model, potential),
                     eps_fn=schedule.eps, reduce_states=True,
                     process="annealing", eps_record=schedule.constants(),
                     potential_name=potential.name)


def heat_ensemble(model, t, n_paths, dt, seed=0, reduce_states=False):
    """States W_t of the driftless diffusion from the identity (unreduced).

    The common-random-number workhorse behind semigroup evaluation and the
    gradient-commutation estimators: X_t^x = x * W_t for every start x, so
    translating one ensemble couples all starting points exactly.
    """
    ens = simulate_diffusion(model, None, t, dt, n_paths, seed=seed,
                             reduce_states=reduce_states)
    return ens.final


def semigroup_apply(model, f, t, x, n_paths, dt, seed=0):
    """Monte-Carlo estimate of P_t f(x) = E f(X_t^x), with standard error."""
    x = model.reduce(np.asarray(x, dtype=float) if x is not None else model.identity())
    if t < 0:
        raise ValidationError("t must be >= 0")
    if t == 0:
        return float(f.evaluate(x)), 0.0
    W = heat_ensemble(model, t, n_paths, dt, seed=seed)
    states = model.reduce(model.mul(x, W))
    vals = f.evaluate_batch(states)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def ensemble_from_id(name):
    """Re-instantiate a model from a PathEnsemble sidecar."""
    return make_model(name)
