"""Well-tempered metadynamics over differentiable collective variables.

A BiasState owns the deposited Gaussian hills and the well-tempered height
bookkeeping; bias_force chains dV/ds through a CV's Cartesian Jacobian so the
same machinery drives the expert moments (mu2, mu3), the learned latent
(z1, z2), or any 1-d slice of either.  wtmetad_run integrates LJ7 Langevin
dynamics under the growing bias; reweight turns the final bias into
per-frame weights for FES estimation.

Hills are summed directly (no grid): kernels further than 8.5 sigma are
skipped inside the compiled loop, which perturbs the sum below 1e-12 even at
2e5 kernels, so evaluation stays effectively exact.  The bias force may be
held for bias_stride steps between recomputations (a multiple-time-step
approximation); bias_stride=1 reproduces the per-step callback path bitwise.
"""

from dataclasses import dataclass

import numpy as np

from . import _fast
from .cv import MomentCv, moment_cv
from .nn import LATENT_DIM, PackedEncoder, encoder_forward, input_gradient
from .simulation import (EvaporationError, Trajectory, init_state, _n_frames)


@dataclass
class GaussianKernel:
    """One deposited hill: h * prod_d exp(-(s_d - c_d)^2 / (2 w_d^2))."""

    center: np.ndarray
    widths: np.ndarray
    height: float

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=np.float64))
        if self.center.shape != self.widths.shape:
            raise ValueError("center and widths must have the same dimension")
        if np.any(self.widths <= 0.0):
            raise ValueError("widths must be positive")
        if self.height <= 0.0:
            raise ValueError("height must be positive")


class BiasState:
    """Deposited hills plus the well-tempered height rule.

    All hills share the widths fixed at construction (one sigma per CV
    component; derive them from the training data with widths_from_series).
    ``bias_factor`` may be inf, which makes heights constant at w0 (standard
    metadynamics, the infrequent-metadynamics setting).
    """

    def __init__(self, widths, kT, w0=0.05, pace=500, bias_factor=10.0):
        self.widths = np.atleast_1d(np.asarray(widths, dtype=np.float64)).copy()
        if self.widths.ndim != 1 or np.any(self.widths <= 0.0):
            raise ValueError("widths must be a 1-d positive vector")
        if kT <= 0.0:
            raise ValueError("kT must be positive")
        if w0 <= 0.0:
            raise ValueError("base height w0 must be positive")
        if pace < 1:
            raise ValueError("pace must be >= 1 step")
        if not bias_factor > 1.0:
            raise ValueError("bias_factor must exceed 1")
        self.kT = float(kT)
        self.w0 = float(w0)
        self.pace = int(pace)
        self.bias_factor = float(bias_factor)
        self.cv_dim = self.widths.size
        self._inv2w2 = 1.0 / (2.0 * self.widths ** 2)
        self._cap = 1024
        self._centers = np.empty((self._cap, self.cv_dim))
        self._heights = np.empty(self._cap)
        self._steps = np.empty(self._cap, dtype=np.int64)
        self._n = 0

    @property
    def n_kernels(self):
        return self._n

    @property
    def centers(self):
        return self._centers[:self._n]

    @property
    def heights(self):
        return self._heights[:self._n]

    @property
    def steps(self):
        return self._steps[:self._n]

    @property
    def kernels(self):
        return [GaussianKernel(self._centers[j].copy(), self.widths.copy(),
                               float(self._heights[j]))
                for j in range(self._n)]

    def _check_dim(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if s.shape != (self.cv_dim,):
            raise ValueError(f"CV point must have dimension {self.cv_dim}")
        return s

    def bias_value(self, s):
        """V(s) = sum of deposited Gaussians, >= 0."""
        s = self._check_dim(s)
        return float(_fast.hills_value(self._centers, self._heights,
                                       self._inv2w2, self._n, s))

    def bias_grad(self, s):
        """(V(s), dV/ds) in one pass."""
        s = self._check_dim(s)
        grad = np.empty(self.cv_dim)
        v = _fast.hills_value_grad(self._centers, self._heights, self._inv2w2,
                                   self._n, s, grad)
        return float(v), grad

    def bias_values(self, pts):
        """V over a (T, D) array of CV points."""
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[1] != self.cv_dim:
            raise ValueError(f"CV points must have dimension {self.cv_dim}")
        out = np.empty(pts.shape[0])
        _fast.hills_values_many(self._centers, self._heights, self._inv2w2,
                                self._n, pts, out)
        return out

    def next_height(self, s):
        """The well-tempered height a deposit at s would get right now."""
        kbdt = (self.bias_factor - 1.0) * self.kT
        if not np.isfinite(kbdt):
            return self.w0
        return self.w0 * np.exp(-self.bias_value(s) / kbdt)

    def deposit(self, s, step=-1):
        """Append one hill at s with the tempered height; returns self."""
        s = self._check_dim(s)
        h = self.next_height(s)
        if self._n == self._cap:
            self._cap *= 2
            self._centers = np.concatenate(
                [self._centers, np.empty_like(self._centers)])
            self._heights = np.concatenate(
                [self._heights, np.empty_like(self._heights)])
            self._steps = np.concatenate(
                [self._steps, np.empty_like(self._steps)])
        self._centers[self._n] = s
        self._heights[self._n] = h
        self._steps[self._n] = step
        self._n += 1
        return self

    def hills_to_csv(self, path):
        """step, center components, widths, height — one row per deposit."""
        d = self.cv_dim
        cols = [f"c{k}" for k in range(d)] + [f"w{k}" for k in range(d)]
        with open(path, "w") as fh:
            fh.write("step," + ",".join(cols) + ",height\n")
            for j in range(self._n):
                row = [str(int(self._steps[j]))]
                row += ["%.17g" % v for v in self._centers[j]]
                row += ["%.17g" % v for v in self.widths]
                row.append("%.17g" % self._heights[j])
                fh.write(",".join(row) + "\n")

    def hills_to_text(self, path, cv_names=None):
        """HILLS-style whitespace table mirroring the CSV, for external tools."""
        d = self.cv_dim
        if cv_names is None:
            cv_names = [f"c{k}" for k in range(d)]
        fields = (list(cv_names) + [f"sigma_{n}" for n in cv_names]
                  + ["height", "biasf"])
        with open(path, "w") as fh:
            fh.write("#! FIELDS time " + " ".join(fields) + "\n")
            for j in range(self._n):
                row = ["%d" % self._steps[j]]
                row += ["%.9f" % v for v in self._centers[j]]
                row += ["%.9f" % v for v in self.widths]
                row += ["%.9f" % self._heights[j], "%g" % self.bias_factor]
                fh.write(" ".join(row) + "\n")


def read_hills_csv(path, kT, w0=0.05, pace=500, bias_factor=10.0):
    """Rebuild a BiasState from a hills CSV (uniform widths required)."""
    with open(path) as fh:
        n_lines = sum(1 for line in fh if line.strip())
    if n_lines <= 1:
        raise ValueError("hills file holds no kernels")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = (data.shape[1] - 2) // 2
    widths = data[0, 1 + d:1 + 2 * d]
    if np.any(np.abs(data[:, 1 + d:1 + 2 * d] - widths) > 1e-12):
        raise ValueError("hills file mixes kernel widths")
    state = BiasState(widths, kT, w0=w0, pace=pace, bias_factor=bias_factor)
    n = data.shape[0]
    while state._cap < n:
        state._cap *= 2
    state._centers = np.empty((state._cap, d))
    state._heights = np.empty(state._cap)
    state._steps = np.empty(state._cap, dtype=np.int64)
    state._centers[:n] = data[:, 1:1 + d]
    state._heights[:n] = data[:, -1]
    state._steps[:n] = data[:, 0].astype(np.int64)
    state._n = n
    return state


def widths_from_series(cv_values, fraction=0.1):
    """Hill widths as a fraction of the per-component std of a CV series.

    Learned CVs carry an arbitrary scale, so widths have to be data-derived;
    0.1x the unbiased training-run std is the working default.
    """
    cv_values = np.asarray(cv_values, dtype=np.float64)
    if cv_values.ndim == 1:
        cv_values = cv_values[:, None]
    std = cv_values.std(axis=0)
    if np.any(std == 0.0):
        raise ValueError("CV component with zero variance")
    return fraction * std


# -- differentiable CV adapters ----------------------------------------------

class MomentsCv:
    """Coordination-moment CV vector (any subset of mu2, mu3)."""

    def __init__(self, orders=(2, 3), switch=None):
        orders = tuple(int(o) for o in orders)
        if not orders:
            raise ValueError("need at least one moment order")
        self._mcvs = [MomentCv(o, switch) for o in orders]
        self.orders = orders
        self.names = tuple(f"mu{o}" for o in orders)
        self.dim = len(orders)

    def value(self, positions):
        return np.array([moment_cv(positions, m)[0] for m in self._mcvs])

    def value_and_jac(self, positions):
        vals = np.empty(self.dim)
        jac = np.empty((self.dim, len(positions), 2))
        for k, m in enumerate(self._mcvs):
            vals[k], jac[k] = moment_cv(positions, m)
        return vals, jac


class LearnedCv:
    """Latent-mean CV (z1, z2) of a trained encoder, or one component.

    Uses the packed tape-free evaluator when the architecture allows it and
    falls back to the autodiff tape otherwise (attention or rbf encoders).
    """

    def __init__(self, model, components=(0, 1)):
        encoder = getattr(model, "encoder", model)
        self.encoder = encoder
        components = tuple(int(c) for c in components)
        if not components or any(not 0 <= c < LATENT_DIM for c in components):
            raise ValueError(f"components must index the {LATENT_DIM}-d latent")
        self.components = components
        self.names = tuple(f"z{c + 1}" for c in components)
        self.dim = len(components)
        try:
            self._packed = PackedEncoder(encoder)
        except ValueError:
            self._packed = None

    def value(self, positions):
        if self._packed is not None:
            mu = self._packed.mu(np.asarray(positions, dtype=np.float64))
        else:
            mu, _ = encoder_forward(self.encoder, positions)
        return mu[list(self.components)]

    def value_and_jac(self, positions):
        if self._packed is not None:
            mu, jac = self._packed.mu_jac(np.asarray(positions,
                                                     dtype=np.float64))
            sel = list(self.components)
            return mu[sel], jac[sel]
        mu, _ = encoder_forward(self.encoder, positions)
        jac = np.stack([input_gradient(self.encoder, positions, c)
                        for c in self.components])
        return mu[list(self.components)], jac


def bias_force(state, positions, cv):
    """(-dV(s(x))/dx, V) for the current hills; zero kernels -> zero force."""
    positions = np.asarray(positions, dtype=np.float64)
    if state.n_kernels == 0:
        s = cv.value(positions)
        return np.zeros_like(positions), 0.0
    s, jac = cv.value_and_jac(positions)
    v, dvds = state.bias_grad(s)
    return -np.einsum("d,dnk->nk", dvds, jac), v


# -- drivers -------------------------------------------------------------------

@dataclass
class MetadResult:
    """Biased trajectory with its CV/bias records and the final hills."""

    traj: Trajectory
    cv_series: np.ndarray          # (F, D) CV at each saved frame
    bias_series: np.ndarray        # (F,) V(s_t) at the frame's save time
    bias: BiasState
    cv_names: tuple = ()


def wtmetad_run(config, bias, cv, positions, bias_stride=1, velocities=None):
    """Integrate config.n_steps under a growing well-tempered bias.

    Hills are dropped at the current CV every ``bias.pace`` steps (first at
    step pace, none at step 0); frames, CV values, and the pre-deposit bias
    energy are recorded at every save_stride multiple, before stepping, as in
    run_trajectory.  The bias force is recomputed every ``bias_stride`` steps
    and frozen in between; save_stride and pace must be multiples of it.
    """
    if bias.cv_dim != cv.dim:
        raise ValueError("bias state and CV dimensions differ")
    if bias_stride < 1:
        raise ValueError("bias_stride must be >= 1")
    if config.save_stride % bias_stride or bias.pace % bias_stride:
        raise ValueError("save_stride and pace must be multiples of "
                         "bias_stride")
    state = init_state(config, positions, velocities)
    nf = _n_frames(config.n_steps, config.save_stride)
    save_pos = np.empty((nf, config.n_particles, 2))
    save_steps = np.empty(nf, dtype=np.int64)
    cv_series = np.empty((nf, cv.dim))
    bias_series = np.empty(nf)
    c1, c2 = config.ou_coeffs
    limit = config.evaporation_limit
    nsaved = 0
    s = 0
    while True:
        # every loop iteration is a force-refresh point, so the CV and its
        # Jacobian are always current here
        sval, jac = cv.value_and_jac(state.positions)
        if s % config.save_stride == 0 and nsaved < nf:
            if _fast.max_pair_distance(state.positions) >= limit:
                raise EvaporationError(f"cluster evaporated at step {s}")
            save_steps[nsaved] = s
            save_pos[nsaved] = state.positions
            cv_series[nsaved] = sval
            bias_series[nsaved] = bias.bias_value(sval)
            nsaved += 1
        if s >= config.n_steps:
            break
        if s % bias.pace == 0 and s > 0:
            bias.deposit(sval, step=s)
        _, dvds = bias.bias_grad(sval)
        ext = -np.einsum("d,dnk->nk", dvds, jac)
        m = min(bias_stride, config.n_steps - s)
        noise = state.rng.standard_normal((m, config.n_particles, 2))
        _fast.run_biased_chunk(state.positions, state.velocities, state.force,
                               ext, noise, config.dt, c1, c2,
                               config.restraint_k, config.restraint_onset)
        s += m
        state.step = s
    traj = Trajectory(save_steps[:nsaved].copy(), save_pos[:nsaved].copy(),
                      config.dt, config.kT, config.seed, config.save_stride)
    return MetadResult(traj, cv_series[:nsaved].copy(),
                       bias_series[:nsaved].copy(), bias,
                       tuple(getattr(cv, "names", ())))


def reweight(bias, cv_series, kT, burn_in=0.5):
    """Final-bias weights exp(+V_final(s_t)/kT), mean-normalized.

    Returns (weights, start): weights for frames start..end after discarding
    the first ``burn_in`` fraction.  Assumes the well-tempered bias has
    stopped evolving appreciably over the kept window.
    """
    cv_series = np.asarray(cv_series, dtype=np.float64)
    if cv_series.ndim == 1:
        cv_series = cv_series[:, None]
    if not 0.0 <= burn_in < 1.0:
        raise ValueError("burn_in must be in [0, 1)")
    start = int(len(cv_series) * burn_in)
    kept = cv_series[start:]
    if len(kept) == 0:
        raise ValueError("no frames left after burn-in")
    if bias.n_kernels == 0:
        return np.ones(len(kept)), start
    v = bias.bias_values(kept)
    logw = (v - v.max()) / kT
    w = np.exp(logw)
    return w / w.mean(), start


# -- double-well toy -----------------------------------------------------------

def doublewell_potential(x):
    """U(x) = x^4 - 2 x^2; minima at x = +-1 (U = -1), barrier at 0."""
    x = np.asarray(x, dtype=np.float64)
    return x ** 4 - 2.0 * x ** 2


def wtmetad_doublewell(n_steps, kT=0.3, dt=0.005, friction=1.0, x0=-1.0,
                       seed=0, w0=0.05, sigma=0.1, pace=500, bias_factor=10.0,
                       save_stride=20):
    """Fully compiled 1-d WTmetaD run in the double-well potential.

    Returns (xs, vbias, state): saved positions, bias energy at each saved
    point, and the final BiasState for reweighting.  This is the module's
    end-to-end oracle; the reweighted FES must match U(x) up to a constant.
    """
    n_hills = n_steps // pace if pace <= n_steps else 0
    centers = np.empty(max(n_hills, 1))
    heights = np.empty(max(n_hills, 1))
    nf = _n_frames(n_steps, save_stride)
    xs = np.empty(nf)
    vb = np.empty(nf)
    nh, nsv = _fast.run_doublewell_wtmetad(
        n_steps, dt, kT, friction, x0, seed, w0, sigma, pace, bias_factor,
        save_stride, centers, heights, xs, vb)
    state = BiasState([sigma], kT, w0=w0, pace=pace, bias_factor=bias_factor)
    while state._cap < max(nh, 1):
        state._cap *= 2
    state._centers = np.empty((state._cap, 1))
    state._heights = np.empty(state._cap)
    state._steps = np.empty(state._cap, dtype=np.int64)
    state._centers[:nh, 0] = centers[:nh]
    state._heights[:nh] = heights[:nh]
    state._steps[:nh] = pace * np.arange(1, nh + 1)
    state._n = nh
    return xs[:nsv], vb[:nsv], state
