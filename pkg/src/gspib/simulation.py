"""Langevin dynamics for the 2-D Lennard-Jones heptamer in reduced units.

Units: lengths in sigma, energies in epsilon, masses 1, time in
tau = sqrt(m sigma^2 / epsilon).  Temperatures are quoted as kT in epsilon.

The integrator is the BAOAB splitting of underdamped Langevin dynamics.  A
half-harmonic restraint tethers every particle to the instantaneous centroid
once it strays beyond an onset radius, which prevents evaporation without
exerting any net force on the cluster.

Two execution paths advance the same dynamics: a per-step Python loop (used
when an arbitrary bias-force callback is supplied) and a compiled whole-run
driver for plain sampling.  Both consume one (N, 2) block of Philox normals
per step from the same stream, so they produce bitwise identical
trajectories.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _fast

TRAJ_MAGIC = b"LJ7T"
TRAJ_VERSION = 1
_HEADER = struct.Struct("<4sIIQddQ")


class EvaporationError(RuntimeError):
    """A particle escaped the cluster beyond the allowed extent."""


class ConvergenceError(RuntimeError):
    """An iterative minimization failed to reach its tolerance."""


def make_generator(seed):
    """Counter-based Philox generator; cheap to create, stable across runs."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed, n):
    """Derive n independent child seeds from a master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


@dataclass
class SimConfig:
    kT: float = 0.2
    n_steps: int = 1000
    save_stride: int = 100
    seed: int = 0
    dt: float = 0.005
    friction: float = 1.0
    restraint_k: float = 25.0
    restraint_onset: float = 2.5
    n_particles: int = 7

    def __post_init__(self):
        if self.kT <= 0.0:
            raise ValueError("kT must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.friction < 0.0:
            raise ValueError("friction must be non-negative")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.save_stride < 1:
            raise ValueError("save_stride must be >= 1")
        if self.n_particles < 2:
            raise ValueError("need at least two particles")

    @property
    def ou_coeffs(self):
        """(c1, c2) for the O-step: v -> c1 v + c2 xi."""
        c1 = np.exp(-self.friction * self.dt)
        c2 = np.sqrt(self.kT * (1.0 - c1 * c1))
        return c1, c2

    @property
    def evaporation_limit(self):
        """Largest tolerated pair distance, past the restraint's reach."""
        return 2.0 * self.restraint_onset + 4.0


@dataclass
class SystemState:
    positions: np.ndarray
    velocities: np.ndarray
    rng: np.random.Generator
    step: int = 0
    force: np.ndarray = None  # LJ + restraint at current positions
    potential: float = 0.0


def init_state(config, positions, velocities=None):
    """Build a SystemState; velocities default to a Maxwell-Boltzmann draw.

    The velocity draw consumes the first (N, 2) normal block of the stream,
    so a given (seed, initial positions) pair fixes the entire trajectory.
    """
    pos = np.array(positions, dtype=np.float64)
    if pos.shape != (config.n_particles, 2):
        raise ValueError("positions must have shape (n_particles, 2)")
    rng = make_generator(config.seed)
    if velocities is None:
        vel = np.sqrt(config.kT) * rng.standard_normal(pos.shape)
    else:
        vel = np.array(velocities, dtype=np.float64)
    force = np.empty_like(pos)
    pot = _fast.total_forces(pos, force, config.restraint_k, config.restraint_onset)
    return SystemState(pos, vel, rng, 0, force, pot)


def lj_energy(positions):
    """Total 12-6 Lennard-Jones energy over all pairs (vectorized numpy)."""
    pos = np.asarray(positions, dtype=np.float64)
    delta = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", delta, delta)
    iu = np.triu_indices(pos.shape[0], 1)
    r2 = r2[iu]
    if np.any(r2 == 0.0):
        raise ValueError("coincident particles: LJ energy undefined")
    inv6 = r2 ** -3
    return float(np.sum(4.0 * (inv6 * inv6 - inv6)))


def lj_forces(positions):
    """Forces -dU/dx of the pairwise LJ potential, shape (N, 2)."""
    pos = np.asarray(positions, dtype=np.float64)
    delta = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", delta, delta)
    np.fill_diagonal(r2, 1.0)
    if np.any(r2[~np.eye(pos.shape[0], dtype=bool)] == 0.0):
        raise ValueError("coincident particles: LJ force undefined")
    inv2 = 1.0 / r2
    inv6 = inv2 ** 3
    fr = 24.0 * (2.0 * inv6 * inv6 - inv6) * inv2
    np.fill_diagonal(fr, 0.0)
    return np.einsum("ij,ijk->ik", fr, delta)


def restraint_force(positions, k=25.0, onset=2.5):
    """Half-harmonic centroid restraint.  Returns (forces, energy).

    U = sum_i 0.5 k (|x_i - xbar| - onset)^2 for particles beyond the onset.
    The centroid's dependence on every coordinate contributes a -1/N share of
    each particle term, so the forces sum to zero exactly.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    centroid = pos.mean(axis=0)
    rel = pos - centroid
    d = np.sqrt(np.einsum("ik,ik->i", rel, rel))
    out = np.maximum(d - onset, 0.0)
    energy = float(0.5 * k * np.sum(out * out))
    coef = np.where(d > onset, k * out / np.where(d > 0.0, d, 1.0), 0.0)
    per = coef[:, None] * rel
    forces = -per + per.sum(axis=0) / n
    return forces, energy


def potential_energy(positions, config):
    """LJ plus restraint energy under a config's restraint parameters."""
    _, er = restraint_force(positions, config.restraint_k, config.restraint_onset)
    return lj_energy(positions) + er


def kinetic_energy(velocities):
    return float(0.5 * np.sum(np.asarray(velocities) ** 2))


def langevin_step(state, config, external_force=None):
    """Advance one BAOAB step in place and return the state.

    ``external_force`` (shape (N, 2)), if given, is the bias force evaluated
    at the current positions; it is held constant across the step's two
    half-kicks while LJ + restraint are re-evaluated at the new positions.
    """
    c1, c2 = config.ou_coeffs
    noise = state.rng.standard_normal(state.positions.shape)
    if external_force is None:
        state.potential = _fast.baoab_step(
            state.positions, state.velocities, state.force, noise,
            config.dt, c1, c2, config.restraint_k, config.restraint_onset)
    else:
        ext = np.asarray(external_force, dtype=np.float64)
        state.potential = _fast.baoab_step_ext(
            state.positions, state.velocities, state.force, ext, noise,
            config.dt, c1, c2, config.restraint_k, config.restraint_onset)
    state.step += 1
    return state


@dataclass
class Trajectory:
    """Frames saved from a run plus the metadata needed to interpret them."""
    steps: np.ndarray
    positions: np.ndarray
    dt: float
    kT: float
    seed: int
    save_stride: int

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def n_particles(self):
        return self.positions.shape[1]

    def times(self):
        return self.steps * self.dt

    def save(self, path):
        header = _HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, self.n_particles,
                              self.save_stride, self.dt, self.kT, self.seed)
        rec = np.dtype([("step", "<u8"), ("pos", "<f8", (self.n_particles, 2))])
        body = np.empty(self.n_frames, dtype=rec)
        body["step"] = self.steps
        body["pos"] = self.positions
        with open(path, "wb") as fh:
            fh.write(header)
            body.tofile(fh)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
            if len(raw) < _HEADER.size:
                raise ValueError("truncated trajectory header")
            magic, version, n_part, stride, dt, kT, seed = _HEADER.unpack(raw)
            if magic != TRAJ_MAGIC:
                raise ValueError("not a trajectory file (bad magic)")
            if version != TRAJ_VERSION:
                raise ValueError(f"unsupported trajectory version {version}")
            rec = np.dtype([("step", "<u8"), ("pos", "<f8", (n_part, 2))])
            body = np.fromfile(fh, dtype=rec)
        return cls(body["step"].astype(np.int64), np.ascontiguousarray(body["pos"]),
                   dt, kT, int(seed), int(stride))

    def to_csv(self, path):
        n = self.n_particles
        cols = ",".join(f"x{i},y{i}" for i in range(n))
        with open(path, "w") as fh:
            fh.write(f"step,{cols}\n")
            for s, frame in zip(self.steps, self.positions):
                vals = ",".join("%.17g" % v for v in frame.ravel())
                fh.write(f"{int(s)},{vals}\n")


def _n_frames(n_steps, stride):
    if n_steps == 0:
        return 1
    return (n_steps + stride - 1) // stride


def run_trajectory(config, positions, bias=None, velocities=None, fast=None,
                   return_state=False):
    """Integrate ``config.n_steps`` of Langevin dynamics from ``positions``.

    The state at global step s is recorded whenever s % save_stride == 0, so
    n_steps = 0 yields exactly the initial frame.  ``bias``, if given, is
    called with the current (N, 2) positions once per step and must return a
    (N, 2) force array or a (forces, energy) tuple.

    ``fast`` selects the compiled whole-run driver; it defaults to on for
    unbiased runs and is unavailable with a bias callback.  Both paths are
    bitwise identical.  Raises EvaporationError if any pair distance reaches
    the evaporation limit at a save point.
    """
    state = init_state(config, positions, velocities)
    if fast is None:
        fast = bias is None
    if fast and bias is not None:
        raise ValueError("fast path does not take a bias callback")
    nf = _n_frames(config.n_steps, config.save_stride)
    save_pos = np.empty((nf, config.n_particles, 2))
    save_steps = np.empty(nf, dtype=np.int64)
    c1, c2 = config.ou_coeffs
    limit = config.evaporation_limit

    if fast:
        nsaved = 0
        s0 = 0
        chunk = 16384
        while s0 < config.n_steps:
            m = min(chunk, config.n_steps - s0)
            noise = state.rng.standard_normal((m, config.n_particles, 2))
            nsaved, status, s_stop = _fast.run_unbiased_chunk(
                state.positions, state.velocities, state.force, noise, s0,
                config.dt, c1, c2, config.restraint_k, config.restraint_onset,
                config.save_stride, limit, save_pos, save_steps, nsaved)
            if status == _fast.EVAPORATED:
                raise EvaporationError(f"cluster evaporated at step {s_stop}")
            s0 += m
            state.step = s0
        state.potential = _fast.total_forces(
            state.positions, state.force, config.restraint_k,
            config.restraint_onset)
    else:
        nsaved = 0
        for s in range(config.n_steps):
            if s % config.save_stride == 0:
                if _fast.max_pair_distance(state.positions) >= limit:
                    raise EvaporationError(f"cluster evaporated at step {s}")
                save_steps[nsaved] = s
                save_pos[nsaved] = state.positions
                nsaved += 1
            ext = None
            if bias is not None:
                ext = bias(state.positions)
                if isinstance(ext, tuple):
                    ext = ext[0]
            langevin_step(state, config, ext)

    if config.n_steps == 0:
        if _fast.max_pair_distance(state.positions) >= limit:
            raise EvaporationError("initial configuration already evaporated")
        save_steps[0] = 0
        save_pos[0] = state.positions
        nsaved = 1

    traj = Trajectory(save_steps[:nsaved].copy(), save_pos[:nsaved].copy(),
                      config.dt, config.kT, config.seed, config.save_stride)
    if return_state:
        return traj, state
    return traj


def quench(positions, gtol=1.0e-8, max_iter=1_000_000):
    """Steepest-descent minimization of the pure LJ energy.

    Returns (minimized positions, energy).  Deterministic for a given input;
    raises ConvergenceError if the gradient tolerance is not met.
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    out, energy, n_iter, ok = _fast.quench_lj(pos, gtol, max_iter)
    if not ok:
        raise ConvergenceError(
            f"quench did not converge within {max_iter} iterations")
    return out, float(energy)
