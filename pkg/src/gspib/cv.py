"""Expert collective variables for the LJ7 cluster.

Smooth coordination numbers c_i = sum_j s(r_ij) built from the rational
switching function s(r) = (1 - (r/r0)^n) / (1 - (r/r0)^m), and the second
and third central moments of {c_i}.  mu2 measures how unevenly coordinated
the cluster is; mu3's sign separates configurations with a few
over-coordinated particles from those with under-coordinated ones, which is
what distinguishes the compact hexagon from the elongated isomers.

Values and analytic Cartesian gradients are exposed for use as bias CVs.
"""

import numpy as np

from . import _fast


class SwitchParams:
    """Parameters of the rational switching function.

    Defaults r0 = 1.5 sigma, n = 6, m = 12 put the crossover between the
    first and second neighbor shells of the LJ7 minima.
    """

    def __init__(self, r0=1.5, n=6, m=12):
        if r0 <= 0.0:
            raise ValueError("r0 must be positive")
        if not (isinstance(n, (int, np.integer)) and isinstance(m, (int, np.integer))):
            raise ValueError("exponents must be integers")
        if not (0 < n < m):
            raise ValueError("exponents must satisfy m > n > 0")
        if n % 2 or m % 2:
            raise ValueError("exponents must be even")
        self.r0 = float(r0)
        self.n = int(n)
        self.m = int(m)

    def __repr__(self):
        return f"SwitchParams(r0={self.r0}, n={self.n}, m={self.m})"


class MomentCv:
    """Central moment of the coordination numbers, order 2 or 3."""

    def __init__(self, order, switch=None):
        if order not in (2, 3):
            raise ValueError("moment order must be 2 or 3")
        self.order = int(order)
        self.switch = switch if switch is not None else SwitchParams()

    @property
    def name(self):
        return f"mu{self.order}"

    def __repr__(self):
        return f"MomentCv(order={self.order}, switch={self.switch!r})"


def switch_value(r, p=None):
    """Switching function and its derivative with respect to r.

    Works on scalars or arrays.  The ratio is evaluated in the equivalent
    geometric-sum form (sum_{k<n} x^k)/(sum_{k<m} x^k), which is finite and
    smooth at r = r0 where the textbook expression is 0/0.
    """
    if p is None:
        p = SwitchParams()
    x = np.asarray(r, dtype=np.float64) / p.r0
    num = np.zeros_like(x)
    num_d = np.zeros_like(x)
    den = np.zeros_like(x)
    den_d = np.zeros_like(x)
    xp = np.ones_like(x)
    for k in range(p.m):
        if k < p.n:
            num += xp
        den += xp
        if k + 1 < p.n:
            num_d += (k + 1) * xp
        if k + 1 < p.m:
            den_d += (k + 1) * xp
        if k + 1 < p.m:
            xp = xp * x
    s = num / den
    ds_dr = (num_d * den - num * den_d) / (den * den) / p.r0
    if np.isscalar(r):
        return float(s), float(ds_dr)
    return s, ds_dr


def coordination_numbers(positions, p=None):
    """c_i = sum_{j != i} s(r_ij) for every particle."""
    if p is None:
        p = SwitchParams()
    pos = np.asarray(positions, dtype=np.float64)
    npart = pos.shape[0]
    delta = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", delta, delta)
    iu = np.triu_indices(npart, 1)
    r = np.sqrt(r2[iu])
    if np.any(r == 0.0):
        raise ValueError("coincident particles: coordination undefined")
    s, _ = switch_value(r, p)
    c = np.zeros(npart)
    np.add.at(c, iu[0], s)
    np.add.at(c, iu[1], s)
    return c


def moment_cv(positions, mcv):
    """Value of mu2 or mu3 and its analytic (N, 2) Cartesian gradient."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    grad = np.empty_like(pos)
    value = _fast.moment_value_grad(pos, mcv.order, mcv.switch.r0,
                                    mcv.switch.n, mcv.switch.m, grad)
    return float(value), grad


def moments_series(frames, p=None):
    """(mu2, mu3) for a stack of frames; returns an (F, 2) array."""
    if p is None:
        p = SwitchParams()
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    out = np.empty((frames.shape[0], 2))
    _fast.moments_series(frames, p.r0, p.n, p.m, out)
    return out


def write_cv_series(path, steps, mu2, mu3, z=None):
    """CSV timeseries: step,mu2,mu3[,z1,z2]."""
    header = "step,mu2,mu3"
    if z is not None:
        header += ",z1,z2"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, s in enumerate(steps):
            row = f"{int(s)},{mu2[i]:.10g},{mu3[i]:.10g}"
            if z is not None:
                row += f",{z[i, 0]:.10g},{z[i, 1]:.10g}"
            fh.write(row + "\n")


def read_cv_series(path):
    """Inverse of write_cv_series; returns (steps, columns dict)."""
    with open(path) as fh:
        names = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    steps = data[:, 0].astype(np.int64)
    cols = {name: data[:, k] for k, name in enumerate(names) if k > 0}
    return steps, cols
