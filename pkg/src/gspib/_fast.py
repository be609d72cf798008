"""Numba-compiled inner loops.

Everything here is private plumbing: plain float64 loops over (N, 2)
coordinate arrays, kept free of Python objects so whole trajectories can be
advanced without interpreter overhead.  The public modules wrap these kernels
and carry the documentation; tests cross-check them against the vectorized
numpy implementations.
"""

import numpy as np
from numba import njit

# status codes returned by run drivers
OK = 0
EVAPORATED = 1


@njit(cache=True)
def lj_energy_forces(pos, force):
    """Fill ``force`` with the 12-6 Lennard-Jones forces; return the energy.

    Full pairwise sum, reduced units (epsilon = sigma = 1).  Adds nothing:
    ``force`` is overwritten.
    """
    n = pos.shape[0]
    for i in range(n):
        force[i, 0] = 0.0
        force[i, 1] = 0.0
    energy = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r2 = dx * dx + dy * dy
            inv2 = 1.0 / r2
            inv6 = inv2 * inv2 * inv2
            inv12 = inv6 * inv6
            energy += 4.0 * (inv12 - inv6)
            # dU/dr * (1/r) = -24 (2 r^-12 - r^-6) / r^2
            fr = 24.0 * (2.0 * inv12 - inv6) * inv2
            force[i, 0] += fr * dx
            force[i, 1] += fr * dy
            force[j, 0] -= fr * dx
            force[j, 1] -= fr * dy
    return energy


@njit(cache=True)
def restraint_energy_forces(pos, force, k, onset):
    """Add the half-harmonic centroid-container forces to ``force``.

    Each particle beyond ``onset`` from the instantaneous centroid feels
    0.5*k*(d-onset)^2; the centroid coupling redistributes -1/N of every
    contribution so the net restraint force is exactly zero.
    """
    n = pos.shape[0]
    cx = 0.0
    cy = 0.0
    for i in range(n):
        cx += pos[i, 0]
        cy += pos[i, 1]
    cx /= n
    cy /= n
    energy = 0.0
    sx = 0.0
    sy = 0.0
    for i in range(n):
        dx = pos[i, 0] - cx
        dy = pos[i, 1] - cy
        d = np.sqrt(dx * dx + dy * dy)
        if d > onset:
            exc = d - onset
            energy += 0.5 * k * exc * exc
            c = k * exc / d
            force[i, 0] -= c * dx
            force[i, 1] -= c * dy
            sx += c * dx
            sy += c * dy
    sx /= n
    sy /= n
    for i in range(n):
        force[i, 0] += sx
        force[i, 1] += sy
    return energy


@njit(cache=True)
def total_forces(pos, force, k, onset):
    e = lj_energy_forces(pos, force)
    e += restraint_energy_forces(pos, force, k, onset)
    return e


@njit(cache=True)
def max_pair_distance(pos):
    n = pos.shape[0]
    best = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            d2 = dx * dx + dy * dy
            if d2 > best:
                best = d2
    return np.sqrt(best)


@njit(cache=True)
def baoab_step(pos, vel, force, noise, dt, c1, c2, k, onset):
    """One BAOAB Langevin step in place; ``force`` must hold the total force
    at the incoming positions and is left holding the force at the new ones.

    Any external (bias) force for this step must already be folded into
    ``force`` by the caller; it is treated as constant across the step and is
    passed back via ``ext`` so the trailing half-kick can reuse it.
    """
    n = pos.shape[0]
    half = 0.5 * dt
    for i in range(n):
        vel[i, 0] += half * force[i, 0]
        vel[i, 1] += half * force[i, 1]
        pos[i, 0] += half * vel[i, 0]
        pos[i, 1] += half * vel[i, 1]
        vel[i, 0] = c1 * vel[i, 0] + c2 * noise[i, 0]
        vel[i, 1] = c1 * vel[i, 1] + c2 * noise[i, 1]
        pos[i, 0] += half * vel[i, 0]
        pos[i, 1] += half * vel[i, 1]
    e = total_forces(pos, force, k, onset)
    for i in range(n):
        vel[i, 0] += half * force[i, 0]
        vel[i, 1] += half * force[i, 1]
    return e


@njit(cache=True)
def baoab_step_ext(pos, vel, force, ext, noise, dt, c1, c2, k, onset):
    """BAOAB step with an external force held fixed across the step.

    ``force`` holds LJ+restraint at the incoming positions; ``ext`` is the
    external contribution evaluated there.  On return ``force`` holds
    LJ+restraint at the new positions (external NOT included).
    """
    n = pos.shape[0]
    half = 0.5 * dt
    for i in range(n):
        vel[i, 0] += half * (force[i, 0] + ext[i, 0])
        vel[i, 1] += half * (force[i, 1] + ext[i, 1])
        pos[i, 0] += half * vel[i, 0]
        pos[i, 1] += half * vel[i, 1]
        vel[i, 0] = c1 * vel[i, 0] + c2 * noise[i, 0]
        vel[i, 1] = c1 * vel[i, 1] + c2 * noise[i, 1]
        pos[i, 0] += half * vel[i, 0]
        pos[i, 1] += half * vel[i, 1]
    e = total_forces(pos, force, k, onset)
    for i in range(n):
        vel[i, 0] += half * (force[i, 0] + ext[i, 0])
        vel[i, 1] += half * (force[i, 1] + ext[i, 1])
    return e


@njit(cache=True)
def run_unbiased_chunk(pos, vel, force, noise, step0, dt, c1, c2, k, onset,
                       stride, evap_limit, save_pos, save_steps, nsaved):
    """Advance ``noise.shape[0]`` steps, recording frames at stride multiples.

    Frames are recorded *before* the step that leaves them, i.e. the state at
    global step s is saved whenever s % stride == 0.  Returns the updated
    saved-frame count and a status code.
    """
    nchunk = noise.shape[0]
    for t in range(nchunk):
        s = step0 + t
        if s % stride == 0:
            if max_pair_distance(pos) >= evap_limit:
                return nsaved, EVAPORATED, s
            save_steps[nsaved] = s
            for i in range(pos.shape[0]):
                save_pos[nsaved, i, 0] = pos[i, 0]
                save_pos[nsaved, i, 1] = pos[i, 1]
            nsaved += 1
        baoab_step(pos, vel, force, noise[t], dt, c1, c2, k, onset)
    return nsaved, OK, step0 + nchunk


@njit(cache=True)
def switch_poly(x, n, m):
    """Rational switching function and d/dx, singularity-free form.

    (1-x^n)/(1-x^m) = (sum_{k<n} x^k)/(sum_{k<m} x^k); the right-hand side
    has a strictly positive denominator for x >= 0 and equals n/m at x = 1.
    """
    a = 1.0
    ap = 0.0
    xp = 1.0
    for k in range(1, n):
        ap += k * xp
        xp *= x
        a += xp
    b = a
    bp = ap
    for k in range(n, m):
        bp += k * xp
        xp *= x
        b += xp
    s = a / b
    ds = (ap * b - a * bp) / (b * b)
    return s, ds


@njit(cache=True)
def coordination_all(pos, r0, n, m, c):
    """Fill c with c_i = sum_{j != i} s(r_ij)."""
    npart = pos.shape[0]
    for i in range(npart):
        c[i] = 0.0
    for i in range(npart):
        for j in range(i + 1, npart):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r = np.sqrt(dx * dx + dy * dy)
            s, _ = switch_poly(r / r0, n, m)
            c[i] += s
            c[j] += s


@njit(cache=True)
def moment_value_grad(pos, order, r0, n, m, grad):
    """Central moment mu_k of the coordination numbers plus d(mu_k)/dx."""
    npart = pos.shape[0]
    c = np.empty(npart)
    coordination_all(pos, r0, n, m, c)
    cbar = 0.0
    for i in range(npart):
        cbar += c[i]
    cbar /= npart
    mu2 = 0.0
    mu3 = 0.0
    for i in range(npart):
        d = c[i] - cbar
        mu2 += d * d
        mu3 += d * d * d
    mu2 /= npart
    mu3 /= npart
    # dmu/dc_i with the mean's chain contribution folded in
    g = np.empty(npart)
    if order == 2:
        value = mu2
        for i in range(npart):
            g[i] = 2.0 * (c[i] - cbar) / npart
    else:
        value = mu3
        for i in range(npart):
            d = c[i] - cbar
            g[i] = 3.0 * (d * d - mu2) / npart
    for i in range(npart):
        grad[i, 0] = 0.0
        grad[i, 1] = 0.0
    for i in range(npart):
        for j in range(i + 1, npart):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r = np.sqrt(dx * dx + dy * dy)
            _, ds = switch_poly(r / r0, n, m)
            w = (g[i] + g[j]) * ds / (r0 * r)
            grad[i, 0] += w * dx
            grad[i, 1] += w * dy
            grad[j, 0] -= w * dx
            grad[j, 1] -= w * dy
    return value


@njit(cache=True)
def moments_series(frames, r0, n, m, out):
    """Fill out[f] = (mu2, mu3) for every frame."""
    nf = frames.shape[0]
    npart = frames.shape[1]
    c = np.empty(npart)
    for f in range(nf):
        coordination_all(frames[f], r0, n, m, c)
        cbar = 0.0
        for i in range(npart):
            cbar += c[i]
        cbar /= npart
        mu2 = 0.0
        mu3 = 0.0
        for i in range(npart):
            d = c[i] - cbar
            mu2 += d * d
            mu3 += d * d * d
        out[f, 0] = mu2 / npart
        out[f, 1] = mu3 / npart


@njit(cache=True)
def quench_lj(pos_in, gtol, max_iter):
    """Gradient-descent LJ energy minimization to |grad|_inf < gtol.

    Steps go along the force with a Barzilai-Borwein spectral step length,
    safeguarded by a non-monotone (10-energy window) backtracking line
    search and a 0.1 sigma per-coordinate step cap, so descent stays within
    the starting basin while converging in tens of iterations instead of the
    ~10^5 a fixed-step descent needs on these flat valley floors.

    Returns (positions, energy, iterations, converged).  Pure LJ: the
    container restraint is irrelevant for the compact minima this classifies.
    """
    n = pos_in.shape[0]
    pos = pos_in.copy()
    trial = np.empty_like(pos)
    force = np.empty_like(pos)
    ftrial = np.empty_like(pos)
    prev_pos = np.empty_like(pos)
    prev_force = np.empty_like(pos)
    energy = lj_energy_forces(pos, force)
    hist = np.full(10, energy)
    alpha = 1.0e-3
    have_prev = False
    it = 0
    while it < max_iter:
        gmax = 0.0
        gsq = 0.0
        for i in range(n):
            for d in range(2):
                a = abs(force[i, d])
                if a > gmax:
                    gmax = a
                gsq += force[i, d] * force[i, d]
        if gmax < gtol:
            return pos, energy, it, True
        if have_prev:
            # BB1 step: (dx . dg) / (dg . dg) with g = -force
            num = 0.0
            den = 0.0
            for i in range(n):
                for d in range(2):
                    dx = pos[i, d] - prev_pos[i, d]
                    dg = prev_force[i, d] - force[i, d]
                    num += dx * dg
                    den += dg * dg
            if den > 0.0 and num > 0.0:
                alpha = min(max(num / den, 1.0e-7), 0.5)
        # cap the largest coordinate move at 0.1 sigma
        step_alpha = alpha
        if step_alpha * gmax > 0.1:
            step_alpha = 0.1 / gmax
        fmax = hist[0]
        for m in range(1, 10):
            if hist[m] > fmax:
                fmax = hist[m]
        accepted = False
        etrial = energy
        for _ in range(60):
            for i in range(n):
                trial[i, 0] = pos[i, 0] + step_alpha * force[i, 0]
                trial[i, 1] = pos[i, 1] + step_alpha * force[i, 1]
            etrial = lj_energy_forces(trial, ftrial)
            if etrial <= fmax - 1.0e-4 * step_alpha * gsq:
                accepted = True
                break
            step_alpha *= 0.5
        if not accepted:
            # stagnated at numerical precision
            return pos, energy, it, gmax < gtol
        for i in range(n):
            prev_pos[i, 0] = pos[i, 0]
            prev_pos[i, 1] = pos[i, 1]
            prev_force[i, 0] = force[i, 0]
            prev_force[i, 1] = force[i, 1]
            pos[i, 0] = trial[i, 0]
            pos[i, 1] = trial[i, 1]
            force[i, 0] = ftrial[i, 0]
            force[i, 1] = ftrial[i, 1]
        have_prev = True
        energy = etrial
        hist[it % 10] = energy
        it += 1
    return pos, energy, it, False


@njit(cache=True)
def run_biased_chunk(pos, vel, force, ext, noise, dt, c1, c2, k, onset):
    """Advance ``noise.shape[0]`` steps with a frozen external force.

    The caller recomputes ``ext`` between chunks (multiple-time-stepping of
    the bias force); with chunks of one step this reproduces the per-step
    callback path bitwise.
    """
    for t in range(noise.shape[0]):
        baoab_step_ext(pos, vel, force, ext, noise[t], dt, c1, c2, k, onset)


@njit(cache=True)
def hills_value(centers, heights, inv2w2, n, s):
    """Sum of deposited Gaussians at CV point ``s``.

    Kernels with exponent above 36 (about 8.5 sigma out) are skipped; each
    omitted term is below height * 2.4e-16, so the truncation error stays
    under 1e-12 even with 1e5 kernels.
    """
    ndim = s.shape[0]
    v = 0.0
    for j in range(n):
        q = 0.0
        for d in range(ndim):
            dx = s[d] - centers[j, d]
            q += dx * dx * inv2w2[d]
        if q < 36.0:
            v += heights[j] * np.exp(-q)
    return v


@njit(cache=True)
def hills_value_grad(centers, heights, inv2w2, n, s, grad):
    """Bias energy and dV/ds at ``s``; same truncation as hills_value."""
    ndim = s.shape[0]
    for d in range(ndim):
        grad[d] = 0.0
    v = 0.0
    for j in range(n):
        q = 0.0
        for d in range(ndim):
            dx = s[d] - centers[j, d]
            q += dx * dx * inv2w2[d]
        if q < 36.0:
            e = heights[j] * np.exp(-q)
            v += e
            for d in range(ndim):
                grad[d] -= e * (s[d] - centers[j, d]) * 2.0 * inv2w2[d]
    return v


@njit(cache=True)
def hills_values_many(centers, heights, inv2w2, n, pts, out):
    """hills_value over a (T, D) array of CV points."""
    for t in range(pts.shape[0]):
        out[t] = hills_value(centers, heights, inv2w2, n, pts[t])


@njit(cache=True)
def run_doublewell_wtmetad(n_steps, dt, kT, friction, x0, seed, w0, sigma,
                           pace, bias_factor, save_stride, centers, heights,
                           xs_out, vbias_out):
    """Fully compiled 1-d well-tempered metadynamics in U(x) = x^4 - 2 x^2.

    BAOAB with the bias force frozen across each step, hills every ``pace``
    steps, saved points every ``save_stride`` (position and current bias).
    Returns (n_hills, n_saved).  ``centers``/``heights`` must hold
    n_steps // pace entries, the save buffers the matching frame count.
    """
    np.random.seed(seed)
    c1 = np.exp(-friction * dt)
    c2 = np.sqrt(kT * (1.0 - c1 * c1))
    half = 0.5 * dt
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    kbdt = (bias_factor - 1.0) * kT
    x = x0
    v = 0.0
    nh = 0
    nsv = 0
    for s in range(n_steps):
        vb = 0.0
        fb = 0.0
        for j in range(nh):
            dx = x - centers[j]
            q = dx * dx * inv2s2
            if q < 36.0:
                e = heights[j] * np.exp(-q)
                vb += e
                fb += e * dx * 2.0 * inv2s2
        if s % save_stride == 0:
            xs_out[nsv] = x
            vbias_out[nsv] = vb
            nsv += 1
        if s % pace == 0 and s > 0:
            h = w0
            if np.isfinite(kbdt):
                h = w0 * np.exp(-vb / kbdt)
            centers[nh] = x
            heights[nh] = h
            nh += 1
            vb += h
            # the new hill acts immediately: it is centered here, so it adds
            # nothing to the force at x but does enter the next deposit
        f = 4.0 * x * (1.0 - x * x)
        v += half * (f + fb)
        x += half * v
        v = c1 * v + c2 * np.random.normal()
        x += half * v
        f = 4.0 * x * (1.0 - x * x)
        v += half * (f + fb)
    return nh, nsv
