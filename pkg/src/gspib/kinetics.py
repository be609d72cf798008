"""Infrequent metadynamics and first-passage statistics.

Sparse hills (no tempering) gently push the system out of its starting
basin; the biased first-passage time is mapped back to physical time
through the acceleration factor alpha = <exp(V(s_t)/kT)>.  An ensemble of
rescaled times is then fit to an exponential and screened with the
Kolmogorov-Smirnov reliability test: a bad biasing coordinate (one that
pushes along a degenerate direction) shows up as a non-Poissonian ensemble
and a small p-value, not just a wrong mean.
"""

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import kolmogorov

from . import _fast
from .isomers import isomer_seeds
from .metad import bias_force
from .simulation import EvaporationError, init_state
from .analysis import classify_frame


@dataclass
class ImetadRun:
    """One biased escape: wall clock in steps, alpha, rescaled time."""

    seed: int
    pace: int
    cv_name: str
    stop_state: str
    wall_steps: int
    alpha: float          # time-average of exp(V/kT) up to first passage
    t_star: float         # alpha * wall_steps * dt, in tau
    censored: bool
    n_hills: int


@dataclass
class KsResult:
    """Ensemble summary: fitted mean, KS reliability, bootstrap CI."""

    tau: float
    ks_stat: float
    p_value: float
    ci_low: float
    ci_high: float
    n: int
    n_censored: int

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


def acceleration_factor(bias_series, kT):
    """alpha = mean of exp(V/kT) over the series, log-sum-exp guarded.

    With V >= 0 everywhere (a sum of positive hills) alpha >= 1, and it
    grows exponentially as the bias fills the starting basin.
    """
    v = np.asarray(bias_series, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty bias series")
    x = v / kT
    m = x.max()
    return float(np.exp(m + np.log(np.mean(np.exp(x - m)))))


def running_acceleration(bias_series, kT):
    """alpha after each frame, same units as acceleration_factor."""
    v = np.asarray(bias_series, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty bias series")
    x = v / kT
    # single global guard; adequate because the hills keep V within a few
    # basin depths of zero, far from the exp underflow range
    m = x.max()
    csum = np.cumsum(np.exp(x - m))
    n = np.arange(1, v.size + 1)
    return np.exp(m + np.log(csum / n))


def imetad_run(config, bias, cv, catalog, start="c0", stop="c3",
               commit_frames=10, max_steps=1_000_000_000, bias_stride=1,
               classify_stride=1):
    """Run until quench classification commits to ``stop``; rescale time.

    ``start`` may be an isomer name (seed geometry from the catalog family)
    or an explicit (N, 2) position array.  Frames are classified every
    ``classify_stride``-th save point; commitment requires ``commit_frames``
    consecutive classified frames in the stop state, and the reported first
    passage is the step of the first frame of that streak.  Runs that hit
    ``max_steps`` come back flagged censored, never silently dropped.
    """
    if isinstance(start, str):
        if start == stop:
            raise ValueError("start and stop states must differ")
        positions = isomer_seeds()[start]
    else:
        positions = np.asarray(start, dtype=np.float64)
    stop_energy = catalog[stop].quench_energy
    if bias.cv_dim != cv.dim:
        raise ValueError("bias state and CV dimensions differ")
    if config.save_stride % bias_stride or bias.pace % bias_stride:
        raise ValueError("save_stride and pace must be multiples of "
                         "bias_stride")

    state = init_state(config, positions)
    c1, c2 = config.ou_coeffs
    limit = config.evaporation_limit
    log_accum = []           # V/kT at the classified save points
    streak = 0
    first_passage = None
    s = 0
    save_count = 0
    while True:
        sval, jac = cv.value_and_jac(state.positions)
        if s % config.save_stride == 0:
            if _fast.max_pair_distance(state.positions) >= limit:
                raise EvaporationError(f"cluster evaporated at step {s}")
            v_here = bias.bias_value(sval)
            if save_count % classify_stride == 0:
                log_accum.append(v_here / config.kT)
                name = classify_frame(state.positions, catalog)
                if name == stop:
                    if streak == 0:
                        first_passage = s
                    streak += 1
                    if streak >= commit_frames:
                        break
                else:
                    streak = 0
                    first_passage = None
            save_count += 1
        if s >= max_steps:
            break
        if s % bias.pace == 0 and s > 0:
            bias.deposit(sval, step=s)
        _, dvds = bias.bias_grad(sval)
        ext = -np.einsum("d,dnk->nk", dvds, jac)
        m = min(bias_stride, max_steps - s)
        noise = state.rng.standard_normal((m, config.n_particles, 2))
        _fast.run_biased_chunk(state.positions, state.velocities, state.force,
                               ext, noise, config.dt, c1, c2,
                               config.restraint_k, config.restraint_onset)
        s += m

    censored = first_passage is None or streak < commit_frames
    wall = s if censored else first_passage
    x = np.asarray(log_accum)
    m = x.max()
    alpha = float(np.exp(m + np.log(np.mean(np.exp(x - m)))))
    return ImetadRun(seed=config.seed, pace=bias.pace,
                     cv_name="+".join(getattr(cv, "names", ("cv",))),
                     stop_state=stop, wall_steps=int(wall), alpha=alpha,
                     t_star=alpha * wall * config.dt, censored=censored,
                     n_hills=bias.n_kernels)


def fit_exponential(times):
    """MLE mean of an exponential: the sample mean.  Censored runs must be
    excluded by the caller (see analyze_ensemble)."""
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        raise ValueError("need at least two uncensored times")
    if np.any(t <= 0.0):
        raise ValueError("times must be positive")
    return float(t.mean())


def ks_test(times, tau):
    """KS statistic and p-value against an exponential with mean ``tau``.

    D is the exact sup over the ECDF breakpoints; the p-value evaluates the
    asymptotic Kolmogorov distribution at the Stephens-scaled statistic
    (sqrt(n) + 0.12 + 0.11/sqrt(n)) * D, which keeps the nominal size down
    to n ~ 20.  Below n = 10 the p-value is a rough guide only.
    """
    t = np.sort(np.asarray(times, dtype=np.float64))
    n = t.size
    if n < 1:
        raise ValueError("need at least one time")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if n < 10:
        warnings.warn("KS p-value is approximate for fewer than 10 samples")
    cdf = 1.0 - np.exp(-t / tau)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    rootn = np.sqrt(n)
    p = float(kolmogorov((rootn + 0.12 + 0.11 / rootn) * d))
    return float(d), p


def bootstrap_ci(times, confidence=0.95, resamples=10_000, seed=0):
    """Percentile bootstrap interval for the mean; deterministic per seed."""
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        raise ValueError("need at least two times")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, t.size, size=(int(resamples), t.size))
    means = t[idx].mean(axis=1)
    half = 100.0 * (1.0 - confidence) / 2.0
    lo, hi = np.percentile(means, [half, 100.0 - half])
    return float(lo), float(hi)


def analyze_ensemble(runs_or_times, seed=0):
    """Fit, KS-screen, and bracket an ensemble of first-passage times.

    Accepts a list of ImetadRun (censored members are counted and set
    aside) or a plain array of times (all treated as uncensored).
    """
    if len(runs_or_times) and isinstance(runs_or_times[0], ImetadRun):
        times = [r.t_star for r in runs_or_times if not r.censored]
        n_censored = sum(r.censored for r in runs_or_times)
    else:
        times = list(np.asarray(runs_or_times, dtype=np.float64))
        n_censored = 0
    if len(times) < 2:
        raise ValueError("fewer than two uncensored times in the ensemble")
    tau = fit_exponential(times)
    d, p = ks_test(times, tau)
    lo, hi = bootstrap_ci(times, seed=seed)
    return KsResult(tau=tau, ks_stat=d, p_value=p, ci_low=lo, ci_high=hi,
                    n=len(times), n_censored=n_censored)


def runs_to_csv(runs, path):
    """seed, pace, cv_name, wall_steps, alpha, t_star, censored."""
    with open(path, "w") as fh:
        fh.write("seed,pace,cv_name,wall_steps,alpha,t_star,censored\n")
        for r in runs:
            fh.write(f"{r.seed},{r.pace},{r.cv_name},{r.wall_steps},"
                     f"{r.alpha:.10g},{r.t_star:.10g},{int(r.censored)}\n")


def read_runs_csv(path):
    runs = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            seed, pace, cvn, wall, alpha, t_star, cen = line.strip().split(",")
            runs.append(ImetadRun(seed=int(seed), pace=int(pace), cv_name=cvn,
                                  stop_state="", wall_steps=int(wall),
                                  alpha=float(alpha), t_star=float(t_star),
                                  censored=bool(int(cen)), n_hills=0))
    return runs
