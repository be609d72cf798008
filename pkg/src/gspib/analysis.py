"""State classification, reweighted FES grids, and cross-method dF tables.

Frames are assigned to isomers by quenching and matching the minimized LJ
energy against the catalog; the four LJ7 minima are separated by far more
than the matching tolerance, so classification is parameter-free and exactly
invariant under permutation, rotation, and translation.  Free energies come
from weighted histograms; dF errors from a 10-block bootstrap over
contiguous time blocks, which respects the correlation structure of the
underlying trajectory.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .cv import MomentCv, moment_cv
from .isomers import ISOMER_NAMES, isomer_seeds
from .simulation import ConvergenceError, quench

TRANSITION = "transition"


@dataclass
class StateRef:
    """One catalog entry: an isomer identified by its quenched energy."""

    id: int
    name: str
    quench_energy: float
    mu_ref: tuple  # (mu2, mu3) of the minimized geometry, for plotting


class StateCatalog:
    """The four LJ7 isomers, ordered by quenched energy (c0 deepest)."""

    def __init__(self, entries):
        entries = list(entries)
        if len(entries) != 4:
            raise ValueError("catalog needs exactly four isomers")
        energies = np.array([e.quench_energy for e in entries])
        if np.any(np.diff(energies) <= 1e-6):
            raise ValueError("quench energies must be ascending and "
                             "separated by more than 1e-6")
        self.entries = entries
        self._energies = energies

    @property
    def names(self):
        return tuple(e.name for e in self.entries)

    @property
    def energies(self):
        return self._energies.copy()

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            for e in self.entries:
                if e.name == key:
                    return e
            raise KeyError(key)
        return self.entries[key]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("id,name,quench_energy,mu2,mu3\n")
            for e in self.entries:
                fh.write(f"{e.id},{e.name},{e.quench_energy:.10f},"
                         f"{e.mu_ref[0]:.10f},{e.mu_ref[1]:.10f}\n")


def build_catalog():
    """Quench the four seed geometries into the reference catalog."""
    entries = []
    for i, name in enumerate(ISOMER_NAMES):
        pos, energy = quench(isomer_seeds()[name])
        mu2, _ = moment_cv(pos, MomentCv(2))
        mu3, _ = moment_cv(pos, MomentCv(3))
        entries.append(StateRef(i, name, energy, (mu2, mu3)))
    return StateCatalog(entries)


def classify_frame(frame, catalog, tol=1e-4):
    """Isomer name for one frame, or "transition" if no minimum matches.

    A frame whose quench fails to converge is also reported as
    "transition", with a warning rather than an exception: isolated bad
    frames should not kill a long analysis pass.
    """
    try:
        _, energy = quench(frame)
    except ConvergenceError:
        warnings.warn("quench did not converge; frame labeled transition")
        return TRANSITION
    for e in catalog:
        if abs(energy - e.quench_energy) < tol:
            return e.name
    return TRANSITION


def classify_series(frames, catalog, tol=1e-4):
    """Integer state ids for many frames; -1 marks "transition"."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.full(len(frames), -1, dtype=np.int64)
    energies = catalog.energies
    for i, frame in enumerate(frames):
        try:
            _, energy = quench(frame)
        except ConvergenceError:
            warnings.warn(f"quench did not converge on frame {i}; "
                          "labeled transition")
            continue
        hit = np.abs(energies - energy) < tol
        if np.any(hit):
            out[i] = int(np.argmax(hit))
    return out


# -- free energy surfaces -------------------------------------------------------

@dataclass
class FesGrid:
    """Binned free energies, min-shifted to zero, with unsampled bins masked."""

    names: tuple
    edges: tuple          # one edge array per axis
    values: np.ndarray    # free energy where sampled, np.nan where masked
    mask: np.ndarray      # True where the bin holds no samples

    @property
    def centers(self):
        return tuple(0.5 * (e[:-1] + e[1:]) for e in self.edges)


def fes_from_weights(cv_values, weights, grid, kT, names=None):
    """F = -kT ln(weighted histogram), shifted so the sampled minimum is 0.

    ``grid`` gives (lo, hi, nbins) per CV component.  Bins that catch no
    samples are masked (np.nan), never zero-filled.
    """
    cv_values = np.asarray(cv_values, dtype=np.float64)
    if cv_values.ndim == 1:
        cv_values = cv_values[:, None]
    weights = np.asarray(weights, dtype=np.float64)
    if len(cv_values) == 0:
        raise ValueError("no samples to histogram")
    if len(weights) != len(cv_values):
        raise ValueError("weights and CV series lengths differ")
    grid = tuple(grid)
    if len(grid) != cv_values.shape[1]:
        raise ValueError("grid must give (lo, hi, nbins) per CV component")
    edges = tuple(np.linspace(lo, hi, int(n) + 1) for lo, hi, n in grid)
    hist, _ = np.histogramdd(cv_values, bins=edges, weights=weights)
    mask = hist <= 0.0
    values = np.full(hist.shape, np.nan)
    values[~mask] = -kT * np.log(hist[~mask])
    values[~mask] -= np.nanmin(values)
    if names is None:
        names = tuple(f"s{d}" for d in range(cv_values.shape[1]))
    return FesGrid(tuple(names), edges, values, mask)


# -- free energy differences ----------------------------------------------------

@dataclass
class DeltaFRow:
    name: str
    delta_f: float        # nan when the state was never sampled
    ci_low: float
    ci_high: float
    weight_fraction: float
    n_frames: int


def delta_f(frames, weights, catalog, kT, reference="c0", labels=None,
            n_blocks=10, n_boot=10_000, seed=0):
    """dF_i = -kT ln(W_i / W_ref) with 10-block bootstrap percentile CIs.

    ``labels`` (from classify_series) can be passed to skip the per-frame
    quenching when classification was already done.  States never sampled
    appear with delta_f = nan and n_frames = 0 rather than infinity.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if labels is None:
        labels = classify_series(frames, catalog)
    labels = np.asarray(labels)
    if len(labels) != len(weights):
        raise ValueError("labels and weights lengths differ")
    names = catalog.names
    if reference not in names:
        raise ValueError(f"unknown reference state {reference!r}")
    ref_id = names.index(reference)
    n_states = len(names)

    # per-state weight mass inside each contiguous time block; a bootstrap
    # draw is then just a resampled block sum
    bounds = np.linspace(0, len(labels), n_blocks + 1).astype(int)
    w_block = np.zeros((n_states, n_blocks))
    for b in range(n_blocks):
        sel = slice(bounds[b], bounds[b + 1])
        lb, wb = labels[sel], weights[sel]
        for s in range(n_states):
            w_block[s, b] = wb[lb == s].sum()
    w_total = w_block.sum(axis=1)
    if (w_total > 0.0).sum() < 2:
        raise ValueError("need at least two sampled states")
    if w_total[ref_id] == 0.0:
        raise ValueError(f"reference state {reference} never sampled")

    rng = np.random.default_rng(seed)
    draw = rng.integers(0, n_blocks, size=(n_boot, n_blocks))
    w_draw = w_block[:, draw].sum(axis=2)        # (n_states, n_boot)

    rows = []
    counts = np.bincount(labels[labels >= 0], minlength=n_states)
    for s in range(n_states):
        if w_total[s] == 0.0:
            rows.append(DeltaFRow(names[s], np.nan, np.nan, np.nan,
                                  0.0, 0))
            continue
        df = -kT * np.log(w_total[s] / w_total[ref_id])
        ok = (w_draw[s] > 0.0) & (w_draw[ref_id] > 0.0)
        if ok.sum() < n_boot // 2:
            lo = hi = np.nan
        else:
            df_draw = -kT * np.log(w_draw[s, ok] / w_draw[ref_id, ok])
            lo, hi = np.percentile(df_draw, [2.5, 97.5])
        rows.append(DeltaFRow(names[s], df, lo, hi,
                              w_total[s] / w_total.sum(), int(counts[s])))
    return rows


def delta_f_to_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("state,delta_f,ci_low,ci_high,weight_fraction,n_frames\n")
        for r in rows:
            fh.write(f"{r.name},{r.delta_f:.8f},{r.ci_low:.8f},"
                     f"{r.ci_high:.8f},{r.weight_fraction:.8f},"
                     f"{r.n_frames}\n")


def read_delta_f_csv(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            name, df, lo, hi, wf, n = line.strip().split(",")
            rows.append(DeltaFRow(name, float(df), float(lo), float(hi),
                                  float(wf), int(n)))
    return rows


def intervals_overlap(row_a, row_b):
    """Cross-method agreement test: do the two 95% CIs intersect?"""
    if np.isnan(row_a.ci_low) or np.isnan(row_b.ci_low):
        return False
    return row_a.ci_low <= row_b.ci_high and row_b.ci_low <= row_a.ci_high


# -- lag sweep ------------------------------------------------------------------

def lag_sweep(series, config, lags, verbose=False):
    """Retrain per lag (same seed) and tabulate the converged state count.

    The physical expectation, and an asserted property here, is that K
    never increases with the lag: coarser time resolution can only merge
    states.
    """
    from .spib import train  # deferred: spib pulls in the whole nn stack

    lags = [int(l) for l in lags]
    if lags != sorted(lags) or len(set(lags)) != len(lags):
        raise ValueError("lags must be strictly ascending")
    table = []
    for lag in lags:
        cfg = replace(config, lag=lag)
        model, report = train(series, cfg, verbose=verbose)
        table.append({"lag": lag, "K": report.final_k,
                      "converged": report.converged,
                      "epochs": len(report.epochs),
                      "wall_time": report.wall_time})
    ks = [row["K"] for row in table]
    if any(k2 > k1 for k1, k2 in zip(ks, ks[1:])):
        raise RuntimeError(f"state count increased along the lag sweep: "
                           f"{list(zip(lags, ks))}")
    return table


def lag_sweep_to_csv(table, path):
    with open(path, "w") as fh:
        fh.write("lag,K,converged,epochs,wall_time\n")
        for row in table:
            fh.write(f"{row['lag']},{row['K']},{int(row['converged'])},"
                     f"{row['epochs']},{row['wall_time']:.2f}\n")
