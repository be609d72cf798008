"""Run orchestration behind the CLI: each function is one pipeline stage.

Stages read validated config sections, write their artifacts under an output
directory, and hand independent members (replicas, ensemble runs, sweep
entries) to a worker pool sized by the GSPIB_WORKERS environment variable.
Analysis itself stays single threaded over collected artifacts.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import spib
from .analysis import (build_catalog, classify_series, delta_f,
                       delta_f_to_csv, fes_from_weights, intervals_overlap,
                       lag_sweep_to_csv)
from .config import ConfigError
from .cv import MomentCv, moment_cv, moments_series, write_cv_series
from .isomers import isomer_seeds
from .kinetics import analyze_ensemble, imetad_run, runs_to_csv
from .metad import (BiasState, LearnedCv, MomentsCv, bias_force,
                    read_hills_csv, reweight, widths_from_series, wtmetad_run)
from .nn import EncoderNet, encoder_forward, evaluate_series, input_gradient
from .render import (fes_to_csv, render_deltaf_svg, render_fes_svg,
                     render_timeseries_svg, timeseries_to_csv)
from .simulation import (SimConfig, Trajectory, lj_energy, lj_forces,
                         potential_energy, restraint_force, run_trajectory,
                         spawn_seeds)

ISOMER_NAMES = ("c0", "c1", "c2", "c3")


def worker_count():
    raw = os.environ.get("GSPIB_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GSPIB_WORKERS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("GSPIB_WORKERS must be >= 1")
    return n


def _pool_map(fn, jobs):
    workers = worker_count()
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _start_positions(name):
    seeds = isomer_seeds()
    if name not in seeds:
        raise ConfigError(f"unknown start isomer {name!r} "
                          f"(one of {', '.join(ISOMER_NAMES)})")
    return seeds[name]


def _sim_config(p, n_steps=None, seed=None):
    return SimConfig(kT=p["kT"], n_steps=p["n_steps"] if n_steps is None
                     else n_steps,
                     save_stride=p["save_stride"],
                     seed=p["seed"] if seed is None else seed,
                     dt=p["dt"], friction=p["friction"],
                     restraint_k=p["restraint_k"],
                     restraint_onset=p["restraint_onset"])


def _load_trajectory(path):
    try:
        return Trajectory.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load trajectory {path}: {exc}") from None


def _make_cv(p, what):
    if p["cv"] == "moments":
        if not p["orders"]:
            raise ConfigError(f"[{what}] orders must not be empty")
        return MomentsCv(orders=tuple(p["orders"]))
    if not p["model"]:
        raise ConfigError(f"[{what}] cv = learned needs a model file")
    try:
        model, _ = spib.load_model(p["model"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model {p['model']}: {exc}") from None
    return LearnedCv(model, components=tuple(p["components"]))


def _cv_series(cv, frames):
    if isinstance(cv, MomentsCv) and cv.orders == (2, 3):
        return moments_series(frames)
    return np.stack([cv.value(frame) for frame in frames])


def _resolve_widths(p, cv, what):
    if p["widths"]:
        widths = np.asarray(p["widths"], dtype=np.float64)
        if len(widths) != len(cv.names):
            raise ConfigError(f"[{what}] widths must give one value per CV "
                              f"component ({len(cv.names)})")
        return widths
    if not p["widths_from"]:
        raise ConfigError(f"[{what}] needs widths or widths_from")
    calib = _load_trajectory(p["widths_from"])
    series = _cv_series(cv, calib.positions)
    return widths_from_series(series, fraction=p["width_fraction"])


def _write_cv_bias_csv(path, steps, cv_series, bias_series, names):
    cv_series = np.atleast_2d(cv_series)
    if cv_series.shape[0] == len(steps):
        cv_series = cv_series.T
    with open(path, "w") as fh:
        fh.write("step," + ",".join(names) + ",bias\n")
        for i, s in enumerate(steps):
            vals = ",".join("%.17g" % cv_series[c, i]
                            for c in range(len(names)))
            fh.write(f"{int(s)},{vals},{'%.17g' % bias_series[i]}\n")


def _read_cv_bias_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    names = tuple(header[1:-1])
    return data[:, 0].astype(np.int64), data[:, 1:-1], data[:, -1], names


# ---------------------------------------------------------------- simulate

def run_simulate(cfg, outdir):
    p = cfg.section("simulation")
    outdir = Path(outdir)
    positions = _start_positions(p["start"])
    sim = _sim_config(p)
    traj = run_trajectory(sim, positions)
    traj.save(outdir / "traj.bin")
    moments = moments_series(traj.positions)
    write_cv_series(outdir / "cv_series.csv", traj.steps,
                    moments[:, 0], moments[:, 1])
    render_timeseries_svg(traj.steps, moments.T, ("mu2", "mu3"),
                          outdir / "cv_series.svg")
    _write_json(outdir / "summary.json", {
        "n_steps": sim.n_steps, "n_frames": traj.n_frames,
        "kT": sim.kT, "seed": sim.seed,
        "final_energy": potential_energy(traj.positions[-1], sim)})
    return 0


# ------------------------------------------------------------------- train

def run_train(cfg, outdir):
    t = cfg.section("training")
    outdir = Path(outdir)
    traj = _load_trajectory(t["trajectory"])
    labels0 = spib.init_labels(traj.positions, t["k_init"], seed=t["seed"])
    series = spib.LabeledSeries(traj.positions, labels0, traj.save_stride)
    sc = spib.SpibConfig(beta=t["beta"], lag=t["lag"], k_init=t["k_init"],
                         learning_rate=t["learning_rate"],
                         batch_size=t["batch_size"],
                         refine_every=t["refine_every"],
                         label_change_tol=t["label_change_tol"],
                         max_epochs=t["max_epochs"], seed=t["seed"])
    model, report = spib.train(series, sc)
    spib.save_model(outdir / "model.gspib", model, sc, report)
    with open(outdir / "training_log.csv", "w") as fh:
        fh.write("epoch,loss,ce_term,rate_term,k,label_change\n")
        for row in report.epochs:
            fh.write(f"{row['epoch']},{row['loss']:.6f},{row['ce_term']:.6f},"
                     f"{row['rate_term']:.6f},{row['k']},"
                     f"{row['label_change']:.6f}\n")
    mu = evaluate_series(model.encoder, traj.positions)
    names = tuple(f"z{i + 1}" for i in range(mu.shape[1]))
    timeseries_to_csv(traj.steps, mu.T, names, outdir / "latent_series.csv")
    render_timeseries_svg(traj.steps, mu.T, names,
                          outdir / "latent_series.svg")
    _write_json(outdir / "summary.json", {
        "final_k": report.final_k, "converged": report.converged,
        "epochs": len(report.epochs), "wall_time": report.wall_time})
    return 0


# ----------------------------------------------------------------- wtmetad

def _wtmetad_member(job):
    (sim_kwargs, outdir, cv_params, widths, w0, pace, bias_factor,
     bias_stride, start) = job
    sim = SimConfig(**sim_kwargs)
    cv = _make_cv(cv_params, "metad")
    bias = BiasState(widths, sim.kT, w0=w0, pace=pace,
                     bias_factor=bias_factor)
    result = wtmetad_run(sim, bias, cv, _start_positions(start),
                         bias_stride=bias_stride)
    rep = Path(outdir)
    rep.mkdir(parents=True, exist_ok=True)
    result.traj.save(rep / "traj.bin")
    result.bias.hills_to_csv(rep / "hills.csv")
    _write_cv_bias_csv(rep / "cv_bias.csv", result.traj.steps,
                       result.cv_series, result.bias_series, result.cv_names)
    return {"replica": str(rep), "seed": sim.seed,
            "n_kernels": result.bias.n_kernels,
            "n_frames": result.traj.n_frames}


def run_wtmetad(cfg, outdir):
    p = cfg.section("simulation")
    m = cfg.section("metad")
    outdir = Path(outdir)
    cv = _make_cv(m, "metad")
    widths = np.asarray(_resolve_widths(m, cv, "metad"), dtype=np.float64)
    if p["save_stride"] % m["bias_stride"] or m["pace"] % m["bias_stride"]:
        raise ConfigError("[metad] bias_stride must divide save_stride "
                          "and pace")
    seeds = spawn_seeds(p["seed"], m["n_replicas"])
    jobs = []
    for i, seed in enumerate(seeds):
        sim_kwargs = dict(kT=p["kT"], n_steps=p["n_steps"],
                          save_stride=p["save_stride"], seed=int(seed),
                          dt=p["dt"], friction=p["friction"],
                          restraint_k=p["restraint_k"],
                          restraint_onset=p["restraint_onset"])
        jobs.append((sim_kwargs, str(outdir / f"replica_{i}"), m, widths,
                     m["w0"], m["pace"], m["bias_factor"], m["bias_stride"],
                     p["start"]))
    rows = _pool_map(_wtmetad_member, jobs)
    _write_json(outdir / "summary.json", {
        "cv": list(cv.names), "widths": [float(w) for w in widths],
        "replicas": rows})
    return 0


# ------------------------------------------------------------------ imetad

def _imetad_member(job):
    (sim_kwargs, cv_params, widths, w0, pace, bias_factor, start, stop,
     commit_frames, max_steps, bias_stride) = job
    sim = SimConfig(**sim_kwargs)
    cv = _make_cv(cv_params, "kinetics")
    catalog = build_catalog()
    bias = BiasState(widths, sim.kT, w0=w0, pace=pace,
                     bias_factor=bias_factor)
    return imetad_run(sim, bias, cv, catalog, start=start, stop=stop,
                      commit_frames=commit_frames, max_steps=max_steps,
                      bias_stride=bias_stride)


def run_imetad(cfg, outdir):
    p = cfg.section("simulation")
    k = cfg.section("kinetics")
    outdir = Path(outdir)
    cv = _make_cv(k, "kinetics")
    widths = np.asarray(_resolve_widths(k, cv, "kinetics"), dtype=np.float64)
    if k["stop"] not in ISOMER_NAMES:
        raise ConfigError(f"unknown stop isomer {k['stop']!r}")
    _start_positions(k["start"])
    seeds = spawn_seeds(p["seed"], k["n_runs"])
    jobs = []
    for seed in seeds:
        sim_kwargs = dict(kT=p["kT"], n_steps=k["max_steps"],
                          save_stride=p["save_stride"], seed=int(seed),
                          dt=p["dt"], friction=p["friction"],
                          restraint_k=p["restraint_k"],
                          restraint_onset=p["restraint_onset"])
        jobs.append((sim_kwargs, k, widths, k["w0"], k["pace"],
                     k["bias_factor"], k["start"], k["stop"],
                     k["commit_frames"], k["max_steps"], k["bias_stride"]))
    runs = _pool_map(_imetad_member, jobs)
    runs_to_csv(runs, outdir / "runs.csv")
    n_censored = sum(r.censored for r in runs)
    summary = {"n_runs": len(runs), "n_censored": n_censored,
               "cv": list(cv.names), "widths": [float(w) for w in widths]}
    if len(runs) - n_censored < 2:
        summary["status"] = "censored_only"
        _write_json(outdir / "summary.json", summary)
        return 4
    result = analyze_ensemble(runs, seed=p["seed"])
    with open(outdir / "kinetics.json", "w") as fh:
        fh.write(result.to_json() + "\n")
    summary["status"] = "ok"
    summary["tau"] = result.tau
    summary["p_value"] = result.p_value
    _write_json(outdir / "summary.json", summary)
    return 0


# ----------------------------------------------------------------- analyze

def _method_name(path, taken):
    base = Path(path).name or "wtmetad"
    name = base
    n = 2
    while name in taken:
        name = f"{base}_{n}"
        n += 1
    return name


def _collect_wtmetad(run_dir, kT, classify_stride, catalog):
    """Weighted, classified samples from every replica of one run dir."""
    replicas = sorted(Path(run_dir).glob("replica_*"))
    if not replicas:
        raise ConfigError(f"{run_dir} has no replica_* directories")
    frames_list, weights_list, moments_list = [], [], []
    visits = []
    for rep in replicas:
        traj = _load_trajectory(rep / "traj.bin")
        _, cv_series, _, names = _read_cv_bias_csv(rep / "cv_bias.csv")
        bias = read_hills_csv(rep / "hills.csv", kT)
        weights, start = reweight(bias, cv_series, kT)
        frames = traj.positions[start:]
        frames_list.append(frames)
        weights_list.append(weights)
        moments_list.append(moments_series(frames))
        sub = classify_series(frames[::classify_stride], catalog)
        visits.append(sorted({catalog[int(s)].name for s in set(sub)
                              if s >= 0}))
    return (np.concatenate(frames_list), np.concatenate(weights_list),
            np.concatenate(moments_list), visits)


def run_analyze(cfg, outdir):
    a = cfg.section("analysis")
    outdir = Path(outdir)
    kT = a["kT"]
    cs = a["classify_stride"]
    catalog = build_catalog()
    catalog.to_csv(outdir / "states.csv")
    if not a["unbiased"] and not a["wtmetad"]:
        raise ConfigError("[analysis] needs unbiased and/or wtmetad inputs")

    sources = {}
    if a["unbiased"]:
        traj = _load_trajectory(a["unbiased"])
        sources["unbiased"] = {"frames": traj.positions,
                               "weights": np.ones(traj.n_frames),
                               "moments": moments_series(traj.positions),
                               "visits": None}
    for run_dir in a["wtmetad"]:
        frames, weights, moments, visits = _collect_wtmetad(
            run_dir, kT, cs, catalog)
        sources[_method_name(run_dir, sources)] = {
            "frames": frames, "weights": weights, "moments": moments,
            "visits": visits}

    all_moments = np.concatenate([s["moments"] for s in sources.values()])
    grid = [(float(all_moments[:, d].min()), float(all_moments[:, d].max()),
             a["bins"]) for d in range(2)]

    tables = {}
    visits_out = {}
    for name, src in sources.items():
        fes = fes_from_weights(src["moments"], src["weights"], grid, kT,
                               names=("mu2", "mu3"))
        render_fes_svg(fes, outdir / f"fes_{name}.svg")
        fes_to_csv(fes, outdir / f"fes_{name}.csv")
        labels = classify_series(src["frames"][::cs], catalog)
        rows = delta_f(src["frames"][::cs], src["weights"][::cs], catalog,
                       kT, reference=a["reference"], labels=labels,
                       n_blocks=a["n_blocks"], n_boot=a["n_boot"],
                       seed=a["seed"])
        delta_f_to_csv(rows, outdir / f"delta_f_{name}.csv")
        tables[name] = rows
        if src["visits"] is not None:
            visits_out[name] = src["visits"]

    render_deltaf_svg(tables, outdir / "delta_f.svg")
    overlap = {}
    names = list(tables)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            pair_ok = []
            for ra, rb in zip(tables[names[i]], tables[names[j]]):
                if ra.name == a["reference"]:
                    continue
                pair_ok.append(bool(intervals_overlap(
                    (ra.ci_low, ra.ci_high), (rb.ci_low, rb.ci_high))))
            overlap[f"{names[i]}|{names[j]}"] = pair_ok
    _write_json(outdir / "summary.json", {
        "kT": kT, "reference": a["reference"],
        "methods": names, "pairwise_overlap": overlap,
        "replica_visits": visits_out})
    return 0


# --------------------------------------------------------------- gradcheck

def _central_diff(f, x, h=1.0e-6):
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(x)
        xf[i] = orig - h
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def _rel_err(got, ref):
    scale = max(float(np.max(np.abs(ref))), 1.0e-12)
    return float(np.max(np.abs(got - ref)) / scale)


def _jittered_config(rng):
    seeds = isomer_seeds()
    base = seeds[ISOMER_NAMES[rng.integers(4)]]
    pos = base + 0.08 * rng.standard_normal(base.shape)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    return pos @ rot.T + rng.uniform(-1.0, 1.0, size=2)


def gradient_suite(n_configs=100, seed=0, tol_analytic=1.0e-7,
                   tol_network=1.0e-5):
    """Central-difference audit of every analytic and network gradient.

    Returns one row per check: (name, n_configs, max_rel_err, tol, ok).
    """
    rng = np.random.default_rng(seed)
    encoder = EncoderNet(seed=7)
    lcv = LearnedCv(encoder)
    mu2 = MomentCv(2)
    mu3 = MomentCv(3)
    mom_cv = MomentsCv()
    bias2 = BiasState(np.array([0.05, 0.08]), kT=0.2)
    for _ in range(5):
        bias2.deposit(np.array([0.55, 0.85])
                      + 0.1 * rng.standard_normal(2))
    bias_z = BiasState(np.array([0.3, 0.3]), kT=0.2)
    center = lcv.value(isomer_seeds()["c0"])
    for _ in range(5):
        bias_z.deposit(center + 0.2 * rng.standard_normal(2))
    errs = {"lj_forces": 0.0, "restraint_force": 0.0, "moment_cv_mu2": 0.0,
            "moment_cv_mu3": 0.0, "encoder_input_gradient": 0.0,
            "bias_force_moments": 0.0, "bias_force_learned": 0.0}
    for _ in range(n_configs):
        pos = _jittered_config(rng)

        got = lj_forces(pos)
        ref = -_central_diff(lj_energy, pos)
        errs["lj_forces"] = max(errs["lj_forces"], _rel_err(got, ref))

        onset = 1.0
        got, _ = restraint_force(pos, k=25.0, onset=onset)
        ref = -_central_diff(
            lambda x: restraint_force(x, k=25.0, onset=onset)[1], pos)
        errs["restraint_force"] = max(errs["restraint_force"],
                                      _rel_err(got, ref))

        for tag, mcv in (("moment_cv_mu2", mu2), ("moment_cv_mu3", mu3)):
            _, got = moment_cv(pos, mcv)
            ref = _central_diff(lambda x: moment_cv(x, mcv)[0], pos)
            errs[tag] = max(errs[tag], _rel_err(got, ref))

        comp = int(rng.integers(2))
        got = input_gradient(encoder, pos, comp)
        ref = _central_diff(
            lambda x: encoder_forward(encoder, x)[0][comp], pos)
        errs["encoder_input_gradient"] = max(errs["encoder_input_gradient"],
                                             _rel_err(got, ref))

        got, _ = bias_force(bias2, pos, mom_cv)
        ref = -_central_diff(
            lambda x: bias2.bias_value(mom_cv.value(x)), pos)
        errs["bias_force_moments"] = max(errs["bias_force_moments"],
                                         _rel_err(got, ref))

        got, _ = bias_force(bias_z, pos, lcv)
        ref = -_central_diff(
            lambda x: bias_z.bias_value(lcv.value(x)), pos)
        errs["bias_force_learned"] = max(errs["bias_force_learned"],
                                         _rel_err(got, ref))

    network = ("encoder_input_gradient", "bias_force_learned")
    rows = []
    for name, err in errs.items():
        tol = tol_network if name in network else tol_analytic
        rows.append({"name": name, "n_configs": n_configs,
                     "max_rel_err": err, "tol": tol, "ok": err <= tol})
    return rows


def run_gradcheck(cfg, outdir):
    g = cfg.section("gradcheck")
    outdir = Path(outdir)
    rows = gradient_suite(n_configs=g["n_configs"], seed=g["seed"],
                          tol_analytic=g["tol_analytic"],
                          tol_network=g["tol_network"])
    with open(outdir / "gradcheck.csv", "w") as fh:
        fh.write("name,n_configs,max_rel_err,tol,ok\n")
        for row in rows:
            fh.write(f"{row['name']},{row['n_configs']},"
                     f"{row['max_rel_err']:.3e},{row['tol']:.1e},"
                     f"{int(row['ok'])}\n")
    _write_json(outdir / "summary.json",
                {"all_ok": all(r["ok"] for r in rows),
                 "worst": max(rows, key=lambda r: r["max_rel_err"] / r["tol"])
                 ["name"]})
    if not all(r["ok"] for r in rows):
        bad = ", ".join(r["name"] for r in rows if not r["ok"])
        raise RuntimeError(f"gradient checks failed: {bad}")
    return 0


# --------------------------------------------------------------- sweep-lag

def _sweep_member(job):
    traj_path, t, lag = job
    traj = Trajectory.load(traj_path)
    labels0 = spib.init_labels(traj.positions, t["k_init"], seed=t["seed"])
    series = spib.LabeledSeries(traj.positions, labels0, traj.save_stride)
    sc = spib.SpibConfig(beta=t["beta"], lag=lag, k_init=t["k_init"],
                         learning_rate=t["learning_rate"],
                         batch_size=t["batch_size"],
                         refine_every=t["refine_every"],
                         label_change_tol=t["label_change_tol"],
                         max_epochs=t["max_epochs"], seed=t["seed"])
    _, report = spib.train(series, sc)
    return {"lag": lag, "K": report.final_k, "converged": report.converged,
            "epochs": len(report.epochs), "wall_time": report.wall_time}


def run_sweep_lag(cfg, outdir):
    s = cfg.section("sweep")
    t = cfg.section("training")
    outdir = Path(outdir)
    lags = s["lags"]
    if lags != sorted(lags) or len(set(lags)) != len(lags):
        raise ConfigError("[sweep] lags must be strictly ascending")
    _load_trajectory(t["trajectory"])
    table = _pool_map(_sweep_member,
                      [(t["trajectory"], t, lag) for lag in lags])
    lag_sweep_to_csv(table, outdir / "lag_sweep.csv")
    _write_json(outdir / "summary.json",
                {"lags": lags, "K": [row["K"] for row in table]})
    ks = [row["K"] for row in table]
    if any(k2 > k1 for k1, k2 in zip(ks, ks[1:])):
        raise RuntimeError(f"state count increased along the lag sweep: "
                           f"{list(zip(lags, ks))}")
    return 0
