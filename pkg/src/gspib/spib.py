"""State predictive information bottleneck on graph time series.

Training alternates stochastic minibatch updates of a variational objective
with self-consistent label refinement: frames are labeled by which metastable
state the decoder predicts from their deterministic latent, empty states are
dropped, and the loop continues until the labeling stops changing.  The
number of surviving states is an output, not an input.

The loss is the usual variational bound on the predictive bottleneck
objective: cross-entropy of the future state label under the decoder, plus
beta times the rate term log p(z|x) - log r(z) with a learnable
mixture-of-Gaussians prior r(z), one component per state.
"""

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .graphs import GraphSpec
from .nn import (Adam, EncoderNet, MLP, batch_from_frames, encoder_forward,
                 evaluate_series, load_params, save_params, assign_params,
                 LATENT_DIM)

_LOG_2PI = float(np.log(2.0 * np.pi))


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the report so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class LabeledSeries:
    """Time-ordered frames with per-frame state labels.

    ``save_stride`` maps one saved frame to that many integrator steps, so a
    lag of ``L`` frames equals ``L * save_stride`` MD steps.
    """

    frames: np.ndarray              # (F, N, 2)
    labels: np.ndarray              # (F,) int
    save_stride: int = 100

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 3:
            raise ValueError("frames must be (F, N, 2)")
        if len(self.labels) != len(self.frames):
            raise ValueError("labels length must match frames length")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return len(self.frames)

    @property
    def n_states(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class SpibConfig:
    beta: float = 0.01
    lag: int = 5                    # in saved frames
    k_init: int = 10
    latent_dim: int = LATENT_DIM
    learning_rate: float = 1.0e-3
    batch_size: int = 512
    refine_every: int = 5           # epochs between label refinements
    label_change_tol: float = 0.01
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lag < 1:
            raise ValueError("lag must be >= 1 frame")
        if not 0 < self.label_change_tol < 1:
            raise ValueError("label_change_tol must be in (0, 1)")
        if self.latent_dim != LATENT_DIM:
            raise ValueError(f"latent dimension is fixed at {LATENT_DIM}")
        if self.k_init < 1:
            raise ValueError("k_init must be >= 1")


def make_pairs(series, lag):
    """Time-lagged (frame index, future label) arrays, order preserving."""
    n = len(series)
    if lag >= n:
        raise ValueError(f"lag {lag} needs more than {n} frames")
    if lag < 1:
        raise ValueError("lag must be >= 1")
    return np.arange(n - lag), series.labels[lag:].copy()


def _sorted_distance_features(frames):
    """Permutation-invariant descriptor: each frame's sorted pair distances."""
    frames = np.asarray(frames, dtype=np.float64)
    feats = np.empty((len(frames), frames.shape[1] * (frames.shape[1] - 1) // 2))
    for k, f in enumerate(frames):
        feats[k] = np.sort(pdist(f))
    return feats


def init_labels(frames, k_init, seed=0):
    """Approximate starting labels: k-means over sorted-distance vectors."""
    if k_init < 1:
        raise ValueError("k_init must be >= 1")
    feats = _sorted_distance_features(frames)
    if k_init == 1:
        return np.zeros(len(feats), dtype=np.int64)
    if np.allclose(feats.std(axis=0), 0.0):
        raise ValueError("degenerate series: all frames identical")
    _, labels = kmeans2(feats, k_init, iter=100, minit="++",
                        seed=np.random.default_rng(seed), missing="warn")
    # compact away any cluster k-means left empty
    _, labels = np.unique(labels, return_inverse=True)
    return labels.astype(np.int64)


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise, differentiable through mu, logvar."""
    sigma = ad.exp(ad.mul(logvar, 0.5))
    return ad.add(mu, ad.mul(sigma, ad.constant(noise)))


class SpibModel:
    """Encoder + state decoder + mixture prior over the 2-d latent."""

    def __init__(self, encoder=None, k=10, dec_hidden=32, seed=0):
        if encoder is None:
            encoder = EncoderNet(seed=seed)
        self.encoder = encoder
        self.dec_hidden = dec_hidden
        rng = np.random.default_rng(seed + 1)
        self.decoder = MLP([LATENT_DIM, dec_hidden, k], rng)
        self.prior_logits = ad.parameter(np.zeros(k))
        self.prior_means = ad.parameter(rng.standard_normal((k, LATENT_DIM)))
        self.prior_logvars = ad.parameter(np.zeros((k, LATENT_DIM)))

    @property
    def k(self):
        return self.decoder.widths[-1]

    def parameters(self):
        out = self.encoder.parameters("encoder.")
        out.update(self.decoder.parameters("decoder."))
        out["prior.logits"] = self.prior_logits
        out["prior.means"] = self.prior_means
        out["prior.logvars"] = self.prior_logvars
        return out

    def decoder_logprob(self, z):
        """log q(s | z) as an (B, K) tensor."""
        return ad.log_softmax(self.decoder(z), axis=1)

    def log_prior(self, z):
        """log r(z) under the Gaussian mixture, (B, 1) tensor."""
        b = z.values.shape[0]
        z3 = ad.reshape(z, (b, 1, LATENT_DIM))
        quad = ad.square(ad.sub(z3, self.prior_means))
        var = ad.exp(self.prior_logvars)
        comp = ad.mul(ad.tsum(ad.add(ad.add(ad.constant(_LOG_2PI),
                                            self.prior_logvars),
                                     ad.div(quad, var)), axis=2), -0.5)
        logw = ad.log_softmax(ad.reshape(self.prior_logits, (1, -1)), axis=1)
        return ad.logsumexp(ad.add(comp, logw), axis=1)

    def shrink_states(self, keep):
        """Drop decoder/prior rows for vanished states (surviving rows copied)."""
        keep = np.asarray(keep, dtype=np.int64)
        w = self.decoder.weights[-1]
        b = self.decoder.biases[-1]
        w.values = np.ascontiguousarray(w.values[:, keep])
        b.values = np.ascontiguousarray(b.values[keep])
        self.decoder.widths[-1] = len(keep)
        self.prior_logits.values = np.ascontiguousarray(
            self.prior_logits.values[keep])
        self.prior_means.values = np.ascontiguousarray(
            self.prior_means.values[keep])
        self.prior_logvars.values = np.ascontiguousarray(
            self.prior_logvars.values[keep])

    def arch(self):
        return {"encoder": self.encoder.arch(), "k": self.k,
                "dec_hidden": self.dec_hidden}


def spib_loss(model, batch, future_labels, beta, noise):
    """Variational bound for one minibatch; returns (loss, ce, rate) tensors.

    ``batch`` is a GraphBatch, ``noise`` the reparameterization draw of shape
    (B, latent).  The rate term uses the analytic posterior log-density of the
    drawn sample, log N(z; mu, sigma^2) = -0.5 sum(log 2 pi + logvar + eps^2).
    """
    labels = np.asarray(future_labels, dtype=np.int64)
    if batch.n_graphs == 0 or len(labels) != batch.n_graphs:
        raise ValueError("batch and labels must be nonempty and aligned")
    if labels.max() >= model.k:
        raise ValueError("label id out of range for current state count")
    mu, logvar = model.encoder.forward_batch(batch)
    z = reparameterize(mu, logvar, noise)
    ce = ad.mul(ad.tmean(ad.take_per_row(model.decoder_logprob(z), labels)),
                -1.0)
    log_post = ad.mul(ad.tsum(ad.add(ad.add(ad.constant(_LOG_2PI), logvar),
                                     ad.constant(noise ** 2)),
                              axis=1, keepdims=True), -0.5)
    rate = ad.tmean(ad.sub(log_post, model.log_prior(z)))
    loss = ad.add(ce, ad.mul(rate, beta))
    if not np.isfinite(loss.values):
        raise TrainingDiverged(
            f"non-finite loss (ce={float(ce.values):.6g}, "
            f"rate={float(rate.values):.6g})")
    return loss, ce, rate


def _decode_deterministic(model, frames, batch_size=4096):
    """argmax_s q(s | mu(x)) over many frames, without sampling noise."""
    mu = evaluate_series(model.encoder, frames, batch_size=batch_size)
    logits = model.decoder(ad.constant(mu)).values
    return np.argmax(logits, axis=1).astype(np.int64), mu


def refine_labels(model, series):
    """Relabel every frame from the deterministic latent; drop empty states.

    Returns (new_labels, change_fraction, new_k).  The model is shrunk in
    place when states vanish, so callers must rebuild optimizer state for the
    resized blocks.
    """
    new_labels, _ = _decode_deterministic(model, series.frames)
    changed = float(np.mean(new_labels != series.labels))
    keep = np.unique(new_labels)
    if len(keep) < model.k:
        model.shrink_states(keep)
        remap = np.full(keep.max() + 1, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        new_labels = remap[new_labels]
    return new_labels, changed, model.k


@dataclass
class TrainingReport:
    """Per-epoch log plus refinement history."""

    epochs: list = field(default_factory=list)
    refinements: list = field(default_factory=list)
    converged: bool = False
    final_k: int = 0
    wall_time: float = 0.0

    def log_epoch(self, epoch, loss, ce, rate, k, label_change):
        self.epochs.append({"epoch": epoch, "loss": loss, "ce_term": ce,
                            "rate_term": rate, "k": k,
                            "label_change_frac": label_change})

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss,ce_term,rate_term,K,label_change_frac\n")
            for row in self.epochs:
                fh.write("%d,%.10g,%.10g,%.10g,%d,%.6g\n"
                         % (row["epoch"], row["loss"], row["ce_term"],
                            row["rate_term"], row["k"],
                            row["label_change_frac"]))


def _fresh_adam(model, lr, old=None):
    """Adam over all parameters; moments carried over where shapes survive."""
    opt = Adam(model.parameters(), lr=lr)
    if old is not None:
        for name, p in opt.params.items():
            if name in old.params and old.m[name].shape == p.values.shape:
                opt.m[name] = old.m[name]
                opt.v[name] = old.v[name]
        opt.t = old.t
    return opt


def train(series, config=None, encoder=None, verbose=False):
    """Run the refinement loop; returns (SpibModel, TrainingReport).

    ``series.labels`` provides the initial trial states (use ``init_labels``
    for the standard k-means start).  The last 10% of the series is held out
    of the gradient updates as a contiguous validation block.
    """
    if config is None:
        config = SpibConfig()
    rng = np.random.default_rng(config.seed)
    labels = series.labels.copy()
    if labels.max() + 1 > config.k_init:
        raise ValueError("series labels exceed k_init")
    work = LabeledSeries(series.frames, labels, series.save_stride)
    model = SpibModel(encoder=encoder, k=config.k_init, seed=config.seed)

    n_train = int(len(work) * 0.9)
    if n_train <= config.lag or len(work) - n_train <= config.lag:
        raise ValueError("series too short for the lag and split")

    opt = _fresh_adam(model, config.learning_rate)
    report = TrainingReport()
    t_start = time.time()
    quiet_refinements = 0
    last_change = 1.0
    frames = work.frames

    for epoch in range(1, config.max_epochs + 1):
        t_idx, future = make_pairs(work, config.lag)
        train_sel = t_idx[t_idx + config.lag < n_train]
        order = rng.permutation(len(train_sel))
        ep_loss = ep_ce = ep_rate = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            sel = train_sel[order[lo:lo + config.batch_size]]
            batch = batch_from_frames(frames[sel])
            noise = rng.standard_normal((len(sel), LATENT_DIM))
            opt.zero_grad()
            try:
                loss, ce, rate = spib_loss(model, batch, future[sel],
                                           config.beta, noise)
            except TrainingDiverged as err:
                err.report = report
                raise
            loss.backward()
            opt.step()
            ep_loss += float(loss.values)
            ep_ce += float(ce.values)
            ep_rate += float(rate.values)
            n_batches += 1
        ep_loss /= max(n_batches, 1)
        ep_ce /= max(n_batches, 1)
        ep_rate /= max(n_batches, 1)

        if epoch % config.refine_every == 0:
            old_k = model.k
            new_labels, changed, new_k = refine_labels(model, work)
            work.labels = new_labels
            last_change = changed
            report.refinements.append({"epoch": epoch, "change": changed,
                                       "k": new_k})
            if new_k < old_k:
                opt = _fresh_adam(model, config.learning_rate, old=opt)
            quiet_refinements = (quiet_refinements + 1
                                 if changed < config.label_change_tol else 0)
        report.log_epoch(epoch, ep_loss, ep_ce, ep_rate, model.k, last_change)
        if verbose:
            print(f"epoch {epoch:3d}  loss {ep_loss:+.5f}  ce {ep_ce:.5f}  "
                  f"K {model.k}  dlabel {last_change:.4f}")
        if quiet_refinements >= 2:
            report.converged = True
            break

    report.final_k = model.k
    report.wall_time = time.time() - t_start
    return model, report


def evaluate_cv(model, frame):
    """The biasing variables (z1, z2): deterministic latent mean."""
    mu, _ = encoder_forward(model.encoder, frame)
    return mu


def save_model(path, model, config=None, report=None):
    """Model file plus a JSON sidecar with the config and label history."""
    save_params(path, model.arch(), model.parameters())
    sidecar = {"config": asdict(config) if config else None,
               "refinements": report.refinements if report else None,
               "final_k": model.k}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_model(path):
    """Rebuild a SpibModel from a model file; returns (model, sidecar dict)."""
    arch, params = load_params(path)
    encoder = EncoderNet.from_arch(arch["encoder"])
    model = SpibModel(encoder=encoder, k=arch["k"],
                      dec_hidden=arch["dec_hidden"])
    assign_params(model.parameters(), params)
    sidecar = None
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        pass
    return model, sidecar
