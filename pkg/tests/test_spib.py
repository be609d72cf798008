"""Tests for the state predictive bottleneck training loop."""

import numpy as np
import pytest
from scipy.special import log_softmax, logsumexp

from gspib import autodiff as ad
from gspib import isomers, spib
from gspib.nn import LATENT_DIM, batch_from_frames, encoder_forward

_LOG_2PI = float(np.log(2.0 * np.pi))


def _two_state_series(n, jitter=0.03, seed=7, p_hop=0.02, save_stride=100):
    """Markov hopping between two rigid isomers with Gaussian jitter."""
    rng = np.random.default_rng(seed)
    states = np.zeros(n, dtype=np.int64)
    for t in range(1, n):
        states[t] = states[t - 1] ^ (rng.random() < p_hop)
    base = (isomers.hexagon(), isomers.trapezoid())
    frames = np.stack([base[s] + jitter * rng.standard_normal((7, 2))
                       for s in states])
    series = spib.LabeledSeries(frames, states, save_stride=save_stride)
    return series, states, base


def _tiny_model(k=4, seed=5):
    return spib.SpibModel(k=k, seed=seed)


class TestLabeledSeries:
    def test_basic(self):
        frames = np.zeros((6, 7, 2))
        labels = np.array([0, 1, 0, 1, 2, 2])
        s = spib.LabeledSeries(frames, labels)
        assert len(s) == 6
        assert s.n_states == 3
        assert s.save_stride == 100

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            spib.LabeledSeries(np.zeros((4, 7, 2)), np.zeros(3, dtype=int))

    def test_negative_labels(self):
        with pytest.raises(ValueError, match="nonnegative"):
            spib.LabeledSeries(np.zeros((2, 7, 2)), np.array([0, -1]))

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="frames"):
            spib.LabeledSeries(np.zeros((4, 14)), np.zeros(4, dtype=int))


class TestConfig:
    def test_defaults(self):
        cfg = spib.SpibConfig()
        assert cfg.beta == 0.01
        assert cfg.lag == 5
        assert cfg.k_init == 10
        assert cfg.batch_size == 512

    @pytest.mark.parametrize("kw", [dict(beta=-0.1), dict(lag=0),
                                    dict(label_change_tol=0.0),
                                    dict(label_change_tol=1.0),
                                    dict(latent_dim=3), dict(k_init=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            spib.SpibConfig(**kw)


class TestMakePairs:
    def test_counts_and_alignment(self):
        labels = np.arange(10) % 3
        s = spib.LabeledSeries(np.zeros((10, 7, 2)), labels)
        idx, future = spib.make_pairs(s, 3)
        assert len(idx) == 7
        np.testing.assert_array_equal(idx, np.arange(7))
        np.testing.assert_array_equal(future, labels[3:])
        # first pair joins frame 0 to the label of frame 3
        assert idx[0] == 0 and future[0] == labels[3]

    def test_maximal_lag(self):
        s = spib.LabeledSeries(np.zeros((5, 7, 2)), np.arange(5) % 2)
        idx, future = spib.make_pairs(s, 4)
        assert len(idx) == 1
        assert future[0] == s.labels[4]

    def test_lag_too_long(self):
        s = spib.LabeledSeries(np.zeros((5, 7, 2)), np.zeros(5, dtype=int))
        with pytest.raises(ValueError, match="lag"):
            spib.make_pairs(s, 5)

    def test_lag_too_short(self):
        s = spib.LabeledSeries(np.zeros((5, 7, 2)), np.zeros(5, dtype=int))
        with pytest.raises(ValueError, match="lag"):
            spib.make_pairs(s, 0)


class TestInitLabels:
    def test_two_geometries_separate(self):
        series, states, _ = _two_state_series(300, jitter=0.02, seed=11)
        labels = spib.init_labels(series.frames, 2, seed=0)
        # perfect split up to label permutation
        assert set(np.unique(labels)) == {0, 1}
        agree = np.mean(labels == states)
        assert agree in (0.0, 1.0) or max(agree, 1 - agree) == 1.0

    def test_k_one_is_all_zero(self):
        series, _, _ = _two_state_series(50)
        labels = spib.init_labels(series.frames, 1)
        assert labels.dtype == np.int64
        assert np.all(labels == 0)

    def test_permutation_invariant(self):
        series, _, _ = _two_state_series(120, seed=3)
        rng = np.random.default_rng(0)
        perm = rng.permutation(7)
        shuffled = series.frames[:, perm, :]
        a = spib.init_labels(series.frames, 3, seed=42)
        b = spib.init_labels(shuffled, 3, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_labels_are_compact(self):
        # asking for more clusters than the data supports still yields a
        # dense 0..K-1 labeling
        series, _, _ = _two_state_series(80, jitter=0.001, seed=5)
        labels = spib.init_labels(series.frames, 6, seed=1)
        k = labels.max() + 1
        assert set(np.unique(labels)) == set(range(k))

    def test_degenerate_series(self):
        frames = np.repeat(isomers.hexagon()[None], 40, axis=0)
        with pytest.raises(ValueError, match="degenerate"):
            spib.init_labels(frames, 2)

    def test_bad_k(self):
        with pytest.raises(ValueError, match="k_init"):
            spib.init_labels(np.zeros((10, 7, 2)), 0)


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        rng = np.random.default_rng(0)
        mu = ad.parameter(rng.standard_normal((6, 2)))
        lv = ad.parameter(rng.standard_normal((6, 2)))
        z = spib.reparameterize(mu, lv, np.zeros((6, 2)))
        np.testing.assert_array_equal(z.values, mu.values)

    def test_unit_logvar_shift(self):
        mu = ad.parameter(np.zeros((4, 2)))
        lv = ad.parameter(np.zeros((4, 2)))
        z = spib.reparameterize(mu, lv, np.ones((4, 2)))
        np.testing.assert_allclose(z.values, 1.0, rtol=1e-15)

    def test_formula_and_gradients(self):
        rng = np.random.default_rng(1)
        mu = ad.parameter(rng.standard_normal((5, 2)))
        lv = ad.parameter(rng.standard_normal((5, 2)))
        noise = rng.standard_normal((5, 2))
        z = spib.reparameterize(mu, lv, noise)
        np.testing.assert_allclose(
            z.values, mu.values + np.exp(0.5 * lv.values) * noise, rtol=1e-14)
        ad.tsum(z).backward()
        np.testing.assert_allclose(mu.grad, np.ones((5, 2)), rtol=1e-14)
        np.testing.assert_allclose(
            lv.grad, 0.5 * np.exp(0.5 * lv.values) * noise, rtol=1e-13)


class TestSpibModel:
    def test_state_count(self):
        model = _tiny_model(k=7)
        assert model.k == 7
        assert model.prior_logits.values.shape == (7,)
        assert model.prior_means.values.shape == (7, LATENT_DIM)

    def test_parameters_cover_all_blocks(self):
        model = _tiny_model(k=3)
        names = set(model.parameters())
        assert any(n.startswith("encoder.") for n in names)
        assert any(n.startswith("decoder.") for n in names)
        assert {"prior.logits", "prior.means", "prior.logvars"} <= names

    def test_log_prior_matches_numpy(self):
        model = _tiny_model(k=3, seed=9)
        rng = np.random.default_rng(2)
        z = rng.standard_normal((8, 2))
        got = model.log_prior(ad.constant(z)).values[:, 0]
        logw = log_softmax(model.prior_logits.values)
        means = model.prior_means.values
        logvars = model.prior_logvars.values
        comp = -0.5 * np.sum(
            _LOG_2PI + logvars[None] + (z[:, None] - means[None]) ** 2
            / np.exp(logvars[None]), axis=2)
        want = logsumexp(comp + logw[None], axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_log_prior_single_component_is_gaussian(self):
        model = _tiny_model(k=1, seed=4)
        z = np.array([[0.3, -1.2]])
        got = float(model.log_prior(ad.constant(z)).values[0, 0])
        m = model.prior_means.values[0]
        want = -0.5 * np.sum(_LOG_2PI + (z[0] - m) ** 2)
        assert abs(got - want) < 1e-12

    def test_shrink_states(self):
        model = _tiny_model(k=5, seed=3)
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 2))
        before = model.decoder(ad.constant(z)).values
        logits = model.prior_logits.values.copy()
        means = model.prior_means.values.copy()
        model.shrink_states([0, 2, 4])
        assert model.k == 3
        after = model.decoder(ad.constant(z)).values
        # slicing the weight matrix changes the BLAS kernel, so allow one ulp
        np.testing.assert_allclose(after, before[:, [0, 2, 4]], rtol=1e-14)
        np.testing.assert_array_equal(model.prior_logits.values,
                                      logits[[0, 2, 4]])
        np.testing.assert_array_equal(model.prior_means.values,
                                      means[[0, 2, 4]])


class TestSpibLoss:
    def _batch(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        base = (isomers.hexagon(), isomers.trapezoid())
        frames = np.stack([base[i % 2] + 0.05 * rng.standard_normal((7, 2))
                           for i in range(n)])
        labels = rng.integers(0, 4, size=n)
        noise = rng.standard_normal((n, LATENT_DIM))
        return batch_from_frames(frames), frames, labels, noise

    def test_beta_zero_is_cross_entropy(self):
        model = _tiny_model()
        batch, frames, labels, noise = self._batch()
        loss, ce, rate = spib.spib_loss(model, batch, labels, 0.0, noise)
        assert float(loss.values) == float(ce.values)
        assert np.isfinite(float(rate.values))

    def test_terms_match_numpy_replication(self):
        model = _tiny_model(seed=8)
        batch, frames, labels, noise = self._batch(seed=3)
        beta = 0.37
        loss, ce, rate = spib.spib_loss(model, batch, labels, beta, noise)

        mu, lv = model.encoder.forward_batch(batch_from_frames(frames))
        mu, lv = mu.values, lv.values
        z = mu + np.exp(0.5 * lv) * noise
        logq = log_softmax(model.decoder(ad.constant(z)).values, axis=1)
        want_ce = -np.mean(logq[np.arange(len(labels)), labels])
        log_post = -0.5 * np.sum(_LOG_2PI + lv + noise ** 2, axis=1)
        logw = log_softmax(model.prior_logits.values)
        comp = -0.5 * np.sum(
            _LOG_2PI + model.prior_logvars.values[None]
            + (z[:, None] - model.prior_means.values[None]) ** 2
            / np.exp(model.prior_logvars.values[None]), axis=2)
        want_rate = np.mean(log_post - logsumexp(comp + logw[None], axis=1))

        assert abs(float(ce.values) - want_ce) < 1e-10
        assert abs(float(rate.values) - want_rate) < 1e-10
        assert abs(float(loss.values) - (want_ce + beta * want_rate)) < 1e-10

    def test_label_out_of_range(self):
        model = _tiny_model(k=2)
        batch, frames, labels, noise = self._batch()
        with pytest.raises(ValueError, match="range"):
            spib.spib_loss(model, batch, np.full(6, 2), 0.0, noise)

    def test_label_count_mismatch(self):
        model = _tiny_model()
        batch, frames, labels, noise = self._batch()
        with pytest.raises(ValueError, match="aligned"):
            spib.spib_loss(model, batch, labels[:-1], 0.0, noise)

    def test_gradient_matches_finite_difference(self):
        """Central differences through the whole encoder/decoder/prior stack."""
        model = _tiny_model(seed=21)
        batch, frames, labels, noise = self._batch(seed=4)
        beta = 0.2

        loss, _, _ = spib.spib_loss(model, batch, labels, beta, noise)
        loss.backward()
        params = model.parameters()
        grads = {k: (None if p.grad is None else p.grad.copy())
                 for k, p in params.items()}

        def f():
            l, _, _ = spib.spib_loss(
                model, batch_from_frames(frames), labels, beta, noise)
            return float(l.values)

        rng = np.random.default_rng(99)
        names = sorted(params)
        for trial in range(24):
            name = names[rng.integers(len(names))]
            p = params[name]
            flat = p.values.reshape(-1)
            j = rng.integers(flat.size)
            h = 1.0e-6 * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            fp = f()
            flat[j] = orig - h
            fm = f()
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            an = grads[name].reshape(-1)[j] if grads[name] is not None else 0.0
            assert abs(fd - an) <= 1e-5 * max(1.0, abs(fd)), \
                f"{name}[{j}]: fd {fd:.8g} vs backward {an:.8g}"


class TestRefineLabels:
    def test_uniform_decoder_collapses_to_one_state(self):
        series, _, _ = _two_state_series(40)
        model = _tiny_model(k=3)
        model.decoder.weights[-1].values[:] = 0.0
        model.decoder.biases[-1].values[:] = 0.0
        labels, changed, k = spib.refine_labels(model, series)
        assert k == 1 and model.k == 1
        assert np.all(labels == 0)
        assert changed == pytest.approx(np.mean(series.labels != 0))

    def test_refinement_fixed_point(self):
        series, _, _ = _two_state_series(60, seed=2)
        model = _tiny_model(k=4, seed=1)
        labels, _, _ = spib.refine_labels(model, series)
        series.labels = labels
        again, changed, k = spib.refine_labels(model, series)
        assert changed == 0.0
        np.testing.assert_array_equal(again, labels)
        assert k == model.k

    def test_surviving_states_are_dense(self):
        series, _, _ = _two_state_series(80, seed=6)
        model = _tiny_model(k=6, seed=2)
        labels, _, k = spib.refine_labels(model, series)
        assert set(np.unique(labels)) == set(range(k))


class TestTraining:
    def test_two_state_recovery(self):
        """Training on a separable two-state series keeps K=2 and finds the
        right partition; the latent means end up well separated."""
        series, states, base = _two_state_series(1000, seed=7)
        labels0 = spib.init_labels(series.frames, 4, seed=1)
        series.labels = labels0
        cfg = spib.SpibConfig(k_init=int(labels0.max()) + 1, lag=2,
                              batch_size=64, max_epochs=30, refine_every=5,
                              seed=3)
        model, report = spib.train(series, cfg)
        assert report.final_k == 2
        assert report.converged
        decoded, _ = spib._decode_deterministic(model, series.frames)
        agree = np.mean(decoded == states)
        assert max(agree, 1.0 - agree) > 0.99
        mu_a = spib.evaluate_cv(model, base[0])
        mu_b = spib.evaluate_cv(model, base[1])
        assert np.linalg.norm(mu_a - mu_b) > 1.0

    def test_cross_entropy_decreases(self):
        series, _, _ = _two_state_series(600, seed=12)
        series.labels = spib.init_labels(series.frames, 2, seed=0)
        cfg = spib.SpibConfig(beta=0.0, k_init=2, lag=2, batch_size=64,
                              max_epochs=10, refine_every=100, seed=1)
        model, report = spib.train(series, cfg)
        ce = [row["ce_term"] for row in report.epochs]
        assert ce[-1] < ce[0]
        assert ce[-1] < 0.3

    def test_k_never_increases(self):
        series, _, _ = _two_state_series(1000, seed=9)
        series.labels = spib.init_labels(series.frames, 5, seed=2)
        cfg = spib.SpibConfig(k_init=5, lag=2, batch_size=64, max_epochs=25,
                              refine_every=5, seed=4)
        model, report = spib.train(series, cfg)
        ks = [r["k"] for r in report.refinements]
        assert all(b <= a for a, b in zip(ks, ks[1:]))
        assert report.final_k == ks[-1]
        decoded, _ = spib._decode_deterministic(model, series.frames)
        assert set(np.unique(decoded)) == set(range(report.final_k))

    def test_deterministic_given_seed(self):
        series, _, _ = _two_state_series(300, seed=5)
        series.labels = spib.init_labels(series.frames, 3, seed=0)
        cfg = spib.SpibConfig(k_init=3, lag=2, batch_size=128, max_epochs=6,
                              refine_every=3, seed=11)
        run = []
        for _ in range(2):
            s = spib.LabeledSeries(series.frames.copy(), series.labels.copy())
            run.append(spib.train(s, cfg))
        (m1, r1), (m2, r2) = run
        assert r1.epochs == r2.epochs
        assert r1.refinements == r2.refinements
        for (n1, p1), (n2, p2) in zip(sorted(m1.parameters().items()),
                                      sorted(m2.parameters().items())):
            assert n1 == n2
            np.testing.assert_array_equal(p1.values, p2.values)

    def test_labels_exceeding_k_init(self):
        series, _, _ = _two_state_series(100)
        series.labels = np.arange(100) % 5
        cfg = spib.SpibConfig(k_init=3, lag=2)
        with pytest.raises(ValueError, match="k_init"):
            spib.train(series, cfg)

    def test_series_too_short(self):
        series, _, _ = _two_state_series(20)
        cfg = spib.SpibConfig(k_init=2, lag=10)
        with pytest.raises(ValueError, match="short"):
            spib.train(series, cfg)

    def test_divergence_aborts_with_report(self):
        series, _, _ = _two_state_series(80, seed=8)
        series.frames[5, 0, 0] = np.nan
        cfg = spib.SpibConfig(k_init=2, lag=2, batch_size=64, max_epochs=3,
                              seed=0)
        with pytest.raises(spib.TrainingDiverged) as err:
            spib.train(series, cfg)
        assert err.value.report is not None


class TestReportAndModelFile:
    def test_report_csv(self, tmp_path):
        report = spib.TrainingReport()
        report.log_epoch(1, 1.5, 1.4, 10.0, 4, 1.0)
        report.log_epoch(2, 0.9, 0.85, 5.0, 3, 0.25)
        path = tmp_path / "train.csv"
        report.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,loss,ce_term,rate_term,K,label_change_frac"
        assert len(lines) == 3
        row = lines[2].split(",")
        assert int(row[0]) == 2
        assert float(row[1]) == pytest.approx(0.9)
        assert int(row[4]) == 3

    def test_save_load_round_trip(self, tmp_path):
        series, _, base = _two_state_series(200, seed=4)
        series.labels = spib.init_labels(series.frames, 2, seed=0)
        cfg = spib.SpibConfig(k_init=2, lag=2, batch_size=128, max_epochs=4,
                              refine_every=2, seed=6)
        model, report = spib.train(series, cfg)
        path = tmp_path / "model.gspib"
        spib.save_model(path, model, config=cfg, report=report)

        loaded, sidecar = spib.load_model(path)
        assert loaded.k == model.k
        for frame in base:
            np.testing.assert_array_equal(spib.evaluate_cv(loaded, frame),
                                          spib.evaluate_cv(model, frame))
        assert sidecar["config"]["lag"] == 2
        assert sidecar["final_k"] == model.k
        assert sidecar["refinements"] == report.refinements

    def test_load_without_sidecar(self, tmp_path):
        model = _tiny_model(k=2)
        from gspib.nn import save_params
        save_params(tmp_path / "bare.gspib", model.arch(), model.parameters())
        loaded, sidecar = spib.load_model(tmp_path / "bare.gspib")
        assert sidecar is None
        assert loaded.k == 2


class TestEvaluateCv:
    def test_matches_encoder_mean(self):
        model = _tiny_model()
        frame = isomers.capped_parallelogram_1()
        mu, _ = encoder_forward(model.encoder, frame)
        np.testing.assert_array_equal(spib.evaluate_cv(model, frame), mu)
        assert spib.evaluate_cv(model, frame).shape == (LATENT_DIM,)
