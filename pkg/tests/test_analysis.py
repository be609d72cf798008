"""Classification, FES grids, dF tables, and the interval-overlap check."""

import numpy as np
import pytest

from gspib.analysis import (DeltaFRow, FesGrid, StateCatalog, StateRef,
                            TRANSITION, build_catalog, classify_frame,
                            classify_series, delta_f, delta_f_to_csv,
                            fes_from_weights, intervals_overlap,
                            read_delta_f_csv)
from gspib.isomers import ISOMER_NAMES, isomer_seeds
from gspib.metad import doublewell_potential, reweight, wtmetad_doublewell


@pytest.fixture(scope="module")
def catalog():
    return build_catalog()


class TestCatalog:
    def test_four_states_ordered(self, catalog):
        assert catalog.names == ISOMER_NAMES
        e = catalog.energies
        assert np.all(np.diff(e) > 1e-6)
        # frozen quenched minima of the four LJ7 isomers
        assert e[0] == pytest.approx(-12.534867, abs=1e-5)
        assert e[1] == pytest.approx(-11.501291, abs=1e-5)
        assert e[2] == pytest.approx(-11.476907, abs=1e-5)
        assert e[3] == pytest.approx(-11.403419, abs=1e-5)

    def test_lookup_by_name_and_index(self, catalog):
        assert catalog["c2"].id == 2
        assert catalog[0].name == "c0"
        with pytest.raises(KeyError):
            catalog["c9"]

    def test_mu_reference_points_distinct(self, catalog):
        pts = np.array([e.mu_ref for e in catalog])
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(pts[i] - pts[j]) > 0.05

    def test_rejects_near_degenerate(self):
        entries = [StateRef(i, f"s{i}", -12.0 + i * 1e-7, (0.0, 0.0))
                   for i in range(4)]
        with pytest.raises(ValueError, match="separated"):
            StateCatalog(entries)

    def test_csv(self, catalog, tmp_path):
        path = tmp_path / "catalog.csv"
        catalog.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "id,name,quench_energy,mu2,mu3"
        assert len(lines) == 5


class TestClassify:
    def test_exact_seeds(self, catalog):
        for name in ISOMER_NAMES:
            assert classify_frame(isomer_seeds()[name], catalog) == name

    def test_noisy_hexagon_still_c0(self, catalog, rng):
        for _ in range(5):
            frame = isomer_seeds()["c0"] + rng.normal(size=(7, 2)) * 0.05
            assert classify_frame(frame, catalog) == "c0"

    def test_interpolated_frames_never_unknown(self, catalog):
        # frames along a c0 -> c3 interpolation either quench into a catalog
        # minimum or fail to converge (at lam = 0.5 two particles coincide
        # exactly and the gradient is astronomically steep); a converged
        # quench landing outside the catalog would be a real "unknown" and
        # a failure
        import warnings as w
        a, b = isomer_seeds()["c0"], isomer_seeds()["c3"]
        outcomes = []
        for lam in (0.2, 0.35, 0.5, 0.65, 0.8):
            frame = (1 - lam) * a + lam * b
            with w.catch_warnings(record=True) as caught:
                w.simplefilter("always")
                out = classify_frame(frame, catalog)
            if out == TRANSITION:
                assert any("converge" in str(c.message) for c in caught)
            else:
                assert out in ISOMER_NAMES
            outcomes.append(out)
        assert any(o in ISOMER_NAMES for o in outcomes)

    def test_invariance(self, catalog, rng):
        frame = isomer_seeds()["c1"] + rng.normal(size=(7, 2)) * 0.03
        base = classify_frame(frame, catalog)
        theta = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        assert classify_frame(frame @ rot.T + 3.7, catalog) == base
        assert classify_frame(frame[rng.permutation(7)], catalog) == base

    def test_series_ids(self, catalog):
        frames = np.stack([isomer_seeds()[n] for n in ISOMER_NAMES])
        ids = classify_series(frames, catalog)
        assert list(ids) == [0, 1, 2, 3]


class TestFesFromWeights:
    def test_uniform_two_bins(self):
        vals = np.array([0.25, 0.25, 0.75, 0.75])
        fes = fes_from_weights(vals, np.ones(4), [(0.0, 1.0, 2)], kT=0.1)
        assert fes.values.shape == (2,)
        assert np.all(~fes.mask)
        assert fes.values[0] == fes.values[1] == 0.0

    def test_doubled_mass_is_kt_log_two(self):
        vals = np.array([0.25, 0.25, 0.75, 0.75])
        w = np.array([2.0, 2.0, 1.0, 1.0])
        fes = fes_from_weights(vals, w, [(0.0, 1.0, 2)], kT=0.1)
        assert fes.values[0] == 0.0
        assert fes.values[1] == pytest.approx(0.1 * np.log(2.0), rel=1e-12)

    def test_masking_no_zero_fill(self):
        vals = np.array([[0.25, 0.25], [0.75, 0.25]])
        fes = fes_from_weights(vals, np.ones(2),
                               [(0.0, 1.0, 2), (0.0, 1.0, 2)], kT=0.1)
        assert fes.mask.sum() == 2
        assert np.isnan(fes.values[fes.mask]).all()
        assert np.nanmin(fes.values) == 0.0

    def test_min_shift_nonnegative(self, rng):
        vals = rng.normal(size=800)
        w = rng.uniform(0.5, 2.0, size=800)
        fes = fes_from_weights(vals, w, [(-3.0, 3.0, 20)], kT=0.2)
        sampled = fes.values[~fes.mask]
        assert np.all(sampled >= 0.0)
        assert sampled.min() == 0.0

    def test_centers(self):
        fes = fes_from_weights(np.array([0.5]), np.ones(1),
                               [(0.0, 1.0, 2)], kT=0.1)
        assert np.allclose(fes.centers[0], [0.25, 0.75])

    def test_validation(self):
        with pytest.raises(ValueError, match="no samples"):
            fes_from_weights(np.zeros((0, 2)), np.zeros(0),
                             [(0, 1, 2), (0, 1, 2)], kT=0.1)
        with pytest.raises(ValueError, match="lengths"):
            fes_from_weights(np.zeros(3), np.ones(4), [(0, 1, 2)], kT=0.1)
        with pytest.raises(ValueError, match="per CV"):
            fes_from_weights(np.zeros((5, 2)), np.ones(5), [(0, 1, 2)],
                             kT=0.1)

    def test_doublewell_oracle(self):
        kT = 0.4
        xs, _, state = wtmetad_doublewell(n_steps=600_000, kT=kT, seed=2)
        w, start = reweight(state, xs, kT=kT)
        fes = fes_from_weights(xs[start:], w, [(-1.4, 1.4, 28)], kT=kT)
        ref = doublewell_potential(fes.centers[0])
        ref -= ref.min()
        sampled = ~fes.mask
        err = fes.values[sampled] - ref[sampled]
        err -= err.mean()
        assert np.max(np.abs(err)) < 0.2


class TestDeltaF:
    def _labels_weights(self, counts, n=1000):
        labels = np.concatenate([np.full(c, s) for s, c in enumerate(counts)])
        rng = np.random.default_rng(0)
        labels = labels[rng.permutation(len(labels))]
        return labels, np.ones(len(labels))

    def test_equal_populations_zero(self, catalog):
        labels, w = self._labels_weights([500, 500, 500, 500])
        rows = delta_f(None, w, catalog, kT=0.1, labels=labels)
        for r in rows:
            assert r.delta_f == pytest.approx(0.0, abs=1e-12)
            assert r.ci_low <= 0.0 <= r.ci_high

    def test_e_to_one_ratio(self, catalog):
        n1 = 2000
        n0 = int(round(n1 * np.e))
        labels, w = self._labels_weights([n0, n1, n1, n1])
        rows = delta_f(None, w, catalog, kT=0.1, labels=labels)
        assert rows[1].delta_f == pytest.approx(0.1, abs=1e-4)

    def test_weight_rescaling_invariance(self, catalog, rng):
        labels = rng.integers(0, 4, size=4000)
        w = rng.uniform(0.5, 2.0, size=4000)
        r1 = delta_f(None, w, catalog, kT=0.1, labels=labels)
        r2 = delta_f(None, 37.5 * w, catalog, kT=0.1, labels=labels)
        for a, b in zip(r1, r2):
            assert a.delta_f == pytest.approx(b.delta_f, rel=1e-12)
            assert a.ci_low == pytest.approx(b.ci_low, rel=1e-12)

    def test_absent_state_is_nan_not_inf(self, catalog):
        labels, w = self._labels_weights([800, 800, 800, 0])
        rows = delta_f(None, w, catalog, kT=0.1, labels=labels)
        assert np.isnan(rows[3].delta_f)
        assert rows[3].n_frames == 0
        assert np.isfinite(rows[1].delta_f)

    def test_transition_frames_ignored(self, catalog):
        labels = np.array([0, 0, -1, 1, -1, 1])
        rows = delta_f(None, np.ones(6), catalog, kT=0.1, labels=labels)
        assert rows[0].n_frames == 2
        assert rows[1].n_frames == 2
        assert rows[1].delta_f == pytest.approx(0.0, abs=1e-12)

    def test_reference_must_be_sampled(self, catalog):
        labels = np.array([1, 1, 2, 2] * 10)
        with pytest.raises(ValueError, match="reference"):
            delta_f(None, np.ones(40), catalog, kT=0.1, labels=labels)

    def test_needs_two_states(self, catalog):
        labels = np.zeros(40, dtype=int)
        with pytest.raises(ValueError, match="two sampled"):
            delta_f(None, np.ones(40), catalog, kT=0.1, labels=labels)

    def test_csv_round_trip(self, catalog, tmp_path):
        labels, w = self._labels_weights([900, 600, 300, 150])
        rows = delta_f(None, w, catalog, kT=0.1, labels=labels)
        path = tmp_path / "deltaf.csv"
        delta_f_to_csv(rows, path)
        back = read_delta_f_csv(path)
        assert [r.name for r in back] == list(ISOMER_NAMES)
        for a, b in zip(rows, back):
            assert b.delta_f == pytest.approx(a.delta_f, abs=1e-7)

    def test_block_bootstrap_widens_for_correlated_labels(self, catalog):
        # a slowly switching label series has few independent blocks; the
        # block bootstrap must report wider intervals than an iid shuffle
        n = 4000
        block_labels = np.repeat([0, 1, 0, 1, 0, 1, 0, 1], n // 8)
        rng = np.random.default_rng(3)
        iid_labels = block_labels[rng.permutation(n)]
        w = np.ones(n)
        r_block = delta_f(None, w, catalog, kT=0.1, labels=block_labels)
        r_iid = delta_f(None, w, catalog, kT=0.1, labels=iid_labels)
        width_block = r_block[1].ci_high - r_block[1].ci_low
        width_iid = r_iid[1].ci_high - r_iid[1].ci_low
        assert width_block > width_iid


class TestIntervalsOverlap:
    def test_overlap_and_disjoint(self):
        a = DeltaFRow("c1", 0.1, 0.05, 0.15, 0.2, 100)
        b = DeltaFRow("c1", 0.12, 0.08, 0.2, 0.2, 100)
        c = DeltaFRow("c1", 0.5, 0.4, 0.6, 0.2, 100)
        assert intervals_overlap(a, b)
        assert not intervals_overlap(a, c)

    def test_nan_never_overlaps(self):
        a = DeltaFRow("c3", np.nan, np.nan, np.nan, 0.0, 0)
        b = DeltaFRow("c3", 0.1, 0.0, 0.2, 0.1, 50)
        assert not intervals_overlap(a, b)
