"""Expert CVs: switching function, coordination numbers, moment CVs."""

import numpy as np
import pytest

from gspib import isomers
from gspib.cv import (MomentCv, SwitchParams, coordination_numbers, moment_cv,
                      moments_series, read_cv_series, switch_value,
                      write_cv_series)
from gspib.simulation import quench

from conftest import fd_gradient, rel_err


class TestSwitch:
    def test_limits(self):
        p = SwitchParams()
        s0, _ = switch_value(0.0, p)
        assert s0 == pytest.approx(1.0, abs=1e-14)
        s_r0, _ = switch_value(p.r0, p)
        assert s_r0 == pytest.approx(0.5, abs=1e-14)  # n/m for 6, 12

    def test_two_r0_value(self):
        p = SwitchParams(r0=1.5, n=6, m=12)
        s, _ = switch_value(3.0, p)
        assert s == pytest.approx(63.0 / 4095.0, rel=1e-14)

    def test_monotone_decreasing_in_unit_range(self):
        p = SwitchParams()
        r = np.linspace(0.0, 6.0, 400)
        s, ds = switch_value(r, p)
        assert np.all(s > 0.0)
        assert np.all(s <= 1.0)
        assert np.all(np.diff(s) < 0.0)
        assert np.all(ds[1:] < 0.0)

    def test_smooth_through_r0(self):
        # the naive (1-x^n)/(1-x^m) form blows up here
        p = SwitchParams()
        eps = 1e-9
        lo, _ = switch_value(p.r0 - eps, p)
        hi, _ = switch_value(p.r0 + eps, p)
        assert abs(lo - hi) < 1e-8

    def test_derivative_matches_fd(self):
        p = SwitchParams()
        for r in (0.5, 1.2, 1.5, 1.9, 3.0):
            _, ds = switch_value(r, p)
            h = 1e-6
            fd = (switch_value(r + h, p)[0] - switch_value(r - h, p)[0]) / (2 * h)
            assert ds == pytest.approx(fd, rel=1e-7, abs=1e-10)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            SwitchParams(r0=-1.0)
        with pytest.raises(ValueError):
            SwitchParams(n=12, m=6)
        with pytest.raises(ValueError):
            SwitchParams(n=5, m=12)


class TestCoordination:
    def test_dimer_at_r0(self):
        p = SwitchParams()
        pos = np.array([[0.0, 0.0], [p.r0, 0.0]])
        c = coordination_numbers(pos, p)
        assert np.allclose(c, [0.5, 0.5], atol=1e-14)

    def test_far_apart_goes_to_zero(self):
        pos = np.array([[0.0, 0.0], [500.0, 0.0]])
        c = coordination_numbers(pos)
        assert np.all(c < 1e-12)

    def test_hexagon_center_max_ring_equal(self):
        pos, _ = quench(isomers.hexagon())
        c = coordination_numbers(pos)
        center = np.argmin(np.einsum("ik,ik->i", pos - pos.mean(0), pos - pos.mean(0)))
        ring = np.delete(c, center)
        assert c[center] == c.max()
        assert np.ptp(ring) < 1e-9

    def test_permutation_equivariance(self, rng):
        pos = isomers.trapezoid() + 0.05 * rng.standard_normal((7, 2))
        perm = rng.permutation(7)
        c = coordination_numbers(pos)
        assert np.allclose(coordination_numbers(pos[perm]), c[perm], atol=1e-14)


class TestMomentCv:
    def test_equal_coordination_gives_zero(self):
        # regular heptagon: all particles symmetry-equivalent
        ang = 2.0 * np.pi * np.arange(7) / 7.0
        pos = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        for order in (2, 3):
            v, _ = moment_cv(pos, MomentCv(order))
            assert abs(v) < 1e-12

    def test_gradient_matches_fd(self, rng):
        for order in (2, 3):
            mcv = MomentCv(order)
            for _ in range(3):
                pos = isomers.capped_parallelogram_1() + 0.08 * rng.standard_normal((7, 2))
                v, grad = moment_cv(pos, mcv)
                fd = fd_gradient(lambda x: moment_cv(x.reshape(7, 2), mcv)[0],
                                 pos.ravel())
                assert rel_err(grad.ravel(), fd) <= 1e-7

    def test_invariances(self, rng):
        mcv2, mcv3 = MomentCv(2), MomentCv(3)
        pos = isomers.capped_parallelogram_2() + 0.05 * rng.standard_normal((7, 2))
        v2, _ = moment_cv(pos, mcv2)
        v3, _ = moment_cv(pos, mcv3)
        # permutation exact to 1e-14
        perm = rng.permutation(7)
        assert moment_cv(pos[perm], mcv2)[0] == pytest.approx(v2, abs=1e-14)
        assert moment_cv(pos[perm], mcv3)[0] == pytest.approx(v3, abs=1e-14)
        # rigid motions to 1e-12
        theta = 0.83
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        moved = pos @ rot.T + np.array([3.7, -1.2])
        assert moment_cv(moved, mcv2)[0] == pytest.approx(v2, abs=1e-12)
        assert moment_cv(moved, mcv3)[0] == pytest.approx(v3, abs=1e-12)

    def test_mu2_nonnegative(self, rng):
        mcv = MomentCv(2)
        for _ in range(20):
            pos = 2.0 * rng.standard_normal((7, 2))
            v, _ = moment_cv(pos, mcv)
            assert v >= 0.0

    def test_isomers_map_to_separated_points(self):
        pts = []
        for seed_pos in isomers.isomer_seeds().values():
            mini, _ = quench(seed_pos)
            v2, _ = moment_cv(mini, MomentCv(2))
            v3, _ = moment_cv(mini, MomentCv(3))
            pts.append((v2, v3))
        pts = np.array(pts)
        # four distinct reference points, pairwise separation well above the
        # classification tolerance used downstream (0.002 in CV units)
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.linalg.norm(pts[a] - pts[b]) > 10 * 0.002

    def test_order_validation(self):
        with pytest.raises(ValueError):
            MomentCv(4)


class TestSeries:
    def test_moments_series_matches_single_frame(self, rng):
        frames = np.stack([isomers.hexagon() + 0.03 * rng.standard_normal((7, 2))
                           for _ in range(10)])
        series = moments_series(frames)
        for f in range(10):
            v2, _ = moment_cv(frames[f], MomentCv(2))
            v3, _ = moment_cv(frames[f], MomentCv(3))
            assert series[f, 0] == pytest.approx(v2, abs=1e-14)
            assert series[f, 1] == pytest.approx(v3, abs=1e-14)

    def test_csv_round_trip(self, tmp_path, rng):
        steps = np.arange(0, 500, 100)
        mu2 = rng.random(5)
        mu3 = rng.standard_normal(5)
        z = rng.standard_normal((5, 2))
        path = tmp_path / "cv.csv"
        write_cv_series(path, steps, mu2, mu3, z)
        back_steps, cols = read_cv_series(path)
        assert np.array_equal(back_steps, steps)
        assert np.allclose(cols["mu2"], mu2, atol=1e-9)
        assert np.allclose(cols["mu3"], mu3, atol=1e-9)
        assert np.allclose(cols["z1"], z[:, 0], atol=1e-9)
        assert list(cols) == ["mu2", "mu3", "z1", "z2"]
