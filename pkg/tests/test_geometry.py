import numpy as np
import pytest

from mcu_lab.errors import DegenerateError, DomainError
from mcu_lab.geometry import (bin_histogram, change_ratio, decile_means, explained_variance,
                              geometry_report, predicted_snr, recovery_ratio, relearn_gap, snr_estimate)
from mcu_lab.linalg import Spectrum
from mcu_lab.pipeline import NtkSimConfig, ntk_random_walk, ntk_simulate
from mcu_lab.synth import make_spectrum


def axes_spectrum(variances):
    var = np.asarray(variances, dtype=np.float64)
    return Spectrum(np.zeros(var.size), np.eye(var.size), var)


class TestExplainedVariance:
    def test_two(self):
        np.testing.assert_allclose(explained_variance(axes_spectrum([4, 1])), [0.8, 0.2])

    def test_single(self):
        np.testing.assert_array_equal(explained_variance(axes_spectrum([3.0])), [1.0])

    def test_geometric(self):
        ev = explained_variance(axes_spectrum(make_spectrum(10, "geometric", 0.5)))
        assert ev[0] == pytest.approx(1 / sum(0.5**k for k in range(10)))
        assert ev[0] == pytest.approx(0.5005, abs=1e-4)

    def test_all_zero(self):
        with pytest.raises(DomainError):
            explained_variance(axes_spectrum([0.0, 0.0]))


class TestChangeRatio:
    def test_single_sample(self):
        r = change_ratio(np.zeros((1, 2)), np.array([[3.0, -1.0]]), axes_spectrum([1, 1]))
        np.testing.assert_allclose(r, [0.75, 0.25])

    def test_along_first(self):
        r = change_ratio(np.zeros((3, 4)), np.outer([1.0, -2.0, 0.5], np.eye(4)[0]), axes_spectrum(np.ones(4)))
        np.testing.assert_array_equal(r, [1, 0, 0, 0])

    def test_sums_to_one(self, rng):
        h_o, h_u = rng.standard_normal((2, 20, 5))
        assert change_ratio(h_o, h_u, axes_spectrum(np.ones(5))).sum() == pytest.approx(1.0)

    def test_unmoved_samples_excluded(self):
        h_o = np.zeros((3, 2))
        h_u = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        r, n = change_ratio(h_o, h_u, axes_spectrum([1, 1]), return_count=True)
        assert n == 1
        np.testing.assert_allclose(r, [0.5, 0.5])

    def test_nothing_moved(self):
        with pytest.raises(DegenerateError):
            change_ratio(np.zeros((2, 2)), np.zeros((2, 2)), axes_spectrum([1, 1]))

    def test_misaligned(self):
        with pytest.raises(DomainError):
            change_ratio(np.zeros((2, 2)), np.zeros((3, 2)), axes_spectrum([1, 1]))

    def test_ntk_simulated_scales_with_sigma(self):
        # typical displacement along k is sqrt(change_sq), proportional to sigma_k
        sigma2 = make_spectrum(8, "geometric", 0.5)
        res = ntk_simulate(NtkSimConfig(sigma2, tau2=0.0))
        disp = np.sqrt(res.change_sq)[None, :]
        r = change_ratio(np.zeros_like(disp), disp, axes_spectrum(sigma2))
        np.testing.assert_allclose(r, np.sqrt(sigma2) / np.sqrt(sigma2).sum(), rtol=1e-12)

    def test_random_walk_ordering(self):
        sigma2 = make_spectrum(8, "geometric", 0.5)
        disp = ntk_random_walk(NtkSimConfig(sigma2, T=50), n_walks=2000, seed=0)
        r = change_ratio(np.zeros_like(disp), disp, axes_spectrum(sigma2))
        assert np.all(np.diff(r) < 0)


class TestRecoveryRatio:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.h_o = rng.standard_normal((30, 4))
        self.h_u = self.h_o + rng.standard_normal((30, 4))
        self.spec = axes_spectrum(np.ones(4))

    def test_full_reversal(self):
        r = recovery_ratio(self.h_o, self.h_u, self.h_o, self.spec)
        np.testing.assert_allclose(r.values, 1.0)

    def test_no_reversal(self):
        np.testing.assert_array_equal(recovery_ratio(self.h_o, self.h_u, self.h_u, self.spec).values, 0.0)

    def test_midpoint(self):
        r = recovery_ratio(self.h_o, self.h_u, (self.h_o + self.h_u) / 2, self.spec)
        np.testing.assert_allclose(r.values, 0.5)

    def test_overshoot_not_clipped(self):
        r = recovery_ratio(self.h_o, self.h_u, 2 * self.h_o - self.h_u, self.spec)
        np.testing.assert_allclose(r.values, 2.0)

    def test_floor_masks_small_denominators(self):
        h_u = self.h_o.copy()
        h_u[:, 0] += 1.0
        h_u[0, 0] = self.h_o[0, 0] + 1e-6
        r = recovery_ratio(self.h_o, h_u, self.h_o, self.spec)
        assert r.valid_fraction[0] == pytest.approx(29 / 30)
        assert np.isnan(r.values[1])

    def test_nothing_valid(self):
        with pytest.raises(DegenerateError):
            recovery_ratio(self.h_o, self.h_o, self.h_o, self.spec)


class TestBins:
    def test_one_bin(self):
        np.testing.assert_allclose(bin_histogram([0.6, 0.3, 0.1], 1), [1.0])

    def test_two_bins(self):
        np.testing.assert_array_equal(bin_histogram([0.5, 0.5, 0, 0], 2), [1.0, 0.0])

    def test_uniform(self):
        np.testing.assert_allclose(bin_histogram(np.full(64, 1 / 64), 8), 0.125)

    def test_remainder_in_last(self):
        np.testing.assert_array_equal(bin_histogram(np.ones(7), 3), [2, 2, 3])

    def test_too_many_bins(self):
        with pytest.raises(DomainError):
            bin_histogram([1.0, 2.0], 3)


class TestSnr:
    def test_zero_spread(self):
        assert snr_estimate(np.full(5, 2.0))[0] == np.inf

    def test_zero_everything(self):
        assert snr_estimate(np.zeros(5))[0] == 0.0

    def test_pure_noise(self):
        rng = np.random.default_rng(0)
        P = rng.standard_normal((16, 200))
        # |mean| / (std/sqrt(B)) is |t|-distributed; its average sits well under 3
        assert snr_estimate(P).mean() <= 3 / np.sqrt(16) * np.sqrt(16)
        assert np.median(snr_estimate(P)) <= 1.5

    def test_predicted(self):
        assert predicted_snr([0.5], 16)[0] == pytest.approx(4.0)

    def test_context_generator(self):
        # shared context value with variance rho plus own noise with variance 1 - rho
        rng = np.random.default_rng(1)
        rho, B = 0.5, 16
        vals = []
        for _ in range(100):
            s = rng.standard_normal() * np.sqrt(rho)
            vals.append(snr_estimate(s + rng.standard_normal(B) * np.sqrt(1 - rho))[0])
        # |s| / (sqrt(1 - rho) / sqrt(B)) averages sqrt(2/pi) times the predicted value
        measured = np.mean(vals) / np.sqrt(2 / np.pi)
        assert abs(measured / 4.0 - 1) <= 0.4

    def test_one_sample(self):
        with pytest.raises(DomainError):
            snr_estimate(np.ones((1, 3)))


class TestRelearnGap:
    def test_table_row(self):
        assert relearn_gap(0.259, 0.316) == pytest.approx(0.057)

    def test_zero(self):
        assert relearn_gap(0.3, 0.3) == 0

    def test_negative(self):
        assert relearn_gap(0.295, 0.261) == pytest.approx(-0.034)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            relearn_gap(1.2, 0.3)


class TestDeciles:
    def test_basic(self):
        top, bottom = decile_means(np.arange(20.0))
        assert (top, bottom) == (0.5, 18.5)

    def test_mask(self):
        top, bottom = decile_means(np.arange(10.0), mask=np.arange(10) != 0)
        assert (top, bottom) == (1.0, 9.0)

    def test_empty(self):
        with pytest.raises(DegenerateError):
            decile_means(np.ones(3), mask=np.zeros(3, bool))


class TestReport:
    def test_write(self, tmp_path, rng):
        h_o = rng.standard_normal((20, 4))
        h_u = h_o + rng.standard_normal((20, 4))
        rep = geometry_report(axes_spectrum([4, 3, 2, 1]), h_o, h_u, h_o, n_bins=2)
        rep.write(tmp_path / "g.json", tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "k,explained_variance,change_ratio,recovery_ratio,valid_fraction"
        assert len(lines) == 5
        assert rep.bin_histogram.sum() == pytest.approx(1.0)
