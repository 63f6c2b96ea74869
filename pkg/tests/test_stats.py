import math

import mpmath
import numpy as np
import pytest

from relaxmt.errors import InputError
from relaxmt.stats import (
    GAUSSIAN_TRUNCATION_Z,
    gauss_legendre_integrate,
    one_sided_pvalue,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
    std_normal_sf,
    upper_tail_cutoff,
)

from helpers import bisect_normal_quantile, normal_tail_asymptotic

mpmath.mp.dps = 30


class TestCdf:
    def test_center(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_against_high_precision_oracle(self):
        for z in np.linspace(-8, 8, 81):
            expected = float(mpmath.ncdf(z))
            assert abs(float(std_normal_cdf(z)) - expected) <= 1e-12

    def test_95th_percentile_value(self):
        assert float(std_normal_cdf(1.6448536269514722)) == pytest.approx(0.95, abs=1e-12)

    def test_deep_tail_positive_and_bounded(self):
        val = float(std_normal_cdf(-8.0))
        lower, upper = normal_tail_asymptotic(8.0)
        assert 0.0 < lower <= val <= upper
        assert val == pytest.approx(6.22e-16, rel=1e-2)

    def test_monotone_on_random_pairs(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-10, 10, size=(10_000, 2))
        lo = z.min(axis=1)
        hi = z.max(axis=1)
        assert np.all(std_normal_cdf(lo) <= std_normal_cdf(hi))

    def test_complement_identity(self):
        z = np.linspace(-8, 8, 1601)
        total = std_normal_cdf(z) + std_normal_sf(z)
        assert np.all(np.abs(total - 1.0) <= 1e-15)


class TestSurvival:
    def test_center(self):
        assert one_sided_pvalue(0.0) == 0.5

    def test_five_percent_point(self):
        assert float(one_sided_pvalue(1.6448536269514722)) == pytest.approx(0.05, abs=1e-12)

    def test_strictly_decreasing(self):
        z = np.linspace(-8, 8, 500)
        vals = one_sided_pvalue(z)
        assert np.all(np.diff(vals) < 0)

    def test_no_cancellation_in_upper_tail(self):
        # naive 1 - cdf dies around z ~ 8.3; the survival branch keeps going
        assert float(one_sided_pvalue(30.0)) > 0.0

    def test_against_oracle(self):
        for z in np.linspace(-8, 8, 81):
            expected = float(1 - mpmath.ncdf(z))
            assert abs(float(one_sided_pvalue(z)) - expected) <= 1e-12


class TestPdf:
    def test_center_value(self):
        assert float(std_normal_pdf(0.0)) == pytest.approx(0.3989422804014327, abs=1e-16)

    def test_symmetry(self):
        assert float(std_normal_pdf(1.0)) == float(std_normal_pdf(-1.0))

    def test_normalization_by_quadrature(self):
        total = gauss_legendre_integrate(std_normal_pdf, -10.0, 10.0)
        assert total == pytest.approx(1.0, abs=1e-9)


class TestQuantile:
    def test_median(self):
        assert std_normal_quantile(0.5) == 0.0

    def test_975_against_bisection_oracle(self):
        oracle = bisect_normal_quantile(0.975, std_normal_cdf)
        assert std_normal_quantile(0.975) == pytest.approx(oracle, abs=1e-12)
        assert std_normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-11)

    def test_roundtrip_through_cdf(self):
        for z in range(-5, 6):
            p = float(std_normal_cdf(float(z)))
            assert std_normal_quantile(p) == pytest.approx(float(z), abs=1e-9)

    def test_roundtrip_extremes(self):
        for p in np.geomspace(1e-10, 0.5, 40):
            assert float(std_normal_cdf(std_normal_quantile(p))) == pytest.approx(p, rel=1e-9)
        for p in 1 - np.geomspace(1e-10, 0.5, 40):
            assert float(std_normal_cdf(std_normal_quantile(p))) == pytest.approx(p, rel=1e-9)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.1])
    def test_domain_errors(self, bad):
        with pytest.raises(InputError):
            std_normal_quantile(bad)

    def test_upper_tail_cutoff_degenerate(self):
        assert upper_tail_cutoff(0.0) == math.inf
        assert upper_tail_cutoff(1.0) == -math.inf
        assert upper_tail_cutoff(0.05) == pytest.approx(1.6448536269514722, abs=1e-10)


class TestQuadrature:
    def test_constant_single_panel(self):
        assert gauss_legendre_integrate(lambda z: np.ones_like(z), 0.0, 1.0,
                                        panels=1) == pytest.approx(1.0, abs=1e-15)

    def test_polynomial_exactness(self):
        # degree 7 on one 20-node panel is exact to rounding
        val = gauss_legendre_integrate(lambda z: z ** 7, 0.0, 1.0, panels=1)
        assert val == pytest.approx(1.0 / 8.0, abs=1e-14)

    def test_gaussian_mass_over_infinite_domain(self):
        total = gauss_legendre_integrate(std_normal_pdf, -math.inf, math.inf)
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_gaussian_second_moment(self):
        val = gauss_legendre_integrate(lambda z: z * z * std_normal_pdf(z),
                                       -math.inf, math.inf)
        assert val == pytest.approx(1.0, abs=1e-8)

    def test_invalid_bounds(self):
        with pytest.raises(InputError):
            gauss_legendre_integrate(std_normal_pdf, 9.0, math.inf)
        with pytest.raises(InputError):
            gauss_legendre_integrate(std_normal_pdf, 1.0, 1.0)

    def test_truncation_point_documented(self):
        assert GAUSSIAN_TRUNCATION_Z == 8.5
        assert float(std_normal_pdf(8.3)) < 1e-15

    def test_panel_doubling_converged(self):
        # screened-count style integrand: conditional tail times the density
        def integrand(z):
            return std_normal_sf((2.8 - 0.3 * z) / 0.95) * std_normal_pdf(z)

        v64 = gauss_legendre_integrate(integrand, 2.2, math.inf, panels=64)
        v128 = gauss_legendre_integrate(integrand, 2.2, math.inf, panels=128)
        assert abs(v64 - v128) < 1e-10

    def test_scalar_integrand_fallback(self):
        val = gauss_legendre_integrate(lambda z: 2.0, 0.0, 3.0, panels=2)
        assert val == pytest.approx(6.0, abs=1e-12)
