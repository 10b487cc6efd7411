import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnlspde.coefficients import (
    AssumptionCheck,
    BFunction,
    Coefficients,
    FluxFunction,
    apply_flux,
    b_inverse,
    b_inverse_values,
    coefficients_from_config,
    custom_flux,
    linear_b,
    linear_flux,
    linear_noise,
    p_laplacian_flux,
    quadratic_noise,
    validate_assumptions,
    wave_b,
    zero_noise,
)
from dnlspde.errors import InverseNonconvergedError
from dnlspde.grid import EdgeField, Field, Grid1D, gradient, norm_lq, seminorm_w1p


def bisect_inverse(b, y, tol=1e-12):
    # Plain bisection oracle for b(r) = y, independent of the package solver.
    lo, hi = sorted((0.0, y / b.C3))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if b.value(mid) < y:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


class TestFlux:
    def test_apply_flux_p4(self):
        g = Grid1D(1, 1.0)
        out = apply_flux(p_laplacian_flux(4.0), EdgeField(g, [2.0, 0.0]))
        np.testing.assert_allclose(out.values, [8.0, 0.0])

    def test_apply_flux_p3_sign(self):
        flux = p_laplacian_flux(3.0)
        np.testing.assert_allclose(apply_flux(flux, np.array([-1.0])), [-1.0])

    def test_linear_flux_identity(self):
        xi = np.linspace(-3, 3, 7)
        np.testing.assert_array_equal(linear_flux().value(xi), xi)

    def test_p_laplacian_rejects_p2(self):
        with pytest.raises(ValueError):
            p_laplacian_flux(2.0)

    def test_deriv_regularization_off_origin(self):
        flux = p_laplacian_flux(4.0)
        # away from 0 the regularized derivative matches (p-1)|xi|^{p-2}
        xi = np.array([0.5, -2.0])
        np.testing.assert_allclose(flux.deriv(xi), 3.0 * xi**2, rtol=1e-12)
        assert flux.deriv(np.array([0.0]))[0] >= 0.0

    def test_custom_flux_constants(self):
        flux = custom_flux(c_lin=0.5, c_plap=2.0, p=4.0)
        assert flux.C1 == 2.0 and flux.K1 == 0.0
        assert flux.C2 == 2.5 and flux.K2 == 0.5
        np.testing.assert_allclose(flux.value(np.array([1.5])), [0.5 * 1.5 + 2.0 * 1.5**3])


class TestSaturation:
    def test_wave_constants(self):
        b = wave_b(beta=2.0, gamma=1.0)
        assert b.C3 == 1.0 and b.C4 == 3.0 and b.lip_deriv == 1.0

    def test_wave_rejects_flat(self):
        with pytest.raises(ValueError):
            wave_b(beta=1.0, gamma=1.0)

    def test_b_inverse_example(self):
        b = wave_b(2.0, 1.0)
        y = 2.0 + np.sin(1.0)
        assert b_inverse(b, y, tol=1e-12) == pytest.approx(1.0, abs=1e-11)

    @pytest.mark.parametrize("y", [-7.3, -0.2, 0.0, 1e-9, 0.9, 4.0, 123.0])
    def test_b_inverse_against_bisection(self, y):
        b = wave_b(2.0, 1.0)
        assert b_inverse(b, y) == pytest.approx(bisect_inverse(b, y), abs=1e-10)

    @given(y=st.floats(min_value=-50, max_value=50))
    @settings(max_examples=80, deadline=None)
    def test_b_inverse_bracket_and_roundtrip(self, y):
        b = wave_b(2.5, 1.2)
        r = b_inverse(b, y, tol=1e-12)
        assert abs(r) <= abs(y) / b.C3 + 1e-12
        assert abs(float(b.value(r)) - y) <= 1e-12 * b.C3

    @given(r=st.floats(min_value=-30, max_value=30))
    @settings(max_examples=60, deadline=None)
    def test_b_inverse_composition(self, r):
        b = wave_b(3.0, 0.5)
        assert b_inverse(b, float(b.value(r))) == pytest.approx(r, abs=1e-11)

    def test_b_inverse_vectorized(self):
        b = wave_b(2.0, 1.0)
        ys = np.array([-3.0, 0.0, 0.5, 10.0])
        rs = b_inverse_values(b, ys)
        np.testing.assert_allclose(b.value(rs), ys, atol=1e-11)

    def test_b_inverse_monotone_slopes(self):
        # 1/C4 <= slope of the inverse <= 1/C3 on sampled pairs
        b = wave_b(2.0, 1.0)
        ys = np.linspace(-5, 5, 41)
        rs = b_inverse_values(b, ys)
        d_r = np.diff(rs)
        d_y = np.diff(ys)
        assert np.all(d_r >= d_y / b.C4 - 1e-9)
        assert np.all(d_r <= d_y / b.C3 + 1e-9)

    def test_b_inverse_nonconvergence_reports_bracket(self):
        # a lying C3 puts the root outside the bracket, which must surface
        # as a nonconvergence error carrying the final bracket
        bad = BFunction(kind="linear", beta=1.0, C3=5.0, C4=5.0)
        with pytest.raises(InverseNonconvergedError) as exc:
            b_inverse(bad, 1.0, tol=1e-12)
        assert exc.value.bracket is not None


class TestNoise:
    def test_linear_noise(self):
        s = linear_noise(0.7)
        assert s.lipschitz == 0.7
        np.testing.assert_allclose(s.value(np.array([-2.0, 3.0])), [-1.4, 2.1])

    def test_zero_noise(self):
        assert zero_noise().value(np.array([4.2]))[0] == 0.0

    def test_quadratic_noise_shape(self):
        s = quadratic_noise(2.0)  # scale = 1
        np.testing.assert_allclose(s.value(np.array([0.5, -0.5, 2.0, -3.0])),
                                   [0.25, -0.25, 2.0, -3.0])
        assert s.lipschitz == 2.0


class TestValidation:
    def good(self):
        return Coefficients(p_laplacian_flux(4.0), wave_b(2.0, 1.0), linear_noise(1.0))

    def test_good_set_passes(self):
        rep = validate_assumptions(self.good(), sample_count=20_000, seed=3)
        assert rep.passed
        assert all(isinstance(c, AssumptionCheck) for c in rep.checks)
        assert rep.observed["b_deriv_min"] >= 1.0 - 1e-9
        assert rep.observed["b_deriv_max"] <= 3.0 + 1e-9

    def test_anti_monotone_flux_flagged(self):
        bad_flux = FluxFunction(kind="custom", p=3.0, c_lin=-2.0, c_plap=0.5,
                                C1=0.5, C2=2.5, K1=0.0, K2=2.0)
        rep = validate_assumptions(
            Coefficients(bad_flux, wave_b(2.0, 1.0), linear_noise(1.0)),
            sample_count=20_000, seed=5)
        chk = rep.check("flux_monotone")
        assert not chk.passed
        assert chk.witness is not None and "xi1" in chk.witness
        assert not rep.passed

    def test_overclaimed_coercivity_flagged(self):
        bad = FluxFunction(kind="p_laplacian", p=4.0, C1=2.0)
        rep = validate_assumptions(
            Coefficients(bad, linear_b(1.0), zero_noise()),
            sample_count=20_000, seed=7)
        assert not rep.check("flux_coercive").passed

    def test_overclaimed_b_range_flagged(self):
        lying = BFunction(kind="wave", beta=2.0, gamma=1.0, C3=1.5, C4=3.0, lip_deriv=1.0)
        rep = validate_assumptions(
            Coefficients(p_laplacian_flux(4.0), lying, zero_noise()),
            sample_count=20_000, seed=9)
        assert not rep.check("b_deriv_range").passed

    def test_quadratic_noise_satisfies_lipschitz(self):
        rep = validate_assumptions(
            Coefficients(p_laplacian_flux(4.0), wave_b(2.0, 1.0), quadratic_noise(1.0)),
            sample_count=20_000, seed=11)
        assert rep.check("sigma_lipschitz").passed
        assert rep.check("sigma_zero_at_origin").passed

    def test_report_jsonable(self):
        rep = validate_assumptions(self.good(), sample_count=5_000, seed=1)
        d = rep.to_jsonable()
        assert d["passed"] is True
        assert len(d["checks"]) == 9


class TestFieldLevelBounds:
    """Pointwise saturation bounds propagate to the grid norms."""

    @given(
        n=st.integers(min_value=2, max_value=24),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_saturation_lipschitz_and_reverse_in_l2(self, n, seed):
        g = Grid1D(n, 1.0)
        rng = np.random.default_rng(seed)
        b = wave_b(2.0, 1.0)
        w1, w2 = rng.standard_normal(n), rng.standard_normal(n)
        diff_b = norm_lq(Field(g, b.value(w1) - b.value(w2)), 2)
        diff_w = norm_lq(Field(g, w1 - w2), 2)
        assert diff_b <= b.C4 * diff_w * (1 + 1e-12)
        assert diff_w <= diff_b / b.C3 * (1 + 1e-12)

    @given(
        n=st.integers(min_value=2, max_value=24),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
        p=st.sampled_from([2.0, 3.0, 4.0]),
    )
    @settings(max_examples=40, deadline=None)
    def test_saturation_gradient_bound(self, n, seed, p):
        # |grad b(w)|_p <= C4 |grad w|_p, using b(0) = 0 at the boundary
        g = Grid1D(n, 1.0)
        rng = np.random.default_rng(seed)
        b = wave_b(2.0, 1.0)
        w = rng.standard_normal(n)
        bw = Field(g, np.asarray(b.value(w)))
        assert seminorm_w1p(bw, p) <= b.C4 * seminorm_w1p(Field(g, w), p) * (1 + 1e-12)


class TestConfig:
    def test_default_block(self):
        c = coefficients_from_config({})
        assert c.flux.kind == "p_laplacian" and c.flux.p == 4.0
        assert c.b.kind == "wave" and c.b.beta == 2.0
        assert c.sigma.kind == "linear"

    def test_explicit_block(self):
        c = coefficients_from_config({
            "flux": "custom", "p": 3.5, "c_lin": 0.2, "c_plap": 1.1,
            "b": "linear", "beta": 2.5,
            "sigma": "quadratic", "sigma_lipschitz": 0.4,
        })
        assert c.flux.kind == "custom" and c.flux.c_plap == 1.1
        assert c.b.C3 == 2.5
        assert c.sigma.kind == "quadratic" and c.sigma.lipschitz == pytest.approx(0.4)

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError, match="flux"):
            coefficients_from_config({"flux": "q_laplacian"})
        with pytest.raises(ValueError, match="saturation"):
            coefficients_from_config({"b": "cubic"})
