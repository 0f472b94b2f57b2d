import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import fft as sfft

from vesselseg import prep, synth


class TestAnscombe:
    def test_closed_form_at_zero(self):
        assert prep.anscombe(np.array([0.0]))[0] == pytest.approx(1.224745, abs=1e-6)

    def test_closed_form_at_one(self):
        assert prep.anscombe(np.array([1.0]))[0] == pytest.approx(2.345208, abs=1e-6)

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            prep.anscombe(np.array([-0.5]))

    def test_poisson_variance_stabilized(self):
        rng = np.random.default_rng(42)
        x = rng.poisson(20.0, size=100_000).astype(np.float64)
        sd = prep.anscombe(x).std()
        assert 0.9 <= sd <= 1.1

    @given(st.lists(st.floats(0, 1e5), min_size=2, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_strictly_monotone(self, vals):
        x = np.array(sorted(set(vals)))
        # keep inputs separated enough that the difference cannot underflow
        x = x[np.concatenate([[True], np.diff(x) > 1e-6 * (1.0 + x[1:])])]
        y = prep.anscombe(x)
        assert (np.diff(y) > 0).all()


class TestInverseAnscombe:
    @pytest.mark.parametrize("x", [0.0, 1.0, 7.5, 1000.0])
    def test_algebraic_round_trip(self, x):
        y = prep.inverse_anscombe(prep.anscombe(np.array([x])), "algebraic")[0]
        assert y == pytest.approx(x, abs=1e-9)

    def test_round_trip_identity_over_16bit_range(self):
        x = np.linspace(0, 2**16 - 1, 2001)
        y = prep.inverse_anscombe(prep.anscombe(x), "algebraic")
        np.testing.assert_allclose(y, x, rtol=1e-6, atol=1e-6)

    def test_transform_floor_maps_to_zero(self):
        assert prep.inverse_anscombe(np.array([1.224745]), "algebraic")[0] == pytest.approx(
            0.0, abs=1e-5
        )

    def test_unbiased_inverse_recovers_poisson_mean(self):
        rng = np.random.default_rng(7)
        x = rng.poisson(10.0, size=400_000).astype(np.float64)
        m = prep.anscombe(x).mean()
        lam = prep.inverse_anscombe(np.array([m]), "unbiased")[0]
        assert abs(lam - 10.0) / 10.0 < 0.02

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            prep.inverse_anscombe(np.zeros(1), "magic")


class TestNotchFilter:
    def test_empty_spec_is_identity(self, rng):
        x = rng.random((3, 32, 32))
        out = prep.notch_filter(x, prep.NotchSpec([]))
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_band_suppression_exceeds_40db(self):
        sl, _ = synth.banded_slice((128, 128), freq=(0.0, 0.25), amplitude=0.3)
        spec = prep.NotchSpec([(0.0, 0.25, 0.02)])
        filt = prep.notch_filter(sl, spec)
        f0 = sfft.fft2(sl)
        f1 = sfft.fft2(filt)
        bin_ = (0, 32)  # 0.25 cycles/px on a 128 grid
        drop_db = 10 * np.log10(abs(f0[bin_]) ** 2 / max(abs(f1[bin_]) ** 2, 1e-300))
        assert drop_db > 40

    def test_dc_preserved_when_no_notch_at_zero(self, rng):
        x = rng.random((2, 64, 64)) + 3.0
        out = prep.notch_filter(x, prep.NotchSpec([(0.0, 0.25, 0.02)]))
        assert abs(out.mean() - x.mean()) / x.mean() < 1e-6

    def test_linearity(self, rng):
        spec = prep.NotchSpec([(0.1, 0.2, 0.03)])
        x = rng.random((1, 32, 32))
        y = rng.random((1, 32, 32))
        lhs = prep.notch_filter(2.5 * x - 1.25 * y, spec)
        rhs = 2.5 * prep.notch_filter(x, spec) - 1.25 * prep.notch_filter(y, spec)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_symmetric_application_keeps_output_real(self):
        sl, _ = synth.banded_slice((64, 64), freq=(0.125, 0.0625))
        out = prep.notch_filter(sl, prep.NotchSpec([(0.125, 0.0625, 0.02)]))
        assert np.isrealobj(out)

    def test_frequency_validation(self):
        with pytest.raises(ValueError):
            prep.NotchSpec([(0.7, 0.0, 0.01)])
        with pytest.raises(ValueError):
            prep.NotchSpec([(0.1, 0.1, -1.0)])


class TestNormalize:
    def test_16bit_extremes_map_to_unit_interval(self):
        x = np.array([[[0.0, 65535.0]]])
        out, bounds = prep.normalize(x)
        assert out.min() == 0.0 and out.max() == 1.0
        assert bounds == (0.0, 65535.0)

    def test_round_trip_with_stored_bounds(self, rng):
        x = rng.random((2, 8, 8)) * 900 + 50
        out, bounds = prep.normalize(x)
        back = prep.denormalize(out, bounds)
        np.testing.assert_allclose(back, x, rtol=1e-6)

    def test_percentile_clip_saturates_outliers(self, rng):
        x = rng.random((1, 50, 50))
        x[0, 0, 0] = 1e9
        x[0, 0, 1] = -1e9
        out, _ = prep.normalize(x, clip_percentiles=(1, 99))
        assert out[0, 0, 0] == 1.0 and out[0, 0, 1] == 0.0
        inner = out[(out > 0) & (out < 1)]
        assert inner.size > 2000

    def test_constant_stack_warns_and_returns_half(self):
        with pytest.warns(RuntimeWarning):
            out, _ = prep.normalize(np.full((1, 4, 4), 7.0))
        assert (out == 0.5).all()


class TestStabilizedDenoise:
    def test_pipeline_reduces_noise_on_constant_signal(self):
        rng = np.random.default_rng(0)
        clean = np.full((4, 64, 64), 30.0)
        noisy = rng.poisson(clean).astype(np.float64)
        out = prep.stabilized_denoise(noisy, prep.gaussian_denoiser((0, 2.0, 2.0)))
        assert out.std() < noisy.std() / 2
        assert abs(out.mean() - 30.0) < 1.0
