import numpy as np
import pytest

from dnq.quantizer import (
    DEGENERATE_SCALE,
    CalibrationError,
    QuantParams,
    calibrate_minmax,
    dequantize,
    fake_quantize,
    quantize,
    round_half_away,
)


def test_round_half_away():
    vals = np.array([2.4, 2.5, -2.4, -2.5, 0.5, -0.5, 0.0])
    np.testing.assert_array_equal(round_half_away(vals), [2, 3, -2, -3, 1, -1, 0])


class TestCalibration:
    def test_hand_example_q4(self):
        # range [-0.5, 1.0], q=4: s = 1.5/15 = 0.1, z = round(15 - 1.0/0.1) = 5
        qp = calibrate_minmax(np.array([-0.5, 0.25, 1.0]), bits=4)
        assert qp.scale == pytest.approx(0.1, rel=1e-6)
        assert qp.zero_point == 5

    def test_unit_scale_q8(self):
        qp = calibrate_minmax(np.array([0.0, 100.0, 255.0]), bits=8)
        assert qp.scale == pytest.approx(1.0)
        assert qp.zero_point == 0

    def test_constant_tensor_reconstruction(self):
        # Degenerate-range handling: reconstruction error stays below the
        # scale floor for any constant tensor.
        for c in (0.0, 5.0, -5.0, 0.25):
            qp = calibrate_minmax(np.full(7, c, dtype=np.float32), bits=4)
            err = abs(float(fake_quantize(np.full(7, c, dtype=np.float32), qp)[0]) - c)
            assert err <= max(abs(c), 1.0) * DEGENERATE_SCALE
        qp0 = calibrate_minmax(np.zeros(3), bits=4)
        assert qp0.scale == pytest.approx(DEGENERATE_SCALE)
        assert qp0.zero_point == 8  # mid-grid

    def test_zero_point_always_in_grid(self):
        rng = np.random.default_rng(0)
        for bits in (2, 3, 4, 8):
            for _ in range(50):
                # include one-sided ranges
                x = rng.normal(loc=rng.uniform(-3, 3), size=20)
                qp = calibrate_minmax(x, bits)
                assert 0 <= qp.zero_point <= qp.q_max

    def test_per_channel_shapes(self):
        x = np.arange(12, dtype=np.float32).reshape(3, 4)
        qp = calibrate_minmax(x, bits=4, axis=0)
        assert qp.scale.shape == (3,)
        assert qp.zero_point.shape == (3,)

    def test_empty_errors(self):
        with pytest.raises(CalibrationError):
            calibrate_minmax(np.zeros((0,)), bits=4)

    def test_bad_bits(self):
        with pytest.raises(ValueError):
            calibrate_minmax(np.ones(3), bits=5)


class TestQuantize:
    def setup_method(self):
        self.qp = QuantParams(np.float32(0.1), 5, bits=4)

    def test_hand_value(self):
        assert quantize(np.array([0.23]), self.qp)[0] == 7

    def test_clip_high(self):
        assert quantize(np.array([2.0]), self.qp)[0] == 15

    def test_zero_maps_to_zero_point(self):
        assert quantize(np.array([0.0]), self.qp)[0] == 5

    def test_fake_quantize_hand_values(self):
        assert fake_quantize(np.array([0.23], dtype=np.float32), self.qp)[0] == pytest.approx(0.2)
        # grid point is a fixed point
        assert fake_quantize(np.array([0.3], dtype=np.float32), self.qp)[0] == pytest.approx(0.3)
        # below-range values clip to the grid minimum (0 - 5) * 0.1 = -0.5
        assert fake_quantize(np.array([-3.0], dtype=np.float32), self.qp)[0] == pytest.approx(-0.5)

    def test_preserves_float64(self):
        out = fake_quantize(np.array([0.23], dtype=np.float64), self.qp)
        assert out.dtype == np.float64


class TestInvariants:
    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    @pytest.mark.parametrize("axis", [None, 0])
    def test_error_bound_idempotence_monotonicity(self, bits, axis):
        rng = np.random.default_rng(bits * 7 + (0 if axis is None else 1))
        for trial in range(200):
            x = rng.normal(scale=rng.uniform(0.1, 10), size=(4, 16)).astype(np.float32)
            qp = calibrate_minmax(x, bits, axis=axis)
            xq = fake_quantize(x, qp)

            # in-range error bound s/2 (+ float32 ulp slack)
            s = qp.scale if axis is None else qp.scale[:, None]
            assert np.all(np.abs(xq - x) <= s * (0.5 + 1e-5))

            # idempotence, bit-exact
            assert fake_quantize(xq, qp).tobytes() == xq.tobytes()

        # monotonicity: x <= y implies quantize(x) <= quantize(y)
        x = np.sort(rng.normal(size=64).astype(np.float32))
        qp = calibrate_minmax(x, bits)
        q = quantize(x, qp)
        assert np.all(np.diff(q) >= 0)

    def test_identical_channels_match_per_tensor(self):
        rng = np.random.default_rng(3)
        row = rng.normal(size=16).astype(np.float32)
        x = np.tile(row, (4, 1))
        per_channel = calibrate_minmax(x, 4, axis=0)
        per_tensor = calibrate_minmax(x, 4, axis=None)
        np.testing.assert_allclose(per_channel.scale, np.full(4, per_tensor.scale))
        np.testing.assert_array_equal(per_channel.zero_point, np.full(4, per_tensor.zero_point))

    def test_dequantize_roundtrip_of_grid(self):
        qp = QuantParams(np.float32(0.25), 3, bits=4)
        ints = np.arange(16)
        vals = dequantize(ints, qp)
        np.testing.assert_array_equal(quantize(vals, qp), ints)

    def test_quantparams_validation(self):
        with pytest.raises(ValueError):
            QuantParams(np.float32(-0.1), 0, bits=4)
        with pytest.raises(ValueError):
            QuantParams(np.float32(0.1), 99, bits=4)
