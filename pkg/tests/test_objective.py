"""Losses and metrics: frozen hand-computed values, symmetry/positivity
properties, the intensity-balance property of the mapped loss, and SSIM
against a literal-formula reference."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udcnet.degrade import tone_map
from udcnet.errors import DataError
from udcnet.objective import (LossKind, compute_loss, mapping_l1, mapping_l2,
                              plain_l1, psnr_tonemapped, ssim_tonemapped,
                              tonemap_compress, _gaussian_window)
from udcnet.tensor import Tape, Tensor, backward, finite_diff_grad


def t(*values):
    return Tensor(np.asarray(values, dtype=float))


class TestLossValues:
    def test_zero_at_equality(self, rng):
        x = Tensor(rng.uniform(0, 500, size=(1, 3, 4, 4)))
        assert mapping_l1(x, x).item() == 0.0
        assert mapping_l2(x, x).item() == 0.0
        assert plain_l1(x, x).item() == 0.0

    def test_mapping_l1_unit_example(self):
        # Map(1.0) = 0.8, Map(0) = 0
        assert mapping_l1(t(1.0), t(0.0)).item() == pytest.approx(0.8, abs=1e-15)

    def test_mapping_l1_saturated_example(self):
        expected = abs(500.0 / 500.25 - 0.8)
        assert mapping_l1(t(500.0), t(1.0)).item() == pytest.approx(expected, abs=1e-15)

    def test_mapping_l2_and_plain_l1(self):
        assert mapping_l2(t(1.0), t(0.0)).item() == pytest.approx(0.64, abs=1e-15)
        assert plain_l1(t(1.0), t(0.0)).item() == pytest.approx(1.0)

    def test_mean_reduction(self):
        # two elements, one mismatch: mean halves the contribution
        assert mapping_l1(t(1.0, 1.0), t(0.0, 1.0)).item() == pytest.approx(0.4)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DataError):
            mapping_l1(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))

    def test_negative_inputs_rejected_strict(self):
        with pytest.raises(DataError):
            mapping_l1(t(-0.5), t(0.5))
        with pytest.raises(DataError):
            mapping_l2(t(0.5), t(-0.5))

    def test_extension_matches_strict_on_nonnegative(self, rng):
        y = Tensor(rng.uniform(0, 500, size=(2, 3, 4, 4)))
        x = Tensor(rng.uniform(0, 500, size=(2, 3, 4, 4)))
        strict = mapping_l1(y, x).item()
        relaxed = compute_loss(LossKind.MAPPING_L1, y, x).item()
        assert strict == relaxed


class TestLossProperties:
    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_symmetric(self, seed):
        r = np.random.default_rng(seed)
        y = Tensor(r.uniform(0, 500, size=(1, 1, 3, 3)))
        x = Tensor(r.uniform(0, 500, size=(1, 1, 3, 3)))
        for loss in (mapping_l1, mapping_l2, plain_l1):
            ab = loss(y, x).item()
            ba = loss(x, y).item()
            assert ab >= 0.0
            assert ab == pytest.approx(ba, rel=1e-12)

    def test_zero_iff_equal(self, rng):
        y = Tensor(rng.uniform(1, 2, size=(1, 1, 2, 2)))
        x = Tensor(y.data + 1e-3)
        assert mapping_l1(y, x).item() > 0.0

    @given(st.floats(0.0, 400.0), st.floats(0.1, 99.0))
    @settings(max_examples=100, deadline=None)
    def test_fixed_error_shrinks_with_intensity(self, a, gap):
        # |dMap/dI| decreases in I: the same absolute error costs more in
        # dark regions than in bright ones
        b = a + gap
        delta = 0.1
        la = mapping_l1(t(a + delta), t(a)).item()
        lb = mapping_l1(t(b + delta), t(b)).item()
        assert la > lb

    def test_gradient_matches_finite_differences(self, rng):
        x = Tensor(rng.uniform(0.5, 5.0, size=(1, 2, 3, 3)))
        y = Tensor(x.data + rng.uniform(0.2, 1.0, size=x.shape))
        yt = Tensor(y.data, requires_grad=True)
        tape = Tape()
        backward(mapping_l1(yt, x, tape), tape)
        fd = finite_diff_grad(lambda p: mapping_l1(p, x), y, eps=1e-5)
        rel = np.abs(yt.grad - fd.data) / np.maximum(np.maximum(np.abs(yt.grad), np.abs(fd.data)), 1e-2)
        assert rel.max() <= 1e-4

    def test_extended_map_is_continuous_and_monotone(self):
        xs = Tensor(np.linspace(-2.0, 2.0, 401))
        mapped = tonemap_compress(xs, extend_negative=True).data
        assert (np.diff(mapped) > 0).all()
        assert mapped[200] == 0.0  # value at 0


class TestPsnr:
    def test_identical_images_hit_cap(self, rng):
        x = Tensor(rng.uniform(0, 500, size=(1, 3, 8, 8)))
        assert psnr_tonemapped(x, x) == 120.0

    def test_constructed_mse(self):
        # mapped values 0.6 vs 0.5 everywhere: MSE 0.01 -> 20 dB
        y = Tensor(np.full((1, 3, 4, 4), 0.25 * 0.6 / 0.4))
        x = Tensor(np.full((1, 3, 4, 4), 0.25 * 0.5 / 0.5))
        assert psnr_tonemapped(y, x) == pytest.approx(20.0, abs=1e-9)

    def test_matches_two_step_oracle(self, rng):
        y = Tensor(rng.uniform(0, 500, size=(1, 3, 8, 8)))
        x = Tensor(rng.uniform(0, 500, size=(1, 3, 8, 8)))
        my, mx = tone_map(y).data, tone_map(x).data
        expected = 10 * np.log10(1.0 / np.mean((my - mx) ** 2))
        assert psnr_tonemapped(y, x) == pytest.approx(expected, rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            psnr_tonemapped(t(-1.0), t(1.0))


def ssim_reference(my, mx, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Literal per-window formula on already tone-mapped channel images."""
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    H, W = my.shape
    vals = []
    for i in range(H - window + 1):
        for j in range(W - window + 1):
            a = my[i:i + window, j:j + window]
            b = mx[i:i + window, j:j + window]
            mu_a = (win * a).sum()
            mu_b = (win * b).sum()
            va = (win * a * a).sum() - mu_a ** 2
            vb = (win * b * b).sum() - mu_b ** 2
            cab = (win * a * b).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cab + c2)) /
                        ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_images(self, rng):
        x = Tensor(rng.uniform(0, 500, size=(1, 3, 16, 16)))
        assert ssim_tonemapped(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_image(self, rng):
        x = (rng.random((1, 3, 16, 16)) > 0.5).astype(float)
        y = 1.0 - x
        assert ssim_tonemapped(Tensor(y), Tensor(x)) < 0.1

    def test_matches_reference(self, rng):
        y = Tensor(rng.uniform(0, 500, size=(1, 2, 14, 15)))
        x = Tensor(rng.uniform(0, 500, size=(1, 2, 14, 15)))
        got = ssim_tonemapped(y, x)
        my, mx = tone_map(y).data, tone_map(x).data
        ref = np.mean([ssim_reference(my[0, c], mx[0, c]) for c in range(2)])
        assert got == pytest.approx(ref, abs=1e-8)

    def test_small_image_rejected(self, rng):
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
        with pytest.raises(DataError, match="window"):
            ssim_tonemapped(x, x)

    def test_range(self, rng):
        y = Tensor(rng.uniform(0, 500, size=(1, 3, 12, 12)))
        x = Tensor(rng.uniform(0, 500, size=(1, 3, 12, 12)))
        assert -1.0 <= ssim_tonemapped(y, x) <= 1.0
