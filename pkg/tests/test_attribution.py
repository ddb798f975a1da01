"""Attribution tests: detector oracles, blur against a dense 2-D
convolution, path endpoints, the completeness identity on a trained
network, and the closed form on the linear upsampler.
"""

import numpy as np
import pytest

from lamsr.attribution import (
    AttributionMap,
    PatchDetector,
    PathConfig,
    detect,
    diagnostics,
    gaussian_blur,
    gaussian_kernel,
    grad_times_input,
    lam,
    lam_with_diagnostics,
    make_baseline,
    path_point,
    support_window,
    vanilla_gradient,
)
from lamsr.engine import Tensor, gradcheck
from lamsr.errors import ConfigError, DimensionError, NumericError, RangeError
from lamsr.zoo import build_linear_upsampler, build_plain_cnn

from conftest import texture


def detect_loops(sr, det):
    """Double-loop detector oracle over the patch, float64."""
    total = 0.0
    for c in range(sr.shape[0]):
        for i in range(det.x, det.x + det.side):
            for j in range(det.y, det.y + det.side):
                if i + 1 < det.x + det.side:
                    total += abs(float(sr[c, i + 1, j]) - float(sr[c, i, j]))
                if j + 1 < det.y + det.side:
                    total += abs(float(sr[c, i, j + 1]) - float(sr[c, i, j]))
    return total


class TestDetector:
    def test_single_step_edge_value(self):
        # one vertical step of height delta crossing an l x l patch adds
        # l * delta per channel, nothing else
        delta = 0.3
        sr = np.zeros((3, 20, 20), np.float32)
        sr[:, :, 10:] = delta
        det = PatchDetector(x=4, y=6, side=8)
        value = detect(Tensor(sr), det).item()
        assert value == pytest.approx(3 * 8 * delta, rel=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        sr = rng.random((2, 12, 12), dtype=np.float32)
        det = PatchDetector(x=2, y=3, side=7)
        got = detect(Tensor(sr), det).item()
        assert got == pytest.approx(detect_loops(sr, det), rel=1e-6)

    def test_constant_patch_is_zero(self):
        sr = np.full((3, 16, 16), 0.5, np.float32)
        assert detect(Tensor(sr), PatchDetector(x=0, y=0, side=16)).item() == 0.0

    def test_out_of_bounds(self):
        sr = Tensor(np.zeros((3, 16, 16), np.float32))
        with pytest.raises(RangeError):
            detect(sr, PatchDetector(x=4, y=4, side=16))

    def test_patch_validation(self):
        with pytest.raises(RangeError):
            PatchDetector(x=0, y=0, side=1)
        with pytest.raises(RangeError):
            PatchDetector(x=-1, y=0, side=4)
        with pytest.raises(ConfigError):
            PatchDetector(x=0, y=0, side=4, kind="laplacian")


class TestGaussianBlur:
    def test_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel(1.7, 7)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(k, k[::-1])
        assert np.argmax(k) == 7

    def test_matches_dense_2d_convolution(self):
        # independent route: reflect-pad both axes once, then convolve
        # with the full outer-product kernel
        rng = np.random.default_rng(2)
        img = rng.random((2, 9, 11), dtype=np.float32)
        sigma, radius = 1.3, 5
        got = gaussian_blur(img, sigma, radius)

        k1 = gaussian_kernel(sigma, radius)
        k2 = np.outer(k1, k1)
        padded = np.pad(img.astype(np.float64),
                        ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
        want = np.zeros_like(img, dtype=np.float64)
        for c in range(img.shape[0]):
            for i in range(img.shape[1]):
                for j in range(img.shape[2]):
                    win = padded[c, i:i + 2 * radius + 1, j:j + 2 * radius + 1]
                    want[c, i, j] = (win * k2).sum()
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_sigma_zero_is_a_copy(self):
        img = np.random.default_rng(3).random((3, 8, 8), dtype=np.float32)
        out = gaussian_blur(img, 0.0, 4)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_radius_must_fit_image(self):
        with pytest.raises(DimensionError):
            gaussian_blur(np.zeros((3, 8, 8), np.float32), 4.0, 16)

    def test_preserves_mean_roughly(self):
        img = np.random.default_rng(4).random((1, 32, 32), dtype=np.float32)
        out = gaussian_blur(img, 2.0, 8)
        assert out.mean() == pytest.approx(img.mean(), abs=5e-3)


class TestPathConfig:
    def test_effective_radius(self):
        assert PathConfig(sigma=4.0).effective_radius == 16
        assert PathConfig(sigma=0.1).effective_radius == 1
        assert PathConfig(sigma=4.0, blur_kernel_radius=5).effective_radius == 5

    def test_validation(self):
        with pytest.raises(ConfigError):
            PathConfig(baseline="black", path="progressive_blur")
        with pytest.raises(ConfigError):
            PathConfig(sigma=-1.0)
        with pytest.raises(ConfigError):
            PathConfig(steps=0)
        with pytest.raises(ConfigError):
            PathConfig(blur_kernel_radius=0)
        with pytest.raises(ConfigError):
            PathConfig(baseline="white")
        with pytest.raises(ConfigError):
            PathConfig(path="spiral")

    def test_black_baseline_with_linear_path(self):
        cfg = PathConfig(baseline="black", path="linear", sigma=0.0)
        lr = np.random.default_rng(5).random((3, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(make_baseline(lr, cfg), 0.0)
        np.testing.assert_allclose(path_point(lr, cfg, 0.5), 0.5 * lr, atol=1e-7)


class TestPath:
    @pytest.mark.parametrize("path", ["progressive_blur", "linear"])
    def test_endpoints(self, path):
        lr = texture(6, size=24)
        baseline = "gaussian_blur"
        cfg = PathConfig(baseline=baseline, path=path, sigma=1.5, steps=10)
        np.testing.assert_array_equal(path_point(lr, cfg, 0.0), make_baseline(lr, cfg))
        np.testing.assert_array_equal(path_point(lr, cfg, 1.0), lr)

    def test_alpha_out_of_range(self):
        lr = np.zeros((3, 8, 8), np.float32)
        cfg = PathConfig(sigma=1.0)
        for alpha in (-0.01, 1.01):
            with pytest.raises(RangeError):
                path_point(lr, cfg, alpha)

    def test_progressive_blur_narrows(self):
        lr = texture(7, size=24)
        cfg = PathConfig(sigma=2.0, steps=4)
        gaps = [np.abs(path_point(lr, cfg, a) - lr).sum() for a in (0.0, 0.5, 1.0)]
        assert gaps[0] > gaps[1] > gaps[2] == 0.0


class TestLam:
    def test_sigma_zero_degenerates_to_zero_map(self):
        net = build_plain_cnn(2, 8, 2, seed=0)
        lr = texture(8, size=16)
        det = PatchDetector(x=8, y=8, side=8)
        result = lam(net, lr, det, PathConfig(sigma=0.0, steps=5))
        np.testing.assert_array_equal(result.values, 0.0)
        assert result.completeness_residual == 0.0
        assert result.d_input == result.d_baseline

    def test_completeness_on_trained_net(self, trained_plain4):
        lr = texture(20, size=96)[:, ::4, ::4]
        det = PatchDetector(x=32, y=32, side=16)
        result = lam(trained_plain4, lr, det, PathConfig(sigma=2.0, steps=100))
        assert result.completeness_residual <= 0.02
        total = result.values.sum()
        assert total == pytest.approx(result.d_input - result.d_baseline,
                                      rel=0.02, abs=1e-9)

    def test_residual_shrinks_with_more_steps(self, trained_plain4):
        lr = texture(21, size=96)[:, ::4, ::4]
        det = PatchDetector(x=32, y=32, side=16)
        res = {m: lam(trained_plain4, lr, det,
                      PathConfig(sigma=2.0, steps=m)).completeness_residual
               for m in (25, 200)}
        assert res[200] <= res[25] + 1e-6

    def test_reduced_is_channel_sum(self):
        net = build_plain_cnn(2, 8, 2, seed=0)
        lr = texture(9, size=16)
        result = lam(net, lr, PatchDetector(x=8, y=8, side=8),
                     PathConfig(sigma=1.0, steps=5))
        np.testing.assert_allclose(result.reduced, result.values.sum(axis=0))

    def test_nan_weights_name_the_step(self):
        net = build_plain_cnn(2, 8, 2, seed=0)
        net.layers[0].kernel.data[0, 0, 0, 0] = np.nan
        lr = texture(10, size=16)
        with pytest.raises(NumericError) as err:
            lam(net, lr, PatchDetector(x=8, y=8, side=8), PathConfig(sigma=1.0, steps=5))
        assert "step 0" in str(err.value)

    def test_per_step_gradient_against_finite_differences(self):
        # the gradient lam consumes at an interior path point
        net = build_plain_cnn(2, 8, 2, seed=3)
        lr = texture(11, size=12)
        cfg = PathConfig(sigma=1.5, steps=8)
        point = path_point(lr, cfg, 0.5)
        det = PatchDetector(x=4, y=4, side=8)
        report = gradcheck(lambda t: detect(net.forward(t), det), point,
                           num_coords=20, step=1e-3, rng=np.random.default_rng(0))
        assert report.ok
        assert report.max_rel_err <= 1e-3


class TestLinearClosedForm:
    @pytest.mark.parametrize("path", ["progressive_blur", "linear"])
    def test_lam_equals_gradient_times_difference(self, path):
        # on a linear model fed a sine (an eigenfunction of the blur,
        # away from borders) the detector gradient is constant along the
        # whole path, so the integral collapses to grad * (input - baseline)
        size = 32
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        wave = 0.5 + 0.35 * np.sin(2 * np.pi * (0.11 * yy + 0.07 * xx) + 0.4)
        lr = np.repeat(wave[None], 3, axis=0).astype(np.float32)

        net = build_linear_upsampler(2)
        det = PatchDetector(x=(size * 2 - 16) // 2, y=(size * 2 - 16) // 2, side=16)
        cfg = PathConfig(path=path, sigma=2.0, steps=50)

        result = lam(net, lr, det, cfg)
        grad = vanilla_gradient(net, lr, det).values
        baseline = make_baseline(lr, cfg).astype(np.float64)
        closed = grad * (lr.astype(np.float64) - baseline)

        scale = np.abs(closed).max()
        assert scale > 0
        assert np.abs(result.values - closed).max() / scale <= 1e-4
        assert result.completeness_residual <= 1e-4


class TestVanillaAndScaled:
    def test_vanilla_gradient_fields(self):
        net = build_plain_cnn(2, 8, 2, seed=4)
        lr = texture(12, size=16)
        det = PatchDetector(x=8, y=8, side=8)
        result = vanilla_gradient(net, lr, det)
        assert result.completeness_residual is None
        assert result.d_baseline is None
        assert result.d_input == pytest.approx(
            detect(net.forward(Tensor(lr)), det).item())

    def test_grad_times_input_scales_elementwise(self):
        net = build_plain_cnn(2, 8, 2, seed=4)
        lr = texture(13, size=16)
        det = PatchDetector(x=8, y=8, side=8)
        plain = vanilla_gradient(net, lr, det)
        scaled = grad_times_input(net, lr, det)
        np.testing.assert_allclose(scaled.values, plain.values * lr, rtol=1e-6)


class TestDiagnostics:
    def test_shapes_and_consistency(self):
        net = build_plain_cnn(2, 8, 2, seed=5)
        lr = texture(14, size=16)
        det = PatchDetector(x=8, y=8, side=8)
        cfg = PathConfig(sigma=1.5, steps=12)
        result, diag = lam_with_diagnostics(net, lr, det, cfg)

        assert diag.alphas.shape == (13,)
        assert diag.alphas[0] == 0.0 and diag.alphas[-1] == 1.0
        assert diag.detector_curve[0] == pytest.approx(result.d_baseline)
        assert diag.detector_curve[-1] == pytest.approx(result.d_input)
        assert diag.path_speed[-1] == diag.path_speed[-2]
        assert diag.cumulative_attribution[0] == 0.0
        assert diag.cumulative_attribution[-1] == pytest.approx(
            result.values.sum(), rel=1e-9, abs=1e-12)

    def test_linear_path_speed_is_constant(self):
        net = build_plain_cnn(2, 8, 2, seed=5)
        lr = texture(15, size=16)
        cfg = PathConfig(path="linear", sigma=1.5, steps=10)
        diag = diagnostics(net, lr, PatchDetector(x=8, y=8, side=8), cfg)
        speeds = diag.path_speed[:-1]
        assert speeds.max() - speeds.min() <= 1e-3 * speeds.max()


class TestSupportWindow:
    def test_confinement_is_exact(self):
        net = build_plain_cnn(4, 8, 4, seed=6)  # field side 9
        lr = texture(16, size=24)
        det = PatchDetector(x=40, y=40, side=16)
        window = support_window(det, net.scale, 9, lr.shape)
        r0, r1, c0, c1 = window

        for result in (vanilla_gradient(net, lr, det),
                       lam(net, lr, det, PathConfig(sigma=1.5, steps=4))):
            outside = np.abs(result.values).sum(axis=0)
            outside[r0:r1, c0:c1] = 0.0
            assert not np.any(outside)

    def test_window_geometry(self):
        # patch rows 40..55 at scale 4 pre-image rows 10..13, dilated by 4
        assert support_window(PatchDetector(x=40, y=40, side=16), 4, 9,
                              (3, 24, 24)) == (6, 18, 6, 18)

    def test_window_clamps_to_image(self):
        assert support_window(PatchDetector(x=0, y=0, side=8), 4, 9,
                              (3, 10, 10)) == (0, 6, 0, 6)
