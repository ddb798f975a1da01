"""Model zoo tests: builders, the weight format and its failure modes,
training mechanics, and receptive fields (analytic vs measured).
"""

import math
import struct

import numpy as np
import pytest

from lamsr.engine import Tensor, conv2d, pixel_shuffle, prelu
from lamsr.errors import (
    BadMagicError,
    ConfigError,
    DataError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionError,
    WeightLoadError,
)
from lamsr.zoo import (
    Adam,
    TrainConfig,
    build_linear_upsampler,
    build_plain_cnn,
    build_residual_net,
    load_weights,
    probe_receptive_field,
    receptive_field,
    save_weights,
    serialize_weights,
    train_tiny,
)

from conftest import texture


class TestBuilders:
    def test_same_seed_same_weights(self):
        a = serialize_weights(build_plain_cnn(4, 8, 2, seed=7))
        b = serialize_weights(build_plain_cnn(4, 8, 2, seed=7))
        c = serialize_weights(build_plain_cnn(4, 8, 2, seed=8))
        assert a == b
        assert a != c

    @pytest.mark.parametrize("build,kwargs,scale", [
        (build_plain_cnn, dict(depth=3, width=8, seed=0), 2),
        (build_residual_net, dict(blocks=2, width=8, seed=0), 3),
        (build_linear_upsampler, dict(), 4),
    ])
    def test_forward_shape(self, build, kwargs, scale):
        net = build(scale=scale, **kwargs)
        lr = np.random.default_rng(0).random((3, 6, 5), dtype=np.float32)
        sr = net.forward(Tensor(lr))
        assert sr.shape == (3, 6 * scale, 5 * scale)

    def test_build_validation(self):
        with pytest.raises(ConfigError):
            build_plain_cnn(1, 8, 2, seed=0)
        with pytest.raises(ConfigError):
            build_plain_cnn(4, 2, 2, seed=0)
        with pytest.raises(ConfigError):
            build_plain_cnn(4, 8, 5, seed=0)
        with pytest.raises(ConfigError):
            build_residual_net(0, 8, 2, seed=0)
        with pytest.raises(ConfigError):
            build_linear_upsampler(1)

    def test_matched_fleet_conv_parameters(self):
        # the depth-(2b+2) plain CNN and the b-block residual net carry
        # identical conv stacks shape-for-shape; only PReLU scalar counts
        # differ, which keeps parameter-matched comparisons honest
        plain = build_plain_cnn(8, 16, 4, seed=0)
        residual = build_residual_net(3, 16, 4, seed=0)
        conv_params = lambda net: sum(t.size for name, t in net.weights()
                                      if "prelu" not in name)
        assert conv_params(plain) == conv_params(residual)
        assert plain.parameter_count() - residual.parameter_count() == 5


class TestResidualWiring:
    def test_zeroed_blocks_leave_double_head_into_tail(self):
        # with all block convs zeroed, each block passes r through and the
        # global skip doubles the head features: out = shuffle(tail(2*head(x)))
        net = build_residual_net(2, 8, 2, seed=1)
        for layer in net.layers[1:-2]:
            if layer.op == "conv":
                layer.kernel.data[:] = 0.0
                layer.bias.data[:] = 0.0
        lr = np.random.default_rng(2).random((3, 5, 5), dtype=np.float32)
        got = net.forward(Tensor(lr)).data

        head, tail = net.layers[0], net.layers[-2]
        h0 = conv2d(Tensor(lr), head.kernel, head.bias, head.padding)
        doubled = h0 + h0
        want = pixel_shuffle(conv2d(doubled, tail.kernel, tail.bias, tail.padding),
                             net.scale).data
        np.testing.assert_array_equal(got, want)

    def test_block_skip_is_identity_plus_branch(self):
        net = build_residual_net(1, 8, 2, seed=3)
        lr = np.random.default_rng(4).random((3, 5, 5), dtype=np.float32)
        head, conv_a, act, conv_b, tail = net.layers[:5]
        h0 = conv2d(Tensor(lr), head.kernel, head.bias, head.padding)
        branch = conv2d(prelu(conv2d(h0, conv_a.kernel, conv_a.bias, conv_a.padding),
                              act.slope),
                        conv_b.kernel, conv_b.bias, conv_b.padding)
        body = h0 + branch
        want = pixel_shuffle(conv2d(body + h0, tail.kernel, tail.bias, tail.padding),
                             net.scale).data
        np.testing.assert_array_equal(net.forward(Tensor(lr)).data, want)


class TestLinearUpsampler:
    def test_preserves_constants_away_from_borders(self):
        # zero padding dims the outer 2 LR pixels; the interior is exact
        net = build_linear_upsampler(3)
        lr = np.full((3, 6, 6), 0.37, np.float32)
        sr = net.forward(Tensor(lr)).data
        interior = sr[:, 6:-6, 6:-6]
        np.testing.assert_allclose(interior, 0.37, atol=1e-6)
        assert sr[0, 0, 0] < 0.37  # border really is affected

    def test_is_linear(self):
        net = build_linear_upsampler(2)
        rng = np.random.default_rng(5)
        a = rng.random((3, 6, 6), dtype=np.float32)
        b = rng.random((3, 6, 6), dtype=np.float32)
        fa = net.forward(Tensor(a)).data.astype(np.float64)
        fb = net.forward(Tensor(b)).data.astype(np.float64)
        fab = net.forward(Tensor(a + b)).data.astype(np.float64)
        np.testing.assert_allclose(fab, fa + fb, atol=1e-5)

    def test_impulse_reproduces_tap_weights(self):
        scale = 2
        net = build_linear_upsampler(scale)
        lr = np.zeros((3, 9, 9), np.float32)
        lr[:, 4, 4] = 1.0
        sr = net.forward(Tensor(lr)).data

        def taps(d):
            # output scale*i + d samples input at i + (d + 0.5)/scale - 0.5
            offs = np.arange(-2, 3, dtype=np.float64)
            x = (d + 0.5) / scale - 0.5 - offs
            a = -0.5
            ax = np.abs(x)
            w = np.where(ax <= 1, (a + 2) * ax ** 3 - (a + 3) * ax ** 2 + 1,
                         np.where(ax < 2, a * (ax ** 3 - 5 * ax ** 2 + 8 * ax - 4), 0.0))
            return w / w.sum()

        for dy in range(scale):
            for dx in range(scale):
                for oy in range(-2, 3):
                    for ox in range(-2, 3):
                        want = taps(dy)[2 + oy] * taps(dx)[2 + ox]
                        got = sr[0, scale * (4 - oy) + dy, scale * (4 - ox) + dx]
                        assert got == pytest.approx(want, abs=1e-6)

    def test_not_trainable(self):
        net = build_linear_upsampler(2)
        with pytest.raises(ConfigError):
            train_tiny(net, [np.zeros((3, 64, 64), np.float32)], TrainConfig(iterations=1))


class TestWeightFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        net = build_residual_net(2, 8, 3, seed=9)
        path = tmp_path / "net.lamw"
        save_weights(net, path)
        again = load_weights(path)
        assert serialize_weights(again) == serialize_weights(net)
        lr = np.random.default_rng(1).random((3, 6, 6), dtype=np.float32)
        np.testing.assert_array_equal(net.forward(Tensor(lr)).data,
                                      again.forward(Tensor(lr)).data)

    def test_header_layout(self):
        blob = serialize_weights(build_plain_cnn(2, 8, 2, seed=0))
        magic, version, kind, scale, count = struct.unpack_from("<4sHBBH", blob, 0)
        assert magic == b"LAMW"
        assert version == 1
        assert kind == 1  # plain_cnn
        assert scale == 2
        assert count == 5  # 2x(conv, prelu) + shuffle

    def test_bad_magic(self, tmp_path):
        net = build_plain_cnn(2, 8, 2, seed=0)
        blob = bytearray(serialize_weights(net))
        blob[:4] = b"WLAM"
        path = tmp_path / "bad.lamw"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_weights(path)

    def test_unknown_version(self, tmp_path):
        blob = bytearray(serialize_weights(build_plain_cnn(2, 8, 2, seed=0)))
        struct.pack_into("<H", blob, 4, 2)
        path = tmp_path / "v2.lamw"
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_weights(path)

    def test_truncation_names_the_tensor(self, tmp_path):
        blob = serialize_weights(build_plain_cnn(2, 8, 2, seed=0))
        path = tmp_path / "cut.lamw"
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(TruncatedFileError) as err:
            load_weights(path)
        assert "layer" in str(err.value)

    def test_shape_mismatch(self, tmp_path):
        net = build_plain_cnn(2, 8, 2, seed=0)
        blob = bytearray(serialize_weights(net))
        # header is 10 bytes, then 5 layer descriptors of 9 bytes each;
        # first tensor record starts right after with a u32 rank
        offset = 10 + 5 * 9
        rank = struct.unpack_from("<I", blob, offset)[0]
        struct.pack_into("<I", blob, offset + 4, 999)  # corrupt first dim
        assert rank == 4
        path = tmp_path / "warp.lamw"
        path.write_bytes(bytes(blob))
        with pytest.raises((ShapeMismatchError, TruncatedFileError)):
            load_weights(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        blob = serialize_weights(build_plain_cnn(2, 8, 2, seed=0))
        path = tmp_path / "tail.lamw"
        path.write_bytes(blob + b"\x00")
        with pytest.raises(WeightLoadError):
            load_weights(path)

    def test_nan_weights_load(self, tmp_path):
        # NaN is a payload question for cmd_verify, not a format error
        net = build_plain_cnn(2, 8, 2, seed=0)
        net.layers[0].kernel.data[0, 0, 0, 0] = np.nan
        path = tmp_path / "nan.lamw"
        save_weights(net, path)
        again = load_weights(path)
        assert math.isnan(again.layers[0].kernel.data[0, 0, 0, 0])


class TestAdam:
    def test_single_step_matches_hand_computation(self):
        p = Tensor(np.asarray([1.0], np.float32), requires_grad=True)
        p.grad = np.asarray([0.5], np.float32)
        opt = Adam([p], learning_rate=0.1, beta1=0.9, beta2=0.999)
        opt.step()
        # bias-corrected first step: m_hat = g, v_hat = g^2
        want = 1.0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert p.data[0] == pytest.approx(want, rel=1e-6)

    def test_two_steps_match_hand_computation(self):
        p = Tensor(np.asarray([1.0], np.float32), requires_grad=True)
        opt = Adam([p], learning_rate=0.1, beta1=0.9, beta2=0.999)
        m = v = 0.0
        x = 1.0
        for t, g in ((1, 0.5), (2, -0.25)):
            p.grad = np.asarray([g], np.float32)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            x -= 0.1 * mh / (math.sqrt(vh) + 1e-8)
            assert p.data[0] == pytest.approx(x, rel=1e-6)

    def test_unused_parameter_is_left_alone(self):
        p = Tensor(np.asarray([2.0], np.float32), requires_grad=True)
        opt = Adam([p], 0.1, 0.9, 0.999)
        p.grad = None
        opt.step()
        assert p.data[0] == 2.0


class TestTraining:
    def test_zero_iterations_is_identity(self, train_textures):
        net = build_plain_cnn(3, 8, 2, seed=11)
        before = serialize_weights(net)
        history = train_tiny(net, train_textures, TrainConfig(iterations=0))
        assert history == []
        assert serialize_weights(net) == before

    def test_loss_decreases(self, train_textures):
        net = build_plain_cnn(3, 8, 2, seed=11)
        history = train_tiny(net, train_textures,
                             TrainConfig(iterations=80, patch_size=12, minibatch=4,
                                         seed=0, learning_rate=3e-4))
        assert len(history) == 80
        assert np.mean(history[-20:]) < np.mean(history[:20])

    def test_training_is_deterministic(self, train_textures):
        cfg = TrainConfig(iterations=12, patch_size=12, minibatch=4, seed=5)
        a = build_plain_cnn(3, 8, 2, seed=11)
        b = build_plain_cnn(3, 8, 2, seed=11)
        train_tiny(a, train_textures, cfg)
        train_tiny(b, train_textures, cfg)
        assert serialize_weights(a) == serialize_weights(b)

    def test_weights_frozen_after_training(self, train_textures):
        net = build_plain_cnn(3, 8, 2, seed=11)
        train_tiny(net, train_textures, TrainConfig(iterations=2, patch_size=12,
                                                    minibatch=2))
        assert all(not t.requires_grad for _, t in net.weights())

    def test_bad_images_named_by_index(self):
        net = build_plain_cnn(3, 8, 2, seed=0)
        good = np.zeros((3, 64, 64), np.float32)
        with pytest.raises(DataError) as err:
            train_tiny(net, [good, np.zeros((1, 64, 64), np.float32)],
                       TrainConfig(iterations=1))
        assert "image 1" in str(err.value)
        with pytest.raises(DataError) as err:
            train_tiny(net, [np.zeros((3, 16, 16), np.float32)],
                       TrainConfig(iterations=1, patch_size=32))
        assert "image 0" in str(err.value)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=-1)
        with pytest.raises(ConfigError):
            TrainConfig(minibatch=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)


class TestReceptiveField:
    @pytest.mark.parametrize("net,side", [
        (build_plain_cnn(4, 8, 4, seed=0), 9),
        (build_plain_cnn(8, 8, 4, seed=0), 17),
        (build_residual_net(1, 8, 4, seed=0), 9),
        (build_residual_net(2, 8, 4, seed=0), 13),
        (build_residual_net(3, 8, 4, seed=0), 17),
        (build_linear_upsampler(4), 5),
    ])
    def test_analytic_side(self, net, side):
        assert receptive_field(net) == side

    def test_probe_agrees_with_analytic(self):
        for net in (build_plain_cnn(4, 8, 2, seed=1),
                    build_residual_net(2, 8, 2, seed=1),
                    build_linear_upsampler(2)):
            side = receptive_field(net)
            assert probe_receptive_field(net, side + 8, seed=0) == side

    def test_forward_impulse_probe(self):
        # independent of backward: push an impulse through and find the
        # extent of changed SR pixels, which equals RF by symmetry
        net = build_plain_cnn(4, 8, 2, seed=2)
        size = 31
        base = np.full((3, size, size), 0.5, np.float32)
        bumped = base.copy()
        bumped[:, size // 2, size // 2] += 0.25
        delta = np.abs(net.forward(Tensor(bumped)).data - net.forward(Tensor(base)).data)
        rows = np.where(delta.sum(axis=(0, 2)) > 1e-7)[0]
        lr_extent = math.ceil((rows[-1] + 1) / net.scale) - rows[0] // net.scale
        assert lr_extent == receptive_field(net)
